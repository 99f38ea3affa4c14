use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::confidence::{confidence_map, Aggregation, ConfidenceMap, ConfidenceOptions};
use super::loss::mocl_loss;
use super::model::{Architecture, Gradients, SegmenterModel, STRIDE};
use super::tensor::{softmax, Tensor};
use crate::csvio::{write_atomic, write_csv};
use crate::dataset::{CellClass, LabelMap, Patch};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::class_f1;
use crate::scalar::Scalar;
use crate::seeding;

pub const CHECKPOINT_FORMAT: &str = "saml-checkpoint/1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSchedule {
    /// Recompute from the current weights for every batch.
    #[default]
    PerBatch,
    /// Compute once at the start of each epoch.
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoclConfig {
    /// Anchors per class, as a fraction of that class's labeled pixels.
    pub k_fraction: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub similarity_aggregation: Aggregation,
    /// `false` trains with plain cross-entropy throughout.
    pub corrective: bool,
    pub uniform_background: bool,
    pub sample_pixels: Option<usize>,
    pub confidence_schedule: ConfidenceSchedule,
    pub architecture: String,
}

impl Default for MoclConfig {
    fn default() -> Self {
        MoclConfig {
            k_fraction: 0.05,
            warmup_epochs: 5,
            epochs: 20,
            batch_size: 4,
            learning_rate: 3e-3,
            seed: 0,
            similarity_aggregation: Aggregation::Mean,
            corrective: true,
            uniform_background: false,
            sample_pixels: None,
            confidence_schedule: ConfidenceSchedule::PerBatch,
            architecture: Architecture::default().to_string(),
        }
    }
}

impl MoclConfig {
    pub fn validate(&self) -> Result<Architecture> {
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::Config(format!("k_fraction {} not in (0, 1]", self.k_fraction)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.sample_pixels == Some(0) {
            return Err(Error::Config("sample_pixels must be at least 1".into()));
        }
        self.architecture.parse()
    }

    /// True when `epoch` (1-based) uses confidence weighting.
    pub fn reweights(&self, epoch: usize) -> bool {
        self.corrective && epoch > self.warmup_epochs
    }

    fn confidence_options(&self, epoch: usize, batch: usize) -> ConfidenceOptions {
        ConfidenceOptions {
            aggregation: self.similarity_aggregation,
            uniform_background: self.uniform_background,
            sample_pixels: self.sample_pixels,
            seed: seeding::derive_seed(
                self.seed,
                &[b"confidence", &epoch.to_le_bytes(), &batch.to_le_bytes()],
            ),
        }
    }
}

/// Network input paired with its (pseudo-)label map.
#[derive(Clone, Debug)]
pub struct Sample<F> {
    pub patch_id: String,
    pub input: Tensor<F>,
    pub labels: LabelMap,
}

impl<F: Scalar> Sample<F> {
    pub fn new(patch: &Patch, labels: LabelMap) -> Result<Self> {
        if patch.dims() != labels.dims() {
            return Err(Error::DimensionMismatch {
                what: format!("label map for {}", patch.patch_id),
                expected: patch.dims(),
                actual: labels.dims(),
            });
        }
        Ok(Sample {
            patch_id: patch.patch_id.clone(),
            input: Tensor::from_rgb(&patch.image),
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice_podocyte: f64,
    pub val_dice_mesangial: f64,
    pub val_dice_macro: f64,
    pub mean_confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<F> {
    pub format: String,
    pub architecture: String,
    pub config: MoclConfig,
    pub seed: u64,
    pub epoch: usize,
    pub val_dice_macro: f64,
    pub model: SegmenterModel<F>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| Error::Invalid(format!("serialize checkpoint: {e}")))?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::ArtifactMissing(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint<F> = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Invalid(format!("checkpoint {}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Invalid(format!(
                "checkpoint {} has format `{}`, expected `{CHECKPOINT_FORMAT}`",
                path.display(),
                ckpt.format
            )));
        }
        let arch: Architecture = ckpt.architecture.parse()?;
        if arch != ckpt.model.architecture {
            return Err(Error::Invalid(format!(
                "checkpoint {}: descriptor `{}` disagrees with stored weights",
                path.display(),
                ckpt.architecture
            )));
        }
        Ok(ckpt)
    }
}

/// Where per-epoch artifacts go. With `out_dir` set, `checkpoint.json`
/// (best so far), `last.json` and `history.csv` are rewritten after every
/// epoch, so a failure mid-run keeps the last completed epoch.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub best: Checkpoint<F>,
    pub last: Checkpoint<F>,
    pub history: Vec<HistoryRow>,
}

struct Adam<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: i32,
}

impl<F: Scalar> Adam<F> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &SegmenterModel<F>) -> Self {
        let zeros: Vec<Vec<F>> = model.params().iter().map(|p| vec![F::zero(); p.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut SegmenterModel<F>, grads: &Gradients<F>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (F::lit(Self::BETA1), F::lit(Self::BETA2));
        let c1 = F::one() - b1.powi(self.t);
        let c2 = F::one() - b2.powi(self.t);
        let (lr, eps) = (F::lit(lr), F::lit(Self::EPS));
        for (k, p) in model.params_mut().into_iter().enumerate() {
            let g = &grads.buffers[k];
            for j in 0..p.len() {
                let m = &mut self.m[k][j];
                let v = &mut self.v[k][j];
                *m = b1 * *m + (F::one() - b1) * g[j];
                *v = b2 * *v + (F::one() - b2) * g[j] * g[j];
                p[j] -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Per-class predicted probabilities and embeddings for one sample.
fn forward_maps<F: Scalar>(model: &SegmenterModel<F>, input: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
    let out = model.forward(input)?;
    if !out.logits.is_finite() {
        return Err(Error::NonFinite("network logits".into()));
    }
    Ok((softmax(&out.logits), out.embeddings))
}

fn sample_confidence<F: Scalar>(
    model: &SegmenterModel<F>,
    sample: &Sample<F>,
    cfg: &MoclConfig,
    opts: &ConfidenceOptions,
) -> Result<ConfidenceMap<F>> {
    let (probs, emb) = forward_maps(model, &sample.input)?;
    Ok(confidence_map(&probs, &emb, &sample.labels, cfg.k_fraction, opts))
}

/// Trains a fresh network. The first `warmup_epochs` epochs (and every
/// epoch when `corrective` is off) use uniform weights. The returned best
/// checkpoint maximizes validation macro Dice over podocyte and mesangial.
///
/// The embedding head is not trained: it stays a fixed random projection of
/// the last decoder features, so cosine similarity between embeddings tracks
/// similarity of the learned features without an extra objective.
pub fn train<F: Scalar>(
    train_set: &[Sample<F>],
    val_set: &[Sample<F>],
    cfg: &MoclConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome<F>> {
    let arch = cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    if val_set.is_empty() {
        warn!("validation split is empty; the last epoch is kept as best");
    }
    let mut model = SegmenterModel::<F>::new(arch, cfg.seed);
    let mut adam = Adam::new(&model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<Checkpoint<F>> = None;
    let mut last = None;

    for epoch in 1..=cfg.epochs {
        let reweight = cfg.reweights(epoch);
        let mut rng = seeding::stream(cfg.seed, &[b"order", &epoch.to_le_bytes()]);
        order.shuffle(&mut rng);
        let epoch_conf: Option<Vec<ConfidenceMap<F>>> =
            if reweight && cfg.confidence_schedule == ConfidenceSchedule::PerEpoch {
                let o = cfg.confidence_options(epoch, 0);
                Some(
                    train_set
                        .par_iter()
                        .map(|s| sample_confidence(&model, s, cfg, &o))
                        .collect::<Result<_>>()?,
                )
            } else {
                None
            };

        let (mut loss_sum, mut conf_sum) = (0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let copts = cfg.confidence_options(epoch, b + 1);
            let model_ref = &model;
            let per_sample: Vec<(Gradients<F>, f64, f64)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let out = model_ref.forward(&s.input)?;
                    let conf = if !reweight {
                        None
                    } else if let Some(maps) = &epoch_conf {
                        Some(maps[i].clone())
                    } else {
                        let probs = softmax(&out.logits);
                        Some(confidence_map(&probs, &out.embeddings, &s.labels, cfg.k_fraction, &copts))
                    };
                    let l = mocl_loss(&out.logits, &s.labels, conf.as_ref())?;
                    let mut g = Gradients::zero_like(model_ref);
                    model_ref.backward(&out.cache, &l.grad, &mut g);
                    let mean_conf = conf.map_or(1.0, |c| c.mean().as_f64());
                    Ok((g, l.loss.as_f64(), mean_conf))
                })
                .collect::<Result<_>>()?;
            // summed in batch order, independent of thread scheduling
            let mut grads = Gradients::zero_like(&model);
            for (g, l, c) in &per_sample {
                for (acc, part) in grads.buffers.iter_mut().zip(&g.buffers) {
                    for (a, &p) in acc.iter_mut().zip(part) {
                        *a += p;
                    }
                }
                loss_sum += l;
                conf_sum += c;
            }
            grads.scale(F::lit(1.0 / batch.len() as f64));
            adam.step(&mut model, &grads, cfg.learning_rate);
        }
        let n = train_set.len() as f64;
        let (pod, mes) = if val_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            validation_dice(&model, val_set)?
        };
        let macro_dice = (pod + mes) / 2.0;
        let row = HistoryRow {
            epoch,
            train_loss: loss_sum / n,
            val_dice_podocyte: pod,
            val_dice_mesangial: mes,
            val_dice_macro: macro_dice,
            mean_confidence: conf_sum / n,
        };
        info!(
            "epoch {epoch}/{}: loss {:.4} val dice {:.4} (pod {:.4}, mes {:.4}) conf {:.3}",
            cfg.epochs, row.train_loss, macro_dice, pod, mes, row.mean_confidence
        );
        if !row.train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        history.push(row);
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            architecture: arch.to_string(),
            config: cfg.clone(),
            seed: cfg.seed,
            epoch,
            val_dice_macro: macro_dice,
            model: model.clone(),
        };
        let improved = match &best {
            None => true,
            Some(b) => val_set.is_empty() || macro_dice > b.val_dice_macro,
        };
        if let Some(dir) = &opts.out_dir {
            ckpt.save(&dir.join("last.json"))?;
            if improved {
                ckpt.save(&dir.join("checkpoint.json"))?;
            }
            write_csv(&dir.join("history.csv"), &history)?;
        }
        if improved {
            best = Some(ckpt.clone());
        }
        last = Some(ckpt);
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        last: last.expect("at least one epoch"),
        history,
    })
}

/// Pooled Dice for podocyte and mesangial over a sample set.
pub fn validation_dice<F: Scalar>(model: &SegmenterModel<F>, samples: &[Sample<F>]) -> Result<(f64, f64)> {
    let preds: Vec<LabelMap> = samples
        .par_iter()
        .map(|s| predict_tensor(model, &s.patch_id, &s.input))
        .collect::<Result<_>>()?;
    let mut out = [0.0; 2];
    for (slot, class) in out.iter_mut().zip([CellClass::Podocyte, CellClass::Mesangial]) {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (p, s) in preds.iter().zip(samples) {
            let sc = class_f1(p, &s.labels, class.index())?;
            tp += sc.tp;
            fp += sc.fp;
            fn_ += sc.fn_;
        }
        *slot = if tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
    }
    Ok((out[0], out[1]))
}

/// Argmax label map. Inputs whose sides are not multiples of the network
/// stride are reflect-padded and the prediction cropped back.
pub fn predict_tensor<F: Scalar>(model: &SegmenterModel<F>, patch_id: &str, input: &Tensor<F>) -> Result<LabelMap> {
    let (h, w) = input.dims();
    let padded = input.pad_reflect_to(STRIDE);
    let out = model.forward(&padded)?;
    if !out.logits.is_finite() {
        return Err(Error::NonFinite(format!("logits for {patch_id}")));
    }
    let logits = out.logits.crop(h, w);
    let n = h * w;
    let classes = Grid::from_fn(h, w, |r, c| {
        let p = r * w + c;
        let mut best = 0u8;
        for ch in 1..logits.channels {
            if logits.data[ch * n + p] > logits.data[usize::from(best) * n + p] {
                best = ch as u8;
            }
        }
        best
    });
    LabelMap::new(patch_id, classes)
}

pub fn predict<F: Scalar>(model: &SegmenterModel<F>, patch: &Patch) -> Result<LabelMap> {
    predict_tensor(model, &patch.patch_id, &Tensor::from_rgb(&patch.image))
}
