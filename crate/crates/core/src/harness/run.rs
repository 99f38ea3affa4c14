//! Command implementations. Each writes its artifacts under
//! `paths.output` and echoes the effective configuration there.
//!
//! ```text
//! <output>/config.toml
//! <output>/boxes.csv
//! <output>/pseudo/labelmaps/<patch_id>.png, pseudo/pseudolabels.csv
//! <output>/splits.csv
//! <output>/train/checkpoint.json, last.json, history.csv
//! <output>/evaluate/report.csv, report.txt
//! <output>/report/report.csv, report.txt
//! <output>/matrix/<group>/<method>/...,  matrix/report.csv, report.txt
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use super::config::{Backend, GroupConfig, LabelSource, MatrixMethod, PipelineConfig};
use super::synth::{generate_synthetic, SyntheticCorpus};
use crate::boxgen::{boxes_for_corpus, read_boxes_csv, write_boxes_csv, BoxKind, BoxPrompt};
use crate::csvio::{read_csv, write_atomic};
use crate::dataset::{
    load_corpus, read_labelmap_png, read_splits_csv, stratified_split, write_splits_csv, Corpus, LabelMap, Split,
    SplitAssignment, Stratum,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_report, annotation_scores, EvalReport, Pooling};
use crate::mocl::{predict_tensor, train, Checkpoint, HistoryRow, MoclConfig, Sample, TrainOptions, TrainOutcome};
use crate::promptseg::{
    pseudolabel_corpus, ExternalModelAdapter, OracleSegmenter, PromptableSegmenter, PseudolabelOptions,
    PseudolabelOutput,
};
use crate::seeding;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub jobs: usize,
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { jobs: 1, resume: false }
    }
}

fn out(cfg: &PipelineConfig, rel: &str) -> PathBuf {
    cfg.paths.output.join(rel)
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        log::error!("{} is missing; {hint}", path.display());
        Err(Error::ArtifactMissing(path.to_path_buf()))
    }
}

/// Writes the clean and corrupted corpora under `paths.output`.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<SyntheticCorpus> {
    let synth = generate_synthetic(&cfg.synthetic, &cfg.paths.output)?;
    cfg.echo_into(&cfg.paths.output)?;
    info!(
        "wrote {} patches / {} instances to {}",
        synth.clean.patches().len(),
        synth.clean.instances().len(),
        cfg.paths.output.display()
    );
    Ok(synth)
}

pub fn cmd_boxes(cfg: &PipelineConfig, _opts: RunOptions) -> Result<Vec<BoxPrompt>> {
    let corpus = load_corpus(&cfg.paths.corpus)?;
    let boxes = boxes_for_corpus(&corpus, cfg.boxes.mode, &cfg.boxes.perturb())?;
    write_boxes_csv(&out(cfg, "boxes.csv"), &boxes)?;
    cfg.echo_into(&cfg.paths.output)?;
    info!("{} {} boxes", boxes.len(), cfg.boxes.mode);
    Ok(boxes)
}

/// The configured segmenter. The oracle answers from `annotations`.
pub fn make_segmenter(cfg: &PipelineConfig, annotations: &Corpus) -> Result<Box<dyn PromptableSegmenter>> {
    Ok(match cfg.segmenter.backend {
        Backend::Oracle => Box::new(OracleSegmenter::from_corpus(annotations, cfg.segmenter.oracle_noise)),
        Backend::External => Box::new(ExternalModelAdapter::new(cfg.segmenter.external.clone())?),
    })
}

pub fn cmd_pseudolabel(cfg: &PipelineConfig, opts: RunOptions) -> Result<PseudolabelOutput> {
    let corpus = load_corpus(&cfg.paths.corpus)?;
    let segmenter = make_segmenter(cfg, &corpus)?;
    let boxes_path = out(cfg, "boxes.csv");
    require(&boxes_path, "run `boxes` first")?;
    let boxes = read_boxes_csv(&boxes_path)?;
    let result = pseudolabel_corpus(
        &corpus,
        &boxes,
        segmenter.as_ref(),
        &PseudolabelOptions {
            out_dir: Some(out(cfg, "pseudo")),
            resume: opts.resume,
            jobs: opts.jobs,
            policy: cfg.segmenter.merge_policy,
        },
    )?;
    cfg.echo_into(&cfg.paths.output)?;
    result.into_result()
}

/// Reuses `splits.csv` under `--resume`, otherwise recomputes and writes it.
pub fn splits(cfg: &PipelineConfig, corpus: &Corpus, opts: RunOptions) -> Result<SplitAssignment> {
    let path = out(cfg, "splits.csv");
    if opts.resume && path.is_file() {
        return read_splits_csv(&path, cfg.split.seed, cfg.split.ratios);
    }
    let split = stratified_split(corpus, cfg.split.ratios, cfg.split.seed)?;
    write_splits_csv(&path, &split)?;
    Ok(split)
}

/// Pairs each listed patch image with its label map.
pub fn samples(corpus: &Corpus, ids: &[&str], labels: &BTreeMap<String, LabelMap>) -> Result<Vec<Sample<f32>>> {
    ids.par_iter()
        .map(|id| {
            let patch = corpus
                .patch(id)
                .ok_or_else(|| Error::Invalid(format!("patch {id} not in corpus")))?;
            let lm = labels
                .get(*id)
                .ok_or_else(|| Error::Invalid(format!("no label map for patch {id}")))?;
            Sample::new(patch, lm.clone())
        })
        .collect()
}

pub fn corpus_labelmaps(corpus: &Corpus) -> Result<BTreeMap<String, LabelMap>> {
    corpus
        .patches()
        .iter()
        .map(|p| {
            corpus
                .labelmap(&p.patch_id)
                .map(|lm| (p.patch_id.clone(), lm))
                .ok_or_else(|| Error::Invalid(format!("cannot build label map for {}", p.patch_id)))
        })
        .collect()
}

fn pseudo_labelmaps(cfg: &PipelineConfig, ids: &[&str]) -> Result<BTreeMap<String, LabelMap>> {
    let dir = out(cfg, "pseudo/labelmaps");
    ids.iter()
        .map(|id| {
            let path = dir.join(format!("{id}.png"));
            require(&path, "run `pseudolabel` first")?;
            Ok(((*id).to_owned(), read_labelmap_png(&path, id)?))
        })
        .collect()
}

/// Trains into `dir`, or under `resume` reloads a finished run from it.
pub fn train_or_resume(
    train_set: &[Sample<f32>],
    val_set: &[Sample<f32>],
    mocl: &MoclConfig,
    dir: &Path,
    resume: bool,
) -> Result<TrainOutcome<f32>> {
    if resume {
        let (best, last, hist) = (dir.join("checkpoint.json"), dir.join("last.json"), dir.join("history.csv"));
        if best.is_file() && last.is_file() && hist.is_file() {
            let history: Vec<HistoryRow> = read_csv(&hist)?;
            let last = Checkpoint::load(&last)?;
            if history.len() == mocl.epochs && last.config == *mocl {
                info!("reusing finished run in {}", dir.display());
                return Ok(TrainOutcome {
                    best: Checkpoint::load(&best)?,
                    last,
                    history,
                });
            }
        }
    }
    train(
        train_set,
        val_set,
        mocl,
        &TrainOptions {
            out_dir: Some(dir.to_path_buf()),
        },
    )
}

/// Training targets come from `paths.corpus` (or pseudo-labels); validation
/// targets from `paths.reference`.
pub fn cmd_train(cfg: &PipelineConfig, opts: RunOptions) -> Result<TrainOutcome<f32>> {
    let corpus = load_corpus(&cfg.paths.corpus)?;
    let reference = load_corpus(cfg.paths.reference())?;
    let split = splits(cfg, &reference, opts)?;
    let (train_ids, val_ids) = (split.ids(Split::Train), split.ids(Split::Val));
    let labels = match cfg.train.labels {
        LabelSource::Annotations => corpus_labelmaps(&corpus)?,
        LabelSource::Pseudo => pseudo_labelmaps(cfg, &train_ids)?,
    };
    let train_set = samples(&corpus, &train_ids, &labels)?;
    let val_set = samples(&reference, &val_ids, &corpus_labelmaps(&reference)?)?;
    cfg.echo_into(&cfg.paths.output)?;
    train_or_resume(&train_set, &val_set, &cfg.mocl, &out(cfg, "train"), opts.resume)
}

fn strata(corpus: &Corpus) -> BTreeMap<String, Stratum> {
    corpus.patches().iter().map(|p| (p.patch_id.clone(), p.stratum)).collect()
}

/// Scores model predictions on `ids` of `reference`.
pub fn evaluate_model(
    model: &crate::Model,
    reference: &Corpus,
    ids: &[&str],
    method: &str,
    group: &str,
    pooling: Pooling,
) -> Result<EvalReport> {
    let truth = corpus_labelmaps(reference)?;
    let test = samples(reference, ids, &truth)?;
    let preds: BTreeMap<String, LabelMap> = test
        .par_iter()
        .map(|s| Ok((s.patch_id.clone(), predict_tensor(model, &s.patch_id, &s.input)?)))
        .collect::<Result<_>>()?;
    let candidates = BTreeMap::from([("model".to_owned(), preds)]);
    let scores = annotation_scores(method, group, &candidates, &truth, &strata(reference))?;
    Ok(aggregate_report(&scores, pooling))
}

fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    report.write_csv(&dir.join("report.csv"))?;
    write_atomic(&dir.join("report.txt"), report.to_table().as_bytes())
}

/// Scores a checkpoint (default `<output>/train/checkpoint.json`) on the
/// test split of `paths.reference`.
pub fn cmd_evaluate(cfg: &PipelineConfig, opts: RunOptions, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let default = out(cfg, "train/checkpoint.json");
    let path = checkpoint.unwrap_or(&default);
    let ckpt = Checkpoint::<f32>::load(path)?;
    let reference = load_corpus(cfg.paths.reference())?;
    let split = splits(cfg, &reference, RunOptions { resume: true, ..opts })?;
    let report = evaluate_model(
        &ckpt.model,
        &reference,
        &split.ids(Split::Test),
        &cfg.metrics.method,
        &cfg.metrics.group,
        cfg.metrics.pooling,
    )?;
    write_report(&report, &out(cfg, "evaluate"))?;
    cfg.echo_into(&cfg.paths.output)?;
    Ok(report)
}

fn by_annotator(corpus: &Corpus, maps: BTreeMap<String, LabelMap>) -> BTreeMap<String, BTreeMap<String, LabelMap>> {
    let mut out: BTreeMap<String, BTreeMap<String, LabelMap>> = BTreeMap::new();
    for (id, lm) in maps {
        let annotator = corpus.patch(&id).map_or_else(String::new, |p| p.annotator_id.clone());
        out.entry(annotator).or_default().insert(id, lm);
    }
    out
}

/// Pseudo-labels for `annotations` from boxes of the given kind, in memory.
pub fn box_pseudolabels(
    cfg: &PipelineConfig,
    annotations: &Corpus,
    kind: BoxKind,
    segmenter: &dyn PromptableSegmenter,
    jobs: usize,
) -> Result<BTreeMap<String, LabelMap>> {
    let boxes = boxes_for_corpus(annotations, kind, &cfg.boxes.perturb())?;
    let result = pseudolabel_corpus(
        annotations,
        &boxes,
        segmenter,
        &PseudolabelOptions {
            out_dir: None,
            resume: false,
            jobs,
            policy: cfg.segmenter.merge_policy,
        },
    )?
    .into_result()?;
    Ok(result.labelmaps)
}

/// Accuracy of the annotations themselves ("manual") and of tight- and
/// random-box pseudo-labels derived from them, against the reference.
pub fn annotation_report(
    cfg: &PipelineConfig,
    annotations: &Corpus,
    reference: &Corpus,
    segmenter: &dyn PromptableSegmenter,
    jobs: usize,
) -> Result<EvalReport> {
    let truth = corpus_labelmaps(reference)?;
    let st = strata(reference);
    let group = cfg.metrics.group.as_str();
    let mut scores = annotation_scores("manual", group, &by_annotator(annotations, corpus_labelmaps(annotations)?), &truth, &st)?;
    for (name, kind) in [("sam-l-tight", BoxKind::Tight), ("sam-l-random", BoxKind::Random)] {
        let maps = box_pseudolabels(cfg, annotations, kind, segmenter, jobs)?;
        scores.extend(annotation_scores(name, group, &by_annotator(annotations, maps), &truth, &st)?);
    }
    Ok(aggregate_report(&scores, cfg.metrics.pooling))
}

pub fn cmd_report(cfg: &PipelineConfig, opts: RunOptions) -> Result<EvalReport> {
    let annotations = load_corpus(&cfg.paths.corpus)?;
    let reference = load_corpus(cfg.paths.reference())?;
    let segmenter = make_segmenter(cfg, &annotations)?;
    let report = annotation_report(cfg, &annotations, &reference, segmenter.as_ref(), opts.jobs)?;
    write_report(&report, &out(cfg, "report"))?;
    cfg.echo_into(&cfg.paths.output)?;
    Ok(report)
}

/// Seed of the training run for one matrix cell.
pub fn matrix_seed(base: u64, group: &str, method: MatrixMethod) -> u64 {
    seeding::derive_seed(base, &[b"matrix", group.as_bytes(), method.name().as_bytes()])
}

/// One independently seeded training run per (method, group), each scored
/// on the test split of the reference corpus.
pub fn run_experiment_matrix(cfg: &PipelineConfig, opts: RunOptions) -> Result<EvalReport> {
    let reference = load_corpus(cfg.paths.reference())?;
    let split = splits(cfg, &reference, opts)?;
    let (train_ids, val_ids, test_ids) = (split.ids(Split::Train), split.ids(Split::Val), split.ids(Split::Test));
    let val_set = samples(&reference, &val_ids, &corpus_labelmaps(&reference)?)?;
    let groups = if cfg.matrix.groups.is_empty() {
        vec![GroupConfig {
            name: cfg.metrics.group.clone(),
            corpus: cfg.paths.corpus.clone(),
        }]
    } else {
        cfg.matrix.groups.clone()
    };
    let mut rows = Vec::new();
    for group in &groups {
        let annotations = load_corpus(&group.corpus)?;
        let segmenter = make_segmenter(cfg, &annotations)?;
        for &method in &cfg.matrix.methods {
            let labels = match method {
                MatrixMethod::Pixel => corpus_labelmaps(&annotations)?,
                MatrixMethod::TightBox => {
                    box_pseudolabels(cfg, &annotations, BoxKind::Tight, segmenter.as_ref(), opts.jobs)?
                }
                MatrixMethod::RandomBox => {
                    box_pseudolabels(cfg, &annotations, BoxKind::Random, segmenter.as_ref(), opts.jobs)?
                }
            };
            let train_set = samples(&annotations, &train_ids, &labels)?;
            let mocl = MoclConfig {
                seed: matrix_seed(cfg.seed, &group.name, method),
                ..cfg.mocl.clone()
            };
            let dir = out(cfg, &format!("matrix/{}/{}", group.name, method.name()));
            info!("matrix: {} / {} (seed {})", group.name, method.name(), mocl.seed);
            let outcome = train_or_resume(&train_set, &val_set, &mocl, &dir, opts.resume)?;
            let report = evaluate_model(
                &outcome.best.model,
                &reference,
                &test_ids,
                method.name(),
                &group.name,
                cfg.metrics.pooling,
            )?;
            rows.extend(report.rows);
        }
    }
    let report = EvalReport {
        pooling: cfg.metrics.pooling,
        rows,
    };
    write_report(&report, &out(cfg, "matrix"))?;
    cfg.echo_into(&cfg.paths.output)?;
    Ok(report)
}
