use log::warn;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::dataset::LabelMap;
use crate::grid::Grid;
use crate::scalar::Scalar;
use crate::seeding;

/// Per-pixel loss weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceMap<F> {
    pub patch_id: String,
    pub weights: Grid<F>,
}

impl<F: Scalar> ConfidenceMap<F> {
    pub fn uniform(patch_id: impl Into<String>, height: usize, width: usize) -> Self {
        ConfidenceMap {
            patch_id: patch_id.into(),
            weights: Grid::filled(height, width, F::one()),
        }
    }

    pub fn mean(&self) -> F {
        let n = self.weights.as_slice().len();
        if n == 0 {
            return F::zero();
        }
        self.weights.as_slice().iter().copied().sum::<F>() / F::lit(n as f64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

/// Most confident labeled pixels of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchors<F> {
    pub class: u8,
    /// `(row, col)`, in descending probability order.
    pub pixels: Vec<(usize, usize)>,
    pub embeddings: Vec<Vec<F>>,
}

impl<F> Anchors<F> {
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }
}

pub fn anchor_count(k_fraction: f64, n_labeled: usize) -> usize {
    if n_labeled == 0 {
        return 0;
    }
    ((k_fraction * n_labeled as f64).round() as usize).clamp(1, n_labeled)
}

/// Picks the `max(1, round(k_fraction · n))` pixels labeled `class` with the
/// highest predicted probability for `class`; ties go to the earlier pixel
/// in row-major order.
pub fn select_topk_anchors<F: Scalar>(
    probs: &Tensor<F>,
    embeddings: &Tensor<F>,
    labels: &LabelMap,
    class: u8,
    k_fraction: f64,
) -> Anchors<F> {
    let (_, w) = labels.dims();
    let plane = probs.plane(usize::from(class));
    let mut candidates: Vec<usize> = labels
        .classes()
        .as_slice()
        .iter()
        .enumerate()
        .filter(|&(_, &y)| y == class)
        .map(|(p, _)| p)
        .collect();
    let k = anchor_count(k_fraction, candidates.len());
    // stable sort keeps row-major order among equal probabilities
    candidates.sort_by(|&a, &b| plane[b].partial_cmp(&plane[a]).unwrap_or(std::cmp::Ordering::Equal));
    candidates.truncate(k);
    Anchors {
        class,
        pixels: candidates.iter().map(|&p| (p / w, p % w)).collect(),
        embeddings: candidates.iter().map(|&p| embeddings.pixel(p / w, p % w)).collect(),
    }
}

fn normalized<F: Scalar>(v: &[F]) -> Option<Vec<F>> {
    let norm = v.iter().map(|&x| x * x).sum::<F>().sqrt();
    (norm > F::zero() && norm.is_finite()).then(|| v.iter().map(|&x| x / norm).collect())
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Knobs for [`confidence_from_anchors`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfidenceOptions {
    pub aggregation: Aggregation,
    /// Background pixels get weight 1 instead of anchor similarity.
    pub uniform_background: bool,
    /// Compare against at most this many randomly drawn anchors per class.
    pub sample_pixels: Option<usize>,
    pub seed: u64,
}

/// Weight of a pixel labeled `c` is `(s + 1) / 2`, where `s` aggregates the
/// cosine similarity between its embedding and each anchor of `c`. Classes
/// without anchors get weight 1.
pub fn confidence_from_anchors<F: Scalar>(
    anchors: &[Anchors<F>],
    embeddings: &Tensor<F>,
    labels: &LabelMap,
    opts: &ConfidenceOptions,
) -> ConfidenceMap<F> {
    let (h, w) = labels.dims();
    let mut weights = Grid::filled(h, w, F::one());
    let half = F::lit(0.5);
    let mut zero_norm = 0usize;
    for a in anchors {
        if a.is_empty() || (opts.uniform_background && a.class == 0) {
            continue;
        }
        let chosen: Vec<&Vec<F>> = match opts.sample_pixels {
            Some(m) if m < a.len() => {
                let mut rng = seeding::stream(opts.seed, &[labels.patch_id.as_bytes(), &[a.class]]);
                let mut idx = sample(&mut rng, a.len(), m.max(1)).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| &a.embeddings[i]).collect()
            }
            _ => a.embeddings.iter().collect(),
        };
        let unit: Vec<Vec<F>> = chosen
            .iter()
            .map(|e| {
                normalized(e).unwrap_or_else(|| {
                    zero_norm += 1;
                    vec![F::zero(); e.len()]
                })
            })
            .collect();
        // mean cosine over anchors = dot with the mean of the unit anchors
        let centroid: Vec<F> = {
            let d = embeddings.channels;
            let mut c = vec![F::zero(); d];
            for u in &unit {
                for (ci, &ui) in c.iter_mut().zip(u) {
                    *ci += ui;
                }
            }
            let n = F::lit(unit.len() as f64);
            c.iter_mut().for_each(|v| *v /= n);
            c
        };
        for (p, &y) in labels.classes().as_slice().iter().enumerate() {
            if y != a.class {
                continue;
            }
            let e = embeddings.pixel(p / w, p % w);
            let s = match normalized(&e) {
                None => {
                    zero_norm += 1;
                    F::zero()
                }
                Some(u) => match opts.aggregation {
                    Aggregation::Mean => dot(&u, &centroid),
                    Aggregation::Max => unit.iter().map(|v| dot(&u, v)).fold(F::neg_infinity(), F::max),
                },
            };
            weights.as_mut_slice()[p] = ((s + F::one()) * half).max(F::zero()).min(F::one());
        }
    }
    if zero_norm > 0 {
        warn!(
            "{zero_norm} zero-norm embeddings in {}; treated as cosine 0",
            labels.patch_id
        );
    }
    ConfidenceMap {
        patch_id: labels.patch_id.clone(),
        weights,
    }
}

/// Anchors for every class present in `labels`, then the confidence map.
pub fn confidence_map<F: Scalar>(
    probs: &Tensor<F>,
    embeddings: &Tensor<F>,
    labels: &LabelMap,
    k_fraction: f64,
    opts: &ConfidenceOptions,
) -> ConfidenceMap<F> {
    let anchors: Vec<Anchors<F>> = (0..probs.channels as u8)
        .map(|c| select_topk_anchors(probs, embeddings, labels, c, k_fraction))
        .collect();
    confidence_from_anchors(&anchors, embeddings, labels, opts)
}
