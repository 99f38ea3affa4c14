//! Box prompts to pixel masks through a pluggable promptable segmenter, and
//! merging of per-instance masks into multi-class pseudo-label maps.

mod external;
mod oracle;
mod pipeline;

use serde::{Deserialize, Serialize};

use crate::boxgen::BoxPrompt;
use crate::dataset::{CellClass, LabelMap, Patch, BACKGROUND};
use crate::error::{Error, Result};
use crate::grid::{BoolGrid, Grid};

pub use external::{ExternalAdapterConfig, ExternalModelAdapter};
pub use oracle::{oracle_segment, OracleNoise, OracleSegmenter};
pub use pipeline::{
    pseudolabel_corpus, read_provenance_csv, PatchFailure, ProvenanceRow, PseudolabelOptions,
    PseudolabelOutput,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Capabilities {
    pub accepts_box_prompts: bool,
    pub returns_confidence: bool,
    /// `Some(n)` caps concurrent `segment` calls; `None` means unrestricted.
    pub max_concurrency: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterIdentity {
    pub id: String,
    pub version: String,
}

/// What a backend returns for one prompt, before contract checks.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSegmentation {
    pub mask: BoolGrid,
    pub confidence: Option<f64>,
}

pub trait PromptableSegmenter: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    fn identity(&self) -> SegmenterIdentity;

    /// Segments the object indicated by one box prompt.
    fn segment(&self, patch: &Patch, prompt: &BoxPrompt) -> Result<RawSegmentation>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentResult {
    pub patch_id: String,
    pub instance_id: String,
    pub mask: BoolGrid,
    /// In `[0, 1]`; 1.0 when the backend reports none.
    pub confidence: f64,
}

impl SegmentResult {
    pub fn area(&self) -> usize {
        self.mask.count_true()
    }
}

/// Runs one segmenter call per prompt, in order.
///
/// Backend failures are collected and reported together as a retryable
/// [`Error::Backend`] naming every failing instance. A wrong-shaped mask or an
/// out-of-range confidence is a [`Error::ContractViolation`].
pub fn segment_with_prompts(
    segmenter: &dyn PromptableSegmenter,
    patch: &Patch,
    prompts: &[BoxPrompt],
) -> Result<Vec<SegmentResult>> {
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    if !segmenter.capabilities().accepts_box_prompts {
        return Err(Error::BackendUnavailable(format!(
            "segmenter {} does not accept box prompts",
            segmenter.identity().id
        )));
    }
    let dims = patch.dims();
    let mut results = Vec::with_capacity(prompts.len());
    let mut failed = Vec::new();
    let mut last_message = String::new();
    for prompt in prompts {
        if prompt.patch_id != patch.patch_id {
            return Err(Error::Invalid(format!(
                "prompt for {} passed with patch {}",
                prompt.patch_id, patch.patch_id
            )));
        }
        prompt.validate(dims)?;
        let raw = match segmenter.segment(patch, prompt) {
            Ok(raw) => raw,
            Err(e @ (Error::Backend { .. } | Error::BackendUnavailable(_) | Error::Io { .. })) => {
                last_message = e.to_string();
                failed.push(prompt.instance_id.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        if raw.mask.dims() != dims {
            return Err(Error::ContractViolation(format!(
                "segmenter returned a {:?} mask for {} on a {:?} patch",
                raw.mask.dims(),
                prompt.instance_id,
                dims
            )));
        }
        let confidence = match raw.confidence {
            None => 1.0,
            Some(c) if (0.0..=1.0).contains(&c) => c,
            Some(c) => {
                return Err(Error::ContractViolation(format!(
                    "confidence {c} for {} outside [0, 1]",
                    prompt.instance_id
                )))
            }
        };
        results.push(SegmentResult {
            patch_id: patch.patch_id.clone(),
            instance_id: prompt.instance_id.clone(),
            mask: raw.mask,
            confidence,
        });
    }
    if !failed.is_empty() {
        return Err(Error::Backend {
            instance_ids: failed,
            message: last_message,
            retryable: true,
        });
    }
    Ok(results)
}

/// Which result labels a pixel covered by several results.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    /// Highest confidence, then smaller area, then lower class index.
    #[default]
    HighestConfidence,
    /// Smaller area, then lower class index; confidence ignored.
    SmallestArea,
}

/// Merges per-instance results of one patch into a label map.
pub fn merge_results(
    patch_id: &str,
    dims: (usize, usize),
    results: &[SegmentResult],
    class_of: impl Fn(&str) -> Option<CellClass>,
    policy: MergePolicy,
) -> Result<LabelMap> {
    // (result index, class, area)
    let mut ranked = Vec::with_capacity(results.len());
    for (i, res) in results.iter().enumerate() {
        if res.patch_id != patch_id {
            return Err(Error::Invalid(format!(
                "result {} belongs to {}, not {patch_id}",
                res.instance_id, res.patch_id
            )));
        }
        if res.mask.dims() != dims {
            return Err(Error::DimensionMismatch {
                what: format!("result {}", res.instance_id),
                expected: dims,
                actual: res.mask.dims(),
            });
        }
        let class = class_of(&res.instance_id).ok_or_else(|| {
            Error::Invalid(format!("no class known for instance {}", res.instance_id))
        })?;
        ranked.push((i, class.index(), res.area()));
    }
    // Winners last, so painting in order leaves the winner on top.
    ranked.sort_by(|a, b| {
        let (ra, rb) = (&results[a.0], &results[b.0]);
        let conf = match policy {
            MergePolicy::HighestConfidence => ra.confidence.total_cmp(&rb.confidence),
            MergePolicy::SmallestArea => std::cmp::Ordering::Equal,
        };
        conf.then(b.2.cmp(&a.2))
            .then(b.1.cmp(&a.1))
            .then(rb.instance_id.cmp(&ra.instance_id))
    });
    let mut classes = Grid::filled(dims.0, dims.1, BACKGROUND);
    for &(i, class, _) in &ranked {
        for (dst, &on) in classes
            .as_mut_slice()
            .iter_mut()
            .zip(results[i].mask.as_slice())
        {
            if on {
                *dst = class;
            }
        }
    }
    LabelMap::new(patch_id, classes)
}
