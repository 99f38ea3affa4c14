use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{merge_results, segment_with_prompts, MergePolicy, PromptableSegmenter};
use crate::boxgen::{BoxKind, BoxPrompt};
use crate::csvio::{read_csv, write_csv};
use crate::dataset::{read_labelmap_png, write_labelmap_png, Corpus, LabelMap};
use crate::error::{Error, Result};

/// One row of `pseudolabels.csv`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRow {
    pub patch_id: String,
    pub box_kind: BoxKind,
    pub seed: u64,
    pub segmenter_id: String,
    pub segmenter_version: String,
    pub n_prompts: usize,
    pub n_failures: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchFailure {
    pub patch_id: String,
    pub instance_ids: Vec<String>,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct PseudolabelOptions {
    /// Output directory; label maps go to `<out>/labelmaps/`, provenance to
    /// `<out>/pseudolabels.csv`. `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Skip patches whose label map already exists in `out_dir`.
    pub resume: bool,
    pub jobs: usize,
    pub policy: MergePolicy,
}

impl Default for PseudolabelOptions {
    fn default() -> Self {
        PseudolabelOptions {
            out_dir: None,
            resume: false,
            jobs: 1,
            policy: MergePolicy::default(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PseudolabelOutput {
    pub labelmaps: BTreeMap<String, LabelMap>,
    pub provenance: Vec<ProvenanceRow>,
    pub failures: Vec<PatchFailure>,
}

impl PseudolabelOutput {
    /// Turns a non-empty failure list into a retryable backend error.
    pub fn into_result(self) -> Result<Self> {
        if self.failures.is_empty() {
            return Ok(self);
        }
        let instance_ids = self
            .failures
            .iter()
            .flat_map(|f| f.instance_ids.iter().cloned())
            .collect();
        let patches: Vec<&str> = self.failures.iter().map(|f| f.patch_id.as_str()).collect();
        Err(Error::Backend {
            instance_ids,
            message: format!(
                "{} patch(es) failed: {}; rerun with --resume",
                patches.len(),
                patches.join(", ")
            ),
            retryable: true,
        })
    }
}

enum PatchOutcome {
    Done(LabelMap),
    Failed(PatchFailure),
}

/// Pseudo-labels every patch of `corpus` from its box prompts.
///
/// Patches are processed independently (up to `opts.jobs` at a time, capped by
/// the segmenter's declared concurrency) and collected in patch-id order, so
/// the output does not depend on the job count. Failed patches are reported
/// in [`PseudolabelOutput::failures`] and leave no label map behind; a rerun
/// with `resume` only repeats those.
pub fn pseudolabel_corpus(
    corpus: &Corpus,
    boxes: &[BoxPrompt],
    segmenter: &dyn PromptableSegmenter,
    opts: &PseudolabelOptions,
) -> Result<PseudolabelOutput> {
    let mut by_patch: BTreeMap<&str, Vec<BoxPrompt>> = BTreeMap::new();
    for b in boxes {
        if corpus.patch(&b.patch_id).is_none() {
            return Err(Error::Invalid(format!(
                "box for {}/{} references a patch not in the corpus",
                b.patch_id, b.instance_id
            )));
        }
        by_patch.entry(b.patch_id.as_str()).or_default().push(b.clone());
    }
    let (default_kind, default_seed) = boxes
        .first()
        .map(|b| (b.kind, b.seed))
        .unwrap_or((BoxKind::Tight, 0));
    let identity = segmenter.identity();
    let lm_dir = opts.out_dir.as_ref().map(|d| d.join("labelmaps"));

    let class_of = |patch_id: &str, instance_id: &str| {
        by_patch
            .get(patch_id)
            .and_then(|bs| bs.iter().find(|b| b.instance_id == instance_id))
            .map(|b| b.cell_class)
    };

    let run_patch = |patch_id: &str| -> Result<PatchOutcome> {
        let patch = corpus.patch(patch_id).expect("patch exists");
        if let (true, Some(dir)) = (opts.resume, lm_dir.as_ref()) {
            let path = dir.join(format!("{patch_id}.png"));
            if path.exists() {
                return read_labelmap_png(&path, patch_id).map(PatchOutcome::Done);
            }
        }
        let prompts = by_patch.get(patch_id).map(Vec::as_slice).unwrap_or(&[]);
        if prompts.is_empty() {
            log::warn!("patch {patch_id} has no box prompts; emitting an all-background label map");
        }
        let results = match segment_with_prompts(segmenter, patch, prompts) {
            Ok(r) => r,
            Err(Error::Backend {
                instance_ids,
                message,
                ..
            }) => {
                return Ok(PatchOutcome::Failed(PatchFailure {
                    patch_id: patch_id.to_owned(),
                    instance_ids,
                    message,
                }))
            }
            Err(Error::BackendUnavailable(message)) => {
                return Ok(PatchOutcome::Failed(PatchFailure {
                    patch_id: patch_id.to_owned(),
                    instance_ids: prompts.iter().map(|p| p.instance_id.clone()).collect(),
                    message,
                }))
            }
            Err(e) => return Err(e),
        };
        let lm = merge_results(
            patch_id,
            patch.dims(),
            &results,
            |iid| class_of(patch_id, iid),
            opts.policy,
        )?;
        if let Some(dir) = lm_dir.as_ref() {
            write_labelmap_png(&dir.join(format!("{patch_id}.png")), &lm)?;
        }
        Ok(PatchOutcome::Done(lm))
    };

    let ids: Vec<&str> = corpus.patches().iter().map(|p| p.patch_id.as_str()).collect();
    let jobs = segmenter
        .capabilities()
        .max_concurrency
        .map_or(opts.jobs, |cap| opts.jobs.min(cap))
        .max(1);
    let outcomes: Vec<Result<PatchOutcome>> = if jobs == 1 {
        ids.iter().map(|id| run_patch(id)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| ids.par_iter().map(|id| run_patch(id)).collect())
    };

    let mut out = PseudolabelOutput::default();
    for (id, outcome) in ids.iter().zip(outcomes) {
        let prompts = by_patch.get(id).map(Vec::as_slice).unwrap_or(&[]);
        let (kind, seed) = prompts
            .first()
            .map(|b| (b.kind, b.seed))
            .unwrap_or((default_kind, default_seed));
        let n_failures = match outcome? {
            PatchOutcome::Done(lm) => {
                out.labelmaps.insert((*id).to_owned(), lm);
                0
            }
            PatchOutcome::Failed(f) => {
                let n = f.instance_ids.len();
                out.failures.push(f);
                n
            }
        };
        out.provenance.push(ProvenanceRow {
            patch_id: (*id).to_owned(),
            box_kind: kind,
            seed,
            segmenter_id: identity.id.clone(),
            segmenter_version: identity.version.clone(),
            n_prompts: prompts.len(),
            n_failures,
        });
    }
    if let Some(dir) = opts.out_dir.as_ref() {
        write_csv(&dir.join("pseudolabels.csv"), &out.provenance)?;
    }
    Ok(out)
}

pub fn read_provenance_csv(path: &Path) -> Result<Vec<ProvenanceRow>> {
    read_csv(path)
}
