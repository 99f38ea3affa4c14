use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Capabilities, PromptableSegmenter, RawSegmentation, SegmentResult, SegmenterIdentity};
use crate::boxgen::BoxPrompt;
use crate::dataset::{Corpus, InstanceMask, Patch};
use crate::error::{Error, Result};
use crate::grid::BoolGrid;
use crate::metrics::binary_dice;
use crate::morph;

/// Optional morphological degradation applied after cropping to the box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleNoise {
    DilatePx(u32),
    ErodePx(u32),
}

/// Ground truth cropped to the box, optionally dilated or eroded. The
/// confidence is the Dice overlap of the result with the ground truth.
pub fn oracle_segment(
    ground_truth: &InstanceMask,
    prompt: &BoxPrompt,
    noise: Option<OracleNoise>,
) -> Result<SegmentResult> {
    let dims = ground_truth.mask.dims();
    prompt.validate(dims)?;
    let cropped = BoolGrid::from_fn(dims.0, dims.1, |r, c| {
        *ground_truth.mask.get(r, c) && prompt.contains(r, c)
    });
    let mask = match noise {
        None => cropped,
        Some(OracleNoise::DilatePx(px)) => morph::dilate(&cropped, px as usize),
        Some(OracleNoise::ErodePx(px)) => morph::erode(&cropped, px as usize),
    };
    let confidence = binary_dice(&mask, &ground_truth.mask)?.clamp(0.0, 1.0);
    Ok(SegmentResult {
        patch_id: ground_truth.patch_id.clone(),
        instance_id: ground_truth.instance_id.clone(),
        mask,
        confidence,
    })
}

/// Test double that answers prompts from known ground-truth instances.
#[derive(Clone, Debug)]
pub struct OracleSegmenter {
    truth: BTreeMap<(String, String), InstanceMask>,
    noise: Option<OracleNoise>,
}

impl OracleSegmenter {
    pub fn from_instances(
        instances: impl IntoIterator<Item = InstanceMask>,
        noise: Option<OracleNoise>,
    ) -> Self {
        let truth = instances
            .into_iter()
            .map(|i| ((i.patch_id.clone(), i.instance_id.clone()), i))
            .collect();
        OracleSegmenter { truth, noise }
    }

    pub fn from_corpus(corpus: &Corpus, noise: Option<OracleNoise>) -> Self {
        Self::from_instances(corpus.instances().iter().cloned(), noise)
    }
}

impl PromptableSegmenter for OracleSegmenter {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            accepts_box_prompts: true,
            returns_confidence: true,
            max_concurrency: None,
        }
    }

    fn identity(&self) -> SegmenterIdentity {
        let version = match self.noise {
            None => "exact".to_owned(),
            Some(OracleNoise::DilatePx(p)) => format!("dilate{p}"),
            Some(OracleNoise::ErodePx(p)) => format!("erode{p}"),
        };
        SegmenterIdentity {
            id: "oracle".into(),
            version,
        }
    }

    fn segment(&self, _patch: &Patch, prompt: &BoxPrompt) -> Result<RawSegmentation> {
        let gt = self
            .truth
            .get(&(prompt.patch_id.clone(), prompt.instance_id.clone()))
            .ok_or_else(|| Error::Backend {
                instance_ids: vec![prompt.instance_id.clone()],
                message: format!(
                    "oracle has no ground truth for {}/{}",
                    prompt.patch_id, prompt.instance_id
                ),
                retryable: false,
            })?;
        let res = oracle_segment(gt, prompt, self.noise)?;
        Ok(RawSegmentation {
            mask: res.mask,
            confidence: Some(res.confidence),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxgen::tight_box;
    use crate::dataset::CellClass;
    use crate::grid::Grid;

    fn square3() -> InstanceMask {
        let m = Grid::from_fn(6, 6, |r, c| (1..4).contains(&r) && (1..4).contains(&c));
        InstanceMask::new("g", "p", CellClass::Podocyte, m).unwrap()
    }

    #[test]
    fn tight_box_is_exact() {
        let g = square3();
        let res = oracle_segment(&g, &tight_box(&g).unwrap(), None).unwrap();
        assert_eq!(res.mask, g.mask);
        assert_eq!(res.confidence, 1.0);
    }

    #[test]
    fn left_two_columns_give_dice_point_eight() {
        let g = square3();
        let mut b = tight_box(&g).unwrap();
        b.c_max = 2; // columns 1..=2
        let res = oracle_segment(&g, &b, None).unwrap();
        assert_eq!(res.mask.count_true(), 6);
        assert!((res.confidence - 0.8).abs() < 1e-12);
    }

    #[test]
    fn erosion_to_nothing_gives_zero_confidence() {
        let g = square3();
        let res = oracle_segment(&g, &tight_box(&g).unwrap(), Some(OracleNoise::ErodePx(5))).unwrap();
        assert_eq!(res.mask.count_true(), 0);
        assert_eq!(res.confidence, 0.0);
    }

    #[test]
    fn dilation_lowers_confidence() {
        let g = square3();
        let res = oracle_segment(&g, &tight_box(&g).unwrap(), Some(OracleNoise::DilatePx(1))).unwrap();
        assert_eq!(res.mask.count_true(), 25);
        // 2*9 / (25 + 9)
        assert!((res.confidence - 18.0 / 34.0).abs() < 1e-12);
    }
}
