//! Out-of-process adapter for a pretrained promptable segmenter.
//!
//! For every prompt the adapter runs
//!
//! ```text
//! <command> [args...] --image <patch.png> --box <r_min>,<c_min>,<r_max>,<c_max> --out <mask.png>
//! ```
//!
//! The program must write an 8-bit grayscale PNG of the same size as the
//! patch, holding the soft mask scaled to 0..=255. It may print a line
//! `confidence=<value>` on stdout. The adapter binarizes at `threshold`.

use std::path::PathBuf;
use std::process::Command;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{Capabilities, PromptableSegmenter, RawSegmentation, SegmenterIdentity};
use crate::boxgen::BoxPrompt;
use crate::dataset::Patch;
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExternalAdapterConfig {
    pub command: Option<PathBuf>,
    pub args: Vec<String>,
    pub threshold: f64,
    pub max_concurrency: usize,
    pub model_id: String,
    pub model_version: String,
}

impl Default for ExternalAdapterConfig {
    fn default() -> Self {
        ExternalAdapterConfig {
            command: None,
            args: Vec::new(),
            threshold: 0.5,
            max_concurrency: 1,
            model_id: "external".into(),
            model_version: "unspecified".into(),
        }
    }
}

#[derive(Debug)]
pub struct ExternalModelAdapter {
    cfg: ExternalAdapterConfig,
    command: PathBuf,
}

impl ExternalModelAdapter {
    /// Fails with [`Error::BackendUnavailable`] when no command is configured
    /// or the command does not exist.
    pub fn new(cfg: ExternalAdapterConfig) -> Result<Self> {
        let command = cfg
            .command
            .clone()
            .ok_or_else(|| Error::BackendUnavailable("no external segmenter command configured".into()))?;
        if command.components().count() > 1 && !command.exists() {
            return Err(Error::BackendUnavailable(format!(
                "segmenter command {} not found",
                command.display()
            )));
        }
        if !(0.0..=1.0).contains(&cfg.threshold) {
            return Err(Error::Config(format!(
                "segmenter threshold {} outside [0, 1]",
                cfg.threshold
            )));
        }
        Ok(ExternalModelAdapter { cfg, command })
    }

    pub fn threshold(&self) -> f64 {
        self.cfg.threshold
    }
}

/// Soft mask bytes to a boolean mask: on iff `value / 255 >= threshold`.
pub(crate) fn binarize(soft: &Grid<u8>, threshold: f64) -> Grid<bool> {
    soft.map(|&v| f64::from(v) / 255.0 >= threshold)
}

fn parse_confidence(stdout: &str) -> Option<f64> {
    stdout
        .lines()
        .filter_map(|l| l.trim().strip_prefix("confidence="))
        .filter_map(|v| v.trim().parse::<f64>().ok())
        .last()
}

impl PromptableSegmenter for ExternalModelAdapter {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            accepts_box_prompts: true,
            returns_confidence: true,
            max_concurrency: Some(self.cfg.max_concurrency.max(1)),
        }
    }

    fn identity(&self) -> SegmenterIdentity {
        SegmenterIdentity {
            id: self.cfg.model_id.clone(),
            version: self.cfg.model_version.clone(),
        }
    }

    fn segment(&self, patch: &Patch, prompt: &BoxPrompt) -> Result<RawSegmentation> {
        let work = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let image_path = work.path().join("patch.png");
        let out_path = work.path().join("mask.png");
        let (h, w) = patch.dims();
        let raw: Vec<u8> = patch.image.as_slice().iter().flatten().copied().collect();
        RgbImage::from_raw(w as u32, h as u32, raw)
            .expect("buffer matches dimensions")
            .save_with_format(&image_path, image::ImageFormat::Png)
            .map_err(|e| Error::image(&image_path, e))?;

        let output = Command::new(&self.command)
            .args(&self.cfg.args)
            .arg("--image")
            .arg(&image_path)
            .arg("--box")
            .arg(format!(
                "{},{},{},{}",
                prompt.r_min, prompt.c_min, prompt.r_max, prompt.c_max
            ))
            .arg("--out")
            .arg(&out_path)
            .output()
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Error::BackendUnavailable(format!("{}: {e}", self.command.display()))
                } else {
                    Error::Backend {
                        instance_ids: vec![prompt.instance_id.clone()],
                        message: e.to_string(),
                        retryable: true,
                    }
                }
            })?;
        if !output.status.success() {
            return Err(Error::Backend {
                instance_ids: vec![prompt.instance_id.clone()],
                message: format!(
                    "{} exited with {}: {}",
                    self.command.display(),
                    output.status,
                    String::from_utf8_lossy(&output.stderr).trim()
                ),
                retryable: true,
            });
        }
        let soft = image::open(&out_path)
            .map_err(|e| Error::ContractViolation(format!("unreadable segmenter output: {e}")))?
            .into_luma8();
        let (mw, mh) = (soft.width() as usize, soft.height() as usize);
        let soft = Grid::from_vec(mh, mw, soft.into_raw()).expect("decoded buffer matches dimensions");
        Ok(RawSegmentation {
            mask: binarize(&soft, self.cfg.threshold),
            confidence: parse_confidence(&String::from_utf8_lossy(&output.stdout)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_at_half() {
        let soft = Grid::from_vec(1, 4, vec![0, 127, 128, 255]).unwrap();
        assert_eq!(binarize(&soft, 0.5).into_vec(), vec![false, false, true, true]);
        assert_eq!(binarize(&soft, 0.0).into_vec(), vec![true; 4]);
    }

    #[test]
    fn confidence_line_is_optional() {
        assert_eq!(parse_confidence("loading\nconfidence=0.75\n"), Some(0.75));
        assert_eq!(parse_confidence("nothing here"), None);
    }

    #[test]
    fn unset_command_is_unavailable() {
        let err = ExternalModelAdapter::new(ExternalAdapterConfig::default()).unwrap_err();
        assert!(matches!(err, Error::BackendUnavailable(_)));
        assert_eq!(err.exit_code(), 3);
    }
}
