//! TOML pipeline configuration. Every section and field has a default, so an
//! empty file is a valid configuration.
//!
//! ```toml
//! seed = 7
//!
//! [paths]
//! corpus = "data/noisy"       # images plus the annotations to learn from
//! reference = "data/clean"    # ground truth for validation and scoring
//! output = "runs/exp1"
//!
//! [boxes]
//! mode = "random"
//! max_offset = { fraction = 0.1 }   # or { pixels = 5 }
//!
//! [segmenter]
//! backend = "oracle"
//! oracle_noise = { dilate_px = 1 }
//!
//! [mocl]
//! epochs = 20
//! warmup_epochs = 5
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::SyntheticSpec;
use crate::boxgen::{BoxKind, MaxOffset, PerturbConfig};
use crate::csvio::write_atomic;
use crate::dataset::SplitRatios;
use crate::error::{Error, Result};
use crate::metrics::Pooling;
use crate::mocl::MoclConfig;
use crate::promptseg::{ExternalAdapterConfig, MergePolicy, OracleNoise};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    /// Ground-truth corpus; defaults to `corpus`.
    pub reference: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: PathBuf::from("corpus"),
            reference: None,
            output: PathBuf::from("out"),
        }
    }
}

impl PathsConfig {
    pub fn reference(&self) -> &Path {
        self.reference.as_deref().unwrap_or(&self.corpus)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoxesConfig {
    pub mode: BoxKind,
    pub max_offset: MaxOffset,
    pub seed: u64,
    pub samples_per_instance: u32,
}

impl Default for BoxesConfig {
    fn default() -> Self {
        let p = PerturbConfig::default();
        BoxesConfig {
            mode: BoxKind::Tight,
            max_offset: p.max_offset,
            seed: p.seed,
            samples_per_instance: p.samples_per_instance,
        }
    }
}

impl BoxesConfig {
    pub fn perturb(&self) -> PerturbConfig {
        PerturbConfig {
            max_offset: self.max_offset,
            seed: self.seed,
            samples_per_instance: self.samples_per_instance,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Oracle,
    External,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub backend: Backend,
    /// Degradation applied by the oracle backend.
    pub oracle_noise: Option<OracleNoise>,
    pub merge_policy: MergePolicy,
    pub external: ExternalAdapterConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: SplitRatios::default(),
            seed: 0,
        }
    }
}

/// Where the training targets come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// Label maps of the annotation corpus (stored or rasterized from its masks).
    #[default]
    Annotations,
    /// Label maps written by the `pseudolabel` command.
    Pseudo,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub labels: LabelSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub pooling: Pooling,
    /// Row labels for `evaluate`.
    pub method: String,
    pub group: String,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            pooling: Pooling::default(),
            method: "model".into(),
            group: "all".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatrixMethod {
    /// Train on the group's pixel-level annotations.
    #[serde(rename = "mocl-pixel")]
    Pixel,
    /// Train on pseudo-labels from tight boxes.
    #[serde(rename = "sam-l-tight")]
    TightBox,
    /// Train on pseudo-labels from randomly offset boxes.
    #[serde(rename = "sam-l-random")]
    RandomBox,
}

impl MatrixMethod {
    pub const ALL: [MatrixMethod; 3] = [MatrixMethod::Pixel, MatrixMethod::TightBox, MatrixMethod::RandomBox];

    pub fn name(self) -> &'static str {
        match self {
            MatrixMethod::Pixel => "mocl-pixel",
            MatrixMethod::TightBox => "sam-l-tight",
            MatrixMethod::RandomBox => "sam-l-random",
        }
    }
}

/// An annotator group and the corpus holding its annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub name: String,
    pub corpus: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixConfig {
    pub methods: Vec<MatrixMethod>,
    /// Empty means one group, `metrics.group`, annotated by `paths.corpus`.
    pub groups: Vec<GroupConfig>,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            methods: MatrixMethod::ALL.to_vec(),
            groups: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; `--seed` copies it into every component seed.
    pub seed: u64,
    pub paths: PathsConfig,
    pub boxes: BoxesConfig,
    pub segmenter: SegmenterConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub mocl: MoclConfig,
    pub metrics: MetricsConfig,
    pub synthetic: SyntheticSpec,
    pub matrix: MatrixConfig,
}

pub const CONFIG_ECHO: &str = "config.toml";

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.boxes.perturb().validate()?;
        self.mocl.validate()?;
        self.synthetic.validate()?;
        let r = self.split.ratios;
        if u64::from(r.train) + u64::from(r.val) + u64::from(r.test) == 0 {
            return Err(Error::Config("split ratios must not all be zero".into()));
        }
        if !(self.segmenter.external.threshold > 0.0 && self.segmenter.external.threshold <= 1.0) {
            return Err(Error::Config(format!(
                "segmenter threshold {} not in (0, 1]",
                self.segmenter.external.threshold
            )));
        }
        Ok(())
    }

    /// Sets the global seed and every component seed to `seed`.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.boxes.seed = seed;
        self.split.seed = seed;
        self.mocl.seed = seed;
        self.synthetic.seed = seed;
    }

    /// Writes the full effective configuration into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(CONFIG_ECHO), self.to_toml()?.as_bytes())
    }
}
