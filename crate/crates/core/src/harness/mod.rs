//! Configuration, synthetic corpora and end-to-end orchestration behind the
//! `saml` command line.

pub mod config;
pub mod run;
pub mod synth;

pub use config::{MatrixMethod, PipelineConfig};
pub use run::{
    annotation_report, cmd_boxes, cmd_evaluate, cmd_pseudolabel, cmd_report, cmd_synth, cmd_train,
    run_experiment_matrix, RunOptions,
};
pub use synth::{generate_synthetic, synthesize, NoiseSpec, SyntheticCorpus, SyntheticSpec};
