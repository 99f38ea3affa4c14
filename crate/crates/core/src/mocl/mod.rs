//! Confidence-weighted training of the multi-class pixel segmenter.
//!
//! Each training step ranks the labeled pixels of every class by the
//! predicted probability of that class, keeps the top fraction as anchors,
//! and weights every pixel's cross-entropy by the cosine similarity between
//! its embedding and the anchors of its label, mapped to `[0, 1]`.

pub mod confidence;
pub mod layers;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use confidence::{
    anchor_count, confidence_from_anchors, confidence_map, select_topk_anchors, Aggregation, Anchors,
    ConfidenceMap, ConfidenceOptions,
};
pub use loss::{mocl_loss, pixel_cross_entropy, LossOutput};
pub use model::{Architecture, SegmenterModel, NUM_CLASSES, STRIDE};
pub use tensor::{softmax, Tensor};
pub use train::{
    predict, predict_tensor, train, validation_dice, Checkpoint, ConfidenceSchedule, HistoryRow, MoclConfig,
    Sample, TrainOptions, TrainOutcome, CHECKPOINT_FORMAT,
};
