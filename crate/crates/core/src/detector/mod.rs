//! FCOS-style anchor-free detector: a stride-8 convolutional backbone, a
//! single feature level and four prediction branches (classification,
//! centerness, `ltrb` regression and per-side localization uncertainty).

mod assign;
mod decode;
mod loss;
mod model;

pub use assign::{assign_targets, centerness_target, LocationTargets};
pub use decode::{decode_detections, nms, nms_indices, DecodeParams, Detection, ScoreMode};
pub use loss::{
    combine_supervised, focal_loss_sum, focal_loss_value, supervised_loss, supervised_terms,
    supervised_terms_with, FocalParams, SupervisedBreakdown, SupervisedLoss, SupervisedTerms,
};
pub(crate) use loss::{one_hot, zero};
pub use model::{
    forward, DetectorConfig, DetectorParams, Grid, HeadOutputs, HeadValues, ModelVars, DELTA_FLOOR,
    STRIDE,
};
