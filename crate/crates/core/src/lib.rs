//! Teacher-student semi-supervised object detection on synthetic scenes.
//!
//! The crate is organised bottom-up:
//!
//! * [`diff`]: reverse-mode autodiff and momentum SGD.
//! * [`detector`]: an FCOS-style anchor-free detector with an uncertainty branch.
//! * [`augment`]: weak (geometric) and strong (photometric) views.
//! * [`selftrain`]: burn-in, EMA teacher, pseudo-labels and unsupervised losses.
//! * [`eval`]: IoU, matching and COCO-style mAP.
//! * [`data`]: synthetic scenes, splits, label fractions and COCO JSON.
//! * [`harness`]: configuration, label-fraction sweeps and reports.

pub mod augment;
pub mod boxes;
pub mod data;
pub mod detector;
pub mod diff;
pub mod error;
pub mod eval;
pub mod harness;
pub mod selftrain;

pub use error::{Error, Result};
