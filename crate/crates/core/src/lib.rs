//! Pseudo-label mining for few-shot object detection.
//!
//! Offline, detections of a few-shot detector on base-class images are
//! re-scored against self-supervised class prototypes and filtered with
//! class-wise adaptive thresholds. Online, an EMA teacher keeps mining while
//! the student is re-trained, mingling its detections with the offline pool.

pub mod error;
pub mod eval;
pub mod exec;
pub mod features;
pub mod geometry;
pub mod io;
pub mod offline;
pub mod online;
pub mod toy;

pub use error::{Error, Result};
pub use exec::Exec;
pub use geometry::{iou, nms, BBox, ClassId, ScoredBox};
