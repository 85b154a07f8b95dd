//! Unsupervised foreground segmentation learned from video.
//!
//! A video discoverer (the *teacher*) explains every frame of a video with a
//! low-rank PCA background model and flags what it cannot reconstruct; color
//! models refine that evidence into per-frame soft masks. The most confident
//! masks are selected, augmented, and used as regression targets for a small
//! convolutional network (the *student*) that segments single images.
//!
//! Module map:
//!
//! * [`imagery`]: rasters, Netpbm I/O, resizing, the 7-channel network input.
//! * [`teacher`]: PCA background model, color model, per-frame soft masks.
//! * [`dataset`]: mask scoring, top-k selection, augmentation, manifests.
//! * [`student`]: tensors, layers, the network, Adam, training, checkpoints.
//! * [`postprocess`]: thresholding, connected components, tight boxes.
//! * [`evaluation`]: IoU, CorLoc, max F-measure, pixel metrics.
//! * [`synthvideo`]: synthetic videos with exact ground truth.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imagery;
pub mod linalg;
pub mod postprocess;
pub mod rng;
pub mod student;
pub mod synthvideo;
pub mod teacher;

pub use dataset::{DatasetEntry, TrainingExample, TrainingRecord};
pub use error::{Error, Result};
pub use evaluation::EvalReport;
pub use imagery::{ChannelStack, Image, SoftMask};
pub use postprocess::{BinaryMask, BoundingBox, Component, ScoredBox};
pub use student::{AdamState, Architecture, NetworkParams, Preset, Tensor, TrainConfig};
pub use synthvideo::SynthConfig;
pub use teacher::{ColorModel, PcaModel, TeacherConfig};
