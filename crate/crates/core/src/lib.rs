//! Two-level level-of-detail 3D brain MRI segmentation.

pub mod augment;
pub mod error;
pub mod evaluator;
mod fsutil;
pub mod kspace;
pub mod losses;
pub mod manifest;
pub mod motion;
pub mod nn;
pub mod phantom;
pub mod sampling;
pub mod trainer;
pub mod volume_io;

pub use augment::AugmentationSpec;
pub use error::{Error, Result};
pub use evaluator::{EvalReport, SurfaceMesh};
pub use fsutil::write_atomic;
pub use manifest::Manifest;
pub use motion::MotionSpec;
pub use nn::{NetworkConfig, NetworkState, SegmentationOutput};
pub use phantom::PhantomSpec;
pub use sampling::Interp;
pub use trainer::{PipelineKind, Stage, TrainConfig};
pub use volume_io::{ClassScheme, LabelMap, Volume};
