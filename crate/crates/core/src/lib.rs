//! Late fusion of 2D and 3D object detections through subjective-logic
//! opinions and a learned pair score.

pub mod cli;
pub mod error;
pub mod eval;
pub mod evidence;
pub mod fusion_net;
pub mod geometry;
pub mod kitti_io;
pub mod matching;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod synthetic;

pub use error::{Error, Result};
pub use evidence::{combine_opinions, conflict, opinion_from_evidence, EvidenceVector, Opinion};
pub use geometry::{Box2D, Box3D, Calibration};
pub use matching::{Detection2D, Detection3D};
pub use pipeline::{FusedDetection, PipelineConfig, TrainConfig};
