//! Joint optimization of fields, flow network and camera poses, plus
//! rendering and evaluation of trained models.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod render;
pub mod schedule;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Projection, TrainConfig};
pub use eval::{evaluate, evaluate_checkpoint, Report};
pub use model::{Group, Model};
pub use schedule::PlateauScheduler;
pub use train::{run_training, TrainData, Trainer};
