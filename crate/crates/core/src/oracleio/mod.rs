//! Synthetic ground truth, dataset files and evaluation metrics.

pub mod dataset;
pub mod formats;
pub mod metrics;
pub mod scene;

pub use dataset::{generate_scene, Dataset, FrameInfo, SceneMeta, Split};
pub use scene::{chain_flows, reproject_flow, ExactFlow, OracleScene, SceneConfig};
