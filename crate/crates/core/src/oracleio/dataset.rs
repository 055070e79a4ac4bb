//! Dataset directories: generation from the oracle and loading.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::formats::{self, TrajectoryEntry};
use super::scene::{OracleScene, SceneConfig};
use crate::camgeo::{CameraIntrinsics, PoseMatrix};
use crate::error::{Error, Result};
use crate::raster::{DepthMap, FlowField, ImageBuffer};

pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameInfo {
    pub id: u32,
    pub split: Split,
    /// Position along the capture, in training-frame units.
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Contents of `scene.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub version: u32,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    pub occlusion_threshold: f64,
    pub frames: Vec<FrameInfo>,
}

impl SceneMeta {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let meta: SceneMeta = serde_json::from_slice(bytes).map_err(|e| Error::ParseLine {
            what: "scene.json",
            line: e.line(),
            detail: e.to_string(),
        })?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metadata serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCENE_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported scene version {}", self.version)));
        }
        self.camera()?;
        if !(self.near > 0.0 && self.far > self.near && self.occlusion_threshold > 0.0) {
            return Err(Error::Config("scene bounds or occlusion threshold invalid".into()));
        }
        let train = self.train_ids();
        if train.len() < 2 {
            return Err(Error::Config("a scene needs at least two training frames".into()));
        }
        if train.iter().enumerate().any(|(i, &id)| id as usize != i) {
            return Err(Error::Config("training frames must be numbered 0..F-1 in order".into()));
        }
        let mut ids: Vec<u32> = self.frames.iter().map(|f| f.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.frames.len() || self.frames.iter().any(|f| !f.time.is_finite()) {
            return Err(Error::Config("frame ids must be unique and times finite".into()));
        }
        Ok(())
    }

    pub fn camera(&self) -> Result<CameraIntrinsics> {
        let i = &self.intrinsics;
        CameraIntrinsics::new(i.fx, i.fy, i.cx, i.cy, self.width, self.height)
    }

    pub fn train_ids(&self) -> Vec<u32> {
        self.frames.iter().filter(|f| f.split == Split::Train).map(|f| f.id).collect()
    }

    pub fn test_frames(&self) -> Vec<&FrameInfo> {
        self.frames.iter().filter(|f| f.split == Split::Test).collect()
    }
}

pub fn rgb_path(dir: &Path, id: u32) -> PathBuf {
    dir.join("rgb").join(format!("{id:04}.png"))
}

pub fn ppm_path(dir: &Path, id: u32) -> PathBuf {
    dir.join("rgb").join(format!("{id:04}.ppm"))
}

pub fn depth_path(dir: &Path, id: u32) -> PathBuf {
    dir.join("depth").join(format!("{id:04}.fndp"))
}

pub fn flow_path(dir: &Path, a: u32, b: u32) -> PathBuf {
    dir.join("flow").join(format!("{a:04}_{b:04}.flo"))
}

pub fn occ_path(dir: &Path, a: u32, b: u32) -> PathBuf {
    dir.join("occ").join(format!("{a:04}_{b:04}.pgm"))
}

pub fn traj_path(dir: &Path) -> PathBuf {
    dir.join("gt_traj.tum")
}

pub fn write_flow(dir: &Path, a: u32, b: u32, flow: &FlowField) -> Result<()> {
    formats::write_file(&flow_path(dir, a, b), &formats::encode_flo(flow))?;
    formats::write_file(
        &occ_path(dir, a, b),
        &formats::encode_pgm_mask(flow.width, flow.height, &flow.occluded),
    )
}

/// Reads a flow and, when present, its occlusion mask.
pub fn read_flow(dir: &Path, a: u32, b: u32) -> Result<FlowField> {
    let mut flow = formats::decode_flo(&formats::read_file(&flow_path(dir, a, b))?)?;
    let occ = occ_path(dir, a, b);
    if occ.exists() {
        let (w, h, mask) = formats::decode_pgm_mask(&formats::read_file(&occ)?)?;
        if (w, h) != (flow.width, flow.height) {
            return Err(Error::Contract(format!("mask {} does not match its flow", occ.display())));
        }
        flow.occluded = mask;
    }
    Ok(flow)
}

/// Renders the oracle scene into `dir`: views, depths, consecutive flows in
/// both directions with masks, the trajectory and `scene.json`.
pub fn generate_scene(seed: u64, config: SceneConfig, dir: &Path) -> Result<SceneMeta> {
    let scene = OracleScene::new(seed, config)?;
    let cfg = &scene.config;
    let k = scene.intrinsics;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let times = scene.frame_times();
    let poses = scene.poses();
    let frames: Vec<FrameInfo> = times
        .iter()
        .enumerate()
        .map(|(i, &time)| FrameInfo {
            id: i as u32,
            split: if i < cfg.frames { Split::Train } else { Split::Test },
            time,
        })
        .collect();
    for (f, pose) in frames.iter().zip(&poses) {
        let (img, depth) = scene.render(pose)?;
        formats::write_png(&rgb_path(dir, f.id), &img)?;
        formats::write_file(&ppm_path(dir, f.id), &formats::encode_ppm(&img))?;
        formats::write_file(&depth_path(dir, f.id), &formats::encode_fndp(&depth))?;
    }
    for i in 0..cfg.frames - 1 {
        let (a, b) = (i as u32, i as u32 + 1);
        write_flow(dir, a, b, &scene.flow(&poses[i], &poses[i + 1])?.to_field()?)?;
        write_flow(dir, b, a, &scene.flow(&poses[i + 1], &poses[i])?.to_field()?)?;
    }
    let traj: Vec<TrajectoryEntry> =
        frames.iter().zip(&poses).map(|(f, p)| TrajectoryEntry::from_pose(f.id, p)).collect();
    formats::write_file(&traj_path(dir), formats::encode_tum(&traj).as_bytes())?;
    let meta = SceneMeta {
        version: SCENE_FORMAT_VERSION,
        seed,
        width: k.width,
        height: k.height,
        intrinsics: Intrinsics {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
        },
        near: cfg.near,
        far: cfg.far,
        occlusion_threshold: cfg.occlusion_threshold,
        frames,
    };
    formats::write_file(&dir.join("scene.json"), meta.to_json().as_bytes())?;
    Ok(meta)
}

/// Frames are indexed by id. Optional components are `None` when the file is
/// absent.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: SceneMeta,
    pub intrinsics: CameraIntrinsics,
    pub images: Vec<ImageBuffer>,
    pub depths: Vec<Option<DepthMap>>,
    /// `forward[i]` is the flow from training frame `i` to `i + 1`.
    pub forward: Vec<Option<FlowField>>,
    /// `backward[i]` is the flow from training frame `i + 1` to `i`.
    pub backward: Vec<Option<FlowField>>,
    pub gt_poses: Option<Vec<PoseMatrix>>,
}

fn optional<T>(path: &Path, load: impl FnOnce() -> Result<T>) -> Result<Option<T>> {
    if path.exists() {
        load().map(Some)
    } else {
        Ok(None)
    }
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta = SceneMeta::from_json(&formats::read_file(&dir.join("scene.json"))?)?;
        let intrinsics = meta.camera()?;
        let size = (meta.width, meta.height);
        let mut images = Vec::new();
        let mut depths = Vec::new();
        let ids = (0..=meta.frames.iter().map(|f| f.id).max().unwrap_or(0)).collect::<Vec<u32>>();
        for &id in &ids {
            let known = meta.frames.iter().any(|f| f.id == id);
            let img = if known {
                let p = rgb_path(dir, id);
                let img = formats::read_png(&p)?;
                if (img.width, img.height) != size {
                    return Err(Error::Config(format!("{} has the wrong size", p.display())));
                }
                img
            } else {
                ImageBuffer::filled(size.0, size.1, [0.0; 3])?
            };
            images.push(img);
            let p = depth_path(dir, id);
            let d = optional(&p, || formats::decode_fndp(&formats::read_file(&p)?))?;
            if d.as_ref().is_some_and(|d| (d.width, d.height) != size) {
                return Err(Error::Config(format!("{} has the wrong size", p.display())));
            }
            depths.push(d);
        }
        let train = meta.train_ids().len() as u32;
        let mut forward = Vec::new();
        let mut backward = Vec::new();
        for i in 0..train - 1 {
            for (a, b, out) in [(i, i + 1, &mut forward), (i + 1, i, &mut backward)] {
                let f = optional(&flow_path(dir, a, b), || read_flow(dir, a, b))?;
                if f.as_ref().is_some_and(|f| (f.width, f.height) != size) {
                    return Err(Error::Config(format!("flow {a}->{b} has the wrong size")));
                }
                out.push(f);
            }
        }
        let tp = traj_path(dir);
        let gt_poses = optional(&tp, || {
            let entries = formats::read_tum(&tp)?;
            let mut poses = vec![None; ids.len()];
            for e in &entries {
                if let Some(slot) = poses.get_mut(e.frame_id as usize) {
                    *slot = Some(e.pose()?);
                }
            }
            Ok(meta
                .frames
                .iter()
                .all(|f| poses[f.id as usize].is_some())
                .then(|| poses.into_iter().map(|p| p.unwrap_or_else(PoseMatrix::identity)).collect()))
        })?
        .flatten();
        Ok(Dataset {
            root: dir.to_path_buf(),
            meta,
            intrinsics,
            images,
            depths,
            forward,
            backward,
            gt_poses,
        })
    }

    pub fn train_count(&self) -> usize {
        self.meta.train_ids().len()
    }
}
