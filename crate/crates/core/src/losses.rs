//! Training objectives and their weighted sum.

use std::io::Write;
use std::path::Path;

use diffcore::{Graph, Tensor, Var};
use log::warn;

use crate::camgeo::{project, CameraIntrinsics, PoseVars, ProjectionMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub flow: f64,
    pub depth: f64,
    pub pc: f64,
    pub warp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            flow: 0.05,
            depth: 0.04,
            pc: 1.0,
            warp: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("flow", self.flow), ("depth", self.depth), ("pc", self.pc), ("warp", self.warp)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be nonnegative")));
            }
        }
        Ok(())
    }
}

/// Scalar loss terms of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub rgb: f64,
    pub flow: f64,
    pub depth: f64,
    pub pc: f64,
    pub rgb_s: f64,
    pub total: f64,
}

impl LossReport {
    pub fn weighted(rgb: f64, flow: f64, depth: f64, pc: f64, rgb_s: f64, w: &LossWeights) -> Self {
        LossReport {
            rgb,
            flow,
            depth,
            pc,
            rgb_s,
            total: rgb + w.flow * flow + w.depth * depth + w.pc * pc + w.warp * rgb_s,
        }
    }
}

/// Graph handles of the individual terms.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub rgb: Var,
    pub flow: Var,
    pub depth: Var,
    pub pc: Var,
    pub rgb_s: Var,
}

fn zero(g: &mut Graph) -> Result<Var> {
    Ok(g.scalar(0.0)?)
}

fn check(g: &Graph, v: Var, shape: &[usize], what: &str) -> Result<()> {
    if g.shape(v) != shape {
        return Err(Error::Contract(format!("{what}: expected {shape:?}, got {:?}", g.shape(v))));
    }
    Ok(())
}

fn mask_column(valid: &[bool]) -> Result<Tensor> {
    Ok(Tensor::new(
        vec![valid.len(), 1],
        valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )?)
}

/// Channel-summed L1 colour error averaged over pixels.
pub fn loss_rgb(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    check(g, pred, target.shape(), "loss_rgb")?;
    let n = target.shape()[0] as f64;
    let t = g.constant(target.clone())?;
    let d = g.sub(pred, t)?;
    let a = g.abs(d)?;
    let s = g.sum(a)?;
    Ok(g.scale(s, 1.0 / n)?)
}

/// L1 error of predicted pixels against `target: [n, 2]`, averaged over
/// pixels where `valid` holds.
pub fn loss_flow(g: &mut Graph, pred: Var, target: &Tensor, valid: &[bool]) -> Result<Var> {
    check(g, pred, target.shape(), "loss_flow")?;
    if valid.len() != target.shape()[0] {
        return Err(Error::Contract(format!("{} mask entries for {} pixels", valid.len(), target.shape()[0])));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        warn!("flow loss has no valid pixels");
        return zero(g);
    }
    let t = g.constant(target.clone())?;
    let d = g.sub(pred, t)?;
    let m = g.constant(mask_column(valid)?)?;
    let dm = g.mul(d, m)?;
    let a = g.abs(dm)?;
    let s = g.sum(a)?;
    Ok(g.scale(s, 1.0 / count as f64)?)
}

/// Mean absolute depth error.
pub fn loss_depth(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    check(g, pred, target.shape(), "loss_depth")?;
    let t = g.constant(target.clone())?;
    let d = g.sub(pred, t)?;
    let a = g.abs(d)?;
    Ok(g.mean(a)?)
}

/// Index of the nearest row of `to` for every row of `from` (both `[·, 3]`).
pub fn nearest_neighbors(from: &[f64], to: &[f64]) -> Vec<usize> {
    from.chunks(3)
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (j, q) in to.chunks(3).enumerate() {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// Frame-`i` camera points moved into frame `j`'s camera:
/// `R_jᵀ (R_i x + t_i − t_j)` row-wise.
pub fn relative_transform(g: &mut Graph, cloud_i: &Tensor, pose_i: &PoseVars, pose_j: &PoseVars) -> Result<Var> {
    let x = g.constant(cloud_i.clone())?;
    let rit = g.transpose(pose_i.rotation)?;
    let world = g.matmul(x, rit)?;
    let dt = g.sub(pose_i.translation, pose_j.translation)?;
    let shifted = g.add(world, dt)?;
    Ok(g.matmul(shifted, pose_j.rotation)?)
}

/// Symmetric Chamfer distance (mean squared nearest-neighbour distance in
/// each direction) between `cloud_j` and `cloud_i` moved into frame `j`.
pub fn loss_pointcloud(
    g: &mut Graph,
    cloud_i: &Tensor,
    cloud_j: &Tensor,
    pose_i: &PoseVars,
    pose_j: &PoseVars,
) -> Result<Var> {
    for c in [cloud_i, cloud_j] {
        if c.shape().len() != 2 || c.shape()[1] != 3 {
            return Err(Error::Contract(format!("point cloud must be [p, 3], got {:?}", c.shape())));
        }
    }
    let moved = relative_transform(g, cloud_i, pose_i, pose_j)?;
    let fwd = nearest_neighbors(g.value(moved).data(), cloud_j.data());
    let bwd = nearest_neighbors(cloud_j.data(), g.value(moved).data());
    let target = Tensor::new(
        vec![fwd.len(), 3],
        fwd.iter().flat_map(|&j| cloud_j.data()[3 * j..3 * j + 3].to_vec()).collect(),
    )?;
    let t = g.constant(target)?;
    let d1 = g.sub(moved, t)?;
    let s1 = g.square(d1)?;
    let s1 = g.sum(s1)?;
    let s1 = g.scale(s1, 1.0 / fwd.len() as f64)?;
    let gathered = g.gather_rows(moved, &bwd)?;
    let cj = g.constant(cloud_j.clone())?;
    let d2 = g.sub(gathered, cj)?;
    let s2 = g.square(d2)?;
    let s2 = g.sum(s2)?;
    let s2 = g.scale(s2, 1.0 / bwd.len() as f64)?;
    Ok(g.add(s1, s2)?)
}

/// Photometric warping error: colours of frame `i` at its own pixels
/// against frame `j`'s image bilinearly sampled where the depth-derived
/// points land. Points landing off the image are dropped.
#[allow(clippy::too_many_arguments)]
pub fn loss_warp(
    g: &mut Graph,
    colors_i: &Tensor,
    cloud_i: &Tensor,
    image_j: &Tensor,
    pose_i: &PoseVars,
    pose_j: &PoseVars,
    k: &CameraIntrinsics,
) -> Result<Var> {
    let n = cloud_i.shape()[0];
    if colors_i.shape() != [n, 3] || image_j.shape() != [k.height, k.width, 3] {
        return Err(Error::Contract(format!(
            "loss_warp: colours {:?}, image {:?}, {n} points",
            colors_i.shape(),
            image_j.shape()
        )));
    }
    let moved = relative_transform(g, cloud_i, pose_i, pose_j)?;
    let (px, front) = project(g, moved, k, ProjectionMode::Perspective)?;
    let (wmax, hmax) = ((k.width - 1) as f64, (k.height - 1) as f64);
    let valid: Vec<bool> = g
        .value(px)
        .data()
        .chunks(2)
        .zip(&front)
        .map(|(p, &f)| f && p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= wmax && p[1] <= hmax)
        .collect();
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        warn!("warp loss has no pixels inside the target frame");
        return zero(g);
    }
    let sampled = g.bilinear_sample(image_j, px)?;
    let ci = g.constant(colors_i.clone())?;
    let d = g.sub(sampled, ci)?;
    let m = g.constant(mask_column(&valid)?)?;
    let dm = g.mul(d, m)?;
    let a = g.abs(dm)?;
    let s = g.sum(a)?;
    Ok(g.scale(s, 1.0 / count as f64)?)
}

/// `rgb + λ1·flow + λ2·depth + λ3·pc + λ4·rgb_s`.
pub fn total_loss(g: &mut Graph, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let mut total = parts.rgb;
    for (v, lam) in [(parts.flow, w.flow), (parts.depth, w.depth), (parts.pc, w.pc), (parts.rgb_s, w.warp)] {
        if lam != 0.0 {
            let s = g.scale(v, lam)?;
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}

/// Appends one CSV row per iteration.
pub struct LossLog {
    file: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

pub const LOSS_LOG_HEADER: &str = "iter,rgb,flow,depth,pc,rgb_s,total,psnr_train";

impl LossLog {
    /// Opens `path`, writing the header when the file is new or empty.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut log = LossLog {
            file: std::io::BufWriter::new(f),
            path: path.to_path_buf(),
        };
        if fresh {
            writeln!(log.file, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(&log.path, e))?;
        }
        Ok(log)
    }

    pub fn append(&mut self, iter: usize, r: &LossReport, psnr: f64) -> Result<()> {
        writeln!(
            self.file,
            "{iter},{},{},{},{},{},{},{}",
            r.rgb, r.flow, r.depth, r.pc, r.rgb_s, r.total, psnr
        )
        .map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camgeo::rodrigues;
    use diffcore::ParamStore;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn value(g: &Graph, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    fn identity(g: &mut Graph) -> PoseVars {
        let v = g.constant(t(&[6], vec![0.0; 6])).unwrap();
        rodrigues(g, v).unwrap()
    }

    #[test]
    fn rgb_examples() {
        let mut g = Graph::new();
        let c = t(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let same = g.constant(c.clone()).unwrap();
        let l = loss_rgb(&mut g, same, &c).unwrap();
        assert_eq!(value(&g, l), 0.0);
        let shifted = g.constant(t(&[2, 3], c.data().iter().map(|v| v + 0.1).collect())).unwrap();
        let l = loss_rgb(&mut g, shifted, &c).unwrap();
        assert!((value(&g, l) - 0.3).abs() < 1e-12);
        let black = g.constant(t(&[1, 3], vec![0.0; 3])).unwrap();
        let l = loss_rgb(&mut g, black, &t(&[1, 3], vec![1.0; 3])).unwrap();
        assert_eq!(value(&g, l), 3.0);
    }

    #[test]
    fn flow_examples() {
        let mut g = Graph::new();
        let target = t(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let p = g.constant(target.clone()).unwrap();
        let l = loss_flow(&mut g, p, &target, &[true; 4]).unwrap();
        assert_eq!(value(&g, l), 0.0);
        let off = g.constant(t(&[4, 2], target.data().iter().enumerate().map(|(i, v)| if i % 2 == 0 { v + 1.0 } else { *v }).collect())).unwrap();
        let l = loss_flow(&mut g, off, &target, &[true; 4]).unwrap();
        assert_eq!(value(&g, l), 1.0);
        let off2 = g.constant(t(&[4, 2], target.data().iter().enumerate().map(|(i, v)| if i % 2 == 0 { v + 2.0 } else { *v }).collect())).unwrap();
        let l = loss_flow(&mut g, off2, &target, &[true, false, true, false]).unwrap();
        assert_eq!(value(&g, l), 2.0);
        let l = loss_flow(&mut g, off2, &target, &[false; 4]).unwrap();
        assert_eq!(value(&g, l), 0.0);
    }

    #[test]
    fn depth_examples() {
        let mut g = Graph::new();
        let d = t(&[3], vec![1.0, 2.0, 3.0]);
        let p = g.constant(d.clone()).unwrap();
        let l = loss_depth(&mut g, p, &d).unwrap();
        assert_eq!(value(&g, l), 0.0);
        let p = g.constant(t(&[3], vec![1.5, 2.5, 3.5])).unwrap();
        let l = loss_depth(&mut g, p, &d).unwrap();
        assert_eq!(value(&g, l), 0.5);
        let p = g.constant(t(&[3], vec![0.0, 4.0, 2.0])).unwrap();
        let l = loss_depth(&mut g, p, &d).unwrap();
        assert!((value(&g, l) - (1.0 + 2.0 + 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn chamfer_examples() {
        let mut g = Graph::new();
        let cloud = t(&[3, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 2.0, 0.0, 3.0, 1.5]);
        let id = identity(&mut g);
        let l = loss_pointcloud(&mut g, &cloud, &cloud, &id, &id).unwrap();
        assert_eq!(value(&g, l), 0.0);
        let eps = 1e-3;
        let shifted = t(&[3, 3], cloud.data().iter().enumerate().map(|(i, v)| if i % 3 == 0 { v + eps } else { *v }).collect());
        let l = loss_pointcloud(&mut g, &cloud, &shifted, &id, &id).unwrap();
        assert!((value(&g, l) - 2.0 * eps * eps).abs() < 1e-15);
    }

    #[test]
    fn chamfer_gradient_reaches_only_poses() {
        let mut store = ParamStore::new();
        let pi = store.add("pose_i", t(&[6], vec![0.01, 0.02, 0.0, 0.1, 0.0, 0.0])).unwrap();
        let pj = store.add("pose_j", t(&[6], vec![0.0, -0.01, 0.03, 0.0, 0.2, 0.0])).unwrap();
        let mut g = Graph::new();
        let vi = g.param(&store, pi).unwrap();
        let vj = g.param(&store, pj).unwrap();
        let a = rodrigues(&mut g, vi).unwrap();
        let b = rodrigues(&mut g, vj).unwrap();
        let cloud = t(&[3, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 2.0, 0.0, 3.0, 1.5]);
        let l = loss_pointcloud(&mut g, &cloud, &cloud, &a, &b).unwrap();
        g.backward(l, &mut store).unwrap();
        for id in [pi, pj] {
            assert!(store.grad(id).unwrap().data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn warp_on_a_ramp() {
        let k = CameraIntrinsics::new(10.0, 10.0, 3.5, 2.5, 8, 6).unwrap();
        let slope = 0.1;
        let img: Vec<f64> = (0..6).flat_map(|_| (0..8).flat_map(|x| [slope * x as f64, 0.2, 0.3])).collect();
        let image = t(&[6, 8, 3], img.clone());
        // Fronto-parallel plane at depth 2; moving +0.2 in x shifts it 1 px left.
        let depth = 2.0;
        let mut pts = Vec::new();
        let mut cols = Vec::new();
        for y in 0..6 {
            for x in 0..8 {
                let r = k.unproject(x as f64, y as f64);
                pts.extend((r * depth).iter());
                cols.extend(&img[3 * (y * 8 + x)..3 * (y * 8 + x) + 3]);
            }
        }
        let cloud = t(&[48, 3], pts);
        let colors = t(&[48, 3], cols);
        let mut g = Graph::new();
        let id = identity(&mut g);
        let l = loss_warp(&mut g, &colors, &cloud, &image, &id, &id, &k).unwrap();
        assert_eq!(value(&g, l), 0.0);
        let moved = g.constant(t(&[6], vec![0.0, 0.0, 0.0, depth / k.fx, 0.0, 0.0])).unwrap();
        let mv = rodrigues(&mut g, moved).unwrap();
        let l = loss_warp(&mut g, &colors, &cloud, &image, &id, &mv, &k).unwrap();
        assert!((value(&g, l) - slope).abs() < 1e-12);
        let far = g.constant(t(&[6], vec![0.0, 0.0, 0.0, 100.0, 0.0, 0.0])).unwrap();
        let fv = rodrigues(&mut g, far).unwrap();
        let l = loss_warp(&mut g, &colors, &cloud, &image, &id, &fv, &k).unwrap();
        assert_eq!(value(&g, l), 0.0);
    }

    #[test]
    fn total_with_default_weights() {
        let mut g = Graph::new();
        let one = g.scalar(1.0).unwrap();
        let parts = LossParts {
            rgb: one,
            flow: one,
            depth: one,
            pc: one,
            rgb_s: one,
        };
        let l = total_loss(&mut g, &parts, &LossWeights::default()).unwrap();
        assert!((value(&g, l) - 3.09).abs() < 1e-12);
        let zero_w = LossWeights {
            flow: 0.0,
            depth: 0.0,
            pc: 0.0,
            warp: 0.0,
        };
        let l = total_loss(&mut g, &parts, &zero_w).unwrap();
        assert_eq!(value(&g, l), 1.0);
        let r = LossReport::weighted(1.0, 1.0, 1.0, 1.0, 1.0, &LossWeights::default());
        assert!((r.total - 3.09).abs() < 1e-12);
    }
}
