//! Full-frame rendering from a trained model and held-out pose fitting.

use diffcore::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::model::{Model, Networks};
use crate::camgeo::{CameraIntrinsics, PoseVector, SampleBatch};
use crate::error::{Error, Result};
use crate::flowbij::compose_flow;
use crate::losses::loss_rgb;
use crate::raster::{DepthMap, FlowField, ImageBuffer};

type NoRng = ChaCha8Rng;

fn chunks(k: &CameraIntrinsics, chunk: usize) -> Vec<Vec<[f64; 2]>> {
    k.pixel_grid().chunks(chunk.max(1)).map(|c| c.to_vec()).collect()
}

fn midpoint_batch(pixels: Vec<[f64; 2]>, k: &CameraIntrinsics, cfg: &TrainConfig) -> Result<SampleBatch> {
    SampleBatch::new::<NoRng>(pixels, 0, 0, k, &cfg.sampling(), None)
}

/// Geometry-branch colour and ray distance for every pixel at `pose`.
pub fn render_view(model: &Model, pose: &PoseVector, k: &CameraIntrinsics) -> Result<(ImageBuffer, DepthMap)> {
    let cfg = &model.config;
    let mut rgb = Vec::with_capacity(3 * k.pixel_count());
    let mut depth = Vec::with_capacity(k.pixel_count());
    for pixels in chunks(k, cfg.render_chunk) {
        let batch = midpoint_batch(pixels, k, cfg)?;
        let mut g = Graph::new();
        let pv = g.constant(Tensor::vector(pose.to_vec())?)?;
        let fwd = super::model::forward(&mut g, &model.nets, &model.store, cfg, k, &batch, pv, None)?;
        rgb.extend_from_slice(g.value(fwd.render.rgb).data());
        depth.extend(g.value(fwd.render.depth).data().iter().map(|&d| d as f32));
    }
    Ok((
        ImageBuffer::new(k.width, k.height, rgb)?,
        DepthMap::new(k.width, k.height, depth)?,
    ))
}

fn flow_correspondence(
    g: &mut Graph,
    nets: &Networks,
    store: &ParamStore,
    cfg: &TrainConfig,
    k: &CameraIntrinsics,
    batch: &SampleBatch,
    a: Var,
    b: Var,
) -> Result<crate::flowbij::Correspondence> {
    let x = g.constant(batch.camera_points.clone())?;
    let psi_a = nets.embedding.embed(g, store, a)?;
    let r = nets.bijection.forward(g, store, x, psi_a)?;
    let canonical = nets.canonical.forward(g, store, r)?;
    let psi_b = nets.embedding.embed(g, store, b)?;
    let o_b = nets.bijection.inverse(g, store, r, psi_b)?;
    compose_flow(g, o_b, canonical.sigma, batch.rays(), batch.samples(), k, cfg.projection_mode())
}

/// Flow-branch displacement from the view at `a` to the view at `b`;
/// pixels whose correspondence cannot be projected are marked occluded.
pub fn render_flow(model: &Model, a: &PoseVector, b: &PoseVector, k: &CameraIntrinsics) -> Result<FlowField> {
    let cfg = &model.config;
    let mut data = Vec::with_capacity(2 * k.pixel_count());
    let mut occluded = Vec::with_capacity(k.pixel_count());
    for pixels in chunks(k, cfg.render_chunk) {
        let batch = midpoint_batch(pixels, k, cfg)?;
        let mut g = Graph::new();
        let va = g.constant(Tensor::vector(a.to_vec())?)?;
        let vb = g.constant(Tensor::vector(b.to_vec())?)?;
        let corr = flow_correspondence(&mut g, &model.nets, &model.store, cfg, k, &batch, va, vb)?;
        let p = g.value(corr.pixels).data();
        for (r, px) in batch.pixels.iter().enumerate() {
            if corr.valid[r] {
                data.push((p[2 * r] - px[0]) as f32);
                data.push((p[2 * r + 1] - px[1]) as f32);
            } else {
                data.extend_from_slice(&[0.0, 0.0]);
            }
            occluded.push(!corr.valid[r]);
        }
    }
    FlowField::new(k.width, k.height, data, occluded)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFit {
    pub pose: PoseVector,
    /// Photometric loss before each step, then after the last one.
    pub losses: Vec<f64>,
    pub diverged: bool,
}

impl PoseFit {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }
}

/// Fits a single 6-DoF pose to `target` with every network frozen, using
/// a fixed seeded pixel subset so the objective is the same every step.
pub fn optimize_test_pose(
    model: &Model,
    target: &ImageBuffer,
    init: &PoseVector,
    k: &CameraIntrinsics,
    iterations: usize,
    lr: f64,
) -> Result<PoseFit> {
    let cfg = &model.config;
    if target.width != k.width || target.height != k.height {
        return Err(Error::Contract(format!(
            "target is {}x{}, the camera is {}x{}",
            target.width, target.height, k.width, k.height
        )));
    }
    let mut store = model.store.clone();
    let frozen: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in frozen {
        store.set_requires_grad(id, false);
    }
    let pid = store.add("test_pose", Tensor::vector(init.to_vec())?)?;
    let mut adam = Adam::new(&store, vec![pid], AdamConfig::with_lr(lr))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = k.pixel_count();
    let idx = sample(&mut rng, count, cfg.test_pose_rays.min(count)).into_vec();
    let pixels: Vec<[f64; 2]> = idx.iter().map(|&p| [(p % k.width) as f64, (p / k.width) as f64]).collect();
    let colors: Vec<f64> = idx.iter().flat_map(|&p| target.data[3 * p..3 * p + 3].to_vec()).collect();
    let colors = Tensor::new(vec![idx.len(), 3], colors)?;
    let batch = midpoint_batch(pixels, k, cfg)?;

    let mut losses = Vec::with_capacity(iterations + 1);
    for step in 0..=iterations {
        let mut g = Graph::new();
        let pv = g.param(&store, pid)?;
        let fwd = super::model::forward(&mut g, &model.nets, &store, cfg, k, &batch, pv, None)?;
        let loss = loss_rgb(&mut g, fwd.render.rgb, &colors)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite photometric loss while fitting a test pose".into()));
        }
        losses.push(value);
        if value > 3.0 * losses[0] {
            warn!("test pose fit diverged at step {step}: loss {value:.5} from {:.5}", losses[0]);
            return Ok(PoseFit {
                pose: *init,
                losses,
                diverged: true,
            });
        }
        if step == iterations {
            break;
        }
        store.clear_grads();
        g.backward(loss, &mut store)?;
        adam.step(&mut store)?;
    }
    let d = store.value(pid).data();
    Ok(PoseFit {
        pose: [d[0], d[1], d[2], d[3], d[4], d[5]],
        losses,
        diverged: false,
    })
}

/// A pose given as six numbers (axis-angle rotation, then translation) or
/// as a TUM trajectory, whose first entry is used.
pub fn parse_pose_text(text: &str) -> Result<PoseVector> {
    let numbers: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
        .collect();
    if numbers.len() == 6 {
        let mut v = [0.0; 6];
        for (slot, n) in v.iter_mut().zip(&numbers) {
            *slot = n
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Config(format!("pose component `{n}` is not a finite number")))?;
        }
        return Ok(v);
    }
    let entries = crate::oracleio::formats::decode_tum(text)?;
    let first = entries
        .first()
        .ok_or_else(|| Error::Config("pose file holds neither six numbers nor a trajectory entry".into()))?;
    Ok(first.pose()?.to_vector())
}

/// Depth to RGB through a fixed blue-to-yellow ramp over `[lo, hi]`.
pub fn colorize_depth(depth: &DepthMap) -> Vec<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [0.05, 0.03, 0.35],
        [0.25, 0.35, 0.85],
        [0.15, 0.75, 0.65],
        [0.75, 0.85, 0.25],
        [0.98, 0.95, 0.55],
    ];
    let finite = depth.data.iter().filter(|d| d.is_finite()).map(|&d| f64::from(d));
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), d| (a.min(d), b.max(d)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(3 * depth.data.len());
    for &d in &depth.data {
        let t = if d.is_finite() { ((f64::from(d) - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        let x = t * (STOPS.len() - 1) as f64;
        let i = (x.floor() as usize).min(STOPS.len() - 2);
        let f = x - i as f64;
        for c in 0..3 {
            let v = STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f;
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

fn color_wheel() -> Vec<[f64; 3]> {
    let segments: [(usize, [usize; 2], bool); 6] = [
        (15, [0, 1], true),
        (6, [1, 0], false),
        (4, [1, 2], true),
        (11, [2, 1], false),
        (13, [2, 0], true),
        (6, [0, 2], false),
    ];
    let mut wheel = Vec::with_capacity(55);
    for (n, [full, ramp], rising) in segments {
        for i in 0..n {
            let mut c = [0.0; 3];
            c[full] = 255.0;
            let f = 255.0 * i as f64 / n as f64;
            c[ramp] = if rising { f } else { 255.0 - f };
            wheel.push(c);
        }
    }
    wheel
}

/// Middlebury colour coding, normalized by the largest valid magnitude;
/// invalid pixels are black.
pub fn colorize_flow(flow: &FlowField) -> Vec<u8> {
    let wheel = color_wheel();
    let n = wheel.len() as f64;
    let vectors: Vec<[f64; 2]> = (0..flow.occluded.len())
        .map(|p| [f64::from(flow.data[2 * p]), f64::from(flow.data[2 * p + 1])])
        .collect();
    let max_rad = vectors
        .iter()
        .zip(&flow.occluded)
        .filter(|(v, &o)| !o && v[0].is_finite() && v[1].is_finite())
        .map(|(v, _)| v[0].hypot(v[1]))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut out = Vec::with_capacity(3 * vectors.len());
    for (v, &occ) in vectors.iter().zip(&flow.occluded) {
        if occ || !v[0].is_finite() || !v[1].is_finite() {
            out.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let (u, w) = (v[0] / max_rad, v[1] / max_rad);
        let rad = u.hypot(w).min(1.0);
        let a = (-w).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (n - 1.0);
        let k0 = fk.floor() as usize % wheel.len();
        let k1 = (k0 + 1) % wheel.len();
        let f = fk - fk.floor();
        for c in 0..3 {
            let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
            let col = 1.0 - rad * (1.0 - col);
            out.push((255.0 * col).round() as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> (Model, CameraIntrinsics) {
        let mut cfg = TrainConfig::desk();
        cfg.samples = 8;
        cfg.geometry_width = 16;
        cfg.canonical_width = 16;
        cfg.feature_width = 8;
        cfg.embedding_width = 16;
        cfg.latent_width = 8;
        cfg.bijection_hidden = 8;
        cfg.projection_width = 8;
        cfg.test_pose_rays = 32;
        (Model::new(&cfg, 3).unwrap(), CameraIntrinsics::centered(20.0, 16, 16).unwrap())
    }

    #[test]
    fn render_is_deterministic_and_finite() {
        let (m, k) = tiny_model();
        let pose = [0.01, -0.02, 0.0, 0.1, 0.0, 0.05];
        let (a, da) = render_view(&m, &pose, &k).unwrap();
        let (b, db) = render_view(&m, &pose, &k).unwrap();
        assert_eq!(a, b);
        assert_eq!(da, db);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(da.data.iter().all(|d| d.is_finite() && *d >= 0.0));
    }

    #[test]
    fn identical_poses_give_near_zero_flow() {
        let (m, k) = tiny_model();
        let pose = [0.02, 0.01, -0.03, 0.0, 0.1, 0.0];
        let f = render_flow(&m, &pose, &pose, &k).unwrap();
        assert!(f.valid_count() > 0);
        for p in 0..f.occluded.len() {
            if !f.occluded[p] {
                assert!(f.data[2 * p].abs() < 1e-4 && f.data[2 * p + 1].abs() < 1e-4);
            }
        }
    }

    #[test]
    fn fitting_zero_iterations_returns_init() {
        let (m, k) = tiny_model();
        let (img, _) = render_view(&m, &[0.0; 6], &k).unwrap();
        let init = [0.01, 0.0, 0.0, 0.0, 0.02, 0.0];
        let fit = optimize_test_pose(&m, &img, &init, &k, 0, 1e-3).unwrap();
        assert_eq!(fit.pose, init);
        assert_eq!(fit.losses.len(), 1);
    }

    #[test]
    fn fitting_lowers_photometric_loss() {
        let (m, k) = tiny_model();
        let (img, _) = render_view(&m, &[0.0; 6], &k).unwrap();
        let fit = optimize_test_pose(&m, &img, &[0.05, -0.05, 0.02, 0.05, 0.0, 0.0], &k, 20, 1e-2).unwrap();
        assert!(!fit.diverged);
        assert!(fit.final_loss() < fit.initial_loss());
    }

    #[test]
    fn pose_text_accepts_vectors_and_tum() {
        assert_eq!(parse_pose_text("0 0 0.1 # rot\n1 2 3\n").unwrap(), [0.0, 0.0, 0.1, 1.0, 2.0, 3.0]);
        let v = parse_pose_text("4 1 2 3 0 0 0 1\n").unwrap();
        assert_eq!(v, [0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        assert!(parse_pose_text("").is_err());
        assert!(parse_pose_text("1 2 3 4 5 nan").is_err());
    }

    #[test]
    fn flow_colors_are_white_at_rest_and_black_when_invalid() {
        let mut f = FlowField::zeros(2, 1).unwrap();
        f.data[2] = 1.0;
        f.occluded[0] = false;
        f.occluded[1] = true;
        let c = colorize_flow(&f);
        assert_eq!(&c[..3], &[255, 255, 255]);
        assert_eq!(&c[3..], &[0, 0, 0]);
    }

    #[test]
    fn depth_ramp_spans_the_stops() {
        let d = DepthMap::new(2, 1, vec![1.0, 3.0]).unwrap();
        let c = colorize_depth(&d);
        assert_eq!(&c[..3], &[13, 8, 89]);
        assert_eq!(&c[3..], &[250, 242, 140]);
    }
}
