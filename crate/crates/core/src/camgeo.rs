//! Pinhole camera, pose parameterization, ray sampling and trajectory
//! evaluation.
//!
//! Poses are camera-to-world. Camera axes follow the usual vision layout:
//! x right, y down, z forward. Pixel coordinates are continuous with `(0, 0)`
//! at the centre of the top-left pixel.

use diffcore::{rotation_coefficients, Graph, Tensor, Var};
use nalgebra::{Matrix3, UnitQuaternion, Vector3, SVD};
use rand::Rng;

use crate::error::{Error, Result};

/// Points whose camera depth falls at or below this are not projected.
pub const MIN_PROJECT_DEPTH: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            0.5 * (width as f64 - 1.0),
            0.5 * (height as f64 - 1.0),
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Config(format!("bad focal lengths in {self:?}")));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::Config(format!("principal point outside the image in {self:?}")));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// `K⁻¹ [u, v, 1]`.
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Whether a continuous coordinate lies on the image (pixel edges included).
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u <= self.width as f64 - 0.5 && v <= self.height as f64 - 0.5
    }

    /// Centres of every pixel in row-major order.
    pub fn pixel_grid(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.pixel_count());
        for y in 0..self.height {
            for x in 0..self.width {
                out.push([x as f64, y as f64]);
            }
        }
        out
    }
}

/// How flow-branch camera points are laid out and projected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProjectionMode {
    Perspective,
    /// Planar coordinates `((u − cx)/W · s, (v − cy)/H · s, d)`.
    Orthogonal { scale: f64 },
}

/// Six-component pose: axis-angle rotation followed by translation.
pub type PoseVector = [f64; 6];

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMatrix {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseMatrix {
    pub fn identity() -> Self {
        PoseMatrix {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rodrigues map on plain numbers; matches [`rodrigues`] exactly.
    pub fn from_vector(v: &PoseVector) -> Self {
        let r = Vector3::new(v[0], v[1], v[2]);
        let (a, b) = rotation_coefficients(r.norm_squared());
        let k = r.cross_matrix();
        PoseMatrix {
            rotation: Matrix3::identity() + k * a + (k * k) * b,
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    /// Inverse of [`PoseMatrix::from_vector`], with the angle in `[0, π]`.
    pub fn to_vector(&self) -> PoseVector {
        let r = self.unit_quaternion().scaled_axis();
        let t = self.translation;
        [r.x, r.y, r.z, t.x, t.y, t.z]
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// Quaternion `(qx, qy, qz, qw)` with `qw ≥ 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = self.unit_quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    pub fn from_quaternion(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        let raw = nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]);
        if !(raw.norm() > 1e-12) || !raw.norm().is_finite() {
            return Err(Error::Contract(format!("degenerate quaternion {q:?}")));
        }
        let unit = UnitQuaternion::from_quaternion(raw);
        Ok(PoseMatrix {
            rotation: unit.to_rotation_matrix().into_inner(),
            translation: Vector3::from(t),
        })
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        PoseMatrix {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PoseMatrix) -> Self {
        PoseMatrix {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        let c = 0.5 * (self.rotation.trace() - 1.0);
        c.clamp(-1.0, 1.0).acos()
    }
}

/// Graph handles of a pose realized as `R: [3, 3]` and `t: [3]`.
#[derive(Debug, Clone, Copy)]
pub struct PoseVars {
    pub rotation: Var,
    pub translation: Var,
}

// Maps r (as a row) to the flattened cross-product matrix [r]ₓ.
fn cross_generator() -> Tensor {
    let mut g = vec![0.0; 27];
    let mut set = |axis: usize, slot: usize, v: f64| g[axis * 9 + slot] = v;
    set(2, 1, -1.0);
    set(1, 2, 1.0);
    set(2, 3, 1.0);
    set(0, 5, -1.0);
    set(1, 6, -1.0);
    set(0, 7, 1.0);
    Tensor::new(vec![3, 9], g).expect("static shape")
}

/// Differentiable Rodrigues map of a `[6]` pose variable.
pub fn rodrigues(g: &mut Graph, v: Var) -> Result<PoseVars> {
    if g.shape(v) != [6] {
        return Err(Error::Contract(format!("pose vector must be [6], got {:?}", g.shape(v))));
    }
    let r = g.slice_last(v, 0, 3)?;
    let translation = g.slice_last(v, 3, 6)?;
    let r2 = g.square(r)?;
    let theta_sq = g.sum(r2)?;
    let a = g.rot_coeff_a(theta_sq)?;
    let b = g.rot_coeff_b(theta_sq)?;
    let row = g.reshape(r, &[1, 3])?;
    let gen = g.constant(cross_generator())?;
    let flat = g.matmul(row, gen)?;
    let k = g.reshape(flat, &[3, 3])?;
    let k2 = g.matmul(k, k)?;
    let ak = g.mul(k, a)?;
    let bk2 = g.mul(k2, b)?;
    let eye = g.constant(Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?)?;
    let s = g.add(eye, ak)?;
    let rotation = g.add(s, bk2)?;
    Ok(PoseVars {
        rotation,
        translation,
    })
}

/// Stratified distances `[n, m]` over `[near, far]`: bin midpoints, or a
/// uniform draw inside each bin when `rng` is given.
pub fn stratified_distances<R: Rng>(
    n: usize,
    m: usize,
    near: f64,
    far: f64,
    mut rng: Option<&mut R>,
) -> Result<Tensor> {
    if m == 0 || n == 0 || !(near > 0.0 && far > near) {
        return Err(Error::Sampling(format!("bad sampling request n={n} m={m} [{near}, {far}]")));
    }
    let step = (far - near) / m as f64;
    let mut z = Vec::with_capacity(n * m);
    for _ in 0..n {
        for k in 0..m {
            let jitter = match rng.as_deref_mut() {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            z.push(near + (k as f64 + jitter) * step);
        }
    }
    Ok(Tensor::new(vec![n, m], z)?)
}

fn check_pixels(pixels: &[[f64; 2]], k: &CameraIntrinsics) -> Result<()> {
    if pixels.is_empty() {
        return Err(Error::Sampling("no pixels".into()));
    }
    for p in pixels {
        if !k.contains(p[0], p[1]) {
            return Err(Error::Sampling(format!(
                "pixel ({}, {}) outside {}x{} image",
                p[0], p[1], k.width, k.height
            )));
        }
    }
    Ok(())
}

/// Unit camera-frame ray directions `[n, 3]` through `pixels`.
pub fn camera_rays(pixels: &[[f64; 2]], k: &CameraIntrinsics) -> Result<Tensor> {
    check_pixels(pixels, k)?;
    let mut out = Vec::with_capacity(pixels.len() * 3);
    for p in pixels {
        let d = k.unproject(p[0], p[1]).normalize();
        out.extend_from_slice(d.as_slice());
    }
    Ok(Tensor::new(vec![pixels.len(), 3], out)?)
}

/// World-space samples `[n·m, 3]` (ray-major) and world ray directions
/// `[n, 3]` for distances `z: [n, m]` along rays of the posed camera.
pub fn backproject_world(
    g: &mut Graph,
    pixels: &[[f64; 2]],
    k: &CameraIntrinsics,
    pose: &PoseVars,
    z: &Tensor,
) -> Result<(Var, Var)> {
    let rays = camera_rays(pixels, k)?;
    let n = pixels.len();
    if z.shape().len() != 2 || z.shape()[0] != n {
        return Err(Error::Contract(format!("distances {:?} for {n} rays", z.shape())));
    }
    let m = z.shape()[1];
    let rays = g.constant(rays)?;
    let rt = g.transpose(pose.rotation)?;
    let dirs = g.matmul(rays, rt)?;
    let index: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, m)).collect();
    let rep = g.gather_rows(dirs, &index)?;
    let zc = g.constant(z.clone().reshape(vec![n * m, 1])?)?;
    let scaled = g.mul(rep, zc)?;
    let points = g.add(scaled, pose.translation)?;
    Ok((points, dirs))
}

/// Flow-branch camera points `[n·m, 3]` at depths `d: [n, m]`.
pub fn backproject_camera(
    pixels: &[[f64; 2]],
    k: &CameraIntrinsics,
    d: &Tensor,
    mode: ProjectionMode,
) -> Result<Tensor> {
    check_pixels(pixels, k)?;
    let n = pixels.len();
    if d.shape().len() != 2 || d.shape()[0] != n {
        return Err(Error::Contract(format!("depths {:?} for {n} rays", d.shape())));
    }
    let m = d.shape()[1];
    let dv = d.data();
    let mut out = Vec::with_capacity(n * m * 3);
    for (i, p) in pixels.iter().enumerate() {
        let base = match mode {
            ProjectionMode::Perspective => k.unproject(p[0], p[1]),
            ProjectionMode::Orthogonal { scale } => Vector3::new(
                (p[0] - k.cx) / k.width as f64 * scale,
                (p[1] - k.cy) / k.height as f64 * scale,
                1.0,
            ),
        };
        for s in 0..m {
            let depth = dv[i * m + s];
            match mode {
                ProjectionMode::Perspective => out.extend_from_slice((base * depth).as_slice()),
                ProjectionMode::Orthogonal { .. } => out.extend_from_slice(&[base.x, base.y, depth]),
            }
        }
    }
    Ok(Tensor::new(vec![n * m, 3], out)?)
}

/// Differentiable projection of camera points `[p, 3]` to pixels `[p, 2]`.
/// The mask is false where the perspective depth is at most
/// [`MIN_PROJECT_DEPTH`]; those rows carry placeholder values.
pub fn project(
    g: &mut Graph,
    points: Var,
    k: &CameraIntrinsics,
    mode: ProjectionMode,
) -> Result<(Var, Vec<bool>)> {
    let shape = g.shape(points).to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::Contract(format!("project expects [p, 3], got {shape:?}")));
    }
    let p = shape[0];
    let x = g.slice_last(points, 0, 1)?;
    let y = g.slice_last(points, 1, 2)?;
    match mode {
        ProjectionMode::Perspective => {
            let zv = g.slice_last(points, 2, 3)?;
            let vals = g.value(zv).data();
            let valid: Vec<bool> = vals.iter().map(|&z| z > MIN_PROJECT_DEPTH).collect();
            // Invalid rows divide by 1 instead: finite, and masked downstream.
            let keep = Tensor::new(vec![p, 1], valid.iter().map(|&v| f64::from(v as u8)).collect())?;
            let fill = Tensor::new(vec![p, 1], valid.iter().map(|&v| f64::from(!v as u8)).collect())?;
            let keep = g.constant(keep)?;
            let fill = g.constant(fill)?;
            let zk = g.mul(zv, keep)?;
            let safe = g.add(zk, fill)?;
            let xn = g.div(x, safe)?;
            let yn = g.div(y, safe)?;
            let u = g.scale(xn, k.fx)?;
            let u = g.add_scalar(u, k.cx)?;
            let v = g.scale(yn, k.fy)?;
            let v = g.add_scalar(v, k.cy)?;
            Ok((g.concat(&[u, v])?, valid))
        }
        ProjectionMode::Orthogonal { scale } => {
            let u = g.scale(x, k.width as f64 / scale)?;
            let u = g.add_scalar(u, k.cx)?;
            let v = g.scale(y, k.height as f64 / scale)?;
            let v = g.add_scalar(v, k.cy)?;
            Ok((g.concat(&[u, v])?, vec![true; p]))
        }
    }
}

/// Plain perspective projection; `None` behind the camera.
pub fn project_point(p: &Vector3<f64>, k: &CameraIntrinsics) -> Option<[f64; 2]> {
    if p.z <= MIN_PROJECT_DEPTH {
        return None;
    }
    Some([k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy])
}

/// Camera-frame points at ray distances `depth` through `pixels`, `[n, 3]`.
pub fn depth_to_points(pixels: &[[f64; 2]], depth: &[f64], k: &CameraIntrinsics) -> Result<Tensor> {
    if pixels.len() != depth.len() {
        return Err(Error::Contract(format!("{} pixels, {} depths", pixels.len(), depth.len())));
    }
    let rays = camera_rays(pixels, k)?;
    let data = rays
        .data()
        .chunks(3)
        .zip(depth)
        .flat_map(|(r, &d)| [r[0] * d, r[1] * d, r[2] * d])
        .collect();
    Ok(Tensor::new(vec![pixels.len(), 3], data)?)
}

/// Shared per-iteration sample set for both branches.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub pixels: Vec<[f64; 2]>,
    pub frame_i: usize,
    pub frame_j: usize,
    /// Distances along unit rays, `[n, m]`.
    pub z_values: Tensor,
    /// Flow-branch depths, `α · z`, `[n, m]`.
    pub d_values: Tensor,
    /// Flow-branch camera points, `[n·m, 3]`.
    pub camera_points: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct SamplingConfig {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    pub alpha: f64,
    pub mode: ProjectionMode,
}

impl SampleBatch {
    pub fn new<R: Rng>(
        pixels: Vec<[f64; 2]>,
        frame_i: usize,
        frame_j: usize,
        k: &CameraIntrinsics,
        cfg: &SamplingConfig,
        rng: Option<&mut R>,
    ) -> Result<Self> {
        check_pixels(&pixels, k)?;
        let z_values = stratified_distances(pixels.len(), cfg.samples, cfg.near, cfg.far, rng)?;
        let d: Vec<f64> = z_values.data().iter().map(|z| cfg.alpha * z).collect();
        let d_values = Tensor::new(z_values.shape().to_vec(), d)?;
        let camera_points = backproject_camera(&pixels, k, &d_values, cfg.mode)?;
        Ok(SampleBatch {
            pixels,
            frame_i,
            frame_j,
            z_values,
            d_values,
            camera_points,
        })
    }

    pub fn rays(&self) -> usize {
        self.pixels.len()
    }

    pub fn samples(&self) -> usize {
        self.z_values.shape()[1]
    }

    /// Geometry-branch samples for `pose` (normally frame `i`'s).
    pub fn world_points(&self, g: &mut Graph, k: &CameraIntrinsics, pose: &PoseVars) -> Result<(Var, Var)> {
        backproject_world(g, &self.pixels, k, pose, &self.z_values)
    }
}

/// Similarity `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    /// Maps a camera-to-world pose through the similarity.
    pub fn apply_pose(&self, pose: &PoseMatrix) -> PoseMatrix {
        PoseMatrix {
            rotation: self.rotation * pose.rotation,
            translation: self.apply(&pose.translation),
        }
    }
}

/// Least-squares similarity taking `est` onto `gt`.
pub fn umeyama_align(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Similarity> {
    if est.len() != gt.len() {
        return Err(Error::Contract(format!("trajectory lengths {} vs {}", est.len(), gt.len())));
    }
    if est.len() < 3 {
        return Err(Error::Alignment(format!("need at least 3 positions, got {}", est.len())));
    }
    let n = est.len() as f64;
    let mu_x = est.iter().sum::<Vector3<f64>>() / n;
    let mu_y = gt.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut cov_x = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in est.iter().zip(gt) {
        let dx = x - mu_x;
        cov += (y - mu_y) * dx.transpose();
        cov_x += dx * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= n;
    var_x /= n;
    let spread = SVD::new(cov_x / n, false, false).singular_values;
    if !(spread[0] > 1e-18) || spread[1] <= 1e-10 * spread[0] {
        return Err(Error::Alignment("positions are coincident or collinear".into()));
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Alignment("SVD did not converge".into())),
    };
    let mut s = Matrix3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * vt;
    let d = svd.singular_values;
    let scale = (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_x;
    let translation = mu_y - rotation * mu_x * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoseErrors {
    /// RMSE of positions, scene units.
    pub ate: f64,
    /// Mean translation of the consecutive relative-pose error, scene units.
    pub rpe_t: f64,
    /// Mean rotation angle of the consecutive relative-pose error, degrees.
    pub rpe_r: f64,
}

/// Errors between already-aligned trajectories.
pub fn pose_metrics(est: &[PoseMatrix], gt: &[PoseMatrix]) -> Result<PoseErrors> {
    if est.len() != gt.len() || est.is_empty() {
        return Err(Error::Contract(format!("trajectory lengths {} vs {}", est.len(), gt.len())));
    }
    let n = est.len() as f64;
    let sq: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (e.translation - g.translation).norm_squared())
        .sum();
    let ate = (sq / n).sqrt();
    let (mut rpe_t, mut rpe_r) = (0.0, 0.0);
    let pairs = est.len().saturating_sub(1);
    for i in 0..pairs {
        let rel_e = est[i].inverse().compose(&est[i + 1]);
        let rel_g = gt[i].inverse().compose(&gt[i + 1]);
        let err = rel_g.inverse().compose(&rel_e);
        rpe_t += err.translation.norm();
        rpe_r += err.angle().to_degrees();
    }
    if pairs > 0 {
        rpe_t /= pairs as f64;
        rpe_r /= pairs as f64;
    }
    Ok(PoseErrors { ate, rpe_t, rpe_r })
}

/// Umeyama-aligns `est` to `gt` by position, then measures.
pub fn aligned_pose_metrics(est: &[PoseMatrix], gt: &[PoseMatrix]) -> Result<(Similarity, PoseErrors)> {
    let pe: Vec<_> = est.iter().map(|p| p.translation).collect();
    let pg: Vec<_> = gt.iter().map(|p| p.translation).collect();
    let sim = umeyama_align(&pe, &pg)?;
    let aligned: Vec<_> = est.iter().map(|p| sim.apply_pose(p)).collect();
    Ok((sim, pose_metrics(&aligned, gt)?))
}
