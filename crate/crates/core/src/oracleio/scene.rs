//! Analytic scene with exact ray casting and a parametric camera arc.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camgeo::{project_point, CameraIntrinsics, PoseMatrix, MIN_PROJECT_DEPTH};
use crate::error::{Error, Result};
use crate::raster::{in_pixel_hull, DepthMap, FlowField, ImageBuffer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Points with `normal · x = offset`.
    Plane { normal: Vector3<f64>, offset: f64 },
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Axis-aligned box.
    Cuboid { min: Vector3<f64>, max: Vector3<f64> },
}

impl Shape {
    /// Smallest ray parameter above `t_min` where the ray meets the surface.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_min: f64) -> Option<f64> {
        match *self {
            Shape::Plane { normal, offset } => {
                let den = normal.dot(d);
                if den.abs() < 1e-15 {
                    return None;
                }
                let t = (offset - normal.dot(o)) / den;
                (t > t_min).then_some(t)
            }
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let a = d.norm_squared();
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [(-b - s) / a, (-b + s) / a].into_iter().find(|&t| t > t_min)
            }
            Shape::Cuboid { min, max } => {
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if d[k].abs() < 1e-15 {
                        if o[k] < min[k] || o[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (min[k] - o[k]) / d[k];
                    let b = (max[k] - o[k]) / d[k];
                    lo = lo.max(a.min(b));
                    hi = hi.min(a.max(b));
                }
                if lo > hi {
                    return None;
                }
                [lo, hi].into_iter().find(|&t| t > t_min)
            }
        }
    }
}

/// Smooth colour field `base + amp · sin(k₁·x + φ₁) · cos(k₂·x + φ₂)` per
/// channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Albedo {
    pub base: [f64; 3],
    pub amplitude: f64,
    pub k1: [Vector3<f64>; 3],
    pub k2: [Vector3<f64>; 3],
    pub phase: [[f64; 2]; 3],
}

impl Albedo {
    fn random<R: Rng>(rng: &mut R, max_frequency: f64) -> Self {
        let vec3 = |rng: &mut R| {
            Vector3::new(
                rng.random_range(-max_frequency..max_frequency),
                rng.random_range(-max_frequency..max_frequency),
                rng.random_range(-max_frequency..max_frequency),
            )
        };
        let k1 = [vec3(rng), vec3(rng), vec3(rng)];
        let k2 = [vec3(rng), vec3(rng), vec3(rng)];
        let base = [0; 3].map(|_| rng.random_range(0.3..0.7));
        let phase = [0; 3].map(|_| [rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU)]);
        Albedo {
            base,
            amplitude: 0.25,
            k1,
            k2,
            phase,
        }
    }

    pub fn at(&self, x: &Vector3<f64>) -> [f64; 3] {
        std::array::from_fn(|c| {
            let a = (self.k1[c].dot(x) + self.phase[c][0]).sin();
            let b = (self.k2[c].dot(x) + self.phase[c][1]).cos();
            (self.base[c] + self.amplitude * a * b).clamp(0.0, 1.0)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surface {
    pub shape: Shape,
    pub albedo: Albedo,
}

/// First intersection along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; distance when the direction is unit length.
    pub t: f64,
    pub point: Vector3<f64>,
    pub surface: usize,
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Total yaw swept by the training arc, degrees.
    pub arc_degrees: f64,
    /// Times along the arc, in frame units, of the held-out views.
    pub test_times: Vec<f64>,
    pub occlusion_threshold: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig::for_frames(7)
    }
}

impl SceneConfig {
    /// 64×48 views with two held-out views between training frames.
    pub fn for_frames(frames: usize) -> Self {
        let last = frames.saturating_sub(1) as f64;
        let mut test_times = vec![1.5, last - 1.5];
        test_times.retain(|t| *t > 0.0 && *t < last);
        test_times.dedup();
        SceneConfig {
            frames,
            width: 64,
            height: 48,
            focal: 60.0,
            arc_degrees: 12.0,
            test_times,
            occlusion_threshold: 1e-3,
            near: 0.01,
            far: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 3 {
            return Err(Error::Config(format!("need at least 3 frames, got {}", self.frames)));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!("image {}x{} is below 16x16", self.width, self.height)));
        }
        if !(self.focal > 0.0) || !self.arc_degrees.is_finite() || !(self.occlusion_threshold > 0.0) {
            return Err(Error::Config("focal and occlusion threshold must be positive".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Config(format!("bad bounds [{}, {}]", self.near, self.far)));
        }
        let last = (self.frames - 1) as f64;
        if let Some(t) = self.test_times.iter().find(|t| !(**t >= 0.0 && **t <= last)) {
            return Err(Error::Config(format!("test time {t} outside [0, {last}]")));
        }
        Ok(())
    }
}

const LOOK_AT: [f64; 3] = [0.0, 0.45, 2.7];
const ARC_RADIUS: f64 = 2.7;
const ARC_HEIGHT: f64 = 0.45;
const BOB: f64 = 0.08;

#[derive(Debug, Clone)]
pub struct OracleScene {
    pub config: SceneConfig,
    pub intrinsics: CameraIntrinsics,
    pub surfaces: Vec<Surface>,
}

impl OracleScene {
    /// Floor, back wall, a box and a sphere; the seed picks the textures.
    pub fn new(seed: u64, config: SceneConfig) -> Result<Self> {
        config.validate()?;
        let intrinsics = CameraIntrinsics::centered(config.focal, config.width, config.height)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = [
            (
                Shape::Plane {
                    normal: Vector3::y(),
                    offset: 0.9,
                },
                3.0,
            ),
            (
                Shape::Plane {
                    normal: Vector3::z(),
                    offset: 4.2,
                },
                3.0,
            ),
            (
                Shape::Cuboid {
                    min: Vector3::new(-0.9, 0.1, 2.35),
                    max: Vector3::new(-0.2, 0.9, 3.05),
                },
                6.0,
            ),
            (
                Shape::Sphere {
                    center: Vector3::new(0.55, 0.48, 2.5),
                    radius: 0.42,
                },
                6.0,
            ),
        ];
        let surfaces = shapes
            .into_iter()
            .map(|(shape, freq)| Surface {
                shape,
                albedo: Albedo::random(&mut rng, freq),
            })
            .collect();
        Ok(OracleScene {
            config,
            intrinsics,
            surfaces,
        })
    }

    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, s) in self.surfaces.iter().enumerate() {
            if let Some(t) = s.shape.intersect(origin, dir, 1e-9) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        point: origin + dir * t,
                        surface: i,
                    });
                }
            }
        }
        best
    }

    /// Camera pose at a continuous time along the arc, in frame units.
    pub fn pose_at(&self, t: f64) -> PoseMatrix {
        let last = (self.config.frames - 1) as f64;
        let s = t / last - 0.5;
        let yaw = (s * self.config.arc_degrees).to_radians();
        let target = Vector3::from(LOOK_AT);
        let eye = target
            + Vector3::new(-ARC_RADIUS * yaw.sin(), -ARC_HEIGHT - BOB * (1.0 - 4.0 * s * s), -ARC_RADIUS * yaw.cos());
        look_at(&eye, &target)
    }

    /// Training frames first, then held-out views.
    pub fn frame_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = (0..self.config.frames).map(|i| i as f64).collect();
        t.extend(&self.config.test_times);
        t
    }

    pub fn poses(&self) -> Vec<PoseMatrix> {
        self.frame_times().into_iter().map(|t| self.pose_at(t)).collect()
    }

    fn pixel_ray(&self, pose: &PoseMatrix, x: usize, y: usize) -> Vector3<f64> {
        let r = self.intrinsics.unproject(x as f64, y as f64).normalize();
        pose.rotation * r
    }

    /// Colour and ray-distance depth of every pixel.
    pub fn render(&self, pose: &PoseMatrix) -> Result<(ImageBuffer, DepthMap)> {
        let (w, h) = (self.config.width, self.config.height);
        let mut img = ImageBuffer::filled(w, h, [0.0; 3])?;
        let mut depth = vec![0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let dir = self.pixel_ray(pose, x, y);
                let hit = self.cast(&pose.translation, &dir).ok_or_else(|| {
                    Error::Contract(format!("ray through pixel ({x}, {y}) escapes the scene"))
                })?;
                if hit.t < self.config.near || hit.t > self.config.far {
                    return Err(Error::Contract(format!("depth {} outside the sampling bounds", hit.t)));
                }
                img.set_pixel(x, y, self.surfaces[hit.surface].albedo.at(&hit.point));
                depth[y * w + x] = hit.t as f32;
            }
        }
        Ok((img, DepthMap::new(w, h, depth)?))
    }

    /// Exact flow from view `a` to view `b` with a visibility check by ray
    /// casting. Occluded pixels carry a zero vector.
    pub fn flow(&self, a: &PoseMatrix, b: &PoseMatrix) -> Result<ExactFlow> {
        let (w, h) = (self.config.width, self.config.height);
        let inv_b = b.inverse();
        let mut vectors = Vec::with_capacity(w * h);
        let mut occluded = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let dir = self.pixel_ray(a, x, y);
                let hit = self
                    .cast(&a.translation, &dir)
                    .ok_or_else(|| Error::Contract(format!("ray through pixel ({x}, {y}) escapes the scene")))?;
                let target = project_point(&inv_b.transform(&hit.point), &self.intrinsics)
                    .filter(|p| in_hull(&self.intrinsics, p[0], p[1]));
                let visible = target.is_some() && {
                    let to = hit.point - b.translation;
                    let dist = to.norm();
                    self.cast(&b.translation, &(to / dist))
                        .is_some_and(|h2| h2.t >= dist - self.config.occlusion_threshold)
                };
                match target {
                    Some(p) if visible => {
                        vectors.push([p[0] - x as f64, p[1] - y as f64]);
                        occluded.push(false);
                    }
                    _ => {
                        vectors.push([0.0; 2]);
                        occluded.push(true);
                    }
                }
            }
        }
        Ok(ExactFlow {
            width: w,
            height: h,
            vectors,
            occluded,
        })
    }
}

fn in_hull(k: &CameraIntrinsics, u: f64, v: f64) -> bool {
    in_pixel_hull(k.width, k.height, u, v)
}

/// Camera-to-world pose at `eye` looking at `target` with image rows
/// running along world +y.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> PoseMatrix {
    let z = (target - eye).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    PoseMatrix {
        rotation: Matrix3::from_columns(&[x, y, z]),
        translation: *eye,
    }
}

/// Flow in double precision before it is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactFlow {
    pub width: usize,
    pub height: usize,
    pub vectors: Vec<[f64; 2]>,
    pub occluded: Vec<bool>,
}

impl ExactFlow {
    pub fn to_field(&self) -> Result<FlowField> {
        let data = self.vectors.iter().flat_map(|v| [v[0] as f32, v[1] as f32]).collect();
        FlowField::new(self.width, self.height, data, self.occluded.clone())
    }
}

/// Warps depth map `depth_a` of view `a` into view `b`. When `depth_b` is
/// given, targets whose warped distance exceeds the bilinearly sampled
/// `depth_b` by more than `threshold` are marked occluded.
pub fn reproject_flow(
    depth_a: &DepthMap,
    a: &PoseMatrix,
    b: &PoseMatrix,
    k: &CameraIntrinsics,
    depth_b: Option<&DepthMap>,
    threshold: f64,
) -> Result<ExactFlow> {
    let (w, h) = (depth_a.width, depth_a.height);
    if (w, h) != (k.width, k.height) || depth_b.is_some_and(|d| (d.width, d.height) != (w, h)) {
        return Err(Error::Contract("depth maps and intrinsics disagree on size".into()));
    }
    let rel = b.inverse().compose(a);
    let mut vectors = Vec::with_capacity(w * h);
    let mut occluded = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let ray = k.unproject(x as f64, y as f64).normalize();
            let p = rel.transform(&(ray * depth_a.at(x, y)));
            let target = (p.z > MIN_PROJECT_DEPTH)
                .then(|| project_point(&p, k))
                .flatten()
                .filter(|t| in_hull(k, t[0], t[1]));
            let visible = match (target, depth_b) {
                (Some(t), Some(db)) => p.norm() <= sample_depth(db, t[0], t[1]) + threshold,
                (Some(_), None) => true,
                (None, _) => false,
            };
            match target {
                Some(t) if visible => {
                    vectors.push([t[0] - x as f64, t[1] - y as f64]);
                    occluded.push(false);
                }
                _ => {
                    vectors.push([0.0; 2]);
                    occluded.push(true);
                }
            }
        }
    }
    Ok(ExactFlow {
        width: w,
        height: h,
        vectors,
        occluded,
    })
}

fn sample_depth(d: &DepthMap, u: f64, v: f64) -> f64 {
    let u = u.clamp(0.0, (d.width - 1) as f64);
    let v = v.clamp(0.0, (d.height - 1) as f64);
    let x0 = (u.floor() as usize).min(d.width - 2);
    let y0 = (v.floor() as usize).min(d.height - 2);
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    (1.0 - fx) * (1.0 - fy) * d.at(x0, y0)
        + fx * (1.0 - fy) * d.at(x0 + 1, y0)
        + (1.0 - fx) * fy * d.at(x0, y0 + 1)
        + fx * fy * d.at(x0 + 1, y0 + 1)
}

/// Composes consecutive flows `a→a+1→…→b` by bilinear lookup. A pixel stays
/// valid only while every hop lands unoccluded inside the pixel hull.
pub fn chain_flows(flows: &[FlowField]) -> Result<FlowField> {
    let first = flows.first().ok_or_else(|| Error::Contract("cannot chain an empty list of flows".into()))?;
    let (w, h) = (first.width, first.height);
    if flows.iter().any(|f| (f.width, f.height) != (w, h)) {
        return Err(Error::Contract("chained flows differ in size".into()));
    }
    if flows.len() == 1 {
        return Ok(first.clone());
    }
    let mut data = vec![0f32; 2 * w * h];
    let mut occluded = vec![true; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut u, mut v) = (x as f64, y as f64);
            let hops = flows.iter().all(|f| match f.sample(u, v) {
                Some(d) => {
                    u += d[0];
                    v += d[1];
                    true
                }
                None => false,
            });
            let ok = hops && in_pixel_hull(w, h, u, v);
            let i = y * w + x;
            if ok {
                data[2 * i] = (u - x as f64) as f32;
                data[2 * i + 1] = (v - y as f64) as f32;
                occluded[i] = false;
            }
        }
    }
    FlowField::new(w, h, data, occluded)
}
