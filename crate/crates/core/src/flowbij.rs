//! Pose-conditioned invertible map between a frame's camera space and the
//! canonical volume, and alpha-composited correspondence prediction.

use diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::camgeo::{project, CameraIntrinsics, ProjectionMode};
use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Periodic, RELU_GAIN};

/// Bound on the coupling log-scale.
pub const SCALE_BOUND: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingConfig {
    pub width: usize,
    pub latent_width: usize,
    pub activation: Activation,
    pub omega_std: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            width: 256,
            latent_width: 128,
            activation: Activation::Gabor,
            omega_std: 30.0,
        }
    }
}

/// Three-layer network from a pose vector to the latent `ψ`.
#[derive(Debug, Clone)]
pub struct PoseEmbedding {
    pub config: EmbeddingConfig,
    first: Periodic,
    hidden: Dense,
    out: Dense,
}

impl PoseEmbedding {
    pub fn new<R: Rng>(store: &mut ParamStore, config: EmbeddingConfig, rng: &mut R) -> Result<Self> {
        let first = Periodic::new(
            store,
            "embedding.layer0",
            6,
            config.width,
            config.activation,
            config.omega_std,
            rng,
        )?;
        let hidden = Dense::new(store, "embedding.layer1", config.width, config.width, RELU_GAIN, rng)?;
        let out = Dense::new(store, "embedding.out", config.width, config.latent_width, 1.0, rng)?;
        Ok(PoseEmbedding {
            config,
            first,
            hidden,
            out,
        })
    }

    /// `ψ: [1, latent_width]` for a `[6]` pose variable.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, pose: Var) -> Result<Var> {
        let row = g.reshape(pose, &[1, 6])?;
        let h = self.first.forward(g, store, row)?;
        let h = self.hidden.forward(g, store, h)?;
        let h = g.relu(h)?;
        self.out.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.first.params();
        p.extend(self.hidden.params());
        p.extend(self.out.params());
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingConfig {
    pub layers: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub latent_width: usize,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        CouplingConfig {
            layers: 4,
            hidden_width: 128,
            hidden_layers: 3,
            latent_width: 128,
        }
    }
}

/// Transformed coordinate and the two it is conditioned on, per layer.
const MASKS: [(usize, [usize; 2]); 3] = [(2, [0, 1]), (0, [1, 2]), (1, [2, 0])];

fn mask(layer: usize) -> (usize, [usize; 2]) {
    MASKS[layer % MASKS.len()]
}

#[derive(Debug, Clone)]
struct Coupling {
    target: usize,
    cond: [usize; 2],
    coords: Dense,
    latent: ParamId,
    hidden: Vec<Dense>,
    out: Dense,
}

impl Coupling {
    /// Log-scale `s` and shift `b`, each `[p, 1]`.
    fn scale_shift(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cols: &[Var; 3],
        psi: Var,
    ) -> Result<(Var, Var)> {
        let c = g.concat(&[cols[self.cond[0]], cols[self.cond[1]]])?;
        // Concatenating ψ to every row equals adding ψ·W_ψ to the bias.
        let wl = g.param(store, self.latent)?;
        let shift = g.matmul(psi, wl)?;
        let width = g.shape(shift)[1];
        let shift = g.reshape(shift, &[width])?;
        let h = self.coords.forward_shifted(g, store, c, shift)?;
        let mut h = g.relu(h)?;
        for layer in &self.hidden {
            let a = layer.forward(g, store, h)?;
            h = g.relu(a)?;
        }
        let o = self.out.forward(g, store, h)?;
        let raw = g.slice_last(o, 0, 1)?;
        let b = g.slice_last(o, 1, 2)?;
        let t = g.scale(raw, 1.0 / SCALE_BOUND)?;
        let t = g.tanh(t)?;
        let s = g.scale(t, SCALE_BOUND)?;
        Ok((s, b))
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.coords.params();
        p.push(self.latent);
        for l in &self.hidden {
            p.extend(l.params());
        }
        p.extend(self.out.params());
        p
    }
}

/// Stack of affine coupling layers conditioned on a latent vector.
#[derive(Debug, Clone)]
pub struct BijectiveNet {
    pub config: CouplingConfig,
    layers: Vec<Coupling>,
}

fn split(g: &mut Graph, x: Var) -> Result<[Var; 3]> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::Contract(format!("coupling input must be [p, 3], got {s:?}")));
    }
    Ok([g.slice_last(x, 0, 1)?, g.slice_last(x, 1, 2)?, g.slice_last(x, 2, 3)?])
}

impl BijectiveNet {
    /// The output layers start at zero, so a fresh net is the identity.
    pub fn new<R: Rng>(store: &mut ParamStore, config: CouplingConfig, rng: &mut R) -> Result<Self> {
        let h = config.hidden_width;
        if config.layers == 0 || config.hidden_layers == 0 {
            return Err(Error::Config("coupling net needs layers and hidden layers".into()));
        }
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let name = format!("bijection.layer{l}");
            let (target, cond) = mask(l);
            let coords = Dense::new(store, &format!("{name}.in"), 2, h, RELU_GAIN, rng)?;
            let bound = RELU_GAIN * (3.0 / (2 + config.latent_width) as f64).sqrt();
            let wl = Tensor::from_fn(vec![config.latent_width, h], |_| rng.random_range(-bound..=bound))?;
            let latent = store.add(format!("{name}.latent"), wl)?;
            let mut hidden = Vec::new();
            for k in 1..config.hidden_layers {
                hidden.push(Dense::new(store, &format!("{name}.hidden{k}"), h, h, RELU_GAIN, rng)?);
            }
            let out = Dense::new(store, &format!("{name}.out"), h, 2, 1.0, rng)?;
            let zero = store.value(out.weight).zeros_like();
            store.set_value(out.weight, zero)?;
            layers.push(Coupling {
                target,
                cond,
                coords,
                latent,
                hidden,
                out,
            });
        }
        Ok(BijectiveNet { config, layers })
    }

    fn check_latent(&self, g: &Graph, psi: Var) -> Result<()> {
        if g.shape(psi) != [1, self.config.latent_width] {
            return Err(Error::Contract(format!(
                "latent must be [1, {}], got {:?}",
                self.config.latent_width,
                g.shape(psi)
            )));
        }
        Ok(())
    }

    /// Camera space to canonical space, with the per-row log-determinant.
    pub fn forward_with_log_det(&self, g: &mut Graph, store: &ParamStore, x: Var, psi: Var) -> Result<(Var, Var)> {
        self.check_latent(g, psi)?;
        let mut cols = split(g, x)?;
        let mut log_det: Option<Var> = None;
        for layer in &self.layers {
            let (s, b) = layer.scale_shift(g, store, &cols, psi)?;
            let e = g.exp(s)?;
            let y = g.mul(cols[layer.target], e)?;
            cols[layer.target] = g.add(y, b)?;
            log_det = Some(match log_det {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        let out = g.concat(&cols)?;
        Ok((out, log_det.expect("at least one layer")))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, psi: Var) -> Result<Var> {
        Ok(self.forward_with_log_det(g, store, x, psi)?.0)
    }

    /// Canonical space back to a camera space: the exact inverse of
    /// [`BijectiveNet::forward`] under the same latent.
    pub fn inverse(&self, g: &mut Graph, store: &ParamStore, y: Var, psi: Var) -> Result<Var> {
        self.check_latent(g, psi)?;
        let mut cols = split(g, y)?;
        for layer in self.layers.iter().rev() {
            let (s, b) = layer.scale_shift(g, store, &cols, psi)?;
            let d = g.sub(cols[layer.target], b)?;
            let ns = g.neg(s)?;
            let e = g.exp(ns)?;
            cols[layer.target] = g.mul(d, e)?;
        }
        Ok(g.concat(&cols)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Output-layer weights, the only parameters started at zero.
    pub fn output_params(&self) -> Vec<ParamId> {
        self.layers.iter().map(|l| l.out.weight).collect()
    }
}

/// Composited correspondence for each ray.
#[derive(Debug, Clone)]
pub struct Correspondence {
    /// `[n, 2]` predicted pixel in frame `j`.
    pub pixels: Var,
    /// `[n, 3]` composited camera-space point.
    pub point: Var,
    /// `[n, m]` compositing weights.
    pub weights: Var,
    /// False where the composited point cannot be projected.
    pub valid: Vec<bool>,
}

/// Alpha-composites per-sample points `o_j: [n·m, 3]` with densities
/// `sigma: [n·m, 1]` (samples ordered by depth), then projects.
pub fn compose_flow(
    g: &mut Graph,
    o_j: Var,
    sigma: Var,
    rays: usize,
    samples: usize,
    k: &CameraIntrinsics,
    mode: ProjectionMode,
) -> Result<Correspondence> {
    if g.shape(o_j) != [rays * samples, 3] || g.value(sigma).len() != rays * samples {
        return Err(Error::Contract(format!(
            "compose_flow: points {:?}, densities {:?} for {rays}x{samples}",
            g.shape(o_j),
            g.shape(sigma)
        )));
    }
    let s = g.reshape(sigma, &[rays, samples])?;
    let ns = g.neg(s)?;
    let keep = g.exp(ns)?;
    let alpha = g.rsub_scalar(1.0, keep)?;
    let trans = g.cumprod_exclusive(keep)?;
    let weights = g.mul(trans, alpha)?;
    let w3 = g.reshape(weights, &[rays, samples, 1])?;
    let o3 = g.reshape(o_j, &[rays, samples, 3])?;
    let weighted = g.mul(w3, o3)?;
    let point = g.sum_axis(weighted, 1)?;
    let (pixels, valid) = project(g, point, k, mode)?;
    Ok(Correspondence {
        pixels,
        point,
        weights,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> CouplingConfig {
        CouplingConfig {
            layers: 4,
            hidden_width: 8,
            hidden_layers: 3,
            latent_width: 5,
        }
    }

    fn randomized(seed: u64) -> (ParamStore, BijectiveNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = BijectiveNet::new(&mut store, small(), &mut rng).unwrap();
        for id in net.output_params() {
            let t = Tensor::from_fn(store.value(id).shape().to_vec(), |_| rng.random_range(-0.5..0.5)).unwrap();
            store.set_value(id, t).unwrap();
        }
        (store, net)
    }

    fn points(g: &mut Graph, rows: &[[f64; 3]]) -> Var {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        g.constant(Tensor::new(vec![rows.len(), 3], flat).unwrap()).unwrap()
    }

    fn latent(g: &mut Graph, seed: f64) -> Var {
        g.constant(Tensor::from_fn(vec![1, 5], |i| (i as f64 + seed).sin()).unwrap()).unwrap()
    }

    #[test]
    fn fresh_net_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = BijectiveNet::new(&mut store, small(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = points(&mut g, &[[0.1, -0.2, 0.3], [1.0, 2.0, 3.0]]);
        let psi = latent(&mut g, 0.0);
        let y = net.forward(&mut g, &store, x, psi).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        zero_params(&mut store, &net.params()).unwrap();
        let r = net.inverse(&mut g, &store, x, psi).unwrap();
        assert_eq!(g.value(r).data(), g.value(x).data());
    }

    #[test]
    fn round_trip_and_same_latent() {
        let (store, net) = randomized(4);
        let mut g = Graph::new();
        let x = points(&mut g, &[[0.1, -0.2, 0.3], [5.0, -7.0, 9.0], [-10.0, 10.0, 0.0]]);
        let psi = latent(&mut g, 1.0);
        let y = net.forward(&mut g, &store, x, psi).unwrap();
        assert_ne!(g.value(y).data(), g.value(x).data());
        let back = net.inverse(&mut g, &store, y, psi).unwrap();
        for (a, b) in g.value(back).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobian_determinant_is_exp_of_scales() {
        let (store, net) = randomized(9);
        let x0 = [0.4, -0.3, 0.8];
        let eval = |x: [f64; 3]| -> ([f64; 3], f64) {
            let mut g = Graph::new();
            let xv = points(&mut g, &[x]);
            let psi = latent(&mut g, 2.0);
            let (y, ld) = net.forward_with_log_det(&mut g, &store, xv, psi).unwrap();
            let v = g.value(y).data();
            ([v[0], v[1], v[2]], g.value(ld).data()[0])
        };
        let h = 1e-6;
        let mut jac = nalgebra::Matrix3::zeros();
        for c in 0..3 {
            let (mut up, mut dn) = (x0, x0);
            up[c] += h;
            dn[c] -= h;
            let (yu, _) = eval(up);
            let (yd, _) = eval(dn);
            for r in 0..3 {
                jac[(r, c)] = (yu[r] - yd[r]) / (2.0 * h);
            }
        }
        let (_, log_det) = eval(x0);
        assert!((jac.determinant() - log_det.exp()).abs() < 1e-6 * log_det.exp().max(1.0));
    }

    #[test]
    fn composition_weights() {
        let k = CameraIntrinsics::new(10.0, 10.0, 5.0, 5.0, 10, 10).unwrap();
        let mut g = Graph::new();
        // m = 1, α → 1.
        let o = points(&mut g, &[[0.2, 0.1, 2.0]]);
        let s = g.constant(Tensor::new(vec![1, 1], vec![50.0]).unwrap()).unwrap();
        let c = compose_flow(&mut g, o, s, 1, 1, &k, ProjectionMode::Perspective).unwrap();
        assert_eq!(g.value(c.point).data(), &[0.2, 0.1, 2.0]);
        // All densities zero: nothing composited, masked.
        let o = points(&mut g, &[[0.2, 0.1, 2.0], [0.3, 0.1, 3.0]]);
        let s = g.constant(Tensor::zeros(vec![2, 1]).unwrap()).unwrap();
        let c = compose_flow(&mut g, o, s, 1, 2, &k, ProjectionMode::Perspective).unwrap();
        assert_eq!(g.value(c.point).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(c.valid, vec![false]);
        // α = (0.5, 1) gives weights (0.5, 0.5).
        let s = g.constant(Tensor::new(vec![2, 1], vec![2f64.ln(), 800.0]).unwrap()).unwrap();
        let c = compose_flow(&mut g, o, s, 1, 2, &k, ProjectionMode::Perspective).unwrap();
        let w = g.value(c.weights).data();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn embedding_is_deterministic_and_bias_only_when_zeroed() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = EmbeddingConfig {
            width: 16,
            latent_width: 8,
            ..EmbeddingConfig::default()
        };
        let emb = PoseEmbedding::new(&mut store, cfg, &mut rng).unwrap();
        let run = |store: &ParamStore, v: [f64; 6]| {
            let mut g = Graph::new();
            let p = g.constant(Tensor::vector(v.to_vec()).unwrap()).unwrap();
            let psi = emb.embed(&mut g, store, p).unwrap();
            g.value(psi).data().to_vec()
        };
        let a = [0.01, 0.02, -0.03, 0.1, 0.0, 0.2];
        assert_eq!(run(&store, a), run(&store, a));
        assert_ne!(run(&store, a), run(&store, [0.0; 6]));
        for id in emb.params() {
            if !store.get(id).name.ends_with(".b") {
                let z = store.value(id).zeros_like();
                store.set_value(id, z).unwrap();
            }
        }
        let b = store.id("embedding.out.b").unwrap();
        store.set_value(b, Tensor::from_fn(vec![8], |i| i as f64).unwrap()).unwrap();
        assert_eq!(run(&store, a), run(&store, [3.0; 6]));
        assert_eq!(run(&store, a), (0..8).map(|i| i as f64).collect::<Vec<_>>());
    }
}
