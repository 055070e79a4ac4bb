//! Layer building blocks shared by the networks.

use diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Activation for [`Periodic`] layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `exp(−γu²/2)·sin(ωu)` with learnable `γ = softplus(γ_raw)` and `ω`.
    Gabor,
    /// `sin(ωu)` with learnable `ω`.
    Sine,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gabor" => Ok(Activation::Gabor),
            "sine" => Ok(Activation::Sine),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Gabor => "gabor",
            Activation::Sine => "sine",
        })
    }
}

/// Affine layer `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    /// Uniform fan-in init with bound `gain·√(3/in)`; biases start at zero.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Config(format!("layer `{name}` has a zero width")));
        }
        let bound = gain * (3.0 / inputs as f64).sqrt();
        let w = Tensor::from_fn(vec![inputs, outputs], |_| rng.random_range(-bound..=bound))?;
        let weight = store.add(format!("{name}.w"), w)?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros(vec![outputs])?)?;
        Ok(Dense {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        Ok(g.linear(x, w, b)?)
    }

    /// Like [`Dense::forward`] with an extra per-column offset added to the
    /// bias, e.g. the contribution of a conditioning vector.
    pub fn forward_shifted(&self, g: &mut Graph, store: &ParamStore, x: Var, shift: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let bias = g.add(b, shift)?;
        Ok(g.linear(x, w, bias)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Standard deviation of the initial `ω` for the first periodic layer of a
/// network and for the layers after it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaInit {
    pub first: f64,
    pub rest: f64,
}

/// Affine layer followed by a periodic activation with per-unit parameters.
#[derive(Debug, Clone)]
pub struct Periodic {
    pub dense: Dense,
    pub omega: ParamId,
    pub gamma: Option<ParamId>,
}

// softplus(γ_raw) = 1 at init.
const GAMMA_RAW_INIT: f64 = 0.541_324_854_612_918_1;

impl Periodic {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        omega_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let dense = Dense::new(store, name, inputs, outputs, 1.0, rng)?;
        let normal = Normal::new(0.0, omega_std)
            .map_err(|e| Error::Config(format!("omega std {omega_std}: {e}")))?;
        let om = Tensor::from_fn(vec![outputs], |_| normal.sample(rng))?;
        let omega = store.add(format!("{name}.omega"), om)?;
        let gamma = match activation {
            Activation::Gabor => Some(store.add(
                format!("{name}.gamma"),
                Tensor::full(vec![outputs], GAMMA_RAW_INIT)?,
            )?),
            Activation::Sine => None,
        };
        Ok(Periodic { dense, omega, gamma })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let u = self.dense.forward(g, store, x)?;
        let omega = g.param(store, self.omega)?;
        let gamma = match self.gamma {
            Some(id) => {
                let raw = g.param(store, id)?;
                g.softplus(raw)?
            }
            None => g.constant(Tensor::zeros(vec![self.dense.outputs])?)?,
        };
        Ok(g.gabor(u, gamma, omega)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.dense.params();
        p.push(self.omega);
        p.extend(self.gamma);
        p
    }
}

/// ReLU gain for [`Dense::new`].
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Sets every listed parameter to zero.
pub fn zero_params(store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
    for &id in ids {
        let z = store.value(id).zeros_like();
        store.set_value(id, z)?;
    }
    Ok(())
}
