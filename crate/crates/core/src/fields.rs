//! Geometry field (world point to density and colour), canonical field
//! (canonical point to feature and density) and the junction between them.

use diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, OmegaInit, Periodic, RELU_GAIN};

/// `[p, sin(2⁰πp), cos(2⁰πp), …, sin(2^{L−1}πp), cos(2^{L−1}πp)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionalEncoding {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl PositionalEncoding {
    pub fn new(num_frequencies: usize, include_input: bool) -> Result<Self> {
        if num_frequencies == 0 && !include_input {
            return Err(Error::Config("positional encoding with no outputs".into()));
        }
        Ok(PositionalEncoding {
            num_frequencies,
            include_input,
        })
    }

    pub fn width(&self) -> usize {
        3 * usize::from(self.include_input) + 6 * self.num_frequencies
    }

    /// Encodes rows of `points: [p, 3]`.
    pub fn encode(&self, g: &mut Graph, points: Var) -> Result<Var> {
        let shape = g.shape(points);
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::Contract(format!("encode expects [p, 3], got {shape:?}")));
        }
        if self.num_frequencies == 0 {
            return Ok(points);
        }
        // One product gives every frequency; cosines are sines shifted by π/2.
        let cols = 6 * self.num_frequencies;
        let mut freq = vec![0.0; 3 * cols];
        let mut phase = vec![0.0; cols];
        for l in 0..self.num_frequencies {
            let f = (1u64 << l) as f64 * std::f64::consts::PI;
            for c in 0..3 {
                freq[c * cols + 6 * l + c] = f;
                freq[c * cols + 6 * l + 3 + c] = f;
                phase[6 * l + 3 + c] = std::f64::consts::FRAC_PI_2;
            }
        }
        let freq = g.constant(Tensor::new(vec![3, cols], freq)?)?;
        let phase = g.constant(Tensor::new(vec![cols], phase)?)?;
        let arg = g.linear(points, freq, phase)?;
        let waves = g.sin(arg)?;
        if self.include_input {
            Ok(g.concat(&[points, waves])?)
        } else {
            Ok(waves)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryConfig {
    pub width: usize,
    /// Hidden layers (before and after the skip junction combined).
    pub depth: usize,
    /// Hidden layers before the encoding is concatenated again.
    pub skip_after: usize,
    pub projection_width: usize,
    pub message_width: usize,
    pub position_frequencies: usize,
    pub direction_frequencies: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            width: 256,
            depth: 8,
            skip_after: 5,
            projection_width: 128,
            message_width: 128,
            position_frequencies: 10,
            direction_frequencies: 4,
        }
    }
}

/// Output of a field evaluation: one row per point.
#[derive(Debug, Clone, Copy)]
pub struct GeometryOutput {
    /// `[p, 1]`, nonnegative.
    pub sigma: Var,
    /// `[p, 3]` in `[0, 1]`.
    pub color: Var,
}

#[derive(Debug, Clone)]
pub struct GeometryField {
    pub config: GeometryConfig,
    position: PositionalEncoding,
    direction: PositionalEncoding,
    pre: Vec<Dense>,
    projection: Dense,
    post: Vec<Dense>,
    sigma: Dense,
    color_hidden: Dense,
    color_out: Dense,
}

impl GeometryField {
    pub fn new<R: Rng>(store: &mut ParamStore, config: GeometryConfig, rng: &mut R) -> Result<Self> {
        let c = config;
        if c.skip_after == 0 || c.skip_after >= c.depth {
            return Err(Error::Config(format!(
                "skip junction after layer {} does not fit {} hidden layers",
                c.skip_after, c.depth
            )));
        }
        let position = PositionalEncoding::new(c.position_frequencies, true)?;
        let direction = PositionalEncoding::new(c.direction_frequencies, true)?;
        let enc = position.width();
        let mut pre = Vec::with_capacity(c.skip_after);
        for l in 0..c.skip_after {
            let inputs = if l == 0 { enc } else { c.width };
            pre.push(Dense::new(store, &format!("geometry.pre{l}"), inputs, c.width, RELU_GAIN, rng)?);
        }
        let projection = Dense::new(
            store,
            "geometry.projection",
            c.width + enc,
            c.projection_width,
            RELU_GAIN,
            rng,
        )?;
        let junction = c.projection_width + c.message_width;
        let mut post = Vec::with_capacity(c.depth - c.skip_after);
        for l in 0..c.depth - c.skip_after {
            let inputs = if l == 0 { junction } else { c.width };
            post.push(Dense::new(store, &format!("geometry.post{l}"), inputs, c.width, RELU_GAIN, rng)?);
        }
        let sigma = Dense::new(store, "geometry.sigma", c.width, 1, 1.0, rng)?;
        let half = (c.width / 2).max(1);
        let color_hidden = Dense::new(
            store,
            "geometry.color_hidden",
            c.width + direction.width(),
            half,
            RELU_GAIN,
            rng,
        )?;
        let color_out = Dense::new(store, "geometry.color", half, 3, 1.0, rng)?;
        Ok(GeometryField {
            config,
            position,
            direction,
            pre,
            projection,
            post,
            sigma,
            color_hidden,
            color_out,
        })
    }

    /// Evaluates `points: [p, 3]` seen along unit `view_dirs: [p, 3]`.
    /// Without a message the junction's message slots are zero.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        points: Var,
        view_dirs: Var,
        message: Option<Var>,
    ) -> Result<GeometryOutput> {
        let p = g.shape(points)[0];
        let enc = self.position.encode(g, points)?;
        let mut h = enc;
        for layer in &self.pre {
            let a = layer.forward(g, store, h)?;
            h = g.relu(a)?;
        }
        let skip = g.concat(&[h, enc])?;
        let proj = self.projection.forward(g, store, skip)?;
        let proj = g.relu(proj)?;
        let mw = self.config.message_width;
        h = if mw == 0 {
            if message.is_some() {
                return Err(Error::Contract("message given to a field without message slots".into()));
            }
            proj
        } else {
            let msg = match message {
                Some(m) => {
                    if g.shape(m) != [p, mw] {
                        return Err(Error::Contract(format!(
                            "message shape {:?}, junction expects [{p}, {mw}]",
                            g.shape(m)
                        )));
                    }
                    m
                }
                None => g.constant(Tensor::zeros(vec![p, mw])?)?,
            };
            g.concat(&[proj, msg])?
        };
        for layer in &self.post {
            let a = layer.forward(g, store, h)?;
            h = g.relu(a)?;
        }
        let s = self.sigma.forward(g, store, h)?;
        let sigma = g.softplus(s)?;
        let d = self.direction.encode(g, view_dirs)?;
        let hd = g.concat(&[h, d])?;
        let ch = self.color_hidden.forward(g, store, hd)?;
        let ch = g.relu(ch)?;
        let co = self.color_out.forward(g, store, ch)?;
        let color = g.sigmoid(co)?;
        Ok(GeometryOutput { sigma, color })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for l in self.pre.iter().chain([&self.projection]).chain(&self.post) {
            out.extend(l.params());
        }
        for l in [&self.sigma, &self.color_hidden, &self.color_out] {
            out.extend(l.params());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalConfig {
    pub width: usize,
    pub layers: usize,
    pub feature_width: usize,
    pub activation: Activation,
    pub omega: OmegaInit,
}

impl Default for CanonicalConfig {
    fn default() -> Self {
        CanonicalConfig {
            width: 256,
            layers: 3,
            feature_width: 128,
            activation: Activation::Gabor,
            omega: OmegaInit {
                first: 30.0,
                rest: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CanonicalOutput {
    /// `[p, feature_width]`.
    pub features: Var,
    /// `[p, 1]`, nonnegative.
    pub sigma: Var,
}

#[derive(Debug, Clone)]
pub struct CanonicalField {
    pub config: CanonicalConfig,
    layers: Vec<Periodic>,
    out: Dense,
}

impl CanonicalField {
    pub fn new<R: Rng>(store: &mut ParamStore, config: CanonicalConfig, rng: &mut R) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config("canonical field needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let inputs = if l == 0 { 3 } else { config.width };
            let std = if l == 0 { config.omega.first } else { config.omega.rest };
            layers.push(Periodic::new(
                store,
                &format!("canonical.layer{l}"),
                inputs,
                config.width,
                config.activation,
                std,
                rng,
            )?);
        }
        let out = Dense::new(store, "canonical.out", config.width, config.feature_width + 1, 1.0, rng)?;
        Ok(CanonicalField { config, layers, out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: Var) -> Result<CanonicalOutput> {
        let mut h = points;
        for layer in &self.layers {
            h = layer.forward(g, store, h)?;
        }
        let o = self.out.forward(g, store, h)?;
        let fw = self.config.feature_width;
        let features = g.slice_last(o, 0, fw)?;
        let s = g.slice_last(o, fw, fw + 1)?;
        let sigma = g.softplus(s)?;
        Ok(CanonicalOutput { features, sigma })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.layers.iter().flat_map(|l| l.params()).collect();
        out.extend(self.out.params());
        out
    }
}

/// Hands canonical features to the geometry field, optionally behind a
/// gradient barrier.
pub fn message_pass(g: &mut Graph, features: Var, detach: bool) -> Result<Var> {
    if detach {
        Ok(g.detach(features)?)
    } else {
        Ok(features)
    }
}
