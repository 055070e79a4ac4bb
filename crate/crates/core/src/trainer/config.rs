//! Training configuration and its flat `key = value` text form.

use std::fmt::Display;
use std::str::FromStr;

use crate::camgeo::{ProjectionMode, SamplingConfig};
use crate::error::{Error, Result};
use crate::fields::{CanonicalConfig, GeometryConfig};
use crate::flowbij::{CouplingConfig, EmbeddingConfig};
use crate::losses::LossWeights;
use crate::nn::{Activation, OmegaInit};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Perspective,
    Orthogonal,
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perspective" => Ok(Projection::Perspective),
            "orthogonal" => Ok(Projection::Orthogonal),
            other => Err(Error::Config(format!("unknown projection `{other}`"))),
        }
    }
}

impl Display for Projection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Projection::Perspective => "perspective",
            Projection::Orthogonal => "orthogonal",
        })
    }
}

/// Value types that can appear on the right of `key = value`.
trait ConfigValue: Sized {
    fn parse_value(key: &str, s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(key: &str, s: &str) -> Result<Self> {
                s.parse::<$t>().map_err(|e| Error::Config(format!("`{key}`: cannot parse `{s}`: {e}")))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(f64, usize, u64);

impl ConfigValue for bool {
    fn parse_value(key: &str, s: &str) -> Result<Self> {
        match s {
            "true" | "on" | "yes" | "1" => Ok(true),
            "false" | "off" | "no" | "0" => Ok(false),
            _ => Err(Error::Config(format!("`{key}`: expected on/off, got `{s}`"))),
        }
    }

    fn render(&self) -> String {
        if *self { "on" } else { "off" }.to_string()
    }
}

impl ConfigValue for Activation {
    fn parse_value(_: &str, s: &str) -> Result<Self> {
        s.parse()
    }

    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Projection {
    fn parse_value(_: &str, s: &str) -> Result<Self> {
        s.parse()
    }

    fn render(&self) -> String {
        self.to_string()
    }
}

macro_rules! config_struct {
    ($($(#[$doc:meta])* $name:ident : $ty:ty),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct TrainConfig {
            $($(#[$doc])* pub $name: $ty,)*
        }

        impl TrainConfig {
            /// Every recognised key, in serialization order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => self.$name = <$ty as ConfigValue>::parse_value(key, value)?,)*
                    other => return Err(Error::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), ConfigValue::render(&self.$name))),*]
            }
        }
    };
}

config_struct! {
    seed: u64,
    iterations: usize,
    /// Rays per iteration.
    rays: usize,
    /// Samples per ray.
    samples: usize,
    near: f64,
    far: f64,
    /// Ratio between flow-branch depth and geometry-branch distance.
    alpha: f64,
    flow_weight: f64,
    depth_weight: f64,
    pc_weight: f64,
    warp_weight: f64,
    /// Points per cloud for the Chamfer and warp losses.
    pc_points: usize,
    lr_pose: f64,
    lr_geometry: f64,
    lr_bijection: f64,
    lr_canonical: f64,
    lr_embedding: f64,
    patience: usize,
    lr_decay: f64,
    lr_floor: f64,
    /// Frame gap of the supervised pairs.
    interval: usize,
    message_passing: bool,
    message_detach: bool,
    projection: Projection,
    ortho_scale: f64,
    fix_first_pose: bool,
    aux_rgb_from_flow: bool,
    threads: usize,
    checkpoint_every: usize,
    geometry_width: usize,
    geometry_depth: usize,
    geometry_skip: usize,
    projection_width: usize,
    position_frequencies: usize,
    direction_frequencies: usize,
    /// Canonical feature width; also the message width.
    feature_width: usize,
    canonical_width: usize,
    canonical_layers: usize,
    activation: Activation,
    omega_first: f64,
    omega_rest: f64,
    embedding_width: usize,
    latent_width: usize,
    embedding_omega: f64,
    bijection_layers: usize,
    bijection_hidden: usize,
    bijection_hidden_layers: usize,
    test_pose_iterations: usize,
    test_pose_lr: f64,
    test_pose_rays: usize,
    render_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::full()
    }
}

impl TrainConfig {
    /// Full-size settings.
    pub fn full() -> Self {
        TrainConfig {
            seed: 0,
            iterations: 200_000,
            rays: 1024,
            samples: 128,
            near: 0.01,
            far: 10.0,
            alpha: 0.2,
            flow_weight: 0.05,
            depth_weight: 0.04,
            pc_weight: 1.0,
            warp_weight: 1.0,
            pc_points: 2048,
            lr_pose: 5e-4,
            lr_geometry: 5e-4,
            lr_bijection: 1e-4,
            lr_canonical: 3e-4,
            lr_embedding: 1e-3,
            patience: 1000,
            lr_decay: 0.5,
            lr_floor: 1e-6,
            interval: 1,
            message_passing: true,
            message_detach: false,
            projection: Projection::Perspective,
            ortho_scale: 1.0,
            fix_first_pose: false,
            aux_rgb_from_flow: false,
            threads: 1,
            checkpoint_every: 500,
            geometry_width: 256,
            geometry_depth: 8,
            geometry_skip: 5,
            projection_width: 128,
            position_frequencies: 10,
            direction_frequencies: 4,
            feature_width: 128,
            canonical_width: 256,
            canonical_layers: 3,
            activation: Activation::Gabor,
            omega_first: 30.0,
            omega_rest: 1.0,
            embedding_width: 256,
            latent_width: 128,
            embedding_omega: 30.0,
            bijection_layers: 4,
            bijection_hidden: 128,
            bijection_hidden_layers: 3,
            test_pose_iterations: 300,
            test_pose_lr: 1e-3,
            test_pose_rays: 1024,
            render_chunk: 1024,
        }
    }

    /// Reduced widths and batch for 64×48 scenes on one CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 4000,
            rays: 112,
            samples: 24,
            near: 1.0,
            far: 6.0,
            pc_points: 512,
            geometry_width: 64,
            projection_width: 32,
            feature_width: 32,
            canonical_width: 64,
            embedding_width: 64,
            latent_width: 32,
            bijection_hidden: 32,
            position_frequencies: 6,
            lr_pose: 5e-3,
            warp_weight: 4.0,
            test_pose_iterations: 200,
            test_pose_rays: 128,
            render_chunk: 256,
            ..TrainConfig::full()
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. A `preset` key
    /// (`full` or `desk`) picks the base values wherever it appears.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut preset = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(Error::Config(format!("line {}: empty key or value", n + 1)));
            }
            if pairs.iter().any(|(k, _): &(&str, &str)| *k == key) || (key == "preset" && preset.is_some()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            if key == "preset" {
                preset = Some(value);
            } else {
                pairs.push((key, value));
            }
        }
        let mut cfg = match preset {
            None | Some("full") => TrainConfig::full(),
            Some("desk") => TrainConfig::desk(),
            Some(other) => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        for (k, v) in pairs {
            cfg.set_field(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_field(key, value)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let positive_counts = [
            ("rays", self.rays),
            ("samples", self.samples),
            ("pc_points", self.pc_points),
            ("patience", self.patience),
            ("interval", self.interval),
            ("checkpoint_every", self.checkpoint_every),
            ("geometry_width", self.geometry_width),
            ("projection_width", self.projection_width),
            ("feature_width", self.feature_width),
            ("canonical_width", self.canonical_width),
            ("canonical_layers", self.canonical_layers),
            ("embedding_width", self.embedding_width),
            ("latent_width", self.latent_width),
            ("bijection_layers", self.bijection_layers),
            ("bijection_hidden", self.bijection_hidden),
            ("bijection_hidden_layers", self.bijection_hidden_layers),
            ("test_pose_rays", self.test_pose_rays),
            ("render_chunk", self.render_chunk),
        ];
        if let Some((k, _)) = positive_counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        let positive_reals = [
            ("near", self.near),
            ("alpha", self.alpha),
            ("lr_pose", self.lr_pose),
            ("lr_geometry", self.lr_geometry),
            ("lr_bijection", self.lr_bijection),
            ("lr_canonical", self.lr_canonical),
            ("lr_embedding", self.lr_embedding),
            ("lr_floor", self.lr_floor),
            ("ortho_scale", self.ortho_scale),
            ("test_pose_lr", self.test_pose_lr),
            ("omega_first", self.omega_first),
            ("omega_rest", self.omega_rest),
            ("embedding_omega", self.embedding_omega),
        ];
        if let Some((k, v)) = positive_reals.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("`{k}` must be positive and finite, got {v}")));
        }
        if !(self.far > self.near) || !self.far.is_finite() {
            return Err(Error::Config(format!("far {} must exceed near {}", self.far, self.near)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::Config(format!("lr_decay {} must lie in (0, 1)", self.lr_decay)));
        }
        if self.threads != 1 {
            return Err(Error::Config("only single-threaded execution (threads = 1) is supported".into()));
        }
        if self.geometry_skip == 0 || self.geometry_skip >= self.geometry_depth {
            return Err(Error::Config(format!(
                "geometry_skip {} must lie in [1, geometry_depth)",
                self.geometry_skip
            )));
        }
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            flow: self.flow_weight,
            depth: self.depth_weight,
            pc: self.pc_weight,
            warp: self.warp_weight,
        }
    }

    pub fn projection_mode(&self) -> ProjectionMode {
        match self.projection {
            Projection::Perspective => ProjectionMode::Perspective,
            Projection::Orthogonal => ProjectionMode::Orthogonal {
                scale: self.ortho_scale,
            },
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            samples: self.samples,
            near: self.near,
            far: self.far,
            alpha: self.alpha,
            mode: self.projection_mode(),
        }
    }

    pub fn geometry(&self) -> GeometryConfig {
        GeometryConfig {
            width: self.geometry_width,
            depth: self.geometry_depth,
            skip_after: self.geometry_skip,
            projection_width: self.projection_width,
            message_width: self.feature_width,
            position_frequencies: self.position_frequencies,
            direction_frequencies: self.direction_frequencies,
        }
    }

    pub fn canonical(&self) -> CanonicalConfig {
        CanonicalConfig {
            width: self.canonical_width,
            layers: self.canonical_layers,
            feature_width: self.feature_width,
            activation: self.activation,
            omega: OmegaInit {
                first: self.omega_first,
                rest: self.omega_rest,
            },
        }
    }

    pub fn embedding(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            width: self.embedding_width,
            latent_width: self.latent_width,
            activation: self.activation,
            omega_std: self.embedding_omega,
        }
    }

    pub fn coupling(&self) -> CouplingConfig {
        CouplingConfig {
            layers: self.bijection_layers,
            hidden_width: self.bijection_hidden,
            hidden_layers: self.bijection_hidden_layers,
            latent_width: self.latent_width,
        }
    }

    /// Whether `other` builds the same networks, so its parameters fit.
    pub fn same_architecture(&self, other: &TrainConfig) -> bool {
        self.geometry() == other.geometry()
            && self.canonical() == other.canonical()
            && self.embedding() == other.embedding()
            && self.coupling() == other.coupling()
            && self.aux_rgb_from_flow == other.aux_rgb_from_flow
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_rates() {
        let c = TrainConfig::full();
        assert_eq!((c.rays, c.samples, c.near, c.far, c.alpha), (1024, 128, 0.01, 10.0, 0.2));
        assert_eq!(
            (c.lr_pose, c.lr_geometry, c.lr_bijection, c.lr_canonical, c.lr_embedding),
            (5e-4, 5e-4, 1e-4, 3e-4, 1e-3)
        );
        assert_eq!((c.patience, c.interval, c.message_passing), (1000, 1, true));
        c.validate().unwrap();
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::desk();
        c.alpha = 0.1 + 0.2;
        c.projection = Projection::Orthogonal;
        c.message_passing = false;
        c.activation = Activation::Sine;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(TrainConfig::KEYS.len(), c.entries().len());
    }

    #[test]
    fn parse_presets_comments_and_errors() {
        let c = TrainConfig::parse("# run\nrays = 64 # fewer\npreset = desk\n\nseed=3\n").unwrap();
        assert_eq!((c.rays, c.seed, c.samples), (64, 3, 24));
        for bad in [
            "bogus = 1",
            "rays = -1",
            "rays",
            "rays = 1\nrays = 2",
            "message_passing = maybe",
            "projection = fisheye",
            "preset = huge",
            "far = 0.001",
            "threads = 4",
        ] {
            assert!(matches!(TrainConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
