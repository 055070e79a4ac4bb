//! Networks, per-frame poses and the forward pass over one ray batch.

use diffcore::{Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::camgeo::{rodrigues, CameraIntrinsics, PoseMatrix, PoseVector, SampleBatch};
use crate::error::{Error, Result};
use crate::fields::{message_pass, CanonicalField, GeometryField};
use crate::flowbij::{compose_flow, BijectiveNet, Correspondence, PoseEmbedding};
use crate::nn::Dense;
use crate::volren::{render, RenderOutput};

/// Learning-rate groups, in optimizer order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Pose,
    Geometry,
    Bijection,
    Canonical,
    Embedding,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Pose, Group::Geometry, Group::Bijection, Group::Canonical, Group::Embedding];

    pub fn name(self) -> &'static str {
        match self {
            Group::Pose => "pose",
            Group::Geometry => "geometry",
            Group::Bijection => "bijection",
            Group::Canonical => "canonical",
            Group::Embedding => "embedding",
        }
    }

    pub fn base_lr(self, cfg: &TrainConfig) -> f64 {
        match self {
            Group::Pose => cfg.lr_pose,
            Group::Geometry => cfg.lr_geometry,
            Group::Bijection => cfg.lr_bijection,
            Group::Canonical => cfg.lr_canonical,
            Group::Embedding => cfg.lr_embedding,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Networks {
    pub geometry: GeometryField,
    pub canonical: CanonicalField,
    pub embedding: PoseEmbedding,
    pub bijection: BijectiveNet,
    /// Colour read from canonical features, for the feature inspection loss.
    pub flow_color: Option<Dense>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub nets: Networks,
    /// One `[6]` parameter per training frame.
    pub poses: Vec<ParamId>,
}

impl Model {
    /// Fresh networks from the config seed, every pose at identity.
    pub fn new(config: &TrainConfig, frames: usize) -> Result<Self> {
        config.validate()?;
        if frames < 2 {
            return Err(Error::Config(format!("need at least two training frames, got {frames}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let geometry = GeometryField::new(&mut store, config.geometry(), &mut rng)?;
        let canonical = CanonicalField::new(&mut store, config.canonical(), &mut rng)?;
        let embedding = PoseEmbedding::new(&mut store, config.embedding(), &mut rng)?;
        let bijection = BijectiveNet::new(&mut store, config.coupling(), &mut rng)?;
        let flow_color = if config.aux_rgb_from_flow {
            Some(Dense::new(&mut store, "canonical.color", config.feature_width, 3, 1.0, &mut rng)?)
        } else {
            None
        };
        let mut poses = Vec::with_capacity(frames);
        for i in 0..frames {
            poses.push(store.add(format!("pose.{i}"), Tensor::zeros(vec![6])?)?);
        }
        if config.fix_first_pose {
            store.set_requires_grad(poses[0], false);
        }
        Ok(Model {
            config: config.clone(),
            store,
            nets: Networks {
                geometry,
                canonical,
                embedding,
                bijection,
                flow_color,
            },
            poses,
        })
    }

    pub fn frames(&self) -> usize {
        self.poses.len()
    }

    pub fn pose_vector(&self, i: usize) -> PoseVector {
        let d = self.store.value(self.poses[i]).data();
        [d[0], d[1], d[2], d[3], d[4], d[5]]
    }

    pub fn pose_matrix(&self, i: usize) -> PoseMatrix {
        PoseMatrix::from_vector(&self.pose_vector(i))
    }

    pub fn group_params(&self, group: Group) -> Vec<ParamId> {
        let n = &self.nets;
        match group {
            Group::Pose => self.poses.clone(),
            Group::Geometry => n.geometry.params(),
            Group::Bijection => n.bijection.params(),
            Group::Canonical => {
                let mut p = n.canonical.params();
                if let Some(c) = &n.flow_color {
                    p.extend(c.params());
                }
                p
            }
            Group::Embedding => n.embedding.params(),
        }
    }

    /// Every parameter by name, in creation order.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites parameters from named tensors; names and shapes must match
    /// this model exactly.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        if tensors.len() != self.store.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors, the model has {}",
                tensors.len(),
                self.store.len()
            )));
        }
        for (name, t) in tensors {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint tensor `{name}` is not in the model")))?;
            if !t.is_finite() {
                return Err(Error::Numeric(format!("checkpoint tensor `{name}` is not finite")));
            }
            self.store.set_value(id, t.clone())?;
        }
        Ok(())
    }

    pub fn from_checkpoint(ck: &super::checkpoint::Checkpoint) -> Result<Self> {
        let frames = ck.tensors.iter().filter(|(n, _)| n.starts_with("pose.")).count();
        let mut model = Model::new(&ck.config, frames)?;
        model.load_tensors(&ck.tensors)?;
        Ok(model)
    }

    pub fn optimizers(&self) -> Result<Vec<Adam>> {
        Group::ALL
            .iter()
            .map(|&g| Ok(Adam::new(&self.store, self.group_params(g), AdamConfig::with_lr(g.base_lr(&self.config)))?))
            .collect()
    }
}

/// Graph values produced for one ray batch.
#[derive(Debug, Clone)]
pub struct Forward {
    pub render: RenderOutput,
    /// Present when a target pose was given.
    pub correspondence: Option<Correspondence>,
    /// Colour rendered from canonical features, when that head exists.
    pub flow_rgb: Option<Var>,
}

/// Both branches over `batch`: the geometry branch at pose `pose_i`, the flow
/// branch mapping frame-`i` camera points into the frame with pose `pose_j`.
pub fn forward(
    g: &mut Graph,
    nets: &Networks,
    store: &ParamStore,
    config: &TrainConfig,
    k: &CameraIntrinsics,
    batch: &SampleBatch,
    pose_i: Var,
    pose_j: Option<Var>,
) -> Result<Forward> {
    let (n, m) = (batch.rays(), batch.samples());
    let pv = rodrigues(g, pose_i)?;
    let (points, dirs) = batch.world_points(g, k, &pv)?;
    let per_sample: Vec<usize> = (0..n * m).map(|p| p / m).collect();
    let dirs = g.gather_rows(dirs, &per_sample)?;
    let x = g.constant(batch.camera_points.clone())?;
    let psi_i = nets.embedding.embed(g, store, pose_i)?;
    let r = nets.bijection.forward(g, store, x, psi_i)?;
    let canonical = nets.canonical.forward(g, store, r)?;
    let message = if config.message_passing {
        Some(message_pass(g, canonical.features, config.message_detach)?)
    } else {
        None
    };
    let geo = nets.geometry.forward(g, store, points, dirs, message)?;
    let rendered = render(g, geo.sigma, geo.color, &batch.z_values, config.far)?;
    let correspondence = match pose_j {
        Some(pj) => {
            let psi_j = nets.embedding.embed(g, store, pj)?;
            let o_j = nets.bijection.inverse(g, store, r, psi_j)?;
            Some(compose_flow(g, o_j, canonical.sigma, n, m, k, config.projection_mode())?)
        }
        None => None,
    };
    let flow_rgb = match (&nets.flow_color, &correspondence) {
        (Some(head), Some(corr)) => {
            let c = head.forward(g, store, canonical.features)?;
            let c = g.sigmoid(c)?;
            let c = g.reshape(c, &[n, m, 3])?;
            let w = g.reshape(corr.weights, &[n, m, 1])?;
            let wc = g.mul(w, c)?;
            Some(g.sum_axis(wc, 1)?)
        }
        _ => None,
    };
    Ok(Forward {
        render: rendered,
        correspondence,
        flow_rgb,
    })
}
