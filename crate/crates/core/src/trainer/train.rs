//! The joint optimization loop.

use std::path::{Path, PathBuf};

use diffcore::{Adam, Graph, Tensor};
use log::{info, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, OptimizerState};
use super::config::TrainConfig;
use super::model::{forward, Group, Model};
use super::schedule::PlateauScheduler;
use crate::camgeo::{depth_to_points, rodrigues, CameraIntrinsics, SampleBatch};
use crate::error::{Error, Result};
use crate::losses::{
    loss_depth, loss_flow, loss_pointcloud, loss_rgb, loss_warp, total_loss, LossLog, LossParts, LossReport,
};
use crate::oracleio::metrics::psnr_from_mse;
use crate::oracleio::{chain_flows, Dataset};
use crate::raster::{FlowField, ImageBuffer};

/// Training frames and supervision in the form the loop consumes.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub intrinsics: CameraIntrinsics,
    /// `[h, w, 3]` per training frame.
    pub images: Vec<Tensor>,
    /// Ray-distance depth per training frame, row-major.
    pub depths: Vec<Vec<f64>>,
    /// `pair_flows[i]` maps frame `i` to frame `i + interval`.
    pub pair_flows: Vec<FlowField>,
    pub interval: usize,
}

pub fn image_tensor(img: &ImageBuffer) -> Result<Tensor> {
    Ok(Tensor::new(vec![img.height, img.width, 3], img.data.clone())?)
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let frames = ds.train_count();
        if frames <= cfg.interval {
            return Err(Error::Config(format!(
                "{frames} training frames cannot form pairs at interval {}",
                cfg.interval
            )));
        }
        let images = ds.images[..frames].iter().map(image_tensor).collect::<Result<Vec<_>>>()?;
        let needs_depth = cfg.depth_weight > 0.0 || cfg.pc_weight > 0.0 || cfg.warp_weight > 0.0;
        let mut depths = Vec::with_capacity(frames);
        for i in 0..frames {
            match &ds.depths[i] {
                Some(d) => depths.push(d.to_f64()),
                None if needs_depth => {
                    return Err(Error::Config(format!("frame {i} has no depth but depth-based losses are on")));
                }
                None => depths.push(Vec::new()),
            }
        }
        let (lo, hi) = depths
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
        if lo < cfg.near || hi > cfg.far {
            warn!(
                "ground-truth depth spans [{lo:.3}, {hi:.3}], outside the sampling bounds [{}, {}]",
                cfg.near, cfg.far
            );
        }
        let mut pair_flows = Vec::with_capacity(frames - cfg.interval);
        for a in 0..frames - cfg.interval {
            let hops: Option<Vec<FlowField>> = ds.forward[a..a + cfg.interval].iter().cloned().collect();
            match hops {
                Some(h) => pair_flows.push(chain_flows(&h)?),
                None if cfg.flow_weight > 0.0 => {
                    return Err(Error::Config(format!("missing flow for pair starting at frame {a}")));
                }
                None => pair_flows.push(FlowField::zeros(ds.intrinsics.width, ds.intrinsics.height)?),
            }
        }
        Ok(TrainData {
            intrinsics: ds.intrinsics,
            images,
            depths,
            pair_flows,
            interval: cfg.interval,
        })
    }

    pub fn frames(&self) -> usize {
        self.images.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// 0-based index of the iteration just run.
    pub iteration: u64,
    pub losses: LossReport,
    pub psnr: f64,
}

pub struct Trainer {
    pub model: Model,
    pub optimizers: Vec<Adam>,
    pub scheduler: PlateauScheduler,
    /// Iterations completed.
    pub iteration: u64,
    pub data: TrainData,
}

/// Per-iteration stream so every iteration's draws depend only on
/// `(seed, iteration)`.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

fn pixel_rows(indices: &[usize], width: usize) -> Vec<[f64; 2]> {
    indices.iter().map(|&p| [(p % width) as f64, (p / width) as f64]).collect()
}

fn gather_colors(img: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let d = img.data();
    let data = indices.iter().flat_map(|&p| d[3 * p..3 * p + 3].to_vec()).collect();
    Ok(Tensor::new(vec![indices.len(), 3], data)?)
}

impl Trainer {
    pub fn new(config: &TrainConfig, data: TrainData) -> Result<Self> {
        let model = Model::new(config, data.frames())?;
        let optimizers = model.optimizers()?;
        Ok(Trainer {
            scheduler: PlateauScheduler::new(config),
            model,
            optimizers,
            iteration: 0,
            data,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, data: TrainData) -> Result<Self> {
        if ck.camera != data.intrinsics {
            return Err(Error::Config("checkpoint camera does not match the dataset".into()));
        }
        let mut t = Trainer::new(&ck.config, data)?;
        t.model.load_tensors(&ck.tensors)?;
        if ck.optimizers.len() != t.optimizers.len() {
            return Err(Error::Contract("checkpoint optimizer groups do not match".into()));
        }
        for ((o, s), g) in t.optimizers.iter_mut().zip(&ck.optimizers).zip(Group::ALL) {
            if s.group != g.name() {
                return Err(Error::Contract(format!("unexpected optimizer group `{}`", s.group)));
            }
            o.set_lr(s.lr)?;
            o.restore(s.step, s.first.clone(), s.second.clone())?;
        }
        t.scheduler = ck.scheduler.clone();
        t.iteration = ck.iteration;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let optimizers = self
            .optimizers
            .iter()
            .zip(Group::ALL)
            .map(|(o, g)| {
                let (m, v) = o.moments();
                OptimizerState {
                    group: g.name().to_string(),
                    lr: o.lr(),
                    step: o.step_count(),
                    first: m.to_vec(),
                    second: v.to_vec(),
                }
            })
            .collect();
        Checkpoint {
            config: self.model.config.clone(),
            iteration: self.iteration,
            scheduler: self.scheduler.clone(),
            camera: self.data.intrinsics,
            tensors: self.model.tensors(),
            optimizers,
        }
    }

    /// One optimization step over the next consecutive frame pair.
    pub fn step(&mut self) -> Result<StepReport> {
        self.step_inner().map_err(|e| match e {
            Error::Engine(inner) => numeric(inner),
            other => other,
        })
    }

    fn step_inner(&mut self) -> Result<StepReport> {
        let cfg = self.model.config.clone();
        let k = self.data.intrinsics;
        let pairs = self.data.pair_flows.len() as u64;
        let i = (self.iteration % pairs) as usize;
        let j = i + self.data.interval;
        let mut rng = iteration_rng(cfg.seed, self.iteration);
        let count = k.pixel_count();
        let rays = sample(&mut rng, count, cfg.rays.min(count)).into_vec();
        let batch = SampleBatch::new(pixel_rows(&rays, k.width), i, j, &k, &cfg.sampling(), Some(&mut rng))?;

        let store = &self.model.store;
        let mut g = Graph::new();
        let vi = g.param(store, self.model.poses[i])?;
        let vj = g.param(store, self.model.poses[j])?;
        let needs_flow = cfg.flow_weight > 0.0 || cfg.aux_rgb_from_flow;
        let fwd = forward(&mut g, &self.model.nets, store, &cfg, &k, &batch, vi, needs_flow.then_some(vj))?;

        let target = gather_colors(&self.data.images[i], &rays)?;
        let rgb = loss_rgb(&mut g, fwd.render.rgb, &target)?;
        let zero = g.scalar(0.0)?;
        let flow = match &fwd.correspondence {
            Some(corr) if cfg.flow_weight > 0.0 => {
                let f = &self.data.pair_flows[i];
                let mut tgt = Vec::with_capacity(2 * rays.len());
                let mut valid = Vec::with_capacity(rays.len());
                for (r, &p) in rays.iter().enumerate() {
                    let d = f.at(p % k.width, p / k.width);
                    tgt.push(batch.pixels[r][0] + d[0]);
                    tgt.push(batch.pixels[r][1] + d[1]);
                    valid.push(!f.occluded[p] && corr.valid[r]);
                }
                loss_flow(&mut g, corr.pixels, &Tensor::new(vec![rays.len(), 2], tgt)?, &valid)?
            }
            _ => zero,
        };
        let depth = if cfg.depth_weight > 0.0 {
            let d: Vec<f64> = rays.iter().map(|&p| self.data.depths[i][p]).collect();
            loss_depth(&mut g, fwd.render.depth, &Tensor::vector(d)?)?
        } else {
            zero
        };
        let (pc, rgb_s) = if cfg.pc_weight > 0.0 || cfg.warp_weight > 0.0 {
            let pts = cfg.pc_points.min(count);
            let si = sample(&mut rng, count, pts).into_vec();
            let sj = sample(&mut rng, count, pts).into_vec();
            let cloud = |frame: usize, idx: &[usize]| {
                let d: Vec<f64> = idx.iter().map(|&p| self.data.depths[frame][p]).collect();
                depth_to_points(&pixel_rows(idx, k.width), &d, &k)
            };
            let cloud_i = cloud(i, &si)?;
            let pose_i = rodrigues(&mut g, vi)?;
            let pose_j = rodrigues(&mut g, vj)?;
            let pc = if cfg.pc_weight > 0.0 {
                loss_pointcloud(&mut g, &cloud_i, &cloud(j, &sj)?, &pose_i, &pose_j)?
            } else {
                zero
            };
            let warp = if cfg.warp_weight > 0.0 {
                let colors = gather_colors(&self.data.images[i], &si)?;
                loss_warp(&mut g, &colors, &cloud_i, &self.data.images[j], &pose_i, &pose_j, &k)?
            } else {
                zero
            };
            (pc, warp)
        } else {
            (zero, zero)
        };
        let parts = LossParts {
            rgb,
            flow,
            depth,
            pc,
            rgb_s,
        };
        let mut total = total_loss(&mut g, &parts, &cfg.loss_weights())?;
        if let Some(aux) = fwd.flow_rgb {
            let extra = loss_rgb(&mut g, aux, &target)?;
            total = g.add(total, extra)?;
        }
        let value = |g: &Graph, v| g.value(v).data()[0];
        let losses = LossReport {
            rgb: value(&g, rgb),
            flow: value(&g, flow),
            depth: value(&g, depth),
            pc: value(&g, pc),
            rgb_s: value(&g, rgb_s),
            total: value(&g, total),
        };
        if !losses.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at iteration {}", self.iteration)));
        }
        let pred = g.value(fwd.render.rgb).data();
        let mse = pred.iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
        let psnr = psnr_from_mse(mse);

        self.model.store.clear_grads();
        g.backward(total, &mut self.model.store).map_err(numeric)?;
        for o in &mut self.optimizers {
            o.step(&mut self.model.store).map_err(numeric)?;
        }
        if self.scheduler.observe(psnr) {
            self.scheduler.apply(&mut self.optimizers)?;
            info!(
                "iteration {}: train PSNR stalled at {:.2} dB, learning rates scaled to {:e}",
                self.iteration, self.scheduler.best, self.scheduler.scale
            );
        }
        let report = StepReport {
            iteration: self.iteration,
            losses,
            psnr,
        };
        self.iteration += 1;
        Ok(report)
    }
}

fn numeric(e: diffcore::Error) -> Error {
    match e {
        diffcore::Error::NonFinite { op } => Error::Numeric(format!("non-finite value in `{op}`")),
        other => other.into(),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub iterations: u64,
    pub last: Option<StepReport>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.fnrf";
pub const LOG_FILE: &str = "loss.csv";

/// Trains until `config.iterations`, writing `checkpoint.fnrf` every
/// `checkpoint_every` iterations and at the end, and one CSV row per
/// iteration. A numeric abort leaves the last good checkpoint in place.
pub fn run_training(config: &TrainConfig, data_dir: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let ds = Dataset::load(data_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = match resume {
        Some(p) => {
            let mut ck = Checkpoint::load(p)?;
            if !ck.config.same_architecture(config) {
                return Err(Error::Config("resume checkpoint was trained with different networks".into()));
            }
            ck.config.iterations = config.iterations;
            Trainer::from_checkpoint(&ck, TrainData::from_dataset(&ds, &ck.config)?)?
        }
        None => Trainer::new(config, TrainData::from_dataset(&ds, config)?)?,
    };
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    std::fs::write(out_dir.join("config.txt"), trainer.model.config.to_text())
        .map_err(|e| Error::io(out_dir.join("config.txt"), e))?;
    let mut log = LossLog::open(&out_dir.join(LOG_FILE))?;
    let every = trainer.model.config.checkpoint_every as u64;
    let mut last = None;
    while trainer.iteration < trainer.model.config.iterations as u64 {
        let r = trainer.step()?;
        log.append(r.iteration as usize, &r.losses, r.psnr)?;
        if trainer.iteration % every == 0 {
            log.flush()?;
            trainer.checkpoint().save(&ck_path)?;
            info!(
                "iteration {}: loss {:.5}, train PSNR {:.2} dB",
                trainer.iteration, r.losses.total, r.psnr
            );
        }
        last = Some(r);
    }
    log.flush()?;
    trainer.checkpoint().save(&ck_path)?;
    Ok(TrainOutcome {
        checkpoint: ck_path,
        iterations: trainer.iteration,
        last,
    })
}
