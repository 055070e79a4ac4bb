//! Scoring of a trained model, or any other predictor, against a dataset's
//! ground truth.

use std::collections::HashMap;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::model::Model;
use super::render::{optimize_test_pose, render_flow, render_view, PoseFit};
use crate::camgeo::{aligned_pose_metrics, PoseErrors, PoseMatrix, PoseVector};
use crate::error::{Error, Result};
use crate::oracleio::metrics::{depth_metrics, epe, psnr, ssim, DepthMetrics};
use crate::oracleio::{chain_flows, reproject_flow, Dataset, Split};
use crate::raster::{DepthMap, FlowField, ImageBuffer};

pub const REPORT_VERSION: u32 = 1;
pub const INTERVALS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewScore {
    pub id: u32,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageScores {
    /// Means over `views`.
    pub psnr: f64,
    pub ssim: f64,
    pub views: Vec<ViewScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFitSummary {
    pub id: u32,
    /// Training frame whose pose seeded the fit.
    pub init_from: u32,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    /// Share of steps that lowered the photometric loss.
    pub decreasing: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Flow error pooled over every frame pair at one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowScore {
    pub interval: usize,
    pub direction: Direction,
    pub pairs: usize,
    pub epe_l2: f64,
    pub epe_l1: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairFlowScore {
    pub from: u32,
    pub to: u32,
    pub epe_l2: f64,
    pub epe_l1: f64,
    pub pixels: usize,
}

/// Configuration switches that distinguish ablation arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmInfo {
    pub message_passing: bool,
    pub projection: String,
    pub iterations: u64,
}

/// Every metric is optional; a metric whose ground truth is missing is
/// `null`, and interval rows exist only where the sequence is long enough.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub version: u32,
    pub train_frames: usize,
    pub arm: Option<ArmInfo>,
    pub train_views: Option<ImageScores>,
    pub novel_views: Option<ImageScores>,
    pub test_pose_fits: Vec<PoseFitSummary>,
    pub depth_train: Option<DepthMetrics>,
    pub depth_novel: Option<DepthMetrics>,
    pub pose: Option<PoseErrors>,
    pub flow: Vec<FlowScore>,
    pub novel_flow: Vec<PairFlowScore>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ParseLine {
            what: "report",
            line: e.line(),
            detail: e.to_string(),
        })
    }

    pub fn flow_at(&self, interval: usize, direction: Direction) -> Option<&FlowScore> {
        self.flow.iter().find(|f| f.interval == interval && f.direction == direction)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::oracleio::formats::write_file(path, self.to_json().as_bytes())
    }
}

/// Source of the quantities being scored.
pub trait Predictor {
    /// Colour and ray distance for frame `id`; `gt` is that frame's image,
    /// which held-out frames need to recover their pose.
    fn view(&mut self, id: u32, gt: &ImageBuffer) -> Result<(ImageBuffer, DepthMap)>;
    /// Estimated training trajectory, in training-frame order.
    fn train_poses(&self) -> Vec<PoseMatrix>;
    /// Dense flow from frame `a` to frame `b`. Held-out frames are only
    /// asked for after their `view`.
    fn flow(&mut self, a: u32, b: u32) -> Result<FlowField>;
    fn pose_fits(&self) -> Vec<PoseFitSummary> {
        Vec::new()
    }
    fn arm(&self) -> Option<ArmInfo> {
        None
    }
}

/// Renders from a trained model, fitting held-out poses on first use.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub iterations: u64,
    train_times: Vec<f64>,
    times: HashMap<u32, f64>,
    fitted: HashMap<u32, (PoseVector, PoseFitSummary)>,
    k: crate::camgeo::CameraIntrinsics,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a Model, ds: &Dataset, iterations: u64) -> Result<Self> {
        if model.frames() != ds.train_count() {
            return Err(Error::Config(format!(
                "model has {} training poses, the dataset {} training frames",
                model.frames(),
                ds.train_count()
            )));
        }
        let mut train_times = vec![0.0; ds.train_count()];
        for f in ds.meta.frames.iter().filter(|f| f.split == Split::Train) {
            train_times[f.id as usize] = f.time;
        }
        Ok(ModelPredictor {
            model,
            iterations,
            train_times,
            times: ds.meta.frames.iter().map(|f| (f.id, f.time)).collect(),
            fitted: HashMap::new(),
            k: ds.intrinsics,
        })
    }

    /// Latest training frame at or before `time`, else the first.
    fn anchor(&self, time: f64) -> usize {
        self.train_times.iter().rposition(|&t| t <= time).unwrap_or(0)
    }

    fn pose(&self, id: u32) -> Result<PoseVector> {
        if (id as usize) < self.model.frames() {
            return Ok(self.model.pose_vector(id as usize));
        }
        self.fitted
            .get(&id)
            .map(|(p, _)| *p)
            .ok_or_else(|| Error::Contract(format!("frame {id} has no fitted pose yet")))
    }
}

fn summarize(id: u32, init_from: u32, fit: &PoseFit) -> PoseFitSummary {
    let steps = fit.losses.len().saturating_sub(1);
    let down = fit.losses.windows(2).filter(|w| w[1] < w[0]).count();
    PoseFitSummary {
        id,
        init_from,
        initial_loss: fit.initial_loss(),
        final_loss: fit.final_loss(),
        steps,
        decreasing: if steps == 0 { 1.0 } else { down as f64 / steps as f64 },
        diverged: fit.diverged,
    }
}

impl Predictor for ModelPredictor<'_> {
    fn view(&mut self, id: u32, gt: &ImageBuffer) -> Result<(ImageBuffer, DepthMap)> {
        if (id as usize) >= self.model.frames() && !self.fitted.contains_key(&id) {
            let time = *self.times.get(&id).ok_or_else(|| Error::Contract(format!("unknown frame {id}")))?;
            let from = self.anchor(time);
            let cfg = &self.model.config;
            let fit = optimize_test_pose(
                self.model,
                gt,
                &self.model.pose_vector(from),
                &self.k,
                cfg.test_pose_iterations,
                cfg.test_pose_lr,
            )?;
            let summary = summarize(id, from as u32, &fit);
            info!(
                "frame {id}: pose fit from frame {from}, loss {:.5} -> {:.5}",
                summary.initial_loss, summary.final_loss
            );
            self.fitted.insert(id, (fit.pose, summary));
        }
        render_view(self.model, &self.pose(id)?, &self.k)
    }

    fn train_poses(&self) -> Vec<PoseMatrix> {
        (0..self.model.frames()).map(|i| self.model.pose_matrix(i)).collect()
    }

    fn flow(&mut self, a: u32, b: u32) -> Result<FlowField> {
        render_flow(self.model, &self.pose(a)?, &self.pose(b)?, &self.k)
    }

    fn pose_fits(&self) -> Vec<PoseFitSummary> {
        let mut v: Vec<_> = self.fitted.values().map(|(_, s)| s.clone()).collect();
        v.sort_by_key(|s| s.id);
        v
    }

    fn arm(&self) -> Option<ArmInfo> {
        let c = &self.model.config;
        Some(ArmInfo {
            message_passing: c.message_passing,
            projection: c.projection.to_string(),
            iterations: self.iterations,
        })
    }
}

/// Ground-truth flow from `a` to `b` over training frames, chained from
/// consecutive oracle flows.
pub fn chained_truth(ds: &Dataset, a: usize, b: usize) -> Option<Result<FlowField>> {
    let hops: Option<Vec<FlowField>> = if a < b {
        ds.forward[a..b].iter().cloned().collect()
    } else {
        ds.backward[b..a].iter().rev().cloned().collect()
    };
    hops.map(|h| chain_flows(&h))
}

fn image_scores(views: Vec<ViewScore>) -> Option<ImageScores> {
    if views.is_empty() {
        return None;
    }
    let n = views.len() as f64;
    Some(ImageScores {
        psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        views,
    })
}

fn mean_depth(all: &[DepthMetrics]) -> Option<DepthMetrics> {
    if all.is_empty() {
        return None;
    }
    let n = all.len() as f64;
    let m = |f: fn(&DepthMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
    Some(DepthMetrics {
        abs_rel: m(|d| d.abs_rel),
        sq_rel: m(|d| d.sq_rel),
        rmse: m(|d| d.rmse),
        rmse_log: m(|d| d.rmse_log),
        delta1: m(|d| d.delta1),
        delta2: m(|d| d.delta2),
        delta3: m(|d| d.delta3),
        scale: m(|d| d.scale),
    })
}

fn depth_view(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics> {
    let g = gt.to_f64();
    let valid: Vec<bool> = g.iter().map(|d| d.is_finite() && *d > 0.0).collect();
    depth_metrics(&pred.to_f64(), &g, Some(&valid))
}

fn pooled(scores: &[crate::oracleio::metrics::EndPointError]) -> (f64, f64, usize) {
    let pixels: usize = scores.iter().map(|s| s.pixels).sum();
    let w = |f: fn(&crate::oracleio::metrics::EndPointError) -> f64| {
        scores.iter().map(|s| f(s) * s.pixels as f64).sum::<f64>() / pixels.max(1) as f64
    };
    (w(|s| s.epe_l2), w(|s| s.epe_l1), pixels)
}

/// Scores `p` against `ds`. Depth is scored per view with median scaling
/// and averaged; flow errors are pooled over pixels of all pairs.
pub fn evaluate(ds: &Dataset, p: &mut dyn Predictor) -> Result<Report> {
    let frames = ds.train_count();
    let mut train_views = Vec::new();
    let mut train_depth = Vec::new();
    for id in 0..frames as u32 {
        let gt = &ds.images[id as usize];
        let (rgb, depth) = p.view(id, gt)?;
        train_views.push(ViewScore {
            id,
            psnr: psnr(&rgb, gt)?,
            ssim: ssim(&rgb, gt)?,
        });
        if let Some(d) = &ds.depths[id as usize] {
            train_depth.push(depth_view(&depth, d)?);
        }
    }

    let tests: Vec<_> = ds.meta.test_frames().into_iter().cloned().collect();
    let mut novel_views = Vec::new();
    let mut novel_depth = Vec::new();
    for f in &tests {
        let gt = &ds.images[f.id as usize];
        let (rgb, depth) = p.view(f.id, gt)?;
        novel_views.push(ViewScore {
            id: f.id,
            psnr: psnr(&rgb, gt)?,
            ssim: ssim(&rgb, gt)?,
        });
        if let Some(d) = &ds.depths[f.id as usize] {
            novel_depth.push(depth_view(&depth, d)?);
        }
    }

    let pose = match &ds.gt_poses {
        Some(gt) => Some(aligned_pose_metrics(&p.train_poses(), &gt[..frames])?.1),
        None => {
            warn!("no ground-truth trajectory; pose metrics absent");
            None
        }
    };

    let mut flow = Vec::new();
    for &k in INTERVALS.iter().filter(|&&k| k < frames) {
        for direction in [Direction::Forward, Direction::Backward] {
            let mut scores = Vec::new();
            for a in 0..frames - k {
                let (from, to) = match direction {
                    Direction::Forward => (a, a + k),
                    Direction::Backward => (a + k, a),
                };
                let Some(truth) = chained_truth(ds, from, to) else {
                    continue;
                };
                let pred = p.flow(from as u32, to as u32)?;
                match epe(&pred, &truth?) {
                    Ok(s) => scores.push(s),
                    Err(Error::Metric(m)) => warn!("flow {from}->{to}: {m}"),
                    Err(e) => return Err(e),
                }
            }
            if scores.is_empty() {
                continue;
            }
            let (epe_l2, epe_l1, pixels) = pooled(&scores);
            flow.push(FlowScore {
                interval: k,
                direction,
                pairs: scores.len(),
                epe_l2,
                epe_l1,
                pixels,
            });
        }
    }

    let mut novel_flow = Vec::new();
    if let Some(gt) = &ds.gt_poses {
        for f in &tests {
            let Some(da) = &ds.depths[f.id as usize] else { continue };
            let before = ds.meta.frames.iter().filter(|t| t.split == Split::Train && t.time <= f.time).count();
            let neighbours = [before.checked_sub(1), (before < frames).then_some(before)];
            for n in neighbours.into_iter().flatten() {
                let truth = reproject_flow(
                    da,
                    &gt[f.id as usize],
                    &gt[n],
                    &ds.intrinsics,
                    ds.depths[n].as_ref(),
                    ds.meta.occlusion_threshold,
                )?
                .to_field()?;
                let pred = p.flow(f.id, n as u32)?;
                match epe(&pred, &truth) {
                    Ok(s) => novel_flow.push(PairFlowScore {
                        from: f.id,
                        to: n as u32,
                        epe_l2: s.epe_l2,
                        epe_l1: s.epe_l1,
                        pixels: s.pixels,
                    }),
                    Err(Error::Metric(m)) => warn!("flow {}->{n}: {m}", f.id),
                    Err(e) => return Err(e),
                }
            }
        }
    }

    Ok(Report {
        version: REPORT_VERSION,
        train_frames: frames,
        arm: p.arm(),
        train_views: image_scores(train_views),
        novel_views: image_scores(novel_views),
        test_pose_fits: p.pose_fits(),
        depth_train: mean_depth(&train_depth),
        depth_novel: mean_depth(&novel_depth),
        pose,
        flow,
        novel_flow,
    })
}

/// Loads a checkpoint and scores it on the dataset in `data_dir`.
pub fn evaluate_checkpoint(ckpt: &Path, data_dir: &Path) -> Result<Report> {
    let ck = Checkpoint::load(ckpt)?;
    let model = Model::from_checkpoint(&ck)?;
    let ds = Dataset::load(data_dir)?;
    let mut p = ModelPredictor::new(&model, &ds, ck.iteration)?;
    evaluate(&ds, &mut p)
}

/// Replays the dataset's own ground truth as predictions.
pub struct OraclePredictor<'a> {
    pub ds: &'a Dataset,
}

impl Predictor for OraclePredictor<'_> {
    fn view(&mut self, id: u32, _gt: &ImageBuffer) -> Result<(ImageBuffer, DepthMap)> {
        let d = self.ds.depths[id as usize]
            .clone()
            .ok_or_else(|| Error::Contract(format!("frame {id} has no depth")))?;
        Ok((self.ds.images[id as usize].clone(), d))
    }

    fn train_poses(&self) -> Vec<PoseMatrix> {
        self.ds.gt_poses.as_ref().map(|p| p[..self.ds.train_count()].to_vec()).unwrap_or_default()
    }

    fn flow(&mut self, a: u32, b: u32) -> Result<FlowField> {
        let train = self.ds.train_count() as u32;
        if a < train && b < train {
            return chained_truth(self.ds, a as usize, b as usize)
                .ok_or_else(|| Error::Contract(format!("no flow {a}->{b}")))?;
        }
        let gt = self.ds.gt_poses.as_ref().ok_or_else(|| Error::Contract("no trajectory".into()))?;
        let da = self.ds.depths[a as usize].as_ref().ok_or_else(|| Error::Contract(format!("no depth {a}")))?;
        reproject_flow(
            da,
            &gt[a as usize],
            &gt[b as usize],
            &self.ds.intrinsics,
            self.ds.depths[b as usize].as_ref(),
            self.ds.meta.occlusion_threshold,
        )?
        .to_field()
    }
}
