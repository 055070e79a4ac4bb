//! Image, depth and flow error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{FlowField, ImageBuffer};

pub const PSNR_CAP: f64 = 99.0;

fn same_size(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(pred: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    same_size(pred, gt)?;
    let mse = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        let d = i as f64 - c;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the windows that fit entirely inside the
/// image.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity over channels with an 11×11 Gaussian window.
pub fn ssim(pred: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    same_size(pred, gt)?;
    let (w, h) = (pred.width, pred.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Metric(format!("image {w}x{h} is smaller than the SSIM window")));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for c in 0..3 {
        let a: Vec<f64> = pred.data.iter().skip(c).step_by(3).copied().collect();
        let b: Vec<f64> = gt.data.iter().skip(c).step_by(3).copied().collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
        let (mu_a, _, _) = filter_valid(&a, w, h, &k);
        let (mu_b, _, _) = filter_valid(&b, w, h, &k);
        let (aa, _, _) = filter_valid(&prod(&a, &a), w, h, &k);
        let (bb, _, _) = filter_valid(&prod(&b, &b), w, h, &k);
        let (ab, _, _) = filter_valid(&prod(&a, &b), w, h, &k);
        let n = mu_a.len();
        let mut s = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += s / n as f64;
    }
    Ok(total / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Median ratio applied to the prediction.
    pub scale: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Depth error suite after scaling `pred` by `median(gt) / median(pred)`.
/// Pixels count when `valid` allows them and both depths are positive.
pub fn depth_metrics(pred: &[f64], gt: &[f64], valid: Option<&[bool]>) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || valid.is_some_and(|v| v.len() != gt.len()) {
        return Err(Error::Contract(format!("depth lengths {} vs {}", pred.len(), gt.len())));
    }
    let pairs: Vec<(f64, f64)> = pred
        .iter()
        .zip(gt)
        .enumerate()
        .filter(|(i, (p, g))| valid.is_none_or(|v| v[*i]) && **p > 0.0 && **g > 0.0 && p.is_finite() && g.is_finite())
        .map(|(_, (&p, &g))| (p, g))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Metric("no valid depth pixels".into()));
    }
    let mut ps: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut gs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let scale = median(&mut gs) / median(&mut ps);
    let n = pairs.len() as f64;
    let mut m = DepthMetrics {
        abs_rel: 0.0,
        sq_rel: 0.0,
        rmse: 0.0,
        rmse_log: 0.0,
        delta1: 0.0,
        delta2: 0.0,
        delta3: 0.0,
        scale,
    };
    for &(p, g) in &pairs {
        let p = p * scale;
        let d = p - g;
        m.abs_rel += d.abs() / g;
        m.sq_rel += d * d / g;
        m.rmse += d * d;
        m.rmse_log += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        m.delta1 += f64::from(u8::from(ratio < 1.25));
        m.delta2 += f64::from(u8::from(ratio < 1.25f64.powi(2)));
        m.delta3 += f64::from(u8::from(ratio < 1.25f64.powi(3)));
    }
    m.abs_rel /= n;
    m.sq_rel /= n;
    m.rmse = (m.rmse / n).sqrt();
    m.rmse_log = (m.rmse_log / n).sqrt();
    m.delta1 /= n;
    m.delta2 /= n;
    m.delta3 /= n;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndPointError {
    /// Mean Euclidean endpoint error.
    pub epe_l2: f64,
    /// Mean `|Δu| + |Δv|`.
    pub epe_l1: f64,
    pub pixels: usize,
}

/// Endpoint error of `pred` over the unoccluded pixels of `gt`.
pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<EndPointError> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Contract("flow sizes differ".into()));
    }
    let (mut l1, mut l2, mut n) = (0.0, 0.0, 0usize);
    for i in 0..gt.occluded.len() {
        if gt.occluded[i] {
            continue;
        }
        let du = f64::from(pred.data[2 * i]) - f64::from(gt.data[2 * i]);
        let dv = f64::from(pred.data[2 * i + 1]) - f64::from(gt.data[2 * i + 1]);
        l1 += du.abs() + dv.abs();
        l2 += du.hypot(dv);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metric("every ground-truth flow pixel is occluded".into()));
    }
    Ok(EndPointError {
        epe_l2: l2 / n as f64,
        epe_l1: l1 / n as f64,
        pixels: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> ImageBuffer {
        let data = (0..w * h * 3).map(|i| ((i * 7) % 23) as f64 / 23.0).collect();
        ImageBuffer::new(w, h, data).unwrap()
    }

    #[test]
    fn psnr_values() {
        let a = ImageBuffer::filled(4, 4, [0.5; 3]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = ImageBuffer::filled(4, 4, [0.6; 3]).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_degradation() {
        let a = ramp(16, 14);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        assert!(ssim(&a, &b).unwrap() < 0.5);
        assert!(ssim(&ramp(8, 20), &ramp(8, 20)).is_err());
    }

    #[test]
    fn depth_identity_and_scale() {
        let gt: Vec<f64> = (1..50).map(|i| 0.5 + i as f64 * 0.1).collect();
        let m = depth_metrics(&gt, &gt, None).unwrap();
        assert_eq!((m.abs_rel, m.delta1, m.rmse), (0.0, 1.0, 0.0));
        let doubled: Vec<f64> = gt.iter().map(|g| 2.0 * g).collect();
        let s = depth_metrics(&doubled, &gt, None).unwrap();
        assert_eq!((s.abs_rel, s.sq_rel, s.rmse, s.rmse_log, s.delta1), (0.0, 0.0, 0.0, 0.0, 1.0));
        assert!(depth_metrics(&gt, &gt, Some(&vec![false; gt.len()])).is_err());
    }

    #[test]
    fn epe_unit_offset() {
        let gt = FlowField::new(2, 2, vec![0.5, 1.0, 2.0, -1.0, 0.0, 0.0, 3.0, 3.0], vec![false, false, true, false]).unwrap();
        let mut pred = gt.clone();
        for i in 0..4 {
            pred.data[2 * i] += 1.0;
        }
        pred.data[4] = 100.0;
        let e = epe(&pred, &gt).unwrap();
        assert_eq!((e.epe_l2, e.epe_l1, e.pixels), (1.0, 1.0, 3));
        let none = FlowField::new(1, 1, vec![0.0; 2], vec![true]).unwrap();
        assert!(matches!(epe(&none, &none), Err(Error::Metric(_))));
    }
}
