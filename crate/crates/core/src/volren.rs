//! Quadrature volume rendering of colour and expected distance.

use diffcore::{Graph, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct RenderOutput {
    /// `[n, 3]`.
    pub rgb: Var,
    /// Expected distance `Σ w z`, `[n]`.
    pub depth: Var,
    /// `[n, m]`.
    pub weights: Var,
    /// Transmittance past the last sample, `[n]`.
    pub transmittance_tail: Var,
    /// Accumulated weight `Σ w`, `[n]`.
    pub opacity: Var,
}

/// Spacing between samples, the last one closed by `far`.
pub fn sample_spacing(z: &Tensor, far: f64) -> Result<Tensor> {
    let shape = z.shape();
    if shape.len() != 2 {
        return Err(Error::Contract(format!("distances must be [n, m], got {shape:?}")));
    }
    let m = shape[1];
    let mut delta = Vec::with_capacity(z.len());
    for row in z.data().chunks(m) {
        for k in 0..m {
            let next = if k + 1 < m { row[k + 1] } else { far };
            let d = next - row[k];
            if !(d > 0.0) && k + 1 < m {
                return Err(Error::Contract(format!(
                    "sample distances must increase strictly, got {} then {}",
                    row[k], next
                )));
            }
            if d < 0.0 {
                return Err(Error::Contract(format!("last sample {} lies beyond far bound {far}", row[k])));
            }
            delta.push(d);
        }
    }
    Ok(Tensor::new(shape.to_vec(), delta)?)
}

/// Renders densities `sigma` (`[n, m]` or `[n·m, 1]`) and colours
/// `color: [n·m, 3]` sampled at distances `z: [n, m]`.
pub fn render(g: &mut Graph, sigma: Var, color: Var, z: &Tensor, far: f64) -> Result<RenderOutput> {
    let delta = sample_spacing(z, far)?;
    let (n, m) = (z.shape()[0], z.shape()[1]);
    if g.value(sigma).len() != n * m || g.shape(color) != [n * m, 3] {
        return Err(Error::Contract(format!(
            "render: sigma {:?}, color {:?} for {n}x{m} samples",
            g.shape(sigma),
            g.shape(color)
        )));
    }
    let s = g.reshape(sigma, &[n, m])?;
    let dc = g.constant(delta)?;
    let optical = g.mul(s, dc)?;
    let neg = g.neg(optical)?;
    let keep = g.exp(neg)?;
    let alpha = g.rsub_scalar(1.0, keep)?;
    let trans = g.cumprod_exclusive(keep)?;
    let weights = g.mul(trans, alpha)?;
    let w3 = g.reshape(weights, &[n, m, 1])?;
    let c3 = g.reshape(color, &[n, m, 3])?;
    let wc = g.mul(w3, c3)?;
    let rgb = g.sum_axis(wc, 1)?;
    let zc = g.constant(z.clone())?;
    let wz = g.mul(weights, zc)?;
    let depth = g.sum_axis(wz, 1)?;
    let opacity = g.sum_axis(weights, 1)?;
    let total = g.sum_axis(neg, 1)?;
    let transmittance_tail = g.exp(total)?;
    Ok(RenderOutput {
        rgb,
        depth,
        weights,
        transmittance_tail,
        opacity,
    })
}
