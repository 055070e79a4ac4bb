//! Row-major image grids: colour, depth and flow.

use crate::error::{Error, Result};

fn check_len(what: &str, width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 || width * height * channels != len {
        return Err(Error::Contract(format!(
            "{what} of {width}x{height}x{channels} cannot hold {len} values"
        )));
    }
    Ok(())
}

/// Slack for coordinates that land on the border up to roundoff.
pub const HULL_TOLERANCE: f64 = 1e-9;

/// Whether `(u, v)` lies within the hull of pixel centres, where bilinear
/// lookups are defined.
pub fn in_pixel_hull(width: usize, height: usize, u: f64, v: f64) -> bool {
    let t = HULL_TOLERANCE;
    u >= -t && v >= -t && u <= (width - 1) as f64 + t && v <= (height - 1) as f64 + t
}

/// RGB image with channels in `[0, 1]`, `[h, w, 3]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len("image", width, height, 3, data.len())?;
        Ok(ImageBuffer { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rounds to 8 bits per channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }
}

/// Per-pixel distance along the viewing ray, stored exactly as written.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_len("depth map", width, height, 1, data.len())?;
        Ok(DepthMap { width, height, data })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        f64::from(self.data[y * self.width + x])
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Displacement `(u, v)` per pixel, with an occlusion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    /// Interleaved `(u, v)`, `[h, w, 2]`.
    pub data: Vec<f32>,
    /// True where the flow carries no supervision.
    pub occluded: Vec<bool>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, data: Vec<f32>, occluded: Vec<bool>) -> Result<Self> {
        check_len("flow field", width, height, 2, data.len())?;
        check_len("occlusion mask", width, height, 1, occluded.len())?;
        Ok(FlowField {
            width,
            height,
            data,
            occluded,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; 2 * width * height], vec![false; width * height])
    }

    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        let i = 2 * (y * self.width + x);
        [f64::from(self.data[i]), f64::from(self.data[i + 1])]
    }

    pub fn valid(&self, x: usize, y: usize) -> bool {
        !self.occluded[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.occluded.iter().filter(|&&o| !o).count()
    }

    /// Bilinear lookup at a continuous pixel; `None` unless every neighbour
    /// with nonzero weight is unoccluded.
    pub fn sample(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        if !in_pixel_hull(self.width, self.height, u, v) {
            return None;
        }
        let u = u.clamp(0.0, (self.width - 1) as f64);
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let mut out = [0.0; 2];
        for (x, y, w) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ] {
            if w == 0.0 {
                continue;
            }
            if !self.valid(x, y) {
                return None;
            }
            let f = self.at(x, y);
            out[0] += w * f[0];
            out[1] += w * f[1];
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_flow_lookup() {
        let data: Vec<f32> = (0..4).flat_map(|i| [i as f32, -(i as f32)]).collect();
        let f = FlowField::new(2, 2, data, vec![false; 4]).unwrap();
        let s = f.sample(0.5, 0.5).unwrap();
        assert_eq!(s, [1.5, -1.5]);
        assert_eq!(f.sample(1.0, 1.0).unwrap(), [3.0, -3.0]);
        assert!(f.sample(1.01, 0.0).is_none());
        let mut g = f.clone();
        g.occluded[3] = true;
        assert!(g.sample(0.2, 0.2).is_none());
    }

    #[test]
    fn lengths_are_checked() {
        assert!(ImageBuffer::new(2, 2, vec![0.0; 11]).is_err());
        assert!(DepthMap::new(0, 2, vec![]).is_err());
        assert!(FlowField::new(2, 1, vec![0.0; 4], vec![false; 1]).is_err());
    }
}
