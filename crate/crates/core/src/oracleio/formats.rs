//! Readers and writers for every on-disk format of a dataset.
//!
//! Byte-level parsers take slices so they can be fuzzed directly; the
//! path-based wrappers only add file I/O.

use std::path::Path;

use crate::camgeo::PoseMatrix;
use crate::error::{Error, Result};
use crate::raster::{DepthMap, FlowField, ImageBuffer};

/// Middlebury `.flo` tag, the bytes `PIEH` read as a little-endian float.
pub const FLO_MAGIC: f32 = 202_021.25;
pub const FNDP_MAGIC: &[u8; 4] = b"FNDP";
pub const FNDP_VERSION: u32 = 1;

// Keeps hostile headers from requesting absurd allocations.
const MAX_PIXELS: usize = 1 << 26;

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn u32_at(what: &'static str, b: &[u8], off: usize) -> Result<u32> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes(s.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::parse(what, b.len(), format!("truncated header, need byte {}", off + 4)))
}

fn dims(what: &'static str, w: i64, h: i64, offset: usize) -> Result<(usize, usize)> {
    if w <= 0 || h <= 0 || (w as u64).saturating_mul(h as u64) > MAX_PIXELS as u64 {
        return Err(Error::parse(what, offset, format!("unsupported size {w}x{h}")));
    }
    Ok((w as usize, h as usize))
}

fn f32_payload(what: &'static str, b: &[u8], start: usize, count: usize) -> Result<Vec<f32>> {
    let need = start + 4 * count;
    if b.len() < need {
        return Err(Error::parse(what, b.len(), format!("truncated payload, expected {need} bytes")));
    }
    if b.len() > need {
        return Err(Error::parse(what, need, format!("{} trailing bytes", b.len() - need)));
    }
    Ok(b[start..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// Parses a `.flo` file. The result has no occluded pixels; masks travel
/// separately.
pub fn decode_flo(b: &[u8]) -> Result<FlowField> {
    let magic = u32_at("flo", b, 0)?;
    if f32::from_bits(magic) != FLO_MAGIC {
        return Err(Error::parse("flo", 0, format!("bad magic {magic:#010x}")));
    }
    let w = u32_at("flo", b, 4)? as i32;
    let h = u32_at("flo", b, 8)? as i32;
    let (w, h) = dims("flo", i64::from(w), i64::from(h), 4)?;
    let data = f32_payload("flo", b, 12, 2 * w * h)?;
    FlowField::new(w, h, data, vec![false; w * h])
}

pub fn encode_flo(f: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * f.data.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(f.width as i32).to_le_bytes());
    out.extend_from_slice(&(f.height as i32).to_le_bytes());
    for v in &f.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fndp(b: &[u8]) -> Result<DepthMap> {
    match b.get(..4) {
        Some(m) if m == FNDP_MAGIC => {}
        _ => return Err(Error::parse("fndp", 0, "bad magic")),
    }
    let version = u32_at("fndp", b, 4)?;
    if version != FNDP_VERSION {
        return Err(Error::parse("fndp", 4, format!("unsupported version {version}")));
    }
    let w = u32_at("fndp", b, 8)?;
    let h = u32_at("fndp", b, 12)?;
    let (w, h) = dims("fndp", i64::from(w), i64::from(h), 8)?;
    let data = f32_payload("fndp", b, 16, w * h)?;
    DepthMap::new(w, h, data)
}

pub fn encode_fndp(d: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * d.data.len());
    out.extend_from_slice(FNDP_MAGIC);
    out.extend_from_slice(&FNDP_VERSION.to_le_bytes());
    out.extend_from_slice(&(d.width as u32).to_le_bytes());
    out.extend_from_slice(&(d.height as u32).to_le_bytes());
    for v in &d.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Header of a binary netpbm file: magic, width, height, maxval, then one
/// whitespace byte. Returns the dimensions and the payload offset.
fn netpbm_header(what: &'static str, b: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if b.get(..2) != Some(&magic[..]) {
        return Err(Error::parse(what, 0, "bad magic"));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        loop {
            match b.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while b.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::parse(what, pos, "truncated header")),
            }
        }
        let start = pos;
        while b.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if pos == start || pos - start > 9 {
            return Err(Error::parse(what, start, "expected a decimal field"));
        }
        *field = std::str::from_utf8(&b[start..pos]).expect("digits").parse().expect("digits");
    }
    match b.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::parse(what, pos, "missing separator after header")),
    }
    if fields[2] != 255 {
        return Err(Error::parse(what, pos, format!("unsupported maxval {}", fields[2])));
    }
    let (w, h) = dims(what, fields[0] as i64, fields[1] as i64, 2)?;
    Ok((w, h, pos))
}

fn netpbm_payload<'a>(what: &'static str, b: &'a [u8], start: usize, len: usize) -> Result<&'a [u8]> {
    let need = start + len;
    if b.len() < need {
        return Err(Error::parse(what, b.len(), format!("truncated payload, expected {need} bytes")));
    }
    if b.len() > need {
        return Err(Error::parse(what, need, format!("{} trailing bytes", b.len() - need)));
    }
    Ok(&b[start..need])
}

/// Binary PGM mask; any nonzero sample reads as occluded.
pub fn decode_pgm_mask(b: &[u8]) -> Result<(usize, usize, Vec<bool>)> {
    let (w, h, start) = netpbm_header("pgm", b, b"P5")?;
    let px = netpbm_payload("pgm", b, start, w * h)?;
    Ok((w, h, px.iter().map(|&v| v != 0).collect()))
}

/// Writes occluded pixels as 255 and the rest as 0.
pub fn encode_pgm_mask(width: usize, height: usize, occluded: &[bool]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(occluded.iter().map(|&o| if o { 255u8 } else { 0 }));
    out
}

pub fn decode_ppm(b: &[u8]) -> Result<ImageBuffer> {
    let (w, h, start) = netpbm_header("ppm", b, b"P6")?;
    let px = netpbm_payload("ppm", b, start, 3 * w * h)?;
    ImageBuffer::from_rgb8(w, h, px)
}

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_rgb8());
    out
}

pub fn encode_png(width: usize, height: usize, rgb8: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let enc = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(enc, rgb8, width as u32, height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Contract(format!("png encoding failed: {e}")))?;
    Ok(out)
}

pub fn decode_png(b: &[u8]) -> Result<ImageBuffer> {
    let img = image::load_from_memory_with_format(b, image::ImageFormat::Png)
        .map_err(|e| Error::parse("png", 0, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    ImageBuffer::from_rgb8(w, h, img.as_raw())
}

pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    write_png_rgb8(path, img.width, img.height, &img.to_rgb8())
}

pub fn write_png_rgb8(path: &Path, width: usize, height: usize, rgb8: &[u8]) -> Result<()> {
    write_file(path, &encode_png(width, height, rgb8)?)
}

pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    decode_png(&read_file(path)?)
}

/// One trajectory line: frame id and camera-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub frame_id: u32,
    pub translation: [f64; 3],
    /// `(qx, qy, qz, qw)`.
    pub quaternion: [f64; 4],
}

impl TrajectoryEntry {
    pub fn from_pose(frame_id: u32, pose: &PoseMatrix) -> Self {
        let t = pose.translation;
        TrajectoryEntry {
            frame_id,
            translation: [t.x, t.y, t.z],
            quaternion: pose.quaternion(),
        }
    }

    pub fn pose(&self) -> Result<PoseMatrix> {
        PoseMatrix::from_quaternion(self.quaternion, self.translation)
    }
}

pub fn decode_tum(text: &str) -> Result<Vec<TrajectoryEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: String| Error::ParseLine {
            what: "trajectory",
            line: i + 1,
            detail,
        };
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() != 8 {
            return Err(bad(format!("expected 8 fields, found {}", fields.len())));
        }
        let frame_id = fields[0].parse::<u32>().map_err(|e| bad(format!("frame id: {e}")))?;
        let mut v = [0.0; 7];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse::<f64>().map_err(|e| bad(format!("`{f}`: {e}")))?;
            if !slot.is_finite() {
                return Err(bad(format!("non-finite value `{f}`")));
            }
        }
        out.push(TrajectoryEntry {
            frame_id,
            translation: [v[0], v[1], v[2]],
            quaternion: [v[3], v[4], v[5], v[6]],
        });
    }
    Ok(out)
}

/// Shortest round-trip decimal formatting keeps the file bit-exact.
pub fn encode_tum(entries: &[TrajectoryEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let [tx, ty, tz] = e.translation;
        let [qx, qy, qz, qw] = e.quaternion;
        s.push_str(&format!("{} {tx} {ty} {tz} {qx} {qy} {qz} {qw}\n", e.frame_id));
    }
    s
}

pub fn read_tum(path: &Path) -> Result<Vec<TrajectoryEntry>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::parse("trajectory", e.utf8_error().valid_up_to(), "not UTF-8"))?;
    decode_tum(&text)
}
