//! Mini-dataset construction from sequential traversals, and a small built-in
//! global descriptor (grayscale, box-downsampled, zero-mean, unit-norm).

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use crate::error::{io_err, Result, VprError};
use crate::store::{Descriptor, ImageKey};

/// One traversal of the route under one condition, frames in order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraversalSpec {
    pub condition_id: u32,
    pub images: Vec<PathBuf>,
}

/// Take `group` consecutive frames as a place, then skip `step` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupStepConfig {
    pub group: usize,
    pub step: usize,
}

impl GroupStepConfig {
    pub const G3S10: Self = Self { group: 3, step: 10 };
    pub const G2S2: Self = Self { group: 2, step: 2 };
    pub const G3S3: Self = Self { group: 3, step: 3 };

    pub fn new(group: usize, step: usize) -> Result<Self> {
        if group == 0 {
            return Err(VprError::InvalidArgument("group must be at least 1".into()));
        }
        Ok(Self { group, step })
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "g3s10" => Some(Self::G3S10),
            "g2s2" => Some(Self::G2S2),
            "g3s3" => Some(Self::G3S3),
            _ => None,
        }
    }

    /// Places obtainable from `len` frames: `(len - g) / (g + s) + 1`, or 0 when `len < g`.
    pub fn place_count(&self, len: usize) -> usize {
        if self.group == 0 || len < self.group {
            return 0;
        }
        (len - self.group) / (self.group + self.step) + 1
    }

    /// Source frame range of place `k`.
    pub fn place_range(&self, k: usize) -> std::ops::Range<usize> {
        let start = k * (self.group + self.step);
        start..start + self.group
    }
}

/// Keys and source frames of a grouped dataset, before any descriptors exist.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniDataset {
    pub config: GroupStepConfig,
    pub place_count: usize,
    /// Frames used from each traversal (the shortest traversal length).
    pub governing_len: usize,
    /// `(condition_id, original length)` of every traversal that was cut short.
    pub truncated: Vec<(u32, usize)>,
    pub entries: Vec<(ImageKey, PathBuf)>,
}

impl MiniDataset {
    pub fn keys(&self) -> Vec<ImageKey> {
        self.entries.iter().map(|(k, _)| *k).collect()
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.entries.iter().map(|(_, p)| p.clone()).collect()
    }

    /// Manifest text in the `name,descriptor_file` / `image_key,row_index` format.
    ///
    /// Written without the two-images-per-place check so that single-condition,
    /// `group = 1` layouts can still be inspected; loading such a manifest fails.
    pub fn manifest_text(&self, name: &str, descriptor_file: &Path) -> String {
        let mut out = format!("{name},{}\n", descriptor_file.display());
        for (row, (key, _)) in self.entries.iter().enumerate() {
            out.push_str(&format!("{key},{row}\n"));
        }
        out
    }

    pub fn images_per_place(&self) -> usize {
        self.entries.len().checked_div(self.place_count).unwrap_or(0)
    }
}

/// Groups aligned traversals into places. Each place takes `group` frames
/// from every traversal; keys are `Place{k}_Cond{c}_G{j}`.
pub fn build_mini(traversals: &[TraversalSpec], config: GroupStepConfig) -> Result<MiniDataset> {
    let config = GroupStepConfig::new(config.group, config.step)?;
    let governing_len = traversals
        .iter()
        .map(|t| t.images.len())
        .min()
        .ok_or_else(|| VprError::InvalidArgument("no traversals given".into()))?;
    for (i, t) in traversals.iter().enumerate() {
        if traversals[..i].iter().any(|o| o.condition_id == t.condition_id) {
            return Err(VprError::InvalidArgument(format!(
                "condition {} given twice",
                t.condition_id
            )));
        }
    }
    if config.group > governing_len {
        return Err(VprError::InvalidArgument(format!(
            "group {} exceeds traversal length {governing_len}",
            config.group
        )));
    }

    let truncated: Vec<(u32, usize)> = traversals
        .iter()
        .filter(|t| t.images.len() > governing_len)
        .map(|t| (t.condition_id, t.images.len()))
        .collect();
    for (cond, len) in &truncated {
        warn!("condition {cond}: {len} frames truncated to {governing_len}");
    }

    let place_count = config.place_count(governing_len);
    let mut entries = Vec::with_capacity(place_count * config.group * traversals.len());
    for k in 0..place_count {
        let place_id = u32::try_from(k)
            .map_err(|_| VprError::InvalidArgument("too many places".into()))?;
        for t in traversals {
            for (j, frame) in config.place_range(k).enumerate() {
                entries.push((
                    ImageKey::new(place_id, t.condition_id, j as u32),
                    t.images[frame].clone(),
                ));
            }
        }
    }
    Ok(MiniDataset {
        config,
        place_count,
        governing_len,
        truncated,
        entries,
    })
}

/// Image files (`.pgm`, `.ppm`, `.pnm`) in `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"));
        if is_image && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// A decoded single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

/// Decodes binary PGM (P5) or PPM (P6) with `maxval <= 255`. Colour is
/// reduced to luma `0.299 R + 0.587 G + 0.114 B`.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<&[u8], String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(&bytes[start..pos])
    };
    let channels = match token()? {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(format!(
                "unsupported format {:?} (only binary P5/P6)",
                String::from_utf8_lossy(other)
            ))
        }
    };
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad {what}"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval} (8-bit only)"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("raster truncated: need {need} bytes"))?;
    let pixels = if channels == 1 {
        raster.iter().map(|&v| v as f64).collect()
    } else {
        raster
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    };
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

/// Encodes an 8-bit binary PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// `(source index, overlap)` pairs for each output cell along one axis, in a
/// coordinate system scaled by `out_len` so overlaps are integers.
fn box_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, u64)>> {
    (0..out_len)
        .map(|o| {
            let lo = (o * in_len) as u64;
            let hi = ((o + 1) * in_len) as u64;
            let first = o * in_len / out_len;
            let last = ((o + 1) * in_len).div_ceil(out_len);
            (first..last)
                .filter_map(|s| {
                    let s_lo = (s * out_len) as u64;
                    let s_hi = ((s + 1) * out_len) as u64;
                    let overlap = hi.min(s_hi).saturating_sub(lo.max(s_lo));
                    (overlap > 0).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

/// Area-averaging resize to `side x side`.
pub fn resize_area(img: &GrayImage, side: usize) -> Vec<f64> {
    let wx = box_weights(img.width, side);
    let wy = box_weights(img.height, side);
    let area = (img.width * img.height) as f64;
    let mut out = Vec::with_capacity(side * side);
    for ys in &wy {
        for xs in &wx {
            let mut acc = 0.0;
            for &(sy, oy) in ys {
                let row = &img.pixels[sy * img.width..(sy + 1) * img.width];
                for &(sx, ox) in xs {
                    acc += (oy * ox) as f64 * row[sx];
                }
            }
            out.push(acc / area);
        }
    }
    out
}

/// Grayscale, resize, subtract the mean, normalize to unit length.
pub fn describe_image(img: &GrayImage, side: usize) -> std::result::Result<Descriptor, String> {
    let mut v = resize_area(img, side);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err("zero-variance image has no descriptor".into());
    }
    Descriptor::new(v.iter().map(|x| (x / norm) as f32).collect()).map_err(|e| e.to_string())
}

/// Built-in descriptor for each image, `side * side` dimensional.
pub fn extract_builtin(paths: &[PathBuf], side: usize) -> Result<Vec<Descriptor>> {
    if side == 0 {
        return Err(VprError::InvalidArgument("side must be at least 1".into()));
    }
    paths
        .par_iter()
        .map(|path| {
            let bytes = fs::read(path).map_err(io_err(path))?;
            let img_err = |message| VprError::Image {
                path: path.clone(),
                message,
            };
            let img = decode_pnm(&bytes).map_err(img_err)?;
            describe_image(&img, side).map_err(img_err)
        })
        .collect()
}
