//! Inference-time anomaly maps: per-stage discrepancies, upsampled
//! accumulation, linear fusion and the image score.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{bilinear_resize, gaussian_blur, Tensor};

/// Default fusion ratio for a known benchmark family.
pub fn dataset_alpha(name: &str) -> Option<f64> {
    match name.to_ascii_lowercase().replace(['_', ' '], "-").as_str() {
        "mvtec" | "mvtec-ad" => Some(0.4),
        "visa" => Some(0.4),
        "real-iad" | "realiad" => Some(0.1),
        "uni-medical" | "unimedical" => Some(0.5),
        _ => None,
    }
}

/// Channel cosine distance of two `[bs, c, h, w]` tensors → `[bs, h, w]`.
pub fn cosine_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let d = tape.constant(a.clone()).cosine_distance(&tape.constant(b.clone()), 1)?;
    Ok((*d.value()).clone())
}

/// Restoration-identity and teacher-restoration maps for each stage.
pub struct StageMaps<T> {
    pub ri: Vec<Tensor<T>>,
    pub tr: Vec<Tensor<T>>,
}

pub fn stage_maps<T: Scalar>(
    teacher: &[Tensor<T>],
    restored: &[Tensor<T>],
    identity: &[Tensor<T>],
) -> Result<StageMaps<T>> {
    if teacher.len() != restored.len() || restored.len() != identity.len() {
        return Err(Error::InvalidArgument(format!(
            "stage counts differ: teacher {}, restoration {}, identity {}",
            teacher.len(),
            restored.len(),
            identity.len()
        )));
    }
    let mut maps = StageMaps {
        ri: Vec::with_capacity(teacher.len()),
        tr: Vec::with_capacity(teacher.len()),
    };
    for ((t, r), i) in teacher.iter().zip(restored).zip(identity) {
        maps.ri.push(cosine_map(r, i)?);
        maps.tr.push(cosine_map(t, r)?);
    }
    Ok(maps)
}

/// `Σ_i upsample(map_i)` at `size`.
pub fn accumulate<T: Scalar>(maps: &[Tensor<T>], size: (usize, usize)) -> Result<Tensor<T>> {
    let mut iter = maps.iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("accumulate over zero maps".into()))?;
    let mut acc = bilinear_resize(first, size)?;
    for m in iter {
        let up = bilinear_resize(m, size)?;
        if up.shape() != acc.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate",
                lhs: acc.shape().to_vec(),
                rhs: up.shape().to_vec(),
            });
        }
        acc.data_mut().iter_mut().zip(up.data()).for_each(|(a, &b)| *a += b);
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub alpha: f64,
    /// Gaussian σ applied to the fused map before taking the maximum.
    pub smoothing_sigma: Option<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            smoothing_sigma: None,
        }
    }
}

/// One image's fused map with its components.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap<T> {
    pub map: Tensor<T>,
    pub ri: Tensor<T>,
    pub tr: Tensor<T>,
    pub alpha: f64,
    pub score: T,
}

/// `S = α·S_RI + (1−α)·S_TR`, optionally smoothed; `s = max S`.
pub fn fuse<T: Scalar>(ri: Tensor<T>, tr: Tensor<T>, cfg: &FusionConfig) -> Result<AnomalyMap<T>> {
    let alpha = cfg.alpha;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("fusion ratio {alpha} not in [0, 1]")));
    }
    if ri.shape() != tr.shape() || ri.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: ri.shape().to_vec(),
            rhs: tr.shape().to_vec(),
        });
    }
    let (a, b) = (T::of(alpha), T::of(1.0 - alpha));
    let data = ri.data().iter().zip(tr.data()).map(|(&x, &y)| a * x + b * y).collect();
    let mut map = Tensor::new(ri.shape().to_vec(), data)?;
    if let Some(sigma) = cfg.smoothing_sigma {
        map = gaussian_blur(&map, sigma)?;
    }
    let score = map.data().iter().copied().fold(T::neg_infinity(), T::max);
    Ok(AnomalyMap {
        map,
        ri,
        tr,
        alpha,
        score,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub min: f64,
    pub max: f64,
    pub alpha: f64,
    pub s: f64,
}

/// Writes the fused map of `[H, W]` as a min-max normalized 16-bit PNG and a
/// `.json` sidecar next to it.
pub fn write_heatmap<T: Scalar>(png: &Path, map: &AnomalyMap<T>) -> Result<HeatmapMeta> {
    let s = map.map.shape();
    if s.len() != 2 {
        return Err(Error::InvalidArgument(format!("heatmap needs [H, W], got {s:?}")));
    }
    let values: Vec<f64> = map.map.data().iter().map(|v| v.f64()).collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let pixels: Vec<u16> = values
        .iter()
        .map(|&v| if range > 0.0 { ((v - min) / range * 65535.0).round() as u16 } else { 0 })
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(s[1] as u32, s[0] as u32, pixels).expect("buffer matches size");
    if let Some(dir) = png.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(png).map_err(|source| Error::Image {
        path: png.to_path_buf(),
        source,
    })?;
    let meta = HeatmapMeta {
        min,
        max,
        alpha: map.alpha,
        s: map.score.f64(),
    };
    let sidecar = png.with_extension("json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    Ok(meta)
}

/// Raw map: `u32` rank, `u32` per dimension, then little-endian `f32` values.
pub fn write_raw_map<T: Scalar>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * (1 + map.rank() + map.len()));
    bytes.extend_from_slice(&(map.rank() as u32).to_le_bytes());
    for &d in map.shape() {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in map.data() {
        bytes.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_raw_map(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let words: Vec<[u8; 4]> = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    if bytes.len() % 4 != 0 || words.is_empty() {
        return Err(Error::format(path, "not a raw map"));
    }
    let rank = u32::from_le_bytes(words[0]) as usize;
    if words.len() < 1 + rank {
        return Err(Error::format(path, "truncated header"));
    }
    let shape: Vec<usize> = words[1..=rank].iter().map(|w| u32::from_le_bytes(*w) as usize).collect();
    let data: Vec<f32> = words[1 + rank..].iter().map(|w| f32::from_le_bytes(*w)).collect();
    Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))
}
