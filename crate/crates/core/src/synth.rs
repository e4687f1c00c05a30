//! Synthetic anomalies: Perlin-noise masks blended with foreign textures.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2-D gradient noise with `scale.0` lattice cells across the height and
/// `scale.1` across the width. Zero at lattice nodes, clamped to [−1, 1].
pub fn perlin_noise<R: Rng>(h: usize, w: usize, scale: (usize, usize), rng: &mut R) -> Result<Tensor<f64>> {
    let (sy, sx) = scale;
    for s in [sy, sx] {
        if s == 0 || !s.is_power_of_two() || s > h.min(w) {
            return Err(Error::InvalidArgument(format!(
                "noise scale {s} must be a power of two no larger than {}",
                h.min(w)
            )));
        }
    }
    let angles: Vec<f64> = (0..(sy + 1) * (sx + 1))
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let grad = |gy: usize, gx: usize| {
        let a = angles[gy * (sx + 1) + gx];
        (a.cos(), a.sin())
    };
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 * sy as f64 / h as f64;
        let (cy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 * sx as f64 / w as f64;
            let (cx, tx) = (fx.floor() as usize, fx.fract());
            let dot = |dy: usize, dx: usize| {
                let (gx, gy) = grad(cy + dy, cx + dx);
                gx * (tx - dx as f64) + gy * (ty - dy as f64)
            };
            let (u, v) = (fade(tx), fade(ty));
            let top = dot(0, 0) + u * (dot(0, 1) - dot(0, 0));
            let bottom = dot(1, 0) + u * (dot(1, 1) - dot(1, 0));
            let n = std::f64::consts::SQRT_2 * (top + v * (bottom - top));
            out.push(n.clamp(-1.0, 1.0));
        }
    }
    Tensor::new(vec![h, w], out)
}

/// `1` where the min-max normalized `|noise|` reaches `threshold`. A flat
/// field normalizes to zero.
pub fn make_mask<T: Scalar>(noise: &Tensor<f64>, threshold: f64) -> Tensor<T> {
    let mags: Vec<f64> = noise.data().iter().map(|v| v.abs()).collect();
    let lo = mags.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let data = mags
        .iter()
        .map(|&m| {
            let n = if range > 0.0 { (m - lo) / range } else { 0.0 };
            if n >= threshold {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(noise.shape().to_vec(), data).expect("same length")
}

/// `x_a = (1−m)·x_n + m·((1−β)·x_n + β·tex)`, clipped to [0, 1]. `texture`
/// is tiled or cropped to the image size.
pub fn blend<T: Scalar>(normal: &Tensor<T>, texture: &Tensor<T>, mask: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    let s = normal.shape();
    if s.len() != 3 || s[0] != 3 || mask.shape() != &s[1..] {
        return Err(Error::ShapeMismatch {
            op: "blend",
            lhs: s.to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let ts = texture.shape();
    if ts.len() != 3 || ts[0] != 3 || ts[1] == 0 || ts[2] == 0 {
        return Err(Error::InvalidArgument(format!("texture must be [3, h, w], got {ts:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let (th, tw) = (ts[1], ts[2]);
    let b = T::of(beta);
    let mut out = normal.data().to_vec();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let m = mask.data()[y * w + x];
                if m == T::zero() {
                    continue;
                }
                let i = (c * h + y) * w + x;
                let xn = out[i];
                let tex = texture.data()[(c * th + y % th) * tw + x % tw];
                let inside = (T::one() - b) * xn + b * tex;
                out[i] = ((T::one() - m) * xn + m * inside).max(T::zero()).min(T::one());
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub threshold: f64,
    /// noise scales are `2^k` for `k` drawn from this inclusive range,
    /// capped by the image size
    pub min_scale_exp: u32,
    pub max_scale_exp: u32,
    pub beta_min: f64,
    pub beta_max: f64,
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_scale_exp: 0,
            max_scale_exp: 5,
            beta_min: 0.15,
            beta_max: 1.0,
            max_attempts: 10,
        }
    }
}

impl SynthConfig {
    fn scale<R: Rng>(&self, side: usize, rng: &mut R) -> usize {
        let cap = side.max(1).ilog2();
        let hi = self.max_scale_exp.min(cap);
        let lo = self.min_scale_exp.min(hi);
        1 << rng.random_range(lo..=hi)
    }

    /// Draws noise fields until one yields a non-empty mask.
    pub fn sample_mask<T: Scalar, R: Rng>(&self, h: usize, w: usize, rng: &mut R) -> Result<Tensor<T>> {
        for _ in 0..self.max_attempts {
            let side = h.min(w);
            let scale = (self.scale(side, rng), self.scale(side, rng));
            let mask: Tensor<T> = make_mask(&perlin_noise(h, w, scale, rng)?, self.threshold);
            if mask.data().iter().any(|&v| v > T::zero()) {
                return Ok(mask);
            }
        }
        Err(Error::EmptyMask(self.max_attempts))
    }
}

/// A Perlin color field in [0, 1], used when no texture images are given.
pub fn procedural_texture<T: Scalar, R: Rng>(h: usize, w: usize, rng: &mut R) -> Result<Tensor<T>> {
    let cap = h.min(w).max(1).ilog2().min(4);
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        let s = 1 << rng.random_range(0..=cap);
        let base: f64 = rng.random_range(0.0..1.0);
        let amp: f64 = rng.random_range(0.3..1.0);
        let noise = perlin_noise(h, w, (s, s), rng)?;
        data.extend(noise.data().iter().map(|&n| T::of((base + amp * n).clamp(0.0, 1.0))));
    }
    Tensor::new(vec![3, h, w], data)
}

/// Texture images in [0, 1] at their native sizes.
#[derive(Clone, Debug, Default)]
pub struct TexturePool<T> {
    pub textures: Vec<Tensor<T>>,
}

impl<T: Scalar> TexturePool<T> {
    /// Loads every decodable image in `dir` (sorted by name); unreadable
    /// files are skipped with a warning.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut textures = Vec::new();
        for path in crate::data::list_images(dir)? {
            match crate::data::read_rgb(&path) {
                Ok(t) => textures.push(t),
                Err(e) => log::warn!("skipping texture: {e}"),
            }
        }
        if textures.is_empty() {
            log::warn!("no usable textures in {}; falling back to procedural ones", dir.display());
        }
        Ok(Self { textures })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalySample<T> {
    pub normal: Tensor<T>,
    pub anomalous: Tensor<T>,
    /// `[H, W]` in {0, 1}
    pub mask: Tensor<T>,
    pub label: usize,
}

/// Mask, texture choice and opacity all come from `seed`.
pub fn augment<T: Scalar>(
    normal: &Tensor<T>,
    label: usize,
    pool: Option<&TexturePool<T>>,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<AnomalySample<T>> {
    let s = normal.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidArgument(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = cfg.sample_mask(h, w, &mut rng)?;
    let texture = match pool.filter(|p| !p.textures.is_empty()) {
        Some(p) => {
            let t = &p.textures[rng.random_range(0..p.textures.len())];
            crop_random(t, h, w, &mut rng)
        }
        None => procedural_texture(h, w, &mut rng)?,
    };
    let beta = rng.random_range(cfg.beta_min..=cfg.beta_max);
    let anomalous = blend(normal, &texture, &mask, beta)?;
    Ok(AnomalySample {
        normal: normal.clone(),
        anomalous,
        mask,
        label,
    })
}

/// Random `h × w` window of a larger texture; smaller ones are returned
/// whole and tiled by [`blend`].
fn crop_random<T: Scalar, R: Rng>(t: &Tensor<T>, h: usize, w: usize, rng: &mut R) -> Tensor<T> {
    let (th, tw) = (t.shape()[1], t.shape()[2]);
    if th < h || tw < w {
        return t.clone();
    }
    let (oy, ox) = (rng.random_range(0..=th - h), rng.random_range(0..=tw - w));
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, y, x) = (i / (h * w), i / w % h, i % w);
        t.data()[(c * th + oy + y) * tw + ox + x]
    })
}
