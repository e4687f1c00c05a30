//! MVTec-style dataset trees: scanning, image and mask loading, batching,
//! and a procedural generator for small test datasets.
//!
//! Layout: `<cat>/train/good/*.png`, `<cat>/test/<defect|good>/*.png`,
//! `<cat>/ground_truth/<defect>/<stem>_mask.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::{self, perlin_noise, SynthConfig};
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainEntry {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub defect: String,
    pub anomalous: bool,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    /// Sorted; position is the class label.
    pub categories: Vec<String>,
    pub train: Vec<TrainEntry>,
    pub test: Vec<TestEntry>,
}

impl DatasetIndex {
    pub fn test_of(&self, label: usize) -> impl Iterator<Item = &TestEntry> {
        self.test.iter().filter(move |e| e.label == label)
    }
}

/// Indexes every category directory under `root` that has a `train` folder.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    let mut index = DatasetIndex {
        categories: Vec::new(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for cat_dir in subdirs(root)? {
        if !cat_dir.join("train").is_dir() {
            continue;
        }
        let label = index.categories.len();
        index.categories.push(file_name(&cat_dir));
        let good = cat_dir.join("train").join("good");
        if good.is_dir() {
            for path in list_images(&good)? {
                index.train.push(TrainEntry { path, label });
            }
        }
        let test_dir = cat_dir.join("test");
        if !test_dir.is_dir() {
            continue;
        }
        for defect_dir in subdirs(&test_dir)? {
            let defect = file_name(&defect_dir);
            let anomalous = defect != "good";
            for path in list_images(&defect_dir)? {
                let mask = if anomalous {
                    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    let m = cat_dir.join("ground_truth").join(&defect).join(format!("{stem}_mask.png"));
                    if !m.is_file() {
                        log::warn!("no mask for {}; entry skipped", path.display());
                        continue;
                    }
                    Some(m)
                } else {
                    None
                };
                index.test.push(TestEntry {
                    path,
                    label,
                    defect: defect.clone(),
                    anomalous,
                    mask,
                });
            }
        }
    }
    if index.train.is_empty() {
        return Err(Error::Dataset(format!("no training images under {}", root.display())));
    }
    Ok(index)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, y, x) = (i / (h * w), i / w % h, i % w);
        T::of(img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0)
    })
}

/// `[3, h, w]` in [0, 1] at the file's own size.
pub fn read_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    Ok(rgb_to_tensor(&open(path)?.to_rgb8()))
}

/// `[3, size, size]` in [0, 1], bilinearly resized when needed.
pub fn load_image<T: Scalar>(path: &Path, size: usize) -> Result<Tensor<T>> {
    let mut img = open(path)?.to_rgb8();
    if img.width() as usize != size || img.height() as usize != size {
        img = image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
    }
    Ok(rgb_to_tensor(&img))
}

/// `[size, size]` with 1 where the (nearest-resized) gray level exceeds 127.
pub fn load_mask<T: Scalar>(path: &Path, size: usize) -> Result<Tensor<T>> {
    let mut img = open(path)?.to_luma8();
    if img.width() as usize != size || img.height() as usize != size {
        img = image::imageops::resize(&img, size as u32, size as u32, FilterType::Nearest);
    }
    Ok(Tensor::from_fn(vec![size, size], |i| {
        let v = img.as_raw()[i];
        if v > 127 {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Per-channel `(x − mean) / std`, applied to images after loading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    /// Works on `[3, H, W]` or `[bs, 3, H, W]`.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape();
        let plane = s[s.len() - 2] * s[s.len() - 1];
        let mut out = x.clone();
        for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = p % 3;
            let (m, sd) = (T::of(self.mean[c]), T::of(self.std[c]));
            chunk.iter_mut().for_each(|v| *v = (*v - m) / sd);
        }
        out
    }
}

fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn tensor_to_rgb<T: Scalar>(x: &Tensor<T>) -> RgbImage {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    ImageBuffer::from_fn(w as u32, h as u32, |px, py| {
        let at = |c: usize| to_u8(x.data()[(c * h + py as usize) * w + px as usize]);
        Rgb([at(0), at(1), at(2)])
    })
}

/// Binary mask as 0/255 gray.
pub fn mask_to_gray<T: Scalar>(mask: &Tensor<T>) -> GrayImage {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.data()[y as usize * w + x as usize] > T::zero() { 255 } else { 0 }])
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn save_rgb<T: Scalar>(path: &Path, x: &Tensor<T>) -> Result<()> {
    ensure_parent(path)?;
    tensor_to_rgb(x).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_mask<T: Scalar>(path: &Path, mask: &Tensor<T>) -> Result<()> {
    ensure_parent(path)?;
    mask_to_gray(mask).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Stacks `[3, H, W]` images into `[bs, 3, H, W]`.
pub fn stack<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// Index batches for one pass over `len` items; shuffled when a seed is
/// given. The last batch may be short.
pub fn batch_indices(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Description of a procedural dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub categories: usize,
    pub train_per_category: usize,
    pub test_per_category: usize,
    /// fraction of each category's test images that receive an anomaly
    pub anomalous_fraction: f64,
    pub image_size: usize,
    pub seed: u64,
    /// synthesis settings for the held-out test anomalies
    pub anomaly: SynthConfig,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            categories: 2,
            train_per_category: 50,
            test_per_category: 20,
            anomalous_fraction: 0.5,
            image_size: 64,
            seed: 0,
            anomaly: SynthConfig {
                beta_min: 0.5,
                ..SynthConfig::default()
            },
        }
    }
}

impl ToySpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("toy spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn category_names(&self) -> Vec<String> {
        (0..self.categories)
            .map(|k| {
                let family = FAMILIES[k % FAMILIES.len()];
                match k / FAMILIES.len() {
                    0 => family.to_string(),
                    round => format!("{family}{round}"),
                }
            })
            .collect()
    }
}

const FAMILIES: [&str; 4] = ["stripes", "blobs", "checker", "dots"];

/// Per-category constants shared by all of its images.
struct Style {
    family: usize,
    fg: [f64; 3],
    bg: [f64; 3],
    angle: f64,
    period: f64,
}

impl Style {
    fn new(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000 ^ (k as u64).wrapping_mul(0x9e37_79b9));
        let mut color = |lo: f64, hi: f64| [0; 3].map(|_| rng.random_range(lo..hi));
        let (fg, bg) = (color(0.55, 0.95), color(0.05, 0.4));
        Self {
            family: k % FAMILIES.len(),
            fg,
            bg,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            period: rng.random_range(6.0..12.0),
        }
    }

    fn render<T: Scalar>(&self, size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let n = size as f64;
        let jitter = Normal::new(0.0, 0.05).expect("valid normal");
        let angle = self.angle + jitter.sample(rng);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (ox, oy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let blob = if self.family == 1 {
            Some(perlin_noise(size, size, (4, 4), rng)?)
        } else {
            None
        };
        let grain = perlin_noise(size, size, (8.min(size), 8.min(size)), rng)?;
        let period = self.period;
        let mut mix = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + ox, y as f64 + oy);
                let v = match self.family {
                    0 => {
                        let u = fx * angle.cos() + fy * angle.sin();
                        0.5 + 0.5 * (std::f64::consts::TAU * u / period + phase).sin()
                    }
                    1 => {
                        let b = blob.as_ref().expect("blob field")[&[y, x]];
                        1.0 / (1.0 + (-12.0 * b).exp())
                    }
                    2 => {
                        let cell = (fx / period).floor() as i64 + (fy / period).floor() as i64;
                        if cell.rem_euclid(2) == 0 { 0.9 } else { 0.1 }
                    }
                    _ => {
                        let dx = (fx / period).fract() - 0.5;
                        let dy = (fy / period).fract() - 0.5;
                        (-(dx * dx + dy * dy) / 0.04).exp()
                    }
                };
                mix.push((v + 0.08 * grain[&[y, x]]).clamp(0.0, 1.0));
            }
        }
        let plane = size * size;
        Ok(Tensor::from_fn(vec![3, size, size], |i| {
            let (c, p) = (i / plane, i % plane);
            T::of(self.bg[c] + (self.fg[c] - self.bg[c]) * mix[p])
        }))
    }
}

/// One normal image of toy category `category`, drawn from `seed`.
pub fn toy_image<T: Scalar>(spec: &ToySpec, category: usize, seed: u64) -> Result<Tensor<T>> {
    Style::new(category, spec.seed).render(spec.image_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Writes a procedural MVTec-style tree under `root` and returns its index.
/// Test anomalies use a synthesis stream independent of any training seed.
pub fn toy_dataset(spec: &ToySpec, root: &Path) -> Result<DatasetIndex> {
    if spec.categories == 0 || spec.train_per_category == 0 || spec.image_size < 8 {
        return Err(Error::InvalidArgument(
            "toy dataset needs categories, training images and image_size >= 8".into(),
        ));
    }
    let names = spec.category_names();
    for (k, name) in names.iter().enumerate() {
        let style = Style::new(k, spec.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
        let dir = root.join(name);
        for i in 0..spec.train_per_category {
            let img: Tensor<f64> = style.render(spec.image_size, &mut rng)?;
            save_rgb(&dir.join("train/good").join(format!("{i:03}.png")), &img)?;
        }
        let anomalous = (spec.test_per_category as f64 * spec.anomalous_fraction).round() as usize;
        let good = spec.test_per_category - anomalous.min(spec.test_per_category);
        for i in 0..good {
            let img: Tensor<f64> = style.render(spec.image_size, &mut rng)?;
            save_rgb(&dir.join("test/good").join(format!("{i:03}.png")), &img)?;
        }
        for i in 0..anomalous.min(spec.test_per_category) {
            let img: Tensor<f64> = style.render(spec.image_size, &mut rng)?;
            let sample = synth::augment(&img, k, None, &spec.anomaly, rng.random())?;
            save_rgb(&dir.join("test/synthetic").join(format!("{i:03}.png")), &sample.anomalous)?;
            save_mask(&dir.join("ground_truth/synthetic").join(format!("{i:03}_mask.png")), &sample.mask)?;
        }
    }
    fs::write(
        root.join("toy_spec.toml"),
        toml::to_string(spec).expect("spec serializes"),
    )
    .map_err(|e| Error::io(root, e))?;
    scan_dataset(root)
}
