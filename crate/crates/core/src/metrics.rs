//! Detection and localization metrics.
//!
//! Every metric is generic over its result type: `f64` for ordinary use and
//! [`num_rational::Rational64`] when exact equality matters (small
//! instances only, the denominators grow with the sample count).

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::fs;
use std::ops::{Add, Div, Mul, Sub};
use std::path::Path;

use num_rational::Rational64;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait MetricValue:
    Clone
    + PartialOrd
    + fmt::Debug
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
{
    fn ratio(num: u64, den: u64) -> Self;
    fn to_f64(&self) -> f64;
}

impl MetricValue for f64 {
    fn ratio(num: u64, den: u64) -> Self {
        num as f64 / den as f64
    }

    fn to_f64(&self) -> f64 {
        *self
    }
}

impl MetricValue for Rational64 {
    fn ratio(num: u64, den: u64) -> Self {
        Rational64::new(num as i64, den as i64)
    }

    fn to_f64(&self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

fn max_of<R: MetricValue>(best: Option<R>, v: R) -> Option<R> {
    match best {
        Some(b) if b >= v => Some(b),
        _ => Some(v),
    }
}

fn check_scores<S: PartialOrd + Copy>(scores: &[S], labels: usize) -> Result<()> {
    if scores.len() != labels {
        return Err(Error::Metric(format!("{} scores for {labels} labels", scores.len())));
    }
    if scores.iter().any(|s| s.partial_cmp(s).is_none()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    Ok(())
}

/// Indices sorted by descending score, split into runs of equal score.
fn descending_groups<S: PartialOrd + Copy>(scores: &[S]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Cumulative (true positives, false positives) after each threshold group,
/// thresholds descending. Also returns the positive count.
fn sweep<S: PartialOrd + Copy>(scores: &[S], labels: &[bool]) -> Result<(Vec<(u64, u64, u64)>, u64)> {
    check_scores(scores, labels.len())?;
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for g in descending_groups(scores) {
        let pos = g.iter().filter(|&&i| labels[i]).count() as u64;
        tp += pos;
        fp += g.len() as u64 - pos;
        out.push((tp, fp, pos));
    }
    Ok((out, positives))
}

/// Area under the ROC curve: `P(pos > neg) + ½·P(pos = neg)`.
pub fn auroc<S: PartialOrd + Copy, R: MetricValue>(scores: &[S], labels: &[bool]) -> Result<R> {
    let (steps, positives) = sweep(scores, labels)?;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric("AUROC needs both classes".into()));
    }
    // walking thresholds downward, each new positive beats every negative not
    // yet passed and ties with the negatives in its own group
    let mut twice = 0u64;
    let (mut prev_tp, mut prev_fp) = (0, 0);
    for &(tp, fp, _) in &steps {
        let (pos, neg) = (tp - prev_tp, fp - prev_fp);
        let below = negatives - fp;
        twice += pos * (2 * below + neg);
        (prev_tp, prev_fp) = (tp, fp);
    }
    Ok(R::ratio(twice, 2 * positives * negatives))
}

/// Step-interpolated average precision `Σ ΔRecall · Precision`.
pub fn average_precision<S: PartialOrd + Copy, R: MetricValue>(scores: &[S], labels: &[bool]) -> Result<R> {
    let (steps, positives) = sweep(scores, labels)?;
    if positives == 0 {
        return Err(Error::Metric("average precision needs a positive".into()));
    }
    let mut ap = R::zero();
    for &(tp, fp, pos) in &steps {
        if pos > 0 {
            ap = ap + R::ratio(pos, positives) * R::ratio(tp, tp + fp);
        }
    }
    Ok(ap)
}

/// Best F1 over thresholds at the distinct scores (positive iff `score ≥ t`).
pub fn f1_max<S: PartialOrd + Copy, R: MetricValue>(scores: &[S], labels: &[bool]) -> Result<R> {
    let (steps, positives) = sweep(scores, labels)?;
    if positives == 0 {
        return Err(Error::Metric("F1 needs a positive".into()));
    }
    let best = steps
        .iter()
        .fold(None, |best, &(tp, fp, _)| max_of(best, R::ratio(2 * tp, tp + fp + positives)));
    Ok(best.expect("non-empty sweep"))
}

/// Best intersection-over-union of `{score ≥ t}` with the positive set.
pub fn iou_max<S: PartialOrd + Copy, R: MetricValue>(scores: &[S], labels: &[bool]) -> Result<R> {
    let (steps, positives) = sweep(scores, labels)?;
    if positives == 0 {
        return Err(Error::Metric("IoU needs a non-empty ground truth".into()));
    }
    let best = steps
        .iter()
        .fold(None, |best, &(tp, fp, _)| max_of(best, R::ratio(tp, positives + fp)));
    Ok(best.expect("non-empty sweep"))
}

/// Mean per-image IoU under one shared threshold, maximized over the
/// threshold. Images without ground truth are skipped.
pub fn iou_max_per_image<S: PartialOrd + Copy, R: MetricValue>(
    scores: &[&[S]],
    labels: &[&[bool]],
) -> Result<R> {
    if scores.len() != labels.len() {
        return Err(Error::Metric("score and mask counts differ".into()));
    }
    let mut flat_scores = Vec::new();
    let mut owner = Vec::new();
    let mut is_pos = Vec::new();
    let mut positives = Vec::new();
    for (s, l) in scores.iter().zip(labels) {
        check_scores(s, l.len())?;
        let p = l.iter().filter(|&&b| b).count() as u64;
        if p == 0 {
            continue;
        }
        let img = positives.len();
        positives.push(p);
        flat_scores.extend_from_slice(s);
        owner.extend(std::iter::repeat(img).take(s.len()));
        is_pos.extend_from_slice(l);
    }
    let k = positives.len() as u64;
    if k == 0 {
        return Err(Error::Metric("IoU needs a non-empty ground truth".into()));
    }
    let mut tp = vec![0u64; positives.len()];
    let mut fp = vec![0u64; positives.len()];
    let iou = |tp: u64, fp: u64, p: u64| R::ratio(tp, p + fp);
    let mut sum = R::zero();
    let mut best = None;
    for g in descending_groups(&flat_scores) {
        for i in g {
            let j = owner[i];
            sum = sum - iou(tp[j], fp[j], positives[j]);
            if is_pos[i] {
                tp[j] += 1;
            } else {
                fp[j] += 1;
            }
            sum = sum + iou(tp[j], fp[j], positives[j]);
        }
        best = max_of(best, sum.clone() / R::ratio(k, 1));
    }
    Ok(best.expect("non-empty sweep"))
}

/// 8-connected labeling of a row-major `h × w` mask. Background is 0;
/// regions are numbered from 1 in order of their first pixel.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, usize) {
    assert_eq!(mask.len(), h * w);
    let mut parent: Vec<usize> = (0..mask.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            let mut neighbours = [None; 4];
            if x > 0 {
                neighbours[0] = Some(i - 1);
            }
            if y > 0 {
                neighbours[2] = Some(i - w);
                if x > 0 {
                    neighbours[1] = Some(i - w - 1);
                }
                if x + 1 < w {
                    neighbours[3] = Some(i - w + 1);
                }
            }
            for n in neighbours.into_iter().flatten().filter(|&n| mask[n]) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, n));
                if a != b {
                    let (lo, hi) = (a.min(b), a.max(b));
                    parent[hi] = lo;
                }
            }
        }
    }
    let mut labels = vec![0u32; mask.len()];
    let mut root_label = vec![0u32; mask.len()];
    let mut count = 0;
    for i in 0..mask.len() {
        if mask[i] {
            let r = find(&mut parent, i);
            if root_label[r] == 0 {
                count += 1;
                root_label[r] = count as u32;
            }
            labels[i] = root_label[r];
        }
    }
    (labels, count)
}

/// Normalized area under the per-region-overlap curve up to `fpr_limit`.
///
/// `maps` and `masks` hold one row-major `h × w` image each. Thresholds are
/// the distinct scores in descending order; the curve starts at (0, 0) and
/// is integrated with the trapezoid rule, interpolating at the limit.
pub fn aupro<S: PartialOrd + Copy, R: MetricValue>(
    maps: &[&[S]],
    masks: &[&[bool]],
    shape: (usize, usize),
    fpr_limit: R,
) -> Result<R> {
    if maps.len() != masks.len() {
        return Err(Error::Metric("map and mask counts differ".into()));
    }
    if !(fpr_limit > R::zero() && fpr_limit <= R::one()) {
        return Err(Error::Metric(format!("FPR limit {fpr_limit:?} not in (0, 1]")));
    }
    let (h, w) = shape;
    let mut scores = Vec::with_capacity(maps.len() * h * w);
    // region id per pixel, 0 for normal pixels
    let mut region = Vec::with_capacity(scores.capacity());
    let mut sizes: Vec<u64> = vec![0];
    for (m, k) in maps.iter().zip(masks) {
        if m.len() != h * w || k.len() != h * w {
            return Err(Error::Metric(format!("image does not match {h}x{w}")));
        }
        check_scores(m, k.len())?;
        let (labels, count) = connected_components(k, h, w);
        let base = sizes.len() - 1;
        sizes.extend(std::iter::repeat(0).take(count));
        for &l in &labels {
            let id = if l == 0 { 0 } else { base + l as usize };
            sizes[id] += 1;
            region.push(id);
        }
        scores.extend_from_slice(m);
    }
    let regions = sizes.len() - 1;
    let negatives = sizes[0];
    if regions == 0 {
        return Err(Error::Metric("AUPRO needs at least one ground-truth region".into()));
    }
    if negatives == 0 {
        return Err(Error::Metric("AUPRO needs anomaly-free pixels".into()));
    }
    let two = R::one() + R::one();
    let region_weight: Vec<R> = sizes.iter().map(|&s| R::ratio(1, s.max(1))).collect();
    let mut overlap_sum = R::zero();
    let mut fp = 0u64;
    let (mut prev_fpr, mut prev_pro) = (R::zero(), R::zero());
    let mut area = R::zero();
    for g in descending_groups(&scores) {
        for i in g {
            match region[i] {
                0 => fp += 1,
                r => overlap_sum = overlap_sum.clone() + region_weight[r].clone(),
            }
        }
        let fpr = R::ratio(fp, negatives);
        let pro = overlap_sum.clone() / R::ratio(regions as u64, 1);
        if fpr >= fpr_limit {
            let t = (fpr_limit.clone() - prev_fpr.clone()) / (fpr - prev_fpr.clone());
            let at_limit = prev_pro.clone() + t * (pro - prev_pro.clone());
            area = area + (fpr_limit.clone() - prev_fpr) * (prev_pro + at_limit) / two;
            return Ok(area / fpr_limit);
        }
        area = area + (fpr.clone() - prev_fpr) * (prev_pro + pro.clone()) / two.clone();
        (prev_fpr, prev_pro) = (fpr, pro);
    }
    unreachable!("the lowest threshold marks every pixel, so FPR reaches 1")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub auroc: f64,
    pub ap: f64,
    pub f1_max: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub auroc: f64,
    pub ap: f64,
    pub f1_max: f64,
    pub aupro: f64,
    pub iou_max: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IouMode {
    #[default]
    Pooled,
    PerImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub fpr_limit: f64,
    pub iou_mode: IouMode,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            fpr_limit: 0.3,
            iou_mode: IouMode::Pooled,
        }
    }
}

/// Scored test images of one category.
#[derive(Clone, Debug, Default)]
pub struct CategoryScores {
    pub name: String,
    pub image_scores: Vec<f64>,
    pub image_labels: Vec<bool>,
    /// `[H, W]` maps; empty when pixel metrics are skipped
    pub maps: Vec<Vec<f32>>,
    pub masks: Vec<Vec<bool>>,
    pub shape: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub name: String,
    pub image: ImageMetrics,
    pub pixel: Option<PixelMetrics>,
}

impl CategoryMetrics {
    pub fn evaluate(scores: &CategoryScores, cfg: &MetricsConfig) -> Result<Self> {
        let (s, l) = (&scores.image_scores, &scores.image_labels);
        let image = ImageMetrics {
            auroc: auroc(s, l)?,
            ap: average_precision(s, l)?,
            f1_max: f1_max(s, l)?,
        };
        let pixel = if scores.maps.is_empty() {
            log::info!("{}: no masks, pixel metrics skipped", scores.name);
            None
        } else {
            let flat_s: Vec<f32> = scores.maps.concat();
            let flat_l: Vec<bool> = scores.masks.concat();
            let maps: Vec<&[f32]> = scores.maps.iter().map(Vec::as_slice).collect();
            let masks: Vec<&[bool]> = scores.masks.iter().map(Vec::as_slice).collect();
            Some(PixelMetrics {
                auroc: auroc(&flat_s, &flat_l)?,
                ap: average_precision(&flat_s, &flat_l)?,
                f1_max: f1_max(&flat_s, &flat_l)?,
                aupro: aupro(&maps, &masks, scores.shape, cfg.fpr_limit)?,
                iou_max: match cfg.iou_mode {
                    IouMode::Pooled => iou_max(&flat_s, &flat_l)?,
                    IouMode::PerImage => iou_max_per_image(&maps, &masks)?,
                },
            })
        };
        Ok(Self {
            name: scores.name.clone(),
            image,
            pixel,
        })
    }

    fn values(&self) -> Vec<Option<f64>> {
        let p = self.pixel;
        vec![
            Some(self.image.auroc),
            Some(self.image.ap),
            Some(self.image.f1_max),
            p.map(|p| p.auroc),
            p.map(|p| p.ap),
            p.map(|p| p.f1_max),
            p.map(|p| p.aupro),
            p.map(|p| p.iou_max),
        ]
    }
}

/// Per-category rows plus their macro average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub categories: Vec<CategoryMetrics>,
}

pub const REPORT_HEADER: &str = "category,image_mAUROC,image_mAP,image_mF1max,pixel_mAUROC,pixel_mAP,pixel_mF1max,pixel_mAUPRO,pixel_mIoUmax,Avg";

impl MetricsReport {
    /// Mean of each column over the categories that have it.
    pub fn macro_average(&self) -> Vec<Option<f64>> {
        let rows: Vec<_> = self.categories.iter().map(CategoryMetrics::values).collect();
        (0..8)
            .map(|c| {
                let vals: Vec<f64> = rows.iter().filter_map(|r| r[c]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect()
    }

    pub fn mean_image_auroc(&self) -> f64 {
        self.macro_average()[0].unwrap_or(f64::NAN)
    }

    pub fn mean_pixel_aupro(&self) -> Option<f64> {
        self.macro_average()[6]
    }

    pub fn mean_pixel_auroc(&self) -> Option<f64> {
        self.macro_average()[3]
    }

    pub fn to_csv(&self) -> String {
        fn row(out: &mut String, name: &str, values: &[Option<f64>]) {
            out.push_str(name);
            for v in values {
                match v {
                    Some(v) => write!(out, ",{v:.6}").unwrap(),
                    None => out.push(','),
                }
            }
            let present: Vec<f64> = values.iter().flatten().copied().collect();
            let avg = present.iter().sum::<f64>() / present.len().max(1) as f64;
            writeln!(out, ",{avg:.6}").unwrap();
        }
        let mut out = format!("{REPORT_HEADER}\n");
        for c in &self.categories {
            row(&mut out, &c.name, &c.values());
        }
        row(&mut out, "Avg", &self.macro_average());
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
