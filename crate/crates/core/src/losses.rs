//! Training objectives: per-location cosine alignment with hard-example
//! mining, the decoder discrepancy loss, and their unweighted sum.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{avg_pool, Tensor};

/// Number of locations kept out of `len` for mining fraction `rho`.
pub fn retained_count(len: usize, rho: f64) -> usize {
    ((rho * len as f64).ceil() as usize).clamp(1, len.max(1))
}

fn check_fraction(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("mining fraction {rho} not in (0, 1]")))
    }
}

/// 0/1 mask over the last two axes of `map` keeping, per plane, the
/// `⌈ρ·h·w⌉` largest entries. Ties go to the lower flat index.
pub fn hard_example_mask<T: Scalar>(map: &Tensor<T>, rho: f64) -> Result<Tensor<T>> {
    check_fraction(rho)?;
    let r = map.rank();
    if r < 2 {
        return Err(Error::InvalidArgument("hard_example_mask needs rank >= 2".into()));
    }
    let plane = map.shape()[r - 2] * map.shape()[r - 1];
    let keep = retained_count(plane, rho);
    let mut out = vec![T::zero(); map.len()];
    let mut order: Vec<usize> = Vec::with_capacity(plane);
    for (p, values) in map.data().chunks(plane.max(1)).enumerate() {
        order.clear();
        order.extend(0..values.len());
        // stable sort keeps index order among equal values
        order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
        for &i in &order[..keep.min(values.len())] {
            out[p * plane + i] = T::one();
        }
    }
    Tensor::new(map.shape().to_vec(), out)
}

/// Cosine distance over the channel axis of `[bs, c, h, w]` pairs, one
/// `[bs, h, w]` map per stage.
pub fn cosine_maps<'t, T: Scalar>(a: &[Var<'t, T>], b: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "{} stages against {} stages",
            a.len(),
            b.len()
        )));
    }
    a.iter().zip(b).map(|(x, y)| x.cosine_distance(y, 1)).collect()
}

/// Mean of `map` over the locations selected by [`hard_example_mask`].
pub fn mined_mean<'t, T: Scalar>(map: &Var<'t, T>, rho: f64) -> Result<Var<'t, T>> {
    let value = map.value();
    let mask = hard_example_mask(&value, rho)?;
    let shape = value.shape();
    let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
    let kept = value.len() / plane * retained_count(plane, rho);
    Ok(map.mul(&map.tape().constant(mask))?.sum().div_scalar(kept as f64))
}

/// `Σ_stages mined_mean(cos_distance(pred, target))`. Used for the
/// restoration, identity and reconstruction objectives.
pub fn alignment_loss<'t, T: Scalar>(pred: &[Var<'t, T>], target: &[Var<'t, T>], rho: f64) -> Result<Var<'t, T>> {
    let mut total: Option<Var<'t, T>> = None;
    for map in cosine_maps(pred, target)? {
        let term = mined_mean(&map, rho)?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("alignment loss over zero stages".into()))
}

/// `Σ_stages mean |map − avg_pool(mask)|`, with `mask: [bs, H, W]` pooled to
/// each map's resolution.
pub fn discrepancy_loss<'t, T: Scalar>(maps: &[Var<'t, T>], mask: &Tensor<T>) -> Result<Var<'t, T>> {
    let mut total: Option<Var<'t, T>> = None;
    for map in maps {
        let s = map.shape();
        let target = avg_pool(mask, (s[s.len() - 2], s[s.len() - 1]))?;
        let term = map.sub(&map.tape().constant(target))?.abs().mean();
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("discrepancy loss over zero stages".into()))
}

/// The five objectives of one training step, still on the tape.
pub struct LossTerms<'t, T: Scalar> {
    pub restoration: Var<'t, T>,
    pub identity: Var<'t, T>,
    pub dist: Var<'t, T>,
    pub rec: Var<'t, T>,
    pub cls: Var<'t, T>,
}

impl<'t, T: Scalar> LossTerms<'t, T> {
    pub fn named(&self) -> [(&'static str, &Var<'t, T>); 5] {
        [
            ("restoration", &self.restoration),
            ("identity", &self.identity),
            ("dist", &self.dist),
            ("rec", &self.rec),
            ("cls", &self.cls),
        ]
    }

    /// Unweighted sum; fails on the first non-finite component.
    pub fn total(&self) -> Result<(Var<'t, T>, LossReport)> {
        for (name, v) in self.named() {
            if !v.value().item().is_finite() {
                return Err(Error::NonFinite(format!("{name} loss")));
            }
        }
        let total = self
            .restoration
            .add(&self.identity)?
            .add(&self.dist)?
            .add(&self.rec)?
            .add(&self.cls)?;
        let get = |v: &Var<'t, T>| v.value().item().f64();
        let report = LossReport {
            restoration: get(&self.restoration),
            identity: get(&self.identity),
            dist: get(&self.dist),
            rec: get(&self.rec),
            cls: get(&self.cls),
            total: get(&total),
        };
        Ok((total, report))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub restoration: f64,
    pub identity: f64,
    pub dist: f64,
    pub rec: f64,
    pub cls: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,restoration,identity,dist,rec,cls,total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.restoration, self.identity, self.dist, self.rec, self.cls, self.total
        )
    }
}
