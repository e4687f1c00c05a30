//! Class-aware memory: a bank of normal prototypes with per-prototype class
//! logits, read by sparse cosine attention.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::model::Init;
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub slots: usize,
    /// Shrinkage threshold; `None` means `1/slots`.
    pub lambda: Option<f64>,
    pub eps: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            slots: 500,
            lambda: None,
            eps: 1e-12,
        }
    }
}

impl MemoryConfig {
    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(1.0 / self.slots as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 {
            return Err(Error::InvalidArgument("memory needs at least one slot".into()));
        }
        let lambda = self.lambda();
        if !(0.0..1.0).contains(&lambda) || !(self.eps >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "shrinkage threshold {lambda} must lie in [0, 1) with eps >= 0"
            )));
        }
        let n = self.slots as f64;
        if !(1.0 / n - 1e-12..=3.0 / n + 1e-12).contains(&lambda) {
            log::warn!("shrinkage threshold {lambda} outside the usual [1/N, 3/N] range");
        }
        Ok(())
    }
}

/// Prototype matrix `[N, c]` and class-logit matrix `[N, D]` registered in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct MemoryBank {
    pub prototypes: ParamId,
    pub class_logits: ParamId,
    pub lambda: f64,
    pub eps: f64,
}

/// Shrunk retrieval weights and the features they assemble.
pub struct Retrieval<'t, T: Scalar> {
    pub features: Var<'t, T>,
    pub weights: Var<'t, T>,
}

impl MemoryBank {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        cfg: &MemoryConfig,
        dim: usize,
        classes: usize,
    ) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            prototypes: store.add("memory.prototypes", init.uniform(vec![cfg.slots, dim], bound), true),
            class_logits: store.add("memory.class_logits", Tensor::zeros(vec![cfg.slots, classes]), true),
            lambda: cfg.lambda(),
            eps: cfg.eps,
        }
    }

    pub fn retrieve<'t, T: Scalar>(&self, p: &Bound<'t, T>, tokens: &Var<'t, T>) -> Result<Retrieval<'t, T>> {
        retrieve(tokens, &p[self.prototypes], self.lambda, self.eps)
    }

    pub fn class_predict<'t, T: Scalar>(&self, p: &Bound<'t, T>, weights: &Var<'t, T>) -> Result<Var<'t, T>> {
        class_predict(weights, &p[self.class_logits])
    }
}

/// Softmax over prototypes of the cosine similarity between each token and
/// each prototype. `tokens: [.., c]`, `prototypes: [N, c]` → `[.., N]`.
pub fn attention_weights<'t, T: Scalar>(tokens: &Var<'t, T>, prototypes: &Var<'t, T>) -> Result<Var<'t, T>> {
    let rank = tokens.shape().len();
    let q = tokens.l2_normalize(rank - 1)?;
    let m = prototypes.l2_normalize(1)?;
    q.matmul(&m.transpose_last()?)?.softmax(rank - 1)
}

pub fn retrieve<'t, T: Scalar>(
    tokens: &Var<'t, T>,
    prototypes: &Var<'t, T>,
    lambda: f64,
    eps: f64,
) -> Result<Retrieval<'t, T>> {
    let weights = attention_weights(tokens, prototypes)?.hard_shrink(lambda, eps)?;
    Ok(Retrieval {
        features: weights.matmul(prototypes)?,
        weights,
    })
}

/// Token class logits `ŵ·P`.
pub fn class_predict<'t, T: Scalar>(weights: &Var<'t, T>, class_logits: &Var<'t, T>) -> Result<Var<'t, T>> {
    weights.matmul(class_logits)
}

/// Cross-entropy of token logits `[bs, T, D]` against one label per image,
/// averaged over every token.
pub fn classification_loss<'t, T: Scalar>(logits: &Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let (bs, tokens, classes) = (shape[0], shape[1], shape[2]);
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let one_hot = Tensor::from_fn(vec![bs, tokens, classes], |i| {
        let b = i / (tokens * classes);
        if i % classes == labels[b] {
            T::one()
        } else {
            T::zero()
        }
    });
    let picked = logits.log_softmax(2)?.mul(&logits.tape().constant(one_hot))?;
    Ok(picked.sum().mul_scalar(-1.0 / (bs * tokens) as f64))
}

/// Mean retrieval weight per prototype, accumulated per category.
#[derive(Clone, Debug)]
pub struct UtilizationStats {
    pub categories: Vec<String>,
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl UtilizationStats {
    pub fn new(categories: Vec<String>, slots: usize) -> Self {
        let n = categories.len();
        Self {
            categories,
            sums: vec![vec![0.0; slots]; n],
            counts: vec![0; n],
        }
    }

    /// Adds every token row of `weights: [.., N]` to `category`.
    pub fn add<T: Scalar>(&mut self, category: usize, weights: &Tensor<T>) -> Result<()> {
        let slots = self.sums[category].len();
        if weights.shape().last() != Some(&slots) {
            return Err(Error::ShapeMismatch {
                op: "utilization",
                lhs: weights.shape().to_vec(),
                rhs: vec![slots],
            });
        }
        for row in weights.data().chunks(slots) {
            for (acc, &w) in self.sums[category].iter_mut().zip(row) {
                *acc += w.f64();
            }
            self.counts[category] += 1;
        }
        Ok(())
    }

    /// Per-category mean usage; `None` for a category that saw no tokens.
    pub fn rows(&self) -> Vec<Option<Vec<f64>>> {
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &n)| (n > 0).then(|| s.iter().map(|v| v / n as f64).collect()))
            .collect()
    }

    /// `category,proto_0..proto_{N-1}`; empty categories are written as
    /// zeros and logged.
    pub fn to_csv(&self) -> String {
        let slots = self.sums.first().map_or(0, Vec::len);
        let mut out = String::from("category");
        for i in 0..slots {
            write!(out, ",proto_{i}").unwrap();
        }
        out.push('\n');
        for (name, row) in self.categories.iter().zip(self.rows()) {
            out.push_str(name);
            match row {
                Some(row) => row.iter().for_each(|v| write!(out, ",{v}").unwrap()),
                None => {
                    log::warn!("category {name} contributed no tokens; utilization row is zero");
                    (0..slots).for_each(|_| out.push_str(",0"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
