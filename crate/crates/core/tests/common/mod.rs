//! Oracles and harnesses shared by the integration tests and the
//! acceptance report. Everything here is written against plain formulas,
//! not against the library's own helpers.

#![allow(dead_code)]

use std::collections::VecDeque;

use dualrd::cmm::MemoryConfig;
use dualrd::model::ModelConfig;
use dualrd::network::{Network, TrainBatch};
use dualrd::{Result, Scalar, Tape, Tensor, Var};
use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values with magnitude in [0.2, 1] and random sign, away from kinks at 0.
pub fn signed_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn probe_weights<T: Scalar>(shape: Vec<usize>) -> Tensor<T> {
    Tensor::from_fn(shape, |i| T::of((1.3 * i as f64 + 0.4).sin() + 0.25))
}

/// Reduces any output to a scalar with fixed, uneven weights so every
/// output entry contributes a distinct amount.
pub fn probe<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let w = x.tape().constant(probe_weights(x.shape()));
    Ok(x.mul(&w)?.sum())
}

pub type Loss64 = Box<dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>>;
pub type Loss32 = Box<dyn for<'t> Fn(&[Var<'t, f32>]) -> Result<Var<'t, f32>>>;

pub fn hr64<F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static>(f: F) -> Loss64 {
    Box::new(f)
}

pub fn hr32<F: for<'t> Fn(&[Var<'t, f32>]) -> Result<Var<'t, f32>> + 'static>(f: F) -> Loss32 {
    Box::new(f)
}

/// A differentiable function under test, in both precisions.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f64: Loss64,
    pub f32: Loss32,
}

/// Builds an [`OpCase`] from one body, compiled once per precision.
#[macro_export]
macro_rules! op_case {
    ($name:expr, $inputs:expr, |$v:ident| $body:expr) => {
        $crate::common::OpCase {
            name: $name,
            inputs: $inputs,
            f64: $crate::common::hr64(move |$v| $body),
            f32: $crate::common::hr32(move |$v| $body),
        }
    };
}

fn relative(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Fourth-order central difference of the float64 function at every entry
/// of every input.
pub fn numeric_gradient(inputs: &[Tensor<f64>], f: &Loss64, h: f64) -> Vec<Tensor<f64>> {
    let eval = |xs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        f(&vars).expect("forward").value().item()
    };
    let mut probe = inputs.to_vec();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            let mut at = |dx: f64| {
                probe[i].data_mut()[j] = x + dx;
                eval(&probe)
            };
            g.data_mut()[j] = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            probe[i].data_mut()[j] = x;
        }
        out.push(g);
    }
    out
}

pub fn analytic_gradient<T: Scalar>(
    inputs: &[Tensor<f64>],
    f: &dyn for<'t> Fn(&[Var<'t, T>]) -> Result<Var<'t, T>>,
) -> Vec<Tensor<f64>> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.cast::<T>(), true)).collect();
    let loss = f(&vars).expect("forward");
    let grads = tape.backward(&loss).expect("backward");
    vars.iter().map(|v| grads.wrt(v).cast::<f64>()).collect()
}

pub fn max_relative_error(a: &[Tensor<f64>], b: &[Tensor<f64>], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(&p, &q)| relative(p, q, floor)))
        .fold(0.0, f64::max)
}

/// Worst relative error of (float64 backward, float32 backward) against the
/// float64 central difference.
pub fn check_case(case: &OpCase) -> (f64, f64) {
    let numeric = numeric_gradient(&case.inputs, &case.f64, 1e-4);
    let a64 = analytic_gradient::<f64>(&case.inputs, &*case.f64);
    let a32 = analytic_gradient::<f32>(&case.inputs, &*case.f32);
    (
        max_relative_error(&a64, &numeric, 1e-6),
        max_relative_error(&a32, &numeric, 1e-3),
    )
}

/// Every differentiable primitive plus the composite loss building blocks.
pub fn op_cases() -> Vec<OpCase> {
    use dualrd::cmm::{classification_loss, retrieve};
    use dualrd::losses::{alignment_loss, discrepancy_loss, mined_mean};

    let mut r = rng(17);
    let mut u = |shape: &[usize]| uniform(shape, -1.0, 1.0, &mut r);
    let a234 = u(&[2, 3, 4]);
    let b4 = u(&[4]);
    let a23 = u(&[2, 3]);
    let b21 = u(&[2, 1]);
    let c131 = u(&[1, 3, 1]);
    let d345 = u(&[3, 4, 5]);
    let m54 = u(&[5, 4]);
    let m242 = u(&[2, 4, 2]);
    let s253 = u(&[2, 5, 3]);
    let ln_x = u(&[2, 3, 6]);
    let ln_g = u(&[6]);
    let ln_b = u(&[6]);
    let cos_a = u(&[2, 4, 3, 3]);
    let cos_b = u(&[2, 4, 3, 3]);
    let img = u(&[1, 2, 3, 5]);
    let logits = uniform(&[2, 3, 6], -2.0, 2.0, &mut rng(5));
    let tokens = u(&[2, 5, 4]);
    let protos = u(&[7, 4]);
    let maps: Vec<Tensor<f64>> = (0..3).map(|k| uniform(&[2, 4, 4], 0.0, 1.0, &mut rng(9 + k))).collect();
    let preds: Vec<Tensor<f64>> = (0..4).map(|k| uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng(30 + k))).collect();
    let kinked = signed_away_from_zero(&[3, 5], &mut rng(4));
    let positive = uniform(&[3, 4], 0.5, 2.0, &mut rng(6));
    let denom = uniform(&[2, 3], 1.0, 2.0, &mut rng(7));

    vec![
        op_case!("add (broadcast)", vec![a234.clone(), b4.clone()], |v| probe(v[0].add(&v[1])?)),
        op_case!("sub (broadcast)", vec![a23.clone(), b21.clone()], |v| probe(v[0].sub(&v[1])?)),
        op_case!("mul (broadcast)", vec![a234.clone(), c131.clone()], |v| probe(v[0].mul(&v[1])?)),
        op_case!("div", vec![a23.clone(), denom.clone()], |v| probe(v[0].div(&v[1])?)),
        op_case!("add_scalar", vec![a23.clone()], |v| probe(v[0].add_scalar(0.7))),
        op_case!("mul_scalar", vec![a23.clone()], |v| probe(v[0].mul_scalar(-1.7))),
        op_case!("div_scalar", vec![a23.clone()], |v| probe(v[0].div_scalar(3.0))),
        op_case!("neg", vec![a23.clone()], |v| probe(v[0].neg())),
        op_case!("abs", vec![kinked.clone()], |v| probe(v[0].abs())),
        op_case!("relu", vec![kinked.clone()], |v| probe(v[0].relu())),
        op_case!("gelu", vec![a234.clone()], |v| probe(v[0].gelu())),
        op_case!("exp", vec![a23.clone()], |v| probe(v[0].exp())),
        op_case!("log", vec![positive.clone()], |v| probe(v[0].log())),
        op_case!("matmul", vec![d345.clone(), m54.clone()], |v| probe(v[0].matmul(&v[1])?)),
        op_case!("matmul (batched)", vec![a234.clone(), m242.clone()], |v| probe(v[0].matmul(&v[1])?)),
        op_case!("softmax", vec![s253.clone()], |v| probe(v[0].softmax(1)?)),
        op_case!("log_softmax", vec![s253.clone()], |v| probe(v[0].log_softmax(2)?)),
        op_case!("layer_norm", vec![ln_x.clone(), ln_g.clone(), ln_b.clone()], |v| probe(
            v[0].layer_norm(&v[1], &v[2], 2)?
        )),
        op_case!("sum", vec![a234.clone()], |v| Ok(v[0].mul(&v[0])?.sum())),
        op_case!("mean", vec![a234.clone()], |v| Ok(v[0].mul(&v[0])?.mean())),
        op_case!("sum_axis", vec![a234.clone()], |v| probe(v[0].sum_axis(1)?)),
        op_case!("mean_axis", vec![a234.clone()], |v| probe(v[0].mean_axis(0)?)),
        op_case!("max (axis)", vec![a234.clone()], |v| probe(v[0].max(Some(2))?)),
        op_case!("max (all)", vec![a234.clone()], |v| probe(v[0].max(None)?)),
        op_case!("reshape", vec![a234.clone()], |v| probe(v[0].reshape(vec![4, 6])?)),
        op_case!("permute", vec![a234.clone()], |v| probe(v[0].permute(&[2, 0, 1])?)),
        op_case!("transpose_last", vec![a234.clone()], |v| probe(v[0].transpose_last()?)),
        op_case!("cosine_distance", vec![cos_a.clone(), cos_b.clone()], |v| probe(
            v[0].cosine_distance(&v[1], 1)?
        )),
        op_case!("l2_normalize", vec![a234.clone()], |v| probe(v[0].l2_normalize(2)?)),
        op_case!("bilinear_resize (up)", vec![img.clone()], |v| probe(v[0].bilinear_resize((7, 4))?)),
        op_case!("bilinear_resize (down)", vec![img.clone()], |v| probe(v[0].bilinear_resize((2, 3))?)),
        op_case!("hard_shrink", vec![logits.clone()], |v| probe(
            v[0].softmax(2)?.hard_shrink(1.0 / 6.0, 1e-12)?
        )),
        op_case!("retrieval", vec![tokens.clone(), protos.clone()], |v| {
            let r = retrieve(&v[0], &v[1], 1.0 / 7.0, 1e-12)?;
            probe(r.features)
        }),
        op_case!("classification loss", vec![logits.clone()], |v| classification_loss(&v[0], &[1, 0])),
        op_case!("mined mean", vec![maps[0].clone()], |v| mined_mean(&v[0], 0.5)),
        op_case!(
            "alignment loss",
            preds.clone(),
            |v| alignment_loss(&v[0..2], &v[2..4], 0.5)
        ),
        op_case!("discrepancy loss", maps.clone(), |v| discrepancy_loss(v, &striped_mask())),
    ]
}

fn striped_mask<T: Scalar>() -> Tensor<T> {
    Tensor::from_fn(vec![2, 8, 8], |i| if (i * 7) % 5 < 2 { T::one() } else { T::zero() })
}

pub fn tiny_model() -> (ModelConfig, MemoryConfig) {
    (
        ModelConfig {
            image_size: 8,
            patch_size: 2,
            embed_dim: 8,
            num_heads: 2,
            num_classes: 2,
            seed: 11,
            ..ModelConfig::default()
        },
        MemoryConfig {
            slots: 6,
            ..MemoryConfig::default()
        },
    )
}

/// Normal images, anomalous images, masks and labels for a two-image batch.
pub fn tiny_batch() -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Vec<usize>) {
    let mut r = rng(23);
    let normal = uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut r);
    let mask = Tensor::from_fn(vec![2, 8, 8], |i| {
        let (b, y, x) = (i / 64, i / 8 % 8, i % 8);
        if (2..5 + b).contains(&y) && (3..6).contains(&x) {
            1.0
        } else {
            0.0
        }
    });
    let mut anomalous = normal.clone();
    for i in 0..anomalous.len() {
        let (b, p) = (i / 192, i % 64);
        if mask.data()[b * 64 + p] > 0.5 {
            anomalous.data_mut()[i] = r.random_range(-2.0..2.0);
        }
    }
    (normal, anomalous, mask, vec![0, 1])
}

/// Which objective a finite difference is taken of.
#[derive(Clone, Copy, PartialEq)]
pub enum Objective {
    Total,
    /// reconstruction + classification: the only terms through which the
    /// prototypes receive gradient, since the anomaly branch stops it
    NormalBranch,
}

pub fn objective<T: Scalar>(
    net: &Network<T>,
    batch: &(Tensor<T>, Tensor<T>, Tensor<T>, Vec<usize>),
    which: Objective,
) -> f64 {
    let tape = Tape::new();
    let p = net.params.bind(&tape);
    let b = TrainBatch {
        normal: &batch.0,
        anomalous: &batch.1,
        masks: &batch.2,
        labels: &batch.3,
    };
    let t = net.training_losses(&p, &b, 0.5).expect("losses").terms;
    let v = match which {
        Objective::Total => t.total().expect("finite").0,
        Objective::NormalBranch => t.rec.add(&t.cls).unwrap(),
    };
    v.value().item().f64()
}

fn cast_batch<T: Scalar>(b: &(Tensor<f64>, Tensor<f64>, Tensor<f64>, Vec<usize>)) -> (Tensor<T>, Tensor<T>, Tensor<T>, Vec<usize>) {
    (b.0.cast(), b.1.cast(), b.2.cast(), b.3.clone())
}

/// Worst relative error of the full training objective's parameter
/// gradients (float64, float32) against float64 central differences, over
/// `per_param` evenly spaced entries of every trainable tensor.
pub fn composed_loss_check(per_param: usize) -> (f64, f64, usize) {
    let (m, mem) = tiny_model();
    let mut net = Network::<f64>::new(&m, &mem).expect("network");
    // start the class logits away from zero so every branch carries signal
    let logits = net.bank.class_logits;
    let shape = net.params.get(logits).shape().to_vec();
    net.params.set(logits, uniform(&shape, -0.5, 0.5, &mut rng(2))).unwrap();
    let batch = tiny_batch();

    let analytic = |net32: bool| -> Vec<(dualrd::params::ParamId, Tensor<f64>)> {
        if net32 {
            let mut n = Network::<f32>::new(&m, &mem).unwrap();
            n.params = net.params.cast();
            grads_of(&n, &cast_batch(&batch))
        } else {
            grads_of(&net, &batch)
        }
    };
    let a64 = analytic(false);
    let a32 = analytic(true);

    // fourth-order stencil: the step is wide enough to keep roundoff on the
    // O(10) loss near 1e-10, the stencil keeps truncation below that
    let h = 1e-5;
    let (mut worst64, mut worst32, mut checked) = (0.0f64, 0.0f64, 0);
    let mut probe = net.clone();
    for ((id, g64), (_, g32)) in a64.iter().zip(&a32) {
        let which = if *id == net.bank.prototypes {
            Objective::NormalBranch
        } else {
            Objective::Total
        };
        let len = g64.len();
        let picks: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            (0..per_param).map(|k| k * len / per_param + len / per_param / 2).collect()
        };
        for j in picks {
            let x = net.params.get(*id).data()[j];
            let mut at = |dx: f64| {
                probe.params.get_mut(*id).data_mut()[j] = x + dx;
                objective(&probe, &batch, which)
            };
            let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            probe.params.get_mut(*id).data_mut()[j] = x;
            worst64 = worst64.max(relative(g64.data()[j], numeric, 1e-4));
            worst32 = worst32.max(relative(g32.data()[j], numeric, 1e-3));
            checked += 1;
        }
    }
    (worst64, worst32, checked)
}

fn grads_of<T: Scalar>(
    net: &Network<T>,
    batch: &(Tensor<T>, Tensor<T>, Tensor<T>, Vec<usize>),
) -> Vec<(dualrd::params::ParamId, Tensor<f64>)> {
    let tape = Tape::new();
    let p = net.params.bind(&tape);
    let b = TrainBatch {
        normal: &batch.0,
        anomalous: &batch.1,
        masks: &batch.2,
        labels: &batch.3,
    };
    let out = net.training_losses(&p, &b, 0.5).unwrap();
    let (total, _) = out.terms.total().unwrap();
    let grads = tape.backward(&total).unwrap();
    net.params
        .trainable_ids()
        .into_iter()
        .map(|id| {
            let g = grads
                .get(&p[id])
                .map(|g| g.cast::<f64>())
                .unwrap_or_else(|| Tensor::zeros(net.params.get(id).shape().to_vec()));
            (id, g)
        })
        .collect()
}

/// Largest |dL/dM| and |dL/dP| from the anomaly-branch losses and from the
/// normal-branch losses of one step, in that order.
pub fn memory_gradients() -> [f64; 4] {
    let (m, mem) = tiny_model();
    let mut net = Network::<f64>::new(&m, &mem).unwrap();
    let logits = net.bank.class_logits;
    let shape = net.params.get(logits).shape().to_vec();
    net.params.set(logits, uniform(&shape, -0.5, 0.5, &mut rng(2))).unwrap();
    let batch = tiny_batch();
    let largest = |anomaly: bool| -> (f64, f64) {
        let tape = Tape::new();
        let p = net.params.bind(&tape);
        let b = TrainBatch {
            normal: &batch.0,
            anomalous: &batch.1,
            masks: &batch.2,
            labels: &batch.3,
        };
        let t = net.training_losses(&p, &b, 0.5).unwrap().terms;
        let loss = if anomaly {
            t.restoration.add(&t.identity).unwrap().add(&t.dist).unwrap()
        } else {
            t.rec.add(&t.cls).unwrap()
        };
        let grads = tape.backward(&loss).unwrap();
        let max_abs = |id| {
            grads
                .get(&p[id])
                .map(|g| g.data().iter().fold(0.0f64, |a, v| a.max(v.abs())))
                .unwrap_or(0.0)
        };
        (max_abs(net.bank.prototypes), max_abs(net.bank.class_logits))
    };
    let (am, ap) = largest(true);
    let (nm, np) = largest(false);
    [am, ap, nm, np]
}

// ---------------------------------------------------------------------------
// loss oracles

fn cosine_distance_at(a: &Tensor<f64>, b: &Tensor<f64>, n: usize, y: usize, x: usize) -> f64 {
    let s = a.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let i = ((n * c + k) * h + y) * w + x;
        dot += a.data()[i] * b.data()[i];
        na += a.data()[i] * a.data()[i];
        nb += b.data()[i] * b.data()[i];
    }
    1.0 - dot / (na.sqrt() * nb.sqrt() + 1e-8)
}

/// Σ over stages of the mean of the ⌈ρ·hw⌉ largest per-location cosine
/// distances of each image.
pub fn direct_alignment(pred: &[Tensor<f64>], target: &[Tensor<f64>], rho: f64) -> f64 {
    let mut total = 0.0;
    for (a, b) in pred.iter().zip(target) {
        let s = a.shape();
        let (bs, h, w) = (s[0], s[2], s[3]);
        let keep = ((rho * (h * w) as f64).ceil() as usize).max(1);
        let mut sum = 0.0;
        for n in 0..bs {
            let mut d: Vec<f64> = (0..h * w).map(|i| cosine_distance_at(a, b, n, i / w, i % w)).collect();
            d.sort_by(|x, y| y.partial_cmp(x).unwrap());
            sum += d[..keep].iter().sum::<f64>();
        }
        total += sum / (bs * keep) as f64;
    }
    total
}

/// Σ over stages of mean |map − block-averaged mask|.
pub fn direct_discrepancy(maps: &[Tensor<f64>], mask: &Tensor<f64>) -> f64 {
    let (bs, hh, ww) = (mask.shape()[0], mask.shape()[1], mask.shape()[2]);
    let mut total = 0.0;
    for m in maps {
        let (h, w) = (m.shape()[1], m.shape()[2]);
        let (fy, fx) = (hh / h, ww / w);
        let mut sum = 0.0;
        for n in 0..bs {
            for y in 0..h {
                for x in 0..w {
                    let mut block = 0.0;
                    for dy in 0..fy {
                        for dx in 0..fx {
                            block += mask.data()[(n * hh + y * fy + dy) * ww + x * fx + dx];
                        }
                    }
                    let target = block / (fy * fx) as f64;
                    sum += (m.data()[(n * h + y) * w + x] - target).abs();
                }
            }
        }
        total += sum / (bs * h * w) as f64;
    }
    total
}

/// Token-averaged cross-entropy of `[bs, T, D]` logits against image labels.
pub fn direct_cross_entropy(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let s = logits.shape();
    let (bs, t, d) = (s[0], s[1], s[2]);
    let mut sum = 0.0;
    for n in 0..bs {
        for k in 0..t {
            let row = &logits.data()[(n * t + k) * d..(n * t + k + 1) * d];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            sum += z.ln() - row[labels[n]];
        }
    }
    sum / (bs * t) as f64
}

// ---------------------------------------------------------------------------
// metric oracles, exact over rationals

pub fn r(num: usize, den: usize) -> Rational64 {
    Rational64::new(num as i64, den as i64)
}

/// Pairwise Mann-Whitney count.
pub fn brute_auroc(scores: &[i64], labels: &[bool]) -> Rational64 {
    let (mut twice, mut pairs) = (0, 0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1;
                twice += match si.cmp(&sj) {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    r(twice, 2 * pairs)
}

fn confusion(scores: &[i64], labels: &[bool], t: i64) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= t, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

fn distinct(scores: &[i64]) -> Vec<i64> {
    let mut t = scores.to_vec();
    t.sort_unstable_by(|a, b| b.cmp(a));
    t.dedup();
    t
}

/// Mean over positives of the precision at that positive's own score.
pub fn brute_average_precision(scores: &[i64], labels: &[bool]) -> Rational64 {
    let positives = labels.iter().filter(|&&l| l).count();
    let mut sum = Rational64::new(0, 1);
    for (&s, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        let (tp, fp, _) = confusion(scores, labels, s);
        sum += r(tp, tp + fp);
    }
    sum / Rational64::from(positives as i64)
}

pub fn brute_f1_max(scores: &[i64], labels: &[bool]) -> Rational64 {
    distinct(scores)
        .into_iter()
        .map(|t| {
            let (tp, fp, fn_) = confusion(scores, labels, t);
            r(2 * tp, 2 * tp + fp + fn_)
        })
        .max()
        .unwrap()
}

pub fn brute_iou_max(scores: &[i64], labels: &[bool]) -> Rational64 {
    distinct(scores)
        .into_iter()
        .map(|t| {
            let (tp, fp, fn_) = confusion(scores, labels, t);
            r(tp, tp + fp + fn_)
        })
        .max()
        .unwrap()
}

/// Mean per-image IoU at one shared threshold, images without ground truth
/// left out, maximized over thresholds.
pub fn brute_iou_max_per_image(maps: &[Vec<i64>], masks: &[Vec<bool>]) -> Rational64 {
    let all: Vec<i64> = maps.iter().flatten().copied().collect();
    let kept: Vec<usize> = (0..maps.len()).filter(|&i| masks[i].iter().any(|&m| m)).collect();
    distinct(&all)
        .into_iter()
        .map(|t| {
            let mut sum = Rational64::new(0, 1);
            for &i in &kept {
                let (tp, fp, fn_) = confusion(&maps[i], &masks[i], t);
                sum += r(tp, tp + fp + fn_);
            }
            sum / Rational64::from(kept.len() as i64)
        })
        .max()
        .unwrap()
}

/// 8-connected regions by breadth-first flood fill, in order of first pixel.
pub fn flood_regions(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut regions = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut region = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            region.push(i);
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    regions
}

/// Per-region overlap curve from (0, 0) over every distinct threshold,
/// trapezoid area up to `limit` (interpolated there), divided by `limit`.
pub fn brute_aupro(maps: &[Vec<i64>], masks: &[Vec<bool>], h: usize, w: usize, limit: Rational64) -> Rational64 {
    let regions: Vec<(usize, Vec<usize>)> = masks
        .iter()
        .enumerate()
        .flat_map(|(n, m)| flood_regions(m, h, w).into_iter().map(move |reg| (n, reg)))
        .collect();
    let negatives: usize = masks.iter().map(|m| m.iter().filter(|&&b| !b).count()).sum();
    let all: Vec<i64> = maps.iter().flatten().copied().collect();
    let mut curve = vec![(Rational64::new(0, 1), Rational64::new(0, 1))];
    for t in distinct(&all) {
        let fp: usize = maps
            .iter()
            .zip(masks)
            .map(|(m, k)| m.iter().zip(k).filter(|(&s, &g)| s >= t && !g).count())
            .sum();
        let mut pro = Rational64::new(0, 1);
        for (n, reg) in &regions {
            let hit = reg.iter().filter(|&&i| maps[*n][i] >= t).count();
            pro += r(hit, reg.len());
        }
        curve.push((r(fp, negatives), pro / Rational64::from(regions.len() as i64)));
    }
    let two = Rational64::from(2);
    let mut area = Rational64::new(0, 1);
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x1 >= limit {
            let y = y0 + (limit - x0) / (x1 - x0) * (y1 - y0);
            area += (limit - x0) * (y0 + y) / two;
            break;
        }
        area += (x1 - x0) * (y0 + y1) / two;
    }
    area / limit
}

/// Random scores in a small range, so ties are frequent, with both labels present.
pub fn random_instance(rng: &mut ChaCha8Rng, max_len: usize) -> (Vec<i64>, Vec<bool>) {
    loop {
        let n = rng.random_range(2..=max_len);
        let levels = rng.random_range(1..=6);
        let scores: Vec<i64> = (0..n).map(|_| rng.random_range(0..levels)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

/// One or two images of up to 16 pixels in total, with at least one
/// anomalous and one normal pixel overall.
pub fn random_images(rng: &mut ChaCha8Rng) -> (Vec<Vec<i64>>, Vec<Vec<bool>>, usize, usize) {
    loop {
        let count = rng.random_range(1..=2);
        let (h, w) = match (count, rng.random_range(0..3)) {
            (1, 0) => (4, 4),
            (1, 1) => (3, 5),
            (1, _) => (2, 7),
            (_, 0) => (2, 4),
            (_, 1) => (3, 2),
            _ => (1, 8),
        };
        let levels = rng.random_range(1..=8);
        let maps: Vec<Vec<i64>> = (0..count)
            .map(|_| (0..h * w).map(|_| rng.random_range(0..levels)).collect())
            .collect();
        let masks: Vec<Vec<bool>> = (0..count)
            .map(|_| (0..h * w).map(|_| rng.random_bool(0.35)).collect())
            .collect();
        let flat: Vec<bool> = masks.iter().flatten().copied().collect();
        if flat.iter().any(|&m| m) && flat.iter().any(|&m| !m) {
            return (maps, masks, h, w);
        }
    }
}

/// Runs `trials` random instances of every metric against its oracle and
/// returns the number of mismatches per metric name.
pub fn metric_oracle_mismatches(trials: usize, seed: u64) -> Vec<(&'static str, usize)> {
    use dualrd::metrics::{auroc, aupro, average_precision, connected_components, f1_max, iou_max, iou_max_per_image};
    let mut rng = rng(seed);
    let mut bad = [0usize; 7];
    for _ in 0..trials {
        let (s, l) = random_instance(&mut rng, 16);
        bad[0] += (auroc::<i64, Rational64>(&s, &l).unwrap() != brute_auroc(&s, &l)) as usize;
        bad[1] += (average_precision::<i64, Rational64>(&s, &l).unwrap() != brute_average_precision(&s, &l)) as usize;
        bad[2] += (f1_max::<i64, Rational64>(&s, &l).unwrap() != brute_f1_max(&s, &l)) as usize;
        bad[3] += (iou_max::<i64, Rational64>(&s, &l).unwrap() != brute_iou_max(&s, &l)) as usize;

        let (maps, masks, h, w) = random_images(&mut rng);
        let m: Vec<&[i64]> = maps.iter().map(|v| v.as_slice()).collect();
        let k: Vec<&[bool]> = masks.iter().map(|v| v.as_slice()).collect();
        bad[4] += (iou_max_per_image::<i64, Rational64>(&m, &k).unwrap() != brute_iou_max_per_image(&maps, &masks))
            as usize;
        for limit in [r(3, 10), r(1, 1)] {
            bad[5] += (aupro::<i64, Rational64>(&m, &k, (h, w), limit).unwrap()
                != brute_aupro(&maps, &masks, h, w, limit)) as usize;
        }
        for mask in &masks {
            let (labels, count) = connected_components(mask, h, w);
            let regions = flood_regions(mask, h, w);
            let mut agree = count == regions.len();
            for (n, reg) in regions.iter().enumerate() {
                agree &= reg.iter().all(|&i| labels[i] == n as u32 + 1);
            }
            agree &= mask.iter().zip(&labels).all(|(&m, &l)| m || l == 0);
            bad[6] += (!agree) as usize;
        }
    }
    vec![
        ("AUROC", bad[0]),
        ("AP", bad[1]),
        ("F1-max", bad[2]),
        ("IoU-max (pooled)", bad[3]),
        ("IoU-max (per image)", bad[4]),
        ("AUPRO", bad[5]),
        ("connected components", bad[6]),
    ]
}
