//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// magnitude below which errors are measured absolutely
    pub floor: f64,
    /// check at most this many evenly spaced entries per input
    pub max_entries: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error(analytic, numeric, floor);
        self.entries_checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            if err >= self.max_rel_error {
                self.worst = Some(Mismatch {
                    input,
                    index,
                    analytic,
                    numeric,
                });
            }
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries_checked += other.entries_checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.or(self.worst.take());
        }
    }
}

/// Entry indices visited for a tensor of `len` elements.
pub fn sample_indices(len: usize, max_entries: Option<usize>) -> Vec<usize> {
    match max_entries {
        Some(k) if k < len => (0..k).map(|i| i * len / k + (len / k) / 2).collect(),
        _ => (0..len).collect(),
    }
}

impl GradCheck {
    /// Compares backward gradients of the scalar `f(inputs)` with central
    /// differences, perturbing each checked entry by `±step`.
    pub fn run<T, F>(&self, inputs: &[Tensor<T>], f: F) -> Result<GradCheckReport>
    where
        T: Scalar,
        F: for<'t> Fn(&[Var<'t, T>]) -> Result<Var<'t, T>>,
    {
        let analytic = {
            let tape = Tape::new();
            let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let loss = f(&vars)?;
            let grads = tape.backward(&loss)?;
            vars.iter().map(|v| grads.wrt(v)).collect::<Vec<_>>()
        };
        let eval = |probe: &[Tensor<T>]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<_> = probe.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            Ok(f(&vars)?.value().item().f64())
        };
        let mut report = GradCheckReport::default();
        let mut probe = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            for idx in sample_indices(input.len(), self.max_entries) {
                let orig = input.data()[idx];
                probe[i].data_mut()[idx] = orig + T::of(self.step);
                let up = eval(&probe)?;
                probe[i].data_mut()[idx] = orig - T::of(self.step);
                let down = eval(&probe)?;
                probe[i].data_mut()[idx] = orig;
                let numeric = (up - down) / (2.0 * self.step);
                report.record(i, idx, analytic[i].data()[idx].f64(), numeric, self.floor);
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::<f64>::from_f64(vec![3], &[0.1, 0.7, 0.3]).unwrap();
        let ok = GradCheck::default()
            .run(&[x.clone()], |v| Ok(v[0].mul(&v[0])?.sum()))
            .unwrap();
        assert!(ok.max_rel_error < 1e-8);
        // stop_gradient hides the true derivative from the tape
        let bad = GradCheck::default()
            .run(&[x], |v| Ok(v[0].stop_gradient().mul(&v[0])?.sum()))
            .unwrap();
        assert!(bad.max_rel_error > 0.1);
    }

    #[test]
    fn sampling_is_even() {
        assert_eq!(sample_indices(10, Some(2)), vec![2, 7]);
        assert_eq!(sample_indices(3, Some(5)), vec![0, 1, 2]);
    }
}
