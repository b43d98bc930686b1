//! Central finite-difference checker for `f64` graphs.
//!
//! Evaluates the function on untaped perturbed copies of its inputs, so the
//! numeric side never touches the backward code it is checking.

use crate::error::Result;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Relative error denominator floor; keeps near-zero entries from dividing
/// finite-difference noise by nothing.
pub const DEFAULT_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks every entry of every input.
pub fn check_all<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    check_entries(inputs, f, &entries, DEFAULT_STEP, DEFAULT_FLOOR)
}

/// Checks the listed `(input, flat index)` entries.
pub fn check_entries<F>(
    inputs: &[Tensor<f64>],
    f: F,
    entries: &[(usize, usize)],
    step: f64,
    floor: f64,
) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tape = Tape::<f64>::new();
    let watched: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.watch(t)).collect();
    let grads = f(&watched)?.backward()?;
    let analytic: Vec<Vec<f64>> = watched.iter().map(|w| grads.get_or_zeros(w)).collect();

    let mut report = GradReport::default();
    let mut probe: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
    for &(i, j) in entries {
        let orig = probe[i].data()[j];
        probe[i].data_mut()[j] = orig + step;
        let plus = f(&probe)?.item();
        probe[i].data_mut()[j] = orig - step;
        let minus = f(&probe)?.item();
        probe[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i][j];
        let err = rel_err(a, numeric, floor);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some(Mismatch {
                input: i,
                index: j,
                analytic: a,
                numeric,
                rel_err: err,
            });
        }
    }
    Ok(report)
}
