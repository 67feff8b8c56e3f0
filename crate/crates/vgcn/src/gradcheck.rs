//! Finite-difference gradient checking.
//!
//! Compares reverse-mode gradients against central finite differences:
//! `(f(x + h e_j) - f(x - h e_j)) / 2h`. The comparison step is exposed
//! separately so callers can also verify that deliberately corrupted
//! gradients are rejected.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-4;

/// One element whose analytic and numeric gradients disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    /// Which input tensor.
    pub input: usize,
    /// Flat element index within that input.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Relative error normalized by `max(|a|, |n|, 1)` so near-zero gradients
/// are compared absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Check the gradient of a scalar-valued function of several tensors.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let numeric = numeric_grads(&f, inputs, step)?;
    Ok(compare_grads(&analytic, &numeric, tol))
}

/// Reverse-mode gradients of `f` with respect to every input.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&tape, &leaves)?;
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check requires a scalar-valued function, got output shape {:?}",
            loss.shape()
        )));
    }
    tape.backward(&loss)?;
    Ok(leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect())
}

/// Central finite differences of `f` with respect to every input element.
pub fn numeric_grads<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::config(format!("step must be positive, got {step}")));
    }
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let out = f(&tape, ins)?;
        if out.numel() != 1 {
            return Err(Error::contract(format!(
                "grad_check requires a scalar-valued function, got output shape {:?}",
                out.shape()
            )));
        }
        Ok(out.values()[0])
    };
    let mut grads = Vec::with_capacity(inputs.len());
    for (ii, input) in inputs.iter().enumerate() {
        let mut g = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut plus = input.values().to_vec();
            let mut minus = plus.clone();
            plus[j] += step;
            minus[j] -= step;
            let mut ins_plus = inputs.to_vec();
            let mut ins_minus = inputs.to_vec();
            ins_plus[ii] = Tensor::new(input.shape().to_vec(), plus)?;
            ins_minus[ii] = Tensor::new(input.shape().to_vec(), minus)?;
            g[j] = (eval(&ins_plus)? - eval(&ins_minus)?) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Elementwise comparison; inputs must be the same shape family.
pub fn compare_grads(analytic: &[Vec<f64>], numeric: &[Vec<f64>], tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        mismatches: Vec::new(),
    };
    for (ii, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let e = rel_err(av, nv);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
            }
            if e > tol || !e.is_finite() {
                report.mismatches.push(GradMismatch {
                    input: ii,
                    index: j,
                    analytic: av,
                    numeric: nv,
                    rel_err: e,
                });
            }
        }
    }
    report
}
