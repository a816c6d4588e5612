//! Central finite-difference verification of tape gradients (double precision).

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    /// max over coordinates of `|a − n| / max(1, |a|, |n|)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Which coordinates of each input are perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coords {
    All,
    /// At most this many evenly spaced coordinates per input.
    Spread(usize),
}

fn scalar_of(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss { shape: v.shape().to_vec() });
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "gradcheck" });
    }
    Ok(v)
}

fn evaluate<F>(f: &mut F, values: &[Tensor<f64>]) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)
}

/// Checks every coordinate of every input of `f`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_with(f, inputs, step, Coords::All)
}

pub fn gradcheck_with<F>(mut f: F, inputs: &[Tensor<f64>], step: f64, coords: Coords) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)?;
        let mut grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.len();
        let picks: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Spread(k) if k >= n => (0..n).collect(),
            Coords::Spread(k) => (0..k).map(|i| i * n / k).collect(),
        };
        for idx in picks {
            let orig = input.data()[idx];
            work[ti].data_mut()[idx] = orig + step;
            let plus = evaluate(&mut f, &work)?;
            work[ti].data_mut()[idx] = orig - step;
            let minus = evaluate(&mut f, &work)?;
            work[ti].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti].data()[idx];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, idx);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
