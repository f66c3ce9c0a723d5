//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::ndnum::tape::{Tape, Var};
use crate::ndnum::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_relative_error: f64,
    /// (input index, flat coordinate) where the maximum occurred
    pub worst: Option<(usize, usize)>,
    /// Kink margin of the forward pass at the base point.
    pub kink_margin: f64,
    pub value: f64,
}

fn evaluate<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.scalar_value(out)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of `f` w.r.t. every input against central
/// differences with the given step.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.scalar_value(out)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {value}")));
    }
    tape.backward(out)?;
    let kink_margin = tape.kink_margin();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        kink_margin,
        value,
    };
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        let analytic = tape
            .grad(vars[ti])
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        for j in 0..x.len() {
            let orig = x.data()[j];
            probe[ti].data_mut()[j] = orig + step;
            let up = evaluate(&f, &probe)?;
            probe[ti].data_mut()[j] = orig - step;
            let down = evaluate(&f, &probe)?;
            probe[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((ti, j));
            }
        }
    }
    Ok(report)
}

/// Single-input convenience wrapper returning the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vs| f(tape, vs[0]), std::slice::from_ref(x), step)
        .map(|r| r.max_relative_error)
}
