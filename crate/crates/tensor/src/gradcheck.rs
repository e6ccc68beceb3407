//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Entries with both gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    Ok(f(&tape, &vars)?.value().item())
}

/// Compares the tape gradient of the scalar `f` at `inputs` with central
/// differences of step [`FD_STEP`], entry by entry.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_sampled(f, inputs, usize::MAX)
}

/// Like [`grad_check`] but probes at most `per_input` evenly strided
/// entries of each input, for models with many parameters.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor], per_input: usize) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut worst = (0, 0);
    let mut max_rel_error: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let stride = input.len().div_ceil(per_input.max(1)).max(1);
        for j in (0..input.len()).step_by(stride) {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[i].data()[j], numeric);
            if err > max_rel_error || err.is_nan() {
                max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                worst = (i, j);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
    })
}
