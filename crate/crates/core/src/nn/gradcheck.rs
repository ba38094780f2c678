//! Central finite-difference gradient checking.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for the relative error, so that gradients that are zero
/// up to round-off compare on an absolute scale of about 1e-10.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of a check: the worst relative error and where it occurred.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the tape gradient of a scalar function of `inputs` against
/// central differences with step [`FD_STEP`].
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.gradients(out)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (input_idx, var) in vars.iter().enumerate() {
        let analytic = grads[var.index()]
            .clone()
            .unwrap_or_else(|| vec![0.0; inputs[input_idx].numel()]);
        for (i, &exact) in analytic.iter().enumerate() {
            let orig = inputs[input_idx].data()[i];
            work[input_idx].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work[input_idx].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work[input_idx].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(exact, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = input_idx;
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Same check over every scalar of every parameter in `store`; `loss`
/// builds the scalar objective from the store.
pub fn check_params<F>(store: &mut ParamStore, loss: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    tape.backward(out, store)?;
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(&mut tape, store)?;
        tape.value(out).item()
    };

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for (p, id) in ids.into_iter().enumerate() {
        for (i, &exact) in analytic[p].iter().enumerate() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(exact, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = p;
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
