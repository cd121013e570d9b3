//! Central finite-difference oracle for tape gradients.

use alloc::vec::Vec;

use crate::error::Result;
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / libm::fabs(numeric).max(1.0)
}

fn scalar_of(tape: &Tape<'_>, v: Var) -> Result<f64> {
    tape.value(v).item()
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `h`.
pub fn check_grad<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    check_grad_inputs(|tape, xs| f(tape, xs[0]), core::slice::from_ref(x), h)
}

/// [`check_grad`] over several inputs at once.
pub fn check_grad_inputs<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (which, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| alloc::vec![0.0; xs[which].len()]);
        for k in 0..xs[which].len() {
            let orig = xs[which].data()[k];
            probe[which].data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe[which].data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe[which].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k], numeric));
        }
    }
    Ok(worst)
}

/// Gradient check of a scalar function of model parameters.
///
/// `f` receives a tape already attached to a (possibly perturbed) copy of
/// `store`; only the parameters in `ids` are checked.
pub fn check_grad_params<F>(f: F, store: &ParamStore, ids: &[ParamId], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let out = f(&mut tape)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::with_params(store);
    let out = f(&mut tape)?;
    tape.backward(out)?;
    let grads = tape.param_grads();
    drop(tape);

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &id in ids {
        let analytic = grads
            .iter()
            .find(|(g_id, _)| *g_id == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| alloc::vec![0.0; store.get(id).len()]);
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            worst = worst.max(relative_error(analytic[k], (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}
