//! Central finite-difference gradient checks.
//!
//! Relative error of one input is `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`,
//! taken as 0 when both norms vanish.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Checks the gradient of `f` with respect to each of `inputs`; returns one
/// relative error per input.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut errors = Vec::with_capacity(inputs.len());
    for (which, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut xs = inputs.to_vec();
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            xs[which].data_mut()[i] = orig + step;
            let up = eval(&xs)?;
            xs[which].data_mut()[i] = orig - step;
            let down = eval(&xs)?;
            xs[which].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Checks the gradient of `f` with respect to every parameter of `store`;
/// returns `(name, relative error)` pairs.
pub fn check_params<F>(store: &ParamStore, step: f64, f: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    tape.backward(loss)?.accumulate_into(&tape, &mut work);
    let analytic: Vec<Vec<f64>> = work.iter().map(|p| p.grad.data().to_vec()).collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        Ok(t.value(l).item())
    };

    let mut out = Vec::new();
    let names: Vec<String> = work.iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.into_iter().enumerate() {
        let id = work.find(&name).expect("own parameter");
        let mut numeric = Vec::new();
        for i in 0..work.get(id).value.numel() {
            let orig = work.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        out.push((name, relative_error(&analytic[pi], &numeric)));
    }
    Ok(out)
}
