//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::Model;
use crate::seeding;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error used by every check: `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares the taped gradient of a scalar function against central
/// differences with step `h`, returning the worst coordinate's
/// [`relative_error`]. `f` must be deterministic.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), h)
}

/// [`gradient_check`] over several inputs at once; the worst coordinate of
/// any input is reported.
pub fn gradient_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    tape.backward(y)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|x| tape.leaf(x.clone())).collect();
        let y = f(&mut tape, &vars)?;
        tape.value(y).item()
    };
    numeric_worst(inputs, &analytic, h, eval)
}

/// Checks the gradient of the mean squared error of `model` on `(x, labels)`
/// with respect to every parameter, in evaluation mode.
pub fn model_gradient_check(model: &Model, x: &Tensor, labels: &Tensor, h: f64) -> Result<f64> {
    let loss = |m: &Model, tape: &mut Tape| -> Result<(Var, BTreeMap<String, Var>)> {
        let mut rng = seeding::rng_for(0, "gradcheck");
        let out = m.forward(tape, x, false, &mut rng)?;
        let y = tape.constant(labels.clone());
        let d = tape.sub(out.prediction, y)?;
        let sq = tape.mul(d, d)?;
        Ok((tape.mean(sq)?, out.params))
    };
    let mut tape = Tape::new();
    let (l, vars) = loss(model, &mut tape)?;
    tape.backward(l)?;
    let names: Vec<String> = model.params().keys().cloned().collect();
    let inputs: Vec<Tensor> = model.params().values().cloned().collect();
    let analytic: Vec<Tensor> = names
        .iter()
        .zip(&inputs)
        .map(|(n, x)| tape.grad(vars[n]).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut probe_model = model.clone();
    let eval = |probe: &[Tensor]| -> Result<f64> {
        for (n, t) in names.iter().zip(probe) {
            probe_model.params_mut().insert(n.clone(), t.clone());
        }
        let mut tape = Tape::new();
        let (l, _) = loss(&probe_model, &mut tape)?;
        tape.value(l).item()
    };
    numeric_worst(&inputs, &analytic, h, eval)
}

fn numeric_worst(
    inputs: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    mut eval: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
    }
    Ok(worst)
}
