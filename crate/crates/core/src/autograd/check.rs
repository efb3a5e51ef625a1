//! Central finite-difference checking of recorded backward rules.

use super::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvWeights, Tensor};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(build: &F, inputs: &[Tensor<f64>], params: &[ConvWeights<f64>]) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var], &[ParamId]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let ids: Vec<ParamId> = params.iter().map(|p| tape.param(p)).collect();
    let out = build(&mut tape, &vars, &ids)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract("grad_check target must be scalar".into()));
    }
    Ok(v.data()[0])
}

fn param_scalar(w: &mut ConvWeights<f64>, e: usize) -> &mut f64 {
    let nk = w.kernel.numel();
    if e < nk {
        &mut w.kernel.data_mut()[e]
    } else {
        &mut w.bias[e - nk]
    }
}

/// Compares tape gradients against central differences for every scalar
/// element of every input and parameter. Returns the worst relative error.
///
/// `build` receives the recorded inputs and the registered parameters and
/// must return a scalar node. Runs entirely in `f64`.
pub fn grad_check<F>(
    build: F,
    inputs: &[Tensor<f64>],
    params: &[ConvWeights<f64>],
    eps: f64,
) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var], &[ParamId]) -> Result<Var>,
{
    let (in_grads, param_grads) = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let ids: Vec<ParamId> = params.iter().map(|p| tape.param(p)).collect();
        let out = build(&mut tape, &vars, &ids)?;
        let grads = tape.backward(out)?;
        let in_grads: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        (in_grads, grads.into_params())
    };

    let mut worst = 0.0f64;
    let mut inputs = inputs.to_vec();
    for i in 0..inputs.len() {
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            inputs[i].data_mut()[e] = orig + eps;
            let plus = eval(&build, &inputs, params)?;
            inputs[i].data_mut()[e] = orig - eps;
            let minus = eval(&build, &inputs, params)?;
            inputs[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(in_grads[i].data()[e], numeric));
        }
    }

    let mut params = params.to_vec();
    for p in 0..params.len() {
        let nk = params[p].kernel.numel();
        for e in 0..nk + params[p].bias.len() {
            let orig = *param_scalar(&mut params[p], e);
            *param_scalar(&mut params[p], e) = orig + eps;
            let plus = eval(&build, &inputs, &params)?;
            *param_scalar(&mut params[p], e) = orig - eps;
            let minus = eval(&build, &inputs, &params)?;
            *param_scalar(&mut params[p], e) = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = if e < nk {
                param_grads[p].kernel.data()[e]
            } else {
                param_grads[p].bias[e - nk]
            };
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}
