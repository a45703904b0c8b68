use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`]; keeps gradients that are zero
/// on both sides from producing `0 / 0`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Dropout masks depend only on the tape seed, so every evaluation below sees
/// the same mask.
const GRAD_CHECK_SEED: u64 = 0x5eed;

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `eps`, element by element.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new(true, GRAD_CHECK_SEED);
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new(true, GRAD_CHECK_SEED);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::shape("grad_check", "function must return a scalar"));
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic.data()[j], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Like [`grad_check`], but differentiates with respect to parameters read
/// through [`Tape::param`] and only probes the `(param, element)` pairs in
/// `sample`.
pub fn grad_check_params<F>(
    f: F,
    params: &ParamSet<f64>,
    sample: &[(usize, usize)],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new(true, GRAD_CHECK_SEED);
        let out = f(&mut tape, ps)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new(true, GRAD_CHECK_SEED);
    let out = f(&mut tape, params)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::shape("grad_check_params", "function must return a scalar"));
    }
    let grads = tape.backward(out)?.into_param_grads(params);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = params.clone();
    for &(i, j) in sample {
        if i >= params.len() || j >= params.tensor(i).numel() {
            return Err(Error::invalid(format!("no parameter element ({i}, {j})")));
        }
        let orig = params.tensor(i).data()[j];
        probe.tensor_mut(i).data_mut()[j] = orig + eps;
        let plus = eval(&probe)?;
        probe.tensor_mut(i).data_mut()[j] = orig - eps;
        let minus = eval(&probe)?;
        probe.tensor_mut(i).data_mut()[j] = orig;
        let err = relative_error(grads[i].data()[j], (plus - minus) / (2.0 * eps));
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (i, j);
        }
        report.checked += 1;
    }
    Ok(report)
}

