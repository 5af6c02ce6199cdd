use super::{Tape, Tensor, Var};
use crate::error::{Result, StsError};

/// Compares the tape gradient of a scalar function against central
/// differences and returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let errs = finite_diff_check_vars(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)?;
    Ok(errs[0])
}

/// Multi-input form of [`finite_diff_check`]; returns one error per input.
pub fn finite_diff_check_vars<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(StsError::Contract("finite_diff_check needs a scalar function".into()));
        }
        Ok(v.item())
    };

    let mut values = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut worst: f64 = 0.0;
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            values[i].data_mut()[j] = orig + h;
            let up = eval(&values)?;
            values[i].data_mut()[j] = orig - h;
            let down = eval(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
        errors.push(worst);
    }
    Ok(errors)
}
