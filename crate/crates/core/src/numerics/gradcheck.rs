use super::{NumericsError, Result, Tape, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function of several tensors
/// with central differences of step `h`.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// over every input coordinate.
pub fn finite_difference_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(NumericsError::GradCheck(format!(
                "function returned shape {:?}, expected a scalar",
                tape.shape(out)
            )));
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut perturbed = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], input.len());
        for j in 0..input.len() {
            let orig = input.data()[j];
            perturbed[i].data_mut()[j] = orig + h;
            let (tp, _, op) = eval(&perturbed)?;
            let plus = tp.value(op).data()[0];
            perturbed[i].data_mut()[j] = orig - h;
            let (tm, _, om) = eval(&perturbed)?;
            let minus = tm.value(om).data()[0];
            perturbed[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_difference_check_many`].
pub fn finite_difference_check<F>(f: F, input: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_difference_check_many(|t, v| f(t, v[0]), std::slice::from_ref(input), h)
}
