use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Gradients smaller than this are compared on an absolute scale.
const REL_ERR_FLOOR: f64 = 1e-3;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences. Returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)` over every input
/// coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "function value {v} is not finite"
            )));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::Numerical("function value is not finite".into()));
    }
    let grads = tape.backward(out)?;

    let mut probe = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input.shape());
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[k].data_mut()[j] = orig + GRAD_CHECK_STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = orig - GRAD_CHECK_STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu at exactly the kink: analytic subgradient 0, numeric 0.5.
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let r = t.relu(v[0]);
                Ok(t.sum(r))
            },
            &[x],
        )
        .unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let res = grad_check(|t, v| Ok(t.scale(v[0], f64::INFINITY)), &[x]);
        assert!(matches!(res, Err(Error::Numerical(_))));
    }
}
