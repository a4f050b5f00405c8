//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Largest relative error between the tape gradient and a central difference,
/// over every coordinate of every input that requires gradients.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-8)`. Inputs that do
/// not require gradients are held constant and must receive no gradient.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (slot, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[slot]);
        if !input.requires_grad() {
            if analytic.is_some() {
                return Err(Error::Contract(format!(
                    "input {slot} does not require grad but received one"
                )));
            }
            continue;
        }
        let zeros = vec![0.0; input.len()];
        let analytic = analytic.unwrap_or(&zeros);
        for i in 0..input.len() {
            let x0 = input.data()[i];
            probe[slot].data_mut()[i] = x0 + h;
            let fp = eval(&probe)?;
            probe[slot].data_mut()[i] = x0 - h;
            let fm = eval(&probe)?;
            probe[slot].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`]; `x` is treated as trainable.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let x = x.clone().with_requires_grad(true);
    grad_check_many(|tape, vars| f(tape, vars[0]), &[x], h)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    match tape.value(v) {
        [x] => Ok(*x),
        other => Err(Error::Contract(format!(
            "grad_check needs a scalar function, got {} values",
            other.len()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        let x = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.square(v);
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_scalar_is_rejected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|t, v| Ok(t.square(v)), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn frozen_leaf_is_skipped() {
        let w = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let x = Tensor::new(vec![2], vec![0.3, 0.7]).unwrap().with_requires_grad(true);
        let err = grad_check_many(
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                Ok(t.sum(p))
            },
            &[w, x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }
}
