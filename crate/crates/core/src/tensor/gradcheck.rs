//! Central finite-difference gradient checking.
//!
//! The finite-difference side only ever runs forward evaluations, so it is
//! independent of the backward implementation it is used to verify.

use super::{Scalar, Tape, Tensor};
use crate::Result;

/// A differentiable scalar function of several tensor inputs, expressed as a
/// graph builder over leaf handles.
pub type ScalarFn<T> = dyn Fn(&mut Tape<T>, &[Tensor]) -> Result<Tensor>;

/// Gradients computed by the reverse pass, one flat `f64` vector per input.
pub fn analytic_gradients<T: Scalar>(
    f: &ScalarFn<T>,
    inputs: &[(Vec<usize>, Vec<T>)],
) -> Result<Vec<Vec<f64>>> {
    let mut tape: Tape<T> = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, values)| tape.leaf(shape, values.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&mut tape, &leaves)?;
    tape.backward(loss)?;
    leaves
        .iter()
        .zip(inputs)
        .map(|(&leaf, (_, values))| {
            Ok(match tape.grad(leaf)? {
                Some(g) => g.iter().map(|v| v.tof()).collect(),
                None => vec![0.0; values.len()],
            })
        })
        .collect()
}

/// Central-difference gradients: (f(x + h) - f(x - h)) / 2h per element.
pub fn finite_difference_gradients<T: Scalar>(
    f: &ScalarFn<T>,
    inputs: &[(Vec<usize>, Vec<T>)],
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    let eval = |probe: &[(Vec<usize>, Vec<T>)]| -> Result<f64> {
        let mut tape: Tape<T> = Tape::new();
        let leaves: Vec<Tensor> = probe
            .iter()
            .map(|(shape, values)| tape.constant(shape, values.clone()))
            .collect::<Result<_>>()?;
        let loss = f(&mut tape, &leaves)?;
        Ok(tape.scalar_value(loss)?.tof())
    };

    let mut grads = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut gi = Vec::with_capacity(inputs[i].1.len());
        for j in 0..inputs[i].1.len() {
            let original = inputs[i].1[j];
            probe[i].1[j] = T::fromf(original.tof() + h);
            let plus = eval(&probe)?;
            probe[i].1[j] = T::fromf(original.tof() - h);
            let minus = eval(&probe)?;
            probe[i].1[j] = original;
            gi.push((plus - minus) / (2.0 * h));
        }
        grads.push(gi);
    }
    Ok(grads)
}

/// Worst relative disagreement between analytic and finite-difference
/// gradients, with a magnitude floor guarding near-zero entries.
pub fn max_relative_error(analytic: &[Vec<f64>], fd: &[Vec<f64>], floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (ga, gf) in analytic.iter().zip(fd) {
        for (&a, &f) in ga.iter().zip(gf) {
            let scale = a.abs().max(f.abs()).max(floor);
            let err = (a - f).abs() / scale;
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Convenience wrapper: worst relative error of `f`'s reverse-mode gradients
/// against central differences with step `h`.
pub fn check<T: Scalar>(
    f: &ScalarFn<T>,
    inputs: &[(Vec<usize>, Vec<T>)],
    h: f64,
    floor: f64,
) -> Result<f64> {
    let analytic = analytic_gradients(f, inputs)?;
    let fd = finite_difference_gradients(f, inputs, h)?;
    Ok(max_relative_error(&analytic, &fd, floor))
}
