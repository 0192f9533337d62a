//! Finite-difference verification of every autodiff primitive.
//!
//! Each case routes the primitive's output through `mean(out * weights)` with
//! fixed pseudo-random weights so every output element receives a distinct
//! upstream gradient; index bugs in a backward pass cannot cancel out.

use noisemap_core::tensor::gradcheck::{self, check};
use noisemap_core::tensor::{Scalar, Tape, Tensor};
use noisemap_core::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const F64_TOL: f64 = 1e-6;
const F64_STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, for kinked ops (relu, abs).
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    uniform(rng, n, -1.0, 1.0)
}

/// mean(out * w) for a fixed weight vector.
fn weighted_mean<T: Scalar>(tape: &mut Tape<T>, out: Tensor, w: &[f64]) -> Result<Tensor> {
    let shape = tape.shape(out)?.to_vec();
    let wt = tape.constant(&shape, w.iter().map(|&v| T::fromf(v)).collect())?;
    let prod = tape.mul(out, wt)?;
    tape.mean(prod)
}

fn assert_grad_ok<F>(name: &str, f: F, inputs: &[(Vec<usize>, Vec<f64>)])
where
    F: Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor> + 'static,
{
    let err = check(&f, inputs, F64_STEP, FLOOR).unwrap();
    assert!(err < F64_TOL, "{name}: max relative error {err}");
}

#[test]
fn add_and_mul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = vec![2, 3];
    let a = uniform(&mut rng, 6, -2.0, 2.0);
    let b = uniform(&mut rng, 6, -2.0, 2.0);
    let w = weights(&mut rng, 6);
    assert_grad_ok(
        "add+mul",
        move |tape, xs| {
            let s = tape.add(xs[0], xs[1])?;
            let p = tape.mul(s, xs[0])?;
            weighted_mean(tape, p, &w)
        },
        &[(shape.clone(), a), (shape, b)],
    );
}

#[test]
fn affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform(&mut rng, 8, -2.0, 2.0);
    let w = weights(&mut rng, 8);
    assert_grad_ok(
        "affine",
        move |tape, xs| {
            let y = tape.affine(xs[0], -1.75, 0.4)?;
            weighted_mean(tape, y, &w)
        },
        &[(vec![8], x)],
    );
}

#[test]
fn matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = uniform(&mut rng, 12, -1.0, 1.0);
    let b = uniform(&mut rng, 8, -1.0, 1.0);
    let w = weights(&mut rng, 6);
    assert_grad_ok(
        "matmul",
        move |tape, xs| {
            let c = tape.matmul(xs[0], xs[1])?;
            weighted_mean(tape, c, &w)
        },
        &[(vec![3, 4], a), (vec![4, 2], b)],
    );
}

#[test]
fn transpose2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(&mut rng, 6, -1.0, 1.0);
    let w = weights(&mut rng, 6);
    assert_grad_ok(
        "transpose2d",
        move |tape, xs| {
            let t = tape.transpose2d(xs[0])?;
            weighted_mean(tape, t, &w)
        },
        &[(vec![2, 3], x)],
    );
}

#[test]
fn conv2d_3x3_with_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform(&mut rng, 2 * 3 * 6 * 6, -1.0, 1.0);
    let k = uniform(&mut rng, 4 * 3 * 3 * 3, -0.5, 0.5);
    let b = uniform(&mut rng, 4, -0.5, 0.5);
    let w = weights(&mut rng, 2 * 4 * 6 * 6);
    assert_grad_ok(
        "conv2d 3x3",
        move |tape, xs| {
            let y = tape.conv2d(xs[0], xs[1], Some(xs[2]))?;
            weighted_mean(tape, y, &w)
        },
        &[
            (vec![2, 3, 6, 6], x),
            (vec![4, 3, 3, 3], k),
            (vec![4], b),
        ],
    );
}

#[test]
fn conv2d_1x1() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = uniform(&mut rng, 1 * 3 * 4 * 4, -1.0, 1.0);
    let k = uniform(&mut rng, 2 * 3 * 1 * 1, -1.0, 1.0);
    let w = weights(&mut rng, 1 * 2 * 4 * 4);
    assert_grad_ok(
        "conv2d 1x1",
        move |tape, xs| {
            let y = tape.conv2d(xs[0], xs[1], None)?;
            weighted_mean(tape, y, &w)
        },
        &[(vec![1, 3, 4, 4], x), (vec![2, 3, 1, 1], k)],
    );
}

#[test]
fn maxpool2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Distinct values so the argmax is stable under the FD perturbation.
    let mut x = uniform(&mut rng, 2 * 2 * 4 * 4, -1.0, 1.0);
    for (i, v) in x.iter_mut().enumerate() {
        *v += i as f64 * 0.01;
    }
    let w = weights(&mut rng, 2 * 2 * 2 * 2);
    assert_grad_ok(
        "maxpool2d",
        move |tape, xs| {
            let y = tape.maxpool2d(xs[0])?;
            weighted_mean(tape, y, &w)
        },
        &[(vec![2, 2, 4, 4], x)],
    );
}

#[test]
fn upsample_nearest2x() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = uniform(&mut rng, 2 * 2 * 3 * 3, -1.0, 1.0);
    let w = weights(&mut rng, 2 * 2 * 6 * 6);
    assert_grad_ok(
        "upsample2x",
        move |tape, xs| {
            let y = tape.upsample_nearest2x(xs[0])?;
            weighted_mean(tape, y, &w)
        },
        &[(vec![2, 2, 3, 3], x)],
    );
}

#[test]
fn concat_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = uniform(&mut rng, 2 * 2 * 2 * 2, -1.0, 1.0);
    let b = uniform(&mut rng, 2 * 3 * 2 * 2, -1.0, 1.0);
    let w = weights(&mut rng, 2 * 5 * 2 * 2);
    assert_grad_ok(
        "concat_channels",
        move |tape, xs| {
            let y = tape.concat_channels(xs[0], xs[1])?;
            weighted_mean(tape, y, &w)
        },
        &[(vec![2, 2, 2, 2], a), (vec![2, 3, 2, 2], b)],
    );
}

#[test]
fn relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = off_kink(&mut rng, 12);
    let w = weights(&mut rng, 12);
    assert_grad_ok(
        "relu",
        move |tape, xs| {
            let y = tape.relu(xs[0])?;
            weighted_mean(tape, y, &w)
        },
        &[(vec![12], x)],
    );
}

#[test]
fn batchnorm_train() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = uniform(&mut rng, 2 * 3 * 4 * 4, -2.0, 2.0);
    let gamma = uniform(&mut rng, 3, 0.5, 1.5);
    let beta = uniform(&mut rng, 3, -0.5, 0.5);
    let w = weights(&mut rng, 2 * 3 * 4 * 4);
    assert_grad_ok(
        "batchnorm train",
        move |tape, xs| {
            let (y, _, _) = tape.batchnorm2d_train(xs[0], xs[1], xs[2], 1e-5)?;
            weighted_mean(tape, y, &w)
        },
        &[
            (vec![2, 3, 4, 4], x),
            (vec![3], gamma),
            (vec![3], beta),
        ],
    );
}

#[test]
fn batchnorm_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = uniform(&mut rng, 2 * 2 * 3 * 3, -2.0, 2.0);
    let gamma = uniform(&mut rng, 2, 0.5, 1.5);
    let beta = uniform(&mut rng, 2, -0.5, 0.5);
    let rm = uniform(&mut rng, 2, -0.3, 0.3);
    let rv = uniform(&mut rng, 2, 0.5, 1.5);
    let w = weights(&mut rng, 2 * 2 * 3 * 3);
    assert_grad_ok(
        "batchnorm eval",
        move |tape, xs| {
            let mean: Vec<f64> = rm.clone();
            let var: Vec<f64> = rv.clone();
            let y = tape.batchnorm2d_eval(xs[0], xs[1], xs[2], &mean, &var, 1e-5)?;
            weighted_mean(tape, y, &w)
        },
        &[
            (vec![2, 2, 3, 3], x),
            (vec![2], gamma),
            (vec![2], beta),
        ],
    );
}

#[test]
fn softmax_channels_2d_and_4d() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x2 = uniform(&mut rng, 3 * 4, -2.0, 2.0);
    let w2 = weights(&mut rng, 3 * 4);
    assert_grad_ok(
        "softmax [N,K]",
        move |tape, xs| {
            let y = tape.softmax_channels(xs[0])?;
            weighted_mean(tape, y, &w2)
        },
        &[(vec![3, 4], x2)],
    );

    let x4 = uniform(&mut rng, 2 * 3 * 2 * 2, -2.0, 2.0);
    let w4 = weights(&mut rng, 2 * 3 * 2 * 2);
    assert_grad_ok(
        "softmax [B,C,H,W]",
        move |tape, xs| {
            let y = tape.softmax_channels(xs[0])?;
            weighted_mean(tape, y, &w4)
        },
        &[(vec![2, 3, 2, 2], x4)],
    );
}

#[test]
fn log() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = uniform(&mut rng, 8, 0.2, 3.0);
    let w = weights(&mut rng, 8);
    assert_grad_ok(
        "log",
        move |tape, xs| {
            let y = tape.log(xs[0])?;
            weighted_mean(tape, y, &w)
        },
        &[(vec![8], x)],
    );
}

#[test]
fn abs() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = off_kink(&mut rng, 10);
    let w = weights(&mut rng, 10);
    assert_grad_ok(
        "abs",
        move |tape, xs| {
            let y = tape.abs(xs[0])?;
            weighted_mean(tape, y, &w)
        },
        &[(vec![10], x)],
    );
}

#[test]
fn clamp() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    // Mix of interior values and values saturated well past the bounds.
    let mut x = uniform(&mut rng, 10, -0.8, 0.8);
    x[0] = 3.0;
    x[1] = -3.0;
    let w = weights(&mut rng, 10);
    assert_grad_ok(
        "clamp",
        move |tape, xs| {
            let y = tape.clamp(xs[0], -1.0, 1.0)?;
            weighted_mean(tape, y, &w)
        },
        &[(vec![10], x)],
    );
}

#[test]
fn det2x2() {
    // The spec's hand case plus a random one; h = 1e-4 per the frozen oracle.
    let f = |tape: &mut Tape<f64>, xs: &[Tensor]| tape.det2x2(xs[0]);
    let err = check(&f, &[(vec![2, 2], vec![0.4, 0.2, 0.1, 0.3])], 1e-4, FLOOR).unwrap();
    assert!(err < F64_TOL, "det2x2 hand case: {err}");

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = uniform(&mut rng, 4, -1.0, 1.0);
    let err = check(&f, &[(vec![2, 2], x)], 1e-4, FLOOR).unwrap();
    assert!(err < F64_TOL, "det2x2 random: {err}");
}

#[test]
fn mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = uniform(&mut rng, 7, -2.0, 2.0);
    assert_grad_ok(
        "mean",
        move |tape, xs| tape.mean(xs[0]),
        &[(vec![7], x)],
    );
}

#[test]
fn slice_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = uniform(&mut rng, 2 * 4 * 2 * 2, -1.0, 1.0);
    let w = weights(&mut rng, 2 * 2 * 2 * 2);
    assert_grad_ok(
        "slice_channels",
        move |tape, xs| {
            let y = tape.slice_channels(xs[0], 1, 3)?;
            weighted_mean(tape, y, &w)
        },
        &[(vec![2, 4, 2, 2], x)],
    );
}

#[test]
fn flatten_spatial() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = uniform(&mut rng, 2 * 3 * 2 * 2, -1.0, 1.0);
    let w = weights(&mut rng, 8 * 3);
    assert_grad_ok(
        "flatten_spatial",
        move |tape, xs| {
            let y = tape.flatten_spatial(xs[0])?;
            weighted_mean(tape, y, &w)
        },
        &[(vec![2, 3, 2, 2], x)],
    );
}

#[test]
fn composite_graph_f32_vs_f64() {
    // The same composite graph checked on both scalar types at their
    // respective tolerances.
    fn build<T: Scalar>(tape: &mut Tape<T>, xs: &[Tensor]) -> Result<Tensor> {
        let y = tape.conv2d(xs[0], xs[1], None)?;
        let r = tape.relu(y)?;
        let p = tape.maxpool2d(r)?;
        let s = tape.softmax_channels(p)?;
        tape.mean(s)
    }
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = uniform(&mut rng, 1 * 2 * 4 * 4, -1.0, 1.0);
    let k = uniform(&mut rng, 3 * 2 * 3 * 3, -0.5, 0.5);

    let f64_inputs = vec![
        (vec![1, 2, 4, 4], x.clone()),
        (vec![3, 2, 3, 3], k.clone()),
    ];
    let err = check(
        &(build::<f64> as fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>),
        &f64_inputs,
        1e-5,
        FLOOR,
    )
    .unwrap();
    assert!(err < 1e-6, "f64 composite: {err}");

    // 32-bit forward path: analytic grads from the f32 graph against the
    // clean f64 finite-difference oracle of the same builder.
    let f32_inputs: Vec<(Vec<usize>, Vec<f32>)> = f64_inputs
        .iter()
        .map(|(s, v)| (s.clone(), v.iter().map(|&x| x as f32).collect()))
        .collect();
    let analytic32 = gradcheck::analytic_gradients(
        &(build::<f32> as fn(&mut Tape<f32>, &[Tensor]) -> Result<Tensor>),
        &f32_inputs,
    )
    .unwrap();
    let fd64 = gradcheck::finite_difference_gradients(
        &(build::<f64> as fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>),
        &f64_inputs,
        1e-5,
    )
    .unwrap();
    let err = gradcheck::max_relative_error(&analytic32, &fd64, FLOOR);
    assert!(err < 1e-3, "f32 composite: {err}");
}
