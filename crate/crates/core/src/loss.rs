//! Determinant-based mutual-information loss for noisy labels, plus the
//! binary cross-entropy baseline.
//!
//! The DMI loss is `-log |det U|` where `U` is the empirical joint matrix of
//! predicted class probabilities and labels over a batch. Because a
//! class-conditional noise transition `T` multiplies `U` by `T^T`, it shifts
//! the loss by the constant `-log |det T|` and leaves its gradients intact;
//! this relative invariance is what makes the loss robust to label noise.

use crate::tensor::{Scalar, Tape, Tensor};
use crate::{Error, Result};

/// Floor for |det U| before the log; keeps degenerate batches trainable.
pub const DMI_EPSILON: f64 = 1e-8;
/// Probability clamp for the cross-entropy baseline.
pub const BCE_CLAMP: f64 = 1e-7;

/// Differentiable K x K empirical joint distribution of predictions and
/// labels: rows are predicted classes, columns label classes.
pub struct JointMatrix {
    pub tensor: Tensor,
    pub k: usize,
    pub n: usize,
}

impl JointMatrix {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> Result<Vec<f64>> {
        Ok(tape.values(self.tensor)?.iter().map(|v| v.tof()).collect())
    }

    /// Determinant snapshot (K = 2 only).
    pub fn det<T: Scalar>(&self, tape: &Tape<T>) -> Result<f64> {
        if self.k != 2 {
            return Err(Error::Shape("det is only defined for K = 2 here".into()));
        }
        let u = self.values(tape)?;
        Ok(u[0] * u[3] - u[1] * u[2])
    }
}

/// u[a][b] = (1/N) sum_i probs_i[a] * labels_i[b], differentiable w.r.t.
/// `probs`. `labels` may be one-hot or soft, but rows must sum to 1.
pub fn joint_matrix<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Tensor,
    labels: Tensor,
) -> Result<JointMatrix> {
    let pshape = tape.shape(probs)?.to_vec();
    let lshape = tape.shape(labels)?.to_vec();
    let (n, k) = match pshape[..] {
        [n, k] => (n, k),
        _ => return Err(Error::Shape("probs must be [N, K]".into())),
    };
    if lshape != pshape {
        return Err(Error::Shape(format!(
            "labels shape {lshape:?} must match probs {pshape:?}"
        )));
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let pt = tape.transpose2d(probs)?;
    let unnorm = tape.matmul(pt, labels)?;
    let tensor = tape.affine(unnorm, T::fromf(1.0 / n as f64), T::zero())?;
    Ok(JointMatrix { tensor, k, n })
}

/// `-log(max(|det U|, eps))` over the batch joint matrix; K must be 2.
pub fn dmi_loss<T: Scalar>(tape: &mut Tape<T>, probs: Tensor, labels: Tensor) -> Result<Tensor> {
    let joint = joint_matrix(tape, probs, labels)?;
    if joint.k != 2 {
        return Err(Error::Shape(format!(
            "the DMI loss is defined for K = 2, got K = {}",
            joint.k
        )));
    }
    dmi_loss_from_joint(tape, &joint)
}

/// The loss tail starting from an existing joint matrix.
pub fn dmi_loss_from_joint<T: Scalar>(tape: &mut Tape<T>, joint: &JointMatrix) -> Result<Tensor> {
    let det = tape.det2x2(joint.tensor)?;
    let mag = tape.abs(det)?;
    let clamped = tape.clamp(mag, T::fromf(DMI_EPSILON), T::infinity())?;
    let log = tape.log(clamped)?;
    tape.affine(log, T::fromf(-1.0), T::zero())
}

/// Mean binary cross-entropy of positive-class probabilities against {0,1}
/// labels; probabilities are clamped to [1e-7, 1 - 1e-7] first.
pub fn bce_loss<T: Scalar>(tape: &mut Tape<T>, probs: Tensor, labels: &[u8]) -> Result<Tensor> {
    let shape = tape.shape(probs)?.to_vec();
    let n: usize = shape.iter().product();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} probabilities",
            labels.len()
        )));
    }
    if labels.iter().any(|&v| v > 1) {
        return Err(Error::Validation("labels must be in {0, 1}".into()));
    }
    let y: Vec<T> = labels.iter().map(|&v| T::fromf(v as f64)).collect();
    let y_neg: Vec<T> = labels.iter().map(|&v| T::fromf(1.0 - v as f64)).collect();
    let y = tape.constant(&shape, y)?;
    let y_neg = tape.constant(&shape, y_neg)?;

    let p = tape.clamp(probs, T::fromf(BCE_CLAMP), T::fromf(1.0 - BCE_CLAMP))?;
    let log_p = tape.log(p)?;
    let one_minus_p = tape.affine(p, T::fromf(-1.0), T::one())?;
    let log_q = tape.log(one_minus_p)?;
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(y_neg, log_q)?;
    let sum = tape.add(pos, neg)?;
    let mean = tape.mean(sum)?;
    tape.affine(mean, T::fromf(-1.0), T::zero())
}

/// One-hot encoding of {0..k-1} labels as an [N, K] row-major buffer.
pub fn one_hot<T: Scalar>(labels: &[u8], k: usize) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); labels.len() * k];
    for (i, &v) in labels.iter().enumerate() {
        if v as usize >= k {
            return Err(Error::Validation(format!(
                "label {v} out of range for {k} classes"
            )));
        }
        out[i * k + v as usize] = T::one();
    }
    Ok(out)
}

/// Per-pixel class probabilities of segmentation logits: [B, K, H, W] ->
/// softmax over K, flattened to [B*H*W, K].
pub fn segmentation_probs<T: Scalar>(tape: &mut Tape<T>, logits: Tensor) -> Result<Tensor> {
    let flat = tape.flatten_spatial(logits)?;
    tape.softmax_channels(flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn joint_matrix_hand_case() {
        let mut t = tape();
        let probs = t.constant(&[2, 2], vec![0.8, 0.2, 0.4, 0.6]).unwrap();
        let labels = t
            .constant(&[2, 2], one_hot::<f64>(&[0, 1], 2).unwrap())
            .unwrap();
        let joint = joint_matrix(&mut t, probs, labels).unwrap();
        let u = joint.values(&t).unwrap();
        let expect = [0.4, 0.2, 0.1, 0.3];
        for (a, e) in u.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((joint.det(&t).unwrap() - 0.10).abs() < 1e-12);
    }

    #[test]
    fn joint_matrix_perfect_predictions_are_diagonal() {
        let mut t = tape();
        let probs = t
            .constant(&[4, 2], one_hot::<f64>(&[0, 1, 0, 1], 2).unwrap())
            .unwrap();
        let labels = t
            .constant(&[4, 2], one_hot::<f64>(&[0, 1, 0, 1], 2).unwrap())
            .unwrap();
        let joint = joint_matrix(&mut t, probs, labels).unwrap();
        let u = joint.values(&t).unwrap();
        assert_eq!(u, vec![0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn joint_matrix_rank1_when_probs_constant() {
        let mut t = tape();
        let probs = t
            .constant(&[3, 2], vec![0.7, 0.3, 0.7, 0.3, 0.7, 0.3])
            .unwrap();
        let labels = t
            .constant(&[3, 2], one_hot::<f64>(&[0, 1, 1], 2).unwrap())
            .unwrap();
        let joint = joint_matrix(&mut t, probs, labels).unwrap();
        assert!(joint.det(&t).unwrap().abs() < 1e-12);
    }

    #[test]
    fn joint_matrix_entries_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 16;
            let mut t = tape();
            let probs = t.constant(&[n, 2], random_rows(&mut rng, n)).unwrap();
            let labels = t.constant(&[n, 2], random_rows(&mut rng, n)).unwrap();
            let joint = joint_matrix(&mut t, probs, labels).unwrap();
            let u = joint.values(&t).unwrap();
            let total: f64 = u.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(u.iter().all(|&v| v >= 0.0));
            let det = joint.det(&t).unwrap();
            assert!((-0.25..=0.25).contains(&det));
        }
    }

    #[test]
    fn dmi_loss_hand_cases() {
        // Diagonal joint: -log(0.25).
        let mut t = tape();
        let probs = t
            .constant(&[2, 2], one_hot::<f64>(&[0, 1], 2).unwrap())
            .unwrap();
        let labels = t
            .constant(&[2, 2], one_hot::<f64>(&[0, 1], 2).unwrap())
            .unwrap();
        let loss = dmi_loss(&mut t, probs, labels).unwrap();
        assert!((t.scalar_value(loss).unwrap() - 1.386294).abs() < 1e-6);

        // The N=2 joint with det 0.10: loss = -ln 0.1.
        let mut t = tape();
        let probs = t.constant(&[2, 2], vec![0.8, 0.2, 0.4, 0.6]).unwrap();
        let labels = t
            .constant(&[2, 2], one_hot::<f64>(&[0, 1], 2).unwrap())
            .unwrap();
        let loss = dmi_loss(&mut t, probs, labels).unwrap();
        assert!((t.scalar_value(loss).unwrap() - 2.302585).abs() < 1e-6);

        // Rank-1 joint clamps at epsilon: -ln(1e-8).
        let mut t = tape();
        let probs = t.constant(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let labels = t
            .constant(&[2, 2], one_hot::<f64>(&[0, 1], 2).unwrap())
            .unwrap();
        let loss = dmi_loss(&mut t, probs, labels).unwrap();
        assert!((t.scalar_value(loss).unwrap() - 18.420681).abs() < 1e-5);
    }

    #[test]
    fn dmi_value_invariant_under_simultaneous_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 12;
        let probs = random_rows(&mut rng, n);
        let labels = random_rows(&mut rng, n);
        let swap =
            |rows: &[f64]| -> Vec<f64> { rows.chunks(2).flat_map(|r| [r[1], r[0]]).collect() };

        let mut t1 = tape();
        let p1 = t1.constant(&[n, 2], probs.clone()).unwrap();
        let l1 = t1.constant(&[n, 2], labels.clone()).unwrap();
        let loss1 = dmi_loss(&mut t1, p1, l1).unwrap();

        let mut t2 = tape();
        let p2 = t2.constant(&[n, 2], swap(&probs)).unwrap();
        let l2 = t2.constant(&[n, 2], swap(&labels)).unwrap();
        let loss2 = dmi_loss(&mut t2, p2, l2).unwrap();

        let a = t1.scalar_value(loss1).unwrap();
        let b = t2.scalar_value(loss2).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .flat_map(|_| {
                let p: f64 = rng.gen_range(0.05..0.95);
                [p, 1.0 - p]
            })
            .collect()
    }

    /// Column-stochastic invertible transition from flip rates.
    fn transition(r01: f64, r10: f64) -> [f64; 4] {
        [1.0 - r01, r10, r01, 1.0 - r10]
    }

    fn apply_transition(labels: &[f64], t: &[f64; 4]) -> Vec<f64> {
        labels
            .chunks(2)
            .flat_map(|row| {
                [
                    t[0] * row[0] + t[1] * row[1],
                    t[2] * row[0] + t[3] * row[1],
                ]
            })
            .collect()
    }

    #[test]
    fn noise_relative_invariance_in_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 16;
        for _ in 0..20 {
            let probs = random_rows(&mut rng, n);
            let labels = random_rows(&mut rng, n);
            let r01 = rng.gen_range(0.0..0.45);
            let r10 = rng.gen_range(0.0..0.45);
            let tr = transition(r01, r10);
            let det_t = tr[0] * tr[3] - tr[1] * tr[2];

            let eval = |lab: &[f64]| -> (f64, Vec<f64>) {
                let f = {
                    let lab = lab.to_vec();
                    move |tape: &mut Tape<f64>, xs: &[Tensor]| {
                        let l = tape.constant(&[n, 2], lab.clone())?;
                        dmi_loss(tape, xs[0], l)
                    }
                };
                let inputs = vec![(vec![n, 2], probs.clone())];
                let grads = gradcheck::analytic_gradients(&f, &inputs).unwrap();
                let mut t = tape();
                let p = t.constant(&[n, 2], probs.clone()).unwrap();
                let l = t.constant(&[n, 2], lab.to_vec()).unwrap();
                let loss = dmi_loss(&mut t, p, l).unwrap();
                (t.scalar_value(loss).unwrap(), grads[0].clone())
            };

            let (clean_loss, clean_grad) = eval(&labels);
            let noisy = apply_transition(&labels, &tr);
            let (noisy_loss, noisy_grad) = eval(&noisy);

            // Stay away from the epsilon clamp for the exact identity.
            if clean_loss > 17.0 || noisy_loss > 17.0 {
                continue;
            }
            let shift = noisy_loss - clean_loss;
            assert!(
                (shift - (-det_t.abs().ln())).abs() < 1e-9,
                "shift {shift} vs -log|det T| {}",
                -det_t.abs().ln()
            );
            for (a, b) in clean_grad.iter().zip(&noisy_grad) {
                assert!((a - b).abs() < 1e-6, "gradient moved: {a} vs {b}");
            }
        }
    }

    #[test]
    fn bce_hand_cases() {
        // Perfect predictions: loss ~ 0 after clamping.
        let mut t = tape();
        let p = t.constant(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = bce_loss(&mut t, p, &[1, 0, 1, 0]).unwrap();
        assert!(t.scalar_value(loss).unwrap() <= 1e-6);

        // p = 0.5 everywhere: ln 2.
        let mut t = tape();
        let p = t.constant(&[3], vec![0.5; 3]).unwrap();
        let loss = bce_loss(&mut t, p, &[1, 0, 1]).unwrap();
        assert!((t.scalar_value(loss).unwrap() - 0.693147).abs() < 1e-6);

        // p = 0.8, y = 1: -ln 0.8.
        let mut t = tape();
        let p = t.constant(&[1], vec![0.8]).unwrap();
        let loss = bce_loss(&mut t, p, &[1]).unwrap();
        assert!((t.scalar_value(loss).unwrap() - 0.223144).abs() < 1e-6);
    }

    #[test]
    fn both_losses_pass_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 8;
        let labels = one_hot::<f64>(&[0, 1, 1, 0, 1, 0, 0, 1], 2).unwrap();
        let dmi = move |tape: &mut Tape<f64>, xs: &[Tensor]| {
            let l = tape.constant(&[n, 2], labels.clone())?;
            dmi_loss(tape, xs[0], l)
        };
        let probs = random_rows(&mut rng, n);
        let err = gradcheck::check(&dmi, &[(vec![n, 2], probs)], 1e-6, 1e-6).unwrap();
        assert!(err < 1e-4, "dmi gradient error {err}");

        let bce = |tape: &mut Tape<f64>, xs: &[Tensor]| {
            bce_loss(tape, xs[0], &[1, 0, 1, 0, 1, 1, 0, 0])
        };
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let err = gradcheck::check(&bce, &[(vec![n], p)], 1e-6, 1e-6).unwrap();
        assert!(err < 1e-4, "bce gradient error {err}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut t = tape();
        let p = t.constant(&[2], vec![0.5, 0.5]);
        assert!(p.is_ok());
        // Zero-length shapes cannot even be constructed; the N = 0 contract
        // is enforced at the shape level.
        assert!(t.constant(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn segmentation_probs_shape_and_normalization() {
        let mut t = tape();
        let logits = t
            .constant(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 4.0, 3.0, 2.0, 1.0])
            .unwrap();
        let probs = segmentation_probs(&mut t, logits).unwrap();
        assert_eq!(t.shape(probs).unwrap(), &[4, 2]);
        for row in t.values(probs).unwrap().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }
}
