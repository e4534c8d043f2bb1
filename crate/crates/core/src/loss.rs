//! Class-wise binary cross-entropy evaluated directly on log-confidences.

use crate::error::{Error, Result};
use crate::tape::{log_sub_exp_scalar, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Subtracted from every log-confidence so `1 − p` stays strictly positive.
pub const LOG_SHIFT: f64 = 1e-6;

/// Loss with per-class diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// Mean term per class column; `loss` is the mean of these.
    pub per_class: Vec<f64>,
}

fn check_inputs<T: Scalar>(log_probs: &Tensor<T>, labels: &[usize], classes: usize) -> Result<()> {
    log_probs.expect_shape((labels.len(), classes), "log-probabilities")?;
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    if let Some(v) = log_probs.data().iter().find(|v| **v > T::zero()) {
        return Err(Error::Domain(format!("log-probability {v} is not <= 0")));
    }
    Ok(())
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        t.set(i, l, T::one());
    }
    t
}

/// Mean over all `m·C` entries of `−[y·log p + (1 − y)·log(1 − p)]`,
/// with `log(1 − p)` computed as `log_sub_exp(0, log p)`.
pub fn log_bce<T: Scalar>(tape: &Tape<T>, log_probs: Var, labels: &[usize], classes: usize) -> Result<Var> {
    check_inputs(&tape.value(log_probs), labels, classes)?;
    let (m, c) = (labels.len(), classes);
    let targets = one_hot::<T>(labels, classes);
    let complement = targets.map(|y| T::one() - y);
    let shifted = tape.add_scalar(log_probs, T::of(-LOG_SHIFT));
    let zero = tape.constant(Tensor::zeros(m, c));
    let log_not = tape.log_sub_exp(zero, shifted)?;
    let y = tape.constant(targets);
    let not_y = tape.constant(complement);
    let pos = tape.mul(shifted, y)?;
    let neg = tape.mul(log_not, not_y)?;
    let terms = tape.add(pos, neg)?;
    let mean = tape.mean(terms);
    Ok(tape.neg(mean))
}

/// Untracked [`log_bce`] with per-class means.
pub fn log_bce_value<T: Scalar>(log_probs: &Tensor<T>, labels: &[usize], classes: usize) -> Result<LossValue> {
    check_inputs(log_probs, labels, classes)?;
    let mut per_class = vec![0.0; classes];
    for (i, &label) in labels.iter().enumerate() {
        for (j, acc) in per_class.iter_mut().enumerate() {
            let lp = log_probs.get(i, j).as_f64() - LOG_SHIFT;
            *acc -= if j == label { lp } else { log_sub_exp_scalar(0.0, lp) };
        }
    }
    let m = labels.len().max(1) as f64;
    per_class.iter_mut().for_each(|v| *v /= m);
    let loss = per_class.iter().sum::<f64>() / classes as f64;
    Ok(LossValue { loss, per_class })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn eval(lp: &[&[f64]], labels: &[usize]) -> f64 {
        let tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(lp));
        let l = log_bce(&tape, v, labels, lp[0].len()).unwrap();
        let out = tape.value(l).data()[0];
        out
    }

    #[test]
    fn two_class_example() {
        let loss = eval(&[&[0.9f64.ln(), 0.1f64.ln()]], &[0]);
        // direct-probability oracle
        let oracle = -(0.9f64.ln() + 0.9f64.ln()) / 2.0;
        assert_abs_diff_eq!(loss, oracle, epsilon = 2e-6);
        assert_abs_diff_eq!(loss, 0.10536, epsilon = 1e-5);
    }

    #[test]
    fn symmetric_point_is_ln2() {
        let h = 0.5f64.ln();
        let loss = eval(&[&[h, h, h], &[h, h, h]], &[0, 2]);
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 2e-6);
    }

    #[test]
    fn perfect_prediction_hits_shift_floor() {
        let loss = eval(&[&[0.0, -60.0], &[-60.0, 0.0]], &[0, 1]);
        assert!(loss > 0.0 && loss < 1e-5, "{loss}");
    }

    #[test]
    fn input_errors() {
        let tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_rows(&[[-0.1, -0.2]]));
        assert!(matches!(log_bce(&tape, v, &[2], 2), Err(Error::Label { label: 2, classes: 2 })));
        let pos = tape.constant(Tensor::from_rows(&[[0.1, -0.2]]));
        assert!(matches!(log_bce(&tape, pos, &[0], 2), Err(Error::Domain(_))));
        assert!(log_bce(&tape, v, &[0, 1], 2).is_err());
    }

    #[test]
    fn untracked_matches_tape() {
        let lp: &[&[f64]] = &[&[-0.2, -1.5, -3.0], &[-2.0, -0.01, -0.7]];
        let v = log_bce_value(&Tensor::<f64>::from_rows(lp), &[0, 1], 3).unwrap();
        assert_abs_diff_eq!(v.loss, eval(lp, &[0, 1]), epsilon = 1e-12);
        assert_eq!(v.per_class.len(), 3);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let base = Tensor::<f64>::from_rows(&[[-0.3, -2.0, -0.05], [-1.1, -0.4, -4.0]]);
        let labels = [2, 0];
        let f = |x: &Tensor<f64>| log_bce_value(x, &labels, 3).unwrap().loss;
        let tape = Tape::new();
        let v = tape.param(base.clone());
        let l = log_bce(&tape, v, &labels, 3).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap();
        for i in 0..base.len() {
            let mut p = base.clone();
            p.data_mut()[i] += 1e-4;
            let mut m = base.clone();
            m.data_mut()[i] -= 1e-4;
            let num = (f(&p) - f(&m)) / 2e-4;
            assert!((g.data()[i] - num).abs() / num.abs().max(1.0) < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            vals in proptest::collection::vec(-6.0f64..-1e-3, 8),
            labels in proptest::collection::vec(0usize..2, 4),
        ) {
            let lp = Tensor::from_vec(4, 2, vals).unwrap();
            let a = log_bce_value(&lp, &labels, 2).unwrap().loss;
            let order = [3, 1, 0, 2];
            let lp2 = lp.select_rows(&order);
            let labels2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let b = log_bce_value(&lp2, &labels2, 2).unwrap().loss;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
