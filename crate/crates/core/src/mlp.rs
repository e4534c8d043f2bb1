//! ReLU MLP with softmax output, scored by maximum softmax probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::loss::one_hot;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub width: usize,
    /// Number of hidden ReLU layers; zero gives a linear softmax classifier.
    pub hidden_layers: usize,
    pub num_classes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineLayer<T> {
    /// `in x out`
    pub weight: Tensor<T>,
    /// `1 x out`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<AffineLayer<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Weights and biases drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new(config: &MlpConfig) -> Result<Self> {
        if config.input_dim == 0 || config.num_classes == 0 || (config.hidden_layers > 0 && config.width == 0) {
            return Err(Error::Usage("MLP dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut dims = vec![config.input_dim];
        dims.extend(std::iter::repeat(config.width).take(config.hidden_layers));
        dims.push(config.num_classes);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect() };
                AffineLayer {
                    weight: Tensor::from_vec(w[0], w[1], draw(w[0] * w[1])).expect("shape"),
                    bias: Tensor::from_vec(1, w[1], draw(w[1])).expect("shape"),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<AffineLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Usage("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            l.bias.expect_shape((1, l.weight.cols()), "bias")?;
            if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
                return dim_err(format!("layer {i} input width does not chain"));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[AffineLayer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Logits on `tape`; `params` in [`Mlp::parameters`] order.
    pub fn forward_on_tape(&self, tape: &Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::Usage("wrong number of parameter handles".into()));
        }
        let mut h = x;
        for (i, pair) in params.chunks(2).enumerate() {
            let z = tape.matmul(h, pair[0])?;
            h = tape.add_row(z, pair[1])?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.input_dim() {
            return dim_err(format!("MLP expects {} features, got {}", self.input_dim(), x.cols()));
        }
        let tape = Tape::new();
        let params: Vec<Var> = self.parameters().into_iter().map(|p| tape.constant(p.clone())).collect();
        let xv = tape.constant(x.clone());
        let out = self.forward_on_tape(&tape, &params, xv)?;
        let v = tape.value(out).clone();
        Ok(v)
    }
}

/// Mean softmax cross-entropy over rows.
pub fn softmax_cross_entropy<T: Scalar>(tape: &Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (m, c) = tape.value(logits).shape();
    if m != labels.len() {
        return dim_err(format!("{m} logit rows for {} labels", labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label { label, classes: c });
    }
    let lsm = tape.log_softmax(logits);
    let y = tape.constant(one_hot::<T>(labels, c));
    let picked = tape.mul(lsm, y)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, T::of(-1.0 / m as f64)))
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_slice_mut(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

/// Maximum softmax probability and argmax per row.
pub fn msp_score<T: Scalar>(logits: &Tensor<T>) -> (Vec<T>, Vec<usize>) {
    let probs = softmax(logits);
    let mut scores = Vec::with_capacity(probs.rows());
    let mut preds = Vec::with_capacity(probs.rows());
    for i in 0..probs.rows() {
        let row = probs.row_slice(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        scores.push(row[best]);
        preds.push(best);
    }
    (scores, preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn config(hidden: usize) -> MlpConfig {
        MlpConfig {
            input_dim: 3,
            width: 5,
            hidden_layers: hidden,
            num_classes: 4,
            seed: 3,
        }
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut mlp = Mlp::<f64>::new(&config(2)).unwrap();
        for p in mlp.parameters_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let logits = mlp.forward(&Tensor::from_rows(&[[1.0, -2.0, 3.0]])).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let (s, p) = msp_score(&logits);
        assert_abs_diff_eq!(s[0], 0.25, epsilon = 1e-15);
        assert_eq!(p[0], 0);
    }

    #[test]
    fn no_hidden_layer_is_affine() {
        let mlp = Mlp::<f64>::new(&config(0)).unwrap();
        let x = Tensor::from_rows(&[[0.5, -1.0, 2.0]]);
        let l = &mlp.layers()[0];
        let expect = x.matmul(&l.weight).unwrap();
        let got = mlp.forward(&x).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(got.get(0, j), expect.get(0, j) + l.bias.data()[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn msp_examples() {
        let (s, _) = msp_score(&Tensor::<f64>::from_rows(&[[0.0, 0.0]]));
        assert_abs_diff_eq!(s[0], 0.5, epsilon = 1e-15);
        let (s, p) = msp_score(&Tensor::<f64>::from_rows(&[[10.0, 0.0]]));
        // scalar softmax: 1 / (1 + e^-10)
        assert_abs_diff_eq!(s[0], 1.0 / (1.0 + (-10.0f64).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(s[0], 0.99995, epsilon = 1e-5);
        assert_eq!(p[0], 0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mlp = Mlp::<f64>::new(&config(2)).unwrap();
        let x = Tensor::from_rows(&[[0.3, -1.0, 0.8], [1.2, 0.4, -0.6], [-0.5, 0.9, 0.1]]);
        let labels = [1, 3, 0];
        let loss_of = |m: &Mlp<f64>| {
            let tape = Tape::new();
            let ps: Vec<Var> = m.parameters().into_iter().map(|p| tape.constant(p.clone())).collect();
            let xv = tape.constant(x.clone());
            let lo = m.forward_on_tape(&tape, &ps, xv).unwrap();
            let l = softmax_cross_entropy(&tape, lo, &labels).unwrap();
            let v = tape.value(l).data()[0];
            v
        };
        let tape = Tape::new();
        let ps: Vec<Var> = mlp.parameters().into_iter().map(|p| tape.param(p.clone())).collect();
        let xv = tape.constant(x.clone());
        let lo = mlp.forward_on_tape(&tape, &ps, xv).unwrap();
        let l = softmax_cross_entropy(&tape, lo, &labels).unwrap();
        tape.backward(l).unwrap();
        for (pi, &pv) in ps.iter().enumerate() {
            let g = tape.grad(pv).unwrap();
            for e in 0..g.len() {
                let mut plus = mlp.clone();
                plus.parameters_mut()[pi].data_mut()[e] += 1e-4;
                let mut minus = mlp.clone();
                minus.parameters_mut()[pi].data_mut()[e] -= 1e-4;
                let num = (loss_of(&plus) - loss_of(&minus)) / 2e-4;
                assert!((g.data()[e] - num).abs() / num.abs().max(1.0) < 1e-4);
            }
        }
    }

    proptest! {
        #[test]
        fn msp_is_shift_invariant_and_bounded(
            row in proptest::collection::vec(-20.0f64..20.0, 3),
            shift in -50.0f64..50.0,
        ) {
            let a = Tensor::<f64>::from_rows(&[row.clone()]);
            let b = a.map(|v| v + shift);
            let (sa, _) = msp_score(&a);
            let (sb, _) = msp_score(&b);
            prop_assert!((sa[0] - sb[0]).abs() < 1e-12);
            prop_assert!(sa[0] >= 1.0 / 3.0 - 1e-12 && sa[0] <= 1.0);
            let sum: f64 = softmax(&a).data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
