//! Traits shared by the RBF network and the MLP baseline.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::init::{lazy_init_network, InitReport};
use crate::loss::log_bce;
use crate::mlp::{msp_score, softmax_cross_entropy, Mlp};
use crate::rbf::{max_confidence, Network};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

const SCORE_CHUNK: usize = 2048;

/// Per-row confidence score (higher = more in-distribution) and predicted class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scored {
    pub scores: Vec<f64>,
    pub predictions: Vec<usize>,
}

impl Scored {
    fn extend(&mut self, scores: impl IntoIterator<Item = f64>, preds: Vec<usize>) {
        self.scores.extend(scores);
        self.predictions.extend(preds);
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let hits = self.predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
        hits as f64 / labels.len() as f64
    }
}

pub trait Classifier {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn score(&self, x: &Tensor<f32>) -> Result<Scored>;
}

impl<T: Scalar> Classifier for Network<T> {
    fn input_dim(&self) -> usize {
        Network::input_dim(self)
    }
    fn num_classes(&self) -> usize {
        Network::num_classes(self)
    }
    /// Maximum confidence `exp(max_c log φ_c)`.
    fn score(&self, x: &Tensor<f32>) -> Result<Scored> {
        let mut out = Scored::default();
        for start in (0..x.rows()).step_by(SCORE_CHUNK) {
            let chunk = x.slice_rows(start, (start + SCORE_CHUNK).min(x.rows())).cast::<T>();
            let (s, p) = max_confidence(&self.forward(&chunk)?);
            out.extend(s.into_iter().map(T::as_f64), p);
        }
        Ok(out)
    }
}

impl<T: Scalar> Classifier for Mlp<T> {
    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }
    fn num_classes(&self) -> usize {
        Mlp::num_classes(self)
    }
    /// Maximum softmax probability.
    fn score(&self, x: &Tensor<f32>) -> Result<Scored> {
        let mut out = Scored::default();
        for start in (0..x.rows()).step_by(SCORE_CHUNK) {
            let chunk = x.slice_rows(start, (start + SCORE_CHUNK).min(x.rows())).cast::<T>();
            let (s, p) = msp_score(&self.forward(&chunk)?);
            out.extend(s.into_iter().map(T::as_f64), p);
        }
        Ok(out)
    }
}

/// A model the training loop can optimize.
pub trait Trainable<T: Scalar>: Classifier {
    fn parameters(&self) -> Vec<&Tensor<T>>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>>;

    /// One-off setup on the first batch before any update.
    fn prepare(&mut self, _batch: &Tensor<T>, _passes: usize, _rng: &mut ChaCha8Rng) -> Result<Option<InitReport>> {
        Ok(None)
    }

    /// Builds `(loss, outputs)` on `tape`; `params` follow [`Trainable::parameters`].
    fn batch_loss(&self, tape: &Tape<T>, params: &[Var], x: Var, labels: &[usize]) -> Result<(Var, Var)>;

    fn predict_outputs(&self, outputs: &Tensor<T>) -> Vec<usize>;
}

impl<T: Scalar> Trainable<T> for Network<T> {
    fn parameters(&self) -> Vec<&Tensor<T>> {
        Network::parameters(self)
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Network::parameters_mut(self)
    }
    fn prepare(&mut self, batch: &Tensor<T>, passes: usize, rng: &mut ChaCha8Rng) -> Result<Option<InitReport>> {
        if self.is_initialized() {
            return Ok(None);
        }
        lazy_init_network(self, batch, passes, rng).map(Some)
    }
    fn batch_loss(&self, tape: &Tape<T>, params: &[Var], x: Var, labels: &[usize]) -> Result<(Var, Var)> {
        let vars = self.bind_from(tape, params)?;
        let rows = tape.value(x).rows();
        let dep0 = tape.constant(Tensor::ones(rows, 1));
        let (out, _) = self.forward_on_tape(tape, &vars, x, dep0)?;
        let loss = log_bce(tape, out, labels, self.num_classes())?;
        Ok((loss, out))
    }
    fn predict_outputs(&self, outputs: &Tensor<T>) -> Vec<usize> {
        max_confidence(outputs).1
    }
}

impl<T: Scalar> Trainable<T> for Mlp<T> {
    fn parameters(&self) -> Vec<&Tensor<T>> {
        Mlp::parameters(self)
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Mlp::parameters_mut(self)
    }
    fn batch_loss(&self, tape: &Tape<T>, params: &[Var], x: Var, labels: &[usize]) -> Result<(Var, Var)> {
        let logits = self.forward_on_tape(tape, params, x)?;
        let loss = softmax_cross_entropy(tape, logits, labels)?;
        Ok((loss, logits))
    }
    fn predict_outputs(&self, outputs: &Tensor<T>) -> Vec<usize> {
        msp_score(outputs).1
    }
}
