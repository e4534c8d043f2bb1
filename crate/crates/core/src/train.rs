//! Mini-batch training loop shared by the RBF network and the MLP baseline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::init::{InitReport, DEFAULT_KMEANS_PASSES};
use crate::model::Trainable;
use crate::optim::{Adam, AdamConfig, PlateauConfig, PlateauScheduler};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Rows of the first shuffled epoch used for data-driven initialization;
    /// defaults to `batch_size`.
    pub init_batch_size: Option<usize>,
    pub kmeans_passes: usize,
    pub adam: AdamConfig,
    pub scheduler: Option<PlateauConfig>,
    /// Fraction held out for validation when a scheduler runs and no
    /// validation set is supplied.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 100,
            init_batch_size: None,
            kmeans_passes: DEFAULT_KMEANS_PASSES,
            adam: AdamConfig::default(),
            scheduler: None,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
}

impl TrainRecord {
    /// `epoch,train_loss,val_loss,lr,train_acc`; `val_loss` is blank when no
    /// validation set was used.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,train_acc\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| format!("{v:.8e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.8e},{},{:.8e},{:.6}\n",
                e.epoch, e.train_loss, val, e.lr, e.train_acc
            ));
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub record: TrainRecord,
    pub init: Option<InitReport>,
}

/// Mean loss over `data`, evaluated in chunks without gradients.
pub fn evaluate_loss<T: Scalar, M: Trainable<T>>(model: &M, data: &LabeledDataset) -> Result<f64> {
    let labels = data.labels()?;
    let mut total = 0.0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let tape = Tape::new();
        let params: Vec<Var> = model.parameters().into_iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(data.features.slice_rows(start, end).cast::<T>());
        let (loss, _) = model.batch_loss(&tape, &params, x, &labels[start..end])?;
        total += tape.value(loss).data()[0].as_f64() * (end - start) as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

fn layer_norms<T: Scalar, M: Trainable<T>>(model: &M) -> Vec<f64> {
    model.parameters().iter().map(|p| p.frobenius_norm()).collect()
}

/// Trains `model` on `data` (features assumed already standardized).
///
/// Epoch 1's shuffled order supplies the initialization batch; every epoch
/// reshuffles with the session RNG; one Adam step per batch. With a
/// scheduler, the learning rate follows the validation loss.
pub fn train<T: Scalar, M: Trainable<T>>(
    model: &mut M,
    data: &LabeledDataset,
    config: &TrainConfig,
    validation: Option<&LabeledDataset>,
) -> Result<TrainOutcome> {
    if config.batch_size < 2 {
        return Err(Error::Usage(format!("batch size must be >= 2, got {}", config.batch_size)));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "data has {} features, model expects {}",
            data.dim(),
            model.input_dim()
        )));
    }
    data.labels()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let holdout;
    let (train_set, val_set) = match (validation, config.scheduler) {
        (Some(v), _) => (data, Some(v)),
        (None, Some(_)) if config.holdout_fraction > 0.0 => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            let n_val = ((data.len() as f64) * config.holdout_fraction).round() as usize;
            if n_val == 0 || n_val >= data.len() {
                return Err(Error::InsufficientData("holdout split leaves an empty side".into()));
            }
            let (v, t) = idx.split_at(n_val);
            holdout = (data.subset(t), data.subset(v));
            (&holdout.0, Some(&holdout.1))
        }
        _ => (data, None),
    };
    let n = train_set.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} training rows")));
    }
    let features: Tensor<T> = train_set.features.cast();
    let labels = train_set.labels()?;

    let mut adam = Adam::<T>::new(config.adam);
    let mut scheduler = config.scheduler.map(PlateauScheduler::new);
    let mut outcome = TrainOutcome::default();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        if epoch == 1 {
            let m = config.init_batch_size.unwrap_or(config.batch_size).min(n);
            let batch = features.select_rows(&order[..m]);
            outcome.init = model.prepare(&batch, config.kmeans_passes, &mut rng)?;
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let tape = Tape::new();
            let params: Vec<Var> = model.parameters().into_iter().map(|p| tape.param(p.clone())).collect();
            let x = tape.constant(features.select_rows(chunk));
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, outputs) = model.batch_loss(&tape, &params, x, &batch_labels)?;
            let lv = tape.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    norms: layer_norms(model),
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor<T>> = params
                .iter()
                .zip(model.parameters())
                .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
                .collect();
            let preds = model.predict_outputs(&tape.value(outputs));
            drop(tape);
            correct += preds.iter().zip(&batch_labels).filter(|(p, l)| p == l).count();
            loss_sum += lv * chunk.len() as f64;
            adam.step(&mut model.parameters_mut(), &grads)?;
        }
        let val_loss = match val_set {
            Some(v) => Some(evaluate_loss(model, v)?),
            None => None,
        };
        let lr = adam.lr();
        if let (Some(s), Some(vl)) = (scheduler.as_mut(), val_loss) {
            adam.set_lr(s.step(vl, lr));
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_loss,
            lr,
            train_acc: correct as f64 / n as f64,
        };
        log::debug!(
            "epoch {epoch}: loss={:.6} acc={:.4} lr={:.2e}",
            rec.train_loss,
            rec.train_acc,
            rec.lr
        );
        outcome.record.epochs.push(rec);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize, Moons4};
    use crate::mlp::{Mlp, MlpConfig};
    use crate::rbf::{Network, NetworkConfig};

    fn small_moons() -> LabeledDataset {
        let (mut train, _) = Moons4 {
            n_train: 200,
            n_test: 4,
            seed: 1,
            ..Moons4::default()
        }
        .generate()
        .unwrap();
        normalize(&mut train, &mut []).unwrap();
        train
    }

    #[test]
    fn record_has_one_row_per_epoch_and_is_deterministic() {
        let data = small_moons();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 50,
            kmeans_passes: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = Network::<f32>::new(NetworkConfig::uniform(2, 1, 10, 8, 4)).unwrap();
            let n_params = net.num_parameters();
            let out = train(&mut net, &data, &cfg, None).unwrap();
            assert_eq!(net.num_parameters(), n_params);
            (net, out)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra.record, rb.record);
        assert_eq!(ra.record.epochs.len(), 5);
        assert!(ra.init.is_some());
        assert_eq!(ra.record.to_csv().lines().count(), 6);
    }

    #[test]
    fn scheduler_carves_holdout() {
        let data = small_moons();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 32,
            scheduler: Some(PlateauConfig { factor: 0.5, patience: 0 }),
            seed: 1,
            ..TrainConfig::default()
        };
        let mut mlp = Mlp::<f32>::new(&MlpConfig {
            input_dim: 2,
            width: 8,
            hidden_layers: 1,
            num_classes: 4,
            seed: 0,
        })
        .unwrap();
        let out = train(&mut mlp, &data, &cfg, None).unwrap();
        assert!(out.record.epochs.iter().all(|e| e.val_loss.is_some()));
        assert!(out.init.is_none());
        // lr never increases
        assert!(out.record.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = small_moons();
        let mut net = Network::<f32>::new(NetworkConfig::uniform(3, 1, 4, 4, 4)).unwrap();
        assert!(matches!(train(&mut net, &data, &TrainConfig::default(), None), Err(Error::Dimension(_))));
        let mut net = Network::<f32>::new(NetworkConfig::uniform(2, 1, 4, 4, 4)).unwrap();
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut net, &data, &cfg, None), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let data = small_moons();
        let mut cfg = NetworkConfig::uniform(2, 1, 4, 4, 4);
        cfg.seed = 1;
        let mut net = Network::<f32>::new(cfg).unwrap();
        crate::init::lazy_init_network(&mut net, &data.features.slice_rows(0, 20), 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        net.layers_mut()[0].projections.as_mut().unwrap().data_mut()[0] = f32::NAN;
        let err = train(
            &mut net,
            &data,
            &TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { epoch: 1, batch: 0, .. }), "{err}");
    }
}
