//! Depth sweep on moons: AUROC of ID test points against a far-field ring,
//! for the RBF network and the softmax MLP at several depths and seeds.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{prepare_data, ModelKind, RunConfig};
use crate::data::uniform_ring;
use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::mlp::Mlp;
use crate::model::Classifier;
use crate::rbf::Network;
use crate::train::train;

pub const RING_RADII: (f64, f64) = (5.0, 6.0);
const RING_SEED_OFFSET: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepCell {
    /// Hidden layers: RBF networks have `depth + 1` layers, MLPs `depth`
    /// hidden ReLU layers.
    pub depth: usize,
    pub model: ModelKind,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepResult {
    pub cell: SweepCell,
    pub auroc: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepSummary {
    pub depth: usize,
    pub model: ModelKind,
    pub mean_auroc: f64,
    /// Population standard deviation over seeds.
    pub std_auroc: f64,
    pub mean_test_accuracy: f64,
    pub runs: usize,
}

fn model_name(m: ModelKind) -> &'static str {
    match m {
        ModelKind::Mlrbfn => "mlrbfn",
        ModelKind::Mlp => "mlp",
    }
}

/// Cells in output order: depth, then model, then seed `0..seeds`.
pub fn sweep_cells(depths: &[usize], models: &[ModelKind], seeds: u64) -> Vec<SweepCell> {
    let mut out = Vec::new();
    for &depth in depths {
        for &model in models {
            for seed in 0..seeds {
                out.push(SweepCell { depth, model, seed });
            }
        }
    }
    out
}

pub fn cell_config(base: &RunConfig, cell: SweepCell) -> Result<RunConfig> {
    if cell.depth == 0 {
        return Err(Error::Usage("sweep depths must be >= 1".into()));
    }
    let width = *base
        .hidden_centroids
        .first()
        .ok_or_else(|| Error::Usage("base config has no hidden layers".into()))?;
    let cfg = RunConfig {
        model: cell.model,
        hidden_centroids: vec![width; cell.depth],
        mlp_hidden_layers: cell.depth,
        seed: cell.seed,
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Trains one cell on `base`'s dataset and scores the ID test split against
/// `ood_n` ring points drawn in normalized input space.
pub fn run_cell(base: &RunConfig, cell: SweepCell, ood_n: usize, root: &Path) -> Result<SweepResult> {
    let cfg = cell_config(base, cell)?;
    let data = prepare_data(&cfg, root)?;
    let test = data
        .test
        .as_ref()
        .ok_or_else(|| Error::Usage("depth sweep needs a test split".into()))?;
    if test.dim() != 2 {
        return Err(Error::Dimension(format!("ring OOD needs 2-D inputs, data has {}", test.dim())));
    }
    let ring = uniform_ring(ood_n, RING_RADII.0, RING_RADII.1, RING_SEED_OFFSET + cell.seed);
    let (d, c) = (data.train.dim(), data.train.num_classes);
    let tc = cfg.train_config();
    let model: Box<dyn Classifier> = match cell.model {
        ModelKind::Mlrbfn => {
            let mut net = Network::<f32>::new(cfg.network_config(d, c))?;
            train(&mut net, &data.train, &tc, None)?;
            Box::new(net)
        }
        ModelKind::Mlp => {
            let mut mlp = Mlp::<f32>::new(&cfg.mlp_config(d, c))?;
            train(&mut mlp, &data.train, &tc, None)?;
            Box::new(mlp)
        }
    };
    let id = model.score(&test.features)?;
    let ood = model.score(&ring.features)?;
    Ok(SweepResult {
        cell,
        auroc: auroc(&id.scores, &ood.scores)?,
        test_accuracy: id.accuracy(test.labels()?),
    })
}

/// One row per `(depth, model)` in first-seen order.
pub fn summarize(results: &[SweepResult]) -> Vec<SweepSummary> {
    let mut keys: Vec<(usize, ModelKind)> = Vec::new();
    for r in results {
        let k = (r.cell.depth, r.cell.model);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(depth, model)| {
            let rs: Vec<&SweepResult> = results
                .iter()
                .filter(|r| r.cell.depth == depth && r.cell.model == model)
                .collect();
            let n = rs.len() as f64;
            let mean = rs.iter().map(|r| r.auroc).sum::<f64>() / n;
            let var = rs.iter().map(|r| (r.auroc - mean).powi(2)).sum::<f64>() / n;
            SweepSummary {
                depth,
                model,
                mean_auroc: mean,
                std_auroc: var.sqrt(),
                mean_test_accuracy: rs.iter().map(|r| r.test_accuracy).sum::<f64>() / n,
                runs: rs.len(),
            }
        })
        .collect()
}

pub fn results_csv(results: &[SweepResult]) -> String {
    let mut out = String::from("depth,model,seed,auroc,test_accuracy\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4}",
            r.cell.depth,
            model_name(r.cell.model),
            r.cell.seed,
            r.auroc,
            r.test_accuracy
        );
    }
    out
}

pub fn summary_csv(summary: &[SweepSummary]) -> String {
    let mut out = String::from("depth,model,auroc_mean,auroc_std,test_accuracy_mean,runs\n");
    for s in summary {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{}",
            s.depth,
            model_name(s.model),
            s.mean_auroc,
            s.std_auroc,
            s.mean_test_accuracy,
            s.runs
        );
    }
    out
}
