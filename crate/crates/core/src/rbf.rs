//! Multi-layer RBF network forward pass.
//!
//! Hidden layers map `(φ, dep)` to `(φ', dep')`:
//!
//! ```text
//! s    = (β⁺ / β⁺_init) · exp(−β⁺ · ‖φ − c‖_k^k)
//! gate = min(dep · rec, 1)
//! n    = s · gate
//! dep' = max_c n
//! φ'   = n · A
//! ```
//!
//! The last layer has one centroid per class, no projection and no width
//! ratio, and works in log space:
//! `log φ_c = −β⁺_c · ‖φ − c_c‖_k^k + min(ln dep + ln rec, 0)`.
//!
//! With the gate disabled the network degrades to plain stacked RBF layers
//! with projections (`s = exp(−β⁺·d)`, no gating), which exhibits the
//! zero-mapped-class failure.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::tape::{softplus_scalar, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Floor applied to the incoming depression before taking its log.
pub const DEPRESSION_FLOOR: f64 = 1e-30;

/// Default recovery constant.
pub const DEFAULT_RECOVERY: f64 = 1.05;

/// Recovery constant used by the original reference code.
pub const REFERENCE_CODE_RECOVERY: f64 = 1.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HiddenSpec {
    pub centroids: usize,
    pub projection: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden: Vec<HiddenSpec>,
    pub num_classes: usize,
    pub k: f64,
    pub recovery: f64,
    pub depression: bool,
    pub seed: u64,
}

impl NetworkConfig {
    /// `hidden_layers` hidden layers of `centroids` centroids projecting to
    /// `projection` features.
    pub fn uniform(
        input_dim: usize,
        hidden_layers: usize,
        centroids: usize,
        projection: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            input_dim,
            hidden: vec![
                HiddenSpec {
                    centroids,
                    projection
                };
                hidden_layers
            ],
            num_classes,
            k: 2.0,
            recovery: DEFAULT_RECOVERY,
            depression: true,
            seed: 0,
        }
    }

    /// Total number of RBF layers, final layer included.
    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Usage("an MLRBFN needs at least one hidden layer".into()));
        }
        if !(self.recovery > 1.0) {
            return Err(Error::Usage(format!("recovery must exceed 1, got {}", self.recovery)));
        }
        if !(self.k >= 1.0) {
            return Err(Error::Usage(format!("norm order must be >= 1, got {}", self.k)));
        }
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::Usage("input_dim and num_classes must be positive".into()));
        }
        if self
            .hidden
            .iter()
            .any(|h| h.centroids == 0 || h.projection == 0)
        {
            return Err(Error::Usage("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters of one RBF layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfLayer<T> {
    /// `N x d_in`
    pub centroids: Tensor<T>,
    /// `1 x N`, before softplus
    pub beta_raw: Tensor<T>,
    /// `1 x N`, frozen after initialization
    pub beta_init_raw: Tensor<T>,
    /// `N x o`; `None` for the final layer
    pub projections: Option<Tensor<T>>,
    pub k: f64,
}

impl<T: Scalar> RbfLayer<T> {
    pub fn num_centroids(&self) -> usize {
        self.centroids.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.projections
            .as_ref()
            .map_or(self.num_centroids(), Tensor::cols)
    }

    pub fn is_final(&self) -> bool {
        self.projections.is_none()
    }

    /// `softplus(beta_raw)` as `f64`.
    pub fn inverse_widths(&self) -> Vec<f64> {
        self.beta_raw
            .data()
            .iter()
            .map(|&b| softplus_scalar(b.as_f64()))
            .collect()
    }

    /// Places this layer's parameters on a tape; `beta_init_raw` is always a
    /// constant.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> LayerVars {
        let leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LayerVars {
            centroids: leaf(&self.centroids),
            beta_raw: leaf(&self.beta_raw),
            inv_beta_init: tape.constant(self.beta_init_raw.map(|b| T::one() / softplus_scalar(b))),
            projections: self.projections.as_ref().map(leaf),
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        let n = self.num_centroids();
        self.beta_raw.expect_shape((1, n), "beta_raw")?;
        self.beta_init_raw.expect_shape((1, n), "beta_init_raw")?;
        if let Some(p) = &self.projections {
            if p.rows() != n {
                return dim_err(format!("projections have {} rows for {n} centroids", p.rows()));
            }
        }
        Ok(())
    }
}

/// Tape handles for one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub centroids: Var,
    pub beta_raw: Var,
    /// `1 / softplus(beta_init_raw)`, constant.
    pub inv_beta_init: Var,
    pub projections: Option<Var>,
}

/// `−β⁺ ⊙ ‖x − c‖_k^k`, shared by every layer variant.
fn neg_scaled_distance<T: Scalar>(tape: &Tape<T>, x: Var, layer: &LayerVars, k: f64) -> Result<(Var, Var)> {
    let d = tape.cdist_pow(x, layer.centroids, k)?;
    let sb = tape.softplus(layer.beta_raw);
    let scaled = tape.mul_row(d, sb)?;
    Ok((tape.neg(scaled), sb))
}

/// Depression-gated hidden layer. `dep` is an `m x 1` column;
/// returns `(φ, dep_out)`.
pub fn hidden_forward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    dep: Var,
    layer: &LayerVars,
    k: f64,
    recovery: f64,
) -> Result<(Var, Var)> {
    let projections = layer
        .projections
        .ok_or_else(|| Error::Usage("hidden_forward on a final layer".into()))?;
    let (logits, sb) = neg_scaled_distance(tape, x, layer, k)?;
    let ratio = tape.mul(sb, layer.inv_beta_init)?;
    let e = tape.exp(logits);
    let s = tape.mul_row(e, ratio)?;
    let scaled_dep = tape.scale(dep, T::of(recovery));
    let gate = tape.min_const(scaled_dep, T::one());
    let n = tape.mul_col(s, gate)?;
    let dep_out = tape.max_over_cols(n)?;
    let phi = tape.matmul(n, projections)?;
    Ok((phi, dep_out))
}

/// Final layer in log space; returns `m x C` log-confidences.
pub fn final_forward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    dep: Var,
    layer: &LayerVars,
    k: f64,
    recovery: f64,
) -> Result<Var> {
    if layer.projections.is_some() {
        return Err(Error::Usage("final_forward on a hidden layer".into()));
    }
    let (log_s, _) = neg_scaled_distance(tape, x, layer, k)?;
    let floored = tape.clamp_min(dep, T::of(DEPRESSION_FLOOR));
    let log_dep = tape.ln(floored)?;
    let shifted = tape.add_scalar(log_dep, T::of(recovery.ln()));
    let log_gate = tape.min_const(shifted, T::zero());
    tape.add_col(log_s, log_gate)
}

/// Ungated hidden layer: `φ' = exp(−β⁺·d) · A`.
pub fn plain_hidden_forward<T: Scalar>(tape: &Tape<T>, x: Var, layer: &LayerVars, k: f64) -> Result<Var> {
    let projections = layer
        .projections
        .ok_or_else(|| Error::Usage("plain_hidden_forward on a final layer".into()))?;
    let (logits, _) = neg_scaled_distance(tape, x, layer, k)?;
    let s = tape.exp(logits);
    tape.matmul(s, projections)
}

/// Ungated final layer: `log φ_c = −β⁺_c · d`.
pub fn plain_final_forward<T: Scalar>(tape: &Tape<T>, x: Var, layer: &LayerVars, k: f64) -> Result<Var> {
    Ok(neg_scaled_distance(tape, x, layer, k)?.0)
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardState<T> {
    /// `φ_ℓ` for `ℓ = 1..L−1`
    pub activations: Vec<Tensor<T>>,
    /// `dep_ℓ` for `ℓ = 0..L−1`, each `m x 1`
    pub depressions: Vec<Tensor<T>>,
    /// `m x C`
    pub log_probs: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    layers: Vec<RbfLayer<T>>,
    initialized: bool,
}

impl<T: Scalar> Network<T> {
    /// Random parameters from `config.seed`: standard-normal centroids and
    /// projections, `beta_raw = beta_init_raw = 1`. Data-driven
    /// initialization replaces centroids and widths before training.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut randn = |r: usize, c: usize| {
            let data = (0..r * c)
                .map(|_| T::of(StandardNormal.sample(&mut rng)))
                .collect();
            Tensor::from_vec(r, c, data).expect("shape")
        };
        let mut layers = Vec::with_capacity(config.depth());
        let mut d_in = config.input_dim;
        for h in &config.hidden {
            layers.push(RbfLayer {
                centroids: randn(h.centroids, d_in),
                beta_raw: Tensor::ones(1, h.centroids),
                beta_init_raw: Tensor::ones(1, h.centroids),
                projections: Some(randn(h.centroids, h.projection)),
                k: config.k,
            });
            d_in = h.projection;
        }
        layers.push(RbfLayer {
            centroids: randn(config.num_classes, d_in),
            beta_raw: Tensor::ones(1, config.num_classes),
            beta_init_raw: Tensor::ones(1, config.num_classes),
            projections: None,
            k: config.k,
        });
        Ok(Self {
            config,
            layers,
            initialized: false,
        })
    }

    /// Assembles a network from explicit layers; checks the dimension chain.
    pub fn from_layers(config: NetworkConfig, layers: Vec<RbfLayer<T>>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.depth() {
            return dim_err(format!(
                "{} layers for a depth-{} config",
                layers.len(),
                config.depth()
            ));
        }
        let mut d_in = config.input_dim;
        for (i, layer) in layers.iter().enumerate() {
            layer.check()?;
            if layer.input_dim() != d_in {
                return dim_err(format!(
                    "layer {i} expects {} inputs, previous layer yields {d_in}",
                    layer.input_dim()
                ));
            }
            let is_last = i + 1 == layers.len();
            if layer.is_final() != is_last {
                return dim_err(format!("layer {i}: projections must be present exactly on hidden layers"));
            }
            if is_last {
                if layer.num_centroids() != config.num_classes {
                    return dim_err(format!(
                        "final layer has {} centroids for {} classes",
                        layer.num_centroids(),
                        config.num_classes
                    ));
                }
            } else if config.hidden[i]
                != (HiddenSpec {
                    centroids: layer.num_centroids(),
                    projection: layer.output_dim(),
                })
            {
                return dim_err(format!("layer {i} disagrees with config"));
            }
            d_in = layer.output_dim();
        }
        Ok(Self {
            config,
            layers,
            initialized: true,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[RbfLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [RbfLayer<T>] {
        &mut self.layers
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub(crate) fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    /// Trainable tensors in binding order: per layer centroids, beta_raw,
    /// then projections when present.
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.centroids);
            out.push(&l.beta_raw);
            if let Some(p) = &l.projections {
                out.push(p);
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.centroids);
            out.push(&mut l.beta_raw);
            if let Some(p) = &mut l.projections {
                out.push(p);
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<LayerVars> {
        self.layers.iter().map(|l| l.bind(tape, trainable)).collect()
    }

    /// Rebuilds per-layer handles from a flat slice in [`Network::parameters`] order.
    pub fn bind_from(&self, tape: &Tape<T>, params: &[Var]) -> Result<Vec<LayerVars>> {
        let mut it = params.iter().copied();
        let mut out = Vec::with_capacity(self.layers.len());
        let mut next = || it.next().ok_or_else(|| Error::Usage("too few parameter handles".into()));
        for l in &self.layers {
            let centroids = next()?;
            let beta_raw = next()?;
            let projections = if l.projections.is_some() { Some(next()?) } else { None };
            out.push(LayerVars {
                centroids,
                beta_raw,
                inv_beta_init: tape.constant(l.beta_init_raw.map(|b| T::one() / softplus_scalar(b))),
                projections,
            });
        }
        Ok(out)
    }

    /// Forward through every layer on `tape`, threading depression when
    /// enabled. Returns the log-confidences and, per hidden layer, the
    /// `(φ, dep)` handles.
    pub fn forward_on_tape(
        &self,
        tape: &Tape<T>,
        vars: &[LayerVars],
        x: Var,
        dep0: Var,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let (k, rec) = (self.config.k, self.config.recovery);
        let (hidden, last) = vars.split_at(vars.len() - 1);
        let mut phi = x;
        let mut dep = dep0;
        let mut trace = Vec::with_capacity(hidden.len());
        for lv in hidden {
            if self.config.depression {
                let (p, d) = hidden_forward(tape, phi, dep, lv, k, rec)?;
                phi = p;
                dep = d;
            } else {
                phi = plain_hidden_forward(tape, phi, lv, k)?;
            }
            trace.push((phi, dep));
        }
        let out = if self.config.depression {
            final_forward(tape, phi, dep, &last[0], k, rec)?
        } else {
            plain_final_forward(tape, phi, &last[0], k)?
        };
        Ok((out, trace))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return dim_err(format!(
                "network expects {} features, got {}",
                self.config.input_dim,
                x.cols()
            ));
        }
        Ok(())
    }

    /// Inference with an explicit initial depression (`m x 1`).
    pub fn forward_trace_with(&self, x: &Tensor<T>, dep0: &Tensor<T>) -> Result<ForwardState<T>> {
        self.check_input(x)?;
        dep0.expect_shape((x.rows(), 1), "initial depression")?;
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let d0 = tape.constant(dep0.clone());
        let (out, trace) = self.forward_on_tape(&tape, &vars, xv, d0)?;
        let mut activations = Vec::with_capacity(trace.len());
        let mut depressions = vec![dep0.clone()];
        for (p, d) in trace {
            activations.push(tape.value(p).clone());
            depressions.push(tape.value(d).clone());
        }
        let log_probs = tape.value(out).clone();
        Ok(ForwardState {
            activations,
            depressions,
            log_probs,
        })
    }

    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<ForwardState<T>> {
        self.forward_trace_with(x, &Tensor::ones(x.rows(), 1))
    }

    /// `m x C` log-confidences with `dep_0 = 1`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let d0 = tape.constant(Tensor::ones(x.rows(), 1));
        let (out, _) = self.forward_on_tape(&tape, &vars, xv, d0)?;
        let v = tape.value(out).clone();
        Ok(v)
    }
}

/// Per-row `exp(max log-confidence)` and its argmax (ties to the lowest index).
pub fn max_confidence<T: Scalar>(log_probs: &Tensor<T>) -> (Vec<T>, Vec<usize>) {
    let mut scores = Vec::with_capacity(log_probs.rows());
    let mut preds = Vec::with_capacity(log_probs.rows());
    for i in 0..log_probs.rows() {
        let row = log_probs.row_slice(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        scores.push(row[best].exp());
        preds.push(best);
    }
    (scores, preds)
}
