//! Run configuration: flat `key = value` text, named presets, and the
//! end-to-end train pipeline used by the CLI and the acceptance suite.
//!
//! Grammar: one `key = value` per line; `#` starts a comment; blank lines
//! are ignored; keys are lower-case; duplicate or unknown keys are errors.
//! Lists are comma-separated. Environment variables `MLRBFN_<KEY>` (key in
//! upper case) override file values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{load_feature_matrix, load_idx, normalize, LabeledDataset, Moons4, NormStats};
use crate::error::{Error, Result};
use crate::mlp::{Mlp, MlpConfig};
use crate::model::Classifier;
use crate::optim::{AdamConfig, PlateauConfig};
use crate::persist::AnyModel;
use crate::rbf::{HiddenSpec, Network, NetworkConfig, DEFAULT_RECOVERY};
use crate::train::{train, TrainConfig, TrainOutcome};

pub const ENV_PREFIX: &str = "MLRBFN_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Mlrbfn,
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Moons {
        n_train: usize,
        n_test: usize,
        noise: f64,
        seed: u64,
    },
    /// IDX image/label files, pixels scaled to `[0, 1]`.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
    /// Feature-matrix files.
    Features { train: PathBuf, test: Option<PathBuf> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub dataset: DatasetSpec,
    /// Keep only the first `n` training rows.
    pub train_subset: Option<usize>,
    pub standardize: bool,
    pub hidden_centroids: Vec<usize>,
    pub projection: usize,
    pub k: f64,
    pub recovery: f64,
    pub depression: bool,
    pub mlp_width: usize,
    pub mlp_hidden_layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_batch_size: Option<usize>,
    pub kmeans_passes: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub scheduler: bool,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

pub const PRESETS: &[&str] = &["moons", "mnist", "feature-head"];

impl RunConfig {
    /// Three layers `N = 50/50/4`, `o = 100`, `k = 2`, 250 epochs of batch 100.
    pub fn moons() -> Self {
        Self {
            model: ModelKind::Mlrbfn,
            dataset: DatasetSpec::Moons {
                n_train: 1000,
                n_test: 500,
                noise: 0.2,
                seed: 0,
            },
            train_subset: None,
            standardize: true,
            hidden_centroids: vec![50, 50],
            projection: 100,
            k: 2.0,
            recovery: DEFAULT_RECOVERY,
            depression: true,
            mlp_width: 100,
            mlp_hidden_layers: 2,
            epochs: 250,
            batch_size: 100,
            init_batch_size: None,
            kmeans_passes: 100,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            scheduler: false,
            plateau_factor: 0.5,
            plateau_patience: 50,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }

    /// Four layers `N = 200/200/200/10`, batch 256, 200 epochs. The
    /// initialization batch is 512 rows so each half covers 200 centroids.
    pub fn mnist() -> Self {
        Self {
            dataset: DatasetSpec::Idx {
                train_images: "train-images-idx3-ubyte".into(),
                train_labels: "train-labels-idx1-ubyte".into(),
                test_images: Some("t10k-images-idx3-ubyte".into()),
                test_labels: Some("t10k-labels-idx1-ubyte".into()),
            },
            standardize: false,
            hidden_centroids: vec![200, 200, 200],
            epochs: 200,
            batch_size: 256,
            init_batch_size: Some(512),
            ..Self::moons()
        }
    }

    /// Four layers of 50 centroids over precomputed features, batch 128,
    /// 500 epochs, plateau scheduler.
    pub fn feature_head() -> Self {
        Self {
            dataset: DatasetSpec::Features {
                train: "train.mlfx".into(),
                test: None,
            },
            hidden_centroids: vec![50, 50, 50],
            epochs: 500,
            batch_size: 128,
            scheduler: true,
            ..Self::moons()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "moons" => Ok(Self::moons()),
            "mnist" => Ok(Self::mnist()),
            "feature-head" => Ok(Self::feature_head()),
            _ => Err(Error::Usage(format!("unknown preset {name:?}; known: {}", PRESETS.join(", ")))),
        }
    }

    pub fn network_config(&self, input_dim: usize, num_classes: usize) -> NetworkConfig {
        NetworkConfig {
            input_dim,
            hidden: self
                .hidden_centroids
                .iter()
                .map(|&centroids| HiddenSpec {
                    centroids,
                    projection: self.projection,
                })
                .collect(),
            num_classes,
            k: self.k,
            recovery: self.recovery,
            depression: self.depression,
            seed: self.seed,
        }
    }

    pub fn mlp_config(&self, input_dim: usize, num_classes: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            width: self.mlp_width,
            hidden_layers: self.mlp_hidden_layers,
            num_classes,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            init_batch_size: self.init_batch_size,
            kmeans_passes: self.kmeans_passes,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            scheduler: self.scheduler.then_some(PlateauConfig {
                factor: self.plateau_factor,
                patience: self.plateau_patience,
            }),
            holdout_fraction: self.holdout_fraction,
            seed: self.seed,
        }
    }

    /// Cross-field checks that do not need data.
    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(Error::Usage(m));
        if self.epochs == 0 {
            return usage("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return usage(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) {
            return usage("lr and eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return usage("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return usage("holdout_fraction must lie in [0, 1)".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return usage("plateau_factor must lie in (0, 1)".into());
        }
        match self.model {
            ModelKind::Mlrbfn => {
                if self.hidden_centroids.is_empty() || self.hidden_centroids.contains(&0) || self.projection == 0 {
                    return usage("hidden_centroids must be non-empty and positive, projection positive".into());
                }
                self.network_config(1, 1).validate()
            }
            ModelKind::Mlp => {
                if self.mlp_hidden_layers > 0 && self.mlp_width == 0 {
                    return usage("mlp_width must be positive".into());
                }
                Ok(())
            }
        }
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = vec![(
            "model",
            match self.model {
                ModelKind::Mlrbfn => "mlrbfn",
                ModelKind::Mlp => "mlp",
            }
            .to_string(),
        )];
        match &self.dataset {
            DatasetSpec::Moons { n_train, n_test, noise, seed } => {
                out.push(("dataset", "moons".into()));
                out.push(("moons_n_train", n_train.to_string()));
                out.push(("moons_n_test", n_test.to_string()));
                out.push(("moons_noise", noise.to_string()));
                out.push(("moons_seed", seed.to_string()));
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                out.push(("dataset", "idx".into()));
                out.push(("train_images", train_images.display().to_string()));
                out.push(("train_labels", train_labels.display().to_string()));
                out.push(("test_images", opt_path(test_images)));
                out.push(("test_labels", opt_path(test_labels)));
            }
            DatasetSpec::Features { train, test } => {
                out.push(("dataset", "features".into()));
                out.push(("train_features", train.display().to_string()));
                out.push(("test_features", opt_path(test)));
            }
        }
        let list = self.hidden_centroids.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        out.extend([
            ("train_subset", self.train_subset.map(|v| v.to_string()).unwrap_or_default()),
            ("standardize", self.standardize.to_string()),
            ("hidden_centroids", list),
            ("projection", self.projection.to_string()),
            ("k", self.k.to_string()),
            ("recovery", self.recovery.to_string()),
            ("depression", self.depression.to_string()),
            ("mlp_width", self.mlp_width.to_string()),
            ("mlp_hidden_layers", self.mlp_hidden_layers.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("init_batch_size", self.init_batch_size.map(|v| v.to_string()).unwrap_or_default()),
            ("kmeans_passes", self.kmeans_passes.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("scheduler", self.scheduler.to_string()),
            ("plateau_factor", self.plateau_factor.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("holdout_fraction", self.holdout_fraction.to_string()),
            ("seed", self.seed.to_string()),
        ]);
        out
    }

    /// Every key with its resolved value; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses `text` on top of `preset` (or the moons preset). A `preset`
    /// key in the text selects the base.
    pub fn parse(text: &str, base: Option<RunConfig>) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        Self::from_pairs(pairs, base)
    }

    /// Every key the parser accepts.
    pub fn known_keys() -> Vec<&'static str> {
        let mut keys: Vec<&'static str> = PRESETS
            .iter()
            .flat_map(|p| Self::preset(p).expect("preset").entries())
            .map(|(k, _)| k)
            .chain(["preset"])
            .collect();
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    /// File values, then `MLRBFN_*` environment overrides. Environment
    /// variables that name no config key are ignored.
    pub fn from_file_with_env(path: Option<&Path>, base: Option<RunConfig>) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => parse_pairs(&std::fs::read_to_string(p).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?)?,
            None => BTreeMap::new(),
        };
        let known = Self::known_keys();
        for (k, v) in std::env::vars() {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                if known.contains(&key.as_str()) {
                    pairs.insert(key, v);
                }
            }
        }
        Self::from_pairs(pairs, base)
    }

    fn from_pairs(mut pairs: BTreeMap<String, String>, base: Option<RunConfig>) -> Result<Self> {
        let mut cfg = match pairs.remove("preset") {
            Some(name) => Self::preset(&name)?,
            None => base.unwrap_or_else(Self::moons),
        };
        let dataset_kind = pairs.remove("dataset");
        let mut take = |key: &str| pairs.remove(key);
        match dataset_kind.as_deref() {
            None => {}
            Some("moons") if !matches!(cfg.dataset, DatasetSpec::Moons { .. }) => {
                cfg.dataset = RunConfig::moons().dataset;
            }
            Some("idx") if !matches!(cfg.dataset, DatasetSpec::Idx { .. }) => {
                cfg.dataset = RunConfig::mnist().dataset;
            }
            Some("features") if !matches!(cfg.dataset, DatasetSpec::Features { .. }) => {
                cfg.dataset = RunConfig::feature_head().dataset;
            }
            Some("moons" | "idx" | "features") => {}
            Some(other) => return Err(Error::Usage(format!("unknown dataset {other:?}"))),
        }
        match &mut cfg.dataset {
            DatasetSpec::Moons { n_train, n_test, noise, seed } => {
                set(&mut take, "moons_n_train", n_train)?;
                set(&mut take, "moons_n_test", n_test)?;
                set(&mut take, "moons_noise", noise)?;
                set(&mut take, "moons_seed", seed)?;
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                set(&mut take, "train_images", train_images)?;
                set(&mut take, "train_labels", train_labels)?;
                set_opt(&mut take, "test_images", test_images)?;
                set_opt(&mut take, "test_labels", test_labels)?;
            }
            DatasetSpec::Features { train, test } => {
                set(&mut take, "train_features", train)?;
                set_opt(&mut take, "test_features", test)?;
            }
        }
        if let Some(v) = take("model") {
            cfg.model = match v.as_str() {
                "mlrbfn" => ModelKind::Mlrbfn,
                "mlp" => ModelKind::Mlp,
                _ => return Err(Error::Usage(format!("unknown model {v:?}"))),
            };
        }
        if let Some(v) = take("hidden_centroids") {
            cfg.hidden_centroids = v
                .split(',')
                .map(|s| parse_value::<usize>("hidden_centroids", s.trim()))
                .collect::<Result<_>>()?;
        }
        set_opt(&mut take, "train_subset", &mut cfg.train_subset)?;
        set(&mut take, "standardize", &mut cfg.standardize)?;
        set(&mut take, "projection", &mut cfg.projection)?;
        set(&mut take, "k", &mut cfg.k)?;
        set(&mut take, "recovery", &mut cfg.recovery)?;
        set(&mut take, "depression", &mut cfg.depression)?;
        set(&mut take, "mlp_width", &mut cfg.mlp_width)?;
        set(&mut take, "mlp_hidden_layers", &mut cfg.mlp_hidden_layers)?;
        set(&mut take, "epochs", &mut cfg.epochs)?;
        set(&mut take, "batch_size", &mut cfg.batch_size)?;
        set_opt(&mut take, "init_batch_size", &mut cfg.init_batch_size)?;
        set(&mut take, "kmeans_passes", &mut cfg.kmeans_passes)?;
        set(&mut take, "lr", &mut cfg.lr)?;
        set(&mut take, "beta1", &mut cfg.beta1)?;
        set(&mut take, "beta2", &mut cfg.beta2)?;
        set(&mut take, "eps", &mut cfg.eps)?;
        set(&mut take, "scheduler", &mut cfg.scheduler)?;
        set(&mut take, "plateau_factor", &mut cfg.plateau_factor)?;
        set(&mut take, "plateau_patience", &mut cfg.plateau_patience)?;
        set(&mut take, "holdout_fraction", &mut cfg.holdout_fraction)?;
        set(&mut take, "seed", &mut cfg.seed)?;
        if let Some(key) = pairs.keys().next() {
            return Err(Error::Usage(format!("unknown config key {key:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Usage(format!("config line {}: expected key = value", no + 1)));
        };
        let key = k.trim().to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Usage(format!("config line {}: duplicate key {key:?}", no + 1)));
        }
    }
    Ok(out)
}

fn parse_value<V: std::str::FromStr>(key: &str, v: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Usage(format!("config key {key}: {v:?}: {e}")))
}

fn set<V: std::str::FromStr>(take: &mut impl FnMut(&str) -> Option<String>, key: &str, slot: &mut V) -> Result<()>
where
    V::Err: std::fmt::Display,
{
    if let Some(v) = take(key) {
        *slot = parse_value(key, &v)?;
    }
    Ok(())
}

fn set_opt<V: std::str::FromStr>(take: &mut impl FnMut(&str) -> Option<String>, key: &str, slot: &mut Option<V>) -> Result<()>
where
    V::Err: std::fmt::Display,
{
    if let Some(v) = take(key) {
        *slot = if v.is_empty() { None } else { Some(parse_value(key, &v)?) };
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: LabeledDataset,
    pub test: Option<LabeledDataset>,
    pub norm: NormStats,
}

fn require(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("dataset file {} does not exist", p.display())))
    }
}

/// Loads or generates the datasets and standardizes them with training
/// statistics (identity statistics when `standardize` is off). Relative
/// paths resolve against `root`.
pub fn prepare_data(cfg: &RunConfig, root: &Path) -> Result<PreparedData> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
    let (mut train, mut test) = match &cfg.dataset {
        DatasetSpec::Moons { n_train, n_test, noise, seed } => {
            let (a, b) = Moons4 {
                n_train: *n_train,
                n_test: *n_test,
                noise: *noise,
                seed: *seed,
                ..Moons4::default()
            }
            .generate()?;
            (a, Some(b))
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let (ti, tl) = (resolve(train_images), resolve(train_labels));
            require(&ti)?;
            require(&tl)?;
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => {
                    let (i, l) = (resolve(i), resolve(l));
                    require(&i)?;
                    require(&l)?;
                    Some(load_idx(&i, &l)?)
                }
                (None, None) => None,
                _ => return Err(Error::Usage("test_images and test_labels go together".into())),
            };
            (load_idx(&ti, &tl)?, test)
        }
        DatasetSpec::Features { train, test } => {
            let t = resolve(train);
            require(&t)?;
            let test = match test {
                Some(p) => {
                    let p = resolve(p);
                    require(&p)?;
                    Some(load_feature_matrix(&p)?)
                }
                None => None,
            };
            (load_feature_matrix(&t)?, test)
        }
    };
    if let Some(n) = cfg.train_subset {
        train = train.head(n);
    }
    train.labels()?;
    let norm = if cfg.standardize {
        match test.as_mut() {
            Some(t) => normalize(&mut train, &mut [t])?,
            None => normalize(&mut train, &mut [])?,
        }
    } else {
        NormStats {
            mean: vec![0.0; train.dim()],
            std: vec![1.0; train.dim()],
        }
    };
    Ok(PreparedData { train, test, norm })
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub model: AnyModel,
    pub outcome: TrainOutcome,
    pub data: PreparedData,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

impl RunArtifacts {
    pub fn summary(&self) -> String {
        let test = self.test_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into());
        format!("train_accuracy = {:.4}\ntest_accuracy = {test}\n", self.train_accuracy)
    }
}

fn accuracy(model: &dyn Classifier, data: &LabeledDataset) -> Result<f64> {
    Ok(model.score(&data.features)?.accuracy(data.labels()?))
}

/// Builds, trains and evaluates the configured model.
pub fn run(cfg: &RunConfig, root: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    let data = prepare_data(cfg, root)?;
    let (d, c) = (data.train.dim(), data.train.num_classes);
    let tc = cfg.train_config();
    let (model, outcome) = match cfg.model {
        ModelKind::Mlrbfn => {
            let mut net = Network::<f32>::new(cfg.network_config(d, c))?;
            let out = train(&mut net, &data.train, &tc, None)?;
            (AnyModel::Rbf(net), out)
        }
        ModelKind::Mlp => {
            let mut mlp = Mlp::<f32>::new(&cfg.mlp_config(d, c))?;
            let out = train(&mut mlp, &data.train, &tc, None)?;
            (AnyModel::Mlp(mlp), out)
        }
    };
    let train_accuracy = accuracy(&model, &data.train)?;
    let test_accuracy = data.test.as_ref().map(|t| accuracy(&model, t)).transpose()?;
    Ok(RunArtifacts {
        model,
        outcome,
        data,
        train_accuracy,
        test_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let cfg = RunConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let back = RunConfig::parse(&cfg.to_text(), None).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn parse_overrides_and_rejects() {
        let cfg = RunConfig::parse("preset = mnist\n# comment\nepochs = 3 # trailing\nhidden_centroids = 7, 8\n", None).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.hidden_centroids, vec![7, 8]);
        assert_eq!(cfg.batch_size, 256);
        assert!(matches!(RunConfig::parse("colour = red", None), Err(Error::Usage(_))));
        assert!(matches!(RunConfig::parse("epochs = 1\nepochs = 2", None), Err(Error::Usage(_))));
        assert!(matches!(RunConfig::parse("epochs = many", None), Err(Error::Usage(_))));
        assert!(matches!(RunConfig::parse("recovery = 1.0", None), Err(Error::Usage(_))));
        assert!(matches!(RunConfig::parse("no equals sign", None), Err(Error::Usage(_))));
    }

    #[test]
    fn dataset_switch_uses_that_kinds_defaults() {
        let cfg = RunConfig::parse("dataset = features\ntrain_features = a.mlfx", None).unwrap();
        assert_eq!(
            cfg.dataset,
            DatasetSpec::Features {
                train: "a.mlfx".into(),
                test: None
            }
        );
        assert!(RunConfig::parse("dataset = csv", None).is_err());
    }

    #[test]
    fn missing_dataset_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::parse("dataset = features\ntrain_features = nothing.mlfx", None).unwrap();
        assert!(matches!(prepare_data(&cfg, dir.path()), Err(Error::Usage(_))));
    }

    #[test]
    fn short_run_end_to_end() {
        let cfg = RunConfig::parse("epochs = 2\nmoons_n_train = 200\nmoons_n_test = 100\nkmeans_passes = 3", None).unwrap();
        let art = run(&cfg, Path::new(".")).unwrap();
        assert_eq!(art.outcome.record.epochs.len(), 2);
        assert!(art.test_accuracy.is_some());
        let mlp = RunConfig { model: ModelKind::Mlp, ..cfg };
        assert_eq!(run(&mlp, Path::new(".")).unwrap().model.kind(), "mlp");
    }
}
