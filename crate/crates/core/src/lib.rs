//! Multi-layer radial basis function networks whose depression gate gives
//! calibrated "I don't know" answers far from the training data.
//!
//! The crate is self-contained: a small reverse-mode autodiff [`Tape`] over
//! dense [`Tensor`]s, the RBF layers and their data-driven initialization,
//! the log-space BCE loss, Adam, datasets, a softmax MLP baseline and OOD
//! metrics.
//!
//! ```
//! use mlrbfn::{Classifier, Network, NetworkConfig, Tensor};
//!
//! let net = Network::<f32>::new(NetworkConfig::uniform(2, 2, 8, 6, 4)).unwrap();
//! let scored = net.score(&Tensor::<f32>::from_rows(&[[0.0, 1.0], [3.0, -2.0]])).unwrap();
//! assert_eq!(scored.predictions.len(), 2);
//! assert!(scored.scores.iter().all(|s| (0.0..=1.0).contains(s)));
//! ```

pub mod config;
pub mod data;
pub mod error;
pub mod init;
pub mod loss;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod optim;
pub mod persist;
pub mod rbf;
pub mod sweep;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{ModelKind, RunConfig};
pub use data::{LabeledDataset, Moons4, NormStats};
pub use error::{Error, Result};
pub use init::{lazy_init_network, InitReport};
pub use loss::{log_bce, log_bce_value};
pub use metrics::{auroc, aupr_out, fpr_at_tpr, Bounds, ConfidenceGrid, OodReport};
pub use mlp::{Mlp, MlpConfig};
pub use model::{Classifier, Scored, Trainable};
pub use optim::{Adam, AdamConfig, PlateauConfig, PlateauScheduler};
pub use persist::AnyModel;
pub use rbf::{HiddenSpec, Network, NetworkConfig, RbfLayer};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
pub use train::{train, TrainConfig, TrainOutcome, TrainRecord};
