//! Split execution engine: model, trusted and untrusted contexts, training
//! and integrity checking.

pub mod boundary;
pub mod data;
pub mod integrity;
pub mod loss;
pub mod model;
pub mod pages;
pub mod plain;
pub mod split;
pub mod train;
pub mod trusted;
pub mod untrusted;

pub use boundary::{BoundaryObserver, BoundaryRecorder, Crossing, SecretAudit, SecretKind, SecretLedger};
pub use data::{synthetic_blobs, synthetic_xor, Dataset};
pub use integrity::{
    inject_tamper, propagation_factor, verify_integrity, IntegrityReport, IntegrityStatus, Perturbation, TamperPolicy,
    DEFAULT_THRESHOLD,
};
pub use loss::Loss;
pub use model::{load_model, save_model, sgd_step, Layer, LayerSpec, Model};
pub use plain::{accuracy, plain_batch_gradient, plain_forward, PlainTrainer};
pub use split::{backward_split, forward_split, ForwardOutput, LayerResidual, Mode};
pub use train::{train, BatchGradient, MetricRecord, TrainConfig, Trainer};
pub use trusted::{TrustedConfig, TrustedContext};
pub use untrusted::UntrustedContext;
