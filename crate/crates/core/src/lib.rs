//! Depth-2 ReLU networks on sphere data: a robust constructor, a max-margin
//! training loop, universal perturbations along `Σ_i y_i x_i`, and KKT
//! diagnostics for trained parameters.

// `!(x > 0.0)` style guards are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod dataset;
pub mod error;
pub mod kkt;
pub mod network;
pub mod nnls;
pub mod rng;
pub mod robust;
pub mod trainer;

pub use attack::{
    empirical_perturbation, margin_set, min_flip_size, theoretical_perturbation,
    universal_direction, FlipReport, MarginReport, PerturbationMode, PerturbationReport,
};
pub use dataset::{
    correlation_stats, orthogonal_dataset, sample_sphere, CorrelationStats, Dataset, DatasetSource,
    LabelRule,
};
pub use error::{Error, Result};
pub use kkt::{antipodal_kkt_fixture, kkt_residual, normalize_to_margin, KktReport};
pub use network::{LossKind, NetworkParams};
pub use robust::{build_robust, certify_radius, CertifyReport, RobustCertificate};
pub use trainer::{init_params, lr_at, train, TrainConfig, TrainReport};
