//! Transferability of norm-bounded adversarial examples crafted on a
//! substitute network, and the capacity quantities that bound how well such
//! attacks generalize.
//!
//! The crate covers
//!
//! * dense bias-free networks with exact gradients ([`nn`]),
//! * FGM, FGSM, PGD and the λ-optimal fixed-point attack ([`attacks`]),
//! * spectral capping and early stopping ([`specreg`]) inside ERM and
//!   adversarial training loops ([`trainer`]),
//! * smoothness constants, norm-based capacities and bound checks
//!   ([`capacity`]),
//! * transferability and generalization measures ([`metrics`]),
//! * datasets, model files and key-value reports ([`data`], [`io`]),
//! * the full substitute/target pipeline ([`experiment`]).

pub mod attacks;
pub mod capacity;
pub mod data;
pub mod error;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod specreg;
pub mod trainer;

pub use attacks::{AttackMethod, AttackResult, AttackSpec, BoxDomain, StepSize};
pub use capacity::{BoundParams, CapacityReport};
pub use data::{Dataset, Lineage};
pub use error::{Error, ErrorKind, Result};
pub use experiment::{ExperimentConfig, ExperimentReport};
pub use linalg::{Matrix, Vector};
pub use metrics::{TransferScore, TransferabilityRate};
pub use nn::{Activation, Architecture, Loss, Network};
pub use specreg::{EarlyStopState, SpectralCap};
pub use trainer::{Optimizer, TrainConfig, TrainReport};
