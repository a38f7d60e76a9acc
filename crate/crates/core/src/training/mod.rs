//! Loss, adversarial perturbation, optimization and the epoch loop.

mod adam;
mod adversarial;
pub mod classifier;
mod config;
mod fit;
mod step;

pub use adam::Adam;
pub use adversarial::{adversarial_perturbation, normalized_step};
pub use config::{AdvSign, LossReduction, TrainConfig};
pub use fit::{evaluate_loss, fit, run_with_early_stopping, EpochRecord, FitResult, LossSummary, Stopped};
pub use step::{LossReport, Trainer};
