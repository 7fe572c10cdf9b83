//! Headless simulated participants. They reach the platform only through
//! its HTTP API and generate behavior from simple parametric models.

pub mod cohort;
pub mod driver;
pub mod models;
pub mod run;

use thiserror::Error;
use vrlab_client::ClientError;
use vrlab_core::api::RedirectReason;

pub use cohort::{bundled, run_cohort, Behavior, CohortOptions, CohortOutcome, CohortSpec, Dist, Segment};
pub use driver::{run_participant, ParticipantModel, ParticipantOptions, SessionRecord};
pub use models::{DrummerModel, MoverModel, ResponderModel};
pub use run::{bundled_experiment, export_all, run_experiment, RunPlan, RunSummary};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("join redirected: {0:?}")]
    Redirected(RedirectReason),
    #[error("flow made no progress in state `{0}`")]
    Stuck(String),
    #[error("a cohort needs at least one participant")]
    EmptyCohort,
    #[error("invalid model: {0}")]
    Model(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}
