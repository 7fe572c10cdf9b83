//! Core model of the experiment platform: factorial trial plans, the
//! experiment flow state machine, questionnaires, the session data plane and
//! the orchestrator that ties them together.

pub mod api;
pub mod clock;
pub mod config;
pub mod dataplane;
pub mod error;
pub mod flow;
pub mod orchestrator;
pub mod questionnaire;
pub mod trial;
pub mod value;

pub use error::{ErrorKind, PlatformError, Result};
pub use orchestrator::{Platform, Settings};
pub use value::Scalar;
