//! Request and response bodies shared by the service and its clients.

use serde::{Deserialize, Serialize};

use crate::config::{AvatarAssignment, ExperimentConfig};
use crate::dataplane::{AnonId, SessionStatus};
use crate::flow::EmittedAction;
use crate::trial::TrialPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceClass {
    Vr,
    Desktop,
    Mobile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinRequest {
    /// Platform account handle. Only a salted digest is kept, and only in
    /// memory, to detect re-entry.
    pub participant_id: String,
    pub device_class: DeviceClass,
    /// Accepted for client compatibility and discarded.
    #[serde(default, skip_serializing)]
    pub device_serial: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedirectReason {
    AlreadyCompleted,
    NonVr,
    Full,
}

/// Where a participant lands: an instance of a world, with everything the
/// client needs to run the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ticket {
    pub session_id: String,
    pub experiment_id: String,
    pub participant: AnonId,
    pub world_id: String,
    pub instance_id: String,
    pub avatar: Option<AvatarAssignment>,
    pub group: Option<String>,
    pub plan: TrialPlan,
    pub state: String,
    pub actions: Vec<EmittedAction>,
    #[serde(default)]
    pub resumed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum JoinOutcome {
    Admitted(Box<Ticket>),
    Redirect { reason: RedirectReason },
}

impl JoinOutcome {
    pub fn ticket(&self) -> Option<&Ticket> {
        match self {
            JoinOutcome::Admitted(t) => Some(t),
            JoinOutcome::Redirect { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventsRequest {
    /// Seconds since the previous tick.
    pub dt: f64,
    #[serde(default)]
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickResponse {
    pub state: String,
    pub clock: f64,
    pub transition: Option<(String, String)>,
    pub actions: Vec<EmittedAction>,
    pub ignored_events: Vec<String>,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRequest {
    pub world_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishRequest {
    pub published: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registered {
    pub experiment_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardEntry {
    pub experiment_id: String,
    pub title: String,
    pub description: String,
    pub prerequisites: String,
    pub reward_text: String,
    pub vr_only: bool,
    pub participants: u64,
    pub max_participants: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionReceipt {
    pub session_id: String,
    pub experiment_id: String,
    pub participant: AnonId,
    pub reward_text: String,
    /// Session clock at completion, seconds.
    pub completed_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub experiment_id: String,
    pub participant: AnonId,
    pub world_id: String,
    pub instance_id: String,
    pub group: Option<String>,
    pub status: SessionStatus,
    pub state: String,
    pub clock: f64,
    pub trials_completed: usize,
    pub trials_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentView {
    pub experiment_id: String,
    pub published: bool,
    pub questionnaire_ids: Vec<String>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub experiment_id: String,
    pub world_id: String,
    pub occupants: Vec<String>,
    pub created_at: f64,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
}

impl Ack {
    pub fn ok() -> Self {
        Ack { ok: true }
    }
}
