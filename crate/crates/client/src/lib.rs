//! Blocking client for the platform's HTTP+JSON API, used by the simulated
//! participants and the admin CLI.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use ureq::http::Response;
use ureq::{Agent, Body};
use vrlab_core::api::{
    BoardEntry, CompletionReceipt, EventsRequest, ExperimentView, InstanceRecord, JoinOutcome, JoinRequest,
    PublishRequest, Registered, SessionView, TickResponse, Ticket, TransitionRequest,
};
use vrlab_core::config::ExperimentConfig;
use vrlab_core::dataplane::{ExportFormat, ExportKind, FrameAck, TrackingFrame, TrialRecord, MAX_FRAME_BATCH};
use vrlab_core::flow::LogEntry;
use vrlab_core::questionnaire::{QuestionnaireSpec, RenderedItem, ResponseSet};
use vrlab_core::trial::GroupCounts;
pub use vrlab_server::ErrorBody;
use vrlab_server::{QuestionnaireId, Revision};

/// Exit status for unreachable services.
pub const EXIT_NETWORK: i32 = 2;
/// Exit status for requests the service refused.
pub const EXIT_REJECTED: i32 = 3;

const BUSY_RETRIES: usize = 20;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach {endpoint}: {message}")]
    Network { endpoint: String, message: String },
    #[error("HTTP {status} ({}): {}", .body.kind, .body.error)]
    Api { status: u16, body: ErrorBody },
    #[error("unexpected response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Network { .. } => EXIT_NETWORK,
            _ => EXIT_REJECTED,
        }
    }

    /// Error kind reported by the service, if it answered.
    pub fn kind(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.kind),
            _ => None,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    token: Option<String>,
    agent: Agent,
}

impl Client {
    pub fn new(endpoint: &str) -> Self {
        let config = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build();
        Client {
            base: endpoint.trim_end_matches('/').to_string(),
            token: None,
            agent: Agent::new_with_config(config),
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token.filter(|t| !t.is_empty());
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn auth<B>(&self, req: ureq::RequestBuilder<B>) -> ureq::RequestBuilder<B> {
        match &self.token {
            Some(t) => req.header("Authorization", format!("Bearer {t}")),
            None => req,
        }
    }

    fn network(&self, e: ureq::Error) -> ClientError {
        ClientError::Network {
            endpoint: self.base.clone(),
            message: e.to_string(),
        }
    }

    fn bytes(&self, resp: std::result::Result<Response<Body>, ureq::Error>) -> Result<Vec<u8>> {
        let mut resp = resp.map_err(|e| self.network(e))?;
        let status = resp.status().as_u16();
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_vec()
            .map_err(|e| self.network(e))?;
        if status >= 400 {
            let body = serde_json::from_slice(&bytes).unwrap_or_else(|_| ErrorBody {
                kind: "unknown".into(),
                error: String::from_utf8_lossy(&bytes).into_owned(),
                report: None,
                retry_after_ms: None,
            });
            return Err(ClientError::Api { status, body });
        }
        Ok(bytes)
    }

    fn decode<T: DeserializeOwned>(&self, resp: std::result::Result<Response<Body>, ureq::Error>) -> Result<T> {
        let bytes = self.bytes(resp)?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.decode(self.auth(self.agent.get(self.url(path))).call())
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &impl Serialize) -> Result<T> {
        self.decode(self.auth(self.agent.post(self.url(path))).send_json(body))
    }

    fn post_empty<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.decode(self.auth(self.agent.post(self.url(path))).send_empty())
    }

    pub fn health(&self) -> Result<()> {
        self.get::<serde_json::Value>("/health").map(drop)
    }

    pub fn register_experiment(&self, config: &ExperimentConfig) -> Result<String> {
        self.post::<Registered>("/experiments", config).map(|r| r.experiment_id)
    }

    pub fn experiments(&self) -> Result<Vec<ExperimentView>> {
        self.get("/experiments")
    }

    pub fn experiment(&self, id: &str) -> Result<ExperimentView> {
        self.get(&format!("/experiments/{id}"))
    }

    pub fn update_experiment(&self, id: &str, config: &ExperimentConfig) -> Result<ExperimentView> {
        let req = self.auth(self.agent.put(self.url(&format!("/experiments/{id}"))));
        self.decode(req.send_json(config))
    }

    pub fn set_published(&self, id: &str, published: bool) -> Result<ExperimentView> {
        let req = self.auth(self.agent.patch(self.url(&format!("/experiments/{id}/publish"))));
        self.decode(req.send_json(PublishRequest { published }))
    }

    pub fn sessions(&self, experiment_id: &str) -> Result<Vec<SessionView>> {
        self.get(&format!("/experiments/{experiment_id}/sessions"))
    }

    pub fn instances(&self, experiment_id: &str) -> Result<Vec<InstanceRecord>> {
        self.get(&format!("/experiments/{experiment_id}/instances"))
    }

    pub fn group_counts(&self, experiment_id: &str) -> Result<Option<GroupCounts>> {
        self.get(&format!("/experiments/{experiment_id}/groups"))
    }

    pub fn board(&self) -> Result<Vec<BoardEntry>> {
        self.get("/board")
    }

    pub fn join(&self, experiment_id: &str, req: &JoinRequest) -> Result<JoinOutcome> {
        self.post(&format!("/experiments/{experiment_id}/join"), req)
    }

    pub fn session(&self, session_id: &str) -> Result<SessionView> {
        self.get(&format!("/sessions/{session_id}"))
    }

    pub fn transition_log(&self, session_id: &str) -> Result<Vec<LogEntry>> {
        self.get(&format!("/sessions/{session_id}/log"))
    }

    pub fn events(&self, session_id: &str, dt: f64, events: &[String]) -> Result<TickResponse> {
        let body = EventsRequest {
            dt,
            events: events.to_vec(),
        };
        self.post(&format!("/sessions/{session_id}/events"), &body)
    }

    pub fn transition(&self, session_id: &str, world_id: &str) -> Result<Ticket> {
        let body = TransitionRequest {
            world_id: world_id.to_string(),
        };
        self.post(&format!("/sessions/{session_id}/transition"), &body)
    }

    pub fn complete(&self, session_id: &str) -> Result<CompletionReceipt> {
        self.post_empty(&format!("/sessions/{session_id}/complete"))
    }

    pub fn leave(&self, session_id: &str) -> Result<SessionView> {
        self.post_empty(&format!("/sessions/{session_id}/leave"))
    }

    pub fn register_questionnaire(&self, spec: &QuestionnaireSpec) -> Result<String> {
        self.post::<QuestionnaireId>("/questionnaires", spec)
            .map(|r| r.questionnaire_id)
    }

    pub fn questionnaires(&self) -> Result<Vec<QuestionnaireSpec>> {
        self.get("/questionnaires")
    }

    pub fn questionnaire(&self, id: &str) -> Result<QuestionnaireSpec> {
        self.get(&format!("/questionnaires/{id}"))
    }

    pub fn revise_questionnaire(&self, spec: &QuestionnaireSpec) -> Result<u32> {
        let req = self.auth(self.agent.put(self.url(&format!("/questionnaires/{}", spec.id))));
        self.decode::<Revision>(req.send_json(spec)).map(|r| r.version)
    }

    pub fn render_questionnaire(&self, questionnaire_id: &str, session_id: &str) -> Result<Vec<RenderedItem>> {
        let req = self
            .agent
            .get(self.url(&format!("/questionnaires/{questionnaire_id}/render")))
            .query("session", session_id);
        self.decode(self.auth(req).call())
    }

    pub fn submit_response(&self, resp: &ResponseSet) -> Result<()> {
        self.post::<serde_json::Value>("/responses", resp).map(drop)
    }

    pub fn ingest_trial(&self, record: &TrialRecord) -> Result<()> {
        self.post::<serde_json::Value>("/data/trials", record).map(drop)
    }

    /// Uploads in batches under the service cap, backing off on 429.
    pub fn ingest_frames(&self, frames: &[TrackingFrame]) -> Result<FrameAck> {
        let mut total = FrameAck::default();
        for batch in frames.chunks(MAX_FRAME_BATCH) {
            let mut attempt = 0;
            let ack: FrameAck = loop {
                match self.post("/data/frames", &batch) {
                    Err(ClientError::Api { status: 429, body }) if attempt < BUSY_RETRIES => {
                        attempt += 1;
                        std::thread::sleep(Duration::from_millis(body.retry_after_ms.unwrap_or(100)));
                    }
                    other => break other?,
                }
            };
            total.stored += ack.stored;
            total.dropped += ack.dropped;
        }
        Ok(total)
    }

    pub fn export(&self, experiment_id: &str, kind: ExportKind, format: ExportFormat) -> Result<Vec<u8>> {
        let fmt = match format {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        };
        let req = self
            .agent
            .get(self.url(&format!("/data/export/{experiment_id}")))
            .query("kind", kind.as_str())
            .query("format", fmt);
        self.bytes(self.auth(req).call())
    }
}
