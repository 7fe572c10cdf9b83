use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vrlab_core::api::{
    Ack, BoardEntry, CompletionReceipt, EventsRequest, ExperimentView, InstanceRecord, JoinOutcome, JoinRequest,
    PublishRequest, Registered, SessionView, TickResponse, Ticket, TransitionRequest,
};
use vrlab_core::config::ExperimentConfig;
use vrlab_core::dataplane::{ExportFormat, ExportKind, FrameAck, TrackingFrame, TrialRecord};
use vrlab_core::flow::LogEntry;
use vrlab_core::questionnaire::{QuestionnaireSpec, RenderedItem, ResponseSet};
use vrlab_core::trial::GroupCounts;
use vrlab_core::{Platform, PlatformError};

use crate::error::ApiError;

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone)]
pub struct AppState {
    pub platform: Arc<Platform>,
    pub token: Option<Arc<str>>,
}

/// JSON body whose parse failures come back as 422 with the usual error body.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::invalid(e.body_text()))?;
        serde_json::from_slice(&bytes)
            .map(Body)
            .map_err(|e| ApiError::invalid(format!("malformed body: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionnaireId {
    pub questionnaire_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Revision {
    pub version: u32,
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    kind: String,
    #[serde(default = "default_format")]
    format: String,
}

fn default_format() -> String {
    "csv".into()
}

#[derive(Debug, Deserialize)]
struct RenderQuery {
    session: String,
}

async fn require_token(State(state): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token) {
            return ApiError::unauthorized().into_response();
        }
    }
    next.run(req).await
}

/// Researcher routes sit behind the shared token when one is configured;
/// participant-facing routes stay open.
pub fn router(state: AppState) -> Router {
    let researcher = Router::new()
        .route("/experiments", post(register_experiment).get(list_experiments))
        .route("/experiments/{id}", get(get_experiment).put(update_experiment))
        .route("/experiments/{id}/publish", patch(publish))
        .route("/experiments/{id}/sessions", get(experiment_sessions))
        .route("/experiments/{id}/instances", get(instances))
        .route("/experiments/{id}/groups", get(groups))
        .route("/questionnaires", post(register_questionnaire).get(list_questionnaires))
        .route("/questionnaires/{id}", get(get_questionnaire).put(revise_questionnaire))
        .route("/data/export/{id}", get(export))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    let participant = Router::new()
        .route("/health", get(|| async { Json(Ack::ok()) }))
        .route("/board", get(board))
        .route("/experiments/{id}/join", post(join))
        .route("/sessions/{id}", get(session))
        .route("/sessions/{id}/log", get(session_log))
        .route("/sessions/{id}/events", post(events))
        .route("/sessions/{id}/transition", post(transition))
        .route("/sessions/{id}/complete", post(complete))
        .route("/sessions/{id}/leave", post(leave))
        .route("/questionnaires/{id}/render", get(render_questionnaire))
        .route("/responses", post(submit_response))
        .route("/data/frames", post(ingest_frames))
        .route("/data/trials", post(ingest_trial));
    researcher
        .merge(participant)
        .layer(axum::extract::DefaultBodyLimit::max(32 << 20))
        .with_state(state)
}

async fn register_experiment(
    State(s): State<AppState>,
    Body(config): Body<ExperimentConfig>,
) -> Result<(StatusCode, Json<Registered>), ApiError> {
    let experiment_id = s.platform.register_experiment(config)?;
    Ok((StatusCode::CREATED, Json(Registered { experiment_id })))
}

async fn list_experiments(State(s): State<AppState>) -> ApiResult<Vec<ExperimentView>> {
    let views = s
        .platform
        .experiment_ids()
        .iter()
        .map(|id| s.platform.experiment(id))
        .collect::<Result<Vec<_>, PlatformError>>()?;
    Ok(Json(views))
}

async fn get_experiment(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<ExperimentView> {
    Ok(Json(s.platform.experiment(&id)?))
}

async fn update_experiment(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(config): Body<ExperimentConfig>,
) -> ApiResult<ExperimentView> {
    s.platform.update_experiment(&id, config)?;
    Ok(Json(s.platform.experiment(&id)?))
}

async fn publish(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<PublishRequest>,
) -> ApiResult<ExperimentView> {
    s.platform.set_published(&id, req.published)?;
    Ok(Json(s.platform.experiment(&id)?))
}

async fn experiment_sessions(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Vec<SessionView>> {
    Ok(Json(s.platform.sessions(&id)?))
}

async fn instances(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Vec<InstanceRecord>> {
    Ok(Json(s.platform.instances(&id)?))
}

async fn groups(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Option<GroupCounts>> {
    Ok(Json(s.platform.group_counts(&id)?))
}

async fn board(State(s): State<AppState>) -> Json<Vec<BoardEntry>> {
    Json(s.platform.list_board())
}

async fn join(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<JoinRequest>,
) -> ApiResult<JoinOutcome> {
    Ok(Json(s.platform.join(&id, &req)?))
}

async fn session(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionView> {
    Ok(Json(s.platform.session(&id)?))
}

async fn session_log(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Vec<LogEntry>> {
    Ok(Json(s.platform.transition_log(&id)?))
}

async fn events(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<EventsRequest>,
) -> ApiResult<TickResponse> {
    if !(req.dt.is_finite() && req.dt > 0.0) {
        return Err(ApiError::invalid("dt must be a positive, finite number of seconds"));
    }
    Ok(Json(s.platform.session_events(&id, req.dt, &req.events)?))
}

async fn transition(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<TransitionRequest>,
) -> ApiResult<Ticket> {
    Ok(Json(s.platform.transition_world(&id, &req.world_id)?))
}

async fn complete(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<CompletionReceipt> {
    Ok(Json(s.platform.complete_session(&id)?))
}

async fn leave(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionView> {
    Ok(Json(s.platform.leave(&id)?))
}

async fn register_questionnaire(
    State(s): State<AppState>,
    Body(spec): Body<QuestionnaireSpec>,
) -> Result<(StatusCode, Json<QuestionnaireId>), ApiError> {
    let questionnaire_id = s.platform.register_questionnaire(spec)?;
    Ok((StatusCode::CREATED, Json(QuestionnaireId { questionnaire_id })))
}

async fn list_questionnaires(State(s): State<AppState>) -> Json<Vec<QuestionnaireSpec>> {
    Json(s.platform.questionnaires().list())
}

async fn get_questionnaire(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<QuestionnaireSpec> {
    s.platform
        .questionnaires()
        .get(&id)
        .map(Json)
        .ok_or_else(|| PlatformError::not_found("questionnaire", id).into())
}

async fn revise_questionnaire(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(spec): Body<QuestionnaireSpec>,
) -> ApiResult<Revision> {
    if spec.id != id {
        return Err(ApiError::invalid(format!("body id `{}` does not match path `{id}`", spec.id)));
    }
    Ok(Json(Revision {
        version: s.platform.revise_questionnaire(spec)?,
    }))
}

async fn render_questionnaire(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<RenderQuery>,
) -> ApiResult<Vec<RenderedItem>> {
    Ok(Json(s.platform.instantiate_questionnaire(&id, &q.session)?))
}

async fn submit_response(State(s): State<AppState>, Body(resp): Body<ResponseSet>) -> ApiResult<Ack> {
    s.platform.submit_response(&resp)?;
    Ok(Json(Ack::ok()))
}

async fn ingest_frames(State(s): State<AppState>, Body(batch): Body<Vec<TrackingFrame>>) -> ApiResult<FrameAck> {
    Ok(Json(s.platform.ingest_frames(&batch)?))
}

async fn ingest_trial(State(s): State<AppState>, Body(record): Body<TrialRecord>) -> ApiResult<Ack> {
    s.platform.ingest_trial(record)?;
    Ok(Json(Ack::ok()))
}

async fn export(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> Result<Response, ApiError> {
    let kind: ExportKind = q.kind.parse().map_err(PlatformError::from)?;
    let format: ExportFormat = q.format.parse().map_err(PlatformError::from)?;
    let bytes = s.platform.export(&id, kind, format)?;
    Ok(([(header::CONTENT_TYPE, format.content_type())], bytes).into_response())
}
