//! HTTP facade over [`epss_core::Epss`].
//!
//! Requests and responses are JSON, except unit documents which travel as
//! XML. Errors are returned as `{"code": .., "message": ..}` with a 4xx
//! status. Callers identify themselves with the `x-epss-actor` header;
//! unidentified callers only see open knowledge-base content.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use epss_core::collab::MessageBody;
use epss_core::delivery::{ApplianceCommand, ApplianceLink, LearningMode};
use epss_core::knowledge::{LearningUnit, Scope, UnitQuery};
use epss_core::trace::{EventKind, TraceFilter};
use epss_core::types::{Expertise, Protection, StepRef, TaskCategory};
use epss_core::workflow::EnforcementMode;
use epss_core::{Epss, EpssError};

pub const ACTOR_HEADER: &str = "x-epss-actor";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl ToString) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.to_string(),
            },
        }
    }

    fn bad_request(message: impl ToString) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    fn access_denied(message: impl ToString) -> Self {
        Self::new(StatusCode::FORBIDDEN, "AccessDenied", message)
    }
}

/// HTTP status for a module error code.
pub fn status_for(code: &str) -> StatusCode {
    match code {
        "UnknownSession" | "UnknownProcedure" | "UnknownActor" | "UnknownAppliance"
        | "UnknownTag" | "UnknownEntity" | "UnknownUnit" | "UnknownRequest" | "UnknownDevice"
        | "UnknownStep" => StatusCode::NOT_FOUND,
        "InsufficientAccreditation" | "AccessDenied" => StatusCode::FORBIDDEN,
        "SessionClosed" | "AlreadyClaimed" | "RequestClosed" | "DuplicateTag"
        | "DuplicateProcedure" | "NoActiveSession" | "NoContext" => StatusCode::CONFLICT,
        "BadRequest" => StatusCode::BAD_REQUEST,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

impl From<EpssError> for ApiError {
    fn from(e: EpssError) -> Self {
        let code = e.code();
        ApiError::new(status_for(code), code, e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type AppState = Arc<Epss>;

/// Whether the caller named a registered actor.
fn identified(epss: &Epss, headers: &HeaderMap) -> bool {
    headers
        .get(ACTOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|actor| epss.workflow.actor(actor).is_ok())
}

fn check_visible(epss: &Epss, headers: &HeaderMap, unit: &LearningUnit) -> Result<(), ApiError> {
    if unit.metadata.protection == Protection::FirmProtected && !identified(epss, headers) {
        return Err(ApiError::access_denied(format!(
            "unit `{}` is restricted to identified actors",
            unit.id
        )));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StartSessionReq {
    actor: String,
    procedure: String,
    appliance: String,
    #[serde(default)]
    mode: EnforcementMode,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportStepReq {
    step: u32,
    #[serde(default)]
    tools: Vec<String>,
    #[serde(default)]
    parts: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AbortReq {
    #[serde(default = "default_reason")]
    reason: String,
}

fn default_reason() -> String {
    "aborted by the technician".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanReq {
    actor: String,
    tag: String,
    #[serde(default)]
    online: Option<bool>,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct NetworkReq {
    online: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TagWriteReq {
    actor: String,
    key: String,
    /// `null` erases the key.
    value: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LearnReq {
    actor: String,
    mode: LearningMode,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DeliverReq {
    actor: String,
    #[serde(default)]
    session: Option<String>,
    units: Vec<String>,
    #[serde(default)]
    device: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HelpReq {
    problem: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClaimReq {
    actor: String,
}

#[derive(Deserialize)]
struct MessageReq {
    from_actor: String,
    #[serde(flatten)]
    body: MessageBody,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PollParams {
    #[serde(default)]
    after: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CommandReq {
    session: String,
    command: ApplianceCommand,
    #[serde(default)]
    link: Option<ApplianceLink>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RenditionParams {
    device: String,
}

/// Query string of `GET /units`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitParams {
    #[serde(default)]
    pub scope: Option<Scope>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub task_category: Option<TaskCategory>,
    #[serde(default)]
    pub expertise_max: Option<Expertise>,
    #[serde(default)]
    pub step_procedure: Option<String>,
    #[serde(default)]
    pub step_index: Option<u32>,
    #[serde(default)]
    pub topic: Option<String>,
}

impl UnitParams {
    fn to_query(&self) -> Result<UnitQuery, ApiError> {
        let step_ref = match (&self.step_procedure, self.step_index) {
            (None, None) => None,
            (Some(p), Some(i)) => Some(StepRef::new(p.as_str(), i)),
            _ => {
                return Err(ApiError::bad_request(
                    "step_procedure and step_index go together",
                ))
            }
        };
        Ok(UnitQuery {
            scope: self.scope.unwrap_or_default(),
            model: self.model.clone(),
            task_category: self.task_category,
            expertise_max: self.expertise_max,
            step_ref,
            topic: self.topic.clone(),
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceParams {
    #[serde(default)]
    actor: Option<String>,
    #[serde(default)]
    session: Option<String>,
    #[serde(default)]
    kind: Option<EventKind>,
    #[serde(default)]
    from: Option<u64>,
    #[serde(default)]
    to: Option<u64>,
}

async fn health() -> &'static str {
    "ok"
}

async fn start_session(
    State(epss): State<AppState>,
    body: Result<Json<StartSessionReq>, JsonRejection>,
) -> Result<(StatusCode, Json<epss_core::workflow::WorkSession>), ApiError> {
    let Json(req) = body?;
    let session = epss.start_session(&req.actor, &req.procedure, &req.appliance, req.mode)?;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn list_sessions(
    State(epss): State<AppState>,
) -> Json<Vec<epss_core::workflow::WorkSession>> {
    Json(epss.workflow.sessions())
}

async fn get_session(
    State(epss): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<epss_core::workflow::WorkSession> {
    Ok(Json(epss.session(&id)?))
}

async fn prescription(
    State(epss): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<epss_core::workflow::PrescribedAction> {
    Ok(Json(epss.prescription(&id)?))
}

async fn report_step(
    State(epss): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ReportStepReq>, JsonRejection>,
) -> ApiResult<epss_core::workflow::StepOutcome> {
    let Json(req) = body?;
    Ok(Json(
        epss.report_step(&id, req.step, &req.tools, &req.parts)?,
    ))
}

async fn abort_session(
    State(epss): State<AppState>,
    Path(id): Path<String>,
    body: Result<Option<Json<AbortReq>>, JsonRejection>,
) -> ApiResult<epss_core::workflow::WorkSession> {
    let reason = body?.map(|Json(b)| b.reason).unwrap_or_else(default_reason);
    Ok(Json(epss.abort(&id, &reason)?))
}

async fn conformance(
    State(epss): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<epss_core::trace::ConformanceReport> {
    Ok(Json(epss.conformance(&id)?))
}

async fn replay(
    State(epss): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Vec<epss_core::trace::TimelineEntry>> {
    Ok(Json(epss.replay(&id)?))
}

async fn scan(
    State(epss): State<AppState>,
    body: Result<Json<ScanReq>, JsonRejection>,
) -> ApiResult<epss_core::system::ScanResponse> {
    let Json(req) = body?;
    Ok(Json(epss.scan(&req.actor, &req.tag, req.online)?))
}

async fn get_network(State(epss): State<AppState>) -> Json<NetworkReq> {
    Json(NetworkReq {
        online: epss.network_online(),
    })
}

async fn set_network(
    State(epss): State<AppState>,
    body: Result<Json<NetworkReq>, JsonRejection>,
) -> ApiResult<NetworkReq> {
    let Json(req) = body?;
    epss.set_network(req.online);
    Ok(Json(req))
}

async fn get_tag(
    State(epss): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<epss_core::tags::RfidTag> {
    Ok(Json(epss.tags.tag(&id).map_err(EpssError::from)?))
}

async fn write_tag(
    State(epss): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<TagWriteReq>, JsonRejection>,
) -> ApiResult<epss_core::tags::RfidTag> {
    let Json(req) = body?;
    Ok(Json(epss.write_tag(
        &req.actor,
        &id,
        &req.key,
        req.value.as_deref(),
    )?))
}

async fn list_units(
    State(epss): State<AppState>,
    headers: HeaderMap,
    params: Result<Query<UnitParams>, QueryRejection>,
) -> ApiResult<Vec<Arc<LearningUnit>>> {
    let Query(params) = params?;
    let mut query = params.to_query()?;
    if !identified(&epss, &headers) {
        query.scope = query.scope.open_only().ok_or_else(|| {
            ApiError::access_denied("the EPSS scope is restricted to identified actors")
        })?;
    }
    Ok(Json(epss.query_units(&query)))
}

async fn get_unit(
    State(epss): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Arc<LearningUnit>> {
    let unit = epss.unit(&id)?;
    check_visible(&epss, &headers, &unit)?;
    Ok(Json(unit))
}

async fn rendition(
    State(epss): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    params: Result<Query<RenditionParams>, QueryRejection>,
) -> ApiResult<epss_core::delivery::Rendition> {
    let Query(params) = params?;
    let unit = epss.unit(&id)?;
    check_visible(&epss, &headers, &unit)?;
    Ok(Json(epss.rendition(&id, &params.device)?))
}

async fn export_unit(
    State(epss): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let unit = epss.unit(&id)?;
    check_visible(&epss, &headers, &unit)?;
    let xml = epss.export_unit(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/xml")], xml).into_response())
}

async fn import_unit(
    State(epss): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<(StatusCode, Json<LearningUnit>), ApiError> {
    if !identified(&epss, &headers) {
        return Err(ApiError::access_denied(
            "importing units requires an identified actor",
        ));
    }
    let doc = std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    let imported = epss.import_unit(doc)?;
    Ok((StatusCode::CREATED, Json(imported.unit)))
}

async fn learn(
    State(epss): State<AppState>,
    body: Result<Json<LearnReq>, JsonRejection>,
) -> ApiResult<epss_core::system::LearnResponse> {
    let Json(req) = body?;
    Ok(Json(epss.learn(&req.actor, req.mode)?))
}

async fn deliver(
    State(epss): State<AppState>,
    body: Result<Json<DeliverReq>, JsonRejection>,
) -> ApiResult<epss_core::delivery::DeliveryReceipt> {
    let Json(req) = body?;
    Ok(Json(epss.deliver(
        &req.actor,
        req.session.as_deref(),
        &req.units,
        req.device.as_deref(),
    )?))
}

async fn request_help(
    State(epss): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<HelpReq>, JsonRejection>,
) -> Result<(StatusCode, Json<epss_core::collab::HelpRequest>), ApiError> {
    let Json(req) = body?;
    Ok((
        StatusCode::CREATED,
        Json(epss.request_help(&id, &req.problem)?),
    ))
}

async fn list_help(
    State(epss): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Vec<epss_core::collab::HelpRequest>> {
    epss.session(&id)?;
    Ok(Json(epss.collab.requests_for_session(&id)))
}

async fn get_help(
    State(epss): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<epss_core::collab::HelpRequest> {
    Ok(Json(epss.collab.request(&id).map_err(EpssError::from)?))
}

async fn claim_help(
    State(epss): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ClaimReq>, JsonRejection>,
) -> ApiResult<epss_core::collab::HelpRequest> {
    let Json(req) = body?;
    Ok(Json(epss.claim_help(&id, &req.actor)?))
}

async fn close_help(
    State(epss): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<epss_core::collab::HelpRequest> {
    Ok(Json(epss.close_help(&id)?))
}

async fn post_message(
    State(epss): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<MessageReq>, JsonRejection>,
) -> Result<(StatusCode, Json<epss_core::collab::Message>), ApiError> {
    let Json(req) = body?;
    Ok((
        StatusCode::CREATED,
        Json(epss.post_message(&id, &req.from_actor, req.body)?),
    ))
}

async fn poll_messages(
    State(epss): State<AppState>,
    Path(id): Path<String>,
    params: Result<Query<PollParams>, QueryRejection>,
) -> ApiResult<Vec<epss_core::collab::Message>> {
    let Query(params) = params?;
    Ok(Json(epss.poll_messages(&id, params.after)?))
}

async fn trace(
    State(epss): State<AppState>,
    params: Result<Query<TraceParams>, QueryRejection>,
) -> ApiResult<Vec<epss_core::trace::TraceEvent>> {
    let Query(p) = params?;
    Ok(Json(epss.trace(&TraceFilter {
        actor: p.actor,
        session: p.session,
        kind: p.kind,
        from: p.from,
        to: p.to,
    })))
}

async fn appliance_command(
    State(epss): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<CommandReq>, JsonRejection>,
) -> ApiResult<epss_core::delivery::CommandOutcome> {
    let Json(req) = body?;
    Ok(Json(epss.appliance_command(
        &id,
        &req.session,
        req.link,
        req.command,
    )?))
}

async fn list_procedures(
    State(epss): State<AppState>,
) -> Json<Vec<Arc<epss_core::workflow::Procedure>>> {
    Json(epss.workflow.procedures())
}

async fn get_procedure(
    State(epss): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Arc<epss_core::workflow::Procedure>> {
    Ok(Json(epss.workflow.procedure(&id).map_err(EpssError::from)?))
}

async fn list_devices(
    State(epss): State<AppState>,
) -> Json<Vec<epss_core::delivery::DeviceProfile>> {
    Json(epss.delivery.devices())
}

async fn no_route() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such endpoint")
}

async fn wrong_method() -> ApiError {
    ApiError::new(
        StatusCode::METHOD_NOT_ALLOWED,
        "MethodNotAllowed",
        "method not supported here",
    )
}

pub fn router(epss: Arc<Epss>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(start_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/prescription", get(prescription))
        .route("/sessions/{id}/steps", post(report_step))
        .route("/sessions/{id}/abort", post(abort_session))
        .route("/sessions/{id}/conformance", get(conformance))
        .route("/sessions/{id}/replay", get(replay))
        .route("/sessions/{id}/help", post(request_help).get(list_help))
        .route("/scans", post(scan))
        .route("/network", get(get_network).post(set_network))
        .route("/tags/{id}", get(get_tag))
        .route("/tags/{id}/payload", post(write_tag))
        .route("/units", get(list_units).post(import_unit))
        .route("/units/{id}", get(get_unit))
        .route("/units/{id}/rendition", get(rendition))
        .route("/units/{id}/xml", get(export_unit))
        .route("/learn", post(learn))
        .route("/deliveries", post(deliver))
        .route("/help/{id}", get(get_help))
        .route("/help/{id}/claim", post(claim_help))
        .route("/help/{id}/close", post(close_help))
        .route("/help/{id}/messages", post(post_message).get(poll_messages))
        .route("/trace", get(trace))
        .route("/appliances/{id}/command", post(appliance_command))
        .route("/procedures", get(list_procedures))
        .route("/procedures/{id}", get(get_procedure))
        .route("/devices", get(list_devices))
        .fallback(no_route)
        .method_not_allowed_fallback(wrong_method)
        .with_state(epss)
}
