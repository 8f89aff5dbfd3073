#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use epss_core::collab::MessageKind;
use epss_core::scenario::{Action, ScenarioScript};
use epss_core::trace::Clock;
use epss_core::{Epss, FixtureBundle};
use epss_service::{router, ACTOR_HEADER};

pub struct Api {
    pub epss: Arc<Epss>,
    router: Router,
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: Option<String>,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes)
            .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }

    pub fn text(&self) -> String {
        String::from_utf8(self.bytes.clone()).unwrap()
    }
}

impl Api {
    pub fn new(epss: Epss) -> Self {
        let epss = Arc::new(epss);
        Api {
            router: router(epss.clone()),
            epss,
        }
    }

    pub fn builtin() -> Self {
        Api::new(Epss::from_bundle(&FixtureBundle::builtin(), Clock::Logical).unwrap())
    }

    pub async fn request(
        &self,
        method: Method,
        uri: &str,
        actor: Option<&str>,
        body: Body,
        json: bool,
    ) -> Reply {
        let mut req = Request::builder().method(method).uri(uri);
        if json {
            req = req.header(header::CONTENT_TYPE, "application/json");
        }
        if let Some(actor) = actor {
            req = req.header(ACTOR_HEADER, actor);
        }
        let response = self
            .router
            .clone()
            .oneshot(req.body(body).unwrap())
            .await
            .unwrap();
        let status = response.status();
        let content_type = response
            .headers()
            .get(header::CONTENT_TYPE)
            .map(|v| v.to_str().unwrap().to_string());
        let bytes = response
            .into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec();
        Reply {
            status,
            content_type,
            bytes,
        }
    }

    pub async fn get(&self, uri: &str) -> Reply {
        self.request(Method::GET, uri, None, Body::empty(), false)
            .await
    }

    pub async fn get_as(&self, uri: &str, actor: &str) -> Reply {
        self.request(Method::GET, uri, Some(actor), Body::empty(), false)
            .await
    }

    pub async fn post(&self, uri: &str, body: Value) -> Reply {
        self.request(Method::POST, uri, None, Body::from(body.to_string()), true)
            .await
    }

    /// The caller's active session, found through the session list.
    pub async fn active_session(&self, actor: &str) -> Option<Value> {
        let sessions = self.get("/sessions").await.json();
        sessions
            .as_array()
            .unwrap()
            .iter()
            .find(|s| s["actor"]["id"] == actor && s["state"] == "Active")
            .cloned()
    }
}

fn error_reply(code: &str) -> Result<Value, String> {
    Err(code.to_string())
}

/// Performs one scripted action through the HTTP API.
async fn perform(api: &Api, action: &Action, help: &mut Option<String>) -> Result<Value, String> {
    let (uri, body) = match action {
        Action::Scan { actor, tag, online } => (
            "/scans".to_string(),
            json!({"actor": actor, "tag": tag, "online": online}),
        ),
        Action::SetNetwork { online } => ("/network".to_string(), json!({ "online": online })),
        Action::StartSession {
            actor,
            procedure,
            appliance,
            mode,
        } => (
            "/sessions".to_string(),
            json!({"actor": actor, "procedure": procedure, "appliance": appliance, "mode": mode}),
        ),
        Action::RequestUnits { actor, mode } => {
            ("/learn".to_string(), json!({"actor": actor, "mode": mode}))
        }
        Action::ClaimHelp { actor } => match help {
            Some(h) => (format!("/help/{h}/claim"), json!({ "actor": actor })),
            None => return error_reply("InvalidRequest"),
        },
        Action::CloseHelp { .. } => match help {
            Some(h) => (format!("/help/{h}/close"), json!({})),
            None => return error_reply("InvalidRequest"),
        },
        Action::PostMessage {
            actor,
            kind,
            text,
            step,
            unit,
        } => {
            let Some(h) = help else {
                return error_reply("InvalidRequest");
            };
            let body = match kind {
                MessageKind::Text => json!({"from_actor": actor, "kind": "Text", "text": text}),
                MessageKind::StepAnnotation => {
                    json!({"from_actor": actor, "kind": "StepAnnotation", "step": step.unwrap_or_default(), "text": text})
                }
                MessageKind::UnitPointer => {
                    json!({"from_actor": actor, "kind": "UnitPointer", "unit": unit.clone().unwrap_or_default(), "text": text})
                }
            };
            (format!("/help/{h}/messages"), body)
        }
        Action::WriteTag {
            actor,
            tag,
            key,
            value,
        } => (
            format!("/tags/{tag}/payload"),
            json!({"actor": actor, "key": key, "value": value}),
        ),
        Action::ReportStep { actor, .. }
        | Action::RequestHelp { actor, .. }
        | Action::ApplianceCommand { actor, .. }
        | Action::Abort { actor, .. } => {
            let Some(session) = api.active_session(actor).await else {
                return error_reply("NoActiveSession");
            };
            let id = session["id"].as_str().unwrap().to_string();
            match action {
                Action::ReportStep {
                    step, tools, parts, ..
                } => (
                    format!("/sessions/{id}/steps"),
                    json!({"step": step, "tools": tools, "parts": parts}),
                ),
                Action::RequestHelp { problem, .. } => (
                    format!("/sessions/{id}/help"),
                    json!({ "problem": problem }),
                ),
                Action::ApplianceCommand { command, link, .. } => {
                    let appliance = session["appliance"]["id"].as_str().unwrap();
                    (
                        format!("/appliances/{appliance}/command"),
                        json!({"session": id, "command": command, "link": link}),
                    )
                }
                Action::Abort { reason, .. } => {
                    (format!("/sessions/{id}/abort"), json!({ "reason": reason }))
                }
                _ => unreachable!(),
            }
        }
    };
    let reply = api.post(&uri, body).await;
    let value = reply.json();
    if reply.status.is_success() {
        if matches!(action, Action::RequestHelp { .. }) {
            *help = Some(value["id"].as_str().unwrap().to_string());
        }
        Ok(value)
    } else {
        Err(value["code"].as_str().unwrap().to_string())
    }
}

/// Runs a script against a fresh service built from the fixtures the script
/// declares, the way the scenario runner would.
pub async fn drive(bundle: &FixtureBundle, script: &ScenarioScript) -> Api {
    let api = Api::new(Epss::from_bundle(&script.select_fixtures(bundle), Clock::Logical).unwrap());
    let mut help = None;
    for (i, step) in script.actions.iter().enumerate() {
        let result = perform(&api, &step.action, &mut help).await;
        match (&result, &step.expect_error) {
            (Ok(_), None) => {}
            (Err(code), Some(expected)) if code == expected => {}
            _ => panic!(
                "{} action {}: {:?} (expected {:?})",
                script.name,
                i + 1,
                result,
                step.expect_error
            ),
        }
    }
    api
}
