//! Remote-expert help channel. A work session raises help requests; experts
//! claim them and exchange ordered messages with the technician.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::knowledge::KnowledgeRepo;
use crate::trace::{EventPayload, NewEvent, TraceLedger};
use crate::workflow::{SessionState, Workflow, WorkflowError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CollabError {
    #[error("unknown help request `{0}`")]
    UnknownRequest(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown actor `{0}`")]
    UnknownActor(String),
    #[error("session `{0}` is closed")]
    SessionClosed(String),
    #[error("help request `{request}` is already claimed by `{by}`")]
    AlreadyClaimed { request: String, by: String },
    #[error("help request `{0}` is closed")]
    RequestClosed(String),
    #[error("message references {0}, which does not exist")]
    DanglingReference(String),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
}

impl CollabError {
    pub fn code(&self) -> &'static str {
        match self {
            CollabError::UnknownRequest(_) => "UnknownRequest",
            CollabError::UnknownSession(_) => "UnknownSession",
            CollabError::UnknownActor(_) => "UnknownActor",
            CollabError::SessionClosed(_) => "SessionClosed",
            CollabError::AlreadyClaimed { .. } => "AlreadyClaimed",
            CollabError::RequestClosed(_) => "RequestClosed",
            CollabError::DanglingReference(_) => "DanglingReference",
            CollabError::InvalidMessage(_) => "InvalidMessage",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HelpStatus {
    Open,
    Claimed,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    Text,
    StepAnnotation,
    UnitPointer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum MessageBody {
    Text {
        text: String,
    },
    /// Remark attached to a step of the session's procedure.
    StepAnnotation {
        step: u32,
        text: String,
    },
    /// Points the technician at a learning unit.
    UnitPointer {
        unit: String,
        #[serde(default)]
        text: String,
    },
}

impl MessageBody {
    pub fn kind(&self) -> MessageKind {
        match self {
            MessageBody::Text { .. } => MessageKind::Text,
            MessageBody::StepAnnotation { .. } => MessageKind::StepAnnotation,
            MessageBody::UnitPointer { .. } => MessageKind::UnitPointer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub seq: u32,
    pub from_actor: String,
    #[serde(flatten)]
    pub body: MessageBody,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelpRequest {
    pub id: String,
    pub session_id: String,
    pub problem_text: String,
    pub status: HelpStatus,
    pub claimed_by: Option<String>,
}

#[derive(Debug)]
struct Thread {
    request: HelpRequest,
    messages: Vec<Message>,
}

pub struct CollabRelay {
    workflow: Arc<Workflow>,
    knowledge: Arc<KnowledgeRepo>,
    ledger: Arc<TraceLedger>,
    threads: RwLock<BTreeMap<String, Arc<Mutex<Thread>>>>,
    next_id: AtomicU64,
}

impl CollabRelay {
    pub fn new(
        workflow: Arc<Workflow>,
        knowledge: Arc<KnowledgeRepo>,
        ledger: Arc<TraceLedger>,
    ) -> Self {
        CollabRelay {
            workflow,
            knowledge,
            ledger,
            threads: RwLock::default(),
            next_id: AtomicU64::new(1),
        }
    }

    fn thread(&self, request_id: &str) -> Result<Arc<Mutex<Thread>>, CollabError> {
        self.threads
            .read()
            .get(request_id)
            .cloned()
            .ok_or_else(|| CollabError::UnknownRequest(request_id.to_string()))
    }

    fn known_actor(&self, actor_id: &str) -> Result<(), CollabError> {
        self.workflow
            .actor(actor_id)
            .map(|_| ())
            .map_err(|_| CollabError::UnknownActor(actor_id.to_string()))
    }

    pub fn request_help(
        &self,
        session_id: &str,
        problem_text: &str,
    ) -> Result<HelpRequest, CollabError> {
        let session = self.workflow.session(session_id).map_err(|e| match e {
            WorkflowError::UnknownSession(s) => CollabError::UnknownSession(s),
            other => CollabError::InvalidMessage(other.to_string()),
        })?;
        if session.state != SessionState::Active {
            return Err(CollabError::SessionClosed(session_id.to_string()));
        }
        if problem_text.trim().is_empty() {
            return Err(CollabError::InvalidMessage(
                "empty problem description".into(),
            ));
        }
        // Allocation and append under the map lock keep ids in ledger order.
        let mut threads = self.threads.write();
        let id = format!("H-{:04}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let request = HelpRequest {
            id: id.clone(),
            session_id: session_id.to_string(),
            problem_text: problem_text.to_string(),
            status: HelpStatus::Open,
            claimed_by: None,
        };
        self.ledger.append(NewEvent::new(
            session.actor.id.as_str(),
            Some(session_id),
            EventPayload::HelpRequested {
                request: id.clone(),
                problem: problem_text.to_string(),
            },
        ));
        threads.insert(
            id,
            Arc::new(Mutex::new(Thread {
                request: request.clone(),
                messages: Vec::new(),
            })),
        );
        Ok(request)
    }

    pub fn request(&self, request_id: &str) -> Result<HelpRequest, CollabError> {
        Ok(self.thread(request_id)?.lock().request.clone())
    }

    pub fn requests(&self) -> Vec<HelpRequest> {
        self.threads
            .read()
            .values()
            .map(|t| t.lock().request.clone())
            .collect()
    }

    pub fn requests_for_session(&self, session_id: &str) -> Vec<HelpRequest> {
        self.requests()
            .into_iter()
            .filter(|r| r.session_id == session_id)
            .collect()
    }

    pub fn claim(&self, request_id: &str, expert_id: &str) -> Result<HelpRequest, CollabError> {
        self.known_actor(expert_id)?;
        let thread = self.thread(request_id)?;
        let mut t = thread.lock();
        match t.request.status {
            HelpStatus::Open => {
                t.request.status = HelpStatus::Claimed;
                t.request.claimed_by = Some(expert_id.to_string());
                Ok(t.request.clone())
            }
            HelpStatus::Claimed => Err(CollabError::AlreadyClaimed {
                request: request_id.to_string(),
                by: t.request.claimed_by.clone().unwrap_or_default(),
            }),
            HelpStatus::Closed => Err(CollabError::RequestClosed(request_id.to_string())),
        }
    }

    pub fn close(&self, request_id: &str) -> Result<HelpRequest, CollabError> {
        let thread = self.thread(request_id)?;
        let mut t = thread.lock();
        if t.request.status == HelpStatus::Closed {
            return Err(CollabError::RequestClosed(request_id.to_string()));
        }
        t.request.status = HelpStatus::Closed;
        Ok(t.request.clone())
    }

    fn check_references(&self, session_id: &str, body: &MessageBody) -> Result<(), CollabError> {
        match body {
            MessageBody::Text { .. } => Ok(()),
            MessageBody::StepAnnotation { step, .. } => {
                let session = self
                    .workflow
                    .session(session_id)
                    .map_err(|_| CollabError::UnknownSession(session_id.to_string()))?;
                match session.procedure.step(*step) {
                    Some(_) => Ok(()),
                    None => Err(CollabError::DanglingReference(format!(
                        "step {step} of `{}`",
                        session.procedure.id
                    ))),
                }
            }
            MessageBody::UnitPointer { unit, .. } => {
                if self.knowledge.contains_unit(unit) {
                    Ok(())
                } else {
                    Err(CollabError::DanglingReference(format!("unit `{unit}`")))
                }
            }
        }
    }

    pub fn post_message(
        &self,
        request_id: &str,
        from_actor: &str,
        body: MessageBody,
    ) -> Result<Message, CollabError> {
        self.known_actor(from_actor)?;
        let thread = self.thread(request_id)?;
        let mut t = thread.lock();
        if t.request.status == HelpStatus::Closed {
            return Err(CollabError::RequestClosed(request_id.to_string()));
        }
        self.check_references(&t.request.session_id, &body)?;
        let message = Message {
            seq: t.messages.len() as u32 + 1,
            from_actor: from_actor.to_string(),
            body,
        };
        self.ledger.append(NewEvent::new(
            from_actor,
            Some(&t.request.session_id),
            EventPayload::Message {
                request: request_id.to_string(),
                seq: message.seq,
                message_kind: message.body.kind(),
            },
        ));
        t.messages.push(message.clone());
        Ok(message)
    }

    /// Messages with `seq > after_seq`, in order.
    pub fn poll_messages(
        &self,
        request_id: &str,
        after_seq: u32,
    ) -> Result<Vec<Message>, CollabError> {
        let thread = self.thread(request_id)?;
        let t = thread.lock();
        Ok(t.messages
            .iter()
            .filter(|m| m.seq > after_seq)
            .cloned()
            .collect())
    }
}
