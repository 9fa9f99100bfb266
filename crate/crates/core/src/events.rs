use chrono::{DateTime, Utc};
use serde::Serialize;
use tokio::sync::broadcast;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Page,
    ChallengeOpened,
    ChallengeClosed,
    StateChange,
}

/// One entry of the live event stream: `{"type", "ts", "payload"}`.
#[derive(Debug, Clone, Serialize)]
pub struct CrawlEvent {
    #[serde(rename = "type")]
    pub kind: EventKind,
    pub ts: DateTime<Utc>,
    pub payload: serde_json::Value,
}

impl CrawlEvent {
    pub fn new(kind: EventKind, payload: impl Serialize) -> Self {
        Self {
            kind,
            ts: Utc::now(),
            payload: serde_json::to_value(payload).unwrap_or(serde_json::Value::Null),
        }
    }
}

pub type EventSender = broadcast::Sender<CrawlEvent>;

pub fn channel() -> EventSender {
    broadcast::channel(1024).0
}

/// Send without caring whether anyone listens.
pub(crate) fn emit(tx: &Option<EventSender>, event: CrawlEvent) {
    if let Some(tx) = tx {
        let _ = tx.send(event);
    }
}
