//! JSON messages exchanged between a map client and a correction session.
//!
//! Every message is one JSON object with a `type` tag. A client opens with
//! `hello` carrying the protocol version it speaks; the server answers with an
//! `ack` and the current map.
//!
//! ```text
//! -> {"type":"hello","version":1}
//! <- {"type":"ack","request":"hello","version":1}
//! <- {"type":"map_update","update":{...}}
//! -> {"type":"submit_correction","correction":{"pa0":{"p0":[0,0],"p1":[1,0]},"pb0":{...},"mode":"collinearity"}}
//! <- {"type":"ack","request":"submit_correction","version":1}
//! <- {"type":"map_update","update":{...}}
//! ```

use serde::{Deserialize, Serialize};

use crate::interpret::{InterpretError, RawCorrection};
use crate::session::{MapUpdate, Session, SessionError};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello { version: u32 },
    SubmitCorrection { correction: RawCorrection },
    RequestSnapshot,
    UndoLast,
}

impl ClientMessage {
    pub fn name(&self) -> &'static str {
        match self {
            ClientMessage::Hello { .. } => "hello",
            ClientMessage::SubmitCorrection { .. } => "submit_correction",
            ClientMessage::RequestSnapshot => "request_snapshot",
            ClientMessage::UndoLast => "undo_last",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    UnsupportedVersion,
    DegenerateStroke,
    InsufficientSelection,
    InterleavedSelection,
    InvalidFactor,
    Correction,
    NothingToUndo,
    InvalidGraph,
}

impl From<&SessionError> for ErrorCode {
    fn from(e: &SessionError) -> Self {
        match e {
            SessionError::Interpret(InterpretError::DegenerateStroke(_)) => {
                ErrorCode::DegenerateStroke
            }
            SessionError::Interpret(InterpretError::InsufficientSelection(_)) => {
                ErrorCode::InsufficientSelection
            }
            SessionError::Interpret(InterpretError::InterleavedSelection) => {
                ErrorCode::InterleavedSelection
            }
            SessionError::Interpret(_) => ErrorCode::InvalidFactor,
            SessionError::Correction(_) => ErrorCode::Correction,
            SessionError::NothingToUndo => ErrorCode::NothingToUndo,
            SessionError::InvalidGraph(_) => ErrorCode::InvalidGraph,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    MapUpdate { update: Box<MapUpdate> },
    Error { code: ErrorCode, message: String },
    Ack { request: String, version: u32 },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code,
            message: message.into(),
        }
    }

    fn update(update: MapUpdate) -> Self {
        ServerMessage::MapUpdate {
            update: Box::new(update),
        }
    }

    fn ack(request: &ClientMessage) -> Self {
        ServerMessage::Ack {
            request: request.name().to_string(),
            version: PROTOCOL_VERSION,
        }
    }
}

/// Parses one client message. A malformed message yields the error reply to
/// send back.
pub fn decode_client(text: &str) -> Result<ClientMessage, ServerMessage> {
    serde_json::from_str(text)
        .map_err(|e| ServerMessage::error(ErrorCode::Malformed, e.to_string()))
}

pub fn encode<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("messages serialize")
}

/// Applies one client message to the session and returns the replies in
/// order. Errors never disturb the session.
pub fn handle(session: &mut Session, msg: &ClientMessage) -> Vec<ServerMessage> {
    let result = match msg {
        ClientMessage::Hello { version } if *version != PROTOCOL_VERSION => {
            return vec![ServerMessage::error(
                ErrorCode::UnsupportedVersion,
                format!("server speaks version {PROTOCOL_VERSION}, client asked for {version}"),
            )];
        }
        ClientMessage::Hello { .. } | ClientMessage::RequestSnapshot => Ok(session.snapshot()),
        ClientMessage::SubmitCorrection { correction } => session.submit_correction(correction),
        ClientMessage::UndoLast => session.undo_last(),
    };
    let reply = match result {
        Ok(update) => ServerMessage::update(update),
        Err(e) => ServerMessage::error(ErrorCode::from(&e), e.to_string()),
    };
    match msg {
        ClientMessage::Hello { .. } | ClientMessage::SubmitCorrection { .. } => {
            vec![ServerMessage::ack(msg), reply]
        }
        _ => vec![reply],
    }
}
