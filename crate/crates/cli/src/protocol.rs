//! Wire protocol of the editing service, version 1.
//!
//! Messages are single-line JSON objects terminated by `\n`. A message
//! whose object has a `payload_bytes` field is followed by exactly that
//! many raw bytes. See `docs/PROTOCOL.md` for the full schema.

use std::io::{BufRead, Read, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use splatrig::{CameraSpec, EditCommand, FitConfig, Stage};

use crate::commands::Orbit;

pub const SERVICE_NAME: &str = "splatrig";
pub const PROTOCOL_VERSION: u32 = 1;
/// Longest accepted request line.
pub const MAX_LINE_BYTES: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    MalformedRequest,
    UnknownOp,
    HandshakeRequired,
    VersionMismatch,
    OutOfRange,
    InvalidArgument,
    MissingSection,
    Busy,
    IoError,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceError {
    pub code: ErrorCode,
    pub message: String,
}

impl ServiceError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<splatrig::Error> for ServiceError {
    fn from(e: splatrig::Error) -> Self {
        use splatrig::Error as E;
        let code = match &e {
            E::OutOfRange { .. } | E::TimeOutOfBounds { .. } => ErrorCode::OutOfRange,
            E::MissingComponent(_) | E::MissingTarget { .. } => ErrorCode::MissingSection,
            E::Io(_) | E::Format(_) | E::Png(_) => ErrorCode::IoError,
            E::NonFiniteLoss { .. } => ErrorCode::Internal,
            _ => ErrorCode::InvalidArgument,
        };
        Self::new(code, e.to_string())
    }
}

impl From<crate::error::CliError> for ServiceError {
    fn from(e: crate::error::CliError) -> Self {
        use crate::error::CliError as C;
        match e {
            C::Core(e) => e.into(),
            C::MissingSection { section, hint } => Self::new(
                ErrorCode::MissingSection,
                format!("document has no {section} section; {hint}"),
            ),
            C::File { .. } | C::Io(_) => Self::new(ErrorCode::IoError, e.to_string()),
            C::Config { .. } | C::Usage(_) => Self::new(ErrorCode::InvalidArgument, e.to_string()),
        }
    }
}

/// First message sent by the server on every connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Greeting {
    pub hello: String,
    pub versions: Vec<u32>,
}

impl Greeting {
    pub fn current() -> Self {
        Self {
            hello: SERVICE_NAME.into(),
            versions: vec![PROTOCOL_VERSION],
        }
    }
}

/// How a request chooses its camera: an explicit camera, or an orbit
/// around the scene bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Camera(CameraSpec),
    Orbit(Orbit),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    Hello {
        version: u32,
    },
    GetSceneSummary,
    GetFrameRender {
        frame: usize,
        view: View,
    },
    GetJointProjection {
        frame: usize,
        view: View,
        /// Project the rest joints instead of the posed ones.
        #[serde(default)]
        rest: bool,
    },
    GetPosedJoints {
        frame: usize,
    },
    ApplyEdit {
        command: EditCommand,
    },
    Undo,
    Save {
        #[serde(default)]
        path: Option<PathBuf>,
    },
    ExportBvh {
        fps: f64,
        #[serde(default)]
        path: Option<PathBuf>,
    },
    StartFit {
        stage: Stage,
        #[serde(default)]
        config: Option<FitConfig>,
    },
    FitStatus,
    Subscribe,
}

impl Request {
    pub const OPS: [&'static str; 12] = [
        "hello",
        "get_scene_summary",
        "get_frame_render",
        "get_joint_projection",
        "get_posed_joints",
        "apply_edit",
        "undo",
        "save",
        "export_bvh",
        "start_fit",
        "fit_status",
        "subscribe",
    ];
}

/// A request and the client-chosen id echoed in its response.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub id: Value,
    pub request: Request,
}

/// Splits a request line into its id and typed request.
pub fn parse_request(line: &str) -> Result<Envelope, (Value, ServiceError)> {
    let mut v: Value = serde_json::from_str(line)
        .map_err(|e| (Value::Null, ServiceError::new(ErrorCode::MalformedRequest, e.to_string())))?;
    let Some(obj) = v.as_object_mut() else {
        return Err((
            Value::Null,
            ServiceError::new(ErrorCode::MalformedRequest, "request must be a JSON object"),
        ));
    };
    let id = obj.remove("id").unwrap_or(Value::Null);
    match obj.get("op") {
        Some(Value::String(op)) if !Request::OPS.contains(&op.as_str()) => {
            return Err((id, ServiceError::new(ErrorCode::UnknownOp, format!("unknown op `{op}`"))));
        }
        Some(Value::String(_)) => {}
        _ => {
            return Err((
                id,
                ServiceError::new(ErrorCode::MalformedRequest, "missing string field `op`"),
            ))
        }
    }
    let request: Request = match serde_json::from_value(v.clone()) {
        Ok(r) => r,
        Err(e) => return Err((id, ServiceError::new(ErrorCode::MalformedRequest, e.to_string()))),
    };
    // Field-less ops are unit variants, which serde lets ignore extra keys.
    let known = serde_json::to_value(&request).expect("requests serialize");
    if let Some(k) = v.as_object().unwrap().keys().find(|k| known.get(k.as_str()).is_none()) {
        return Err((id, ServiceError::new(ErrorCode::MalformedRequest, format!("unknown field `{k}`"))));
    }
    Ok(Envelope { id, request })
}

pub fn ok_response(id: &Value, result: Value) -> Value {
    json!({ "id": id, "ok": true, "result": result })
}

pub fn error_response(id: &Value, err: &ServiceError) -> Value {
    json!({ "id": id, "ok": false, "error": err })
}

/// Events pushed to subscribed connections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event: String,
    pub frames: Vec<usize>,
    pub undo_depth: usize,
    pub reason: String,
}

impl Event {
    pub fn invalidated(frames: Vec<usize>, undo_depth: usize, reason: &str) -> Self {
        Self {
            event: "invalidated".into(),
            frames,
            undo_depth,
            reason: reason.into(),
        }
    }
}

/// Writes one message, setting `payload_bytes` when a payload follows.
pub fn write_message(w: &mut impl Write, header: &Value, payload: Option<&[u8]>) -> std::io::Result<()> {
    let mut buf = match payload {
        Some(p) => {
            let mut h = header.clone();
            h["payload_bytes"] = json!(p.len());
            serde_json::to_vec(&h)?
        }
        None => serde_json::to_vec(header)?,
    };
    buf.push(b'\n');
    if let Some(p) = payload {
        buf.extend_from_slice(p);
    }
    w.write_all(&buf)?;
    w.flush()
}

/// Reads a line of at most [`MAX_LINE_BYTES`]; `None` at end of stream.
pub fn read_line(r: &mut impl BufRead) -> std::io::Result<Option<String>> {
    let mut buf = Vec::new();
    let n = r.by_ref().take(MAX_LINE_BYTES).read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() != Some(&b'\n') {
        if n as u64 == MAX_LINE_BYTES {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "line too long"));
        }
        return Err(std::io::ErrorKind::UnexpectedEof.into());
    }
    buf.pop();
    String::from_utf8(buf)
        .map(Some)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Reads one message and its payload, if any.
pub fn read_message(r: &mut impl BufRead) -> std::io::Result<Option<(Value, Option<Vec<u8>>)>> {
    let Some(line) = read_line(r)? else {
        return Ok(None);
    };
    let header: Value =
        serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let payload = match header.get("payload_bytes").and_then(Value::as_u64) {
        Some(n) => {
            let mut p = vec![0; n as usize];
            r.read_exact(&mut p)?;
            Some(p)
        }
        None => None,
    };
    Ok(Some((header, payload)))
}
