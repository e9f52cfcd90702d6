//! Blocking client for the editing service.

use std::collections::VecDeque;
use std::io::{BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde_json::{json, Value};
use splatrig::session::SceneSummary;
use splatrig::EditCommand;
use thiserror::Error;

use crate::protocol::{read_message, write_message, Event, Greeting, Request, ServiceError, View, PROTOCOL_VERSION};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("service error {:?}: {}", .0.code, .0.message)]
    Service(ServiceError),
    #[error("unexpected message: {0}")]
    Protocol(String),
}

pub type ClientResult<T> = std::result::Result<T, ClientError>;

/// A response: its `result` object and the raw payload, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub result: Value,
    pub payload: Option<Vec<u8>>,
}

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
    events: VecDeque<Event>,
    pub greeting: Greeting,
}

impl Client {
    /// Connects and completes the version handshake.
    pub fn connect(addr: impl ToSocketAddrs) -> ClientResult<Self> {
        let mut c = Self::connect_raw(addr)?;
        c.call(&Request::Hello {
            version: PROTOCOL_VERSION,
        })?;
        Ok(c)
    }

    /// Connects and reads the greeting without sending `hello`.
    pub fn connect_raw(addr: impl ToSocketAddrs) -> ClientResult<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        let mut reader = BufReader::new(stream);
        let (greeting, _) = read_message(&mut reader)?.ok_or_else(|| ClientError::Protocol("no greeting".into()))?;
        let greeting = serde_json::from_value(greeting).map_err(|e| ClientError::Protocol(e.to_string()))?;
        Ok(Self {
            reader,
            writer,
            next_id: 1,
            events: VecDeque::new(),
            greeting,
        })
    }

    /// Sends a raw line and returns the next response, queueing any events
    /// that arrive first.
    pub fn send_line(&mut self, line: &str) -> ClientResult<(Value, Option<Vec<u8>>)> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        self.next_response(None)
    }

    fn next_response(&mut self, id: Option<&Value>) -> ClientResult<(Value, Option<Vec<u8>>)> {
        loop {
            let (msg, payload) =
                read_message(&mut self.reader)?.ok_or_else(|| ClientError::Protocol("connection closed".into()))?;
            if msg.get("event").is_some() {
                let ev = serde_json::from_value(msg).map_err(|e| ClientError::Protocol(e.to_string()))?;
                self.events.push_back(ev);
                continue;
            }
            if id.is_some_and(|id| msg.get("id") != Some(id)) {
                return Err(ClientError::Protocol(format!("response id mismatch: {msg}")));
            }
            return Ok((msg, payload));
        }
    }

    pub fn call(&mut self, request: &Request) -> ClientResult<Reply> {
        let mut v = serde_json::to_value(request).expect("requests serialize");
        let id = json!(self.next_id);
        self.next_id += 1;
        v["id"] = id.clone();
        write_message(&mut self.writer, &v, None)?;
        let (msg, payload) = self.next_response(Some(&id))?;
        if msg["ok"] == json!(true) {
            Ok(Reply {
                result: msg["result"].clone(),
                payload,
            })
        } else {
            let err = serde_json::from_value(msg["error"].clone()).map_err(|e| ClientError::Protocol(e.to_string()))?;
            Err(ClientError::Service(err))
        }
    }

    /// Next pushed event, waiting up to `timeout`.
    pub fn next_event(&mut self, timeout: Duration) -> ClientResult<Option<Event>> {
        if let Some(e) = self.events.pop_front() {
            return Ok(Some(e));
        }
        self.reader.get_ref().set_read_timeout(Some(timeout))?;
        let r = read_message(&mut self.reader);
        self.reader.get_ref().set_read_timeout(None)?;
        match r {
            Ok(Some((msg, _))) if msg.get("event").is_some() => Ok(Some(
                serde_json::from_value(msg).map_err(|e| ClientError::Protocol(e.to_string()))?,
            )),
            Ok(Some((msg, _))) => Err(ClientError::Protocol(format!("unsolicited message: {msg}"))),
            Ok(None) => Err(ClientError::Protocol("connection closed".into())),
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn summary(&mut self) -> ClientResult<SceneSummary> {
        let r = self.call(&Request::GetSceneSummary)?;
        serde_json::from_value(r.result).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    /// PNG bytes of frame `t`.
    pub fn render(&mut self, frame: usize, view: View) -> ClientResult<Vec<u8>> {
        self.call(&Request::GetFrameRender { frame, view })?
            .payload
            .ok_or_else(|| ClientError::Protocol("render without payload".into()))
    }

    /// Affected frames of the edit.
    pub fn apply_edit(&mut self, command: EditCommand) -> ClientResult<Vec<usize>> {
        let r = self.call(&Request::ApplyEdit { command })?;
        serde_json::from_value(r.result["affected_frames"].clone()).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub fn undo(&mut self) -> ClientResult<Vec<usize>> {
        let r = self.call(&Request::Undo)?;
        serde_json::from_value(r.result["affected_frames"].clone()).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub fn subscribe(&mut self) -> ClientResult<()> {
        self.call(&Request::Subscribe).map(|_| ())
    }
}
