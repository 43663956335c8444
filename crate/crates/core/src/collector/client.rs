//! Debug endpoint discovery and the event-collection session.

use std::io::{ErrorKind, Read, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};
use tungstenite::{Message, WebSocket};

use super::{decode_notification, CollectorError, NetworkEvent, NetworkEventKind};

const IO_TIMEOUT: Duration = Duration::from_secs(5);

/// Local end of a forwarded debug socket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebugEndpoint {
    pub host: String,
    pub port: u16,
}

impl DebugEndpoint {
    pub fn local(port: u16) -> Self {
        Self {
            host: "127.0.0.1".into(),
            port,
        }
    }

    fn addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }

    fn connect(&self) -> Result<TcpStream, CollectorError> {
        let stream = TcpStream::connect(self.addr()).map_err(|source| CollectorError::Connect {
            endpoint: self.addr(),
            source,
        })?;
        stream.set_nodelay(true).ok();
        Ok(stream)
    }
}

/// One inspectable page from the endpoint's `/json` listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DebugTarget {
    pub id: String,
    #[serde(default, rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub url: String,
    #[serde(default)]
    pub web_socket_debugger_url: Option<String>,
}

/// Fetches the `/json` target listing over plain HTTP/1.1.
pub fn list_targets(endpoint: &DebugEndpoint) -> Result<Vec<DebugTarget>, CollectorError> {
    let mut stream = endpoint.connect()?;
    stream.set_read_timeout(Some(IO_TIMEOUT)).ok();
    let request = format!(
        "GET /json HTTP/1.1\r\nHost: {}\r\nConnection: close\r\n\r\n",
        endpoint.addr()
    );
    stream
        .write_all(request.as_bytes())
        .map_err(|_| CollectorError::ConnectionLost)?;
    let mut raw = Vec::new();
    stream
        .read_to_end(&mut raw)
        .map_err(|_| CollectorError::ConnectionLost)?;
    let text = String::from_utf8_lossy(&raw);
    let (head, body) = text
        .split_once("\r\n\r\n")
        .ok_or_else(|| CollectorError::Protocol("truncated /json response".into()))?;
    let status_ok = head
        .lines()
        .next()
        .and_then(|l| l.split_whitespace().nth(1))
        == Some("200");
    if !status_ok {
        return Err(CollectorError::Protocol(format!(
            "/json answered {:?}",
            head.lines().next().unwrap_or_default()
        )));
    }
    serde_json::from_str(body.trim())
        .map_err(|e| CollectorError::Protocol(format!("/json listing: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// The page fired its load event and the network then stayed quiet.
    Quiescent,
    MaxWait,
    ConnectionLost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    pub events: Vec<NetworkEvent>,
    pub stop: StopReason,
}

impl Collection {
    pub fn is_complete(&self) -> bool {
        self.stop != StopReason::ConnectionLost
    }
}

/// An attached debug session with the Network and Page domains enabled.
pub struct Session {
    socket: WebSocket<TcpStream>,
    next_id: u64,
    pending: Vec<NetworkEvent>,
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn is_disconnect(e: &tungstenite::Error) -> bool {
    match e {
        tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed => true,
        tungstenite::Error::Protocol(
            tungstenite::error::ProtocolError::ResetWithoutClosingHandshake,
        ) => true,
        tungstenite::Error::Io(io) => matches!(
            io.kind(),
            ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted | ErrorKind::BrokenPipe | ErrorKind::UnexpectedEof
        ),
        _ => false,
    }
}

enum Incoming {
    Event(Box<NetworkEvent>),
    Reply(u64, Value),
    Other,
    Idle,
}

impl Session {
    /// Attaches to the first page target and enables event delivery. When
    /// this returns, every later notification will be observed.
    pub fn open(endpoint: &DebugEndpoint) -> Result<Self, CollectorError> {
        let targets = list_targets(endpoint)?;
        let target = targets
            .iter()
            .find(|t| t.kind == "page" && t.web_socket_debugger_url.is_some())
            .or_else(|| targets.iter().find(|t| t.web_socket_debugger_url.is_some()))
            .ok_or(CollectorError::NoTarget)?;
        let ws_url = target.web_socket_debugger_url.clone().unwrap_or_default();
        // Connect to the forwarded port regardless of the host the listing
        // advertises; only the path identifies the target.
        let path = url::Url::parse(&ws_url)
            .map(|u| u.path().to_string())
            .map_err(|e| CollectorError::Protocol(format!("bad websocket url {ws_url:?}: {e}")))?;
        let request = format!("ws://{}{}", endpoint.addr(), path);
        let stream = endpoint.connect()?;
        stream.set_read_timeout(Some(IO_TIMEOUT)).ok();
        let (socket, _) = tungstenite::client(request.as_str(), stream)
            .map_err(|e| CollectorError::Protocol(format!("websocket handshake: {e}")))?;
        debug!(target = %target.id, "attached to debug target");
        let mut session = Session {
            socket,
            next_id: 1,
            pending: Vec::new(),
        };
        session.call("Network.enable")?;
        session.call("Page.enable")?;
        Ok(session)
    }

    fn call(&mut self, method: &str) -> Result<Value, CollectorError> {
        let id = self.next_id;
        self.next_id += 1;
        let msg = json!({"id": id, "method": method}).to_string();
        self.socket
            .send(Message::text(msg))
            .map_err(|e| map_ws_error(&e))?;
        let deadline = Instant::now() + IO_TIMEOUT;
        loop {
            if Instant::now() >= deadline {
                return Err(CollectorError::Protocol(format!("no reply to {method}")));
            }
            match self.read_one(deadline - Instant::now())? {
                Incoming::Reply(rid, reply) if rid == id => {
                    if let Some(err) = reply.get("error") {
                        return Err(CollectorError::Protocol(format!("{method} failed: {err}")));
                    }
                    return Ok(reply.get("result").cloned().unwrap_or(Value::Null));
                }
                Incoming::Event(ev) => self.pending.push(*ev),
                _ => {}
            }
        }
    }

    fn read_one(&mut self, wait: Duration) -> Result<Incoming, CollectorError> {
        let wait = wait.max(Duration::from_millis(1));
        self.socket.get_mut().set_read_timeout(Some(wait)).ok();
        let msg = match self.socket.read() {
            Ok(m) => m,
            Err(e) if is_timeout(&e) => return Ok(Incoming::Idle),
            Err(e) => return Err(map_ws_error(&e)),
        };
        match msg {
            Message::Text(text) => {
                let value: Value = serde_json::from_str(text.as_str())
                    .map_err(|e| CollectorError::Protocol(format!("malformed message: {e}")))?;
                if let Some(id) = value.get("id").and_then(Value::as_u64) {
                    return Ok(Incoming::Reply(id, value));
                }
                Ok(decode_notification(&value)?
                    .map(|ev| Incoming::Event(Box::new(ev)))
                    .unwrap_or(Incoming::Other))
            }
            Message::Close(_) => Err(CollectorError::ConnectionLost),
            Message::Binary(_) => Err(CollectorError::Protocol("unexpected binary frame".into())),
            _ => Ok(Incoming::Other),
        }
    }

    /// Records notifications until the page has loaded and the network has
    /// been quiet for `quiescence_ms`, or until `max_wait_ms` elapses.
    pub fn collect(mut self, quiescence_ms: u64, max_wait_ms: u64) -> Result<Collection, CollectorError> {
        let start = Instant::now();
        let deadline = start + Duration::from_millis(max_wait_ms);
        let quiet = Duration::from_millis(quiescence_ms);
        let mut events = std::mem::take(&mut self.pending);
        let mut loaded_at_least_once = events.iter().any(|e| e.kind == NetworkEventKind::LoadEventFired);
        let mut last_event = Instant::now();
        loop {
            let now = Instant::now();
            if loaded_at_least_once && now.duration_since(last_event) >= quiet {
                return Ok(Collection { events, stop: StopReason::Quiescent });
            }
            if now >= deadline {
                return Ok(Collection { events, stop: StopReason::MaxWait });
            }
            let mut wait = deadline - now;
            if loaded_at_least_once {
                wait = wait.min(quiet.saturating_sub(now.duration_since(last_event)));
            }
            match self.read_one(wait) {
                Ok(Incoming::Event(ev)) => {
                    loaded_at_least_once |= ev.kind == NetworkEventKind::LoadEventFired;
                    last_event = Instant::now();
                    events.push(*ev);
                }
                Ok(_) => {}
                Err(CollectorError::ConnectionLost) => {
                    warn!(collected = events.len(), "debug connection lost mid-collection");
                    return Ok(Collection { events, stop: StopReason::ConnectionLost });
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn map_ws_error(e: &tungstenite::Error) -> CollectorError {
    if is_disconnect(e) {
        CollectorError::ConnectionLost
    } else {
        CollectorError::Protocol(e.to_string())
    }
}

/// Attaches to `endpoint` and collects one page load.
pub fn collect(
    endpoint: &DebugEndpoint,
    quiescence_ms: u64,
    max_wait_ms: u64,
) -> Result<Collection, CollectorError> {
    Session::open(endpoint)?.collect(quiescence_ms, max_wait_ms)
}
