//! Minimal debug endpoint for the simulated device: a `/json` target
//! listing plus one WebSocket page target that answers commands and pushes
//! Network notifications to sessions that enabled the domain.

use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};
use tracing::debug;
use tungstenite::Message;

use crate::collector::{encode_notification, DebugEndpoint, NetworkEvent};

const TARGET_ID: &str = "sim-page-1";
const POLL: Duration = Duration::from_millis(5);

#[derive(Default)]
struct Hub {
    subscribers: Vec<Sender<String>>,
}

pub struct SimCdpServer {
    port: u16,
    hub: Arc<Mutex<Hub>>,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl SimCdpServer {
    pub fn start(local_port: u16, title: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", local_port))?;
        listener.set_nonblocking(true)?;
        let port = listener.local_addr()?.port();
        let hub = Arc::new(Mutex::new(Hub::default()));
        let shutdown = Arc::new(AtomicBool::new(false));
        let title = title.to_string();
        let accept_thread = {
            let hub = hub.clone();
            let shutdown = shutdown.clone();
            std::thread::spawn(move || {
                while !shutdown.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let hub = hub.clone();
                            let shutdown = shutdown.clone();
                            let title = title.clone();
                            std::thread::spawn(move || {
                                if let Err(e) = serve(stream, port, &title, hub, shutdown) {
                                    debug!(error = %e, "sim debug connection ended");
                                }
                            });
                        }
                        Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
                        Err(_) => break,
                    }
                }
            })
        };
        Ok(Self {
            port,
            hub,
            shutdown,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn endpoint(&self) -> DebugEndpoint {
        DebugEndpoint::local(self.port)
    }

    /// Sends `events` to every session that has enabled the Network domain.
    pub fn publish(&self, events: &[NetworkEvent]) {
        let texts: Vec<String> = events
            .iter()
            .map(|e| encode_notification(e).to_string())
            .collect();
        let mut hub = self.hub.lock().expect("hub poisoned");
        hub.subscribers
            .retain(|tx| texts.iter().all(|t| tx.send(t.clone()).is_ok()));
    }
}

impl Drop for SimCdpServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

fn read_head(stream: &mut TcpStream) -> std::io::Result<String> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut buf = [0u8; 4096];
    loop {
        let n = stream.peek(&mut buf)?;
        if n == 0 {
            return Err(ErrorKind::UnexpectedEof.into());
        }
        let text = String::from_utf8_lossy(&buf[..n]);
        if text.contains("\r\n\r\n") || n == buf.len() {
            return Ok(text.into_owned());
        }
        std::thread::sleep(Duration::from_millis(1));
    }
}

fn serve(
    mut stream: TcpStream,
    port: u16,
    title: &str,
    hub: Arc<Mutex<Hub>>,
    shutdown: Arc<AtomicBool>,
) -> Result<(), Box<dyn std::error::Error>> {
    stream.set_nonblocking(false)?;
    let head = read_head(&mut stream)?;
    let is_upgrade = head
        .lines()
        .any(|l| l.to_ascii_lowercase().starts_with("upgrade:") && l.to_ascii_lowercase().contains("websocket"));
    if !is_upgrade {
        let len = head.find("\r\n\r\n").map_or(head.len(), |i| i + 4);
        let mut sink = vec![0u8; len];
        stream.read_exact(&mut sink)?;
        let path = head.split_whitespace().nth(1).unwrap_or("/");
        let (status, body) = if path == "/json" || path == "/json/list" {
            let listing = json!([{
                "id": TARGET_ID,
                "type": "page",
                "title": title,
                "url": "about:blank",
                "webSocketDebuggerUrl": format!("ws://127.0.0.1:{port}/devtools/page/{TARGET_ID}"),
            }]);
            ("200 OK", listing.to_string())
        } else {
            ("404 Not Found", String::new())
        };
        write!(
            stream,
            "HTTP/1.1 {status}\r\nContent-Type: application/json; charset=UTF-8\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )?;
        stream.flush()?;
        return Ok(());
    }

    let mut ws = tungstenite::accept(stream)?;
    ws.get_mut().set_read_timeout(Some(POLL))?;
    let mut outbox: Option<Receiver<String>> = None;
    while !shutdown.load(Ordering::Relaxed) {
        match ws.read() {
            Ok(Message::Text(text)) => {
                let cmd: Value = serde_json::from_str(text.as_str())?;
                let id = cmd.get("id").cloned().unwrap_or(Value::Null);
                let method = cmd.get("method").and_then(Value::as_str).unwrap_or_default();
                if method == "Network.enable" && outbox.is_none() {
                    let (tx, rx) = channel();
                    hub.lock().expect("hub poisoned").subscribers.push(tx);
                    outbox = Some(rx);
                }
                ws.send(Message::text(json!({"id": id, "result": {}}).to_string()))?;
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e.into()),
        }
        if let Some(rx) = &outbox {
            for text in rx.try_iter() {
                ws.send(Message::text(text))?;
            }
        }
    }
    Ok(())
}
