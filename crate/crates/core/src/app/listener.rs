//! Line-oriented TCP command port used while exploring.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;
use tracing::{debug, info};

use crate::explorer::ControlHandle;

const POLL: Duration = Duration::from_millis(20);
const SNAPSHOT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum ListenerError {
    #[error("command port {0} is already in use")]
    PortInUse(u16),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serves `save` (snapshot the model, reply `ok`) until dropped. Any other
/// command gets `err unknown`.
pub struct CommandListener {
    port: u16,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl CommandListener {
    pub fn start(port: u16, control: ControlHandle) -> Result<Self, ListenerError> {
        let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|e| match e.kind() {
            ErrorKind::AddrInUse => ListenerError::PortInUse(port),
            _ => ListenerError::Io(e),
        })?;
        listener.set_nonblocking(true)?;
        let port = listener.local_addr()?.port();
        info!(port, "command port open");
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = shutdown.clone();
        let thread = std::thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        debug!(%peer, "command connection");
                        let control = control.clone();
                        let flag = flag.clone();
                        std::thread::spawn(move || {
                            if let Err(e) = serve(stream, &control, &flag) {
                                debug!(error = %e, "command connection closed");
                            }
                        });
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
                    Err(_) => break,
                }
            }
        });
        Ok(Self {
            port,
            shutdown,
            thread: Some(thread),
        })
    }

    pub fn port(&self) -> u16 {
        self.port
    }
}

impl Drop for CommandListener {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve(stream: TcpStream, control: &ControlHandle, shutdown: &AtomicBool) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_millis(200)))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    while !shutdown.load(Ordering::Relaxed) {
        match reader.read_line(&mut line) {
            Ok(0) => return Ok(()),
            Ok(_) => {}
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
            Err(e) => return Err(e),
        }
        let cmd = line.trim().to_string();
        line.clear();
        let reply = match cmd.as_str() {
            "" => continue,
            "save" => match control.request_snapshot(SNAPSHOT_TIMEOUT) {
                Ok(()) => "ok".to_string(),
                Err(e) => format!("err {e}"),
            },
            _ => "err unknown".to_string(),
        };
        writer.write_all(reply.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explorer::ExploreControl;
    use std::io::Read;

    fn send(port: u16, text: &str) -> String {
        let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
        s.write_all(text.as_bytes()).unwrap();
        s.shutdown(std::net::Shutdown::Write).unwrap();
        let mut out = String::new();
        s.read_to_string(&mut out).unwrap();
        out
    }

    fn free_port() -> u16 {
        TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
    }

    #[test]
    fn unknown_command() {
        let (_control, handle) = ExploreControl::new();
        let l = CommandListener::start(free_port(), handle).unwrap();
        assert_eq!(send(l.port(), "foo\n"), "err unknown\n");
    }

    #[test]
    fn save_without_explorer_reports_error() {
        let (control, handle) = ExploreControl::new();
        drop(control);
        let l = CommandListener::start(free_port(), handle).unwrap();
        assert!(send(l.port(), "save\n").starts_with("err "));
    }

    #[test]
    fn port_in_use() {
        let taken = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = taken.local_addr().unwrap().port();
        let (_control, handle) = ExploreControl::new();
        assert!(matches!(
            CommandListener::start(port, handle),
            Err(ListenerError::PortInUse(p)) if p == port
        ));
    }
}
