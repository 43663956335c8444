//! Device adapters: one interface over a simulated app and a real handset.

mod shell;
mod sim;
mod sim_cdp;

use std::collections::BTreeSet;
use std::sync::mpsc::Receiver;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::collector::DebugEndpoint;
use crate::metrics::FrameSample;
use crate::ui_tree::{parse_ui_dump, UiEvent, UiNode, UiTreeError};

pub use shell::{
    frames_from_rgb24, parse_logcat_epoch, parse_resumed_activity, CommandOutput, CommandRunner,
    ShellDevice, SystemRunner,
};
pub use sim::{
    DumpFailure, Flakiness, Scenario, ScenarioState, ScenarioTransition, SimDevice, SimTiming,
    TransientDialog,
};
pub use sim_cdp::SimCdpServer;

/// Retries after a failed dump, and the pause between attempts.
pub const DEFAULT_DUMP_RETRIES: u32 = 2;
pub const DUMP_RETRY_DELAY_MS: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Capability {
    UiDump,
    Tap,
    Back,
    FrameCapture,
    LogStream,
    PortForward,
    Screenshot,
}

impl Capability {
    pub const ALL: [Capability; 7] = [
        Capability::UiDump,
        Capability::Tap,
        Capability::Back,
        Capability::FrameCapture,
        Capability::LogStream,
        Capability::PortForward,
        Capability::Screenshot,
    ];
}

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("device does not support {0:?}")]
    Unsupported(Capability),
    #[error("launch failed: {0}")]
    LaunchFailed(String),
    #[error("UI dump failed: {0}")]
    DumpFailed(String),
    #[error("event injection failed: {0}")]
    InjectFailed(String),
    #[error("frame capture failed: {0}")]
    CaptureFailed(String),
    #[error("port forward failed: {0}")]
    ForwardFailed(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One device log line with its timestamp in epoch milliseconds.
pub type LogLine = (u64, String);

/// Uniform control surface over a device running the app under test.
///
/// `dump_ui` and `inject` must be called sequentially. The log stream
/// receiver and the forwarded debug endpoint may be consumed from other
/// threads while the device is being driven.
pub trait DeviceAdapter: Send {
    fn capabilities(&self) -> BTreeSet<Capability>;

    fn supports(&self, cap: Capability) -> bool {
        self.capabilities().contains(&cap)
    }

    /// Starts the app from its entry page, discarding any previous task.
    fn launch_app(&mut self, app_id: &str) -> Result<(), DeviceError>;

    fn dump_ui(&mut self) -> Result<String, DeviceError>;

    fn inject(&mut self, event: &UiEvent) -> Result<(), DeviceError>;

    /// Name of the activity currently in the foreground.
    fn current_activity(&mut self) -> Result<String, DeviceError>;

    fn capture_frames(&mut self, _duration_ms: u64) -> Result<Vec<FrameSample>, DeviceError> {
        Err(DeviceError::Unsupported(Capability::FrameCapture))
    }

    fn log_stream(&mut self) -> Result<Receiver<LogLine>, DeviceError> {
        Err(DeviceError::Unsupported(Capability::LogStream))
    }

    fn forward_debug_port(
        &mut self,
        _remote: &str,
        _local_port: u16,
    ) -> Result<DebugEndpoint, DeviceError> {
        Err(DeviceError::Unsupported(Capability::PortForward))
    }

    /// PNG bytes of the current screen.
    fn screenshot(&mut self) -> Result<Vec<u8>, DeviceError> {
        Err(DeviceError::Unsupported(Capability::Screenshot))
    }

    /// Milliseconds since the adapter was created, on the device's clock.
    fn now_ms(&self) -> u64;

    fn pause(&mut self, ms: u64);
}

/// Dumps and parses the current page, retrying transient failures.
///
/// Both a failed dump and an unparseable one are retried, up to `retries`
/// extra attempts spaced [`DUMP_RETRY_DELAY_MS`] apart.
pub fn read_tree(device: &mut dyn DeviceAdapter, retries: u32) -> Result<UiNode, DeviceError> {
    let mut attempt = 0;
    loop {
        let err = match device.dump_ui() {
            Ok(xml) => match parse_ui_dump(&xml) {
                Ok(tree) => return Ok(tree),
                Err(UiTreeError::MalformedDump(m)) | Err(UiTreeError::PathMismatch { reason: m, .. }) => {
                    DeviceError::DumpFailed(m)
                }
            },
            Err(DeviceError::DumpFailed(m)) => DeviceError::DumpFailed(m),
            Err(other) => return Err(other),
        };
        if attempt >= retries {
            return Err(err);
        }
        attempt += 1;
        debug!(attempt, %err, "retrying UI dump");
        device.pause(DUMP_RETRY_DELAY_MS);
    }
}
