//! Deterministic simulated device driven by a scenario file.
//!
//! A scenario spells out the app as a labelled state machine: every state
//! has a UI dump, an activity name and optional telemetry (log lines,
//! network trace, frames); transitions map (state, event) to the next
//! state. Time is virtual, so a run depends only on the scenario and the
//! RNG seed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::trace;

use super::{Capability, DeviceAdapter, DeviceError, LogLine, SimCdpServer};
use crate::collector::{DebugEndpoint, NetworkEvent, NetworkEventKind};
use crate::metrics::FrameSample;
use crate::ui_tree::{parse_ui_dump, ElementPath, EventKind, UiEvent, UiNode};

fn default_epoch_base() -> u64 {
    1_600_000_000_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioState {
    pub ui_dump: String,
    pub activity_name: String,
    /// `(offset ms after entering the state, line)`.
    #[serde(default)]
    pub on_enter_log: Vec<(u64, String)>,
    /// Timestamps are seconds relative to entering the state.
    #[serde(default)]
    pub network_trace: Option<Vec<NetworkEvent>>,
    #[serde(default)]
    pub frames: Option<Vec<FrameSample>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioTransition {
    pub from: String,
    pub event: UiEvent,
    pub to: String,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flakiness {
    #[serde(default)]
    pub drop_probability: f64,
}

/// A dialog that may pop over the page after a transition. Back or a tap on
/// `dismiss_path` closes it; everything else is swallowed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransientDialog {
    pub probability: f64,
    pub state: String,
    #[serde(default)]
    pub dismiss_path: Option<ElementPath>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimTiming {
    pub launch_ms: u64,
    pub inject_ms: u64,
    pub dump_ms: u64,
    /// Real sleep per injected event, for exercising concurrent control.
    pub realtime_latency_ms: u64,
}

impl Default for SimTiming {
    fn default() -> Self {
        Self {
            launch_ms: 800,
            inject_ms: 150,
            dump_ms: 60,
            realtime_latency_ms: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpFailure {
    pub probability: f64,
    /// Every dump after this many succeeds fails.
    pub after_dumps: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub app_id: String,
    pub initial_state: String,
    pub states: BTreeMap<String, ScenarioState>,
    #[serde(default)]
    pub transitions: Vec<ScenarioTransition>,
    #[serde(default)]
    pub flakiness: Flakiness,
    #[serde(default)]
    pub transient_dialog: Option<TransientDialog>,
    #[serde(default)]
    pub capabilities: Option<BTreeSet<Capability>>,
    #[serde(default)]
    pub timing: SimTiming,
    #[serde(default)]
    pub dump_failure: DumpFailure,
    #[serde(default = "default_epoch_base")]
    pub epoch_base_ms: u64,
}

impl Scenario {
    pub fn new(app_id: &str, initial_state: &str) -> Self {
        Self {
            app_id: app_id.to_string(),
            initial_state: initial_state.to_string(),
            states: BTreeMap::new(),
            transitions: Vec::new(),
            flakiness: Flakiness::default(),
            transient_dialog: None,
            capabilities: None,
            timing: SimTiming::default(),
            dump_failure: DumpFailure::default(),
            epoch_base_ms: default_epoch_base(),
        }
    }

    pub fn add_state(&mut self, label: &str, tree: &UiNode, activity: &str) -> &mut ScenarioState {
        self.states.insert(
            label.to_string(),
            ScenarioState {
                ui_dump: tree.to_xml(),
                activity_name: activity.to_string(),
                on_enter_log: Vec::new(),
                network_trace: None,
                frames: None,
            },
        );
        self.states.get_mut(label).expect("just inserted")
    }

    pub fn add_transition(&mut self, from: &str, event: UiEvent, to: &str) {
        self.transitions.push(ScenarioTransition {
            from: from.to_string(),
            event,
            to: to.to_string(),
        });
    }

    pub fn from_json(text: &str) -> Result<Self, DeviceError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| DeviceError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, DeviceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DeviceError::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |m: String| Err(DeviceError::Scenario(m));
        if !self.states.contains_key(&self.initial_state) {
            return bad(format!("initial state {:?} is not defined", self.initial_state));
        }
        for t in &self.transitions {
            for end in [&t.from, &t.to] {
                if !self.states.contains_key(end) {
                    return bad(format!("transition endpoint {end:?} is not defined"));
                }
            }
        }
        let p = self.flakiness.drop_probability;
        if !(0.0..=1.0).contains(&p) {
            return bad(format!("drop_probability {p} outside [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.dump_failure.probability) {
            return bad("dump failure probability outside [0,1]".into());
        }
        if let Some(d) = &self.transient_dialog {
            if !(0.0..=1.0).contains(&d.probability) {
                return bad(format!("dialog probability {} outside [0,1]", d.probability));
            }
            if !self.states.contains_key(&d.state) {
                return bad(format!("dialog state {:?} is not defined", d.state));
            }
        }
        for (label, st) in &self.states {
            parse_ui_dump(&st.ui_dump)
                .map_err(|e| DeviceError::Scenario(format!("state {label}: {e}")))?;
            if let Some(frames) = &st.frames {
                if frames.windows(2).any(|w| w[1].t_ms <= w[0].t_ms) {
                    return bad(format!("state {label}: frame timestamps must increase"));
                }
            }
        }
        Ok(())
    }

    /// Destination of `event` fired on `state`, if the scenario defines one.
    pub fn next_state(&self, state: &str, event: &UiEvent) -> Option<&str> {
        self.transitions
            .iter()
            .find(|t| t.from == state && t.event.same_action(event))
            .map(|t| t.to.as_str())
    }
}

/// In-process device that plays a [`Scenario`].
pub struct SimDevice {
    scenario: Scenario,
    caps: BTreeSet<Capability>,
    rng: ChaCha8Rng,
    launched: bool,
    current: String,
    dialog_open: bool,
    clock_ms: u64,
    dumps: u64,
    injected: u64,
    dropped: u64,
    log_subscribers: Vec<Sender<LogLine>>,
    cdp: Option<SimCdpServer>,
    trace: Vec<String>,
}

impl SimDevice {
    pub fn new(scenario: Scenario, seed: u64) -> Result<Self, DeviceError> {
        scenario.validate()?;
        let caps = scenario
            .capabilities
            .clone()
            .unwrap_or_else(|| Capability::ALL.into_iter().collect());
        let current = scenario.initial_state.clone();
        Ok(Self {
            scenario,
            caps,
            rng: ChaCha8Rng::seed_from_u64(seed),
            launched: false,
            current,
            dialog_open: false,
            clock_ms: 0,
            dumps: 0,
            injected: 0,
            dropped: 0,
            log_subscribers: Vec::new(),
            cdp: None,
            trace: Vec::new(),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Label of the state on screen (ignoring any dialog).
    pub fn current_state(&self) -> &str {
        &self.current
    }

    pub fn dialog_open(&self) -> bool {
        self.dialog_open
    }

    pub fn injected_count(&self) -> u64 {
        self.injected
    }

    pub fn dropped_count(&self) -> u64 {
        self.dropped
    }

    /// Chronological record of device operations, for ordering assertions.
    pub fn operation_log(&self) -> &[String] {
        &self.trace
    }

    fn require(&self, cap: Capability) -> Result<(), DeviceError> {
        if self.caps.contains(&cap) {
            Ok(())
        } else {
            Err(DeviceError::Unsupported(cap))
        }
    }

    fn state(&self, label: &str) -> &ScenarioState {
        &self.scenario.states[label]
    }

    fn shown_label(&self) -> &str {
        match (&self.scenario.transient_dialog, self.dialog_open) {
            (Some(d), true) => &d.state,
            _ => &self.current,
        }
    }

    fn enter(&mut self, label: &str) {
        self.current = label.to_string();
        let entered = self.clock_ms;
        let st = &self.scenario.states[label];
        let base = self.scenario.epoch_base_ms + entered;
        let mut lines: Vec<LogLine> = st
            .on_enter_log
            .iter()
            .map(|(off, line)| (base + off, line.clone()))
            .collect();
        lines.sort_by_key(|(t, _)| *t);
        let busy_until = st.on_enter_log.iter().map(|(o, _)| *o).max().unwrap_or(0);
        self.log_subscribers
            .retain(|tx| lines.iter().all(|l| tx.send(l.clone()).is_ok()));

        if let (Some(server), Some(trace)) = (&self.cdp, &st.network_trace) {
            let shift = entered as f64 / 1000.0;
            let wall_base = self.scenario.epoch_base_ms as f64 / 1000.0;
            let events: Vec<NetworkEvent> = trace
                .iter()
                .map(|ev| {
                    let mut ev = ev.shifted(shift);
                    if ev.kind == NetworkEventKind::RequestWillBeSent && ev.wall_time.is_none() {
                        ev.wall_time = Some(wall_base + ev.timestamp);
                    }
                    ev
                })
                .collect();
            server.publish(&events);
        }
        self.trace.push(format!("enter {label}"));
        self.clock_ms += busy_until;
    }
}

impl DeviceAdapter for SimDevice {
    fn capabilities(&self) -> BTreeSet<Capability> {
        self.caps.clone()
    }

    fn launch_app(&mut self, app_id: &str) -> Result<(), DeviceError> {
        if app_id != self.scenario.app_id {
            return Err(DeviceError::LaunchFailed(format!(
                "app {app_id:?} is not installed"
            )));
        }
        self.clock_ms += self.scenario.timing.launch_ms;
        self.launched = true;
        self.dialog_open = false;
        self.trace.push("launch".into());
        let initial = self.scenario.initial_state.clone();
        self.enter(&initial);
        Ok(())
    }

    fn dump_ui(&mut self) -> Result<String, DeviceError> {
        self.require(Capability::UiDump)?;
        if !self.launched {
            return Err(DeviceError::DumpFailed("app not running".into()));
        }
        self.clock_ms += self.scenario.timing.dump_ms;
        let fail = self.scenario.dump_failure;
        if fail.after_dumps.is_some_and(|n| self.dumps >= n) {
            return Err(DeviceError::DumpFailed("uiautomator not responding".into()));
        }
        if fail.probability > 0.0 && self.rng.gen::<f64>() < fail.probability {
            return Err(DeviceError::DumpFailed("could not get idle state".into()));
        }
        self.dumps += 1;
        Ok(self.state(self.shown_label()).ui_dump.clone())
    }

    fn inject(&mut self, event: &UiEvent) -> Result<(), DeviceError> {
        self.require(match event.kind {
            EventKind::Tap => Capability::Tap,
            EventKind::Back => Capability::Back,
        })?;
        if !self.launched {
            return Err(DeviceError::InjectFailed("app not running".into()));
        }
        if self.scenario.timing.realtime_latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.scenario.timing.realtime_latency_ms));
        }
        self.clock_ms += self.scenario.timing.inject_ms;
        self.injected += 1;
        self.trace.push(format!("inject {event}"));
        if self.rng.gen::<f64>() < self.scenario.flakiness.drop_probability {
            self.dropped += 1;
            trace!(%event, "event dropped");
            return Ok(());
        }
        if self.dialog_open {
            let dismiss = self
                .scenario
                .transient_dialog
                .as_ref()
                .and_then(|d| d.dismiss_path.as_ref());
            if event.kind == EventKind::Back || (event.target.is_some() && event.target.as_ref() == dismiss) {
                self.dialog_open = false;
            }
            return Ok(());
        }
        let Some(next) = self.scenario.next_state(&self.current, event).map(String::from) else {
            return Ok(());
        };
        self.enter(&next);
        if let Some(p) = self.scenario.transient_dialog.as_ref().map(|d| d.probability) {
            if self.rng.gen::<f64>() < p {
                self.dialog_open = true;
            }
        }
        Ok(())
    }

    fn current_activity(&mut self) -> Result<String, DeviceError> {
        Ok(self.state(self.shown_label()).activity_name.clone())
    }

    /// Replays the current state's scripted frames within `[0, duration_ms]`;
    /// a state without frames yields one frame at t=0.
    fn capture_frames(&mut self, duration_ms: u64) -> Result<Vec<FrameSample>, DeviceError> {
        self.require(Capability::FrameCapture)?;
        self.clock_ms += duration_ms;
        let frames = match &self.state(&self.current).frames {
            Some(f) if !f.is_empty() => f,
            _ => return Ok(vec![FrameSample::from_gray(0, &[255])]),
        };
        let kept: Vec<FrameSample> = frames.iter().filter(|f| f.t_ms <= duration_ms).cloned().collect();
        if kept.is_empty() {
            return Ok(vec![frames[0].at(0)]);
        }
        Ok(kept)
    }

    fn log_stream(&mut self) -> Result<Receiver<LogLine>, DeviceError> {
        self.require(Capability::LogStream)?;
        let (tx, rx) = channel();
        self.log_subscribers.push(tx);
        Ok(rx)
    }

    /// Starts (once) a local debug endpoint serving the network traces of
    /// states entered after a client enables the Network domain.
    fn forward_debug_port(
        &mut self,
        _remote: &str,
        local_port: u16,
    ) -> Result<DebugEndpoint, DeviceError> {
        self.require(Capability::PortForward)?;
        if self.cdp.is_none() {
            let title = self.scenario.app_id.clone();
            let server = SimCdpServer::start(local_port, &title)
                .map_err(|e| DeviceError::ForwardFailed(e.to_string()))?;
            self.cdp = Some(server);
        }
        Ok(self.cdp.as_ref().expect("started").endpoint())
    }

    /// A small PNG filled with the dominant colour of the page's last frame.
    fn screenshot(&mut self) -> Result<Vec<u8>, DeviceError> {
        self.require(Capability::Screenshot)?;
        let rgb = self
            .state(self.shown_label())
            .frames
            .as_ref()
            .and_then(|f| f.last())
            .map(FrameSample::dominant_rgb)
            .unwrap_or([255, 255, 255]);
        let (w, h) = (36u32, 64u32);
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, w, h);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| DeviceError::CaptureFailed(e.to_string()))?;
            let data: Vec<u8> = std::iter::repeat_n(rgb, (w * h) as usize).flatten().collect();
            writer
                .write_image_data(&data)
                .map_err(|e| DeviceError::CaptureFailed(e.to_string()))?;
        }
        Ok(out)
    }

    fn now_ms(&self) -> u64 {
        self.clock_ms
    }

    fn pause(&mut self, ms: u64) {
        self.clock_ms += ms;
    }
}
