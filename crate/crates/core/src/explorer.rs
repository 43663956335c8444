//! Depth-first exploration of an app, building the transition model and a
//! replay script for every page that embeds a WebView.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::device::{read_tree, Capability, DeviceAdapter, DeviceError, DEFAULT_DUMP_RETRIES};
use crate::model::{ModelError, TransitionModel};
use crate::ui_tree::{fingerprint, StateId, UiEvent, UiNode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExploreConfig {
    pub app_id: String,
    /// Budget on the device clock.
    pub max_explore_ms: u64,
    pub max_depth: usize,
    pub dump_retry: u32,
    pub output_dir: PathBuf,
}

impl ExploreConfig {
    pub fn new(app_id: &str, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            app_id: app_id.to_string(),
            max_explore_ms: 600_000,
            max_depth: 32,
            dump_retry: DEFAULT_DUMP_RETRIES,
            output_dir: output_dir.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub expected: StateId,
    pub event: UiEvent,
}

/// Event sequence leading from the app's entry page to `target`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayScript {
    pub app_id: String,
    pub target: StateId,
    pub steps: Vec<ScriptStep>,
    /// Device-clock milliseconds since exploration started.
    #[serde(default)]
    pub created_at: u64,
}

impl ReplayScript {
    pub fn load(path: &Path) -> Result<Self, ExploreError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExploreError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        serde_json::from_str(&text).map_err(|e| ExploreError::BadScript(format!("{}: {e}", path.display())))
    }

    /// States visited along the script, ending with the target.
    pub fn expected_states(&self) -> Vec<StateId> {
        self.steps
            .iter()
            .map(|s| s.expected)
            .chain(std::iter::once(self.target))
            .collect()
    }

    pub fn file_name(&self) -> String {
        format!("script_{}.json", self.target)
    }
}

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("device does not support {0:?}")]
    Unsupported(Capability),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("bad replay script {0}")]
    BadScript(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Every reachable state within the depth bound was exhausted.
    Complete,
    Budget,
    Interrupted,
    /// The device stopped responding; the model is partial.
    DeviceError(String),
}

#[derive(Debug, Clone)]
pub struct Exploration {
    pub model: TransitionModel,
    pub scripts: Vec<ReplayScript>,
    pub stop: StopReason,
}

impl Exploration {
    pub fn is_complete(&self) -> bool {
        self.stop == StopReason::Complete
    }

    /// Cut short by a device failure rather than by budget or request.
    pub fn is_partial(&self) -> bool {
        matches!(self.stop, StopReason::DeviceError(_))
    }
}

type SnapshotReply = Sender<Result<(), String>>;

/// Exploration side of the control channel; polled between events.
pub struct ExploreControl {
    stop: Arc<AtomicBool>,
    requests: Receiver<SnapshotReply>,
}

/// Remote side: ask for a snapshot save or for the run to stop.
#[derive(Clone)]
pub struct ControlHandle {
    stop: Arc<AtomicBool>,
    requests: Sender<SnapshotReply>,
}

impl ExploreControl {
    pub fn new() -> (Self, ControlHandle) {
        Self::with_stop_flag(Arc::new(AtomicBool::new(false)))
    }

    pub fn with_stop_flag(stop: Arc<AtomicBool>) -> (Self, ControlHandle) {
        let (tx, rx) = channel();
        (
            Self {
                stop: stop.clone(),
                requests: rx,
            },
            ControlHandle { stop, requests: tx },
        )
    }
}

impl ControlHandle {
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    /// Blocks until the explorer has written a snapshot, or `timeout` passes.
    pub fn request_snapshot(&self, timeout: Duration) -> Result<(), String> {
        let (tx, rx) = channel();
        self.requests
            .send(tx)
            .map_err(|_| "exploration is not running".to_string())?;
        rx.recv_timeout(timeout)
            .map_err(|_| "snapshot timed out".to_string())?
    }
}

struct Explorer<'a> {
    device: &'a mut dyn DeviceAdapter,
    config: &'a ExploreConfig,
    started: u64,
    model: TransitionModel,
    scripts: IndexMap<StateId, ReplayScript>,
    abandoned: HashSet<StateId>,
    live: UiNode,
}

enum Walk {
    Arrived,
    Diverged,
    OutOfBudget,
}

/// Runs DFS exploration until the model is exhausted, the budget elapses,
/// a stop is requested, or the device fails.
///
/// A device failure after the entry page was read yields a partial result
/// rather than an error; only failures before any state is known are
/// returned as errors.
pub fn explore(
    device: &mut dyn DeviceAdapter,
    config: &ExploreConfig,
    control: Option<&ExploreControl>,
) -> Result<Exploration, ExploreError> {
    for cap in [Capability::UiDump, Capability::Tap, Capability::Back] {
        if !device.supports(cap) {
            return Err(ExploreError::Unsupported(cap));
        }
    }
    let started = device.now_ms();
    device.launch_app(&config.app_id)?;
    let live = read_tree(device, config.dump_retry)?;
    let activity = device.current_activity()?;
    let model = TransitionModel::new(&live, &activity, 0);
    let mut ex = Explorer {
        device,
        config,
        started,
        model,
        scripts: IndexMap::new(),
        abandoned: HashSet::new(),
        live,
    };
    let entry = ex.model.entry();
    ex.on_new_state(entry);
    let stop = match ex.run(control) {
        Ok(stop) => stop,
        Err(ExploreError::Device(e)) => {
            warn!(error = %e, "device failure, returning partial model");
            StopReason::DeviceError(e.to_string())
        }
        Err(e) => return Err(e),
    };
    ex.finish_scripts();
    info!(
        states = ex.model.state_count(),
        scripts = ex.scripts.len(),
        ?stop,
        "exploration finished"
    );
    Ok(Exploration {
        model: ex.model,
        scripts: ex.scripts.into_values().collect(),
        stop,
    })
}

impl Explorer<'_> {
    fn elapsed(&self) -> u64 {
        self.device.now_ms().saturating_sub(self.started)
    }

    fn out_of_budget(&self) -> bool {
        self.elapsed() >= self.config.max_explore_ms
    }

    fn run(&mut self, control: Option<&ExploreControl>) -> Result<StopReason, ExploreError> {
        let mut stack = vec![self.model.entry()];
        loop {
            if let Some(c) = control {
                for reply in c.requests.try_iter() {
                    let res = save_results(&self.model, &self.snapshot_scripts(), &self.config.output_dir)
                        .map_err(|e| e.to_string());
                    let _ = reply.send(res);
                }
                if c.stop.load(Ordering::SeqCst) {
                    return Ok(StopReason::Interrupted);
                }
            }
            if self.out_of_budget() {
                return Ok(StopReason::Budget);
            }

            let top = *stack.last().expect("stack never empty");
            let depth_ok = self
                .model
                .distances()
                .get(&top)
                .is_some_and(|d| *d < self.config.max_depth);
            let next = self
                .model
                .state(top)
                .and_then(|s| s.unexplored_events.first().cloned());
            if let (true, Some(event)) = (depth_ok, next) {
                self.step(top, event, &mut stack)?;
                continue;
            }

            if stack.len() > 1 && self.retreat(&mut stack)? {
                continue;
            }
            match self.relaunch_to_work()? {
                Some((path, Walk::Arrived)) => stack = path,
                Some((_, Walk::OutOfBudget)) => return Ok(StopReason::Budget),
                Some((_, Walk::Diverged)) => {}
                None => return Ok(StopReason::Complete),
            }
        }
    }

    /// Fires the next unexplored event of `top` and records where it led.
    fn step(&mut self, top: StateId, event: UiEvent, stack: &mut Vec<StateId>) -> Result<(), ExploreError> {
        let live_event = match event.rebind(&self.live) {
            Ok(e) => e,
            Err(e) => {
                debug!(%event, error = %e, "event no longer resolves, skipping");
                if let Some(s) = self.model.state_mut(top) {
                    s.unexplored_events.retain(|u| !u.same_action(&event));
                }
                return Ok(());
            }
        };
        self.device.inject(&live_event)?;
        let tree = read_tree(self.device, self.config.dump_retry)?;
        let activity = self.device.current_activity()?;
        let now = self.elapsed();
        let (to, is_new) = match self.model.add_observation(top, &event, &tree, &activity, now) {
            Ok(obs) => (obs.to.id(), obs.is_new_state),
            Err(ModelError::NondeterministicEdge {
                observed,
                is_new_state,
                ..
            }) => {
                warn!(from = %top, %event, "nondeterministic transition");
                (observed, is_new_state)
            }
            Err(e) => return Err(e.into()),
        };
        self.live = tree;
        debug!(from = %top, %event, %to, is_new, "observed");
        if is_new {
            self.on_new_state(to);
        }
        if to != top {
            match stack.iter().position(|s| *s == to) {
                Some(pos) => stack.truncate(pos + 1),
                None => stack.push(to),
            }
        }
        Ok(())
    }

    /// Presses Back to return to the state under the top of the stack.
    /// Returns false when the device did not land anywhere on the stack.
    fn retreat(&mut self, stack: &mut Vec<StateId>) -> Result<bool, ExploreError> {
        let top = stack.pop().expect("stack has a parent");
        self.device.inject(&UiEvent::back())?;
        let tree = read_tree(self.device, self.config.dump_retry)?;
        let here = fingerprint(&tree).id();
        self.live = tree;
        if here != top {
            if let Some(pos) = stack.iter().position(|s| *s == here) {
                stack.truncate(pos + 1);
                return Ok(true);
            }
        }
        debug!(from = %top, landed = %here, "back did not return to a stacked state");
        Ok(false)
    }

    /// Relaunches and walks to the nearest state that still has events to
    /// try. `None` means there is nothing left to explore.
    fn relaunch_to_work(&mut self) -> Result<Option<(Vec<StateId>, Walk)>, ExploreError> {
        let dist = self.model.distances();
        let target = self
            .model
            .states()
            .filter(|s| !s.unexplored_events.is_empty())
            .filter_map(|s| {
                let id = s.fingerprint.id();
                let d = *dist.get(&id)?;
                (d < self.config.max_depth && !self.abandoned.contains(&id))
                    .then_some((d, s.first_seen_at, id))
            })
            .min();
        let Some((_, _, target)) = target else {
            return Ok(None);
        };
        let path = self.model.shortest_event_path(target)?;
        let mut visited: Vec<StateId> = path.iter().map(|(s, _)| *s).collect();
        visited.push(target);

        self.device.launch_app(&self.config.app_id)?;
        self.live = read_tree(self.device, self.config.dump_retry)?;
        for (expected, event) in &path {
            if fingerprint(&self.live).id() != *expected {
                return Ok(Some(self.abandon(target)));
            }
            if self.out_of_budget() {
                return Ok(Some((visited, Walk::OutOfBudget)));
            }
            let Ok(live_event) = event.rebind(&self.live) else {
                return Ok(Some(self.abandon(target)));
            };
            self.device.inject(&live_event)?;
            self.live = read_tree(self.device, self.config.dump_retry)?;
        }
        if fingerprint(&self.live).id() != target {
            return Ok(Some(self.abandon(target)));
        }
        Ok(Some((visited, Walk::Arrived)))
    }

    fn abandon(&mut self, target: StateId) -> (Vec<StateId>, Walk) {
        warn!(%target, "could not walk back to state, abandoning it");
        self.abandoned.insert(target);
        (Vec::new(), Walk::Diverged)
    }

    fn on_new_state(&mut self, id: StateId) {
        self.capture_screenshot(id);
        let has_webview = self.model.state(id).is_some_and(|s| s.has_webview);
        if has_webview {
            self.emit_script(id);
        }
    }

    fn emit_script(&mut self, target: StateId) {
        match self.model.shortest_event_path(target) {
            Ok(path) => {
                let script = ReplayScript {
                    app_id: self.config.app_id.clone(),
                    target,
                    steps: path
                        .into_iter()
                        .map(|(expected, event)| ScriptStep { expected, event })
                        .collect(),
                    created_at: self.elapsed(),
                };
                info!(%target, steps = script.steps.len(), "webview page found");
                self.scripts.insert(target, script);
            }
            Err(e) => debug!(%target, error = %e, "no clean path yet, script deferred"),
        }
    }

    /// Re-derives every script from the final model, so each one follows a
    /// shortest path made only of consistent transitions.
    fn finish_scripts(&mut self) {
        for target in self.model.webview_states() {
            let Ok(path) = self.model.shortest_event_path(target) else {
                warn!(%target, "webview page has no reliable path from the entry");
                self.scripts.shift_remove(&target);
                continue;
            };
            let steps: Vec<ScriptStep> = path
                .into_iter()
                .map(|(expected, event)| ScriptStep { expected, event })
                .collect();
            let created_at = self.scripts.get(&target).map(|s| s.created_at);
            let created_at = created_at.unwrap_or_else(|| self.elapsed());
            self.scripts.insert(
                target,
                ReplayScript {
                    app_id: self.config.app_id.clone(),
                    target,
                    steps,
                    created_at,
                },
            );
        }
        let order = self.model.webview_states();
        self.scripts
            .sort_by_key(|id, _| order.iter().position(|o| o == id).unwrap_or(usize::MAX));
    }

    fn snapshot_scripts(&self) -> Vec<ReplayScript> {
        self.scripts.values().cloned().collect()
    }

    fn capture_screenshot(&mut self, id: StateId) {
        if !self.device.supports(Capability::Screenshot) {
            return;
        }
        let rel = format!("states/{id}/screenshot.png");
        let res = self.device.screenshot().map_err(|e| e.to_string()).and_then(|png| {
            let path = self.config.output_dir.join(&rel);
            std::fs::create_dir_all(path.parent().expect("has parent"))
                .and_then(|_| std::fs::write(&path, png))
                .map_err(|e| e.to_string())
        });
        match res {
            Ok(()) => {
                if let Some(s) = self.model.state_mut(id) {
                    s.screenshot_ref = Some(rel);
                }
            }
            Err(e) => warn!(state = %id, error = %e, "screenshot failed"),
        }
    }
}

#[derive(Serialize)]
struct StateInfo<'a> {
    fingerprint: StateId,
    node_count: u32,
    activity_name: &'a str,
    has_webview: bool,
    first_seen_at: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    screenshot: Option<&'a str>,
    outgoing: usize,
}

pub fn to_pretty_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Writes `model.json`, one `script_<hex>.json` per script and
/// `states/<hex>/info.json` per state. Output bytes depend only on inputs.
pub fn save_results(model: &TransitionModel, scripts: &[ReplayScript], output_dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(output_dir)?;
    write_atomic(&output_dir.join("model.json"), &to_pretty_json(model))?;
    for script in scripts {
        write_atomic(&output_dir.join(script.file_name()), &to_pretty_json(script))?;
    }
    for s in model.states() {
        let id = s.fingerprint.id();
        let dir = output_dir.join("states").join(id.to_string());
        std::fs::create_dir_all(&dir)?;
        let info = StateInfo {
            fingerprint: id,
            node_count: s.fingerprint.node_count,
            activity_name: &s.activity_name,
            has_webview: s.has_webview,
            first_seen_at: s.first_seen_at,
            screenshot: s.screenshot_ref.as_deref(),
            outgoing: model.transitions().iter().filter(|t| t.from == id).count(),
        };
        write_atomic(&dir.join("info.json"), &to_pretty_json(&info))?;
    }
    Ok(())
}

/// Write-then-rename so a concurrent reader never sees a torn file.
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}
