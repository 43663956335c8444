//! Step-by-step script replay with state checks and rewind-and-retry.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use crate::device::{read_tree, DeviceAdapter, DeviceError, DEFAULT_DUMP_RETRIES};
use crate::explorer::ReplayScript;
use crate::ui_tree::{fingerprint, StateId, UiEvent, UiNode};

pub const DEFAULT_RETRY_LIMIT: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayStatus {
    Reached,
    Unreachable,
    DeviceError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub observed: StateId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub status: ReplayStatus,
    pub steps_executed: usize,
    pub retries_used: u32,
    pub divergences: Vec<Divergence>,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Measurement callbacks around the final step. Implementations must not
/// drive the device UI.
pub trait MeasurementHooks {
    /// Called right before the final event is injected. May be called
    /// again if that event has to be retried.
    fn before(&mut self, device: &mut dyn DeviceAdapter);
    fn after(&mut self, device: &mut dyn DeviceAdapter);
}

pub struct NoHooks;

impl MeasurementHooks for NoHooks {
    fn before(&mut self, _device: &mut dyn DeviceAdapter) {}
    fn after(&mut self, _device: &mut dyn DeviceAdapter) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayOptions {
    pub retry_limit: u32,
    pub dump_retry: u32,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            retry_limit: DEFAULT_RETRY_LIMIT,
            dump_retry: DEFAULT_DUMP_RETRIES,
        }
    }
}

struct Run<'a> {
    device: &'a mut dyn DeviceAdapter,
    script: &'a ReplayScript,
    opts: ReplayOptions,
    known: HashSet<StateId>,
    retries: Vec<u32>,
    divergences: Vec<Divergence>,
    furthest: usize,
}

enum Verdict {
    Reached,
    Unreachable,
}

/// Replays `script` from a fresh launch.
///
/// Each step's live page must match the recorded fingerprint before its
/// event fires; the event is re-resolved against the live tree. A mismatch
/// costs one retry of the step that should have produced the expected
/// page: first the last event is undone with Back, and failing that the
/// app is relaunched and the prefix replayed. Pages the script never
/// mentions (transient dialogs) get one free Back first.
pub fn replay(
    device: &mut dyn DeviceAdapter,
    script: &ReplayScript,
    opts: ReplayOptions,
    hooks: &mut dyn MeasurementHooks,
) -> ReplayOutcome {
    let started = device.now_ms();
    let mut run = Run {
        device,
        script,
        opts,
        known: script.expected_states().into_iter().collect(),
        retries: vec![0; script.steps.len()],
        divergences: Vec::new(),
        furthest: 0,
    };
    let result = run.execute(hooks);
    let (status, error) = match result {
        Ok(Verdict::Reached) => (ReplayStatus::Reached, None),
        Ok(Verdict::Unreachable) => (ReplayStatus::Unreachable, None),
        Err(e) => {
            warn!(error = %e, "device failure during replay");
            (ReplayStatus::DeviceError, Some(e.to_string()))
        }
    };
    let outcome = ReplayOutcome {
        status,
        steps_executed: run.furthest,
        retries_used: run.retries.iter().sum(),
        divergences: run.divergences,
        duration_ms: run.device.now_ms().saturating_sub(started),
        error,
    };
    info!(
        target = %script.target,
        status = ?outcome.status,
        retries = outcome.retries_used,
        "replay finished"
    );
    outcome
}

impl Run<'_> {
    fn observe(&mut self) -> Result<(UiNode, StateId), DeviceError> {
        let tree = read_tree(self.device, self.opts.dump_retry)?;
        let id = fingerprint(&tree).id();
        Ok((tree, id))
    }

    fn execute(&mut self, hooks: &mut dyn MeasurementHooks) -> Result<Verdict, DeviceError> {
        let n = self.script.steps.len();
        let expected = self.script.expected_states();
        let app = self.script.app_id.clone();

        if n == 0 {
            hooks.before(self.device);
            self.device.launch_app(&app)?;
            hooks.after(self.device);
        } else {
            self.device.launch_app(&app)?;
        }

        let mut i = 0;
        let mut dialog_back_used = false;
        loop {
            let (tree, here) = self.observe()?;
            if here == expected[i] {
                dialog_back_used = false;
                if i == n {
                    return Ok(Verdict::Reached);
                }
                let step = &self.script.steps[i];
                match step.event.rebind(&tree) {
                    Ok(event) => {
                        let last = i + 1 == n;
                        if last {
                            hooks.before(self.device);
                        }
                        self.device.inject(&event)?;
                        if last {
                            hooks.after(self.device);
                        }
                        i += 1;
                        self.furthest = self.furthest.max(i);
                        continue;
                    }
                    Err(e) => {
                        debug!(step = i, error = %e, "element path no longer resolves");
                        if !self.charge(i + 1, here) {
                            return Ok(Verdict::Unreachable);
                        }
                        self.device.launch_app(&app)?;
                        i = 0;
                        continue;
                    }
                }
            }

            if !self.known.contains(&here) && !dialog_back_used {
                debug!(observed = %here, "unexpected page, dismissing with back");
                dialog_back_used = true;
                self.device.inject(&UiEvent::back())?;
                continue;
            }
            dialog_back_used = false;

            if !self.charge(i, here) {
                return Ok(Verdict::Unreachable);
            }
            if i > 0 && here == expected[i - 1] {
                i -= 1;
                continue;
            }
            self.device.inject(&UiEvent::back())?;
            let (_, after_back) = self.observe()?;
            if i > 0 && after_back == expected[i - 1] {
                i -= 1;
            } else if after_back != expected[i] {
                self.device.launch_app(&app)?;
                i = 0;
            }
        }
    }

    /// Counts a retry against the step whose event should have led to
    /// `expected[i]`. Returns false once that step is out of retries.
    fn charge(&mut self, i: usize, observed: StateId) -> bool {
        let step = i.max(1) - 1;
        self.divergences.push(Divergence { step, observed });
        if self.retries.is_empty() || self.retries[step] >= self.opts.retry_limit {
            warn!(step, "retry limit reached");
            return false;
        }
        self.retries[step] += 1;
        debug!(step, retries = self.retries[step], "retrying step");
        true
    }
}
