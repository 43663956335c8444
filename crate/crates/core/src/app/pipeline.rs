//! The explore, replay and measure commands end to end.

use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::mpsc::{channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::Serialize;
use tracing::{error, info, warn};

use super::config::{Config, DeviceSpec};
use super::listener::CommandListener;
use crate::collector::{
    page_load_time, Collection, CollectorError, DebugEndpoint, HarBuilder, NetworkEvent, Session,
};
use crate::device::{Capability, DeviceAdapter, LogLine, Scenario, ShellDevice, SimDevice};
use crate::explorer::{
    explore, save_results, to_pretty_json, write_atomic, ExploreConfig, ExploreControl, ReplayScript,
};
use crate::metrics::{parse_activity_timing, speed_index, ActivityReport, FrameSample, MetricsReport};
use crate::replayer::{replay, MeasurementHooks, ReplayOptions, ReplayOutcome, ReplayStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FATAL: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_UNREACHABLE: i32 = 3;

pub fn open_device(config: &Config) -> Result<Box<dyn DeviceAdapter>, String> {
    match config.device_spec() {
        DeviceSpec::Sim(path) => {
            let scenario = Scenario::load(&path).map_err(|e| e.to_string())?;
            let device = SimDevice::new(scenario, config.rng_seed.unwrap_or(0)).map_err(|e| e.to_string())?;
            Ok(Box::new(device))
        }
        DeviceSpec::Serial(serial) => Ok(Box::new(ShellDevice::new(&serial))),
    }
}

/// Explores the configured app and writes the model and scripts.
/// `stop` is polled between events; once set, results are saved and the
/// run ends normally.
pub fn run_explore(config: &Config, stop: Arc<AtomicBool>) -> i32 {
    let out = config.output_path();
    let mut device = match open_device(config) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FATAL;
        }
    };
    let (control, handle) = ExploreControl::with_stop_flag(stop);
    let _listener = match CommandListener::start(config.command_port, handle) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FATAL;
        }
    };
    let ecfg = ExploreConfig {
        app_id: config.app_id.clone(),
        max_explore_ms: config.max_explore_ms,
        max_depth: config.max_depth,
        dump_retry: config.dump_retry,
        output_dir: out.clone(),
    };
    println!("exploring {} on {}", config.app_id, config.device);
    let ex = match explore(device.as_mut(), &ecfg, Some(&control)) {
        Ok(ex) => ex,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FATAL;
        }
    };
    if let Err(e) = save_results(&ex.model, &ex.scripts, &out) {
        eprintln!("error: cannot write results to {}: {e}", out.display());
        return EXIT_FATAL;
    }
    for s in ex.model.states() {
        let mark = if s.has_webview { " [webview]" } else { "" };
        println!("state {} {}{mark}", s.fingerprint, s.activity_name);
    }
    for script in &ex.scripts {
        println!("script {} ({} steps)", out.join(script.file_name()).display(), script.steps.len());
    }
    println!(
        "{} states, {} scripts, stopped: {:?}",
        ex.model.state_count(),
        ex.scripts.len(),
        ex.stop
    );
    if ex.is_partial() {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    }
}

pub fn run_replay(config: &Config, script_path: &Path) -> i32 {
    let script = match ReplayScript::load(script_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FATAL;
        }
    };
    let mut device = match open_device(config) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FATAL;
        }
    };
    match measure_script(device.as_mut(), config, &script) {
        Ok(outcome) => exit_for(outcome.status),
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FATAL
        }
    }
}

/// Replays and measures every `script_*.json` in the output folder.
pub fn run_measure(config: &Config) -> i32 {
    let out = config.output_path();
    let scripts = match list_scripts(&out) {
        Ok(s) if !s.is_empty() => s,
        Ok(_) => {
            eprintln!("error: no scripts in {}", out.display());
            return EXIT_FATAL;
        }
        Err(e) => {
            eprintln!("error: cannot list {}: {e}", out.display());
            return EXIT_FATAL;
        }
    };
    let mut device = match open_device(config) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FATAL;
        }
    };
    let mut code = EXIT_OK;
    for path in scripts {
        let result = ReplayScript::load(&path)
            .map_err(|e| e.to_string())
            .and_then(|s| measure_script(device.as_mut(), config, &s));
        let this = match result {
            Ok(outcome) => exit_for(outcome.status),
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                EXIT_FATAL
            }
        };
        code = match (code, this) {
            (EXIT_FATAL, _) | (_, EXIT_FATAL) => EXIT_FATAL,
            (EXIT_UNREACHABLE, _) | (_, EXIT_UNREACHABLE) => EXIT_UNREACHABLE,
            _ => EXIT_OK,
        };
    }
    code
}

fn exit_for(status: ReplayStatus) -> i32 {
    match status {
        ReplayStatus::Reached => EXIT_OK,
        ReplayStatus::Unreachable => EXIT_UNREACHABLE,
        ReplayStatus::DeviceError => EXIT_FATAL,
    }
}

pub fn list_scripts(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("script_") && n.ends_with(".json"))
        })
        .collect();
    found.sort();
    Ok(found)
}

type CollectorThread = JoinHandle<Result<Collection, CollectorError>>;

/// Arms the debug-protocol collector before the final step and records
/// frames after it.
struct Measurement {
    endpoint: Option<DebugEndpoint>,
    quiescence_ms: u64,
    max_wait_ms: u64,
    frame_capture_ms: u64,
    collector: Option<CollectorThread>,
    frames: Option<Vec<FrameSample>>,
}

impl Measurement {
    fn arm_collector(&mut self) {
        let Some(endpoint) = self.endpoint.clone() else {
            return;
        };
        let (quiet, max_wait) = (self.quiescence_ms, self.max_wait_ms);
        let (ack_tx, ack_rx) = channel();
        let handle = std::thread::spawn(move || match Session::open(&endpoint) {
            Ok(session) => {
                let _ = ack_tx.send(Ok(()));
                session.collect(quiet, max_wait)
            }
            Err(e) => {
                let _ = ack_tx.send(Err(e.to_string()));
                Err(e)
            }
        });
        match ack_rx.recv() {
            Ok(Ok(())) => self.collector = Some(handle),
            Ok(Err(e)) => warn!(error = %e, "collector could not attach"),
            Err(_) => warn!("collector thread exited early"),
        }
    }

    fn events(&mut self) -> Vec<NetworkEvent> {
        match self.collector.take().map(JoinHandle::join) {
            Some(Ok(Ok(c))) => {
                if !c.is_complete() {
                    warn!(stop = ?c.stop, "network capture incomplete");
                }
                c.events
            }
            Some(Ok(Err(e))) => {
                warn!(error = %e, "network capture failed");
                Vec::new()
            }
            Some(Err(_)) => {
                warn!("collector thread panicked");
                Vec::new()
            }
            None => Vec::new(),
        }
    }
}

impl MeasurementHooks for Measurement {
    fn before(&mut self, _device: &mut dyn DeviceAdapter) {
        // A retried final step starts the measurement over; a previous
        // collector is left to time out on its own.
        self.collector = None;
        self.frames = None;
        self.arm_collector();
    }

    fn after(&mut self, device: &mut dyn DeviceAdapter) {
        if !device.supports(Capability::FrameCapture) {
            return;
        }
        match device.capture_frames(self.frame_capture_ms) {
            Ok(frames) => self.frames = Some(frames),
            Err(e) => warn!(error = %e, "frame capture failed"),
        }
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    script: &'a ReplayScript,
    #[serde(flatten)]
    outcome: &'a ReplayOutcome,
}

/// Replays `script` with measurement armed and writes the run folder.
pub fn measure_script(
    device: &mut dyn DeviceAdapter,
    config: &Config,
    script: &ReplayScript,
) -> Result<ReplayOutcome, String> {
    let run_dir = config.output_path().join("runs").join(script.target.to_string());
    std::fs::create_dir_all(&run_dir).map_err(|e| format!("{}: {e}", run_dir.display()))?;

    let logs: Option<Receiver<LogLine>> = match device.log_stream() {
        Ok(rx) => Some(rx),
        Err(e) => {
            warn!(error = %e, "no device log, activity timing unavailable");
            None
        }
    };
    let package = script.app_id.split('/').next().unwrap_or(&script.app_id).to_string();
    let endpoint = match device.forward_debug_port(&package, config.debug_local_port) {
        Ok(ep) => Some(ep),
        Err(e) => {
            warn!(error = %e, "no debug endpoint, network capture unavailable");
            None
        }
    };
    let mut hooks = Measurement {
        endpoint,
        quiescence_ms: config.quiescence_ms,
        max_wait_ms: config.max_wait_ms,
        frame_capture_ms: config.frame_capture_ms,
        collector: None,
        frames: None,
    };
    let opts = ReplayOptions {
        retry_limit: config.retry_limit,
        dump_retry: config.dump_retry,
    };
    let outcome = replay(device, script, opts, &mut hooks);
    let record = RunRecord {
        script,
        outcome: &outcome,
    };
    let record_path = run_dir.join(format!("replay_{}.json", script.target));
    write_atomic(&record_path, &to_pretty_json(&record)).map_err(|e| e.to_string())?;
    println!(
        "replay {} -> {:?} ({} steps, {} retries)",
        script.target, outcome.status, outcome.steps_executed, outcome.retries_used
    );
    if outcome.status != ReplayStatus::Reached {
        if let Some(e) = &outcome.error {
            error!(error = %e, "replay failed");
        }
        return Ok(outcome);
    }

    let activity = device.current_activity().unwrap_or_default();
    let events = hooks.events();
    let anchor = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64());
    let build = HarBuilder::new(&activity).anchor(anchor).build(&events);
    for skipped in &build.skipped {
        warn!(error = %skipped, "HAR entry skipped");
    }
    write_atomic(&run_dir.join("page.har"), &to_pretty_json(&build.har)).map_err(|e| e.to_string())?;

    let speed_index_ms = match hooks.frames.as_deref() {
        Some(frames) if !frames.is_empty() => match speed_index(frames) {
            Ok(si) => Some(si),
            Err(e) => {
                warn!(error = %e, "SpeedIndex unavailable");
                None
            }
        },
        _ => None,
    };
    let timings = logs
        .map(|rx| parse_activity_timing(rx.try_iter()))
        .unwrap_or_default();
    let timing = timings
        .iter()
        .rev()
        .find(|t| activity_matches(&activity, &t.activity_name))
        .or_else(|| timings.last());
    let report = MetricsReport {
        speed_index_ms,
        page_load_time_ms: page_load_time(&events),
        activity: timing.map(ActivityReport::from),
    };
    write_atomic(&run_dir.join("metrics.json"), &to_pretty_json(&report)).map_err(|e| e.to_string())?;
    info!(dir = %run_dir.display(), "measurements written");
    println!(
        "  page load {} ms, SpeedIndex {} ms, {} requests",
        report.page_load_time_ms.map_or("-".into(), |v| v.to_string()),
        report.speed_index_ms.map_or("-".into(), |v| format!("{v:.0}")),
        build.har.log.entries.len()
    );
    Ok(outcome)
}

/// Marker names may be short (`.WebActivity`) or fully qualified.
fn activity_matches(current: &str, marker: &str) -> bool {
    current == marker || current.ends_with(marker) || marker.ends_with(current.rsplit('/').next().unwrap_or(current))
}
