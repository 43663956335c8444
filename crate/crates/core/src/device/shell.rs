//! Real-device backend driving `adb`.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::mpsc::{channel, Receiver};
use std::time::{Duration, Instant};

use tracing::{debug, warn};

use super::{Capability, DeviceAdapter, DeviceError, LogLine};
use crate::collector::DebugEndpoint;
use crate::metrics::FrameSample;
use crate::ui_tree::{EventKind, UiEvent};

const REMOTE_DUMP: &str = "/sdcard/ui.xml";
const REMOTE_VIDEO: &str = "/sdcard/droidmeter.mp4";
const DECODE_FPS: u64 = 10;
const DECODE_W: usize = 90;
const DECODE_H: usize = 160;

#[derive(Debug, Clone, Default)]
pub struct CommandOutput {
    pub success: bool,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

impl CommandOutput {
    pub fn stdout_text(&self) -> String {
        String::from_utf8_lossy(&self.stdout).into_owned()
    }
}

/// Process execution, swappable so command lines can be checked offline.
pub trait CommandRunner: Send {
    fn run(&mut self, program: &str, args: &[String]) -> std::io::Result<CommandOutput>;

    /// Spawns a long-running command and streams its stdout lines.
    fn stream_lines(&mut self, program: &str, args: &[String]) -> std::io::Result<Receiver<String>>;
}

pub struct SystemRunner;

impl CommandRunner for SystemRunner {
    fn run(&mut self, program: &str, args: &[String]) -> std::io::Result<CommandOutput> {
        let out = Command::new(program).args(args).output()?;
        Ok(CommandOutput {
            success: out.status.success(),
            stdout: out.stdout,
            stderr: out.stderr,
        })
    }

    fn stream_lines(&mut self, program: &str, args: &[String]) -> std::io::Result<Receiver<String>> {
        let mut child = Command::new(program)
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
            let _ = child.kill();
            let _ = child.wait();
        });
        Ok(rx)
    }
}

/// Parses a `logcat -v epoch` line: `<secs>.<millis> <pid> <tid> <lvl> <tag>: <msg>`.
pub fn parse_logcat_epoch(line: &str) -> Option<LogLine> {
    let trimmed = line.trim_start();
    let stamp = trimmed.split_whitespace().next()?;
    let secs: f64 = stamp.parse().ok()?;
    Some(((secs * 1000.0).round() as u64, trimmed[stamp.len()..].trim().to_string()))
}

/// Extracts the resumed activity component from `dumpsys activity activities`.
pub fn parse_resumed_activity(dumpsys: &str) -> Option<String> {
    dumpsys
        .lines()
        .filter(|l| l.contains("mResumedActivity") || l.contains("topResumedActivity"))
        .find_map(|l| l.split_whitespace().find(|tok| tok.contains('/')))
        .map(|c| c.trim_end_matches('}').to_string())
}

/// Splits raw RGB24 video frames into samples spaced at `fps`.
pub fn frames_from_rgb24(raw: &[u8], width: usize, height: usize, fps: u64) -> Vec<FrameSample> {
    let frame_bytes = width * height * 3;
    if frame_bytes == 0 {
        return Vec::new();
    }
    raw.chunks_exact(frame_bytes)
        .enumerate()
        .map(|(i, chunk)| {
            let pixels: Vec<[u8; 3]> = chunk.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
            FrameSample::from_rgb(i as u64 * 1000 / fps, &pixels)
        })
        .collect()
}

/// A handset reached through `adb -s <serial>`.
pub struct ShellDevice {
    adb: String,
    serial: String,
    runner: Box<dyn CommandRunner>,
    started: Instant,
    package: Option<String>,
    scratch: PathBuf,
    ffmpeg: String,
}

impl ShellDevice {
    pub fn new(serial: &str) -> Self {
        Self::with_runner(serial, Box::new(SystemRunner))
    }

    pub fn with_runner(serial: &str, runner: Box<dyn CommandRunner>) -> Self {
        let scratch = std::env::temp_dir().join(format!("droidmeter-{}", serial.replace([':', '/'], "_")));
        Self {
            adb: "adb".into(),
            serial: serial.to_string(),
            runner,
            started: Instant::now(),
            package: None,
            scratch,
            ffmpeg: "ffmpeg".into(),
        }
    }

    pub fn adb_program(mut self, adb: &str) -> Self {
        self.adb = adb.to_string();
        self
    }

    fn args(&self, rest: &[&str]) -> Vec<String> {
        let mut v = vec!["-s".to_string(), self.serial.clone()];
        v.extend(rest.iter().map(|s| s.to_string()));
        v
    }

    fn adb(&mut self, rest: &[&str]) -> std::io::Result<CommandOutput> {
        let args = self.args(rest);
        debug!(cmd = %format!("{} {}", self.adb, args.join(" ")), "adb");
        self.runner.run(&self.adb.clone(), &args)
    }

    fn resolve_component(&mut self, app_id: &str) -> Result<String, DeviceError> {
        if app_id.contains('/') {
            return Ok(app_id.to_string());
        }
        let out = self
            .adb(&[
                "shell", "cmd", "package", "resolve-activity", "--brief", "-c",
                "android.intent.category.LAUNCHER", app_id,
            ])
            .map_err(|e| DeviceError::LaunchFailed(e.to_string()))?;
        out.stdout_text()
            .lines()
            .rev()
            .map(str::trim)
            .find(|l| l.contains('/'))
            .map(String::from)
            .ok_or_else(|| DeviceError::LaunchFailed(format!("no launcher activity for {app_id}")))
    }

    fn scratch_file(&self, name: &str) -> Result<PathBuf, DeviceError> {
        std::fs::create_dir_all(&self.scratch)?;
        Ok(self.scratch.join(name))
    }
}

impl DeviceAdapter for ShellDevice {
    fn capabilities(&self) -> BTreeSet<Capability> {
        Capability::ALL.into_iter().collect()
    }

    fn launch_app(&mut self, app_id: &str) -> Result<(), DeviceError> {
        let component = self.resolve_component(app_id)?;
        let package = component.split('/').next().unwrap_or_default().to_string();
        // Force-stop so every launch starts from a fresh task.
        self.adb(&["shell", "am", "force-stop", &package])
            .map_err(|e| DeviceError::LaunchFailed(e.to_string()))?;
        let out = self
            .adb(&["shell", "am", "start", "-W", "-n", &component])
            .map_err(|e| DeviceError::LaunchFailed(e.to_string()))?;
        let text = out.stdout_text();
        if !out.success || text.contains("Error") {
            return Err(DeviceError::LaunchFailed(format!(
                "{}{}",
                text.trim(),
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        self.package = Some(package);
        Ok(())
    }

    fn dump_ui(&mut self) -> Result<String, DeviceError> {
        let out = self
            .adb(&["shell", "uiautomator", "dump", REMOTE_DUMP])
            .map_err(|e| DeviceError::DumpFailed(e.to_string()))?;
        if !out.success || out.stdout_text().contains("ERROR") {
            return Err(DeviceError::DumpFailed(out.stdout_text().trim().to_string()));
        }
        let local = self.scratch_file("ui.xml")?;
        let local_s = local.to_string_lossy().into_owned();
        let out = self
            .adb(&["pull", REMOTE_DUMP, &local_s])
            .map_err(|e| DeviceError::DumpFailed(e.to_string()))?;
        if !out.success {
            return Err(DeviceError::DumpFailed("pull failed".into()));
        }
        std::fs::read_to_string(&local).map_err(|e| DeviceError::DumpFailed(e.to_string()))
    }

    fn inject(&mut self, event: &UiEvent) -> Result<(), DeviceError> {
        let out = match event.kind {
            EventKind::Tap => {
                let (x, y) = event
                    .tap_point
                    .ok_or_else(|| DeviceError::InjectFailed("tap without coordinates".into()))?;
                self.adb(&["shell", "input", "tap", &x.to_string(), &y.to_string()])
            }
            EventKind::Back => self.adb(&["shell", "input", "keyevent", "KEYCODE_BACK"]),
        }
        .map_err(|e| DeviceError::InjectFailed(e.to_string()))?;
        if !out.success {
            return Err(DeviceError::InjectFailed(
                String::from_utf8_lossy(&out.stderr).trim().to_string(),
            ));
        }
        Ok(())
    }

    fn current_activity(&mut self) -> Result<String, DeviceError> {
        let out = self
            .adb(&["shell", "dumpsys", "activity", "activities"])
            .map_err(|e| DeviceError::DumpFailed(e.to_string()))?;
        Ok(parse_resumed_activity(&out.stdout_text()).unwrap_or_else(|| "unknown".into()))
    }

    /// Records the screen, then decodes the clip with ffmpeg into
    /// downscaled RGB frames.
    fn capture_frames(&mut self, duration_ms: u64) -> Result<Vec<FrameSample>, DeviceError> {
        let secs = duration_ms.div_ceil(1000).max(1).to_string();
        let out = self
            .adb(&["shell", "screenrecord", "--time-limit", &secs, REMOTE_VIDEO])
            .map_err(|e| DeviceError::CaptureFailed(e.to_string()))?;
        if !out.success {
            return Err(DeviceError::CaptureFailed("screenrecord failed".into()));
        }
        let local = self.scratch_file("capture.mp4")?;
        let local_s = local.to_string_lossy().into_owned();
        self.adb(&["pull", REMOTE_VIDEO, &local_s])
            .map_err(|e| DeviceError::CaptureFailed(e.to_string()))?;
        let filter = format!("fps={DECODE_FPS},scale={DECODE_W}:{DECODE_H}");
        let args: Vec<String> = [
            "-v", "error", "-i", &local_s, "-vf", &filter, "-f", "rawvideo", "-pix_fmt", "rgb24", "-",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let ffmpeg = self.ffmpeg.clone();
        let decoded = self
            .runner
            .run(&ffmpeg, &args)
            .map_err(|e| DeviceError::CaptureFailed(format!("ffmpeg: {e}")))?;
        let frames = frames_from_rgb24(&decoded.stdout, DECODE_W, DECODE_H, DECODE_FPS);
        if frames.is_empty() {
            return Err(DeviceError::CaptureFailed("no frames decoded".into()));
        }
        Ok(frames
            .into_iter()
            .filter(|f| f.t_ms <= duration_ms)
            .collect())
    }

    fn log_stream(&mut self) -> Result<Receiver<LogLine>, DeviceError> {
        let args = self.args(&["logcat", "-v", "epoch"]);
        let raw = self.runner.stream_lines(&self.adb.clone(), &args)?;
        let (tx, rx) = channel();
        std::thread::spawn(move || {
            for line in raw {
                if let Some(parsed) = parse_logcat_epoch(&line) {
                    if tx.send(parsed).is_err() {
                        break;
                    }
                }
            }
        });
        Ok(rx)
    }

    /// `remote` is either an abstract socket name or a package name, in
    /// which case the WebView debug socket of its process is used.
    fn forward_debug_port(
        &mut self,
        remote: &str,
        local_port: u16,
    ) -> Result<DebugEndpoint, DeviceError> {
        let socket = if remote.starts_with("webview_devtools_remote") {
            remote.to_string()
        } else {
            let out = self
                .adb(&["shell", "pidof", remote])
                .map_err(|e| DeviceError::ForwardFailed(e.to_string()))?;
            let pid = out.stdout_text().split_whitespace().next().map(String::from);
            let pid = pid.ok_or_else(|| DeviceError::ForwardFailed(format!("{remote} is not running")))?;
            format!("webview_devtools_remote_{pid}")
        };
        let local = format!("tcp:{local_port}");
        let target = format!("localabstract:{socket}");
        let out = self
            .adb(&["forward", &local, &target])
            .map_err(|e| DeviceError::ForwardFailed(e.to_string()))?;
        if !out.success {
            return Err(DeviceError::ForwardFailed(
                String::from_utf8_lossy(&out.stderr).trim().to_string(),
            ));
        }
        // adb prints the allocated port when asked for tcp:0.
        let port = if local_port == 0 {
            out.stdout_text()
                .trim()
                .parse()
                .map_err(|_| DeviceError::ForwardFailed("adb did not report a port".into()))?
        } else {
            local_port
        };
        Ok(DebugEndpoint::local(port))
    }

    fn screenshot(&mut self) -> Result<Vec<u8>, DeviceError> {
        let out = self
            .adb(&["exec-out", "screencap", "-p"])
            .map_err(|e| DeviceError::CaptureFailed(e.to_string()))?;
        if !out.success || !out.stdout.starts_with(b"\x89PNG") {
            return Err(DeviceError::CaptureFailed("screencap returned no PNG".into()));
        }
        Ok(out.stdout)
    }

    fn now_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    fn pause(&mut self, ms: u64) {
        std::thread::sleep(Duration::from_millis(ms));
    }
}

impl Drop for ShellDevice {
    fn drop(&mut self) {
        if let Err(e) = std::fs::remove_dir_all(&self.scratch) {
            if e.kind() != std::io::ErrorKind::NotFound {
                warn!(error = %e, "could not remove scratch directory");
            }
        }
    }
}
