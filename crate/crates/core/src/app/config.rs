//! Flat `key = value` configuration file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub const OUTPUT_ENV: &str = "DROIDMETER_OUTPUT";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("missing required key {0:?}")]
    Missing(&'static str),
    #[error("invalid value for {key}: {reason}")]
    Invalid { key: String, reason: String },
}

/// Where the app under test runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceSpec {
    Serial(String),
    /// Scenario file for the simulated device.
    Sim(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub device: String,
    pub app_id: String,
    pub max_explore_ms: u64,
    pub max_depth: usize,
    pub dump_retry: u32,
    pub retry_limit: u32,
    pub quiescence_ms: u64,
    pub max_wait_ms: u64,
    pub command_port: u16,
    pub output_dir: PathBuf,
    pub rng_seed: Option<u64>,
    /// Local end of the debug port forward; 0 picks a free port.
    pub debug_local_port: u16,
    pub frame_capture_ms: u64,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

const KEYS: &[&str] = &[
    "device",
    "app_id",
    "max_explore_ms",
    "max_depth",
    "dump_retry",
    "retry_limit",
    "quiescence_ms",
    "max_wait_ms",
    "command_port",
    "output_dir",
    "rng_seed",
    "debug_local_port",
    "frame_capture_ms",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Invalid {
        key: key.to_string(),
        reason: format!("{value:?}: {e}"),
    })
}

impl Config {
    pub fn new(device: &str, app_id: &str) -> Self {
        Self {
            device: device.to_string(),
            app_id: app_id.to_string(),
            max_explore_ms: 600_000,
            max_depth: 32,
            dump_retry: crate::device::DEFAULT_DUMP_RETRIES,
            retry_limit: crate::replayer::DEFAULT_RETRY_LIMIT,
            quiescence_ms: crate::collector::DEFAULT_QUIESCENCE_MS,
            max_wait_ms: crate::collector::DEFAULT_MAX_WAIT_MS,
            command_port: 4723,
            output_dir: PathBuf::from("droidmeter-output"),
            rng_seed: None,
            debug_local_port: 0,
            frame_capture_ms: 5000,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut device = None;
        let mut app_id = None;
        let mut cfg = Config::new("", "");
        cfg.base_dir = base_dir.to_path_buf();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                reason: "expected key = value".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
            if seen.contains(&key) {
                return Err(ConfigError::Syntax {
                    line: n + 1,
                    reason: format!("duplicate key {key:?}"),
                });
            }
            seen.push(key);
            match key {
                "device" => device = Some(value.to_string()),
                "app_id" => app_id = Some(value.to_string()),
                "max_explore_ms" => cfg.max_explore_ms = num(key, value)?,
                "max_depth" => cfg.max_depth = num(key, value)?,
                "dump_retry" => cfg.dump_retry = num(key, value)?,
                "retry_limit" => cfg.retry_limit = num(key, value)?,
                "quiescence_ms" => cfg.quiescence_ms = num(key, value)?,
                "max_wait_ms" => cfg.max_wait_ms = num(key, value)?,
                "command_port" => cfg.command_port = num(key, value)?,
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "rng_seed" => cfg.rng_seed = Some(num(key, value)?),
                "debug_local_port" => cfg.debug_local_port = num(key, value)?,
                "frame_capture_ms" => cfg.frame_capture_ms = num(key, value)?,
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.device = device.filter(|d| !d.is_empty()).ok_or(ConfigError::Missing("device"))?;
        cfg.app_id = app_id.filter(|a| !a.is_empty()).ok_or(ConfigError::Missing("app_id"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Applies environment overrides. A relative override is taken from
    /// the working directory, not the config's.
    pub fn with_env(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|d| !d.is_empty()) {
            let dir = PathBuf::from(dir);
            self.output_dir = match std::env::current_dir() {
                Ok(cwd) if dir.is_relative() => cwd.join(dir),
                _ => dir,
            };
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, reason: &str| {
            Err(ConfigError::Invalid {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.command_port == 0 {
            return invalid("command_port", "must be in 1..=65535");
        }
        if self.max_explore_ms == 0 {
            return invalid("max_explore_ms", "must be positive");
        }
        if self.max_depth == 0 {
            return invalid("max_depth", "must be positive");
        }
        if self.max_wait_ms == 0 {
            return invalid("max_wait_ms", "must be positive");
        }
        if self.device.strip_prefix("sim:").is_some_and(str::is_empty) {
            return invalid("device", "sim: needs a scenario path");
        }
        Ok(())
    }

    pub fn device_spec(&self) -> DeviceSpec {
        match self.device.strip_prefix("sim:") {
            Some(path) => DeviceSpec::Sim(self.resolve(Path::new(path))),
            None => DeviceSpec::Serial(self.device.clone()),
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Effective configuration in file syntax, every key spelled out.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("device", &self.device);
        put("app_id", &self.app_id);
        put("max_explore_ms", &self.max_explore_ms);
        put("max_depth", &self.max_depth);
        put("dump_retry", &self.dump_retry);
        put("retry_limit", &self.retry_limit);
        put("quiescence_ms", &self.quiescence_ms);
        put("max_wait_ms", &self.max_wait_ms);
        put("command_port", &self.command_port);
        put("output_dir", &self.output_dir.display());
        if let Some(seed) = self.rng_seed {
            put("rng_seed", &seed);
        }
        put("debug_local_port", &self.debug_local_port);
        put("frame_capture_ms", &self.frame_capture_ms);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_applied() {
        let c = Config::parse("device = emulator-5554\napp_id = com.example\n", Path::new("/x")).unwrap();
        assert_eq!(c.max_explore_ms, 600_000);
        assert_eq!(c.retry_limit, 5);
        assert_eq!(c.quiescence_ms, 2000);
        assert_eq!(c.max_wait_ms, 30_000);
        assert_eq!(c.command_port, 4723);
        assert_eq!(c.rng_seed, None);
        assert_eq!(c.device_spec(), DeviceSpec::Serial("emulator-5554".into()));
    }

    #[test]
    fn round_trip() {
        let text = "# comment\ndevice = sim:scn/app.json\napp_id = com.a\nrng_seed = 7\ncommand_port=9000\noutput_dir = out dir\n";
        let c = Config::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(c.device_spec(), DeviceSpec::Sim(PathBuf::from("/cfg/scn/app.json")));
        assert_eq!(c.output_path(), PathBuf::from("/cfg/out dir"));
        let again = Config::parse(&c.to_text(), Path::new("/cfg")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_bad_input() {
        let base = Path::new(".");
        assert_eq!(
            Config::parse("device = x\napp_id = y\ncolour = red\n", base),
            Err(ConfigError::UnknownKey("colour".into()))
        );
        assert_eq!(Config::parse("app_id = y\n", base), Err(ConfigError::Missing("device")));
        assert!(matches!(
            Config::parse("device = x\napp_id = y\ncommand_port = 0\n", base),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            Config::parse("device = x\napp_id = y\ncommand_port = 70000\n", base),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            Config::parse("device = x\napp_id = y\nmax_depth\n", base),
            Err(ConfigError::Syntax { line: 3, .. })
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err = Config::load(Path::new("/nonexistent/dm.conf")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dm.conf"));
    }
}
