mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use droidmeter::app::Config;

fn droidmeter(args: &[&str], cwd: &Path, env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_droidmeter"));
    cmd.args(args).current_dir(cwd).env_remove("DROIDMETER_OUTPUT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, scenario: &Path, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let text = format!(
        "device = sim:{}\napp_id = com.example.chain\ncommand_port = {}\nrng_seed = 3\nquiescence_ms = 100\nmax_wait_ms = 500\nframe_capture_ms = 500\n{extra}",
        scenario.display(),
        common::free_port()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = droidmeter(&["explore", "--config", "nope/dm.conf"], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nope/dm.conf"), "{}", stderr(&out));
}

#[test]
fn explore_replay_and_unreachable_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let chain = common::write_json(dir.path(), "chain.json", &common::chain_scenario(3));
    let conf = write_config(dir.path(), "dm.conf", &chain, "output_dir = out\n");
    let conf_s = conf.to_str().unwrap();

    let out = droidmeter(&["explore", "--config", conf_s], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let scripts = droidmeter::app::pipeline::list_scripts(&dir.path().join("out")).unwrap();
    assert_eq!(scripts.len(), 1);
    let script = scripts[0].to_str().unwrap();

    let out = droidmeter(&["replay", "--config", conf_s, "--script", script], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let out = droidmeter(&["replay", "--config", conf_s, "--script", "missing.json"], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing.json"), "{}", stderr(&out));

    // Every injected event lost and no retries allowed.
    let mut flaky: Value = common::chain_scenario(3);
    flaky["flakiness"] = serde_json::json!({"drop_probability": 1.0});
    let flaky = common::write_json(dir.path(), "flaky.json", &flaky);
    let flaky_conf = write_config(dir.path(), "flaky.conf", &flaky, "output_dir = out\nretry_limit = 0\n");
    let out = droidmeter(
        &["replay", "--config", flaky_conf.to_str().unwrap(), "--script", script],
        dir.path(),
        &[],
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));

    let out = droidmeter(&["measure", "--config", flaky_conf.to_str().unwrap(), "--all-scripts"], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn measure_without_scripts_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let chain = common::write_json(dir.path(), "chain.json", &common::chain_scenario(2));
    let conf = write_config(dir.path(), "dm.conf", &chain, "output_dir = empty\n");
    let out = droidmeter(&["measure", "--config", conf.to_str().unwrap(), "--all-scripts"], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unreachable_serial_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("dm.conf");
    std::fs::write(
        &conf,
        format!("device = no-such-serial-0000\napp_id = com.example\ncommand_port = {}\n", common::free_port()),
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_droidmeter"))
        .args(["explore", "--config", conf.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn output_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let chain = common::write_json(dir.path(), "chain.json", &common::chain_scenario(1));
    let conf = write_config(dir.path(), "dm.conf", &chain, "output_dir = from_config\n");
    let elsewhere = dir.path().join("from_env");
    let out = droidmeter(
        &["explore", "--config", conf.to_str().unwrap()],
        dir.path(),
        &[("DROIDMETER_OUTPUT", &elsewhere)],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(elsewhere.join("model.json").is_file());
    assert!(!dir.path().join("from_config").exists());
}

#[test]
fn config_text_round_trips() {
    let text = "device = sim:app.json\napp_id = com.a\nmax_explore_ms = 1000\nretry_limit = 2\nquiescence_ms = 50\nmax_wait_ms = 90\ncommand_port = 5000\noutput_dir = o\nrng_seed = 11\n";
    let cfg = Config::parse(text, Path::new("/base")).unwrap();
    assert_eq!(Config::parse(&cfg.to_text(), Path::new("/base")).unwrap(), cfg);
}
