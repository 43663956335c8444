//! End-to-end acceptance checks against the simulated device. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use droidmeter::app::{self, Config};
use droidmeter::collector::{build_har, page_load_time, validate_har, NetworkEvent};
use droidmeter::device::{Scenario, SimDevice};
use droidmeter::explorer::{explore, save_results, ExploreConfig, Exploration, ReplayScript};
use droidmeter::metrics::{parse_activity_timing, speed_index, FrameSample};
use droidmeter::model::TransitionModel;
use droidmeter::replayer::{replay, NoHooks, ReplayOptions, ReplayStatus};
use droidmeter::ui_tree::{StateId, UiEvent};

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn unlimited(app_id: &str, out: &Path) -> ExploreConfig {
    let mut c = ExploreConfig::new(app_id, out);
    c.max_explore_ms = u64::MAX;
    c
}

fn explore_file(path: &Path, seed: u64, out: &Path) -> Result<Exploration, String> {
    let scenario = Scenario::load(path).map_err(|e| e.to_string())?;
    let app_id = scenario.app_id.clone();
    let mut dev = SimDevice::new(scenario, seed).map_err(|e| e.to_string())?;
    explore(&mut dev, &unlimited(&app_id, out), None).map_err(|e| e.to_string())
}

fn labels_to_ids(scenario: &Value, labels: &BTreeSet<String>) -> BTreeSet<StateId> {
    labels.iter().map(|l| state_id(scenario, l)).collect()
}

fn news_config(dir: &Path, seed: u64) -> Config {
    let mut c = Config::new(&format!("sim:{}", news_app_path().display()), NEWS_APP);
    c.output_dir = dir.to_path_buf();
    c.rng_seed = Some(seed);
    c.quiescence_ms = 150;
    c.max_wait_ms = 5000;
    c.frame_capture_ms = 3000;
    c
}

/// Six-page app with WebViews on two pages.
fn criterion_1() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let scn = news_app_json();
    let ex = explore_file(&news_app_path(), 1, dir.path())?;
    let elapsed = started.elapsed();
    let (p1, p2, p4, p5) = (
        state_id(&scn, "P1"),
        state_id(&scn, "P2"),
        state_id(&scn, "P4"),
        state_id(&scn, "P5"),
    );
    check!(ex.model.state_count() == 6, "expected 6 states, found {}", ex.model.state_count());
    let targets: BTreeSet<StateId> = ex.scripts.iter().map(|s| s.target).collect();
    check!(targets == BTreeSet::from([p4, p5]), "script targets {targets:?}");
    let p4_script = ex.scripts.iter().find(|s| s.target == p4).unwrap();
    let event_of = |from: &str, to: &str| -> UiEvent {
        let t = scn["transitions"]
            .as_array()
            .unwrap()
            .iter()
            .find(|t| t["from"] == from && t["to"] == to)
            .unwrap();
        serde_json::from_value(t["event"].clone()).unwrap()
    };
    let (e1, e3) = (event_of("P1", "P2"), event_of("P2", "P4"));
    let steps = &p4_script.steps;
    check!(
        steps.len() == 2
            && steps[0].expected == p1
            && steps[0].event.same_action(&e1)
            && steps[1].expected == p2
            && steps[1].event.same_action(&e3),
        "P4 script was {steps:?}"
    );
    check!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("6 states, scripts for P4 and P5, {} ms", elapsed.as_millis()))
}

/// Discovered states and webview scripts equal a BFS over the scenario file.
fn criterion_2() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..50u64 {
        let scn = random_scenario(seed, 10);
        let path = write_json(dir.path(), &format!("s{seed}.json"), &scn);
        let out = dir.path().join(format!("out{seed}"));
        let ex = explore_file(&path, seed, &out)?;
        let reach = reachable_labels(&scn);
        let expected = labels_to_ids(&scn, &reach);
        let found: BTreeSet<StateId> = ex.model.states().map(|s| s.fingerprint.id()).collect();
        check!(found == expected, "seed {seed}: found {found:?}, oracle {expected:?}");
        let web: BTreeSet<String> = reach.iter().filter(|l| is_webview_label(&scn, l)).cloned().collect();
        let web_ids = labels_to_ids(&scn, &web);
        let scripted: BTreeSet<StateId> = ex.scripts.iter().map(|s| s.target).collect();
        check!(scripted == web_ids, "seed {seed}: scripts {scripted:?}, oracle {web_ids:?}");
        check!(ex.scripts.len() == scripted.len(), "seed {seed}: duplicate scripts");
    }
    let elapsed = started.elapsed();
    check!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("50 scenarios match the oracle, {} ms", elapsed.as_millis()))
}

fn chain_script(dir: &Path) -> Result<(PathBuf, ReplayScript), String> {
    let path = write_json(dir, "chain.json", &chain_scenario(4));
    let ex = explore_file(&path, 0, &dir.join("chain_out"))?;
    let script = ex.scripts.first().cloned().ok_or("chain produced no script")?;
    Ok((path, script))
}

/// Every script replays cleanly; seeded flakiness is absorbed by retries.
fn criterion_3() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut clean = 0;
    let mut sources: Vec<PathBuf> = vec![news_app_path()];
    for seed in 0..50u64 {
        sources.push(write_json(dir.path(), &format!("s{seed}.json"), &random_scenario(seed, 10)));
    }
    for path in &sources {
        let ex = explore_file(path, 0, &dir.path().join("o"))?;
        for script in &ex.scripts {
            let mut dev = SimDevice::new(Scenario::load(path).unwrap(), 0).unwrap();
            let out = replay(&mut dev, script, ReplayOptions::default(), &mut NoHooks);
            check!(
                out.status == ReplayStatus::Reached && out.retries_used == 0,
                "{}: script {} gave {:?}",
                path.display(),
                script.target,
                out
            );
            clean += 1;
        }
    }

    let (path, script) = chain_script(dir.path())?;
    check!(script.steps.len() == 4, "chain script has {} steps", script.steps.len());
    let mut flaky = Scenario::load(&path).unwrap();
    flaky.flakiness.drop_probability = 0.2;
    let mut total_retries = 0;
    let mut unreachable_at_zero = 0;
    for seed in 0..100u64 {
        let mut dev = SimDevice::new(flaky.clone(), seed).unwrap();
        let out = replay(&mut dev, &script, ReplayOptions { retry_limit: 5, ..Default::default() }, &mut NoHooks);
        check!(out.status == ReplayStatus::Reached, "seed {seed} at limit 5: {out:?}");
        check!(out.retries_used <= 5 * 4, "seed {seed}: {} retries", out.retries_used);
        total_retries += out.retries_used;
        let mut dev = SimDevice::new(flaky.clone(), seed).unwrap();
        let out = replay(&mut dev, &script, ReplayOptions { retry_limit: 0, ..Default::default() }, &mut NoHooks);
        if out.status == ReplayStatus::Unreachable {
            unreachable_at_zero += 1;
        }
    }
    check!(unreachable_at_zero > 0, "retry_limit 0 never failed");
    Ok(format!(
        "{clean} scripts clean; 100/100 flaky runs reached ({total_retries} retries); {unreachable_at_zero} unreachable at limit 0"
    ))
}

fn p5_trace() -> Vec<Value> {
    news_app_json()["states"]["P5"]["network_trace"].as_array().unwrap().clone()
}

/// HAR built from the authored five-request trace, offline and through the
/// live debug connection.
fn criterion_4() -> Outcome {
    let raw = p5_trace();
    let events: Vec<NetworkEvent> = raw.iter().map(|v| serde_json::from_value(v.clone()).unwrap()).collect();
    let oracle = trace_entry_times(&raw);
    check!(oracle.len() == 5, "trace should hold 5 requests");
    let first = raw.iter().find(|e| e["kind"] == "RequestWillBeSent").unwrap()["timestamp"].as_f64().unwrap();
    let load = raw.iter().find(|e| e["kind"] == "LoadEventFired").unwrap()["timestamp"].as_f64().unwrap();
    let plt_oracle = ((load - first) * 1000.0).round() as i64;

    let har_offline = serde_json::to_value(build_har(&events, "weather")).unwrap();
    check!(page_load_time(&events) == Some(plt_oracle), "offline PLT {:?} vs {plt_oracle}", page_load_time(&events));

    let dir = tempfile::tempdir().unwrap();
    let cfg = news_config(dir.path(), 1);
    let mut dev = app::open_device(&cfg)?;
    let ex = explore(dev.as_mut(), &unlimited(NEWS_APP, dir.path()), None).map_err(|e| e.to_string())?;
    let p5 = state_id(&news_app_json(), "P5");
    let script = ex.scripts.iter().find(|s| s.target == p5).ok_or("no P5 script")?;
    let outcome = app::measure_script(dev.as_mut(), &cfg, script)?;
    check!(outcome.status == ReplayStatus::Reached, "replay {outcome:?}");
    let run = dir.path().join("runs").join(p5.to_string());
    let har_live: Value = serde_json::from_slice(&std::fs::read(run.join("page.har")).unwrap()).unwrap();
    let metrics: Value = serde_json::from_slice(&std::fs::read(run.join("metrics.json")).unwrap()).unwrap();

    for (name, har) in [("offline", &har_offline), ("live", &har_live)] {
        if let Err(errs) = validate_har(har) {
            return Err(format!("{name} HAR invalid: {errs:?}"));
        }
        check!(har["log"]["version"] == "1.2", "{name}: version");
        let entries = har["log"]["entries"].as_array().unwrap();
        check!(entries.len() == 5, "{name}: {} entries", entries.len());
        let pages: Vec<&Value> = har["log"]["pages"].as_array().unwrap().iter().map(|p| &p["id"]).collect();
        for e in entries {
            check!(pages.contains(&&e["pageref"]), "{name}: dangling pageref");
            let id = e["_requestId"].as_str().unwrap();
            let time = e["time"].as_f64().unwrap();
            check!((time - oracle[id]).abs() <= 1.0, "{name}: {id} time {time} vs oracle {}", oracle[id]);
            let phases: f64 = ["blocked", "dns", "connect", "send", "wait", "receive"]
                .iter()
                .filter_map(|k| e["timings"][k].as_f64())
                .filter(|v| *v >= 0.0)
                .sum();
            check!((time - phases).abs() <= 1.0, "{name}: {id} phases sum {phases} vs time {time}");
        }
        let on_load = har["log"]["pages"][0]["pageTimings"]["onLoad"].as_f64().unwrap();
        check!((on_load - plt_oracle as f64).abs() < 0.5, "{name}: onLoad {on_load}");
    }
    check!(metrics["page_load_time_ms"] == json!(plt_oracle), "metrics PLT {}", metrics["page_load_time_ms"]);
    Ok(format!("5 entries within 1 ms of the trace oracle, PLT {plt_oracle} ms, schema valid"))
}

/// SpeedIndex against an exact summation oracle on random gray ramps.
fn criterion_5() -> Outcome {
    const PIXELS: u64 = 200;
    let gray = |t: u64, white: u64| {
        let px: Vec<u8> = (0..PIXELS).map(|i| if i < white { 255 } else { 0 }).collect();
        FrameSample::from_gray(t, &px)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = rng.gen_range(1..=50usize);
        let mut t = rng.gen_range(0..10_000u64);
        let mut times = Vec::with_capacity(n);
        let mut white = Vec::with_capacity(n);
        for i in 0..n {
            times.push(t);
            t += rng.gen_range(1..=400);
            white.push(match i {
                0 => 0,
                _ if i == n - 1 => PIXELS,
                _ => rng.gen_range(0..=PIXELS),
            });
        }
        let frames: Vec<FrameSample> = times.iter().zip(&white).map(|(&t, &w)| gray(t, w)).collect();
        let si = speed_index(&frames).map_err(|e| format!("case {case}: {e}"))?;
        let oracle = speed_index_oracle(&times, &white, PIXELS);
        let duration = (times[n - 1] - times[0]) as f64;
        worst = worst.max((si - oracle).abs());
        check!((si - oracle).abs() <= 1.0, "case {case}: {si} vs oracle {oracle}");
        check!((0.0..=duration).contains(&si), "case {case}: {si} outside [0, {duration}]");
    }
    let three = [gray(0, 0), gray(500, PIXELS / 2), gray(1000, PIXELS)];
    let si = speed_index(&three).map_err(|e| e.to_string())?;
    check!((si - 750.0).abs() < 1e-9, "three-frame example gave {si}");
    Ok(format!("200 cases, max deviation {worst:.2e} ms; 0/0.5/1 example = 750 ms"))
}

/// onCreate and fully-drawn durations from marker lines.
fn criterion_6() -> Outcome {
    let lines = [
        (100u64, "I/DroidMeter: DM_ONCREATE_BEGIN A"),
        (250, "I/DroidMeter: DM_ONCREATE_END A"),
        (900, "I/DroidMeter: DM_FULLY_DRAWN A"),
        (1300, "I/DroidMeter: DM_FULLY_DRAWN A"),
    ];
    let timings = parse_activity_timing(lines);
    check!(timings.len() == 1, "{} timings", timings.len());
    let t = &timings[0];
    check!(t.oncreate_ms() == 150, "onCreate {}", t.oncreate_ms());
    check!(t.fully_drawn_ms() == Some(800), "fully drawn {:?}", t.fully_drawn_ms());

    let dir = tempfile::tempdir().unwrap();
    let cfg = news_config(dir.path(), 1);
    let mut dev = app::open_device(&cfg)?;
    let ex = explore(dev.as_mut(), &unlimited(NEWS_APP, dir.path()), None).map_err(|e| e.to_string())?;
    let scn = news_app_json();
    let p4 = state_id(&scn, "P4");
    let script = ex.scripts.iter().find(|s| s.target == p4).ok_or("no P4 script")?;
    app::measure_script(dev.as_mut(), &cfg, script)?;
    let metrics: Value = serde_json::from_slice(
        &std::fs::read(dir.path().join("runs").join(p4.to_string()).join("metrics.json")).unwrap(),
    )
    .unwrap();
    let log = scn["states"]["P4"]["on_enter_log"].as_array().unwrap();
    let at = |marker: &str| {
        log.iter()
            .find(|l| l[1].as_str().unwrap().contains(marker))
            .map(|l| l[0].as_u64().unwrap())
            .unwrap()
    };
    let want_create = at("DM_ONCREATE_END") - at("DM_ONCREATE_BEGIN");
    let want_drawn = at("DM_FULLY_DRAWN") - at("DM_ONCREATE_BEGIN");
    check!(
        metrics["activity"]["oncreate_ms"] == json!(want_create),
        "scenario onCreate {} vs {want_create}",
        metrics["activity"]["oncreate_ms"]
    );
    check!(
        metrics["activity"]["fully_drawn_ms"] == json!(want_drawn),
        "scenario fully drawn {} vs {want_drawn}",
        metrics["activity"]["fully_drawn_ms"]
    );
    Ok(format!("onCreate 150 ms, fully drawn 800 ms; scenario run {want_create}/{want_drawn} ms"))
}

fn model_is_sound(path: &Path) -> Result<TransitionModel, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let model: TransitionModel = serde_json::from_slice(&bytes).map_err(|e| format!("model.json: {e}"))?;
    model.validate().map_err(|e| e.to_string())?;
    let ids: BTreeSet<StateId> = model.states().map(|s| s.fingerprint.id()).collect();
    check!(ids.contains(&model.entry()), "entry missing");
    for t in model.transitions() {
        check!(ids.contains(&t.from) && ids.contains(&t.to), "dangling transition");
    }
    Ok(model)
}

fn send_command(port: u16, cmd: &str) -> Result<String, String> {
    let deadline = Instant::now() + Duration::from_secs(10);
    let stream = loop {
        match TcpStream::connect(("127.0.0.1", port)) {
            Ok(s) => break s,
            Err(_) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => return Err(format!("connect: {e}")),
        }
    };
    stream.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    let mut w = stream.try_clone().unwrap();
    writeln!(w, "{cmd}").map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(stream).read_line(&mut line).map_err(|e| e.to_string())?;
    Ok(line)
}

/// `save` over the command port mid-run, then an interrupt.
fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut scn = news_app_json();
    scn["timing"] = json!({"realtime_latency_ms": 120});
    let scn_path = write_json(dir.path(), "slow.json", &scn);
    let port = free_port();
    let out = dir.path().join("out");
    let conf = dir.path().join("dm.conf");
    std::fs::write(
        &conf,
        format!(
            "device = sim:{}\napp_id = {NEWS_APP}\ncommand_port = {port}\noutput_dir = {}\nrng_seed = 1\n",
            scn_path.display(),
            out.display()
        ),
    )
    .unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_droidmeter"))
        .args(["explore", "--config"])
        .arg(&conf)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let result = (|| {
        let reply = send_command(port, "save")?;
        check!(reply == "ok\n", "save replied {reply:?}");
        let snap = model_is_sound(&out.join("model.json"))?;
        let unknown = send_command(port, "foo")?;
        check!(unknown == "err unknown\n", "foo replied {unknown:?}");
        std::thread::sleep(Duration::from_millis(300));
        // SAFETY: plain signal to a child process we own.
        let rc = unsafe { libc::kill(child.id() as i32, libc::SIGINT) };
        check!(rc == 0, "kill failed");
        let deadline = Instant::now() + Duration::from_secs(20);
        let status = loop {
            if let Some(s) = child.try_wait().unwrap() {
                break s;
            }
            check!(Instant::now() < deadline, "process did not exit after interrupt");
            std::thread::sleep(Duration::from_millis(20));
        };
        check!(status.code() == Some(0), "exit status {status:?}");
        let last = model_is_sound(&out.join("model.json"))?;
        check!(last.state_count() >= snap.state_count(), "final save lost states");
        Ok(format!(
            "snapshot with {} states, interrupted run saved {} states and exited 0",
            snap.state_count(),
            last.state_count()
        ))
    })();
    let _ = child.kill();
    let _ = child.wait();
    result
}

fn collect_files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let name = p.file_name().unwrap().to_string_lossy();
                let keep = name == "model.json"
                    || name.starts_with("script_")
                    || name == "page.har"
                    || name == "metrics.json"
                    || name.starts_with("replay_");
                if keep {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
                }
            }
        }
    }
    out.sort();
    out
}

/// One full pass over the deterministic workloads, written under `root`.
fn deterministic_pass(root: &Path) -> Result<(), String> {
    let news = root.join("news");
    let cfg = news_config(&news, 1);
    if app::run_explore(&cfg_with_port(&cfg), Arc::new(AtomicBool::new(false))) != 0 {
        return Err("explore failed".into());
    }
    if app::run_measure(&cfg) != 0 {
        return Err("measure failed".into());
    }
    for seed in 0..10u64 {
        let scn = random_scenario(seed, 10);
        let path = write_json(root, &format!("s{seed}.json"), &scn);
        let out = root.join(format!("rand{seed}"));
        let ex = explore_file(&path, seed, &out)?;
        save_results(&ex.model, &ex.scripts, &out).map_err(|e| e.to_string())?;
    }
    let (path, script) = chain_script(root)?;
    let mut flaky = Scenario::load(&path).unwrap();
    flaky.flakiness.drop_probability = 0.2;
    let mut outcomes = Vec::new();
    for seed in 0..20u64 {
        let mut dev = SimDevice::new(flaky.clone(), seed).unwrap();
        outcomes.push(replay(&mut dev, &script, ReplayOptions::default(), &mut NoHooks));
    }
    std::fs::write(root.join("replay_flaky.json"), serde_json::to_vec_pretty(&outcomes).unwrap()).unwrap();
    Ok(())
}

fn cfg_with_port(cfg: &Config) -> Config {
    let mut c = cfg.clone();
    c.command_port = free_port();
    c
}

/// Two identical passes produce byte-identical artifacts.
fn criterion_8() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    deterministic_pass(a.path())?;
    deterministic_pass(b.path())?;
    let fa = collect_files(a.path());
    let fb = collect_files(b.path());
    check!(fa.len() == fb.len(), "{} vs {} files", fa.len(), fb.len());
    let hars = fa.iter().filter(|(p, _)| p.ends_with("page.har")).count();
    check!(hars == 2, "expected 2 HAR files, got {hars}");
    for ((pa, ba), (pb, bb)) in fa.iter().zip(&fb) {
        check!(pa == pb, "file sets differ: {} vs {}", pa.display(), pb.display());
        check!(ba == bb, "{} differs between runs", pa.display());
    }
    Ok(format!("{} artifacts byte-identical", fa.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 six-page app reproduction", criterion_1),
        ("2 reachability oracle", criterion_2),
        ("3 replay soundness and flake tolerance", criterion_3),
        ("4 HAR fidelity", criterion_4),
        ("5 SpeedIndex oracle", criterion_5),
        ("6 activity timing", criterion_6),
        ("7 command port and interrupt", criterion_7),
        ("8 determinism", criterion_8),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
