#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use droidmeter::ui_tree::{fingerprint, parse_ui_dump, StateId};

pub const NEWS_APP: &str = "com.example.news";

pub fn news_app_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/news_app.json")
}

pub fn news_app_json() -> Value {
    serde_json::from_str(&std::fs::read_to_string(news_app_path()).unwrap()).unwrap()
}

pub fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

pub fn state_id(scenario: &Value, label: &str) -> StateId {
    let dump = scenario["states"][label]["ui_dump"].as_str().unwrap();
    fingerprint(&parse_ui_dump(dump).unwrap()).id()
}

fn xml_node(class: &str, bounds: (i32, i32, i32, i32), clickable: bool, children: &str) -> String {
    let (l, t, r, b) = bounds;
    let head = format!(
        r#"<node index="0" text="" resource-id="" class="{class}" package="com.example.gen" clickable="{clickable}" enabled="true" bounds="[{l},{t}][{r},{b}]""#
    );
    if children.is_empty() {
        format!("{head} />")
    } else {
        format!("{head}>{children}</node>")
    }
}

/// Random deterministic app: `n` states, each with a unique number of
/// marker views so fingerprints never collide. Buttons lead to random
/// states (or nowhere); Back usually leads somewhere too.
pub fn random_scenario(seed: u64, max_states: usize) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_states);
    let mut states = serde_json::Map::new();
    let mut transitions = Vec::new();
    for i in 0..n {
        let buttons = rng.gen_range(0..=3);
        let webview = rng.gen_bool(0.3);
        let mut children = String::new();
        for b in 0..buttons {
            let top = 200 * b;
            children.push_str(&xml_node("android.widget.Button", (0, top, 1080, top + 150), true, ""));
            if rng.gen_bool(0.8) {
                let to = rng.gen_range(0..n);
                transitions.push(json!({
                    "from": format!("S{i}"),
                    "event": {"kind": "tap", "path": [[b, "android.widget.Button"]]},
                    "to": format!("S{to}"),
                }));
            }
        }
        for _ in 0..=i {
            children.push_str(&xml_node("android.widget.TextView", (0, 1000, 1080, 1100), false, ""));
        }
        if webview {
            children.push_str(&xml_node("android.webkit.WebView", (0, 1100, 1080, 1900), false, ""));
        }
        let root = xml_node("android.widget.FrameLayout", (0, 0, 1080, 1920), false, &children);
        states.insert(
            format!("S{i}"),
            json!({"ui_dump": format!("<hierarchy rotation=\"0\">{root}</hierarchy>"), "activity_name": format!(".Screen{i}")}),
        );
        if rng.gen_bool(0.7) {
            let to = rng.gen_range(0..n);
            transitions.push(json!({"from": format!("S{i}"), "event": {"kind": "back"}, "to": format!("S{to}")}));
        }
    }
    json!({
        "app_id": "com.example.gen",
        "initial_state": "S0",
        "states": states,
        "transitions": transitions,
    })
}

/// Labels reachable from the initial state, by BFS over the file's
/// transition list.
pub fn reachable_labels(scenario: &Value) -> BTreeSet<String> {
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for t in scenario["transitions"].as_array().unwrap() {
        adj.entry(t["from"].as_str().unwrap())
            .or_default()
            .push(t["to"].as_str().unwrap());
    }
    let start = scenario["initial_state"].as_str().unwrap();
    let mut seen = BTreeSet::from([start.to_string()]);
    let mut queue = VecDeque::from([start]);
    while let Some(s) = queue.pop_front() {
        for &to in adj.get(s).map(Vec::as_slice).unwrap_or(&[]) {
            if seen.insert(to.to_string()) {
                queue.push_back(to);
            }
        }
    }
    seen
}

/// Whether a state's dump contains a WebView widget, by plain text search.
pub fn is_webview_label(scenario: &Value, label: &str) -> bool {
    let dump = scenario["states"][label]["ui_dump"].as_str().unwrap();
    dump.contains("class=\"android.webkit.WebView\"") || dump.contains(".WebView\"")
}

/// Linear chain S0 -> S1 -> ... -> S<len> with Back edges; the last state
/// embeds a WebView.
pub fn chain_scenario(len: usize) -> Value {
    let mut states = serde_json::Map::new();
    let mut transitions = Vec::new();
    for i in 0..=len {
        let mut children = xml_node("android.widget.Button", (0, 0, 1080, 150), true, "");
        for _ in 0..=i {
            children.push_str(&xml_node("android.widget.TextView", (0, 200, 1080, 300), false, ""));
        }
        if i == len {
            children.push_str(&xml_node("android.webkit.WebView", (0, 300, 1080, 1900), false, ""));
        }
        let root = xml_node("android.widget.FrameLayout", (0, 0, 1080, 1920), false, &children);
        states.insert(format!("S{i}"), json!({"ui_dump": root, "activity_name": format!(".Step{i}")}));
        if i < len {
            transitions.push(json!({"from": format!("S{i}"), "event": {"kind": "tap", "path": [[0, "android.widget.Button"]]}, "to": format!("S{}", i + 1)}));
        }
        if i > 0 {
            transitions.push(json!({"from": format!("S{i}"), "event": {"kind": "back"}, "to": format!("S{}", i - 1)}));
        }
    }
    json!({"app_id": "com.example.chain", "initial_state": "S0", "states": states, "transitions": transitions})
}

/// Per-request `time` in ms from the raw trace: last event minus request.
pub fn trace_entry_times(trace: &[Value]) -> BTreeMap<String, f64> {
    let mut start = BTreeMap::new();
    let mut out = BTreeMap::new();
    for ev in trace {
        let id = ev["request_id"].as_str().unwrap_or_default().to_string();
        let ts = ev["timestamp"].as_f64().unwrap();
        match ev["kind"].as_str().unwrap() {
            "RequestWillBeSent" => {
                start.insert(id, ts);
            }
            "LoadingFinished" | "LoadingFailed" => {
                out.insert(id.clone(), (ts - start[&id]) * 1000.0);
            }
            _ => {}
        }
    }
    out
}

/// Left Riemann sum of (1 - vc) over the frame intervals, with completeness
/// given as exact fractions `white / total`.
pub fn speed_index_oracle(times: &[u64], white: &[u64], total: u64) -> f64 {
    let mut acc: u128 = 0;
    for i in 0..times.len().saturating_sub(1) {
        acc += u128::from(total - white[i]) * u128::from(times[i + 1] - times[i]);
    }
    acc as f64 / total as f64
}

pub fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}
