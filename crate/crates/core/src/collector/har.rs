//! HAR 1.2 archive assembly from collected network events.

use chrono::{DateTime, SecondsFormat};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::warn;

use super::{CollectorError, NetworkEvent, NetworkEventKind};

pub const HAR_VERSION: &str = "1.2";
const PAGE_ID: &str = "page_1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Har {
    pub log: HarLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarLog {
    pub version: String,
    pub creator: HarCreator,
    pub pages: Vec<HarPage>,
    pub entries: Vec<HarEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarCreator {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HarPage {
    pub started_date_time: String,
    pub id: String,
    pub title: String,
    pub page_timings: PageTimings,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PageTimings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_content_load: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_load: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameValue {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HarEntry {
    pub pageref: String,
    pub started_date_time: String,
    pub time: f64,
    pub request: HarRequest,
    pub response: HarResponse,
    pub cache: serde_json::Map<String, Value>,
    pub timings: HarTimings,
    #[serde(rename = "_requestId")]
    pub request_id: String,
    #[serde(default, rename = "_error", skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HarRequest {
    pub method: String,
    pub url: String,
    pub http_version: String,
    pub cookies: Vec<Value>,
    pub headers: Vec<NameValue>,
    pub query_string: Vec<NameValue>,
    pub headers_size: i64,
    pub body_size: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HarResponse {
    pub status: u16,
    pub status_text: String,
    pub http_version: String,
    pub cookies: Vec<Value>,
    pub headers: Vec<NameValue>,
    pub content: HarContent,
    #[serde(rename = "redirectURL")]
    pub redirect_url: String,
    pub headers_size: i64,
    pub body_size: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HarContent {
    pub size: i64,
    pub mime_type: String,
}

/// Phase durations in milliseconds; `-1` marks a phase that did not occur.
/// `ssl` overlaps `connect` and is not part of the entry total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarTimings {
    pub blocked: f64,
    pub dns: f64,
    pub connect: f64,
    pub send: f64,
    pub wait: f64,
    pub receive: f64,
    pub ssl: f64,
}

impl HarTimings {
    /// Sum of the phases making up the entry's total time.
    pub fn total(&self) -> f64 {
        [self.blocked, self.dns, self.connect, self.send, self.wait, self.receive]
            .into_iter()
            .filter(|p| *p >= 0.0)
            .sum()
    }
}

fn round_us(ms: f64) -> f64 {
    (ms * 1000.0).round() / 1000.0
}

fn iso8601(epoch_secs: f64) -> String {
    let ms = (epoch_secs * 1000.0).round() as i64;
    DateTime::from_timestamp_millis(ms)
        .map(|d| d.to_rfc3339_opts(SecondsFormat::Millis, true))
        .unwrap_or_else(|| "1970-01-01T00:00:00.000Z".into())
}

fn name_values(h: &Option<super::Headers>) -> Vec<NameValue> {
    h.iter()
        .flatten()
        .map(|(k, v)| NameValue {
            name: k.clone(),
            value: v.clone(),
        })
        .collect()
}

/// Milliseconds from the first request to the page's load event, rounded.
pub fn page_load_time(events: &[NetworkEvent]) -> Option<i64> {
    let first = events
        .iter()
        .find(|e| e.kind == NetworkEventKind::RequestWillBeSent)?;
    let load = events
        .iter()
        .find(|e| e.kind == NetworkEventKind::LoadEventFired)?;
    Some(((load.timestamp - first.timestamp) * 1000.0).round() as i64)
}

#[derive(Default)]
struct RequestRecord<'a> {
    sent: Option<&'a NetworkEvent>,
    response: Option<&'a NetworkEvent>,
    data_bytes: Option<u64>,
    finished: Option<&'a NetworkEvent>,
    failed: Option<&'a NetworkEvent>,
}

/// A HAR plus the events that could not be attributed to any request.
#[derive(Debug)]
pub struct HarBuild {
    pub har: Har,
    pub skipped: Vec<CollectorError>,
}

/// Configures HAR assembly. The wall-clock anchor converts monotonic event
/// timestamps to dates when no event carries a wall time.
#[derive(Debug, Clone)]
pub struct HarBuilder {
    title: String,
    anchor_epoch_secs: f64,
    creator: HarCreator,
}

impl HarBuilder {
    pub fn new(page_title: &str) -> Self {
        Self {
            title: page_title.to_string(),
            anchor_epoch_secs: 0.0,
            creator: HarCreator {
                name: env!("CARGO_PKG_NAME").into(),
                version: env!("CARGO_PKG_VERSION").into(),
            },
        }
    }

    /// Epoch seconds corresponding to monotonic time zero.
    pub fn anchor(mut self, epoch_secs: f64) -> Self {
        self.anchor_epoch_secs = epoch_secs;
        self
    }

    pub fn build(&self, events: &[NetworkEvent]) -> HarBuild {
        let offset = events
            .iter()
            .find_map(|e| e.wall_time.map(|w| w - e.timestamp))
            .unwrap_or(self.anchor_epoch_secs);

        let mut records: IndexMap<&str, RequestRecord> = IndexMap::new();
        for ev in events {
            if ev.kind == NetworkEventKind::RequestWillBeSent {
                let rec = records.entry(ev.request_id.as_str()).or_default();
                if rec.sent.is_some() {
                    warn!(request_id = %ev.request_id, "repeated requestWillBeSent ignored");
                } else {
                    rec.sent = Some(ev);
                }
            }
        }
        let mut skipped = Vec::new();
        for ev in events {
            if matches!(
                ev.kind,
                NetworkEventKind::RequestWillBeSent | NetworkEventKind::LoadEventFired
            ) {
                continue;
            }
            let Some(rec) = records.get_mut(ev.request_id.as_str()) else {
                warn!(request_id = %ev.request_id, kind = ?ev.kind, "orphan network event skipped");
                skipped.push(CollectorError::OrphanEvent {
                    request_id: ev.request_id.clone(),
                });
                continue;
            };
            match ev.kind {
                NetworkEventKind::ResponseReceived => rec.response = rec.response.or(Some(ev)),
                NetworkEventKind::DataReceived => {
                    *rec.data_bytes.get_or_insert(0) += ev.data_length.unwrap_or(0)
                }
                NetworkEventKind::LoadingFinished => rec.finished = rec.finished.or(Some(ev)),
                NetworkEventKind::LoadingFailed => rec.failed = rec.failed.or(Some(ev)),
                _ => {}
            }
        }

        let entries = records
            .values()
            .filter_map(|rec| entry(rec, offset))
            .collect();

        let first_request = events
            .iter()
            .find(|e| e.kind == NetworkEventKind::RequestWillBeSent);
        let page = HarPage {
            started_date_time: iso8601(offset + first_request.map_or(0.0, |e| e.timestamp)),
            id: PAGE_ID.into(),
            title: self.title.clone(),
            page_timings: PageTimings {
                on_content_load: None,
                on_load: page_load_time(events).map(|ms| ms as f64),
            },
        };
        HarBuild {
            har: Har {
                log: HarLog {
                    version: HAR_VERSION.into(),
                    creator: self.creator.clone(),
                    pages: vec![page],
                    entries,
                },
            },
            skipped,
        }
    }
}

/// Partitions `[sent, end]` into HAR phases. Each phase ends at its own
/// milestone, so gaps between milestones fold into the following phase and
/// the phases always sum to the request's wall duration.
fn timings(sent: f64, response: Option<&NetworkEvent>, end: f64) -> HarTimings {
    let total = (end - sent) * 1000.0;
    let mut t = HarTimings {
        blocked: -1.0,
        dns: -1.0,
        connect: -1.0,
        send: 0.0,
        wait: 0.0,
        receive: 0.0,
        ssl: -1.0,
    };
    let Some(resp) = response else {
        t.wait = total.max(0.0);
        return t;
    };
    let headers_at = ((resp.timestamp - sent) * 1000.0).clamp(0.0, total.max(0.0));
    let Some(td) = resp.timing_detail else {
        t.wait = headers_at;
        t.receive = (total - headers_at).max(0.0);
        return t;
    };

    let base = (td.request_time - sent) * 1000.0;
    let given = |v: f64| v >= 0.0;
    let first_start = [td.dns_start, td.connect_start, td.send_start]
        .into_iter()
        .find(|v| given(*v))
        .unwrap_or(0.0);
    let mut cursor = (base + first_start).max(0.0);
    t.blocked = cursor;
    let mut advance = |milestone: f64| -> f64 {
        let at = (base + milestone).max(cursor);
        let d = at - cursor;
        cursor = at;
        d
    };
    if given(td.dns_start) && given(td.dns_end) {
        t.dns = advance(td.dns_end);
    }
    if given(td.connect_start) && given(td.connect_end) {
        t.connect = advance(td.connect_end);
    }
    if given(td.send_end) {
        t.send = advance(td.send_end);
    }
    t.wait = if given(td.receive_headers_end) {
        advance(td.receive_headers_end)
    } else {
        advance(headers_at - base)
    };
    t.receive = (total - cursor).max(0.0);
    if given(td.ssl_start) && given(td.ssl_end) {
        t.ssl = (td.ssl_end - td.ssl_start).max(0.0);
    }
    t
}

fn entry(rec: &RequestRecord, offset: f64) -> Option<HarEntry> {
    let sent = rec.sent?;
    let end = rec.finished.or(rec.failed)?;
    let raw = timings(sent.timestamp, rec.response, end.timestamp);
    let timings = HarTimings {
        blocked: round_us(raw.blocked),
        dns: round_us(raw.dns),
        connect: round_us(raw.connect),
        send: round_us(raw.send),
        wait: round_us(raw.wait),
        receive: round_us(raw.receive),
        ssl: round_us(raw.ssl),
    };
    let url = sent.url.clone().unwrap_or_default();
    let query_string = url::Url::parse(&url)
        .map(|u| {
            u.query_pairs()
                .map(|(k, v)| NameValue {
                    name: k.into_owned(),
                    value: v.into_owned(),
                })
                .collect()
        })
        .unwrap_or_default();
    let http_version = rec
        .response
        .and_then(|r| r.protocol.clone())
        .map(|p| p.to_uppercase())
        .unwrap_or_else(|| "HTTP/1.1".into());
    let response = match rec.response {
        Some(r) => {
            let headers = name_values(&r.response_headers);
            let redirect_url = headers
                .iter()
                .find(|h| h.name.eq_ignore_ascii_case("location"))
                .map(|h| h.value.clone())
                .unwrap_or_default();
            HarResponse {
                status: r.status.unwrap_or(0),
                status_text: r.status_text.clone().unwrap_or_default(),
                http_version: http_version.clone(),
                cookies: vec![],
                headers,
                content: HarContent {
                    size: rec
                        .data_bytes
                        .or(rec.finished.and_then(|f| f.encoded_data_length))
                        .unwrap_or(0) as i64,
                    mime_type: r.mime_type.clone().unwrap_or_else(|| "x-unknown".into()),
                },
                redirect_url,
                headers_size: -1,
                body_size: rec
                    .finished
                    .and_then(|f| f.encoded_data_length)
                    .map_or(-1, |n| n as i64),
            }
        }
        None => HarResponse {
            status: 0,
            status_text: String::new(),
            http_version: http_version.clone(),
            cookies: vec![],
            headers: vec![],
            content: HarContent {
                size: 0,
                mime_type: "x-unknown".into(),
            },
            redirect_url: String::new(),
            headers_size: -1,
            body_size: -1,
        },
    };
    let error = rec.failed.map(|f| f.error_text.clone().unwrap_or_default());
    Some(HarEntry {
        pageref: PAGE_ID.into(),
        started_date_time: iso8601(offset + sent.timestamp),
        time: round_us(timings.total()),
        request: HarRequest {
            method: sent.method.clone().unwrap_or_else(|| "GET".into()),
            url,
            http_version,
            cookies: vec![],
            headers: name_values(&sent.request_headers),
            query_string,
            headers_size: -1,
            body_size: 0,
        },
        response,
        cache: serde_json::Map::new(),
        timings,
        request_id: sent.request_id.clone(),
        comment: error.as_ref().map(|e| format!("request failed: {e}")),
        error,
    })
}

/// Builds a single-page HAR from `events`; unattributable events are
/// logged and skipped.
pub fn build_har(events: &[NetworkEvent], page_title: &str) -> Har {
    HarBuilder::new(page_title).build(events).har
}

/// Structural check against the HAR 1.2 schema: required members present
/// with the right JSON types, page references resolvable.
pub fn validate_har(doc: &Value) -> Result<(), Vec<String>> {
    let errs = std::cell::RefCell::new(Vec::new());
    let need = |v: &Value, path: &str, key: &str, ty: fn(&Value) -> bool, ty_name: &str| {
        match v.get(key) {
            Some(x) if ty(x) => {}
            Some(_) => errs.borrow_mut().push(format!("{path}.{key}: expected {ty_name}")),
            None => errs.borrow_mut().push(format!("{path}.{key}: missing")),
        }
    };
    let s = Value::is_string as fn(&Value) -> bool;
    let n = Value::is_number as fn(&Value) -> bool;
    let a = Value::is_array as fn(&Value) -> bool;
    let o = Value::is_object as fn(&Value) -> bool;

    need(doc, "", "log", o, "object");
    let log = &doc["log"];
    need(log, "log", "version", s, "string");
    need(log, "log", "creator", o, "object");
    need(&log["creator"], "log.creator", "name", s, "string");
    need(&log["creator"], "log.creator", "version", s, "string");
    need(log, "log", "entries", a, "array");

    let mut page_ids = Vec::new();
    if let Some(pages) = log.get("pages") {
        match pages.as_array() {
            None => need(log, "log", "pages", a, "array"),
            Some(pages) => {
                for (i, p) in pages.iter().enumerate() {
                    let path = format!("log.pages[{i}]");
                    need(p, &path, "startedDateTime", s, "string");
                    need(p, &path, "id", s, "string");
                    need(p, &path, "title", s, "string");
                    need(p, &path, "pageTimings", o, "object");
                    for key in ["onContentLoad", "onLoad"] {
                        if p["pageTimings"].get(key).is_some() {
                            need(&p["pageTimings"], &format!("{path}.pageTimings"), key, n, "number");
                        }
                    }
                    if let Some(id) = p["id"].as_str() {
                        page_ids.push(id.to_string());
                    }
                }
            }
        }
    }

    for (i, e) in log["entries"].as_array().into_iter().flatten().enumerate() {
        let path = format!("log.entries[{i}]");
        need(e, &path, "startedDateTime", s, "string");
        need(e, &path, "time", n, "number");
        need(e, &path, "request", o, "object");
        need(e, &path, "response", o, "object");
        need(e, &path, "cache", o, "object");
        need(e, &path, "timings", o, "object");
        if let Some(pr) = e.get("pageref") {
            match pr.as_str() {
                Some(id) if page_ids.iter().any(|p| p == id) => {}
                _ => errs.borrow_mut().push(format!("{path}.pageref: no such page")),
            }
        }
        let req = &e["request"];
        let rp = format!("{path}.request");
        for (k, ty, tn) in [
            ("method", s, "string"),
            ("url", s, "string"),
            ("httpVersion", s, "string"),
            ("cookies", a, "array"),
            ("headers", a, "array"),
            ("queryString", a, "array"),
            ("headersSize", n, "number"),
            ("bodySize", n, "number"),
        ] {
            need(req, &rp, k, ty, tn);
        }
        let resp = &e["response"];
        let rp = format!("{path}.response");
        for (k, ty, tn) in [
            ("status", n, "number"),
            ("statusText", s, "string"),
            ("httpVersion", s, "string"),
            ("cookies", a, "array"),
            ("headers", a, "array"),
            ("content", o, "object"),
            ("redirectURL", s, "string"),
            ("headersSize", n, "number"),
            ("bodySize", n, "number"),
        ] {
            need(resp, &rp, k, ty, tn);
        }
        need(&resp["content"], &format!("{rp}.content"), "size", n, "number");
        need(&resp["content"], &format!("{rp}.content"), "mimeType", s, "string");
        let t = &e["timings"];
        let tp = format!("{path}.timings");
        for k in ["send", "wait", "receive"] {
            need(t, &tp, k, n, "number");
            if t[k].as_f64().is_some_and(|v| v < 0.0) {
                errs.borrow_mut().push(format!("{tp}.{k}: must be non-negative"));
            }
        }
        for k in ["blocked", "dns", "connect", "ssl"] {
            if t.get(k).is_some() {
                need(t, &tp, k, n, "number");
                if t[k].as_f64().is_some_and(|v| v < 0.0 && v != -1.0) {
                    errs.borrow_mut().push(format!("{tp}.{k}: negative values other than -1 not allowed"));
                }
            }
        }
        for list in [&req["headers"], &req["queryString"], &resp["headers"]] {
            for h in list.as_array().into_iter().flatten() {
                if !(h["name"].is_string() && h["value"].is_string()) {
                    errs.borrow_mut().push(format!("{path}: header/query entries need string name and value"));
                }
            }
        }
    }
    let errs = errs.into_inner();
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

#[cfg(test)]
mod tests {
    use super::super::TimingDetail;
    use super::*;

    #[test]
    fn empty_trace_gives_one_page_no_entries() {
        let har = build_har(&[], "empty");
        assert_eq!(har.log.pages.len(), 1);
        assert!(har.log.entries.is_empty());
        assert_eq!(har.log.pages[0].page_timings.on_load, None);
        validate_har(&serde_json::to_value(&har).unwrap()).unwrap();
    }

    #[test]
    fn single_request_time_and_phases() {
        let timing = TimingDetail {
            request_time: 10.0,
            dns_start: 0.0,
            dns_end: 20.0,
            connect_start: 20.0,
            connect_end: 80.0,
            ssl_start: 40.0,
            ssl_end: 80.0,
            send_start: 80.0,
            send_end: 90.0,
            receive_headers_end: 200.0,
        };
        let events = vec![
            NetworkEvent::request("1", 10.000, "GET", "https://example.com/a?x=1&y=2")
                .with_wall_time(1_600_000_000.0),
            NetworkEvent::response("1", 10.200, 200, "text/html").with_timing(timing),
            NetworkEvent::data("1", 10.300, 4000),
            NetworkEvent::finished("1", 10.350, 1500),
        ];
        let har = build_har(&events, "t");
        let e = &har.log.entries[0];
        assert_eq!(e.time, 350.0);
        assert_eq!(e.timings.dns, 20.0);
        assert_eq!(e.timings.connect, 60.0);
        assert_eq!(e.timings.ssl, 40.0);
        assert_eq!(e.timings.send, 10.0);
        assert_eq!(e.timings.wait, 110.0);
        assert_eq!(e.timings.receive, 150.0);
        assert_eq!(e.timings.blocked, 0.0);
        assert_eq!(e.started_date_time, "2020-09-13T12:26:40.000Z");
        assert_eq!(e.response.content.size, 4000);
        assert_eq!(e.response.body_size, 1500);
        assert_eq!(e.request.query_string.len(), 2);
        validate_har(&serde_json::to_value(&har).unwrap()).unwrap();
    }

    #[test]
    fn failed_request_has_status_zero_and_error() {
        let events = vec![
            NetworkEvent::request("9", 1.0, "GET", "http://x/"),
            NetworkEvent::failed("9", 1.5, "net::ERR_NAME_NOT_RESOLVED"),
        ];
        let har = build_har(&events, "t");
        let e = &har.log.entries[0];
        assert_eq!(e.response.status, 0);
        assert_eq!(e.error.as_deref(), Some("net::ERR_NAME_NOT_RESOLVED"));
        assert!(e.comment.is_some());
        assert_eq!(e.time, 500.0);
        let v = serde_json::to_value(&har).unwrap();
        assert_eq!(v["log"]["entries"][0]["_error"], "net::ERR_NAME_NOT_RESOLVED");
        validate_har(&v).unwrap();
    }

    #[test]
    fn incomplete_requests_are_not_entries_and_orphans_skipped() {
        let events = vec![
            NetworkEvent::request("1", 1.0, "GET", "http://x/"),
            NetworkEvent::response("1", 1.1, 200, "text/html"),
            NetworkEvent::finished("ghost", 1.2, 5),
        ];
        let built = HarBuilder::new("t").build(&events);
        assert!(built.har.log.entries.is_empty());
        assert_eq!(built.skipped.len(), 1);
        assert!(matches!(
            &built.skipped[0],
            CollectorError::OrphanEvent { request_id } if request_id == "ghost"
        ));
    }

    #[test]
    fn page_load_time_rounds_to_ms() {
        let ev = vec![
            NetworkEvent::request("1", 5.000, "GET", "http://x/"),
            NetworkEvent::load_event(6.234),
        ];
        assert_eq!(page_load_time(&ev), Some(1234));
        assert_eq!(page_load_time(&ev[..1]), None);
        let har = build_har(&ev, "t");
        assert_eq!(har.log.pages[0].page_timings.on_load, Some(1234.0));
    }

    #[test]
    fn anchor_used_without_wall_time() {
        let ev = vec![
            NetworkEvent::request("1", 2.5, "GET", "http://x/"),
            NetworkEvent::finished("1", 3.0, 1),
        ];
        let har = HarBuilder::new("t").anchor(1_000_000.0).build(&ev).har;
        assert_eq!(har.log.entries[0].started_date_time, "1970-01-12T13:46:42.500Z");
    }

    #[test]
    fn validator_catches_missing_fields() {
        let mut v = serde_json::to_value(build_har(
            &[
                NetworkEvent::request("1", 1.0, "GET", "http://x/"),
                NetworkEvent::finished("1", 1.1, 1),
            ],
            "t",
        ))
        .unwrap();
        v["log"]["entries"][0]["response"]
            .as_object_mut()
            .unwrap()
            .remove("status");
        v["log"]["entries"][0]["pageref"] = "nope".into();
        let errs = validate_har(&v).unwrap_err();
        assert_eq!(errs.len(), 2, "{errs:?}");
    }
}
