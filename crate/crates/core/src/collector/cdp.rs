//! Translation between Network-domain notifications and [`NetworkEvent`].

use serde_json::{json, Map, Value};

use super::{CollectorError, Headers, NetworkEvent, NetworkEventKind, TimingDetail};

fn headers_json(h: &Option<Headers>) -> Value {
    Value::Object(
        h.iter()
            .flatten()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect(),
    )
}

fn timing_json(t: &TimingDetail) -> Value {
    json!({
        "requestTime": t.request_time,
        "dnsStart": t.dns_start,
        "dnsEnd": t.dns_end,
        "connectStart": t.connect_start,
        "connectEnd": t.connect_end,
        "sslStart": t.ssl_start,
        "sslEnd": t.ssl_end,
        "sendStart": t.send_start,
        "sendEnd": t.send_end,
        "receiveHeadersEnd": t.receive_headers_end,
    })
}

/// Renders an event as the notification a Chromium engine would send.
pub fn encode_notification(ev: &NetworkEvent) -> Value {
    let mut params = Map::new();
    if ev.kind != NetworkEventKind::LoadEventFired {
        params.insert("requestId".into(), json!(ev.request_id));
    }
    params.insert("timestamp".into(), json!(ev.timestamp));
    let method = match ev.kind {
        NetworkEventKind::RequestWillBeSent => {
            let url = ev.url.clone().unwrap_or_default();
            params.insert("loaderId".into(), json!(""));
            params.insert("documentURL".into(), json!(url));
            params.insert(
                "request".into(),
                json!({
                    "url": url,
                    "method": ev.method.clone().unwrap_or_else(|| "GET".into()),
                    "headers": headers_json(&ev.request_headers),
                }),
            );
            if let Some(w) = ev.wall_time {
                params.insert("wallTime".into(), json!(w));
            }
            params.insert("initiator".into(), json!({"type": "other"}));
            "Network.requestWillBeSent"
        }
        NetworkEventKind::ResponseReceived => {
            let mut response = Map::new();
            response.insert("url".into(), json!(ev.url.clone().unwrap_or_default()));
            response.insert("status".into(), json!(ev.status.unwrap_or(0)));
            response.insert(
                "statusText".into(),
                json!(ev.status_text.clone().unwrap_or_default()),
            );
            response.insert("headers".into(), headers_json(&ev.response_headers));
            response.insert(
                "mimeType".into(),
                json!(ev.mime_type.clone().unwrap_or_default()),
            );
            if let Some(p) = &ev.protocol {
                response.insert("protocol".into(), json!(p));
            }
            if let Some(t) = &ev.timing_detail {
                response.insert("timing".into(), timing_json(t));
            }
            params.insert("type".into(), json!("Other"));
            params.insert("response".into(), Value::Object(response));
            "Network.responseReceived"
        }
        NetworkEventKind::DataReceived => {
            params.insert("dataLength".into(), json!(ev.data_length.unwrap_or(0)));
            params.insert(
                "encodedDataLength".into(),
                json!(ev.encoded_data_length.unwrap_or(0)),
            );
            "Network.dataReceived"
        }
        NetworkEventKind::LoadingFinished => {
            params.insert(
                "encodedDataLength".into(),
                json!(ev.encoded_data_length.unwrap_or(0)),
            );
            "Network.loadingFinished"
        }
        NetworkEventKind::LoadingFailed => {
            params.insert("type".into(), json!("Other"));
            params.insert(
                "errorText".into(),
                json!(ev.error_text.clone().unwrap_or_default()),
            );
            params.insert("canceled".into(), json!(false));
            "Network.loadingFailed"
        }
        NetworkEventKind::LoadEventFired => "Page.loadEventFired",
    };
    json!({"method": method, "params": Value::Object(params)})
}

fn bad(method: &str, field: &str) -> CollectorError {
    CollectorError::Protocol(format!("{method}: missing or invalid {field}"))
}

fn f64_field(obj: &Value, key: &str, method: &str) -> Result<f64, CollectorError> {
    obj.get(key).and_then(Value::as_f64).ok_or_else(|| bad(method, key))
}

fn str_field(obj: &Value, key: &str, method: &str) -> Result<String, CollectorError> {
    obj.get(key)
        .and_then(Value::as_str)
        .map(String::from)
        .ok_or_else(|| bad(method, key))
}

fn opt_str(obj: &Value, key: &str) -> Option<String> {
    obj.get(key).and_then(Value::as_str).map(String::from)
}

fn headers(v: Option<&Value>) -> Headers {
    v.and_then(Value::as_object)
        .map(|o| {
            o.iter()
                .map(|(k, v)| {
                    let s = v.as_str().map(String::from).unwrap_or_else(|| v.to_string());
                    (k.clone(), s)
                })
                .collect()
        })
        .unwrap_or_default()
}

fn timing(v: &Value) -> TimingDetail {
    let g = |k: &str| v.get(k).and_then(Value::as_f64).unwrap_or(-1.0);
    TimingDetail {
        request_time: v.get("requestTime").and_then(Value::as_f64).unwrap_or(0.0),
        dns_start: g("dnsStart"),
        dns_end: g("dnsEnd"),
        connect_start: g("connectStart"),
        connect_end: g("connectEnd"),
        ssl_start: g("sslStart"),
        ssl_end: g("sslEnd"),
        send_start: g("sendStart"),
        send_end: g("sendEnd"),
        receive_headers_end: g("receiveHeadersEnd"),
    }
}

/// Translates a notification; `Ok(None)` for methods outside the
/// collected subset.
pub fn decode_notification(msg: &Value) -> Result<Option<NetworkEvent>, CollectorError> {
    let Some(method) = msg.get("method").and_then(Value::as_str) else {
        return Ok(None);
    };
    let null = Value::Null;
    let params = msg.get("params").unwrap_or(&null);
    let kind = match method {
        "Network.requestWillBeSent" => NetworkEventKind::RequestWillBeSent,
        "Network.responseReceived" => NetworkEventKind::ResponseReceived,
        "Network.dataReceived" => NetworkEventKind::DataReceived,
        "Network.loadingFinished" => NetworkEventKind::LoadingFinished,
        "Network.loadingFailed" => NetworkEventKind::LoadingFailed,
        "Page.loadEventFired" => NetworkEventKind::LoadEventFired,
        _ => return Ok(None),
    };
    let timestamp = f64_field(params, "timestamp", method)?;
    if kind == NetworkEventKind::LoadEventFired {
        return Ok(Some(NetworkEvent::load_event(timestamp)));
    }
    let request_id = str_field(params, "requestId", method)?;
    let ev = match kind {
        NetworkEventKind::RequestWillBeSent => {
            let req = params.get("request").ok_or_else(|| bad(method, "request"))?;
            let mut ev = NetworkEvent::request(
                &request_id,
                timestamp,
                &opt_str(req, "method").unwrap_or_else(|| "GET".into()),
                &str_field(req, "url", method)?,
            );
            ev.request_headers = Some(headers(req.get("headers")));
            ev.wall_time = params.get("wallTime").and_then(Value::as_f64);
            ev
        }
        NetworkEventKind::ResponseReceived => {
            let resp = params.get("response").ok_or_else(|| bad(method, "response"))?;
            let status = resp
                .get("status")
                .and_then(Value::as_f64)
                .ok_or_else(|| bad(method, "response.status"))?;
            let mut ev = NetworkEvent::response(
                &request_id,
                timestamp,
                status as u16,
                &opt_str(resp, "mimeType").unwrap_or_default(),
            );
            ev.url = opt_str(resp, "url").filter(|u| !u.is_empty());
            ev.status_text = Some(opt_str(resp, "statusText").unwrap_or_default());
            ev.response_headers = Some(headers(resp.get("headers")));
            ev.protocol = opt_str(resp, "protocol");
            ev.timing_detail = resp.get("timing").filter(|t| t.is_object()).map(timing);
            ev
        }
        NetworkEventKind::DataReceived => {
            let mut ev = NetworkEvent::data(
                &request_id,
                timestamp,
                params.get("dataLength").and_then(Value::as_u64).unwrap_or(0),
            );
            ev.encoded_data_length = params.get("encodedDataLength").and_then(Value::as_u64);
            ev
        }
        NetworkEventKind::LoadingFinished => NetworkEvent::finished(
            &request_id,
            timestamp,
            params
                .get("encodedDataLength")
                .and_then(Value::as_f64)
                .unwrap_or(0.0) as u64,
        ),
        NetworkEventKind::LoadingFailed => NetworkEvent::failed(
            &request_id,
            timestamp,
            &opt_str(params, "errorText").unwrap_or_default(),
        ),
        NetworkEventKind::LoadEventFired => unreachable!(),
    };
    Ok(Some(ev))
}
