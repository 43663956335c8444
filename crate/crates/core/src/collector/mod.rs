//! Chrome remote debugging client for embedded pages, and HAR assembly.
//!
//! Only the Network domain (plus `Page.loadEventFired`) is spoken. Events
//! are translated into [`NetworkEvent`] values that stay close to the wire
//! notifications, and [`build_har`] turns a collected sequence into a HAR
//! 1.2 archive.

mod cdp;
mod client;
mod har;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cdp::{decode_notification, encode_notification};
pub use client::{collect, list_targets, Collection, DebugEndpoint, DebugTarget, Session, StopReason};
pub use har::{
    build_har, page_load_time, validate_har, Har, HarBuild, HarBuilder, HarContent, HarCreator,
    HarEntry, HarLog, HarPage, HarRequest, HarResponse, HarTimings, NameValue, PageTimings,
};

pub const DEFAULT_QUIESCENCE_MS: u64 = 2_000;
pub const DEFAULT_MAX_WAIT_MS: u64 = 30_000;

#[derive(Debug, Error)]
pub enum CollectorError {
    #[error("debug protocol error: {0}")]
    Protocol(String),
    #[error("connection to debug endpoint lost")]
    ConnectionLost,
    #[error("cannot reach debug endpoint {endpoint}: {source}")]
    Connect {
        endpoint: String,
        #[source]
        source: std::io::Error,
    },
    #[error("debug endpoint lists no inspectable page")]
    NoTarget,
    #[error("event for unannounced request {request_id}")]
    OrphanEvent { request_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NetworkEventKind {
    RequestWillBeSent,
    ResponseReceived,
    DataReceived,
    LoadingFinished,
    LoadingFailed,
    LoadEventFired,
}

/// Resource timing attached to a response, as offsets in milliseconds from
/// `request_time` (seconds, same clock as event timestamps). Negative
/// offsets mean the phase did not happen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingDetail {
    pub request_time: f64,
    pub dns_start: f64,
    pub dns_end: f64,
    pub connect_start: f64,
    pub connect_end: f64,
    pub ssl_start: f64,
    pub ssl_end: f64,
    pub send_start: f64,
    pub send_end: f64,
    pub receive_headers_end: f64,
}

impl Default for TimingDetail {
    fn default() -> Self {
        Self {
            request_time: 0.0,
            dns_start: -1.0,
            dns_end: -1.0,
            connect_start: -1.0,
            connect_end: -1.0,
            ssl_start: -1.0,
            ssl_end: -1.0,
            send_start: -1.0,
            send_end: -1.0,
            receive_headers_end: -1.0,
        }
    }
}

pub type Headers = BTreeMap<String, String>;

/// One Network-domain (or page load) notification.
///
/// `timestamp` is the protocol's monotonic clock in seconds. Which optional
/// fields are present depends on `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEvent {
    pub kind: NetworkEventKind,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub request_id: String,
    pub timestamp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_headers: Option<Headers>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_headers: Option<Headers>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mime_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_detail: Option<TimingDetail>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_length: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoded_data_length: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_text: Option<String>,
}

impl NetworkEvent {
    fn bare(kind: NetworkEventKind, request_id: &str, timestamp: f64) -> Self {
        Self {
            kind,
            request_id: request_id.to_string(),
            timestamp,
            wall_time: None,
            url: None,
            method: None,
            request_headers: None,
            status: None,
            status_text: None,
            response_headers: None,
            mime_type: None,
            protocol: None,
            timing_detail: None,
            data_length: None,
            encoded_data_length: None,
            error_text: None,
        }
    }

    pub fn request(request_id: &str, timestamp: f64, method: &str, url: &str) -> Self {
        Self {
            url: Some(url.to_string()),
            method: Some(method.to_string()),
            request_headers: Some(Headers::new()),
            ..Self::bare(NetworkEventKind::RequestWillBeSent, request_id, timestamp)
        }
    }

    pub fn response(request_id: &str, timestamp: f64, status: u16, mime_type: &str) -> Self {
        Self {
            status: Some(status),
            status_text: Some(String::new()),
            response_headers: Some(Headers::new()),
            mime_type: Some(mime_type.to_string()),
            ..Self::bare(NetworkEventKind::ResponseReceived, request_id, timestamp)
        }
    }

    pub fn data(request_id: &str, timestamp: f64, data_length: u64) -> Self {
        Self {
            data_length: Some(data_length),
            encoded_data_length: Some(data_length),
            ..Self::bare(NetworkEventKind::DataReceived, request_id, timestamp)
        }
    }

    pub fn finished(request_id: &str, timestamp: f64, encoded_data_length: u64) -> Self {
        Self {
            encoded_data_length: Some(encoded_data_length),
            ..Self::bare(NetworkEventKind::LoadingFinished, request_id, timestamp)
        }
    }

    pub fn failed(request_id: &str, timestamp: f64, error_text: &str) -> Self {
        Self {
            error_text: Some(error_text.to_string()),
            ..Self::bare(NetworkEventKind::LoadingFailed, request_id, timestamp)
        }
    }

    pub fn load_event(timestamp: f64) -> Self {
        Self::bare(NetworkEventKind::LoadEventFired, "", timestamp)
    }

    pub fn with_wall_time(mut self, wall_time: f64) -> Self {
        self.wall_time = Some(wall_time);
        self
    }

    pub fn with_timing(mut self, timing: TimingDetail) -> Self {
        self.timing_detail = Some(timing);
        self
    }

    /// Shifts the monotonic timestamps (and `request_time`) by `secs`.
    pub fn shifted(&self, secs: f64) -> Self {
        let mut ev = self.clone();
        ev.timestamp += secs;
        if let Some(t) = ev.timing_detail.as_mut() {
            t.request_time += secs;
        }
        ev
    }
}
