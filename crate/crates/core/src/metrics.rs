//! SpeedIndex from captured frames, and native activity load time from the
//! device log's timing markers.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

pub const CHANNELS: usize = 3;
pub const BINS: usize = 256;

pub type Histogram = [[u64; BINS]; CHANNELS];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("frames differ in resolution")]
    ResolutionMismatch,
    #[error("frame timestamps must strictly increase (t={prev} then t={next})")]
    NonMonotonicTimestamps { prev: u64, next: u64 },
    #[error("no frames captured")]
    NoFrames,
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
}

/// A screen frame reduced to per-channel colour histograms.
#[derive(Clone, PartialEq, Eq, Deserialize)]
#[serde(try_from = "FrameSpec")]
pub struct FrameSample {
    pub t_ms: u64,
    histogram: Box<Histogram>,
}

impl std::fmt::Debug for FrameSample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrameSample")
            .field("t_ms", &self.t_ms)
            .field("pixels", &self.pixel_count())
            .finish()
    }
}

impl FrameSample {
    pub fn from_histogram(t_ms: u64, histogram: Histogram) -> Result<Self, MetricsError> {
        let sums: Vec<u64> = histogram.iter().map(|c| c.iter().sum()).collect();
        if sums.iter().any(|&s| s != sums[0]) {
            return Err(MetricsError::InvalidFrame(format!(
                "channel sums differ: {sums:?}"
            )));
        }
        Ok(Self {
            t_ms,
            histogram: Box::new(histogram),
        })
    }

    pub fn from_rgb(t_ms: u64, pixels: &[[u8; 3]]) -> Self {
        let mut h = [[0u64; BINS]; CHANNELS];
        for px in pixels {
            for (c, v) in px.iter().enumerate() {
                h[c][*v as usize] += 1;
            }
        }
        Self {
            t_ms,
            histogram: Box::new(h),
        }
    }

    /// Grayscale pixels; the value is replicated into all three channels.
    pub fn from_gray(t_ms: u64, pixels: &[u8]) -> Self {
        let mut h = [[0u64; BINS]; CHANNELS];
        for v in pixels {
            for channel in h.iter_mut() {
                channel[*v as usize] += 1;
            }
        }
        Self {
            t_ms,
            histogram: Box::new(h),
        }
    }

    /// Run-length form: `count` pixels of colour `rgb` per run.
    pub fn from_runs(t_ms: u64, runs: &[([u8; 3], u64)]) -> Self {
        let mut h = [[0u64; BINS]; CHANNELS];
        for (rgb, count) in runs {
            for (c, v) in rgb.iter().enumerate() {
                h[c][*v as usize] += count;
            }
        }
        Self {
            t_ms,
            histogram: Box::new(h),
        }
    }

    pub fn histogram(&self) -> &Histogram {
        &self.histogram
    }

    pub fn pixel_count(&self) -> u64 {
        self.histogram[0].iter().sum()
    }

    pub fn at(&self, t_ms: u64) -> Self {
        Self {
            t_ms,
            histogram: self.histogram.clone(),
        }
    }

    /// Colour occupying the most pixels (per channel mode).
    pub fn dominant_rgb(&self) -> [u8; 3] {
        let mut out = [0u8; 3];
        for (c, channel) in self.histogram.iter().enumerate() {
            let (bin, _) = channel
                .iter()
                .enumerate()
                .max_by_key(|(i, n)| (**n, std::cmp::Reverse(*i)))
                .unwrap_or((0, &0));
            out[c] = bin as u8;
        }
        out
    }
}

/// Authoring form of a frame in scenario files. Exactly one pixel source.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameSpec {
    t_ms: u64,
    #[serde(default)]
    gray: Option<Vec<u8>>,
    #[serde(default)]
    runs: Option<Vec<(u8, u8, u8, u64)>>,
    #[serde(default)]
    histogram: Option<Vec<Vec<u64>>>,
}

impl TryFrom<FrameSpec> for FrameSample {
    type Error = MetricsError;

    fn try_from(spec: FrameSpec) -> Result<Self, Self::Error> {
        match (spec.gray, spec.runs, spec.histogram) {
            (Some(g), None, None) => Ok(FrameSample::from_gray(spec.t_ms, &g)),
            (None, Some(r), None) => {
                let runs: Vec<_> = r.into_iter().map(|(a, b, c, n)| ([a, b, c], n)).collect();
                Ok(FrameSample::from_runs(spec.t_ms, &runs))
            }
            (None, None, Some(h)) => {
                if h.len() != CHANNELS || h.iter().any(|c| c.len() != BINS) {
                    return Err(MetricsError::InvalidFrame(format!(
                        "histogram must be {CHANNELS}x{BINS}"
                    )));
                }
                let mut out = [[0u64; BINS]; CHANNELS];
                for (dst, src) in out.iter_mut().zip(&h) {
                    dst.copy_from_slice(src);
                }
                FrameSample::from_histogram(spec.t_ms, out)
            }
            _ => Err(MetricsError::InvalidFrame(
                "frame needs exactly one of gray, runs, histogram".into(),
            )),
        }
    }
}

fn histogram_distance(a: &FrameSample, b: &FrameSample) -> u64 {
    a.histogram
        .iter()
        .flatten()
        .zip(b.histogram.iter().flatten())
        .map(|(x, y)| x.abs_diff(*y))
        .sum()
}

/// Fraction of the way `frame` has progressed from `first` towards `last`,
/// by L1 histogram distance, clamped to [0, 1].
pub fn visual_completeness(
    frame: &FrameSample,
    first: &FrameSample,
    last: &FrameSample,
) -> Result<f64, MetricsError> {
    let n = last.pixel_count();
    if frame.pixel_count() != n || first.pixel_count() != n {
        return Err(MetricsError::ResolutionMismatch);
    }
    let total = histogram_distance(first, last);
    if total == 0 {
        return Ok(1.0);
    }
    let remaining = histogram_distance(frame, last) as f64 / total as f64;
    Ok((1.0 - remaining).clamp(0.0, 1.0))
}

/// Integral of visual incompleteness over the capture (left Riemann sum
/// over frame intervals), in milliseconds.
pub fn speed_index(frames: &[FrameSample]) -> Result<f64, MetricsError> {
    let (first, last) = match (frames.first(), frames.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(MetricsError::NoFrames),
    };
    for pair in frames.windows(2) {
        if pair[1].t_ms <= pair[0].t_ms {
            return Err(MetricsError::NonMonotonicTimestamps {
                prev: pair[0].t_ms,
                next: pair[1].t_ms,
            });
        }
    }
    let mut si = 0.0;
    for pair in frames.windows(2) {
        let vc = visual_completeness(&pair[0], first, last)?;
        si += (1.0 - vc) * (pair[1].t_ms - pair[0].t_ms) as f64;
    }
    Ok(si)
}

pub const MARK_BEGIN: &str = "DM_ONCREATE_BEGIN";
pub const MARK_END: &str = "DM_ONCREATE_END";
pub const MARK_FULLY_DRAWN: &str = "DM_FULLY_DRAWN";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityTiming {
    pub activity_name: String,
    pub create_begin: u64,
    pub create_end: u64,
    pub fully_drawn: Option<u64>,
}

impl ActivityTiming {
    pub fn oncreate_ms(&self) -> u64 {
        self.create_end - self.create_begin
    }

    pub fn fully_drawn_ms(&self) -> Option<u64> {
        self.fully_drawn.map(|t| t - self.create_begin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Marker {
    Begin,
    End,
    FullyDrawn,
}

fn parse_marker(line: &str) -> Option<(Marker, &str)> {
    for (tag, marker) in [
        (MARK_BEGIN, Marker::Begin),
        (MARK_END, Marker::End),
        (MARK_FULLY_DRAWN, Marker::FullyDrawn),
    ] {
        if let Some(pos) = line.find(tag) {
            let rest = &line[pos + tag.len()..];
            if !rest.starts_with(char::is_whitespace) {
                continue;
            }
            let name = rest.split_whitespace().next()?;
            return Some((marker, name));
        }
    }
    None
}

struct Instance {
    name: String,
    begin: u64,
    end: Option<u64>,
    fully_drawn: Option<u64>,
    dropped: bool,
}

/// Pairs BEGIN / END / FULLY_DRAWN markers into per-instance timings.
///
/// A BEGIN is closed by the next END of the same activity; a BEGIN that is
/// superseded by another BEGIN (or never closed) is dropped. Only the first
/// FULLY_DRAWN of an instance counts.
pub fn parse_activity_timing<I, S>(lines: I) -> Vec<ActivityTiming>
where
    I: IntoIterator<Item = (u64, S)>,
    S: AsRef<str>,
{
    let mut instances: Vec<Instance> = Vec::new();
    for (ts, line) in lines {
        let Some((marker, name)) = parse_marker(line.as_ref()) else {
            continue;
        };
        let latest = instances
            .iter_mut()
            .rev()
            .find(|i| i.name == name && !i.dropped);
        match marker {
            Marker::Begin => {
                if let Some(open) = latest.filter(|i| i.end.is_none()) {
                    warn!(activity = name, at = open.begin, "onCreate begin without end, dropped");
                    open.dropped = true;
                }
                instances.push(Instance {
                    name: name.to_string(),
                    begin: ts,
                    end: None,
                    fully_drawn: None,
                    dropped: false,
                });
            }
            Marker::End => match latest {
                Some(open) if open.end.is_none() && ts >= open.begin => open.end = Some(ts),
                _ => warn!(activity = name, at = ts, "onCreate end without begin, ignored"),
            },
            Marker::FullyDrawn => match latest {
                Some(inst) if inst.fully_drawn.is_none() && ts >= inst.begin => {
                    inst.fully_drawn = Some(ts)
                }
                Some(_) => {}
                None => warn!(activity = name, at = ts, "fully-drawn without begin, ignored"),
            },
        }
    }
    instances
        .into_iter()
        .filter(|i| !i.dropped)
        .filter_map(|i| {
            let Some(end) = i.end else {
                warn!(activity = %i.name, at = i.begin, "onCreate begin without end, dropped");
                return None;
            };
            Some(ActivityTiming {
                activity_name: i.name,
                create_begin: i.begin,
                create_end: end,
                fully_drawn: i.fully_drawn.filter(|&f| f >= end),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityReport {
    pub name: String,
    pub oncreate_ms: u64,
    pub fully_drawn_ms: Option<u64>,
}

impl From<&ActivityTiming> for ActivityReport {
    fn from(t: &ActivityTiming) -> Self {
        Self {
            name: t.activity_name.clone(),
            oncreate_ms: t.oncreate_ms(),
            fully_drawn_ms: t.fully_drawn_ms(),
        }
    }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub speed_index_ms: Option<f64>,
    pub page_load_time_ms: Option<i64>,
    pub activity: Option<ActivityReport>,
}
