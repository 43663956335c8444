//! UI hierarchy dumps: parsing, structural fingerprints, element addressing.
//!
//! A page is identified by the *shape* of its widget tree, not by what the
//! widgets currently display. Two dumps of the same screen taken a few
//! seconds apart usually differ in text (clocks, scores, counters) and
//! sometimes in geometry (lazy layout, banners), but keep the same widget
//! classes in the same places.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fully qualified class of the platform embedded browser widget.
pub const WEBVIEW_CLASS: &str = "android.webkit.WebView";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UiTreeError {
    #[error("malformed UI dump: {0}")]
    MalformedDump(String),
    #[error("element path diverges at step {step}: {reason}")]
    PathMismatch { step: usize, reason: String },
}

/// Screen rectangle in pixels, `left <= right` and `top <= bottom`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Bounds {
    pub left: i32,
    pub top: i32,
    pub right: i32,
    pub bottom: i32,
}

impl Bounds {
    pub fn new(left: i32, top: i32, right: i32, bottom: i32) -> Result<Self, UiTreeError> {
        if left > right || top > bottom {
            return Err(UiTreeError::MalformedDump(format!(
                "inverted bounds [{left},{top}][{right},{bottom}]"
            )));
        }
        Ok(Self {
            left,
            top,
            right,
            bottom,
        })
    }

    pub fn center(&self) -> (i32, i32) {
        (
            self.left + (self.right - self.left) / 2,
            self.top + (self.bottom - self.top) / 2,
        )
    }
}

impl FromStr for Bounds {
    type Err = UiTreeError;

    /// Parses the uiautomator form `[l,t][r,b]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || UiTreeError::MalformedDump(format!("unparseable bounds {s:?}"));
        let rest = s.trim().strip_prefix('[').ok_or_else(bad)?;
        let (first, rest) = rest.split_once("][").ok_or_else(bad)?;
        let second = rest.strip_suffix(']').ok_or_else(bad)?;
        let pair = |p: &str| -> Result<(i32, i32), UiTreeError> {
            let (a, b) = p.split_once(',').ok_or_else(bad)?;
            Ok((
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ))
        };
        let (left, top) = pair(first)?;
        let (right, bottom) = pair(second)?;
        Bounds::new(left, top, right, bottom)
    }
}

impl fmt::Display for Bounds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{},{}][{},{}]",
            self.left, self.top, self.right, self.bottom
        )
    }
}

/// One widget of a parsed UI hierarchy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UiNode {
    pub class_name: String,
    pub resource_id: Option<String>,
    pub text: Option<String>,
    pub bounds: Bounds,
    pub clickable: bool,
    pub enabled: bool,
    pub children: Vec<UiNode>,
}

impl UiNode {
    pub fn new(class_name: impl Into<String>, bounds: Bounds) -> Self {
        Self {
            class_name: class_name.into(),
            resource_id: None,
            text: None,
            bounds,
            clickable: false,
            enabled: true,
            children: Vec::new(),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.resource_id = Some(id.into());
        self
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn clickable(mut self, clickable: bool) -> Self {
        self.clickable = clickable;
        self
    }

    pub fn enabled(mut self, enabled: bool) -> Self {
        self.enabled = enabled;
        self
    }

    pub fn with_child(mut self, child: UiNode) -> Self {
        self.children.push(child);
        self
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(UiNode::node_count).sum::<usize>()
    }

    /// Preorder traversal yielding each node with its path from `self`.
    pub fn walk(&self) -> Walk<'_> {
        Walk {
            stack: vec![(ElementPath::root(), self)],
        }
    }

    /// Path addressing `target` (compared by identity) within this tree.
    pub fn path_to(&self, target: &UiNode) -> Option<ElementPath> {
        self.walk()
            .find(|(_, n)| std::ptr::eq(*n, target))
            .map(|(p, _)| p)
    }

    /// Serializes back to the uiautomator dump dialect.
    pub fn to_xml(&self) -> String {
        let mut out = String::from("<?xml version='1.0' encoding='UTF-8' standalone='yes' ?>");
        out.push_str("<hierarchy rotation=\"0\">");
        self.write_xml(&mut out);
        out.push_str("</hierarchy>");
        out
    }

    fn write_xml(&self, out: &mut String) {
        let _ = write!(
            out,
            "<node class=\"{}\" resource-id=\"{}\" text=\"{}\" bounds=\"{}\" clickable=\"{}\" enabled=\"{}\"",
            escape(&self.class_name),
            escape(self.resource_id.as_deref().unwrap_or("")),
            escape(self.text.as_deref().unwrap_or("")),
            self.bounds,
            self.clickable,
            self.enabled,
        );
        if self.children.is_empty() {
            out.push_str(" />");
        } else {
            out.push('>');
            for child in &self.children {
                child.write_xml(out);
            }
            out.push_str("</node>");
        }
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            '\n' => out.push_str("&#10;"),
            _ => out.push(c),
        }
    }
    out
}

pub struct Walk<'a> {
    stack: Vec<(ElementPath, &'a UiNode)>,
}

impl<'a> Iterator for Walk<'a> {
    type Item = (ElementPath, &'a UiNode);

    fn next(&mut self) -> Option<Self::Item> {
        let (path, node) = self.stack.pop()?;
        for (i, child) in node.children.iter().enumerate().rev() {
            self.stack.push((path.child(i, &child.class_name), child));
        }
        Some((path, node))
    }
}

/// Parses a uiautomator XML dump.
///
/// Accepts either a bare `node` root or the usual `hierarchy` wrapper. A
/// wrapper holding several top-level windows yields a synthetic
/// `hierarchy` root spanning all of them.
pub fn parse_ui_dump(xml_text: &str) -> Result<UiNode, UiTreeError> {
    let doc = roxmltree::Document::parse(xml_text)
        .map_err(|e| UiTreeError::MalformedDump(e.to_string()))?;
    let root = doc.root_element();
    match root.tag_name().name() {
        "node" => parse_node(root),
        "hierarchy" => {
            let mut windows = root
                .children()
                .filter(|c| c.is_element() && c.tag_name().name() == "node")
                .map(parse_node)
                .collect::<Result<Vec<_>, _>>()?;
            match windows.len() {
                0 => Err(UiTreeError::MalformedDump("empty hierarchy".into())),
                1 => Ok(windows.remove(0)),
                _ => {
                    let span = windows.iter().skip(1).fold(windows[0].bounds, |acc, w| Bounds {
                        left: acc.left.min(w.bounds.left),
                        top: acc.top.min(w.bounds.top),
                        right: acc.right.max(w.bounds.right),
                        bottom: acc.bottom.max(w.bounds.bottom),
                    });
                    let mut root = UiNode::new("hierarchy", span);
                    root.children = windows;
                    Ok(root)
                }
            }
        }
        other => Err(UiTreeError::MalformedDump(format!(
            "unexpected root element <{other}>"
        ))),
    }
}

fn parse_node(el: roxmltree::Node<'_, '_>) -> Result<UiNode, UiTreeError> {
    let non_empty = |name: &str| el.attribute(name).filter(|v| !v.is_empty()).map(String::from);
    let flag = |name: &str, default: bool| -> Result<bool, UiTreeError> {
        match el.attribute(name) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(UiTreeError::MalformedDump(format!(
                "attribute {name} has non-boolean value {v:?}"
            ))),
        }
    };
    let bounds = match el.attribute("bounds") {
        Some(b) => b.parse()?,
        None => Bounds::default(),
    };
    let children = el
        .children()
        .filter(|c| c.is_element() && c.tag_name().name() == "node")
        .map(parse_node)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(UiNode {
        class_name: el.attribute("class").unwrap_or_default().to_string(),
        resource_id: non_empty("resource-id"),
        text: non_empty("text"),
        bounds,
        clickable: flag("clickable", false)?,
        enabled: flag("enabled", true)?,
        children,
    })
}

/// Structural identity of a page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateFingerprint {
    pub digest: StateId,
    pub node_count: u32,
}

impl StateFingerprint {
    pub fn id(&self) -> StateId {
        self.digest
    }
}

impl fmt::Display for StateFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.digest.fmt(f)
    }
}

/// 64-bit fingerprint digest; rendered as 16 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateId(pub u64);

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for StateId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u64::from_str_radix(s, 16).map(StateId)
    }
}

impl Serialize for StateId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StateId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.len() != 16 {
            return Err(serde::de::Error::custom(format!(
                "state id {s:?} is not 16 hex digits"
            )));
        }
        s.parse().map_err(serde::de::Error::custom)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

/// Canonical byte form hashed by [`fingerprint`].
///
/// One record per node in preorder: depth, class, resource id (empty when
/// absent) and the clickable flag, separated by 0x1f and terminated by 0x1e.
/// Text and bounds are deliberately left out.
pub fn canonical_form(root: &UiNode) -> Vec<u8> {
    let mut out = Vec::new();
    let mut stack = vec![(0usize, root)];
    while let Some((depth, node)) = stack.pop() {
        out.extend_from_slice(depth.to_string().as_bytes());
        out.push(0x1f);
        out.extend_from_slice(node.class_name.as_bytes());
        out.push(0x1f);
        out.extend_from_slice(node.resource_id.as_deref().unwrap_or("").as_bytes());
        out.push(0x1f);
        out.push(if node.clickable { b'1' } else { b'0' });
        out.push(0x1e);
        for child in node.children.iter().rev() {
            stack.push((depth + 1, child));
        }
    }
    out
}

pub fn fingerprint(root: &UiNode) -> StateFingerprint {
    StateFingerprint {
        digest: StateId(fnv1a64(&canonical_form(root))),
        node_count: root.node_count() as u32,
    }
}

/// True iff some node is a platform WebView or a class whose simple name ends in `WebView`.
pub fn contains_webview(root: &UiNode) -> bool {
    root.walk().any(|(_, n)| {
        let simple = n.class_name.rsplit('.').next().unwrap_or_default();
        n.class_name == WEBVIEW_CLASS || simple.ends_with("WebView")
    })
}

/// One hop of an [`ElementPath`]: child index plus the class expected there.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, String)", into = "(usize, String)")]
pub struct PathStep {
    pub index: usize,
    pub class_name: String,
}

impl From<(usize, String)> for PathStep {
    fn from((index, class_name): (usize, String)) -> Self {
        Self { index, class_name }
    }
}

impl From<PathStep> for (usize, String) {
    fn from(s: PathStep) -> Self {
        (s.index, s.class_name)
    }
}

/// Structural address of a node relative to the root. Serialized as
/// `[[index, "class"], ...]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ElementPath(pub Vec<PathStep>);

impl ElementPath {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn child(&self, index: usize, class_name: &str) -> Self {
        let mut steps = self.0.clone();
        steps.push(PathStep {
            index,
            class_name: class_name.to_string(),
        });
        Self(steps)
    }

    pub fn steps(&self) -> &[PathStep] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ElementPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("/")?;
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            let short = s.class_name.rsplit('.').next().unwrap_or(&s.class_name);
            write!(f, "{short}[{}]", s.index)?;
        }
        Ok(())
    }
}

pub fn resolve_path<'a>(root: &'a UiNode, path: &ElementPath) -> Result<&'a UiNode, UiTreeError> {
    let mut node = root;
    for (step, hop) in path.steps().iter().enumerate() {
        let child = node.children.get(hop.index).ok_or_else(|| UiTreeError::PathMismatch {
            step,
            reason: format!(
                "child {} requested but node has {}",
                hop.index,
                node.children.len()
            ),
        })?;
        if child.class_name != hop.class_name {
            return Err(UiTreeError::PathMismatch {
                step,
                reason: format!("expected {} found {}", hop.class_name, child.class_name),
            });
        }
        node = child;
    }
    Ok(node)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Tap,
    Back,
}

/// A UI input: a tap on a structurally addressed element, or the Back key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawEvent")]
pub struct UiEvent {
    pub kind: EventKind,
    #[serde(rename = "path", skip_serializing_if = "Option::is_none")]
    pub target: Option<ElementPath>,
    #[serde(rename = "point", skip_serializing_if = "Option::is_none")]
    pub tap_point: Option<(i32, i32)>,
}

#[derive(Deserialize)]
struct RawEvent {
    kind: EventKind,
    path: Option<ElementPath>,
    point: Option<(i32, i32)>,
}

impl TryFrom<RawEvent> for UiEvent {
    type Error = String;

    fn try_from(raw: RawEvent) -> Result<Self, Self::Error> {
        match (raw.kind, raw.path) {
            (EventKind::Tap, Some(path)) => Ok(UiEvent {
                kind: EventKind::Tap,
                target: Some(path),
                tap_point: raw.point,
            }),
            (EventKind::Tap, None) => Err("tap event without a path".into()),
            (EventKind::Back, None) => Ok(UiEvent::back()),
            (EventKind::Back, Some(_)) => Err("back event must not carry a path".into()),
        }
    }
}

impl UiEvent {
    pub fn tap(path: ElementPath, point: Option<(i32, i32)>) -> Self {
        Self {
            kind: EventKind::Tap,
            target: Some(path),
            tap_point: point,
        }
    }

    pub fn back() -> Self {
        Self {
            kind: EventKind::Back,
            target: None,
            tap_point: None,
        }
    }

    /// Same kind and target; the recorded tap point is ignored since it is
    /// re-derived from live bounds.
    pub fn same_action(&self, other: &UiEvent) -> bool {
        self.kind == other.kind && self.target == other.target
    }

    /// Copy of this event with the tap point recomputed against `root`.
    pub fn rebind(&self, root: &UiNode) -> Result<UiEvent, UiTreeError> {
        match &self.target {
            None => Ok(self.clone()),
            Some(path) => {
                let node = resolve_path(root, path)?;
                Ok(UiEvent::tap(path.clone(), Some(node.bounds.center())))
            }
        }
    }
}

impl fmt::Display for UiEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.kind, &self.target) {
            (EventKind::Tap, Some(p)) => write!(f, "tap {p}"),
            _ => f.write_str("back"),
        }
    }
}

/// Tap events for every clickable, enabled node in preorder, then Back.
pub fn enumerate_actionable(root: &UiNode) -> Vec<UiEvent> {
    root.walk()
        .filter(|(_, n)| n.clickable && n.enabled)
        .map(|(path, n)| UiEvent::tap(path, Some(n.bounds.center())))
        .chain(std::iter::once(UiEvent::back()))
        .collect()
}
