//! Page-transition state machine built during exploration.

use std::collections::{HashMap, HashSet, VecDeque};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ui_tree::{
    contains_webview, enumerate_actionable, fingerprint, ElementPath, EventKind, StateFingerprint,
    StateId, UiEvent, UiNode,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("state {0} is not in the model")]
    UnknownState(StateId),
    #[error("nondeterministic edge: {event} from {from} recorded to {recorded}, now observed to {observed}")]
    NondeterministicEdge {
        from: StateId,
        event: UiEvent,
        recorded: StateId,
        observed: StateId,
        is_new_state: bool,
    },
    #[error("state {0} is unreachable from the entry state")]
    Unreachable(StateId),
    #[error("invalid model: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageState {
    pub fingerprint: StateFingerprint,
    pub activity_name: String,
    pub has_webview: bool,
    /// Milliseconds since the start of the run.
    pub first_seen_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screenshot_ref: Option<String>,
    pub unexplored_events: Vec<UiEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: StateId,
    pub event: UiEvent,
    pub to: StateId,
    /// Set once the edge has been re-observed with a different destination.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub tainted: bool,
}

type EdgeKey = (StateId, EventKind, Option<ElementPath>);

fn edge_key(from: StateId, event: &UiEvent) -> EdgeKey {
    (from, event.kind, event.target.clone())
}

/// Outcome of [`TransitionModel::add_observation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub to: StateFingerprint,
    pub is_new_state: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ModelDoc", into = "ModelDoc")]
pub struct TransitionModel {
    entry: StateId,
    states: IndexMap<StateId, PageState>,
    transitions: Vec<Transition>,
    edge_index: HashMap<EdgeKey, usize>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    entry: StateId,
    states: Vec<PageState>,
    transitions: Vec<Transition>,
}

impl From<TransitionModel> for ModelDoc {
    fn from(m: TransitionModel) -> Self {
        ModelDoc {
            entry: m.entry,
            states: m.states.into_values().collect(),
            transitions: m.transitions,
        }
    }
}

impl TryFrom<ModelDoc> for TransitionModel {
    type Error = ModelError;

    fn try_from(doc: ModelDoc) -> Result<Self, Self::Error> {
        let mut states = IndexMap::new();
        for s in doc.states {
            let id = s.fingerprint.id();
            if states.insert(id, s).is_some() {
                return Err(ModelError::Invalid(format!("duplicate state {id}")));
            }
        }
        let mut model = TransitionModel {
            entry: doc.entry,
            states,
            transitions: doc.transitions,
            edge_index: HashMap::new(),
        };
        for (i, t) in model.transitions.iter().enumerate() {
            if model.edge_index.insert(edge_key(t.from, &t.event), i).is_some() {
                return Err(ModelError::Invalid(format!(
                    "duplicate transition for ({}, {})",
                    t.from, t.event
                )));
            }
        }
        model.validate()?;
        Ok(model)
    }
}

impl TransitionModel {
    /// Starts a model whose entry state is the page shown at launch.
    pub fn new(entry_tree: &UiNode, activity: &str, now: u64) -> Self {
        let entry = new_state(entry_tree, activity, now);
        let id = entry.fingerprint.id();
        let mut states = IndexMap::new();
        states.insert(id, entry);
        Self {
            entry: id,
            states,
            transitions: Vec::new(),
            edge_index: HashMap::new(),
        }
    }

    pub fn entry(&self) -> StateId {
        self.entry
    }

    pub fn state(&self, id: StateId) -> Option<&PageState> {
        self.states.get(&id)
    }

    pub fn state_mut(&mut self, id: StateId) -> Option<&mut PageState> {
        self.states.get_mut(&id)
    }

    pub fn contains(&self, id: StateId) -> bool {
        self.states.contains_key(&id)
    }

    /// States in discovery order.
    pub fn states(&self) -> impl Iterator<Item = &PageState> {
        self.states.values()
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn transition(&self, from: StateId, event: &UiEvent) -> Option<&Transition> {
        self.edge_index
            .get(&edge_key(from, event))
            .map(|&i| &self.transitions[i])
    }

    /// Records that `event` fired on `from` led to the page `to_tree`.
    ///
    /// The destination is registered if unseen even when the edge turns out
    /// to be nondeterministic; in that case the first recording is kept,
    /// marked tainted, and the error carries the observed destination.
    pub fn add_observation(
        &mut self,
        from: StateId,
        event: &UiEvent,
        to_tree: &UiNode,
        activity: &str,
        now: u64,
    ) -> Result<Observation, ModelError> {
        let source = self
            .states
            .get_mut(&from)
            .ok_or(ModelError::UnknownState(from))?;
        source.unexplored_events.retain(|e| !e.same_action(event));

        let fp = fingerprint(to_tree);
        let to = fp.id();
        let is_new_state = !self.states.contains_key(&to);
        if is_new_state {
            self.states.insert(to, new_state(to_tree, activity, now));
        }

        let key = edge_key(from, event);
        match self.edge_index.get(&key) {
            Some(&i) => {
                let recorded = &mut self.transitions[i];
                if recorded.to != to {
                    recorded.tainted = true;
                    return Err(ModelError::NondeterministicEdge {
                        from,
                        event: event.clone(),
                        recorded: recorded.to,
                        observed: to,
                        is_new_state,
                    });
                }
            }
            None => {
                self.edge_index.insert(key, self.transitions.len());
                self.transitions.push(Transition {
                    from,
                    event: event.clone(),
                    to,
                    tainted: false,
                });
            }
        }
        Ok(Observation { to: fp, is_new_state })
    }

    /// Adjacency over untainted, non-self-loop edges, in recording order.
    fn adjacency(&self) -> HashMap<StateId, Vec<usize>> {
        let mut adj: HashMap<StateId, Vec<usize>> = HashMap::new();
        for (i, t) in self.transitions.iter().enumerate() {
            if !t.tainted && t.from != t.to {
                adj.entry(t.from).or_default().push(i);
            }
        }
        adj
    }

    /// BFS predecessor edges from `start`.
    fn bfs(&self, start: StateId) -> HashMap<StateId, Option<usize>> {
        let adj = self.adjacency();
        let mut parent = HashMap::from([(start, None)]);
        let mut queue = VecDeque::from([start]);
        while let Some(s) = queue.pop_front() {
            for &i in adj.get(&s).map(Vec::as_slice).unwrap_or(&[]) {
                let to = self.transitions[i].to;
                if let std::collections::hash_map::Entry::Vacant(v) = parent.entry(to) {
                    v.insert(Some(i));
                    queue.push_back(to);
                }
            }
        }
        parent
    }

    /// Hop distance from the entry to every reachable state.
    pub fn distances(&self) -> HashMap<StateId, usize> {
        let parent = self.bfs(self.entry);
        let mut dist = HashMap::with_capacity(parent.len());
        for &s in parent.keys() {
            let mut d = 0;
            let mut cur = s;
            while let Some(Some(i)) = parent.get(&cur) {
                d += 1;
                cur = self.transitions[*i].from;
            }
            dist.insert(s, d);
        }
        dist
    }

    /// Shortest event sequence from the entry to `target`; each step names
    /// the state on which its event fires.
    pub fn shortest_event_path(
        &self,
        target: StateId,
    ) -> Result<Vec<(StateId, UiEvent)>, ModelError> {
        if !self.states.contains_key(&target) {
            return Err(ModelError::UnknownState(target));
        }
        let parent = self.bfs(self.entry);
        if !parent.contains_key(&target) {
            return Err(ModelError::Unreachable(target));
        }
        let mut steps = Vec::new();
        let mut cur = target;
        while let Some(Some(i)) = parent.get(&cur) {
            let t = &self.transitions[*i];
            steps.push((t.from, t.event.clone()));
            cur = t.from;
        }
        steps.reverse();
        Ok(steps)
    }

    /// States embedding a WebView, in discovery-time order.
    pub fn webview_states(&self) -> Vec<StateId> {
        let mut found: Vec<&PageState> = self.states.values().filter(|s| s.has_webview).collect();
        found.sort_by_key(|s| s.first_seen_at);
        found.into_iter().map(|s| s.fingerprint.id()).collect()
    }

    /// Checks the structural invariants; used after loading from disk.
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.states.contains_key(&self.entry) {
            return Err(ModelError::Invalid(format!("entry {} not in states", self.entry)));
        }
        for (id, s) in &self.states {
            if s.fingerprint.id() != *id {
                return Err(ModelError::Invalid(format!("state keyed {id} has fingerprint {}", s.fingerprint)));
            }
        }
        let mut seen = HashSet::new();
        for t in &self.transitions {
            for end in [t.from, t.to] {
                if !self.states.contains_key(&end) {
                    return Err(ModelError::Invalid(format!("transition endpoint {end} not in states")));
                }
            }
            if !seen.insert(edge_key(t.from, &t.event)) {
                return Err(ModelError::Invalid(format!("duplicate transition ({}, {})", t.from, t.event)));
            }
        }
        Ok(())
    }
}

fn new_state(tree: &UiNode, activity: &str, now: u64) -> PageState {
    PageState {
        fingerprint: fingerprint(tree),
        activity_name: activity.to_string(),
        has_webview: contains_webview(tree),
        first_seen_at: now,
        screenshot_ref: None,
        unexplored_events: enumerate_actionable(tree),
    }
}
