//! Centralized finite state machine driving a session through its phases.
//!
//! A [`FlowSpec`] is compiled into a [`Flow`] once it validates. Each session
//! owns a [`FlowRuntime`] that is advanced by [`Flow::tick`] with a
//! caller-supplied time step; at most one transition fires per tick and
//! listener actions are emitted as `exit(old) ++ enter(new) ++ during(current)`.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::value::Scalar;

/// Variable holding the number of finished main trials.
pub const TRIALS_COMPLETED: &str = "trials_completed";
/// Variable holding the number of planned main trials.
pub const TRIALS_TOTAL: &str = "trials_total";

const TIMER_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDef {
    pub name: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Comparator {
    fn holds(self, lhs: &Scalar, rhs: &Scalar) -> bool {
        use std::cmp::Ordering::*;
        match (self, lhs.compare(rhs)) {
            (Comparator::Eq, Some(Equal)) => true,
            (Comparator::Ne, Some(Less | Greater)) => true,
            (Comparator::Ne, None) => true,
            (Comparator::Lt, Some(Less)) => true,
            (Comparator::Le, Some(Less | Equal)) => true,
            (Comparator::Gt, Some(Greater)) => true,
            (Comparator::Ge, Some(Greater | Equal)) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trigger {
    Manual {
        event: String,
    },
    TrialsExhausted,
    TimerElapsed {
        seconds: f64,
    },
    Predicate {
        variable: String,
        comparator: Comparator,
        value: Scalar,
    },
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trigger::Manual { event } => write!(f, "manual({event})"),
            Trigger::TrialsExhausted => f.write_str("trials_exhausted"),
            Trigger::TimerElapsed { seconds } => write!(f, "timer_elapsed({seconds})"),
            Trigger::Predicate {
                variable,
                comparator,
                value,
            } => write!(f, "predicate({variable} {comparator:?} {value})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDef {
    pub from: String,
    pub to: String,
    pub trigger: Trigger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionSpec {
    ShowQuestionnaire { questionnaire_id: String },
    StartTrial,
    RecordMarker { label: String },
    SetVariable { name: String, value: Scalar },
    OpenPortal { world_id: String },
    GrantReward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateListenerSpec {
    pub target_object: String,
    pub watched_state: String,
    #[serde(default)]
    pub on_enter: Vec<ActionSpec>,
    #[serde(default)]
    pub during: Vec<ActionSpec>,
    #[serde(default)]
    pub on_exit: Vec<ActionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub states: Vec<StateDef>,
    pub initial_state: String,
    pub transitions: Vec<TransitionDef>,
    #[serde(default)]
    pub listeners: Vec<StateListenerSpec>,
}

impl FlowSpec {
    pub fn state(&self, name: &str) -> Option<&StateDef> {
        self.states.iter().find(|s| s.name == name)
    }

    pub fn is_terminal(&self, name: &str) -> bool {
        self.state(name).is_some_and(|s| s.terminal)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "violation", content = "state", rename_all = "snake_case")]
pub enum Violation {
    DuplicateState(String),
    UnknownInitial(String),
    DanglingSource(String),
    DanglingTarget(String),
    MissingTerminal,
    DeadEnd(String),
    TerminalHasTransitions(String),
    Unreachable(String),
    UnknownListenerState(String),
    InvalidTimer(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateState(s) => write!(f, "state `{s}` declared more than once"),
            Violation::UnknownInitial(s) => write!(f, "initial state `{s}` is not declared"),
            Violation::DanglingSource(s) => write!(f, "transition source `{s}` is not declared"),
            Violation::DanglingTarget(s) => write!(f, "transition target `{s}` is not declared"),
            Violation::MissingTerminal => f.write_str("no terminal state"),
            Violation::DeadEnd(s) => write!(f, "non-terminal state `{s}` has no way out"),
            Violation::TerminalHasTransitions(s) => {
                write!(f, "terminal state `{s}` has outgoing transitions")
            }
            Violation::Unreachable(s) => write!(f, "state `{s}` is unreachable"),
            Violation::UnknownListenerState(s) => {
                write!(f, "listener watches undeclared state `{s}`")
            }
            Violation::InvalidTimer(s) => write!(f, "timer out of `{s}` must be positive"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, v: &Violation) -> bool {
        self.violations.contains(v)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("flow is valid");
        }
        let lines: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&lines.join("; "))
    }
}

/// Lists every structural problem with a flow specification.
pub fn validate_flow(spec: &FlowSpec) -> ValidationReport {
    let mut violations = Vec::new();
    let mut declared = HashSet::new();
    for s in &spec.states {
        if !declared.insert(s.name.as_str()) {
            violations.push(Violation::DuplicateState(s.name.clone()));
        }
    }
    if !declared.contains(spec.initial_state.as_str()) {
        violations.push(Violation::UnknownInitial(spec.initial_state.clone()));
    }
    let mut reported = HashSet::new();
    for t in &spec.transitions {
        if !declared.contains(t.from.as_str()) && reported.insert(("from", t.from.as_str())) {
            violations.push(Violation::DanglingSource(t.from.clone()));
        }
        if !declared.contains(t.to.as_str()) && reported.insert(("to", t.to.as_str())) {
            violations.push(Violation::DanglingTarget(t.to.clone()));
        }
        if let Trigger::TimerElapsed { seconds } = t.trigger {
            if !(seconds.is_finite() && seconds > 0.0) {
                violations.push(Violation::InvalidTimer(t.from.clone()));
            }
        }
    }
    if !spec.states.iter().any(|s| s.terminal) {
        violations.push(Violation::MissingTerminal);
    }
    let mut seen_state = HashSet::new();
    for s in &spec.states {
        if !seen_state.insert(s.name.as_str()) {
            continue;
        }
        let outgoing = spec.transitions.iter().any(|t| t.from == s.name);
        if s.terminal && outgoing {
            violations.push(Violation::TerminalHasTransitions(s.name.clone()));
        }
        if !s.terminal && !outgoing {
            violations.push(Violation::DeadEnd(s.name.clone()));
        }
    }

    if declared.contains(spec.initial_state.as_str()) {
        let mut reached = HashSet::from([spec.initial_state.as_str()]);
        let mut queue = VecDeque::from([spec.initial_state.as_str()]);
        while let Some(cur) = queue.pop_front() {
            for t in spec.transitions.iter().filter(|t| t.from == cur) {
                if declared.contains(t.to.as_str()) && reached.insert(t.to.as_str()) {
                    queue.push_back(t.to.as_str());
                }
            }
        }
        let mut flagged = HashSet::new();
        for s in &spec.states {
            if !reached.contains(s.name.as_str()) && flagged.insert(s.name.as_str()) {
                violations.push(Violation::Unreachable(s.name.clone()));
            }
        }
    }

    for l in &spec.listeners {
        if !declared.contains(l.watched_state.as_str()) {
            violations.push(Violation::UnknownListenerState(l.watched_state.clone()));
        }
    }
    ValidationReport { violations }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hook {
    Enter,
    During,
    Exit,
}

/// An action produced by a listener, tagged with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmittedAction {
    pub target_object: String,
    pub state: String,
    pub hook: Hook,
    pub action: ActionSpec,
}

/// Why a logged transition happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cause {
    Trigger(Trigger),
    WorldEntry { world_entry: String },
}

impl fmt::Display for Cause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cause::Trigger(t) => t.fmt(f),
            Cause::WorldEntry { world_entry } => write!(f, "world_entry({world_entry})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub tick: u64,
    pub clock: f64,
    pub from: String,
    pub to: String,
    pub trigger: Cause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRuntime {
    pub current_state: String,
    pub tick_count: u64,
    pub clock: f64,
    pub state_entered_at: f64,
    pub variables: BTreeMap<String, Scalar>,
    pub transition_log: Vec<LogEntry>,
}

impl FlowRuntime {
    pub fn time_in_state(&self) -> f64 {
        self.clock - self.state_entered_at
    }

    pub fn set_variable(&mut self, name: impl Into<String>, value: impl Into<Scalar>) {
        self.variables.insert(name.into(), value.into());
    }

    fn trials_exhausted(&self) -> bool {
        match (
            self.variables.get(TRIALS_COMPLETED).and_then(Scalar::as_f64),
            self.variables.get(TRIALS_TOTAL).and_then(Scalar::as_f64),
        ) {
            (Some(done), Some(total)) => done >= total,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("flow specification is invalid: {0}")]
    Invalid(ValidationReport),
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("state `{0}` is not declared")]
    UnknownState(String),
    #[error("state `{0}` is terminal")]
    Terminal(String),
    #[error("transition log is corrupt at entry {index}: {reason}")]
    Corrupt { index: usize, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickOutcome {
    pub transition: Option<(String, String)>,
    pub actions: Vec<EmittedAction>,
    pub ignored_events: Vec<String>,
}

/// A validated flow with per-state lookup tables.
#[derive(Debug, Clone)]
pub struct Flow {
    spec: FlowSpec,
    outgoing: HashMap<String, Vec<usize>>,
    terminal: HashSet<String>,
}

impl Flow {
    pub fn compile(spec: FlowSpec) -> Result<Flow, FlowError> {
        let report = validate_flow(&spec);
        if !report.is_empty() {
            return Err(FlowError::Invalid(report));
        }
        let mut outgoing: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, t) in spec.transitions.iter().enumerate() {
            outgoing.entry(t.from.clone()).or_default().push(i);
        }
        let terminal = spec
            .states
            .iter()
            .filter(|s| s.terminal)
            .map(|s| s.name.clone())
            .collect();
        Ok(Flow {
            spec,
            outgoing,
            terminal,
        })
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    pub fn is_terminal(&self, state: &str) -> bool {
        self.terminal.contains(state)
    }

    fn declared(&self, state: &str) -> bool {
        self.spec.state(state).is_some()
    }

    fn transitions_from(&self, state: &str) -> impl Iterator<Item = &TransitionDef> {
        self.outgoing
            .get(state)
            .into_iter()
            .flatten()
            .map(|&i| &self.spec.transitions[i])
    }

    fn fresh_runtime(&self) -> FlowRuntime {
        FlowRuntime {
            current_state: self.spec.initial_state.clone(),
            tick_count: 0,
            clock: 0.0,
            state_entered_at: 0.0,
            variables: BTreeMap::new(),
            transition_log: Vec::new(),
        }
    }

    /// A runtime at the initial state plus the initial state's enter actions.
    pub fn start(&self) -> (FlowRuntime, Vec<EmittedAction>) {
        let mut rt = self.fresh_runtime();
        let mut actions = Vec::new();
        self.emit(&mut rt, Hook::Enter, &mut actions);
        (rt, actions)
    }

    fn emit(&self, rt: &mut FlowRuntime, hook: Hook, out: &mut Vec<EmittedAction>) {
        let state = rt.current_state.clone();
        for l in self.spec.listeners.iter().filter(|l| l.watched_state == state) {
            let list = match hook {
                Hook::Enter => &l.on_enter,
                Hook::During => &l.during,
                Hook::Exit => &l.on_exit,
            };
            for action in list {
                if let ActionSpec::SetVariable { name, value } = action {
                    rt.variables.insert(name.clone(), value.clone());
                }
                out.push(EmittedAction {
                    target_object: l.target_object.clone(),
                    state: state.clone(),
                    hook,
                    action: action.clone(),
                });
            }
        }
    }

    fn eligible(&self, rt: &FlowRuntime, trigger: &Trigger, events: &[String]) -> bool {
        match trigger {
            Trigger::Manual { event } => events.iter().any(|e| e == event),
            Trigger::TrialsExhausted => rt.trials_exhausted(),
            Trigger::TimerElapsed { seconds } => {
                rt.time_in_state() + TIMER_EPSILON * seconds.max(1.0) >= *seconds
            }
            Trigger::Predicate {
                variable,
                comparator,
                value,
            } => rt
                .variables
                .get(variable)
                .is_some_and(|v| comparator.holds(v, value)),
        }
    }

    fn switch(
        &self,
        rt: &mut FlowRuntime,
        to: &str,
        cause: Cause,
        actions: &mut Vec<EmittedAction>,
    ) {
        self.emit(rt, Hook::Exit, actions);
        let from = std::mem::replace(&mut rt.current_state, to.to_string());
        rt.state_entered_at = rt.clock;
        rt.transition_log.push(LogEntry {
            tick: rt.tick_count,
            clock: rt.clock,
            from,
            to: to.to_string(),
            trigger: cause,
        });
        self.emit(rt, Hook::Enter, actions);
    }

    /// Advances the runtime by `dt` seconds, delivering `events`.
    pub fn tick(
        &self,
        rt: &mut FlowRuntime,
        dt: f64,
        events: &[String],
    ) -> Result<TickOutcome, FlowError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(FlowError::InvalidStep(dt));
        }
        if !self.declared(&rt.current_state) {
            return Err(FlowError::UnknownState(rt.current_state.clone()));
        }
        rt.clock += dt;
        rt.tick_count += 1;

        let mut out = TickOutcome::default();
        let from = rt.current_state.clone();
        let ignored: Vec<String> = events
            .iter()
            .filter(|e| {
                !self
                    .transitions_from(&from)
                    .any(|t| matches!(&t.trigger, Trigger::Manual { event } if event == *e))
            })
            .cloned()
            .collect();
        for e in &ignored {
            debug!(state = %from, event = %e, "event names no trigger of the current state");
        }
        out.ignored_events = ignored;

        let fired = self
            .transitions_from(&from)
            .find(|t| self.eligible(rt, &t.trigger, events))
            .cloned();
        if let Some(t) = fired {
            self.switch(rt, &t.to, Cause::Trigger(t.trigger), &mut out.actions);
            out.transition = Some((from, t.to));
        }
        self.emit(rt, Hook::During, &mut out.actions);
        Ok(out)
    }

    /// Moves the runtime into `state` because the participant arrived in a
    /// new world. Logged with a world-entry cause.
    pub fn enter_from_world(
        &self,
        rt: &mut FlowRuntime,
        state: &str,
        world_id: &str,
    ) -> Result<Vec<EmittedAction>, FlowError> {
        if !self.declared(state) {
            return Err(FlowError::UnknownState(state.to_string()));
        }
        if self.is_terminal(&rt.current_state) {
            return Err(FlowError::Terminal(rt.current_state.clone()));
        }
        let mut actions = Vec::new();
        self.switch(
            rt,
            state,
            Cause::WorldEntry {
                world_entry: world_id.to_string(),
            },
            &mut actions,
        );
        Ok(actions)
    }

    /// Rebuilds a runtime from a transition log. Variables are not part of
    /// the log and come back empty.
    pub fn replay(&self, log: &[LogEntry]) -> Result<FlowRuntime, FlowError> {
        let mut rt = self.fresh_runtime();
        let corrupt = |index: usize, reason: String| FlowError::Corrupt { index, reason };
        for (i, e) in log.iter().enumerate() {
            if e.from != rt.current_state {
                return Err(corrupt(
                    i,
                    format!("expected source `{}`, found `{}`", rt.current_state, e.from),
                ));
            }
            if !self.declared(&e.to) {
                return Err(corrupt(i, format!("unknown state `{}`", e.to)));
            }
            if i > 0 && e.tick < rt.tick_count {
                return Err(corrupt(i, "tick counter went backwards".into()));
            }
            if e.clock < rt.clock {
                return Err(corrupt(i, "clock went backwards".into()));
            }
            if let Cause::Trigger(trigger) = &e.trigger {
                let known = self
                    .transitions_from(&e.from)
                    .any(|t| t.to == e.to && &t.trigger == trigger);
                if !known {
                    return Err(corrupt(
                        i,
                        format!("no transition {} -> {} on {}", e.from, e.to, trigger),
                    ));
                }
            } else if self.is_terminal(&e.from) {
                return Err(corrupt(i, format!("left terminal state `{}`", e.from)));
            }
            rt.current_state = e.to.clone();
            rt.tick_count = e.tick;
            rt.clock = e.clock;
            rt.state_entered_at = e.clock;
        }
        rt.transition_log = log.to_vec();
        Ok(rt)
    }

    /// Replays `live`'s log and checks it lands where `live` is.
    pub fn verify(&self, live: &FlowRuntime) -> Result<(), FlowError> {
        let replayed = self.replay(&live.transition_log)?;
        if replayed.current_state != live.current_state {
            return Err(FlowError::Corrupt {
                index: live.transition_log.len(),
                reason: format!(
                    "replay ends in `{}` but runtime is in `{}`",
                    replayed.current_state, live.current_state
                ),
            });
        }
        Ok(())
    }
}

/// Newline-delimited export of a transition log.
pub fn log_to_ndjson(log: &[LogEntry]) -> String {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e).expect("log entries serialize"));
        out.push('\n');
    }
    out
}

pub fn log_from_ndjson(text: &str) -> Result<Vec<LogEntry>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
