//! Experiment registry, join-time instance allocation, participant routing
//! and session lifecycle.
//!
//! Registry state lives behind one mutex so join, transition and complete
//! are linearizable with respect to each other. Each session's flow runtime
//! has its own lock; ticks never touch the registry lock, and the lock order
//! is always registry then session.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::Rng;
use sha2::{Digest, Sha256};
use tracing::info;

use crate::api::{
    BoardEntry, CompletionReceipt, DeviceClass, ExperimentView, InstanceRecord, JoinOutcome,
    JoinRequest, RedirectReason, SessionView, Ticket, TickResponse,
};
use crate::clock::{Clock, SystemClock};
use crate::config::ExperimentConfig;
use crate::dataplane::{
    AnonId, DataStore, ExportFormat, ExportKind, FrameAck, IdMinter, SessionMeta, SessionStatus,
    TrackingFrame, TrialRecord,
};
use crate::error::{PlatformError, Result};
use crate::flow::{validate_flow, ActionSpec, EmittedAction, Flow, FlowRuntime, TRIALS_COMPLETED, TRIALS_TOTAL};
use crate::questionnaire::{done_event, QuestionnaireRegistry, QuestionnaireSpec, RenderedItem, ResponseSet};
use crate::trial::{assign_between_group, generate_trials, GroupCounts, Phase, TrialPlan};

pub const DEFAULT_SESSION_TIMEOUT_S: f64 = 60.0 * 60.0;

#[derive(Debug, Clone)]
pub struct Settings {
    pub session_timeout_s: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            session_timeout_s: DEFAULT_SESSION_TIMEOUT_S,
        }
    }
}

#[derive(Debug)]
struct Experiment {
    config: ExperimentConfig,
    flow: Option<Arc<Flow>>,
    published: bool,
    publish_seq: u64,
    questionnaire_ids: Vec<String>,
    instances: Vec<InstanceRecord>,
    groups: Option<GroupCounts>,
    /// Sessions admitted and not dropped.
    enrolled: u64,
    sessions: u64,
}

impl Experiment {
    fn is_full(&self) -> bool {
        self.config
            .meta
            .max_participants
            .is_some_and(|max| self.enrolled >= max)
    }
}

#[derive(Debug, Default)]
struct Participant {
    anon: Option<AnonId>,
    active: HashMap<String, String>,
    completed: HashSet<String>,
}

#[derive(Debug)]
struct Session {
    id: String,
    experiment_id: String,
    participant_key: [u8; 32],
    anon: AnonId,
    group: Option<String>,
    world_id: String,
    instance_id: String,
    status: SessionStatus,
    flow: Arc<Flow>,
    runtime: FlowRuntime,
    plan: TrialPlan,
    pending_events: Vec<String>,
    last_activity: f64,
    trials_completed: usize,
    receipt: Option<CompletionReceipt>,
}

impl Session {
    fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            experiment_id: self.experiment_id.clone(),
            participant: self.anon,
            world_id: self.world_id.clone(),
            instance_id: self.instance_id.clone(),
            group: self.group.clone(),
            status: self.status,
            state: self.runtime.current_state.clone(),
            clock: self.runtime.clock,
            trials_completed: self.trials_completed,
            trials_total: self.plan.main_count(),
        }
    }

    fn ensure_active(&self) -> Result<()> {
        if self.status == SessionStatus::Active {
            Ok(())
        } else {
            Err(PlatformError::SessionInactive(self.id.clone()))
        }
    }

    /// Fills `{group}` in portal targets.
    fn resolve(&self, mut actions: Vec<EmittedAction>) -> Vec<EmittedAction> {
        let group = self.group.as_deref().unwrap_or("");
        for a in &mut actions {
            if let ActionSpec::OpenPortal { world_id } = &mut a.action {
                *world_id = world_id.replace("{group}", group);
            }
        }
        actions
    }
}

#[derive(Debug, Default)]
struct Registry {
    order: Vec<String>,
    experiments: HashMap<String, Experiment>,
    next_publish: u64,
    participants: HashMap<[u8; 32], Participant>,
    sessions: HashMap<String, Arc<Mutex<Session>>>,
}

impl Registry {
    fn experiment(&self, id: &str) -> Result<&Experiment> {
        self.experiments
            .get(id)
            .ok_or_else(|| PlatformError::not_found("experiment", id))
    }

    fn experiment_mut(&mut self, id: &str) -> Result<&mut Experiment> {
        self.experiments
            .get_mut(id)
            .ok_or_else(|| PlatformError::not_found("experiment", id))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .get(id)
            .cloned()
            .ok_or_else(|| PlatformError::not_found("session", id))
    }
}

/// The platform service: experiment registry plus the session and data
/// planes behind it.
#[derive(Debug)]
pub struct Platform {
    registry: Mutex<Registry>,
    questionnaires: QuestionnaireRegistry,
    data: DataStore,
    ids: IdMinter,
    clock: Arc<dyn Clock>,
    settings: Settings,
    salt: [u8; 32],
}

impl Default for Platform {
    fn default() -> Self {
        Platform::new(DataStore::in_memory())
    }
}

pub struct PlatformBuilder {
    data: DataStore,
    ids: IdMinter,
    clock: Arc<dyn Clock>,
    settings: Settings,
}

impl PlatformBuilder {
    pub fn ids(mut self, ids: IdMinter) -> Self {
        self.ids = ids;
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn settings(mut self, settings: Settings) -> Self {
        self.settings = settings;
        self
    }

    pub fn build(self) -> Platform {
        Platform {
            registry: Mutex::default(),
            questionnaires: QuestionnaireRegistry::new(),
            data: self.data,
            ids: self.ids,
            clock: self.clock,
            settings: self.settings,
            salt: rand::rng().random(),
        }
    }
}

impl Platform {
    pub fn new(data: DataStore) -> Self {
        Platform::builder(data).build()
    }

    pub fn builder(data: DataStore) -> PlatformBuilder {
        PlatformBuilder {
            data,
            ids: IdMinter::default(),
            clock: Arc::new(SystemClock::default()),
            settings: Settings::default(),
        }
    }

    pub fn data(&self) -> &DataStore {
        &self.data
    }

    pub fn questionnaires(&self) -> &QuestionnaireRegistry {
        &self.questionnaires
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    fn participant_key(&self, participant_id: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.salt);
        h.update(participant_id.as_bytes());
        h.finalize().into()
    }

    fn check_config(&self, config: &ExperimentConfig) -> Result<Option<Arc<Flow>>> {
        if config.worlds.is_empty() {
            return Err(PlatformError::InvalidExperiment("at least one world is required".into()));
        }
        if config.meta.participant_limit_per_instance == 0 {
            return Err(PlatformError::InvalidExperiment(
                "participant_limit_per_instance must be positive".into(),
            ));
        }
        let mut seen = HashSet::new();
        for w in &config.worlds {
            if !seen.insert(w.world_id.as_str()) {
                return Err(PlatformError::InvalidExperiment(format!(
                    "world `{}` declared twice",
                    w.world_id
                )));
            }
            if config.flow.state(&w.entry_flow_state).is_none() {
                return Err(PlatformError::InvalidExperiment(format!(
                    "world `{}` enters undeclared state `{}`",
                    w.world_id, w.entry_flow_state
                )));
            }
            if let Some(g) = &w.group {
                if !config.factors.groups().iter().any(|(l, _)| l == g) {
                    return Err(PlatformError::InvalidExperiment(format!(
                        "world `{}` names unknown group `{g}`",
                        w.world_id
                    )));
                }
            }
        }
        config.factors.validate()?;
        for q in &config.questionnaires {
            q.validate()?;
        }
        Ok(Flow::compile(config.flow.clone()).ok().map(Arc::new))
    }

    /// Registers an experiment, unpublished.
    pub fn register_experiment(&self, config: ExperimentConfig) -> Result<String> {
        let flow = self.check_config(&config)?;
        let mut reg = self.registry.lock();
        let id = match &config.meta.id {
            Some(slug) if slug.trim().is_empty() => {
                return Err(PlatformError::InvalidExperiment("empty experiment id".into()))
            }
            Some(slug) => slug.clone(),
            None => self.ids.mint().to_string(),
        };
        if reg.experiments.contains_key(&id) {
            return Err(PlatformError::Conflict(format!("experiment `{id}` already exists")));
        }
        for q in &config.questionnaires {
            self.questionnaires.ensure(q.clone())?;
        }
        let questionnaire_ids = config.required_questionnaires();
        for q in &questionnaire_ids {
            if self.questionnaires.get(q).is_none() {
                return Err(PlatformError::InvalidExperiment(format!(
                    "flow shows unregistered questionnaire `{q}`"
                )));
            }
        }
        let groups = config
            .factors
            .has_between()
            .then(|| GroupCounts::new(&config.factors));
        reg.order.push(id.clone());
        reg.experiments.insert(
            id.clone(),
            Experiment {
                config,
                flow,
                published: false,
                publish_seq: 0,
                questionnaire_ids,
                instances: Vec::new(),
                groups,
                enrolled: 0,
                sessions: 0,
            },
        );
        info!(experiment = %id, "registered");
        Ok(id)
    }

    /// Replaces an experiment's configuration while nobody has joined it.
    pub fn update_experiment(&self, id: &str, mut config: ExperimentConfig) -> Result<()> {
        let flow = self.check_config(&config)?;
        let mut reg = self.registry.lock();
        let exp = reg.experiment_mut(id)?;
        if exp.sessions > 0 {
            return Err(PlatformError::Conflict(format!(
                "experiment `{id}` already has sessions"
            )));
        }
        for q in &config.questionnaires {
            self.questionnaires.ensure(q.clone())?;
        }
        config.meta.id = Some(id.to_string());
        if flow.is_none() && exp.published {
            exp.published = false;
        }
        exp.questionnaire_ids = config.required_questionnaires();
        exp.groups = config
            .factors
            .has_between()
            .then(|| GroupCounts::new(&config.factors));
        exp.config = config;
        exp.flow = flow;
        Ok(())
    }

    pub fn set_published(&self, id: &str, published: bool) -> Result<()> {
        let mut reg = self.registry.lock();
        let seq = reg.next_publish;
        let exp = reg.experiment_mut(id)?;
        if published {
            if exp.flow.is_none() {
                return Err(PlatformError::InvalidFlow(validate_flow(&exp.config.flow)));
            }
            if !exp.published {
                exp.published = true;
                exp.publish_seq = seq;
                reg.next_publish += 1;
            }
        } else {
            exp.published = false;
        }
        Ok(())
    }

    pub fn experiment(&self, id: &str) -> Result<ExperimentView> {
        let reg = self.registry.lock();
        let exp = reg.experiment(id)?;
        Ok(ExperimentView {
            experiment_id: id.to_string(),
            published: exp.published,
            questionnaire_ids: exp.questionnaire_ids.clone(),
            config: exp.config.clone(),
        })
    }

    pub fn experiment_ids(&self) -> Vec<String> {
        self.registry.lock().order.clone()
    }

    /// Published experiments in publish order, without flow internals.
    pub fn list_board(&self) -> Vec<BoardEntry> {
        let reg = self.registry.lock();
        let mut listed: Vec<(u64, BoardEntry)> = reg
            .order
            .iter()
            .filter_map(|id| reg.experiments.get(id).map(|e| (id, e)))
            .filter(|(_, e)| e.published && !(e.config.meta.auto_hide && e.is_full()))
            .map(|(id, e)| {
                let m = &e.config.meta;
                (
                    e.publish_seq,
                    BoardEntry {
                        experiment_id: id.clone(),
                        title: m.title.clone(),
                        description: m.description.clone(),
                        prerequisites: m.prerequisites.clone(),
                        reward_text: m.reward_text.clone(),
                        vr_only: m.vr_only,
                        participants: e.enrolled,
                        max_participants: m.max_participants,
                    },
                )
            })
            .collect();
        listed.sort_by_key(|(seq, _)| *seq);
        listed.into_iter().map(|(_, b)| b).collect()
    }

    fn allocate(&self, exp_id: &str, exp: &mut Experiment, world_id: &str, session_id: &str) -> String {
        let limit = exp.config.meta.participant_limit_per_instance as usize;
        if let Some(inst) = exp
            .instances
            .iter_mut()
            .find(|i| i.world_id == world_id && !i.closed && i.occupants.len() < limit)
        {
            inst.occupants.push(session_id.to_string());
            return inst.instance_id.clone();
        }
        let instance_id = self.ids.mint().to_string();
        exp.instances.push(InstanceRecord {
            instance_id: instance_id.clone(),
            experiment_id: exp_id.to_string(),
            world_id: world_id.to_string(),
            occupants: vec![session_id.to_string()],
            created_at: self.clock.now(),
            closed: false,
        });
        instance_id
    }

    fn vacate(exp: &mut Experiment, instance_id: &str, session_id: &str) {
        if let Some(inst) = exp.instances.iter_mut().find(|i| i.instance_id == instance_id) {
            inst.occupants.retain(|s| s != session_id);
            if inst.occupants.is_empty() {
                inst.closed = true;
            }
        }
    }

    fn ticket(&self, s: &Session, exp: &Experiment, actions: Vec<EmittedAction>, resumed: bool) -> Ticket {
        Ticket {
            session_id: s.id.clone(),
            experiment_id: s.experiment_id.clone(),
            participant: s.anon,
            world_id: s.world_id.clone(),
            instance_id: s.instance_id.clone(),
            avatar: exp.config.world(&s.world_id).and_then(|w| w.avatar.clone()),
            group: s.group.clone(),
            plan: s.plan.clone(),
            state: s.runtime.current_state.clone(),
            actions: s.resolve(actions),
            resumed,
        }
    }

    /// Admits a participant into an instance or redirects them back to the
    /// board.
    pub fn join(&self, experiment_id: &str, req: &JoinRequest) -> Result<JoinOutcome> {
        let key = self.participant_key(&req.participant_id);
        let now = self.clock.now();
        let mut guard = self.registry.lock();
        let reg = &mut *guard;
        let exp = reg
            .experiments
            .get_mut(experiment_id)
            .filter(|e| e.published)
            .ok_or_else(|| PlatformError::not_found("experiment", experiment_id))?;
        let participant = reg.participants.entry(key).or_default();
        if participant.completed.contains(experiment_id) {
            return Ok(JoinOutcome::Redirect {
                reason: RedirectReason::AlreadyCompleted,
            });
        }
        if exp.config.meta.vr_only && req.device_class != DeviceClass::Vr {
            return Ok(JoinOutcome::Redirect {
                reason: RedirectReason::NonVr,
            });
        }
        if let Some(sid) = participant.active.get(experiment_id) {
            let handle = reg.sessions.get(sid).cloned().expect("active session indexed");
            let mut s = handle.lock();
            s.last_activity = now;
            return Ok(JoinOutcome::Admitted(Box::new(self.ticket(&s, exp, Vec::new(), true))));
        }
        if exp.is_full() {
            return Ok(JoinOutcome::Redirect {
                reason: RedirectReason::Full,
            });
        }
        let flow = exp
            .flow
            .clone()
            .ok_or_else(|| PlatformError::InvalidFlow(validate_flow(&exp.config.flow)))?;

        let anon = *participant.anon.get_or_insert_with(|| self.ids.mint());
        let seed = exp
            .config
            .meta
            .trial_seed
            .unwrap_or_else(|| anon.seed() ^ stable_hash(experiment_id));
        let plan = generate_trials(&exp.config.factors, seed)?;
        let group = match exp.groups.as_mut() {
            Some(counts) => Some(assign_between_group(&exp.config.factors, counts)?),
            None => None,
        };
        let world_id = exp
            .config
            .worlds
            .iter()
            .find(|w| w.group.is_none() || w.group == group)
            .map(|w| w.world_id.clone())
            .ok_or_else(|| PlatformError::InvalidExperiment("no entry world for group".into()))?;

        let session_id = self.ids.mint().to_string();
        let instance_id = self.allocate(experiment_id, exp, &world_id, &session_id);
        let (mut runtime, actions) = flow.start();
        runtime.set_variable(TRIALS_TOTAL, plan.main_count() as f64);
        runtime.set_variable(TRIALS_COMPLETED, 0.0);
        if let Some(g) = &group {
            runtime.set_variable("group", g.as_str());
        }

        let meta = SessionMeta {
            session_id: session_id.clone(),
            experiment_id: experiment_id.to_string(),
            participant: anon,
            group: group.clone(),
            status: SessionStatus::Active,
            world_id: world_id.clone(),
            instance_id: instance_id.clone(),
            tracking_rate_hz: exp.config.meta.tracking_rate_hz,
            trials_planned: plan.len(),
        };
        if let Err(e) = self.data.open_session(meta) {
            Self::vacate(exp, &instance_id, &session_id);
            return Err(e.into());
        }
        exp.enrolled += 1;
        exp.sessions += 1;
        participant.active.insert(experiment_id.to_string(), session_id.clone());

        let session = Session {
            id: session_id.clone(),
            experiment_id: experiment_id.to_string(),
            participant_key: key,
            anon,
            group,
            world_id,
            instance_id,
            status: SessionStatus::Active,
            flow,
            runtime,
            plan,
            pending_events: Vec::new(),
            last_activity: now,
            trials_completed: 0,
            receipt: None,
        };
        let ticket = self.ticket(&session, exp, actions, false);
        reg.sessions.insert(session_id, Arc::new(Mutex::new(session)));
        Ok(JoinOutcome::Admitted(Box::new(ticket)))
    }

    fn session_handle(&self, session_id: &str) -> Result<Arc<Mutex<Session>>> {
        self.registry.lock().session(session_id)
    }

    pub fn session(&self, session_id: &str) -> Result<SessionView> {
        Ok(self.session_handle(session_id)?.lock().view())
    }

    pub fn transition_log(&self, session_id: &str) -> Result<Vec<crate::flow::LogEntry>> {
        Ok(self
            .session_handle(session_id)?
            .lock()
            .runtime
            .transition_log
            .clone())
    }

    pub fn flow_runtime(&self, session_id: &str) -> Result<FlowRuntime> {
        Ok(self.session_handle(session_id)?.lock().runtime.clone())
    }

    /// Delivers manual events (plus any queued by submissions) and advances
    /// the session's flow by `dt` seconds.
    pub fn session_events(&self, session_id: &str, dt: f64, events: &[String]) -> Result<TickResponse> {
        let handle = self.session_handle(session_id)?;
        let mut s = handle.lock();
        s.ensure_active()?;
        let mut all = std::mem::take(&mut s.pending_events);
        all.extend_from_slice(events);
        let flow = s.flow.clone();
        let outcome = match flow.tick(&mut s.runtime, dt, &all) {
            Ok(o) => o,
            Err(e) => {
                s.pending_events = all;
                return Err(e.into());
            }
        };
        s.last_activity = self.clock.now();
        let actions = s.resolve(outcome.actions);
        Ok(TickResponse {
            state: s.runtime.current_state.clone(),
            clock: s.runtime.clock,
            transition: outcome.transition,
            actions,
            ignored_events: outcome.ignored_events,
            terminal: flow.is_terminal(&s.runtime.current_state),
        })
    }

    /// Moves a session through a world portal into a fresh instance of the
    /// target world; the flow resumes at that world's entry state.
    pub fn transition_world(&self, session_id: &str, world_id: &str) -> Result<Ticket> {
        let mut guard = self.registry.lock();
        let reg = &mut *guard;
        let handle = reg.session(session_id)?;
        let mut s = handle.lock();
        s.ensure_active()?;
        let exp = reg.experiment_mut(&s.experiment_id)?;
        let world = exp
            .config
            .world(world_id)
            .cloned()
            .ok_or_else(|| PlatformError::UnknownWorld {
                world: world_id.to_string(),
                experiment: s.experiment_id.clone(),
            })?;
        if let Some(g) = &world.group {
            if s.group.as_ref() != Some(g) {
                return Err(PlatformError::WrongGroup {
                    world: world_id.to_string(),
                    group: g.clone(),
                });
            }
        }
        let flow = s.flow.clone();
        let actions = flow.enter_from_world(&mut s.runtime, &world.entry_flow_state, world_id)?;
        let old_instance = s.instance_id.clone();
        Self::vacate(exp, &old_instance, session_id);
        let instance_id = self.allocate(&s.experiment_id.clone(), exp, world_id, session_id);
        s.world_id = world_id.to_string();
        s.instance_id = instance_id.clone();
        s.last_activity = self.clock.now();
        let wid = world_id.to_string();
        self.data.update_session(session_id, |m| {
            m.world_id = wid;
            m.instance_id = instance_id;
        })?;
        Ok(self.ticket(&s, exp, actions, false))
    }

    fn drop_session(&self, reg: &mut Registry, s: &mut Session) -> Result<()> {
        if s.status != SessionStatus::Active {
            return Ok(());
        }
        s.status = SessionStatus::Dropped;
        if let Some(exp) = reg.experiments.get_mut(&s.experiment_id) {
            Self::vacate(exp, &s.instance_id, &s.id);
            exp.enrolled = exp.enrolled.saturating_sub(1);
        }
        if let Some(p) = reg.participants.get_mut(&s.participant_key) {
            p.active.remove(&s.experiment_id);
        }
        self.data
            .update_session(&s.id, |m| m.status = SessionStatus::Dropped)?;
        info!(session = %s.id, "dropped");
        Ok(())
    }

    /// The participant left before finishing.
    pub fn leave(&self, session_id: &str) -> Result<SessionView> {
        let mut guard = self.registry.lock();
        let handle = guard.session(session_id)?;
        let mut s = handle.lock();
        self.drop_session(&mut guard, &mut s)?;
        Ok(s.view())
    }

    /// Drops every active session idle for longer than the configured
    /// timeout. Returns the dropped session ids.
    pub fn sweep_timeouts(&self) -> Result<Vec<String>> {
        let now = self.clock.now();
        let mut guard = self.registry.lock();
        let handles: Vec<_> = guard.sessions.values().cloned().collect();
        let mut dropped = Vec::new();
        for h in handles {
            let mut s = h.lock();
            if s.status == SessionStatus::Active
                && now - s.last_activity > self.settings.session_timeout_s
            {
                self.drop_session(&mut guard, &mut s)?;
                dropped.push(s.id.clone());
            }
        }
        dropped.sort();
        Ok(dropped)
    }

    /// Marks a session completed once its flow is terminal and every required
    /// questionnaire is in. Completing twice returns the same receipt.
    pub fn complete_session(&self, session_id: &str) -> Result<CompletionReceipt> {
        let mut guard = self.registry.lock();
        let reg = &mut *guard;
        let handle = reg.session(session_id)?;
        let mut s = handle.lock();
        if let Some(r) = &s.receipt {
            return Ok(r.clone());
        }
        s.ensure_active()?;
        if !s.flow.is_terminal(&s.runtime.current_state) {
            return Err(PlatformError::NotTerminal(s.runtime.current_state.clone()));
        }
        let exp = reg.experiment_mut(&s.experiment_id)?;
        let missing: Vec<String> = exp
            .questionnaire_ids
            .iter()
            .filter(|q| !self.data.has_response(session_id, q).unwrap_or(false))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(PlatformError::MissingQuestionnaires(missing));
        }
        self.data
            .update_session(session_id, |m| m.status = SessionStatus::Completed)?;
        s.status = SessionStatus::Completed;
        Self::vacate(exp, &s.instance_id, session_id);
        let receipt = CompletionReceipt {
            session_id: s.id.clone(),
            experiment_id: s.experiment_id.clone(),
            participant: s.anon,
            reward_text: exp.config.meta.reward_text.clone(),
            completed_at: s.runtime.clock,
        };
        if let Some(p) = reg.participants.get_mut(&s.participant_key) {
            p.active.remove(&s.experiment_id);
            p.completed.insert(s.experiment_id.clone());
        }
        s.receipt = Some(receipt.clone());
        Ok(receipt)
    }

    pub fn register_questionnaire(&self, spec: QuestionnaireSpec) -> Result<String> {
        Ok(self.questionnaires.register(spec)?)
    }

    pub fn revise_questionnaire(&self, spec: QuestionnaireSpec) -> Result<u32> {
        Ok(self.questionnaires.revise(spec)?)
    }

    pub fn instantiate_questionnaire(&self, questionnaire_id: &str, session_id: &str) -> Result<Vec<RenderedItem>> {
        self.session_handle(session_id)?;
        Ok(self.questionnaires.instantiate(questionnaire_id, session_id)?)
    }

    /// Validates and stores a response set, then queues the
    /// `questionnaire_done:<id>` event for the session's next tick.
    pub fn submit_response(&self, resp: &ResponseSet) -> Result<()> {
        let handle = self.session_handle(&resp.session_id)?;
        let mut s = handle.lock();
        s.ensure_active()?;
        let spec = s.flow.spec();
        let shown_in = |state: &str| {
            spec.listeners
                .iter()
                .filter(|l| l.watched_state == state)
                .flat_map(|l| l.on_enter.iter().chain(&l.during))
                .any(|a| matches!(a, ActionSpec::ShowQuestionnaire { questionnaire_id } if *questionnaire_id == resp.questionnaire_id))
        };
        let flow_shows = spec.states.iter().any(|st| shown_in(&st.name));
        if flow_shows && !shown_in(&s.runtime.current_state) {
            return Err(PlatformError::Conflict(format!(
                "questionnaire `{}` is not shown in state `{}`",
                resp.questionnaire_id, s.runtime.current_state
            )));
        }
        let pinned = self.questionnaires.validate_response(resp)?;
        let (qid, version) = (pinned.questionnaire_id.clone(), pinned.version);
        self.data.store_response(pinned)?;
        self.questionnaires.record_response(&qid, version);
        s.pending_events.push(done_event(&qid));
        s.last_activity = self.clock.now();
        Ok(())
    }

    /// Stores a trial record. The phase comes from the session's plan, and
    /// each main trial advances the flow's trial counter.
    pub fn ingest_trial(&self, mut record: TrialRecord) -> Result<()> {
        let handle = self.session_handle(&record.session_id)?;
        let mut s = handle.lock();
        s.ensure_active()?;
        let phase = s
            .plan
            .trials
            .get(record.trial_index)
            .map(|t| t.phase)
            .unwrap_or(Phase::Main);
        record.phase = phase;
        self.data.ingest_trial(record)?;
        if phase == Phase::Main {
            s.trials_completed += 1;
            let done = s.trials_completed as f64;
            s.runtime.set_variable(TRIALS_COMPLETED, done);
        }
        s.last_activity = self.clock.now();
        Ok(())
    }

    pub fn ingest_frames(&self, batch: &[TrackingFrame]) -> Result<FrameAck> {
        let ack = self.data.ingest_frames(batch)?;
        if let Some(first) = batch.first() {
            if let Ok(h) = self.session_handle(&first.session_id) {
                h.lock().last_activity = self.clock.now();
            }
        }
        Ok(ack)
    }

    pub fn export(&self, experiment_id: &str, kind: ExportKind, format: ExportFormat) -> Result<Vec<u8>> {
        self.registry.lock().experiment(experiment_id)?;
        Ok(self.data.export(experiment_id, kind, format)?)
    }

    pub fn instances(&self, experiment_id: &str) -> Result<Vec<InstanceRecord>> {
        Ok(self.registry.lock().experiment(experiment_id)?.instances.clone())
    }

    pub fn group_counts(&self, experiment_id: &str) -> Result<Option<GroupCounts>> {
        Ok(self.registry.lock().experiment(experiment_id)?.groups.clone())
    }

    pub fn sessions(&self, experiment_id: &str) -> Result<Vec<SessionView>> {
        let reg = self.registry.lock();
        reg.experiment(experiment_id)?;
        let mut views: Vec<SessionView> = reg
            .sessions
            .values()
            .map(|h| h.lock().view())
            .filter(|v| v.experiment_id == experiment_id)
            .collect();
        let order: HashMap<String, usize> = self
            .data
            .sessions_of(experiment_id)
            .into_iter()
            .enumerate()
            .map(|(i, m)| (m.session_id, i))
            .collect();
        views.sort_by_key(|v| order.get(&v.session_id).copied().unwrap_or(usize::MAX));
        Ok(views)
    }
}

/// FNV-1a, used to decorrelate one participant's orders across experiments.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}
