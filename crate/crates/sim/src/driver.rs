//! One simulated participant, driven through the public API: join, answer
//! questionnaires, run trials, follow portals, complete.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vrlab_analysis::fitts::fitts_features;
use vrlab_client::Client;
use vrlab_core::api::{CompletionReceipt, DeviceClass, JoinOutcome, JoinRequest, Ticket};
use vrlab_core::config::{ExperimentConfig, PointingStimuli};
use vrlab_core::dataplane::{AnonId, SessionStatus, TrackingFrame, TrialRecord};
use vrlab_core::flow::{ActionSpec, EmittedAction, Trigger};
use vrlab_core::questionnaire::{Answer, ItemFormat, ResponseSet};
use vrlab_core::trial::{Phase, Trial};
use vrlab_core::Scalar;

use crate::models::{DrummerModel, MoverModel, ResponderModel};
use crate::SimError;

/// Seconds between ticks when nothing in the flow is timed.
const STEP: f64 = 0.5;
const REACH_SECONDS: f64 = 3.0;
const MAX_STEPS: usize = 100_000;
const MAX_IDLE_TICKS: usize = 4;
/// Drumming length when the state has no timer to follow.
const DEFAULT_DRUM_SECONDS: f64 = 240.0;

pub const DEFAULT_TRACKING_HZ: f64 = 72.0;

/// Concrete behavior for one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParticipantModel {
    Responder(ResponderModel),
    /// Gives the same answer to every trial regardless of the stimulus.
    FixedResponder { faster: bool },
    Mover(MoverModel),
    Drummer(DrummerModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantOptions {
    /// Platform account handle. The service keeps only a salted digest.
    pub participant_id: String,
    /// Leave instead of stepping through the first portal.
    pub dropout_at_portal: bool,
    pub tracking_rate_hz: f64,
    pub seed: u64,
}

impl ParticipantOptions {
    pub fn new(participant_id: impl Into<String>, seed: u64) -> Self {
        ParticipantOptions {
            participant_id: participant_id.into(),
            dropout_at_portal: false,
            tracking_rate_hz: DEFAULT_TRACKING_HZ,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub experiment_id: String,
    pub participant: AnonId,
    pub group: Option<String>,
    /// Cohort segment label, when run as part of a cohort.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<String>,
    pub status: SessionStatus,
    pub trials: usize,
    pub frames: usize,
    pub receipt: Option<CompletionReceipt>,
}

/// Joins from a VR headset; a redirect is an error.
pub fn join(client: &Client, experiment_id: &str, participant_id: &str) -> Result<Ticket, SimError> {
    let req = JoinRequest {
        participant_id: participant_id.to_string(),
        device_class: DeviceClass::Vr,
        device_serial: None,
    };
    match client.join(experiment_id, &req)? {
        JoinOutcome::Admitted(t) => Ok(*t),
        JoinOutcome::Redirect { reason } => Err(SimError::Redirected(reason)),
    }
}

/// Joins and runs one participant to completion. The experiment must be
/// published.
pub fn run_participant(
    client: &Client,
    experiment_id: &str,
    model: &ParticipantModel,
    opts: &ParticipantOptions,
) -> Result<SessionRecord, SimError> {
    let config = client.experiment(experiment_id)?.config;
    let ticket = join(client, experiment_id, &opts.participant_id)?;
    drive(client, &config, ticket, model, opts)
}

fn shown_questionnaire(actions: &[EmittedAction]) -> Option<&str> {
    actions.iter().find_map(|a| match &a.action {
        ActionSpec::ShowQuestionnaire { questionnaire_id } => Some(questionnaire_id.as_str()),
        _ => None,
    })
}

fn opened_portal(actions: &[EmittedAction]) -> Option<&str> {
    actions.iter().find_map(|a| match &a.action {
        ActionSpec::OpenPortal { world_id } => Some(world_id.as_str()),
        _ => None,
    })
}

fn starts_trial(actions: &[EmittedAction]) -> bool {
    actions.iter().any(|a| matches!(a.action, ActionSpec::StartTrial))
}

struct Run<'a> {
    client: &'a Client,
    config: &'a ExperimentConfig,
    model: &'a ParticipantModel,
    opts: &'a ParticipantOptions,
    stimuli: Option<PointingStimuli>,
    rng: ChaCha8Rng,
    ticket: Ticket,
    state: String,
    actions: Vec<EmittedAction>,
    clock: f64,
    entered_at: f64,
    next_trial: usize,
    frame_index: u64,
    trials: usize,
    frames: usize,
}

/// Drives an admitted session until it completes or the participant leaves.
pub fn drive(
    client: &Client,
    config: &ExperimentConfig,
    ticket: Ticket,
    model: &ParticipantModel,
    opts: &ParticipantOptions,
) -> Result<SessionRecord, SimError> {
    let stimuli = match model {
        ParticipantModel::Mover(_) => Some(
            config
                .pointing_targets()
                .map_err(|e| SimError::Config(format!("pointing stimuli: {e}")))?,
        ),
        _ => None,
    };
    let view = client.session(&ticket.session_id)?;
    let mut run = Run {
        client,
        config,
        model,
        opts,
        stimuli,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        state: ticket.state.clone(),
        actions: ticket.actions.clone(),
        clock: view.clock,
        entered_at: view.clock,
        next_trial: view.trials_completed,
        frame_index: 0,
        trials: 0,
        frames: 0,
        ticket,
    };
    if run.ticket.resumed {
        run.next_trial = run.completed_before_resume();
    }
    run.go()
}

impl Run<'_> {
    fn completed_before_resume(&self) -> usize {
        // Practice trials do not count towards `trials_completed`; resume
        // after them when the main block has started.
        let practice = self.ticket.plan.practice_trials().count();
        if self.next_trial > 0 {
            practice + self.next_trial
        } else {
            0
        }
    }

    fn record(&self, status: SessionStatus, receipt: Option<CompletionReceipt>) -> SessionRecord {
        SessionRecord {
            session_id: self.ticket.session_id.clone(),
            experiment_id: self.ticket.experiment_id.clone(),
            participant: self.ticket.participant,
            group: self.ticket.group.clone(),
            segment: None,
            status,
            trials: self.trials,
            frames: self.frames,
            receipt,
        }
    }

    fn go(mut self) -> Result<SessionRecord, SimError> {
        let sid = self.ticket.session_id.clone();
        let mut idle = 0;
        for _ in 0..MAX_STEPS {
            if self.config.flow.is_terminal(&self.state) {
                let receipt = self.client.complete(&sid)?;
                return Ok(self.record(SessionStatus::Completed, Some(receipt)));
            }
            if let Some(q) = shown_questionnaire(&self.actions).map(str::to_string) {
                self.answer(&q)?;
                self.actions.clear();
                self.tick(STEP, &[])?;
                continue;
            }
            if let Some(world) = opened_portal(&self.actions).map(str::to_string) {
                if self.opts.dropout_at_portal {
                    self.client.leave(&sid)?;
                    return Ok(self.record(SessionStatus::Dropped, None));
                }
                let ticket = self.client.transition(&sid, &world)?;
                self.state = ticket.state.clone();
                self.actions = ticket.actions.clone();
                self.entered_at = self.clock;
                self.ticket.group = ticket.group.clone();
                continue;
            }
            let mut busy = 0.0;
            if starts_trial(&self.actions) {
                busy = self.run_trials()?;
            }
            let (dt, events) = self.leave_step(busy);
            let moved = self.tick(dt, &events)?;
            idle = if moved { 0 } else { idle + 1 };
            if idle > MAX_IDLE_TICKS {
                return Err(SimError::Stuck(self.state.clone()));
            }
        }
        Err(SimError::Stuck(self.state.clone()))
    }

    /// How to get out of the current state: the first participant-driven
    /// event, else wait out a timer, else just let time pass.
    fn leave_step(&self, busy: f64) -> (f64, Vec<String>) {
        let outgoing: Vec<&Trigger> = self
            .config
            .flow
            .transitions
            .iter()
            .filter(|t| t.from == self.state)
            .map(|t| &t.trigger)
            .collect();
        let manual = outgoing.iter().find_map(|t| match t {
            Trigger::Manual { event } if !event.starts_with("questionnaire_done:") => Some(event.clone()),
            _ => None,
        });
        if let Some(event) = manual {
            return (busy.max(STEP), vec![event]);
        }
        let timer = outgoing.iter().find_map(|t| match t {
            Trigger::TimerElapsed { seconds } => Some(*seconds),
            _ => None,
        });
        match timer {
            Some(s) => ((s - (self.clock - self.entered_at)).max(busy).max(1e-6), Vec::new()),
            None => (busy.max(STEP), Vec::new()),
        }
    }

    fn timer_in_state(&self) -> Option<f64> {
        self.config.flow.transitions.iter().find_map(|t| match &t.trigger {
            Trigger::TimerElapsed { seconds } if t.from == self.state => Some(*seconds),
            _ => None,
        })
    }

    /// Returns true when the flow changed state.
    fn tick(&mut self, dt: f64, events: &[String]) -> Result<bool, SimError> {
        let resp = self.client.events(&self.ticket.session_id, dt, events)?;
        self.clock = resp.clock;
        let moved = resp.transition.is_some();
        if moved {
            self.entered_at = resp.clock;
        }
        self.state = resp.state;
        self.actions = resp.actions;
        Ok(moved)
    }

    fn answer(&mut self, questionnaire_id: &str) -> Result<(), SimError> {
        let items = self
            .client
            .render_questionnaire(questionnaire_id, &self.ticket.session_id)?;
        let rng = &mut self.rng;
        let answers = items
            .iter()
            .map(|item| match &item.format {
                ItemFormat::Likert { min, max, .. } => Answer::Likert(rng.random_range(*min..=*max)),
                ItemFormat::MultipleChoice { options } => {
                    Answer::Choice(options.choose(rng).cloned().unwrap_or_default())
                }
                ItemFormat::FreeText { max_len } => {
                    let text = rng.random_range(18..60).to_string();
                    Answer::Text(text.chars().take(*max_len).collect())
                }
            })
            .collect();
        self.client.submit_response(&ResponseSet {
            session_id: self.ticket.session_id.clone(),
            questionnaire_id: questionnaire_id.to_string(),
            version: items.first().map_or(0, |i| i.version),
            answers,
            submitted_at: self.clock,
        })?;
        Ok(())
    }

    /// Runs the trials owed to this visit: the whole practice block, or one
    /// main trial. Returns the seconds they took.
    fn run_trials(&mut self) -> Result<f64, SimError> {
        let plan = &self.ticket.plan.trials;
        let Some(first) = plan.get(self.next_trial) else {
            return Ok(0.0);
        };
        let batch: Vec<Trial> = if first.phase == Phase::Practice {
            plan[self.next_trial..]
                .iter()
                .take_while(|t| t.phase == Phase::Practice)
                .cloned()
                .collect()
        } else {
            vec![first.clone()]
        };
        let mut elapsed = 0.0;
        for trial in &batch {
            elapsed += self.run_trial(trial, self.clock + elapsed)?;
            self.next_trial += 1;
        }
        Ok(elapsed)
    }

    fn run_trial(&mut self, trial: &Trial, t_start: f64) -> Result<f64, SimError> {
        let mut measures = std::collections::BTreeMap::new();
        let duration = match self.model {
            ParticipantModel::Responder(m) => {
                let gain = param_f64(trial, "gain")?;
                measures.insert("faster".to_string(), Scalar::Bool(m.respond(gain, &mut self.rng)));
                REACH_SECONDS
            }
            ParticipantModel::FixedResponder { faster } => {
                param_f64(trial, "gain")?;
                measures.insert("faster".to_string(), Scalar::Bool(*faster));
                REACH_SECONDS
            }
            ParticipantModel::Mover(m) => {
                let stimuli = self.stimuli.as_ref().expect("loaded for movers");
                let (targets, key) = match trial.phase {
                    Phase::Practice => (&stimuli.practice_targets, "practice_target"),
                    Phase::Main => (&stimuli.targets, "target"),
                };
                let idx = param_f64(trial, key)? as usize;
                let target = targets
                    .get(idx)
                    .ok_or_else(|| SimError::Config(format!("{key} {idx} has no geometry")))?;
                let features = fitts_features(target.origin, target.target, target.size)
                    .map_err(|e| SimError::Config(e.to_string()))?;
                let mt = m.movement_time(&features, &mut self.rng);
                let geometry = [
                    ("origin_x", target.origin[0]),
                    ("origin_y", target.origin[1]),
                    ("origin_z", target.origin[2]),
                    ("target_x", target.target[0]),
                    ("target_y", target.target[1]),
                    ("target_z", target.target[2]),
                    ("size", target.size),
                    ("movement_time_ms", mt),
                ];
                for (k, v) in geometry {
                    measures.insert(k.to_string(), Scalar::Number(v));
                }
                (mt / 1000.0).max(0.05)
            }
            ParticipantModel::Drummer(m) => {
                let avatar = match trial.params.get("condition") {
                    Some(Scalar::Text(c)) => c != "baseline",
                    _ => return Err(SimError::Config("drumming trial lacks `condition`".into())),
                };
                let seconds = self.timer_in_state().unwrap_or(DEFAULT_DRUM_SECONDS);
                self.drum(m, t_start, seconds, avatar)?;
                seconds
            }
        };
        self.client.ingest_trial(&TrialRecord {
            session_id: self.ticket.session_id.clone(),
            trial_index: trial.index,
            phase: trial.phase,
            params: trial.params.clone(),
            measures,
            t_start,
            t_end: t_start + duration,
        })?;
        self.trials += 1;
        Ok(duration)
    }

    fn drum(&mut self, m: &DrummerModel, t_start: f64, seconds: f64, avatar: bool) -> Result<(), SimError> {
        let rate = self.opts.tracking_rate_hz;
        let n = (seconds * rate).floor() as u64;
        let frames: Vec<TrackingFrame> = (0..n)
            .map(|k| {
                let t = t_start + k as f64 / rate;
                let frame = TrackingFrame {
                    session_id: self.ticket.session_id.clone(),
                    frame_index: self.frame_index,
                    t,
                    poses: m.poses(t, avatar, &mut self.rng),
                };
                self.frame_index += 1;
                frame
            })
            .collect();
        let ack = self.client.ingest_frames(&frames)?;
        self.frames += ack.stored;
        Ok(())
    }
}

fn param_f64(trial: &Trial, name: &str) -> Result<f64, SimError> {
    match trial.params.get(name) {
        Some(Scalar::Number(v)) => Ok(*v),
        other => Err(SimError::Config(format!(
            "trial {} has no numeric `{name}` (found {other:?})",
            trial.index
        ))),
    }
}
