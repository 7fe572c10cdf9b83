//! The experiment configuration document: one JSON file with `meta`,
//! `worlds`, `flow`, `factors`, `questionnaires` and optional `stimuli`.

use serde::{Deserialize, Serialize};

use crate::flow::{ActionSpec, FlowSpec};
use crate::questionnaire::QuestionnaireSpec;
use crate::trial::FactorConfig;

fn default_limit() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMeta {
    /// Stable slug; a random id is minted when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub prerequisites: String,
    #[serde(default)]
    pub reward_text: String,
    #[serde(default)]
    pub consent_text: String,
    #[serde(default)]
    pub vr_only: bool,
    #[serde(default = "default_limit")]
    pub participant_limit_per_instance: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_participants: Option<u64>,
    /// Hide from the board once `max_participants` is reached.
    #[serde(default)]
    pub auto_hide: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracking_rate_hz: Option<f64>,
    /// One trial order for every participant instead of a per-participant one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvatarAssignment {
    pub avatar_id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldDef {
    pub world_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avatar: Option<AvatarAssignment>,
    pub entry_flow_state: String,
    /// Only sessions assigned to this between-subject group may enter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub meta: ExperimentMeta,
    pub worlds: Vec<WorldDef>,
    pub flow: FlowSpec,
    #[serde(default)]
    pub factors: FactorConfig,
    #[serde(default)]
    pub questionnaires: Vec<QuestionnaireSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stimuli: Option<serde_json::Value>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Questionnaires a session must answer before completing: those declared
    /// in the document plus any the flow shows, in first-seen order.
    pub fn required_questionnaires(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        let shown = self.flow.listeners.iter().flat_map(|l| {
            l.on_enter.iter().chain(&l.during).chain(&l.on_exit)
        });
        let from_flow = shown.filter_map(|a| match a {
            ActionSpec::ShowQuestionnaire { questionnaire_id } => Some(questionnaire_id.clone()),
            _ => None,
        });
        for id in self.questionnaires.iter().map(|q| q.id.clone()).chain(from_flow) {
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        ids
    }

    pub fn world(&self, world_id: &str) -> Option<&WorldDef> {
        self.worlds.iter().find(|w| w.world_id == world_id)
    }

    /// Pointing targets declared under `stimuli.targets` and
    /// `stimuli.practice_targets`, if the document has them.
    pub fn pointing_targets(&self) -> Result<PointingStimuli, serde_json::Error> {
        match &self.stimuli {
            Some(v) => serde_json::from_value(v.clone()),
            None => Ok(PointingStimuli::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointingTarget {
    pub origin: [f64; 3],
    pub target: [f64; 3],
    pub size: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointingStimuli {
    #[serde(default)]
    pub targets: Vec<PointingTarget>,
    #[serde(default)]
    pub practice_targets: Vec<PointingTarget>,
}

/// The three replication experiments shipped with the platform.
pub mod bundled {
    use super::ExperimentConfig;

    pub const HAND_REDIRECTION: &str = include_str!("../configs/hand_redirection.json");
    pub const PROTEUS_DRUMMING: &str = include_str!("../configs/proteus_drumming.json");
    pub const FITTS_3D: &str = include_str!("../configs/fitts_3d.json");

    pub fn hand_redirection() -> ExperimentConfig {
        ExperimentConfig::from_json(HAND_REDIRECTION).expect("bundled config parses")
    }

    pub fn proteus_drumming() -> ExperimentConfig {
        ExperimentConfig::from_json(PROTEUS_DRUMMING).expect("bundled config parses")
    }

    pub fn fitts_3d() -> ExperimentConfig {
        ExperimentConfig::from_json(FITTS_3D).expect("bundled config parses")
    }

    pub fn all() -> Vec<ExperimentConfig> {
        vec![hand_redirection(), proteus_drumming(), fitts_3d()]
    }
}
