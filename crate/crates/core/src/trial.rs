//! Factorial trial generation and between-subject group assignment.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::Scalar;

pub type TrialParams = BTreeMap<String, Scalar>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Within,
    Between,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    #[default]
    Randomized,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<Scalar>,
    #[serde(default = "default_scope")]
    pub scope: Scope,
}

fn default_scope() -> Scope {
    Scope::Within
}

fn default_repetitions() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorConfig {
    #[serde(default)]
    pub factors: Vec<Factor>,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default)]
    pub order_mode: OrderMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub practice_block: Option<Vec<TrialParams>>,
}

impl Default for FactorConfig {
    fn default() -> Self {
        FactorConfig {
            factors: Vec::new(),
            repetitions: 1,
            order_mode: OrderMode::Randomized,
            practice_block: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Practice,
    Main,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: TrialParams,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub trials: Vec<Trial>,
    pub seed: u64,
}

impl TrialPlan {
    pub fn main_trials(&self) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(|t| t.phase == Phase::Main)
    }

    pub fn practice_trials(&self) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(|t| t.phase == Phase::Practice)
    }

    pub fn main_count(&self) -> usize {
        self.main_trials().count()
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrialError {
    #[error("factor `{0}` has no levels")]
    EmptyLevels(String),
    #[error("repetitions must be at least 1")]
    ZeroRepetitions,
    #[error("factor `{0}` is declared more than once")]
    DuplicateFactor(String),
    #[error("factor `{0}` mixes level types")]
    MixedLevelTypes(String),
    #[error("configuration declares no between-subject factors")]
    NoBetweenFactors,
    #[error("group counts do not match the configured between-subject groups")]
    GroupMismatch,
}

impl FactorConfig {
    pub fn validate(&self) -> Result<(), TrialError> {
        if self.repetitions == 0 {
            return Err(TrialError::ZeroRepetitions);
        }
        let mut seen = HashSet::new();
        for f in &self.factors {
            if !seen.insert(f.name.as_str()) {
                return Err(TrialError::DuplicateFactor(f.name.clone()));
            }
            let Some(first) = f.levels.first() else {
                return Err(TrialError::EmptyLevels(f.name.clone()));
            };
            if f.levels.iter().any(|l| l.kind() != first.kind()) {
                return Err(TrialError::MixedLevelTypes(f.name.clone()));
            }
        }
        Ok(())
    }

    pub fn within(&self) -> impl Iterator<Item = &Factor> {
        self.factors.iter().filter(|f| f.scope == Scope::Within)
    }

    pub fn between(&self) -> impl Iterator<Item = &Factor> {
        self.factors.iter().filter(|f| f.scope == Scope::Between)
    }

    pub fn has_between(&self) -> bool {
        self.between().next().is_some()
    }

    /// Number of main trials a plan for this configuration contains.
    pub fn main_trial_count(&self) -> usize {
        self.within().map(|f| f.levels.len()).product::<usize>() * self.repetitions as usize
    }

    /// Between-subject groups in declaration order, with labels.
    pub fn groups(&self) -> Vec<(String, TrialParams)> {
        let between: Vec<&Factor> = self.between().collect();
        if between.is_empty() {
            return Vec::new();
        }
        cartesian(&between)
            .into_iter()
            .map(|params| {
                let label = between
                    .iter()
                    .map(|f| params[&f.name].to_string())
                    .collect::<Vec<_>>()
                    .join("/");
                (label, params)
            })
            .collect()
    }
}

/// Lexicographic product; the first factor varies slowest.
fn cartesian(factors: &[&Factor]) -> Vec<TrialParams> {
    let mut out = vec![TrialParams::new()];
    for f in factors {
        let mut next = Vec::with_capacity(out.len() * f.levels.len());
        for prefix in &out {
            for level in &f.levels {
                let mut p = prefix.clone();
                p.insert(f.name.clone(), level.clone());
                next.push(p);
            }
        }
        out = next;
    }
    out
}

/// Expands a factor configuration into an ordered trial plan.
///
/// Practice trials are prepended verbatim. The main block is the within-factor
/// product repeated `repetitions` times, shuffled with a seeded Fisher-Yates
/// pass when the order is randomized.
pub fn generate_trials(config: &FactorConfig, seed: u64) -> Result<TrialPlan, TrialError> {
    config.validate()?;
    let within: Vec<&Factor> = config.within().collect();
    let combos = cartesian(&within);

    let mut main = Vec::with_capacity(combos.len() * config.repetitions as usize);
    for _ in 0..config.repetitions {
        main.extend(combos.iter().cloned());
    }
    if config.order_mode == OrderMode::Randomized {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        main.shuffle(&mut rng);
    }

    let practice = config.practice_block.as_deref().unwrap_or_default();
    let trials = practice
        .iter()
        .map(|p| (p.clone(), Phase::Practice))
        .chain(main.into_iter().map(|p| (p, Phase::Main)))
        .enumerate()
        .map(|(index, (params, phase))| Trial {
            index,
            params,
            phase,
        })
        .collect();
    Ok(TrialPlan { trials, seed })
}

/// Running per-group assignment counts for a between-subject design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCounts {
    groups: Vec<(String, u64)>,
}

impl GroupCounts {
    pub fn new(config: &FactorConfig) -> Self {
        GroupCounts {
            groups: config.groups().into_iter().map(|(l, _)| (l, 0)).collect(),
        }
    }

    /// Starts from existing counts, in group declaration order.
    pub fn with_counts(config: &FactorConfig, counts: &[u64]) -> Result<Self, TrialError> {
        let groups = config.groups();
        if groups.len() != counts.len() {
            return Err(TrialError::GroupMismatch);
        }
        Ok(GroupCounts {
            groups: groups
                .into_iter()
                .zip(counts)
                .map(|((l, _), &c)| (l, c))
                .collect(),
        })
    }

    pub fn count(&self, label: &str) -> Option<u64> {
        self.groups.iter().find(|(l, _)| l == label).map(|(_, c)| *c)
    }

    pub fn counts(&self) -> impl Iterator<Item = (&str, u64)> {
        self.groups.iter().map(|(l, c)| (l.as_str(), *c))
    }

    pub fn total(&self) -> u64 {
        self.groups.iter().map(|(_, c)| c).sum()
    }
}

/// Balanced assignment: the least-filled group wins, ties go to the group
/// declared first. The chosen group's count is incremented.
pub fn assign_between_group(
    config: &FactorConfig,
    counts: &mut GroupCounts,
) -> Result<String, TrialError> {
    if !config.has_between() {
        return Err(TrialError::NoBetweenFactors);
    }
    let slot = counts
        .groups
        .iter_mut()
        .enumerate()
        .min_by_key(|(i, (_, c))| (*c, *i))
        .map(|(_, g)| g)
        .ok_or(TrialError::GroupMismatch)?;
    slot.1 += 1;
    Ok(slot.0.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num_levels(xs: &[f64]) -> Vec<Scalar> {
        xs.iter().map(|&x| Scalar::Number(x)).collect()
    }

    fn gain_config() -> FactorConfig {
        let gains = [0.75, 0.8, 0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15, 1.2, 1.25];
        FactorConfig {
            factors: vec![Factor {
                name: "gain".into(),
                levels: num_levels(&gains),
                scope: Scope::Within,
            }],
            repetitions: 2,
            order_mode: OrderMode::Randomized,
            practice_block: Some(
                [0.0, 1.25, 0.75]
                    .iter()
                    .map(|&g| TrialParams::from([("gain".to_string(), Scalar::Number(g))]))
                    .collect(),
            ),
        }
    }

    fn proteus_config() -> FactorConfig {
        FactorConfig {
            factors: vec![
                Factor {
                    name: "condition".into(),
                    levels: vec!["baseline".into(), "avatar".into()],
                    scope: Scope::Within,
                },
                Factor {
                    name: "avatar".into(),
                    levels: vec!["CD".into(), "FL".into()],
                    scope: Scope::Between,
                },
            ],
            repetitions: 1,
            order_mode: OrderMode::Fixed,
            practice_block: None,
        }
    }

    #[test]
    fn hand_redirection_plan() {
        let plan = generate_trials(&gain_config(), 7).unwrap();
        assert_eq!(plan.len(), 25);
        let practice: Vec<f64> = plan
            .practice_trials()
            .map(|t| t.params["gain"].as_f64().unwrap())
            .collect();
        assert_eq!(practice, vec![0.0, 1.25, 0.75]);
        assert_eq!(plan.main_count(), 22);
        for g in [0.75, 0.8, 0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15, 1.2, 1.25] {
            let n = plan
                .main_trials()
                .filter(|t| t.params["gain"].as_f64() == Some(g))
                .count();
            assert_eq!(n, 2, "gain {g}");
        }
        assert!(plan.trials.iter().enumerate().all(|(i, t)| t.index == i));
    }

    #[test]
    fn empty_product_is_one_trial() {
        let plan = generate_trials(&FactorConfig::default(), 0).unwrap();
        assert_eq!(plan.len(), 1);
        assert!(plan.trials[0].params.is_empty());
    }

    #[test]
    fn fixed_order_is_cartesian_product() {
        let config = FactorConfig {
            factors: vec![
                Factor {
                    name: "size".into(),
                    levels: vec!["s".into(), "l".into()],
                    scope: Scope::Within,
                },
                Factor {
                    name: "depth".into(),
                    levels: num_levels(&[1.0, 2.0, 3.0]),
                    scope: Scope::Within,
                },
            ],
            repetitions: 1,
            order_mode: OrderMode::Fixed,
            practice_block: None,
        };
        let plan = generate_trials(&config, 99).unwrap();
        let got: Vec<(String, f64)> = plan
            .trials
            .iter()
            .map(|t| {
                (
                    t.params["size"].to_string(),
                    t.params["depth"].as_f64().unwrap(),
                )
            })
            .collect();
        let expected = vec![
            ("s".to_string(), 1.0),
            ("s".to_string(), 2.0),
            ("s".to_string(), 3.0),
            ("l".to_string(), 1.0),
            ("l".to_string(), 2.0),
            ("l".to_string(), 3.0),
        ];
        assert_eq!(got, expected);
    }

    #[test]
    fn config_errors() {
        let mut c = gain_config();
        c.repetitions = 0;
        assert_eq!(generate_trials(&c, 0), Err(TrialError::ZeroRepetitions));

        let mut c = gain_config();
        c.factors[0].levels.clear();
        assert_eq!(
            generate_trials(&c, 0),
            Err(TrialError::EmptyLevels("gain".into()))
        );

        let mut c = gain_config();
        c.factors[0].levels.push("fast".into());
        assert_eq!(
            generate_trials(&c, 0),
            Err(TrialError::MixedLevelTypes("gain".into()))
        );

        let mut c = gain_config();
        let dup = c.factors[0].clone();
        c.factors.push(dup);
        assert_eq!(
            generate_trials(&c, 0),
            Err(TrialError::DuplicateFactor("gain".into()))
        );
    }

    #[test]
    fn between_factors_stay_out_of_trial_params() {
        let plan = generate_trials(&proteus_config(), 1).unwrap();
        assert_eq!(plan.len(), 2);
        assert!(plan.trials.iter().all(|t| !t.params.contains_key("avatar")));
        assert_eq!(plan.trials[0].params["condition"], Scalar::from("baseline"));
    }

    #[test]
    fn balanced_assignment_from_empty() {
        let config = proteus_config();
        let mut counts = GroupCounts::new(&config);
        assert_eq!(assign_between_group(&config, &mut counts).unwrap(), "CD");
        assert_eq!(assign_between_group(&config, &mut counts).unwrap(), "FL");
    }

    #[test]
    fn assignment_fills_smaller_group() {
        let config = proteus_config();
        let mut counts = GroupCounts::with_counts(&config, &[80, 78]).unwrap();
        assert_eq!(assign_between_group(&config, &mut counts).unwrap(), "FL");
        assert_eq!(counts.count("FL"), Some(79));
    }

    #[test]
    fn ten_more_assignments_from_five_each() {
        let config = proteus_config();
        let mut counts = GroupCounts::with_counts(&config, &[5, 5]).unwrap();
        // oracle: simulate the min-count loop by hand on plain integers
        let mut oracle = [5u64, 5];
        for _ in 0..10 {
            let i = if oracle[1] < oracle[0] { 1 } else { 0 };
            oracle[i] += 1;
            assign_between_group(&config, &mut counts).unwrap();
        }
        assert_eq!(oracle, [10, 10]);
        assert_eq!(counts.count("CD"), Some(10));
        assert_eq!(counts.count("FL"), Some(10));
    }

    #[test]
    fn within_only_design_rejects_assignment() {
        let config = gain_config();
        let mut counts = GroupCounts::new(&config);
        assert_eq!(
            assign_between_group(&config, &mut counts),
            Err(TrialError::NoBetweenFactors)
        );
    }
}
