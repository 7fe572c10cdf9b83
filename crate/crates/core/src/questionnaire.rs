//! Questionnaire registry: researchers declare items once, sessions render
//! them by id and submit validated responses.

use std::collections::HashMap;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_FREE_TEXT_LEN: usize = 2000;

fn default_free_text_len() -> usize {
    DEFAULT_FREE_TEXT_LEN
}

fn default_required() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ItemFormat {
    Likert {
        min: i64,
        max: i64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        anchors: Option<Vec<String>>,
    },
    MultipleChoice {
        options: Vec<String>,
    },
    FreeText {
        #[serde(default = "default_free_text_len")]
        max_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionItem {
    pub prompt: String,
    pub format: ItemFormat,
    #[serde(default = "default_required")]
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionnaireSpec {
    pub id: String,
    pub title: String,
    pub items: Vec<QuestionItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Answer {
    Likert(i64),
    Choice(String),
    Text(String),
    Skipped,
}

impl Answer {
    pub fn kind(&self) -> &'static str {
        match self {
            Answer::Likert(_) => "likert",
            Answer::Choice(_) => "choice",
            Answer::Text(_) => "text",
            Answer::Skipped => "skipped",
        }
    }

    pub fn value_cell(&self) -> String {
        match self {
            Answer::Likert(v) => v.to_string(),
            Answer::Choice(s) | Answer::Text(s) => s.clone(),
            Answer::Skipped => String::new(),
        }
    }

    pub fn from_cells(kind: &str, value: &str) -> Option<Answer> {
        Some(match kind {
            "likert" => Answer::Likert(value.parse().ok()?),
            "choice" => Answer::Choice(value.to_string()),
            "text" => Answer::Text(value.to_string()),
            "skipped" => Answer::Skipped,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSet {
    pub session_id: String,
    pub questionnaire_id: String,
    #[serde(default)]
    pub version: u32,
    pub answers: Vec<Answer>,
    pub submitted_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedItem {
    pub questionnaire_id: String,
    pub version: u32,
    pub session_id: String,
    pub position: usize,
    pub prompt: String,
    pub format: ItemFormat,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QuestionnaireError {
    #[error("questionnaire `{0}` has no items")]
    NoItems(String),
    #[error("item {item}: likert min must be below max")]
    BadLikertRange { item: usize },
    #[error("item {item}: multiple choice needs at least two options")]
    TooFewOptions { item: usize },
    #[error("questionnaire id must not be empty")]
    EmptyId,
    #[error("questionnaire `{0}` already exists")]
    Conflict(String),
    #[error("questionnaire `{0}` not found")]
    NotFound(String),
    #[error("expected {expected} answers, got {got}")]
    AnswerCount { expected: usize, got: usize },
    #[error("item {item}: answer {value} outside {min}..={max}")]
    OutOfRange {
        item: usize,
        value: i64,
        min: i64,
        max: i64,
    },
    #[error("item {item}: `{value}` is not one of the options")]
    UnknownOption { item: usize, value: String },
    #[error("item {item}: text longer than {max_len} characters")]
    TooLong { item: usize, max_len: usize },
    #[error("item {item}: required answer missing")]
    MissingRequired { item: usize },
    #[error("item {item}: answer type does not match the item format")]
    TypeMismatch { item: usize },
    #[error("questionnaire `{id}` has no version {version}")]
    UnknownVersion { id: String, version: u32 },
}

impl QuestionnaireSpec {
    pub fn validate(&self) -> Result<(), QuestionnaireError> {
        if self.id.trim().is_empty() {
            return Err(QuestionnaireError::EmptyId);
        }
        if self.items.is_empty() {
            return Err(QuestionnaireError::NoItems(self.id.clone()));
        }
        for (item, q) in self.items.iter().enumerate() {
            match &q.format {
                ItemFormat::Likert { min, max, .. } if min >= max => {
                    return Err(QuestionnaireError::BadLikertRange { item })
                }
                ItemFormat::MultipleChoice { options } if options.len() < 2 => {
                    return Err(QuestionnaireError::TooFewOptions { item })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Checks each answer against its item.
    pub fn check_answers(&self, answers: &[Answer]) -> Result<(), QuestionnaireError> {
        if answers.len() != self.items.len() {
            return Err(QuestionnaireError::AnswerCount {
                expected: self.items.len(),
                got: answers.len(),
            });
        }
        for (item, (q, a)) in self.items.iter().zip(answers).enumerate() {
            match (&q.format, a) {
                (_, Answer::Skipped) if q.required => {
                    return Err(QuestionnaireError::MissingRequired { item })
                }
                (_, Answer::Skipped) => {}
                (ItemFormat::Likert { min, max, .. }, Answer::Likert(v)) => {
                    if v < min || v > max {
                        return Err(QuestionnaireError::OutOfRange {
                            item,
                            value: *v,
                            min: *min,
                            max: *max,
                        });
                    }
                }
                (ItemFormat::MultipleChoice { options }, Answer::Choice(c)) => {
                    if !options.contains(c) {
                        return Err(QuestionnaireError::UnknownOption {
                            item,
                            value: c.clone(),
                        });
                    }
                }
                (ItemFormat::FreeText { max_len }, Answer::Text(t)) => {
                    if t.chars().count() > *max_len {
                        return Err(QuestionnaireError::TooLong {
                            item,
                            max_len: *max_len,
                        });
                    }
                }
                _ => return Err(QuestionnaireError::TypeMismatch { item }),
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Version {
    spec: QuestionnaireSpec,
    responses: u64,
}

/// Versioned questionnaire store. Versions start at 1; a revision after the
/// first response creates a new version, otherwise it replaces in place.
#[derive(Debug, Default)]
pub struct QuestionnaireRegistry {
    entries: RwLock<HashMap<String, Vec<Version>>>,
    order: RwLock<Vec<String>>,
}

impl QuestionnaireRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, spec: QuestionnaireSpec) -> Result<String, QuestionnaireError> {
        spec.validate()?;
        let mut entries = self.entries.write();
        if entries.contains_key(&spec.id) {
            return Err(QuestionnaireError::Conflict(spec.id));
        }
        let id = spec.id.clone();
        entries.insert(id.clone(), vec![Version { spec, responses: 0 }]);
        self.order.write().push(id.clone());
        Ok(id)
    }

    /// Registers `spec` unless an identical latest version already exists.
    pub fn ensure(&self, spec: QuestionnaireSpec) -> Result<String, QuestionnaireError> {
        if let Some(existing) = self.get(&spec.id) {
            return if existing == spec {
                Ok(spec.id)
            } else {
                Err(QuestionnaireError::Conflict(spec.id))
            };
        }
        self.register(spec)
    }

    /// Edits a questionnaire, returning the version now current.
    pub fn revise(&self, spec: QuestionnaireSpec) -> Result<u32, QuestionnaireError> {
        spec.validate()?;
        let mut entries = self.entries.write();
        let versions = entries
            .get_mut(&spec.id)
            .ok_or_else(|| QuestionnaireError::NotFound(spec.id.clone()))?;
        let latest = versions.last_mut().expect("at least one version");
        if latest.responses == 0 {
            latest.spec = spec;
        } else {
            versions.push(Version { spec, responses: 0 });
        }
        Ok(versions.len() as u32)
    }

    pub fn get(&self, id: &str) -> Option<QuestionnaireSpec> {
        self.entries
            .read()
            .get(id)
            .and_then(|v| v.last())
            .map(|v| v.spec.clone())
    }

    pub fn current_version(&self, id: &str) -> Option<u32> {
        self.entries.read().get(id).map(|v| v.len() as u32)
    }

    pub fn list(&self) -> Vec<QuestionnaireSpec> {
        let entries = self.entries.read();
        self.order
            .read()
            .iter()
            .filter_map(|id| entries.get(id).and_then(|v| v.last()))
            .map(|v| v.spec.clone())
            .collect()
    }

    pub fn instantiate(
        &self,
        questionnaire_id: &str,
        session_id: &str,
    ) -> Result<Vec<RenderedItem>, QuestionnaireError> {
        let entries = self.entries.read();
        let versions = entries
            .get(questionnaire_id)
            .ok_or_else(|| QuestionnaireError::NotFound(questionnaire_id.to_string()))?;
        let version = versions.len() as u32;
        let spec = &versions.last().expect("at least one version").spec;
        Ok(spec
            .items
            .iter()
            .enumerate()
            .map(|(position, item)| RenderedItem {
                questionnaire_id: spec.id.clone(),
                version,
                session_id: session_id.to_string(),
                position,
                prompt: item.prompt.clone(),
                format: item.format.clone(),
                required: item.required,
            })
            .collect())
    }

    /// Validates a response set against the version it names (0 means the
    /// current version) and pins the version on the returned set.
    pub fn validate_response(&self, resp: &ResponseSet) -> Result<ResponseSet, QuestionnaireError> {
        let entries = self.entries.read();
        let versions = entries
            .get(&resp.questionnaire_id)
            .ok_or_else(|| QuestionnaireError::NotFound(resp.questionnaire_id.clone()))?;
        let version = if resp.version == 0 {
            versions.len() as u32
        } else {
            resp.version
        };
        let spec = &versions
            .get(version as usize - 1)
            .ok_or_else(|| QuestionnaireError::UnknownVersion {
                id: resp.questionnaire_id.clone(),
                version,
            })?
            .spec;
        spec.check_answers(&resp.answers)?;
        Ok(ResponseSet {
            version,
            ..resp.clone()
        })
    }

    /// Counts a stored response against its version, freezing it.
    pub fn record_response(&self, id: &str, version: u32) {
        if let Some(v) = self
            .entries
            .write()
            .get_mut(id)
            .and_then(|v| v.get_mut(version as usize - 1))
        {
            v.responses += 1;
        }
    }
}

/// Flow event emitted when a questionnaire is submitted.
pub fn done_event(questionnaire_id: &str) -> String {
    format!("questionnaire_done:{questionnaire_id}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn likert(prompt: &str) -> QuestionItem {
        QuestionItem {
            prompt: prompt.into(),
            format: ItemFormat::Likert {
                min: 1,
                max: 7,
                anchors: None,
            },
            required: true,
        }
    }

    fn embodiment() -> QuestionnaireSpec {
        QuestionnaireSpec {
            id: "embodiment".into(),
            title: "Sense of embodiment".into(),
            items: vec![
                likert("The virtual hand felt like my own."),
                likert("I felt in control of the virtual hand."),
                likert("I felt present in the virtual room."),
            ],
        }
    }

    fn response(answers: Vec<Answer>) -> ResponseSet {
        ResponseSet {
            session_id: "s1".into(),
            questionnaire_id: "embodiment".into(),
            version: 0,
            answers,
            submitted_at: 12.0,
        }
    }

    #[test]
    fn register_and_conflict() {
        let reg = QuestionnaireRegistry::new();
        assert_eq!(reg.register(embodiment()).unwrap(), "embodiment");
        assert_eq!(
            reg.register(embodiment()),
            Err(QuestionnaireError::Conflict("embodiment".into()))
        );
        assert_eq!(reg.ensure(embodiment()).unwrap(), "embodiment");
    }

    #[test]
    fn zero_items_rejected() {
        let reg = QuestionnaireRegistry::new();
        let mut spec = embodiment();
        spec.items.clear();
        assert_eq!(
            reg.register(spec),
            Err(QuestionnaireError::NoItems("embodiment".into()))
        );
    }

    #[test]
    fn render_in_declared_order() {
        let reg = QuestionnaireRegistry::new();
        reg.register(embodiment()).unwrap();
        let items = reg.instantiate("embodiment", "s1").unwrap();
        assert_eq!(items.len(), 3);
        for (i, it) in items.iter().enumerate() {
            assert_eq!(it.position, i);
            assert_eq!(it.prompt, embodiment().items[i].prompt);
            assert_eq!(it.session_id, "s1");
        }
        assert_eq!(
            reg.instantiate("zzz", "s1"),
            Err(QuestionnaireError::NotFound("zzz".into()))
        );
    }

    #[test]
    fn likert_out_of_range() {
        let reg = QuestionnaireRegistry::new();
        reg.register(embodiment()).unwrap();
        let err = reg
            .validate_response(&response(vec![
                Answer::Likert(8),
                Answer::Likert(1),
                Answer::Likert(1),
            ]))
            .unwrap_err();
        assert!(matches!(err, QuestionnaireError::OutOfRange { value: 8, .. }));
    }

    #[test]
    fn missing_required_and_type_mismatch() {
        let reg = QuestionnaireRegistry::new();
        reg.register(embodiment()).unwrap();
        let skipped = response(vec![Answer::Skipped, Answer::Likert(1), Answer::Likert(1)]);
        assert_eq!(
            reg.validate_response(&skipped),
            Err(QuestionnaireError::MissingRequired { item: 0 })
        );
        let wrong = response(vec![
            Answer::Text("x".into()),
            Answer::Likert(1),
            Answer::Likert(1),
        ]);
        assert_eq!(
            reg.validate_response(&wrong),
            Err(QuestionnaireError::TypeMismatch { item: 0 })
        );
    }

    #[test]
    fn revision_after_response_creates_version() {
        let reg = QuestionnaireRegistry::new();
        reg.register(embodiment()).unwrap();
        let mut edited = embodiment();
        edited.title = "Embodiment (typo fixed)".into();
        assert_eq!(reg.revise(edited.clone()).unwrap(), 1);

        let ok = reg
            .validate_response(&response(vec![Answer::Likert(4); 3]))
            .unwrap();
        assert_eq!(ok.version, 1);
        reg.record_response("embodiment", 1);

        edited.items.push(likert("extra"));
        assert_eq!(reg.revise(edited).unwrap(), 2);
        // old responses still validate against their own version
        let mut old = response(vec![Answer::Likert(4); 3]);
        old.version = 1;
        assert!(reg.validate_response(&old).is_ok());
        assert_eq!(reg.instantiate("embodiment", "s2").unwrap().len(), 4);
    }

    #[test]
    fn free_text_default_length() {
        let item: QuestionItem =
            serde_json::from_str(r#"{"prompt":"Comments","format":{"type":"free_text"},"required":false}"#)
                .unwrap();
        assert_eq!(
            item.format,
            ItemFormat::FreeText {
                max_len: DEFAULT_FREE_TEXT_LEN
            }
        );
    }
}
