//! Dramaturgical framing: extraction of a structured profile from free text,
//! and the clarification dialogue that fills in what extraction left open.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::model::Millis;
use crate::provider::{
    fill_template, LanguageModelProvider, ProviderError, ProviderRequest, ReplyContract,
    CLARIFICATION_TEMPLATE, EXTRACTION_TEMPLATE, FORMAT_REMINDER,
};

pub const CONTEXT_HEADER: &str = "[DRAMATURGICAL CONTEXT]";
pub const MAX_QUESTIONS: usize = 3;
const UNRESOLVED: &str = "(awaiting clarification)";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DramaturgyError {
    #[error("framing text is empty")]
    EmptyFraming,
    #[error("clarification answer is empty")]
    EmptyAnswer,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("could not extract a profile from the provider reply: {reason}")]
    Extraction { reason: String, raw: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Light,
    Sound,
    Motion,
}

impl Modality {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "light" => Some(Modality::Light),
            "sound" => Some(Modality::Sound),
            "motion" => Some(Modality::Motion),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Light => "light",
            Modality::Sound => "sound",
            Modality::Motion => "motion",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileField {
    Intention,
    Affect,
    Metaphor,
    PrimaryModality,
    ReactionPattern,
}

impl ProfileField {
    pub const ALL: [ProfileField; 5] = [
        ProfileField::Intention,
        ProfileField::Affect,
        ProfileField::Metaphor,
        ProfileField::PrimaryModality,
        ProfileField::ReactionPattern,
    ];

    pub fn key(self) -> &'static str {
        match self {
            ProfileField::Intention => "intention",
            ProfileField::Affect => "affect",
            ProfileField::Metaphor => "metaphor",
            ProfileField::PrimaryModality => "primary_modality",
            ProfileField::ReactionPattern => "reaction_pattern",
        }
    }

    fn label(self) -> &'static str {
        match self {
            ProfileField::Intention => "intention",
            ProfileField::Affect => "affect",
            ProfileField::Metaphor => "metaphor",
            ProfileField::PrimaryModality => "primary modality",
            ProfileField::ReactionPattern => "reaction pattern",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.key() == key)
    }

    fn default_question(self) -> String {
        match self {
            ProfileField::Intention => "What should the room be trying to do?".into(),
            ProfileField::Affect => "What emotional tone should the room carry?".into(),
            ProfileField::Metaphor => "Is there an image or metaphor for how the space behaves?".into(),
            ProfileField::PrimaryModality => {
                "Should the room express itself mainly through light, sound, or motion?".into()
            }
            ProfileField::ReactionPattern => "How should the room react when activity rises?".into(),
        }
    }
}

/// Structured reading of a framing text. Fields the provider could not
/// derive stay `None` until a clarification fills them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DramaturgicalProfile {
    pub intention: Option<String>,
    pub affect: Option<String>,
    pub metaphor: Option<String>,
    pub primary_modality: Option<Modality>,
    pub reaction_pattern: Option<String>,
    pub source_text: String,
    pub created_at: Millis,
}

impl DramaturgicalProfile {
    pub fn is_complete(&self) -> bool {
        non_empty(&self.intention)
            && non_empty(&self.affect)
            && non_empty(&self.reaction_pattern)
            && self.primary_modality.is_some()
    }

    pub fn missing_fields(&self) -> Vec<ProfileField> {
        ProfileField::ALL
            .into_iter()
            .filter(|f| self.field_text(*f).is_none())
            .collect()
    }

    pub fn field_text(&self, field: ProfileField) -> Option<String> {
        match field {
            ProfileField::Intention => self.intention.clone(),
            ProfileField::Affect => self.affect.clone(),
            ProfileField::Metaphor => self.metaphor.clone(),
            ProfileField::PrimaryModality => self.primary_modality.map(|m| m.to_string()),
            ProfileField::ReactionPattern => self.reaction_pattern.clone(),
        }
    }

    fn set_field(&mut self, field: ProfileField, value: &str) -> Result<(), String> {
        let text = value.trim();
        if text.is_empty() {
            return Err(format!("empty value for {}", field.key()));
        }
        match field {
            ProfileField::Intention => self.intention = Some(text.into()),
            ProfileField::Affect => self.affect = Some(text.into()),
            ProfileField::Metaphor => self.metaphor = Some(text.into()),
            ProfileField::ReactionPattern => self.reaction_pattern = Some(text.into()),
            ProfileField::PrimaryModality => {
                self.primary_modality = Some(
                    Modality::parse(text).ok_or_else(|| format!("`{text}` is not a modality"))?,
                )
            }
        }
        Ok(())
    }
}

fn non_empty(v: &Option<String>) -> bool {
    v.as_deref().is_some_and(|s| !s.trim().is_empty())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClarificationQuestion {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    /// The single profile field an answer may change.
    pub field: ProfileField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRevision {
    pub question_id: String,
    pub field: ProfileField,
    pub previous: Option<String>,
    pub value: String,
    pub answer: String,
}

fn ask_json(
    provider: &dyn LanguageModelProvider,
    request: ProviderRequest,
) -> Result<Map<String, Value>, DramaturgyError> {
    let first = provider.complete(&request)?;
    if let Some(obj) = parse_object(&first) {
        return Ok(obj);
    }
    let retry = ProviderRequest {
        system: format!("{}\n\n{}", request.system, FORMAT_REMINDER),
        ..request
    };
    let second = provider.complete(&retry)?;
    parse_object(&second).ok_or(DramaturgyError::Extraction {
        reason: "reply is not a single JSON object".into(),
        raw: second,
    })
}

/// Parses a single JSON object, tolerating surrounding whitespace and a
/// fenced code block.
pub(crate) fn parse_object(raw: &str) -> Option<Map<String, Value>> {
    let mut text = raw.trim();
    if let Some(rest) = text.strip_prefix("```") {
        let rest = rest.strip_prefix("json").unwrap_or(rest);
        text = rest.strip_suffix("```")?.trim();
    }
    match serde_json::from_str::<Value>(text).ok()? {
        Value::Object(o) => Some(o),
        _ => None,
    }
}

fn string_field(obj: &Map<String, Value>, key: &str) -> Option<String> {
    obj.get(key)
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

/// Extracts a profile from framing text. Missing or unusable fields become
/// clarification questions (at most three), never invented values.
pub fn interpret_framing(
    text: &str,
    provider: &dyn LanguageModelProvider,
    now: Millis,
) -> Result<(DramaturgicalProfile, Vec<ClarificationQuestion>), DramaturgyError> {
    if text.trim().is_empty() {
        return Err(DramaturgyError::EmptyFraming);
    }
    let request = ProviderRequest {
        contract: ReplyContract::Extraction,
        system: fill_template(EXTRACTION_TEMPLATE, &[("FRAMING", text.trim())]),
        user: text.trim().to_string(),
    };
    let obj = ask_json(provider, request)?;

    let profile = DramaturgicalProfile {
        intention: string_field(&obj, "intention"),
        affect: string_field(&obj, "affect"),
        metaphor: string_field(&obj, "metaphor"),
        primary_modality: string_field(&obj, "primary_modality").and_then(|s| Modality::parse(&s)),
        reaction_pattern: string_field(&obj, "reaction_pattern"),
        source_text: text.to_string(),
        created_at: now,
    };

    let mut questions: Vec<(ProfileField, String, Option<Vec<String>>)> = profile
        .missing_fields()
        .into_iter()
        .map(|f| (f, f.default_question(), None))
        .collect();
    if let Some(Value::Array(items)) = obj.get("questions") {
        for item in items {
            let q = match item {
                Value::String(s) if !s.trim().is_empty() => {
                    Some((ProfileField::ReactionPattern, s.trim().to_string(), None))
                }
                Value::Object(o) => string_field(o, "text").map(|t| {
                    let field = string_field(o, "field")
                        .and_then(|f| ProfileField::from_key(&f))
                        .unwrap_or(ProfileField::ReactionPattern);
                    let options = o.get("options").and_then(Value::as_array).map(|a| {
                        a.iter()
                            .filter_map(Value::as_str)
                            .map(str::to_string)
                            .collect()
                    });
                    (field, t, options)
                }),
                _ => None,
            };
            if let Some(q) = q {
                if !questions.iter().any(|(f, _, _)| *f == q.0) {
                    questions.push(q);
                }
            }
        }
    }
    let questions = questions
        .into_iter()
        .take(MAX_QUESTIONS)
        .enumerate()
        .map(|(i, (field, text, options))| ClarificationQuestion {
            id: format!("q{}", i + 1),
            text,
            options,
            field,
        })
        .collect();
    Ok((profile, questions))
}

/// Merges a director's answer into the field the question targets.
pub fn apply_clarification(
    profile: &DramaturgicalProfile,
    question: &ClarificationQuestion,
    answer: &str,
    provider: &dyn LanguageModelProvider,
) -> Result<(DramaturgicalProfile, ProfileRevision), DramaturgyError> {
    if answer.trim().is_empty() {
        return Err(DramaturgyError::EmptyAnswer);
    }
    let key = question.field.key();
    let profile_json = serde_json::to_string_pretty(profile).expect("profile serializes");
    let request = ProviderRequest {
        contract: ReplyContract::Clarification,
        system: fill_template(
            CLARIFICATION_TEMPLATE,
            &[
                ("FIELD", key),
                ("PROFILE", &profile_json),
                ("QUESTION", &question.text),
                ("ANSWER", answer.trim()),
            ],
        ),
        user: json!({"field": key, "question": question.text, "answer": answer.trim()}).to_string(),
    };
    let obj = ask_json(provider, request)?;
    let value = string_field(&obj, key).ok_or_else(|| DramaturgyError::Extraction {
        reason: format!("reply has no `{key}` string"),
        raw: Value::Object(obj.clone()).to_string(),
    })?;
    let mut next = profile.clone();
    next.set_field(question.field, &value)
        .map_err(|reason| DramaturgyError::Extraction {
            reason,
            raw: Value::Object(obj.clone()).to_string(),
        })?;
    let revision = ProfileRevision {
        question_id: question.id.clone(),
        field: question.field,
        previous: profile.field_text(question.field),
        value,
        answer: answer.trim().to_string(),
    };
    Ok((next, revision))
}

pub fn render_context_section(profile: &DramaturgicalProfile) -> String {
    let mut lines = vec![CONTEXT_HEADER.to_string(), profile.source_text.trim().to_string()];
    for field in ProfileField::ALL {
        let value = profile.field_text(field).unwrap_or_else(|| UNRESOLVED.to_string());
        lines.push(format!("- {}: {}", field.label(), value));
    }
    lines.join("\n")
}

/// Context block used before any framing has been given.
pub fn render_unframed_context() -> String {
    format!("{CONTEXT_HEADER}\n- (no framing)")
}
