//! Rehearsal memory: a short-term ring of recent exchanges, weighted
//! pattern candidates, a long-term store of distilled notes, and
//! consolidation of all of it into the score prompt.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::director::{
    color_bucket, describe_rules_section, ActuationTarget, Constraint, DirectorialRule, NamedColor,
    ProposedAction,
};
use crate::dramaturgy::{parse_object, render_context_section, render_unframed_context, DramaturgicalProfile};
use crate::model::{Millis, Zone};
use crate::provider::{fill_template, LanguageModelProvider, ProviderRequest, ReplyContract, SUMMARY_TEMPLATE};

pub const NOTES_HEADER: &str = "[DISTILLED NOTES]";
pub const NO_NOTES: &str = "- (no distilled notes)";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("exchange `{0}` already recorded")]
    DuplicateExchange(String),
    #[error("unknown exchange `{0}`")]
    UnknownExchange(String),
    #[error("invalid memory parameters: {0}")]
    InvalidParams(String),
    #[error("reasoning may only be empty for rule-driven exchanges")]
    MissingReasoning,
    #[error("memory storage: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryParams {
    pub short_term_size: usize,
    pub promote_weight: f64,
    pub promote_recurrence: u32,
    pub drop_weight: f64,
    pub top_notes: usize,
}

impl Default for MemoryParams {
    fn default() -> Self {
        Self {
            short_term_size: 20,
            promote_weight: 2.0,
            promote_recurrence: 3,
            drop_weight: -2.0,
            top_notes: 10,
        }
    }
}

impl MemoryParams {
    pub fn validate(&self) -> Result<(), MemoryError> {
        if self.short_term_size == 0 {
            return Err(MemoryError::InvalidParams("short_term_size must be at least 1".into()));
        }
        if !self.promote_weight.is_finite() || !self.drop_weight.is_finite() {
            return Err(MemoryError::InvalidParams("weights must be finite".into()));
        }
        if self.drop_weight >= self.promote_weight {
            return Err(MemoryError::InvalidParams("drop_weight must be below promote_weight".into()));
        }
        if self.promote_recurrence == 0 {
            return Err(MemoryError::InvalidParams("promote_recurrence must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    #[default]
    None,
    Worked,
    NeedsAdjustment,
}

impl Annotation {
    pub fn delta(self) -> f64 {
        match self {
            Annotation::None => 0.0,
            Annotation::Worked => 1.0,
            Annotation::NeedsAdjustment => -1.0,
        }
    }
}

/// Identity of a recurring pattern: what triggered the exchange, what kind
/// of action followed, and which colour family the light landed in.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatternKey {
    pub trigger: String,
    pub action: String,
    pub palette: String,
}

impl PatternKey {
    pub fn from_actions(trigger: &str, actions: &[ProposedAction], colors: &[NamedColor]) -> Self {
        let first = actions.first();
        let action = match first.map(|a| a.target) {
            None => "none",
            Some(ActuationTarget::Light(_)) => "light",
            Some(ActuationTarget::Relay(_)) => "relay",
        };
        let palette = actions
            .iter()
            .find_map(|a| match a.target {
                ActuationTarget::Light(s) if !s.on => Some("off".to_string()),
                ActuationTarget::Light(s) => {
                    Some(color_bucket(colors, s.hue).unwrap_or("other").to_string())
                }
                ActuationTarget::Relay(_) => None,
            })
            .unwrap_or_else(|| "-".to_string());
        PatternKey {
            trigger: trigger.to_string(),
            action: action.to_string(),
            palette,
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.trigger.as_bytes());
        h.update([0]);
        h.update(self.action.as_bytes());
        h.update([0]);
        h.update(self.palette.as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub id: String,
    pub timestamp: Millis,
    pub prompt_digest: String,
    pub actions: Vec<ProposedAction>,
    pub reasoning: String,
    #[serde(default)]
    pub annotation: Annotation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Event kind that caused the exchange, e.g. `speech` or `rule:proximity`.
    pub trigger: String,
    #[serde(default)]
    pub from_rule: bool,
    pub pattern: PatternKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub pattern: PatternKey,
    pub weight: f64,
    pub recurrence: u32,
    pub first_seen: Millis,
    pub last_seen: Millis,
    pub distilled_note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTermEntry {
    pub id: String,
    pub distilled_note: String,
    pub weight: f64,
    pub recurrence: u32,
    pub first_seen: Millis,
    pub last_seen: Millis,
    pub pattern: PatternKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DramaturgicalScore {
    pub version: u64,
    pub context_section: String,
    pub rules_section: String,
    pub distilled_notes: Vec<String>,
    pub created_at: Millis,
    /// Set when the provider could not summarise and notes are verbatim.
    #[serde(default)]
    pub fallback: bool,
}

impl DramaturgicalScore {
    pub fn notes_section(&self) -> String {
        render_notes_section(&self.distilled_notes)
    }
}

pub fn render_notes_section(notes: &[String]) -> String {
    let mut lines = vec![NOTES_HEADER.to_string()];
    if notes.is_empty() {
        lines.push(NO_NOTES.to_string());
    }
    lines.extend(notes.iter().map(|n| format!("- {}", n.trim())));
    lines.join("\n")
}

/// Journal records, one per line in `memory.ndjson`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MemoryRecord {
    Exchange { exchange: Exchange },
    Annotation { id: String, annotation: Annotation, note: Option<String>, pattern: String, weight: f64 },
    Promotion { entry: LongTermEntry },
    Dropped { pattern: PatternKey, weight: f64 },
    Score { score: DramaturgicalScore },
}

fn summarize_actions(actions: &[ProposedAction], colors: &[NamedColor]) -> String {
    if actions.is_empty() {
        return "held still".to_string();
    }
    let parts: Vec<String> = actions
        .iter()
        .map(|a| match a.target {
            ActuationTarget::Relay(on) => format!("{} {}", a.actuator, if on { "on" } else { "off" }),
            ActuationTarget::Light(s) if !s.on => format!("{} off", a.actuator),
            ActuationTarget::Light(s) => {
                let colour = color_bucket(colors, s.hue).unwrap_or("coloured");
                format!("{} {colour} at bri {}", a.actuator, s.bri)
            }
        })
        .collect();
    crate::model::join_list(&parts)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Memory {
    pub params: MemoryParams,
    pub colors: Vec<NamedColor>,
    ring: VecDeque<Exchange>,
    buffer: Vec<Exchange>,
    candidates: BTreeMap<PatternKey, Candidate>,
    longterm: Vec<LongTermEntry>,
    score_version: u64,
    #[serde(skip)]
    journal: Vec<MemoryRecord>,
}

impl Memory {
    pub fn new(params: MemoryParams, colors: Vec<NamedColor>) -> Result<Self, MemoryError> {
        params.validate()?;
        Ok(Self {
            params,
            colors,
            ..Default::default()
        })
    }

    /// Restores long-term state and the last score version from a production store.
    pub fn with_longterm(mut self, entries: Vec<LongTermEntry>, score_version: u64) -> Self {
        self.longterm = entries;
        self.score_version = score_version;
        self
    }

    pub fn ring(&self) -> impl Iterator<Item = &Exchange> {
        self.ring.iter()
    }

    pub fn ring_len(&self) -> usize {
        self.ring.len()
    }

    pub fn buffered(&self) -> &[Exchange] {
        &self.buffer
    }

    pub fn candidates(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.values()
    }

    pub fn candidate(&self, key: &PatternKey) -> Option<&Candidate> {
        self.candidates.get(key)
    }

    pub fn longterm(&self) -> &[LongTermEntry] {
        &self.longterm
    }

    pub fn score_version(&self) -> u64 {
        self.score_version
    }

    /// Keeps versions increasing after a score is installed from elsewhere.
    pub fn adopt_score_version(&mut self, version: u64) {
        self.score_version = self.score_version.max(version);
    }

    pub fn drain_records(&mut self) -> Vec<MemoryRecord> {
        std::mem::take(&mut self.journal)
    }

    fn find(&self, id: &str) -> Option<&Exchange> {
        self.ring.iter().chain(self.buffer.iter()).find(|e| e.id == id)
    }

    fn find_mut(&mut self, id: &str) -> Option<&mut Exchange> {
        self.ring.iter_mut().chain(self.buffer.iter_mut()).find(|e| e.id == id)
    }

    fn distill(&self, e: &Exchange) -> String {
        let what = summarize_actions(&e.actions, &self.colors);
        let why = e.note.as_deref().unwrap_or(e.reasoning.as_str()).trim();
        if why.is_empty() {
            format!("On {}: {what}.", e.trigger)
        } else {
            format!("On {}: {what}. {why}", e.trigger)
        }
    }

    pub fn record_exchange(&mut self, e: Exchange) -> Result<(), MemoryError> {
        if self.find(&e.id).is_some() {
            return Err(MemoryError::DuplicateExchange(e.id));
        }
        if e.reasoning.trim().is_empty() && !e.from_rule {
            return Err(MemoryError::MissingReasoning);
        }
        let note = self.distill(&e);
        let cand = self.candidates.entry(e.pattern.clone()).or_insert_with(|| Candidate {
            pattern: e.pattern.clone(),
            weight: 0.0,
            recurrence: 0,
            first_seen: e.timestamp,
            last_seen: e.timestamp,
            distilled_note: note.clone(),
        });
        cand.recurrence += 1;
        cand.last_seen = cand.last_seen.max(e.timestamp);
        self.journal.push(MemoryRecord::Exchange { exchange: e.clone() });
        self.ring.push_back(e);
        while self.ring.len() > self.params.short_term_size {
            let old = self.ring.pop_front().expect("ring is non-empty");
            self.buffer.push(old);
        }
        Ok(())
    }

    pub fn annotate(&mut self, id: &str, annotation: Annotation, note: Option<String>) -> Result<f64, MemoryError> {
        let note = note.map(|n| n.trim().to_string()).filter(|n| !n.is_empty());
        let e = self.find_mut(id).ok_or_else(|| MemoryError::UnknownExchange(id.to_string()))?;
        e.annotation = annotation;
        if note.is_some() {
            e.note = note.clone();
        }
        let e = e.clone();
        let distilled = self.distill(&e);
        let cand = self.candidates.entry(e.pattern.clone()).or_insert_with(|| Candidate {
            pattern: e.pattern.clone(),
            weight: 0.0,
            recurrence: 1,
            first_seen: e.timestamp,
            last_seen: e.timestamp,
            distilled_note: distilled.clone(),
        });
        cand.weight += annotation.delta();
        if note.is_some() || annotation == Annotation::Worked {
            cand.distilled_note = distilled;
        }
        let weight = cand.weight;
        self.journal.push(MemoryRecord::Annotation {
            id: id.to_string(),
            annotation,
            note,
            pattern: e.pattern.digest(),
            weight,
        });
        Ok(weight)
    }

    /// Promotes strong or recurring candidates into the long-term store and
    /// drops strongly rejected ones. Returns the ids of touched entries.
    pub fn promote(&mut self) -> Vec<String> {
        let p = self.params;
        let mut touched = Vec::new();
        let mut dropped = Vec::new();
        for (key, c) in &self.candidates {
            if c.weight <= p.drop_weight {
                dropped.push(key.clone());
                continue;
            }
            if c.weight < p.promote_weight && c.recurrence < p.promote_recurrence {
                continue;
            }
            let id = format!("lt-{}", key.digest());
            let entry = LongTermEntry {
                id: id.clone(),
                distilled_note: c.distilled_note.clone(),
                weight: c.weight,
                recurrence: c.recurrence,
                first_seen: c.first_seen,
                last_seen: c.last_seen,
                pattern: key.clone(),
            };
            match self.longterm.iter_mut().find(|e| e.id == id) {
                Some(existing) if *existing == entry => continue,
                Some(existing) => *existing = entry.clone(),
                None => self.longterm.push(entry.clone()),
            }
            self.journal.push(MemoryRecord::Promotion { entry });
            touched.push(id);
        }
        for key in dropped {
            let c = self.candidates.remove(&key).expect("candidate present");
            log::info!("dropping pattern {:?} at weight {}", key, c.weight);
            self.journal.push(MemoryRecord::Dropped {
                pattern: key,
                weight: c.weight,
            });
        }
        touched
    }

    /// Top-N long-term entries by weight, ties broken by age then id.
    pub fn top_entries(&self) -> Vec<&LongTermEntry> {
        let mut entries: Vec<_> = self.longterm.iter().collect();
        entries.sort_by(|a, b| {
            b.weight
                .total_cmp(&a.weight)
                .then(a.first_seen.cmp(&b.first_seen))
                .then(a.id.cmp(&b.id))
        });
        entries.truncate(self.params.top_notes);
        entries
    }

    /// Builds the next score. Notes are summarised by the provider when one is
    /// given; any provider failure falls back to the verbatim notes.
    #[allow(clippy::too_many_arguments)]
    pub fn consolidate(
        &mut self,
        profile: Option<&DramaturgicalProfile>,
        rules: &[DirectorialRule],
        constraints: &[Constraint],
        zones: &[Zone],
        provider: Option<&dyn LanguageModelProvider>,
        now: Millis,
    ) -> DramaturgicalScore {
        let raw: Vec<String> = self.top_entries().iter().map(|e| e.distilled_note.clone()).collect();
        let (notes, fallback) = match provider {
            None => (raw, false),
            Some(p) => match summarize_notes(&raw, p) {
                Ok(notes) => (notes, false),
                Err(reason) => {
                    log::warn!("note summary failed, using verbatim notes: {reason}");
                    (raw, true)
                }
            },
        };
        self.score_version += 1;
        let score = DramaturgicalScore {
            version: self.score_version,
            context_section: profile.map(render_context_section).unwrap_or_else(render_unframed_context),
            rules_section: describe_rules_section(rules, constraints, zones),
            distilled_notes: notes,
            created_at: now,
            fallback,
        };
        self.journal.push(MemoryRecord::Score { score: score.clone() });
        score
    }
}

fn summarize_notes(notes: &[String], provider: &dyn LanguageModelProvider) -> Result<Vec<String>, String> {
    notes
        .iter()
        .map(|note| {
            let request = ProviderRequest {
                contract: ReplyContract::Summary,
                system: fill_template(SUMMARY_TEMPLATE, &[("NOTE", note)]),
                user: note.clone(),
            };
            let reply = provider.complete(&request).map_err(|e| e.to_string())?;
            let obj = parse_object(&reply).ok_or_else(|| format!("summary is not a JSON object: {reply}"))?;
            obj.get("note")
                .and_then(|v| v.as_str())
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.replace('\n', " "))
                .ok_or_else(|| format!("summary has no note: {reply}"))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Persistence

/// Session journal plus compacted production store.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    pub session_file: PathBuf,
    pub production_file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ProductionRecord {
    Entry { entry: LongTermEntry },
    Score { score: DramaturgicalScore },
}

fn io_err(e: impl std::fmt::Display) -> MemoryError {
    MemoryError::Storage(e.to_string())
}

impl MemoryStore {
    pub fn new(data_dir: &Path, session_id: &str) -> Self {
        Self {
            session_file: data_dir.join("sessions").join(session_id).join("memory.ndjson"),
            production_file: data_dir.join("production").join("longterm.ndjson"),
        }
    }

    pub fn append(&self, records: &[MemoryRecord]) -> Result<(), MemoryError> {
        if records.is_empty() {
            return Ok(());
        }
        if let Some(dir) = self.session_file.parent() {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.session_file)
            .map_err(io_err)?;
        for r in records {
            let line = serde_json::to_string(r).map_err(io_err)?;
            writeln!(f, "{line}").map_err(io_err)?;
        }
        f.sync_data().map_err(io_err)
    }

    /// Rewrites the production store with the current long-term entries and score.
    pub fn compact(&self, memory: &Memory, score: Option<&DramaturgicalScore>) -> Result<(), MemoryError> {
        let dir = self.production_file.parent().expect("production file has a parent");
        fs::create_dir_all(dir).map_err(io_err)?;
        let tmp = self.production_file.with_extension("ndjson.tmp");
        {
            let mut f = File::create(&tmp).map_err(io_err)?;
            for entry in memory.longterm() {
                let rec = ProductionRecord::Entry { entry: entry.clone() };
                writeln!(f, "{}", serde_json::to_string(&rec).map_err(io_err)?).map_err(io_err)?;
            }
            if let Some(score) = score {
                let rec = ProductionRecord::Score { score: score.clone() };
                writeln!(f, "{}", serde_json::to_string(&rec).map_err(io_err)?).map_err(io_err)?;
            }
            f.sync_data().map_err(io_err)?;
        }
        fs::rename(&tmp, &self.production_file).map_err(io_err)
    }

    /// Loads long-term entries and the last persisted score, if any.
    pub fn load_production(&self) -> Result<(Vec<LongTermEntry>, Option<DramaturgicalScore>), MemoryError> {
        let f = match File::open(&self.production_file) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), None)),
            Err(e) => return Err(io_err(e)),
        };
        let mut entries = Vec::new();
        let mut score = None;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<ProductionRecord>(&line).map_err(io_err)? {
                ProductionRecord::Entry { entry } => entries.push(entry),
                ProductionRecord::Score { score: s } => score = Some(s),
            }
        }
        Ok((entries, score))
    }
}

pub fn read_journal(path: &Path) -> Result<Vec<MemoryRecord>, MemoryError> {
    let text = fs::read_to_string(path).map_err(io_err)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(io_err))
        .collect()
}
