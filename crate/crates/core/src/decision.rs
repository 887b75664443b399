//! When to consult the provider, what to send it, how to read the reply,
//! and how constraint violations are corrected or dropped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::director::{
    validate_action, ActuationTarget, ActuatorKind, Constraint, NamedColor, ProposedAction, Selector, Validation,
};
use crate::dramaturgy::parse_object;
use crate::memory::DramaturgicalScore;
use crate::model::{render_environment_section, EnvironmentSnapshot, LightState, Millis, Zone, ZoneMemberships};
use crate::provider::{LanguageModelProvider, ProviderRequest, ReplyContract, DECISION_CONTRACT, FORMAT_REMINDER};
use crate::session_log::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Speech,
    ZoneChange,
    HotspotEmerged,
    ProximityChange,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Speech => "speech",
            EventKind::ZoneChange => "zone_change",
            EventKind::HotspotEmerged => "hotspot_emerged",
            EventKind::ProximityChange => "proximity_change",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerPolicy {
    pub query_on: BTreeSet<EventKind>,
    pub min_interval_ms: u64,
    pub max_inflight: usize,
    /// Pair distance that defines a proximity change, in metres.
    pub proximity_m: f64,
}

impl Default for TriggerPolicy {
    fn default() -> Self {
        Self {
            query_on: [EventKind::Speech, EventKind::ZoneChange, EventKind::HotspotEmerged].into(),
            min_interval_ms: 2000,
            max_inflight: 1,
            proximity_m: 2.0,
        }
    }
}

impl TriggerPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_inflight == 0 {
            return Err("max_inflight must be at least 1".into());
        }
        if !(self.proximity_m > 0.0 && self.proximity_m.is_finite()) {
            return Err("proximity_m must be positive".into());
        }
        Ok(())
    }
}

pub fn should_query(
    policy: &TriggerPolicy,
    kind: EventKind,
    now: Millis,
    last_query: Option<Millis>,
    inflight: usize,
) -> bool {
    policy.query_on.contains(&kind)
        && last_query.is_none_or(|last| now.saturating_sub(last) >= policy.min_interval_ms)
        && inflight < policy.max_inflight
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionEvent {
    pub kind: EventKind,
    pub at: Millis,
    /// One plain sentence describing what just happened.
    pub line: String,
}

// ---------------------------------------------------------------------------
// Prompt

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSections {
    pub context: String,
    pub rules: String,
    pub notes: String,
    pub environment: String,
}

impl PromptSections {
    pub fn text(&self) -> String {
        [&self.context, &self.rules, &self.notes, &self.environment]
            .iter()
            .map(|s| s.trim_end())
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.text().as_bytes())
    }
}

pub fn compose_prompt(score: &DramaturgicalScore, snapshot: &EnvironmentSnapshot, zones: &[Zone]) -> PromptSections {
    PromptSections {
        context: score.context_section.clone(),
        rules: score.rules_section.clone(),
        notes: score.notes_section(),
        environment: render_environment_section(snapshot, zones),
    }
}

pub fn compose_user_message(event: &DecisionEvent) -> String {
    format!("[EVENT]\n{}\n\n{}", event.line.trim(), DECISION_CONTRACT.trim_end())
}

// ---------------------------------------------------------------------------
// Replies

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReplyTarget {
    Light { target: String, light: LightState },
    Relay { target: String, relay: bool },
}

impl ReplyTarget {
    pub fn target(&self) -> &str {
        match self {
            ReplyTarget::Light { target, .. } | ReplyTarget::Relay { target, .. } => target,
        }
    }

    pub fn actuation(&self) -> ActuationTarget {
        match self {
            ReplyTarget::Light { light, .. } => ActuationTarget::Light(*light),
            ReplyTarget::Relay { relay, .. } => ActuationTarget::Relay(*relay),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub actions: Vec<ReplyTarget>,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("unusable reply: {reason}")]
pub struct ParseError {
    pub reason: String,
    pub raw: String,
}

fn int_field(obj: &Map<String, Value>, key: &str, max: i64, required: bool) -> Result<i64, String> {
    match obj.get(key) {
        None if !required => Ok(0),
        None => Err(format!("light.{key} is missing")),
        Some(v) => match v.as_i64() {
            Some(n) if (0..=max).contains(&n) => Ok(n),
            Some(n) => Err(format!("light.{key}={n} is outside 0..={max}")),
            None => Err(format!("light.{key} must be an integer")),
        },
    }
}

fn parse_light(v: &Value) -> Result<LightState, String> {
    let obj = v.as_object().ok_or("light must be an object")?;
    let on = obj.get("on").and_then(Value::as_bool).ok_or("light.on must be a boolean")?;
    // an off command needs nothing else
    let required = on;
    Ok(LightState {
        on,
        bri: int_field(obj, "bri", 254, required)? as u8,
        hue: int_field(obj, "hue", 65535, required)? as u16,
        sat: int_field(obj, "sat", 254, required)? as u8,
        transition_ms: int_field(obj, "transition_ms", u32::MAX as i64, false)? as u32,
    })
}

fn parse_action(v: &Value) -> Result<ReplyTarget, String> {
    let obj = v.as_object().ok_or("each action must be an object")?;
    let target = obj
        .get("target")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .ok_or("action.target must be a non-empty string")?
        .to_string();
    match (obj.get("light"), obj.get("relay")) {
        (Some(l), None) => Ok(ReplyTarget::Light {
            target,
            light: parse_light(l)?,
        }),
        (None, Some(r)) => Ok(ReplyTarget::Relay {
            target,
            relay: r.as_bool().ok_or("action.relay must be a boolean")?,
        }),
        _ => Err("each action needs exactly one of `light` or `relay`".into()),
    }
}

/// Reads one reply under the decision contract. Ranges are checked, never clamped.
pub fn parse_response(raw: &str) -> Result<DecisionResponse, ParseError> {
    let fail = |reason: String| ParseError {
        reason,
        raw: raw.to_string(),
    };
    let obj = parse_object(raw).ok_or_else(|| fail("reply is not a single JSON object".into()))?;
    let reasoning = obj
        .get("reasoning")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| fail("reasoning must be a non-empty string".into()))?
        .to_string();
    let actions = obj
        .get("actions")
        .and_then(Value::as_array)
        .ok_or_else(|| fail("actions must be an array".into()))?
        .iter()
        .map(parse_action)
        .collect::<Result<Vec<_>, _>>()
        .map_err(fail)?;
    Ok(DecisionResponse { actions, reasoning })
}

// ---------------------------------------------------------------------------
// Trace

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceSource {
    Provider { event: EventKind, line: String },
    Rule { rule: String },
    Director { command: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub action: ProposedAction,
    pub validation: Validation,
    pub dispatched: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub exchange: String,
    pub timestamp: Millis,
    pub requested_at: Millis,
    pub source: TraceSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PromptSections>,
    pub raw_replies: Vec<String>,
    pub reasoning: String,
    pub outcomes: Vec<ActionOutcome>,
    pub reprompted: bool,
    pub stale: bool,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReasoningTrace {
    pub fn dispatched(&self) -> impl Iterator<Item = &ProposedAction> {
        self.outcomes.iter().filter(|o| o.dispatched).map(|o| &o.action)
    }
}

/// True when any entity's set of zones differs between the two snapshots.
/// An entity missing from one side counts as being in no zone.
pub fn mark_staleness(at_request: &ZoneMemberships, at_response: &ZoneMemberships) -> bool {
    let empty = BTreeSet::new();
    at_request
        .keys()
        .chain(at_response.keys())
        .any(|id| at_request.get(id).unwrap_or(&empty) != at_response.get(id).unwrap_or(&empty))
}

// ---------------------------------------------------------------------------
// Decision job

/// Everything a provider decision needs, captured at launch so the call can
/// run off the tick loop.
#[derive(Debug, Clone)]
pub struct DecisionJob {
    pub exchange: String,
    pub event: DecisionEvent,
    pub sections: PromptSections,
    pub constraints: Vec<Constraint>,
    pub colors: Vec<NamedColor>,
    pub actuators: Vec<(String, ActuatorKind)>,
    pub requested_at: Millis,
    pub memberships: ZoneMemberships,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Attempt {
    Reply { raw: String },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub exchange: String,
    pub attempts: Vec<Attempt>,
    pub reasoning: String,
    /// Proposed actions after target expansion, in reply order.
    pub proposed: Vec<ProposedAction>,
    /// Reasons for targets that matched no actuator of the right kind.
    pub unresolved: Vec<(String, Vec<String>)>,
    pub reprompted: bool,
    pub error: Option<String>,
}

struct Caller<'a> {
    provider: &'a dyn LanguageModelProvider,
    attempts: Vec<Attempt>,
}

impl Caller<'_> {
    /// One call with a single retry on transport failure.
    fn call(&mut self, request: &ProviderRequest) -> Result<String, String> {
        let mut last = String::new();
        for _ in 0..2 {
            match self.provider.complete(request) {
                Ok(raw) => {
                    self.attempts.push(Attempt::Reply { raw: raw.clone() });
                    return Ok(raw);
                }
                Err(e) => {
                    last = e.to_string();
                    self.attempts.push(Attempt::Failed { error: last.clone() });
                }
            }
        }
        Err(format!("provider failed after retry: {last}"))
    }

    /// A call plus one format-reminder retry when the reply does not parse.
    fn ask(&mut self, request: &ProviderRequest) -> Result<DecisionResponse, String> {
        let raw = self.call(request)?;
        match parse_response(&raw) {
            Ok(r) => Ok(r),
            Err(first) => {
                let retry = ProviderRequest {
                    user: format!("{}\n\n{}", request.user, FORMAT_REMINDER.trim_end()),
                    ..request.clone()
                };
                let raw = self.call(&retry)?;
                parse_response(&raw).map_err(|e| format!("{}; after reminder: {}", first.reason, e.reason))
            }
        }
    }
}

impl DecisionJob {
    pub fn request(&self) -> ProviderRequest {
        ProviderRequest {
            contract: ReplyContract::Decision,
            system: self.sections.text(),
            user: compose_user_message(&self.event),
        }
    }

    fn expand(&self, response: &DecisionResponse) -> (Vec<ProposedAction>, Vec<(String, Vec<String>)>) {
        let mut proposed = Vec::new();
        let mut unresolved = Vec::new();
        for a in &response.actions {
            let target = a.actuation();
            let selector = Selector(a.target().to_string());
            let matched: Vec<_> = self
                .actuators
                .iter()
                .filter(|(id, k)| *k == target.kind() && selector.matches(id))
                .collect();
            if matched.is_empty() {
                unresolved.push((
                    a.target().to_string(),
                    vec![format!("`{}` matches no {:?} actuator", a.target(), target.kind()).to_lowercase()],
                ));
            }
            for (id, _) in matched {
                proposed.push(ProposedAction {
                    actuator: id.clone(),
                    target,
                });
            }
        }
        (proposed, unresolved)
    }

    fn violations(&self, proposed: &[ProposedAction], unresolved: &[(String, Vec<String>)]) -> Vec<String> {
        let mut reasons: Vec<String> = unresolved.iter().flat_map(|(_, r)| r.clone()).collect();
        for p in proposed {
            if let Validation::Violation { reasons: r } = validate_action(p, &self.constraints, &self.colors) {
                reasons.extend(r);
            }
        }
        reasons
    }

    /// Runs the provider exchange: ask, validate, and re-prompt once with
    /// the violation reasons. The corrective reply replaces the first one.
    pub fn run(&self, provider: &dyn LanguageModelProvider) -> JobOutcome {
        let mut caller = Caller {
            provider,
            attempts: Vec::new(),
        };
        let request = self.request();
        let mut outcome = JobOutcome {
            exchange: self.exchange.clone(),
            attempts: Vec::new(),
            reasoning: String::new(),
            proposed: Vec::new(),
            unresolved: Vec::new(),
            reprompted: false,
            error: None,
        };
        let first = match caller.ask(&request) {
            Ok(r) => r,
            Err(e) => {
                outcome.error = Some(e);
                outcome.attempts = caller.attempts;
                return outcome;
            }
        };
        let (proposed, unresolved) = self.expand(&first);
        let reasons = self.violations(&proposed, &unresolved);
        outcome.reasoning = first.reasoning.clone();
        outcome.proposed = proposed;
        outcome.unresolved = unresolved;
        if !reasons.is_empty() {
            outcome.reprompted = true;
            let corrective = ProviderRequest {
                user: format!("{}\n\n{}", request.user, correction_block(&reasons)),
                ..request.clone()
            };
            match caller.ask(&corrective) {
                Ok(second) => {
                    let (proposed, unresolved) = self.expand(&second);
                    outcome.reasoning = second.reasoning;
                    outcome.proposed = proposed;
                    outcome.unresolved = unresolved;
                }
                Err(e) => {
                    // keep the first reply; its violating actions are dropped later
                    log::warn!("corrective re-prompt for {} failed: {e}", self.exchange);
                }
            }
        }
        outcome.attempts = caller.attempts;
        outcome
    }
}

pub fn correction_block(reasons: &[String]) -> String {
    let mut lines = vec![
        "[CORRECTION]".to_string(),
        "Your previous reply broke these rules:".to_string(),
    ];
    lines.extend(reasons.iter().map(|r| format!("- {r}")));
    lines.push("Reply again with a complete JSON object whose actions respect every rule.".into());
    lines.join("\n")
}

/// Validates a finished outcome against the constraints active now.
pub fn finalize(
    outcome: &JobOutcome,
    constraints: &[Constraint],
    colors: &[NamedColor],
) -> (Vec<ActionOutcome>, Vec<(String, Vec<String>)>) {
    let mut outcomes = Vec::new();
    let mut dropped: Vec<(String, Vec<String>)> = outcome.unresolved.clone();
    for p in &outcome.proposed {
        let validation = validate_action(p, constraints, colors);
        let dispatched = validation.accepted().is_some();
        if let Validation::Violation { reasons } = &validation {
            dropped.push((p.actuator.clone(), reasons.clone()));
        }
        outcomes.push(ActionOutcome {
            action: validation.accepted().cloned().unwrap_or_else(|| p.clone()),
            validation,
            dispatched,
        });
    }
    (outcomes, dropped)
}

/// Groups recorded attempts per exchange, in log order.
pub type RecordedAttempts = BTreeMap<String, Vec<Attempt>>;
