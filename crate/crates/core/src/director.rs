//! Directorial layer: a small command grammar compiled into edge-triggered
//! rules, hard constraints and immediate actions, plus constraint
//! validation for every outgoing actuation.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dramaturgy::Modality;
use crate::model::{distance, join_list, zone_contains, EnvironmentSnapshot, LightState, Zone, MAX_BRI};
use crate::provider::{
    fill_template, LanguageModelProvider, ProviderRequest, ReplyContract, TRANSLATION_TEMPLATE,
};

pub const RULES_HEADER: &str = "[DIRECTORIAL RULES]";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommandError {
    #[error("command is empty")]
    Empty,
    #[error("could not parse command; grammar: {grammar}; provider: {provider}")]
    Unparsed { grammar: String, provider: String },
    #[error("unknown {kind} `{name}`")]
    Reference { kind: &'static str, name: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("at column {column}: {message}")]
pub struct GrammarError {
    pub column: usize,
    pub message: String,
}

// ---------------------------------------------------------------------------
// Colours

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub hue_center: u16,
    pub hue_tolerance: u16,
}

pub const HUE_CIRCLE: i64 = 65536;
pub const DEFAULT_HUE_TOLERANCE: u16 = 2500;

impl NamedColor {
    pub fn new(name: &str, hue_center: u16, hue_tolerance: u16) -> Self {
        Self {
            name: name.to_string(),
            hue_center,
            hue_tolerance,
        }
    }

    /// Wraparound interval membership on the 0..65535 hue circle.
    pub fn contains(&self, hue: u16) -> bool {
        hue_distance(hue, self.hue_center) <= self.hue_tolerance as i64
    }
}

pub fn hue_distance(a: u16, b: u16) -> i64 {
    let d = (a as i64 - b as i64).abs();
    d.min(HUE_CIRCLE - d)
}

pub fn default_colors() -> Vec<NamedColor> {
    vec![
        NamedColor::new("red", 0, DEFAULT_HUE_TOLERANCE),
        NamedColor::new("green", 25500, DEFAULT_HUE_TOLERANCE),
        NamedColor::new("blue", 46920, DEFAULT_HUE_TOLERANCE),
    ]
}

/// Name of the first colour whose interval holds `hue`.
pub fn color_bucket(colors: &[NamedColor], hue: u16) -> Option<&str> {
    colors.iter().find(|c| c.contains(hue)).map(|c| c.name.as_str())
}

// ---------------------------------------------------------------------------
// Rule and constraint types

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trigger {
    ZoneEntry { zone: String },
    ZoneExit { zone: String },
    ProximityBelow { threshold: f64, count: usize },
    SpeechInZone { zone: String },
    AnySpeech,
    HotspotEmerged { zone: Option<String> },
}

impl Trigger {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Trigger::ZoneEntry { .. } => "enter",
            Trigger::ZoneExit { .. } => "exit",
            Trigger::ProximityBelow { .. } => "proximity",
            Trigger::SpeechInZone { .. } => "speech",
            Trigger::AnySpeech => "speech",
            Trigger::HotspotEmerged { .. } => "hotspot",
        }
    }

    fn zone(&self) -> Option<&str> {
        match self {
            Trigger::ZoneEntry { zone } | Trigger::ZoneExit { zone } | Trigger::SpeechInZone { zone } => {
                Some(zone)
            }
            Trigger::HotspotEmerged { zone } => zone.as_deref(),
            _ => None,
        }
    }
}

/// Glob over actuator ids; `*` matches any run of characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Selector(pub String);

impl Selector {
    pub fn matches(&self, id: &str) -> bool {
        glob_match(self.0.as_bytes(), id.as_bytes())
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn glob_match(pattern: &[u8], text: &[u8]) -> bool {
    let (mut p, mut t) = (0, 0);
    let (mut star, mut mark) = (None, 0);
    while t < text.len() {
        if p < pattern.len() && pattern[p] != b'*' && pattern[p] == text[t] {
            p += 1;
            t += 1;
        } else if p < pattern.len() && pattern[p] == b'*' {
            star = Some(p);
            mark = t;
            p += 1;
        } else if let Some(s) = star {
            p = s + 1;
            mark += 1;
            t = mark;
        } else {
            return false;
        }
    }
    pattern[p..].iter().all(|&c| c == b'*')
}

/// Partial light state; unset fields keep the actuator's current value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bri: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hue: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sat: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_ms: Option<u32>,
}

impl LightPatch {
    /// Applies the patch over `base`. Setting a colour or brightness without
    /// an explicit `on` turns the light on; transition defaults to zero.
    pub fn resolve(&self, base: LightState) -> LightState {
        let touches_output = self.bri.is_some() || self.hue.is_some() || self.sat.is_some();
        LightState {
            on: self.on.unwrap_or(if touches_output { true } else { base.on }),
            bri: self.bri.unwrap_or(base.bri),
            hue: self.hue.unwrap_or(base.hue),
            sat: self.sat.unwrap_or(base.sat),
            transition_ms: self.transition_ms.unwrap_or(0),
        }
    }

    fn is_empty(&self) -> bool {
        *self == LightPatch::default()
    }
}

impl From<LightState> for LightPatch {
    fn from(s: LightState) -> Self {
        LightPatch {
            on: Some(s.on),
            bri: Some(s.bri),
            hue: Some(s.hue),
            sat: Some(s.sat),
            transition_ms: Some(s.transition_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleAction {
    SetLight { selector: Selector, patch: LightPatch },
    SetRelay { selector: Selector, on: bool },
}

impl RuleAction {
    pub fn selector(&self) -> &Selector {
        match self {
            RuleAction::SetLight { selector, .. } | RuleAction::SetRelay { selector, .. } => selector,
        }
    }

    pub fn actuator_kind(&self) -> ActuatorKind {
        match self {
            RuleAction::SetLight { .. } => ActuatorKind::Light,
            RuleAction::SetRelay { .. } => ActuatorKind::Relay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActuatorKind {
    Light,
    Relay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectorialRule {
    pub id: String,
    pub trigger: Trigger,
    pub action: RuleAction,
    pub enabled: bool,
    #[serde(default)]
    pub cooldown_ms: u64,
    /// The director's own wording, when the rule came from natural language.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    Palette { allowed: Vec<String> },
    MinTransition { ms: u32 },
    MaxIntensity { bri: u8 },
    ModalityOnly { modality: Modality },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompiledCommand {
    Rule { trigger: Trigger, action: RuleAction },
    Constraint(Constraint),
    Immediate(RuleAction),
}

/// A successfully compiled command with its canonical grammar form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedCommand {
    pub source: String,
    pub grammar_form: String,
    pub translated: bool,
    pub command: CompiledCommand,
}

// ---------------------------------------------------------------------------
// Grammar printing

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trigger::ZoneEntry { zone } => write!(f, "enter({zone})"),
            Trigger::ZoneExit { zone } => write!(f, "exit({zone})"),
            Trigger::ProximityBelow { threshold, count } => {
                write!(f, "proximity(<{}m, {count})", fmt_num(*threshold))
            }
            Trigger::SpeechInZone { zone } => write!(f, "speech({zone})"),
            Trigger::AnySpeech => write!(f, "speech(any)"),
            Trigger::HotspotEmerged { zone } => write!(f, "hotspot({})", zone.as_deref().unwrap_or("")),
        }
    }
}

impl fmt::Display for RuleAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleAction::SetRelay { selector, on } => {
                write!(f, "relay({selector}, {})", if *on { "on" } else { "off" })
            }
            RuleAction::SetLight { selector, patch } => {
                let mut params = Vec::new();
                if let Some(on) = patch.on {
                    params.push(format!("on={}", if on { "on" } else { "off" }));
                }
                if let Some(v) = patch.bri {
                    params.push(format!("bri={v}"));
                }
                if let Some(v) = patch.hue {
                    params.push(format!("hue={v}"));
                }
                if let Some(v) = patch.sat {
                    params.push(format!("sat={v}"));
                }
                if let Some(v) = patch.transition_ms {
                    params.push(format!("transition={v}ms"));
                }
                write!(f, "light({selector}, {})", params.join(", "))
            }
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::Palette { allowed } => write!(f, "constraint palette({})", allowed.join(",")),
            Constraint::MinTransition { ms } => write!(f, "constraint transition >= {ms}ms"),
            Constraint::MaxIntensity { bri } => write!(f, "constraint intensity <= {bri}"),
            Constraint::ModalityOnly { modality } => write!(f, "constraint modality({modality})"),
        }
    }
}

impl fmt::Display for CompiledCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompiledCommand::Rule { trigger, action } => write!(f, "when {trigger} then {action}"),
            CompiledCommand::Constraint(c) => write!(f, "{c}"),
            CompiledCommand::Immediate(a) => write!(f, "now {a}"),
        }
    }
}

// ---------------------------------------------------------------------------
// Grammar parsing

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, GrammarError> {
        Err(GrammarError {
            column: self.pos + 1,
            message: message.into(),
        })
    }

    fn at_end(&mut self) -> bool {
        self.ws();
        self.pos >= self.src.len()
    }

    /// Case-insensitive keyword or punctuation.
    fn eat(&mut self, token: &str) -> bool {
        self.ws();
        let rest = self.rest();
        if rest.len() >= token.len() && rest[..token.len()].eq_ignore_ascii_case(token) {
            let is_word = token.chars().all(|c| c.is_ascii_alphabetic());
            let next = rest[token.len()..].chars().next();
            if is_word && next.is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
                return false;
            }
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> Result<(), GrammarError> {
        if self.eat(token) {
            Ok(())
        } else {
            self.err(format!("expected `{token}`"))
        }
    }

    /// Identifier or selector: letters, digits, `_ - . *`.
    fn ident(&mut self, what: &str) -> Result<String, GrammarError> {
        self.ws();
        let len = self
            .rest()
            .find(|c: char| !(c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '*')))
            .unwrap_or(self.rest().len());
        if len == 0 {
            return self.err(format!("expected {what}"));
        }
        let s = self.rest()[..len].to_string();
        self.pos += len;
        Ok(s)
    }

    fn number(&mut self) -> Result<f64, GrammarError> {
        self.ws();
        let len = self
            .rest()
            .find(|c: char| !(c.is_ascii_digit() || c == '.'))
            .unwrap_or(self.rest().len());
        if len == 0 {
            return self.err("expected number");
        }
        let text = &self.rest()[..len];
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => {
                self.pos += len;
                Ok(v)
            }
            _ => self.err(format!("bad number `{text}`")),
        }
    }

    fn integer(&mut self) -> Result<i64, GrammarError> {
        let start = self.pos;
        let v = self.number()?;
        if v.fract() != 0.0 {
            self.pos = start;
            return self.err("expected integer");
        }
        Ok(v as i64)
    }
}

fn percent_to_level(pct: f64) -> Option<u8> {
    if !(0.0..=100.0).contains(&pct) {
        return None;
    }
    // half-up rounding onto the native 0..254 scale
    Some((pct / 100.0 * MAX_BRI as f64 + 0.5).floor() as u8)
}

fn parse_level(c: &mut Cursor, max: i64, what: &str) -> Result<u8, GrammarError> {
    let v = c.number()?;
    if c.eat("%") {
        return match percent_to_level(v) {
            Some(level) => Ok(level),
            None => c.err(format!("{what} percentage out of range")),
        };
    }
    if v.fract() != 0.0 || v < 0.0 || v > max as f64 {
        return c.err(format!("{what} must be an integer in 0..={max}"));
    }
    Ok(v as u8)
}

fn parse_duration_ms(c: &mut Cursor) -> Result<u32, GrammarError> {
    let v = c.number()?;
    let ms = if c.eat("ms") {
        v
    } else if c.eat("s") {
        v * 1000.0
    } else {
        v
    };
    let ms = ms.round();
    if !(0.0..=u32::MAX as f64).contains(&ms) {
        return c.err("duration out of range");
    }
    Ok(ms as u32)
}

fn parse_distance_m(c: &mut Cursor) -> Result<f64, GrammarError> {
    let v = c.number()?;
    if c.eat("cm") {
        Ok(v / 100.0)
    } else {
        c.eat("m");
        Ok(v)
    }
}

fn parse_on_off(c: &mut Cursor) -> Result<bool, GrammarError> {
    if c.eat("on") || c.eat("true") {
        Ok(true)
    } else if c.eat("off") || c.eat("false") {
        Ok(false)
    } else {
        c.err("expected on or off")
    }
}

fn parse_trigger(c: &mut Cursor) -> Result<Trigger, GrammarError> {
    if c.eat("enter") {
        c.expect("(")?;
        let zone = c.ident("zone id")?;
        c.expect(")")?;
        Ok(Trigger::ZoneEntry { zone })
    } else if c.eat("exit") {
        c.expect("(")?;
        let zone = c.ident("zone id")?;
        c.expect(")")?;
        Ok(Trigger::ZoneExit { zone })
    } else if c.eat("proximity") {
        c.expect("(")?;
        c.expect("<")?;
        let threshold = parse_distance_m(c)?;
        if threshold <= 0.0 {
            return c.err("proximity threshold must be positive");
        }
        c.expect(",")?;
        let count = c.integer()?;
        if count < 2 {
            return c.err("proximity count must be at least 2");
        }
        c.expect(")")?;
        Ok(Trigger::ProximityBelow {
            threshold,
            count: count as usize,
        })
    } else if c.eat("speech") {
        c.expect("(")?;
        if c.eat("any") {
            c.expect(")")?;
            return Ok(Trigger::AnySpeech);
        }
        let zone = c.ident("zone id")?;
        c.expect(")")?;
        Ok(Trigger::SpeechInZone { zone })
    } else if c.eat("hotspot") {
        c.expect("(")?;
        if c.eat(")") {
            return Ok(Trigger::HotspotEmerged { zone: None });
        }
        let zone = c.ident("zone id")?;
        c.expect(")")?;
        Ok(Trigger::HotspotEmerged { zone: Some(zone) })
    } else {
        c.err("expected trigger: enter, exit, proximity, speech or hotspot")
    }
}

fn parse_light_params(c: &mut Cursor, colors: &[NamedColor]) -> Result<LightPatch, GrammarError> {
    let mut patch = LightPatch::default();
    loop {
        let name = c.ident("light parameter")?.to_ascii_lowercase();
        let has_value = c.eat("=");
        match (name.as_str(), has_value) {
            ("on", false) => patch.on = Some(true),
            ("off", false) => patch.on = Some(false),
            ("on", true) => patch.on = Some(parse_on_off(c)?),
            ("bri", true) => patch.bri = Some(parse_level(c, MAX_BRI as i64, "bri")?),
            ("sat", true) => patch.sat = Some(parse_level(c, 254, "sat")?),
            ("hue", true) => {
                c.ws();
                if c.rest().starts_with(|ch: char| ch.is_ascii_digit()) {
                    let v = c.integer()?;
                    if !(0..=u16::MAX as i64).contains(&v) {
                        return c.err("hue must be in 0..=65535");
                    }
                    patch.hue = Some(v as u16);
                } else {
                    let name = c.ident("colour name")?;
                    match colors.iter().find(|col| col.name.eq_ignore_ascii_case(&name)) {
                        Some(col) => patch.hue = Some(col.hue_center),
                        None => return c.err(format!("unknown colour `{name}`")),
                    }
                }
            }
            ("transition", true) => patch.transition_ms = Some(parse_duration_ms(c)?),
            (other, _) => return c.err(format!("unknown light parameter `{other}`")),
        }
        if !c.eat(",") {
            break;
        }
    }
    if patch.is_empty() {
        return c.err("light action needs at least one parameter");
    }
    Ok(patch)
}

fn parse_action(c: &mut Cursor, colors: &[NamedColor]) -> Result<RuleAction, GrammarError> {
    if c.eat("light") {
        c.expect("(")?;
        let selector = Selector(c.ident("actuator selector")?);
        c.expect(",")?;
        let patch = parse_light_params(c, colors)?;
        c.expect(")")?;
        Ok(RuleAction::SetLight { selector, patch })
    } else if c.eat("relay") {
        c.expect("(")?;
        let selector = Selector(c.ident("actuator selector")?);
        c.expect(",")?;
        let on = parse_on_off(c)?;
        c.expect(")")?;
        Ok(RuleAction::SetRelay { selector, on })
    } else {
        c.err("expected action: light(...) or relay(...)")
    }
}

fn parse_constraint(c: &mut Cursor) -> Result<Constraint, GrammarError> {
    if c.eat("palette") {
        c.expect("(")?;
        let mut allowed = vec![c.ident("colour name")?.to_ascii_lowercase()];
        while c.eat(",") {
            allowed.push(c.ident("colour name")?.to_ascii_lowercase());
        }
        c.expect(")")?;
        Ok(Constraint::Palette { allowed })
    } else if c.eat("transition") {
        c.expect(">=")?;
        let ms = parse_duration_ms(c)?;
        if ms == 0 {
            return c.err("minimum transition must be positive");
        }
        Ok(Constraint::MinTransition { ms })
    } else if c.eat("intensity") {
        c.expect("<=")?;
        Ok(Constraint::MaxIntensity {
            bri: parse_level(c, MAX_BRI as i64, "intensity")?,
        })
    } else if c.eat("modality") {
        c.expect("(")?;
        let name = c.ident("modality")?;
        let modality = match Modality::parse(&name) {
            Some(m) => m,
            None => return c.err(format!("unknown modality `{name}`")),
        };
        c.expect(")")?;
        Ok(Constraint::ModalityOnly { modality })
    } else {
        c.err("expected palette, transition, intensity or modality")
    }
}

/// Parses the structured command grammar without resolving references.
pub fn parse_grammar(text: &str, colors: &[NamedColor]) -> Result<CompiledCommand, GrammarError> {
    let mut c = Cursor::new(text.trim());
    let cmd = if c.eat("when") {
        let trigger = parse_trigger(&mut c)?;
        c.expect("then")?;
        let action = parse_action(&mut c, colors)?;
        CompiledCommand::Rule { trigger, action }
    } else if c.eat("constraint") {
        CompiledCommand::Constraint(parse_constraint(&mut c)?)
    } else if c.eat("now") {
        CompiledCommand::Immediate(parse_action(&mut c, colors)?)
    } else {
        return c.err("expected `when`, `constraint` or `now`");
    };
    if !c.at_end() {
        return c.err(format!("unexpected trailing input `{}`", c.rest()));
    }
    Ok(cmd)
}

// ---------------------------------------------------------------------------
// Compilation

/// Names a command may reference.
#[derive(Debug, Clone, Default)]
pub struct CompileContext {
    pub zones: Vec<Zone>,
    pub actuators: Vec<(String, ActuatorKind)>,
    pub colors: Vec<NamedColor>,
}

impl CompileContext {
    pub fn check(&self, cmd: &CompiledCommand) -> Result<(), CommandError> {
        let check_zone = |z: &str| {
            if self.zones.iter().any(|zone| zone.id == z) {
                Ok(())
            } else {
                Err(CommandError::Reference {
                    kind: "zone",
                    name: z.to_string(),
                })
            }
        };
        let check_action = |a: &RuleAction| {
            let kind = a.actuator_kind();
            if self
                .actuators
                .iter()
                .any(|(id, k)| *k == kind && a.selector().matches(id))
            {
                Ok(())
            } else {
                Err(CommandError::Reference {
                    kind: if kind == ActuatorKind::Light { "light" } else { "relay" },
                    name: a.selector().0.clone(),
                })
            }
        };
        match cmd {
            CompiledCommand::Rule { trigger, action } => {
                if let Some(z) = trigger.zone() {
                    check_zone(z)?;
                }
                check_action(action)
            }
            CompiledCommand::Immediate(action) => check_action(action),
            CompiledCommand::Constraint(Constraint::Palette { allowed }) => {
                for name in allowed {
                    if !self.colors.iter().any(|c| &c.name == name) {
                        return Err(CommandError::Reference {
                            kind: "colour",
                            name: name.clone(),
                        });
                    }
                }
                Ok(())
            }
            CompiledCommand::Constraint(_) => Ok(()),
        }
    }

    fn translation_request(&self, text: &str) -> ProviderRequest {
        let zones = self.zones.iter().map(|z| z.id.clone()).collect::<Vec<_>>().join(", ");
        let actuators = self
            .actuators
            .iter()
            .map(|(id, k)| format!("{id} ({})", if *k == ActuatorKind::Light { "light" } else { "relay" }))
            .collect::<Vec<_>>()
            .join(", ");
        let colors = self.colors.iter().map(|c| c.name.clone()).collect::<Vec<_>>().join(", ");
        ProviderRequest {
            contract: ReplyContract::Translation,
            system: fill_template(
                TRANSLATION_TEMPLATE,
                &[
                    ("ZONES", &zones),
                    ("ACTUATORS", &actuators),
                    ("COLORS", &colors),
                    ("COMMAND", text.trim()),
                ],
            ),
            user: text.trim().to_string(),
        }
    }
}

fn clean_translation(reply: &str) -> &str {
    reply
        .trim()
        .trim_start_matches("```")
        .trim_end_matches("```")
        .trim()
        .trim_matches(|c| c == '"' || c == '`')
        .trim()
}

/// Compiles a director command. Grammar-form text compiles with no provider
/// call; anything else is translated by the provider into grammar form first.
pub fn parse_command(
    text: &str,
    provider: Option<&dyn LanguageModelProvider>,
    ctx: &CompileContext,
) -> Result<ParsedCommand, CommandError> {
    if text.trim().is_empty() {
        return Err(CommandError::Empty);
    }
    let grammar_err = match parse_grammar(text, &ctx.colors) {
        Ok(command) => {
            ctx.check(&command)?;
            return Ok(ParsedCommand {
                source: text.trim().to_string(),
                grammar_form: command.to_string(),
                translated: false,
                command,
            });
        }
        Err(e) => e,
    };
    let Some(provider) = provider else {
        return Err(CommandError::Unparsed {
            grammar: grammar_err.to_string(),
            provider: "no provider configured".into(),
        });
    };
    let reply = match provider.complete(&ctx.translation_request(text)) {
        Ok(r) => r,
        Err(e) => {
            return Err(CommandError::Unparsed {
                grammar: grammar_err.to_string(),
                provider: e.to_string(),
            })
        }
    };
    let candidate = clean_translation(&reply);
    match parse_grammar(candidate, &ctx.colors) {
        Ok(command) => {
            ctx.check(&command)?;
            Ok(ParsedCommand {
                source: text.trim().to_string(),
                grammar_form: command.to_string(),
                translated: true,
                command,
            })
        }
        Err(e) => Err(CommandError::Unparsed {
            grammar: grammar_err.to_string(),
            provider: format!("translation `{candidate}` rejected {e}"),
        }),
    }
}

// ---------------------------------------------------------------------------
// Trigger evaluation

fn inside(snapshot: &EnvironmentSnapshot, zone: &Zone) -> BTreeSet<String> {
    snapshot
        .entities
        .iter()
        .filter(|e| zone_contains(zone, e.position))
        .map(|e| e.id.clone())
        .collect()
}

/// True when some `count` entities are pairwise closer than `threshold`.
pub fn proximity_holds(snapshot: &EnvironmentSnapshot, threshold: f64, count: usize) -> bool {
    let pts: Vec<_> = snapshot.entities.iter().map(|e| e.position).collect();
    if pts.len() < count {
        return false;
    }
    let n = pts.len();
    let close = |i: usize, j: usize| distance(pts[i], pts[j]) < threshold;

    fn extend(
        chosen: &mut Vec<usize>,
        start: usize,
        n: usize,
        need: usize,
        close: &dyn Fn(usize, usize) -> bool,
    ) -> bool {
        if chosen.len() == need {
            return true;
        }
        for k in start..n {
            if chosen.iter().all(|&c| close(c, k)) {
                chosen.push(k);
                if extend(chosen, k + 1, n, need, close) {
                    return true;
                }
                chosen.pop();
            }
        }
        false
    }
    extend(&mut Vec::new(), 0, n, count, &close)
}

fn new_speech<'a>(
    prev: &EnvironmentSnapshot,
    cur: &'a EnvironmentSnapshot,
) -> impl Iterator<Item = &'a crate::model::SpeechEvent> {
    let seen: Vec<_> = prev.recent_speech.clone();
    cur.recent_speech.iter().filter(move |s| !seen.contains(s))
}

fn rule_fires(rule: &DirectorialRule, prev: &EnvironmentSnapshot, cur: &EnvironmentSnapshot, zones: &[Zone]) -> bool {
    let zone = |id: &str| zones.iter().find(|z| z.id == id);
    match &rule.trigger {
        Trigger::ZoneEntry { zone: z } => zone(z).is_some_and(|z| {
            let before = inside(prev, z);
            inside(cur, z).iter().any(|id| !before.contains(id))
        }),
        Trigger::ZoneExit { zone: z } => zone(z).is_some_and(|z| {
            let after = inside(cur, z);
            inside(prev, z).iter().any(|id| !after.contains(id))
        }),
        Trigger::ProximityBelow { threshold, count } => {
            !proximity_holds(prev, *threshold, *count) && proximity_holds(cur, *threshold, *count)
        }
        Trigger::SpeechInZone { zone: z } => zone(z).is_some_and(|z| {
            new_speech(prev, cur).any(|s| s.position.is_some_and(|p| zone_contains(z, p)))
        }),
        Trigger::AnySpeech => new_speech(prev, cur).next().is_some(),
        Trigger::HotspotEmerged { zone: z } => {
            let z = z.as_deref().map(zone);
            if matches!(z, Some(None)) {
                return false;
            }
            cur.hotspots.iter().any(|h| {
                let fresh = !prev.hotspots.iter().any(|p| p.col == h.col && p.row == h.row);
                fresh && z.flatten().is_none_or(|z| zone_contains(z, h.world_center))
            })
        }
    }
}

/// Edge-triggered evaluation: ids of enabled rules whose condition became
/// true between `prev` and `cur`, in declaration order.
pub fn eval_triggers(
    rules: &[DirectorialRule],
    prev: &EnvironmentSnapshot,
    cur: &EnvironmentSnapshot,
    zones: &[Zone],
) -> Vec<String> {
    rules
        .iter()
        .filter(|r| r.enabled && rule_fires(r, prev, cur, zones))
        .map(|r| r.id.clone())
        .collect()
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ActuationTarget {
    Light(LightState),
    Relay(bool),
}

impl ActuationTarget {
    pub fn modality(&self) -> Modality {
        match self {
            ActuationTarget::Light(_) => Modality::Light,
            ActuationTarget::Relay(_) => Modality::Motion,
        }
    }

    pub fn kind(&self) -> ActuatorKind {
        match self {
            ActuationTarget::Light(_) => ActuatorKind::Light,
            ActuationTarget::Relay(_) => ActuatorKind::Relay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProposedAction {
    pub actuator: String,
    pub target: ActuationTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjustment {
    pub field: String,
    pub from: i64,
    pub to: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Validation {
    Valid { action: ProposedAction },
    Clamped { action: ProposedAction, adjustments: Vec<Adjustment> },
    Violation { reasons: Vec<String> },
}

impl Validation {
    pub fn accepted(&self) -> Option<&ProposedAction> {
        match self {
            Validation::Valid { action } | Validation::Clamped { action, .. } => Some(action),
            Validation::Violation { .. } => None,
        }
    }
}

/// Checks one proposed actuation. Durations and intensity are clamped;
/// colour and modality breaches are rejected.
pub fn validate_action(action: &ProposedAction, constraints: &[Constraint], colors: &[NamedColor]) -> Validation {
    let mut reasons = Vec::new();
    for c in constraints {
        match (c, &action.target) {
            (Constraint::ModalityOnly { modality }, t) if t.modality() != *modality => {
                reasons.push(format!(
                    "{} is a {} action but only {modality} is allowed",
                    action.actuator,
                    t.modality()
                ));
            }
            (Constraint::Palette { allowed }, ActuationTarget::Light(s)) if s.on => {
                let ok = allowed
                    .iter()
                    .filter_map(|name| colors.iter().find(|c| &c.name == name))
                    .any(|c| c.contains(s.hue));
                if !ok {
                    reasons.push(format!(
                        "hue {} on {} is outside the allowed palette ({})",
                        s.hue,
                        action.actuator,
                        allowed.join(", ")
                    ));
                }
            }
            _ => {}
        }
    }
    if !reasons.is_empty() {
        return Validation::Violation { reasons };
    }

    let mut adjusted = action.clone();
    let mut adjustments = Vec::new();
    if let ActuationTarget::Light(ref mut s) = adjusted.target {
        for c in constraints {
            match c {
                Constraint::MinTransition { ms } if s.transition_ms < *ms => {
                    adjustments.push(Adjustment {
                        field: "transition_ms".into(),
                        from: s.transition_ms as i64,
                        to: *ms as i64,
                    });
                    s.transition_ms = *ms;
                }
                Constraint::MaxIntensity { bri } if s.bri > *bri => {
                    adjustments.push(Adjustment {
                        field: "bri".into(),
                        from: s.bri as i64,
                        to: *bri as i64,
                    });
                    s.bri = *bri;
                }
                _ => {}
            }
        }
    }
    if adjustments.is_empty() {
        Validation::Valid { action: adjusted }
    } else {
        Validation::Clamped {
            action: adjusted,
            adjustments,
        }
    }
}

// ---------------------------------------------------------------------------
// Prompt section

fn number_word(n: usize) -> String {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    WORDS.get(n).map(|w| w.to_string()).unwrap_or_else(|| n.to_string())
}

fn duration_words(ms: u32) -> String {
    if ms.is_multiple_of(1000) {
        let s = ms / 1000;
        format!("{s} second{}", if s == 1 { "" } else { "s" })
    } else {
        format!("{ms} milliseconds")
    }
}

pub fn describe_constraint(c: &Constraint) -> String {
    match c {
        Constraint::Palette { allowed } => format!("Use only {} light.", join_list(allowed)),
        Constraint::MinTransition { ms } => {
            format!("Make all transitions last at least {}.", duration_words(*ms))
        }
        Constraint::MaxIntensity { bri } => format!(
            "Keep light intensity at or below {} percent.",
            (*bri as f64 * 100.0 / MAX_BRI as f64).round()
        ),
        Constraint::ModalityOnly { modality } => format!("Respond only through {modality}."),
    }
}

fn zone_name<'a>(zones: &'a [Zone], id: &'a str) -> &'a str {
    zones.iter().find(|z| z.id == id).map(|z| z.name.as_str()).unwrap_or(id)
}

fn describe_trigger(t: &Trigger, zones: &[Zone]) -> String {
    match t {
        Trigger::ZoneEntry { zone } => format!("When someone enters the {}", zone_name(zones, zone)),
        Trigger::ZoneExit { zone } => format!("When someone leaves the {}", zone_name(zones, zone)),
        Trigger::ProximityBelow { threshold, count } => format!(
            "When {} participants stand within {} metres of each other",
            number_word(*count),
            fmt_num(*threshold)
        ),
        Trigger::SpeechInZone { zone } => format!("When someone speaks near the {}", zone_name(zones, zone)),
        Trigger::AnySpeech => "When anyone speaks".to_string(),
        Trigger::HotspotEmerged { zone: None } => "When a new hotspot emerges".to_string(),
        Trigger::HotspotEmerged { zone: Some(z) } => {
            format!("When a new hotspot emerges in the {}", zone_name(zones, z))
        }
    }
}

fn describe_action(a: &RuleAction) -> String {
    match a {
        RuleAction::SetRelay { selector, on } => {
            format!("switch {selector} {}", if *on { "on" } else { "off" })
        }
        RuleAction::SetLight { selector, patch } => {
            let mut parts = Vec::new();
            match patch.on {
                Some(true) => parts.push("on".to_string()),
                Some(false) => parts.push("off".to_string()),
                None => {}
            }
            if let Some(b) = patch.bri {
                parts.push(format!(
                    "{} percent intensity",
                    (b as f64 * 100.0 / MAX_BRI as f64).round()
                ));
            }
            if let Some(h) = patch.hue {
                parts.push(format!("hue {h}"));
            }
            if let Some(s) = patch.sat {
                parts.push(format!("saturation {s}"));
            }
            if let Some(t) = patch.transition_ms {
                parts.push(format!("over {}", duration_words(t)));
            }
            format!("set {selector} lights to {}", join_list(&parts))
        }
    }
}

fn sentence(text: &str) -> String {
    let t = text.trim();
    if t.ends_with(['.', '!', '?']) {
        t.to_string()
    } else {
        format!("{t}.")
    }
}

pub fn describe_rule(rule: &DirectorialRule, zones: &[Zone]) -> String {
    let base = match &rule.description {
        Some(d) => sentence(d),
        None => sentence(&format!("{}, {}", describe_trigger(&rule.trigger, zones), describe_action(&rule.action))),
    };
    if rule.enabled {
        base
    } else {
        format!("{base} (disabled)")
    }
}

/// Constraints first, then rules, each in declaration order.
pub fn describe_rules_section(rules: &[DirectorialRule], constraints: &[Constraint], zones: &[Zone]) -> String {
    let mut lines = vec![RULES_HEADER.to_string()];
    lines.extend(constraints.iter().map(|c| format!("- {}", describe_constraint(c))));
    lines.extend(rules.iter().map(|r| format!("- {}", describe_rule(r, zones))));
    if lines.len() == 1 {
        lines.push("- (none)".to_string());
    }
    lines.join("\n")
}

// ---------------------------------------------------------------------------
// Live rule set

/// Versioned rule and constraint set, swapped as a whole by the engine.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectorState {
    pub version: u64,
    pub rules: Vec<DirectorialRule>,
    pub constraints: Vec<Constraint>,
    next_rule: u64,
}

impl DirectorState {
    /// Installs a rule or constraint; returns the immediate action for `now` commands.
    pub fn install(&mut self, parsed: &ParsedCommand) -> Option<RuleAction> {
        match &parsed.command {
            CompiledCommand::Rule { trigger, action } => {
                self.next_rule += 1;
                self.rules.push(DirectorialRule {
                    id: format!("rule-{}", self.next_rule),
                    trigger: trigger.clone(),
                    action: action.clone(),
                    enabled: true,
                    cooldown_ms: 0,
                    description: parsed.translated.then(|| parsed.source.clone()),
                });
                self.version += 1;
                None
            }
            CompiledCommand::Constraint(c) => {
                if !self.constraints.contains(c) {
                    self.constraints.push(c.clone());
                    self.version += 1;
                }
                None
            }
            CompiledCommand::Immediate(a) => Some(a.clone()),
        }
    }

    pub fn set_enabled(&mut self, id: &str, enabled: bool) -> bool {
        match self.rules.iter_mut().find(|r| r.id == id) {
            Some(r) => {
                r.enabled = enabled;
                self.version += 1;
                true
            }
            None => false,
        }
    }

    pub fn rule(&self, id: &str) -> Option<&DirectorialRule> {
        self.rules.iter().find(|r| r.id == id)
    }
}
