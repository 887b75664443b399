//! Engine configuration: one JSON document, validated up front.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuation::{Actuator, PhysicalBinding};
use crate::decision::TriggerPolicy;
use crate::director::{default_colors, parse_grammar, ActuatorKind, CompileContext, CompiledCommand, NamedColor};
use crate::heatgrid::HeatGridParams;
use crate::ingest::ApplyParams;
use crate::memory::MemoryParams;
use crate::model::{LightState, Millis, RoomBounds, Zone};
use crate::provider::{LanguageModelProvider, MockProvider, RemoteProvider, RemoteSettings, ScriptedProvider};
use crate::session_log::sha256_hex;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("rule {index} `{command}`: {reason}")]
    Rule {
        index: usize,
        command: String,
        reason: String,
    },
    #[error("provider: {0}")]
    Provider(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorConfig {
    pub id: String,
    pub kind: ActuatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zone: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<LightState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingConfig {
    pub actuator: String,
    #[serde(flatten)]
    pub binding: PhysicalBinding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderConfig {
    Mock {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        table: Option<PathBuf>,
    },
    Scripted {
        replies: PathBuf,
    },
    Remote(RemoteSettings),
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Mock { table: None }
    }
}

impl ProviderConfig {
    pub fn build(&self) -> Result<Arc<dyn LanguageModelProvider>, ConfigError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })
        };
        let err = |e: crate::provider::ProviderError| ConfigError::Provider(e.to_string());
        Ok(match self {
            ProviderConfig::Mock { table: None } => Arc::new(MockProvider::holding()),
            ProviderConfig::Mock { table: Some(p) } => Arc::new(MockProvider::from_json(&read(p)?).map_err(err)?),
            ProviderConfig::Scripted { replies } => Arc::new(ScriptedProvider::from_json(&read(replies)?).map_err(err)?),
            ProviderConfig::Remote(settings) => Arc::new(RemoteProvider::new(settings.clone()).map_err(err)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RuleConfig {
    Command(String),
    Detailed {
        command: String,
        #[serde(default)]
        cooldown_ms: u64,
        #[serde(default = "yes")]
        enabled: bool,
    },
}

fn yes() -> bool {
    true
}

impl RuleConfig {
    pub fn command(&self) -> &str {
        match self {
            RuleConfig::Command(c) | RuleConfig::Detailed { command: c, .. } => c,
        }
    }

    pub fn cooldown_ms(&self) -> u64 {
        match self {
            RuleConfig::Command(_) => 0,
            RuleConfig::Detailed { cooldown_ms, .. } => *cooldown_ms,
        }
    }

    pub fn enabled(&self) -> bool {
        match self {
            RuleConfig::Command(_) => true,
            RuleConfig::Detailed { enabled, .. } => *enabled,
        }
    }
}

fn default_tick_hz() -> f64 {
    10.0
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("stagehand-data")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub room: RoomBounds,
    pub zones: Vec<Zone>,
    pub actuators: Vec<ActuatorConfig>,
    #[serde(default)]
    pub bindings: Vec<BindingConfig>,
    #[serde(default = "default_colors")]
    pub colors: Vec<NamedColor>,
    #[serde(default)]
    pub heatgrid: HeatGridParams,
    #[serde(default)]
    pub policy: TriggerPolicy,
    #[serde(default)]
    pub memory: MemoryParams,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub sensing: ApplyParams,
    #[serde(default = "default_tick_hz")]
    pub tick_hz: f64,
    #[serde(default)]
    pub hash_entity_ids: bool,
    #[serde(default)]
    pub log_full_prompts: bool,
    /// Grammar-form commands compiled at startup, in order.
    #[serde(default)]
    pub commands: Vec<RuleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub framing: Option<String>,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
}

impl EngineConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: EngineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file; relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: EngineConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut cfg.provider {
            ProviderConfig::Mock { table: Some(p) } => resolve(p),
            ProviderConfig::Scripted { replies } => resolve(replies),
            _ => {}
        }
        resolve(&mut cfg.data_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn tick_period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.tick_hz)
    }

    pub fn tick_ms(&self) -> Millis {
        (1000.0 / self.tick_hz).round().max(1.0) as Millis
    }

    pub fn compile_context(&self) -> CompileContext {
        CompileContext {
            zones: self.zones.clone(),
            actuators: self.actuators.iter().map(|a| (a.id.clone(), a.kind)).collect(),
            colors: self.colors.clone(),
        }
    }

    pub fn build_actuators(&self) -> Vec<Actuator> {
        self.actuators
            .iter()
            .map(|a| {
                let mut act = match a.kind {
                    ActuatorKind::Light => Actuator::light(&a.id, a.zone.as_deref(), a.initial.unwrap_or(LightState::OFF)),
                    ActuatorKind::Relay => Actuator::relay(&a.id, a.zone.as_deref()),
                };
                act.binding = self
                    .bindings
                    .iter()
                    .find(|b| b.actuator == a.id)
                    .map(|b| b.binding.clone());
                act
            })
            .collect()
    }

    /// Compiles the startup commands; the first failure names its command.
    pub fn compile_commands(&self) -> Result<Vec<(CompiledCommand, &RuleConfig)>, ConfigError> {
        let ctx = self.compile_context();
        self.commands
            .iter()
            .enumerate()
            .map(|(i, rc)| {
                let fail = |reason: String| ConfigError::Rule {
                    index: i,
                    command: rc.command().to_string(),
                    reason,
                };
                let cmd = parse_grammar(rc.command(), &self.colors).map_err(|e| fail(e.to_string()))?;
                ctx.check(&cmd).map_err(|e| fail(e.to_string()))?;
                if matches!(cmd, CompiledCommand::Immediate(_)) {
                    return Err(fail("immediate commands are not allowed at startup".into()));
                }
                Ok((cmd, rc))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.room.width > 0.0 && self.room.height > 0.0 && self.room.width.is_finite() && self.room.height.is_finite()) {
            return invalid("room width and height must be positive");
        }
        let mut ids = BTreeSet::new();
        for z in &self.zones {
            z.validate().map_err(|e| ConfigError::Invalid(format!("zone `{}`: {e}", z.id)))?;
            if !ids.insert(z.id.as_str()) {
                return invalid(format!("duplicate zone id `{}`", z.id));
            }
        }
        let mut act_ids = BTreeSet::new();
        for a in &self.actuators {
            if a.id.is_empty() || !act_ids.insert(a.id.as_str()) {
                return invalid(format!("duplicate or empty actuator id `{}`", a.id));
            }
            if let Some(z) = &a.zone {
                if !ids.contains(z.as_str()) {
                    return invalid(format!("actuator `{}` references unknown zone `{z}`", a.id));
                }
            }
            if let Some(s) = &a.initial {
                if a.kind != ActuatorKind::Light {
                    return invalid(format!("relay `{}` cannot have a light state", a.id));
                }
                s.validate().map_err(|e| ConfigError::Invalid(format!("actuator `{}`: {e}", a.id)))?;
            }
        }
        let mut bound = BTreeSet::new();
        for b in &self.bindings {
            let Some(a) = self.actuators.iter().find(|a| a.id == b.actuator) else {
                return invalid(format!("binding references unknown actuator `{}`", b.actuator));
            };
            if !bound.insert(b.actuator.as_str()) {
                return invalid(format!("actuator `{}` is bound twice", b.actuator));
            }
            b.binding
                .validate(&a.id, a.kind)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let mut colours = BTreeSet::new();
        for c in &self.colors {
            if c.hue_tolerance > 32767 || !colours.insert(c.name.as_str()) {
                return invalid(format!("colour `{}` is duplicated or has tolerance above 32767", c.name));
            }
        }
        self.heatgrid.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.policy.validate().map_err(ConfigError::Invalid)?;
        self.memory.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.tick_hz > 0.0 && self.tick_hz <= 1000.0) {
            return invalid("tick_hz must lie in (0, 1000]");
        }
        if !(self.sensing.attribution_radius >= 0.0 && self.sensing.attribution_radius.is_finite()) {
            return invalid("attribution_radius must be non-negative");
        }
        match &self.provider {
            ProviderConfig::Mock { table: Some(p) } | ProviderConfig::Scripted { replies: p } if !p.exists() => {
                return invalid(format!("provider file {} does not exist", p.display()));
            }
            _ => {}
        }
        self.compile_commands()?;
        Ok(())
    }

    /// Hash over everything that shapes behaviour. Provider choice, storage
    /// location, physical bindings and prompt logging are left out so that a
    /// recorded session can be replayed with recorded replies and no hardware.
    pub fn behaviour_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            for key in ["provider", "data_dir", "bindings", "log_full_prompts"] {
                obj.remove(key);
            }
        }
        sha256_hex(v.to_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "room": {"width": 10, "height": 8},
        "zones": [{"id": "pillar", "name": "pillar", "shape": {"circle": {"center": {"x": 5, "y": 4}, "radius": 1.5}}}],
        "actuators": [{"id": "pillar_light", "kind": "light", "zone": "pillar"}, {"id": "fan", "kind": "relay"}],
        "commands": ["when proximity(<2m, 2) then relay(fan, on)", "constraint palette(red,green)"]
    }"#;

    #[test]
    fn minimal_config_loads() {
        let cfg = EngineConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.tick_ms(), 100);
        assert_eq!(cfg.compile_commands().unwrap().len(), 2);
        assert_eq!(cfg.policy, TriggerPolicy::default());
    }

    #[test]
    fn unknown_zone_in_rule_names_the_rule() {
        let text = MINIMAL.replace("proximity(<2m, 2)", "enter(lobby)");
        let err = EngineConfig::from_json(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rule 0"), "{msg}");
        assert!(msg.contains("enter(lobby)"), "{msg}");
        assert!(msg.contains("lobby"), "{msg}");
    }

    #[test]
    fn hash_ignores_provider_and_bindings() {
        let a = EngineConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.provider = ProviderConfig::Remote(RemoteSettings {
            base_url: "http://x".into(),
            model: "m".into(),
            api_key_env: None,
            temperature: 0.0,
            timeout_ms: 1000,
        });
        b.data_dir = "/elsewhere".into();
        assert_eq!(a.behaviour_hash(), b.behaviour_hash());
        b.commands.pop();
        assert_ne!(a.behaviour_hash(), b.behaviour_hash());
    }

    #[test]
    fn binding_must_match_kind() {
        let text = MINIMAL.replace(
            r#""commands""#,
            r#""bindings": [{"actuator": "fan", "bridge": "http://127.0.0.1:1", "key": "k", "physical_id": "1"}], "commands""#,
        );
        assert!(EngineConfig::from_json(&text).is_err());
    }

    #[test]
    fn missing_provider_file_fails() {
        let text = MINIMAL.replace(r#""commands""#, r#""provider": {"kind": "mock", "table": "/no/such/table.json"}, "commands""#);
        assert!(EngineConfig::from_json(&text).is_err());
    }
}
