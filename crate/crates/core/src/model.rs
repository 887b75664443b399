//! Shared domain types: positions, tracked entities, speech, light states,
//! zones and the versioned environment snapshot.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatgrid::Hotspot;

/// Milliseconds since session start, assigned by the engine on ingest.
pub type Millis = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("coordinate {0} is not finite")]
    NonFinite(&'static str),
    #[error("light field {field} out of range: {value}")]
    LightRange { field: &'static str, value: i64 },
    #[error("invalid zone {id}: {reason}")]
    InvalidZone { id: String, reason: String },
    #[error("invalid speech event: {0}")]
    InvalidSpeech(String),
}

/// A point on the floor plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Result<Self, ModelError> {
        if !x.is_finite() {
            return Err(ModelError::NonFinite("x"));
        }
        if !y.is_finite() {
            return Err(ModelError::NonFinite("y"));
        }
        Ok(Self { x, y })
    }
}

/// Euclidean distance on the floor plane.
pub fn distance(a: Position, b: Position) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Axis-aligned room rectangle `[0, width] x [0, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomBounds {
    pub width: f64,
    pub height: f64,
}

impl RoomBounds {
    pub fn contains(&self, p: Position) -> bool {
        p.x >= 0.0 && p.x <= self.width && p.y >= 0.0 && p.y <= self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Performer,
    Audience,
    Virtual,
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityKind::Performer => "performer",
            EntityKind::Audience => "audience",
            EntityKind::Virtual => "virtual",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedEntity {
    pub id: String,
    pub kind: EntityKind,
    pub position: Position,
    pub last_seen: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechEvent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    pub text: String,
    pub confidence: f64,
    pub timestamp: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<Position>,
}

impl SpeechEvent {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.text.trim().is_empty() {
            return Err(ModelError::InvalidSpeech("text is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(ModelError::InvalidSpeech(format!(
                "confidence {} outside [0,1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// Hue-convention light state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LightState {
    pub on: bool,
    pub bri: u8,
    pub hue: u16,
    pub sat: u8,
    pub transition_ms: u32,
}

pub const MAX_BRI: u8 = 254;
pub const MAX_SAT: u8 = 254;

impl LightState {
    pub const OFF: LightState = LightState {
        on: false,
        bri: 0,
        hue: 0,
        sat: 0,
        transition_ms: 0,
    };

    /// Builds a state from wide integers, rejecting anything out of range.
    pub fn checked(on: bool, bri: i64, hue: i64, sat: i64, transition_ms: i64) -> Result<Self, ModelError> {
        let bri = check_range("bri", bri, 0, MAX_BRI as i64)?;
        let hue = check_range("hue", hue, 0, u16::MAX as i64)?;
        let sat = check_range("sat", sat, 0, MAX_SAT as i64)?;
        let transition_ms = check_range("transition_ms", transition_ms, 0, u32::MAX as i64)?;
        Ok(Self {
            on,
            bri: bri as u8,
            hue: hue as u16,
            sat: sat as u8,
            transition_ms: transition_ms as u32,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        Self::checked(
            self.on,
            self.bri as i64,
            self.hue as i64,
            self.sat as i64,
            self.transition_ms as i64,
        )
        .map(|_| ())
    }
}

fn check_range(field: &'static str, value: i64, lo: i64, hi: i64) -> Result<i64, ModelError> {
    if value < lo || value > hi {
        Err(ModelError::LightRange { field, value })
    } else {
        Ok(value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZoneShape {
    Rectangle { min: Position, max: Position },
    Circle { center: Position, radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub name: String,
    pub shape: ZoneShape,
}

impl Zone {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| ModelError::InvalidZone {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        match &self.shape {
            ZoneShape::Rectangle { min, max } => {
                if !(min.x < max.x && min.y < max.y) {
                    return Err(bad("rectangle min must be strictly below max"));
                }
            }
            ZoneShape::Circle { radius, .. } => {
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(bad("circle radius must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Closed-region containment: boundary points are inside.
pub fn zone_contains(zone: &Zone, p: Position) -> bool {
    match &zone.shape {
        ZoneShape::Rectangle { min, max } => {
            p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y
        }
        ZoneShape::Circle { center, radius } => distance(*center, p) <= *radius,
    }
}

/// Zone ids containing each entity, keyed by entity id.
pub type ZoneMemberships = BTreeMap<String, BTreeSet<String>>;

pub fn zone_memberships(entities: &[TrackedEntity], zones: &[Zone]) -> ZoneMemberships {
    entities
        .iter()
        .map(|e| {
            let inside = zones
                .iter()
                .filter(|z| zone_contains(z, e.position))
                .map(|z| z.id.clone())
                .collect();
            (e.id.clone(), inside)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnvironmentSnapshot {
    pub version: u64,
    pub timestamp: Millis,
    pub entities: Vec<TrackedEntity>,
    pub lights: BTreeMap<String, LightState>,
    #[serde(default)]
    pub relays: BTreeMap<String, bool>,
    pub recent_speech: Vec<SpeechEvent>,
    pub hotspots: Vec<Hotspot>,
}

impl EnvironmentSnapshot {
    pub fn entity(&self, id: &str) -> Option<&TrackedEntity> {
        self.entities.iter().find(|e| e.id == id)
    }

    /// Bumps the version; every mutation path calls this exactly once.
    pub fn touch(&mut self, now: Millis) {
        self.version += 1;
        self.timestamp = self.timestamp.max(now);
    }
}

const NUMBER_WORDS: [&str; 13] = [
    "No", "One", "Two", "Three", "Four", "Five", "Six", "Seven", "Eight", "Nine", "Ten", "Eleven",
    "Twelve",
];

fn count_phrase(n: usize) -> String {
    let noun = if n == 1 { "participant" } else { "participants" };
    match NUMBER_WORDS.get(n) {
        Some(word) => format!("{word} {noun}"),
        None => format!("{n} {noun}"),
    }
}

pub const ENVIRONMENT_HEADER: &str = "[CURRENT ENVIRONMENTAL STATE]";

/// Renders the environment block of the decision prompt.
///
/// Lines are emitted in a fixed order: per-zone participant counts (zones in
/// configuration order, empty zones skipped), participants outside every zone,
/// the most recent utterance, then a hotspot summary. Output depends only on
/// the arguments.
pub fn render_environment_section(snapshot: &EnvironmentSnapshot, zones: &[Zone]) -> String {
    let mut lines = vec![ENVIRONMENT_HEADER.to_string()];

    if snapshot.entities.is_empty() {
        lines.push("- No participants detected.".to_string());
    } else {
        let memberships = zone_memberships(&snapshot.entities, zones);
        for zone in zones {
            let n = memberships.values().filter(|set| set.contains(&zone.id)).count();
            if n > 0 {
                lines.push(format!("- {} near the {}.", count_phrase(n), zone.name));
            }
        }
        let outside = memberships.values().filter(|set| set.is_empty()).count();
        if outside > 0 {
            lines.push(format!("- {} elsewhere in the room.", count_phrase(outside)));
        }
    }

    if let Some(last) = snapshot.recent_speech.last() {
        lines.push(format!("- Recent speech detected: \"{}\"", last.text.trim()));
    }

    if snapshot.hotspots.is_empty() {
        lines.push("- No concentrated activity.".to_string());
    } else {
        // hotspots arrive sorted by heat, so the first is the strongest
        let mut places: Vec<String> = Vec::new();
        for h in &snapshot.hotspots {
            let place = zones
                .iter()
                .find(|z| zone_contains(z, h.world_center))
                .map(|z| format!("the {}", z.name))
                .unwrap_or_else(|| "the open floor".to_string());
            if !places.contains(&place) {
                places.push(place);
            }
        }
        lines.push(format!("- Activity concentrated at {}.", join_list(&places)));
    }

    lines.join("\n")
}

/// "a", "a and b", "a, b and c".
pub fn join_list(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Position {
        Position::new(x, y).unwrap()
    }

    fn rect(id: &str, x0: f64, y0: f64, x1: f64, y1: f64) -> Zone {
        Zone {
            id: id.into(),
            name: id.into(),
            shape: ZoneShape::Rectangle {
                min: p(x0, y0),
                max: p(x1, y1),
            },
        }
    }

    fn circle(id: &str, cx: f64, cy: f64, r: f64) -> Zone {
        Zone {
            id: id.into(),
            name: id.into(),
            shape: ZoneShape::Circle {
                center: p(cx, cy),
                radius: r,
            },
        }
    }

    fn entity(id: &str, x: f64, y: f64) -> TrackedEntity {
        TrackedEntity {
            id: id.into(),
            kind: EntityKind::Audience,
            position: p(x, y),
            last_seen: 0,
            label: None,
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(p(0.0, 0.0), p(3.0, 4.0)), 5.0);
        assert_eq!(distance(p(1.5, 2.5), p(1.5, 2.5)), 0.0);
        assert!((distance(p(0.3, 0.7), p(2.3, 1.7)) - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_positions_rejected() {
        assert!(Position::new(f64::NAN, 0.0).is_err());
        assert!(Position::new(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn zone_examples() {
        assert!(zone_contains(&rect("r", 0.0, 0.0, 2.0, 2.0), p(1.0, 1.0)));
        assert!(zone_contains(&circle("c", 0.0, 0.0, 1.0), p(0.0, 1.0)));
        assert!(!zone_contains(&circle("c", 0.0, 0.0, 1.0), p(0.8, 0.8)));
        assert!(zone_contains(&rect("r", 0.0, 0.0, 2.0, 2.0), p(2.0, 0.0)));
    }

    #[test]
    fn zone_validation() {
        assert!(rect("bad", 1.0, 0.0, 1.0, 2.0).validate().is_err());
        assert!(circle("bad", 0.0, 0.0, 0.0).validate().is_err());
        assert!(circle("ok", 0.0, 0.0, 0.5).validate().is_ok());
    }

    #[test]
    fn light_state_rejects_out_of_range() {
        assert!(LightState::checked(true, 255, 0, 0, 0).is_err());
        assert!(LightState::checked(true, 0, 65536, 0, 0).is_err());
        assert!(LightState::checked(true, 0, 0, 255, 0).is_err());
        assert!(LightState::checked(true, 0, 0, 0, -1).is_err());
        assert!(LightState::checked(true, 254, 65535, 254, 0).is_ok());
    }

    #[test]
    fn render_pillar_scene() {
        let zones = vec![circle("pillar", 5.0, 5.0, 1.5)];
        let snapshot = EnvironmentSnapshot {
            entities: vec![entity("a", 5.0, 5.5), entity("b", 4.5, 5.0)],
            recent_speech: vec![SpeechEvent {
                speaker: Some("a".into()),
                text: "How are you?".into(),
                confidence: 0.9,
                timestamp: 10,
                position: None,
            }],
            ..Default::default()
        };
        let text = render_environment_section(&snapshot, &zones);
        assert!(text.starts_with("[CURRENT ENVIRONMENTAL STATE]\n"));
        assert!(text.contains("- Two participants near the pillar."));
        assert!(text.contains("- Recent speech detected: \"How are you?\""));
        assert_eq!(text, render_environment_section(&snapshot, &zones));
    }

    #[test]
    fn render_empty_snapshot() {
        let text = render_environment_section(&EnvironmentSnapshot::default(), &[]);
        assert_eq!(
            text,
            "[CURRENT ENVIRONMENTAL STATE]\n- No participants detected.\n- No concentrated activity."
        );
    }

    #[test]
    fn render_counts_outside_zones() {
        let zones = vec![rect("stage", 0.0, 0.0, 1.0, 1.0)];
        let snapshot = EnvironmentSnapshot {
            entities: vec![entity("a", 5.0, 5.0)],
            ..Default::default()
        };
        let text = render_environment_section(&snapshot, &zones);
        assert!(text.contains("- One participant elsewhere in the room."));
    }

    #[test]
    fn join_list_forms() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(join_list(&s(&["red"])), "red");
        assert_eq!(join_list(&s(&["red", "green"])), "red and green");
        assert_eq!(join_list(&s(&["red", "green", "blue"])), "red, green and blue");
    }
}
