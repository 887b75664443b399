//! Sensor wire protocol, scripted simulation scenarios, and application of
//! sensor messages to the environment snapshot.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{
    distance, EntityKind, EnvironmentSnapshot, Millis, Position, RoomBounds, SpeechEvent,
    TrackedEntity,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("frame is not valid UTF-8")]
    NotUtf8,
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("decode error on field `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error("value out of range for `{field}`: {reason}")]
    Range { field: String, reason: String },
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("scenario time {t} outside [0, {duration}]")]
    TimeOutOfRange { t: Millis, duration: Millis },
}

fn field_err(field: &str, reason: impl Into<String>) -> IngestError {
    IngestError::Field {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn range_err(field: &str, reason: impl Into<String>) -> IngestError {
    IngestError::Range {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SensorMessage {
    PositionUpdate {
        id: String,
        kind: EntityKind,
        x: f64,
        y: f64,
        source_timestamp: Option<Millis>,
    },
    SpeechTranscript {
        speaker: Option<String>,
        text: String,
        confidence: f64,
        position: Option<Position>,
        source_timestamp: Option<Millis>,
    },
    EntityLost {
        id: String,
    },
}

impl SensorMessage {
    /// Encodes into the sensor wire format (one JSON object per frame).
    pub fn encode(&self) -> String {
        let mut obj = Map::new();
        match self {
            SensorMessage::PositionUpdate {
                id,
                kind,
                x,
                y,
                source_timestamp,
            } => {
                obj.insert("type".into(), "position".into());
                obj.insert("id".into(), id.clone().into());
                obj.insert("kind".into(), kind.to_string().into());
                obj.insert("x".into(), (*x).into());
                obj.insert("y".into(), (*y).into());
                if let Some(t) = source_timestamp {
                    obj.insert("t".into(), (*t).into());
                }
            }
            SensorMessage::SpeechTranscript {
                speaker,
                text,
                confidence,
                position,
                source_timestamp,
            } => {
                obj.insert("type".into(), "speech".into());
                if let Some(s) = speaker {
                    obj.insert("speaker".into(), s.clone().into());
                }
                obj.insert("text".into(), text.clone().into());
                obj.insert("confidence".into(), (*confidence).into());
                if let Some(p) = position {
                    obj.insert("x".into(), p.x.into());
                    obj.insert("y".into(), p.y.into());
                }
                if let Some(t) = source_timestamp {
                    obj.insert("t".into(), (*t).into());
                }
            }
            SensorMessage::EntityLost { id } => {
                obj.insert("type".into(), "lost".into());
                obj.insert("id".into(), id.clone().into());
            }
        }
        Value::Object(obj).to_string()
    }

    pub fn is_speech(&self) -> bool {
        matches!(self, SensorMessage::SpeechTranscript { .. })
    }
}

fn req_str(obj: &Map<String, Value>, field: &str) -> Result<String, IngestError> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(field_err(field, format!("expected string, got {other}"))),
        None => Err(field_err(field, "missing")),
    }
}

fn opt_str(obj: &Map<String, Value>, field: &str) -> Result<Option<String>, IngestError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(other) => Err(field_err(field, format!("expected string, got {other}"))),
    }
}

fn req_num(obj: &Map<String, Value>, field: &str) -> Result<f64, IngestError> {
    match obj.get(field) {
        Some(Value::Number(n)) => {
            let v = n.as_f64().ok_or_else(|| field_err(field, "not representable"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(range_err(field, "not finite"))
            }
        }
        Some(other) => Err(field_err(field, format!("expected number, got {other}"))),
        None => Err(field_err(field, "missing")),
    }
}

fn opt_num(obj: &Map<String, Value>, field: &str) -> Result<Option<f64>, IngestError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(_) => req_num(obj, field).map(Some),
    }
}

fn opt_time(obj: &Map<String, Value>, field: &str) -> Result<Option<Millis>, IngestError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n
            .as_u64()
            .map(Some)
            .ok_or_else(|| range_err(field, "expected non-negative integer milliseconds")),
        Some(other) => Err(field_err(field, format!("expected integer, got {other}"))),
    }
}

/// Decodes one sensor frame. Unknown fields are ignored; unknown `type`
/// values are rejected.
pub fn decode_sensor_message(payload: &[u8]) -> Result<SensorMessage, IngestError> {
    let text = std::str::from_utf8(payload).map_err(|_| IngestError::NotUtf8)?;
    let value: Value =
        serde_json::from_str(text.trim()).map_err(|e| IngestError::Malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| IngestError::Malformed("frame is not a JSON object".into()))?;
    let kind = req_str(obj, "type")?;
    match kind.as_str() {
        "position" => {
            let id = req_str(obj, "id")?;
            let x = req_num(obj, "x")?;
            let y = req_num(obj, "y")?;
            let kind = match obj.get("kind") {
                Some(v) => serde_json::from_value::<EntityKind>(v.clone())
                    .map_err(|_| field_err("kind", format!("unknown entity kind {v}")))?,
                None => return Err(field_err("kind", "missing")),
            };
            let source_timestamp = opt_time(obj, "t")?;
            Ok(SensorMessage::PositionUpdate {
                id,
                kind,
                x,
                y,
                source_timestamp,
            })
        }
        "speech" => {
            let speaker = opt_str(obj, "speaker")?;
            let text = req_str(obj, "text")?;
            if text.trim().is_empty() {
                return Err(range_err("text", "empty after trimming"));
            }
            let confidence = req_num(obj, "confidence")?;
            if !(0.0..=1.0).contains(&confidence) {
                return Err(range_err("confidence", format!("{confidence} outside [0,1]")));
            }
            let position = match (opt_num(obj, "x")?, opt_num(obj, "y")?) {
                (Some(x), Some(y)) => Some(Position { x, y }),
                (None, None) => None,
                (Some(_), None) => return Err(field_err("y", "missing while x is present")),
                (None, Some(_)) => return Err(field_err("x", "missing while y is present")),
            };
            let source_timestamp = opt_time(obj, "t")?;
            Ok(SensorMessage::SpeechTranscript {
                speaker,
                text,
                confidence,
                position,
                source_timestamp,
            })
        }
        "lost" => Ok(SensorMessage::EntityLost {
            id: req_str(obj, "id")?,
        }),
        other => Err(IngestError::UnknownType(other.to_string())),
    }
}

/// Decodes a newline-delimited batch (HTTP POST ingest). Blank lines are skipped.
pub fn decode_batch(payload: &[u8]) -> Result<Vec<SensorMessage>, IngestError> {
    let text = std::str::from_utf8(payload).map_err(|_| IngestError::NotUtf8)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| decode_sensor_message(l.as_bytes()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t_ms: Millis,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAgent {
    pub id: String,
    pub kind: EntityKind,
    pub waypoints: Vec<Waypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub t_ms: Millis,
    #[serde(default)]
    pub speaker: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub duration_ms: Millis,
    pub agents: Vec<ScenarioAgent>,
    #[serde(default)]
    pub utterances: Vec<Utterance>,
}

impl ScenarioScript {
    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        serde_json::from_str(text).map_err(|e| IngestError::Scenario(e.to_string()))
    }

    pub fn validate(&self, bounds: RoomBounds) -> Result<(), IngestError> {
        let bad = |m: String| Err(IngestError::Scenario(m));
        for agent in &self.agents {
            if agent.waypoints.is_empty() {
                return bad(format!("agent {} has no waypoints", agent.id));
            }
            for pair in agent.waypoints.windows(2) {
                if pair[1].t_ms <= pair[0].t_ms {
                    return bad(format!("agent {} waypoint times not strictly increasing", agent.id));
                }
            }
            for w in &agent.waypoints {
                let p = Position::new(w.x, w.y)
                    .map_err(|e| IngestError::Scenario(format!("agent {}: {e}", agent.id)))?;
                if !bounds.contains(p) {
                    return bad(format!("agent {} waypoint ({}, {}) outside room", agent.id, w.x, w.y));
                }
            }
        }
        for u in &self.utterances {
            if u.t_ms > self.duration_ms {
                return bad(format!("utterance at {} after scenario end", u.t_ms));
            }
            if u.text.trim().is_empty() {
                return bad(format!("utterance at {} has empty text", u.t_ms));
            }
        }
        Ok(())
    }
}

/// Position of an agent at `t`, held at the first/last waypoint outside its span.
pub fn agent_position(agent: &ScenarioAgent, t: Millis) -> Position {
    let wps = &agent.waypoints;
    let first = &wps[0];
    let last = &wps[wps.len() - 1];
    if t <= first.t_ms {
        return Position { x: first.x, y: first.y };
    }
    if t >= last.t_ms {
        return Position { x: last.x, y: last.y };
    }
    let i = wps.partition_point(|w| w.t_ms <= t) - 1;
    let (a, b) = (&wps[i], &wps[i + 1]);
    if t == a.t_ms {
        return Position { x: a.x, y: a.y };
    }
    let frac = (t - a.t_ms) as f64 / (b.t_ms - a.t_ms) as f64;
    Position {
        x: lerp_clamped(a.x, b.x, frac),
        y: lerp_clamped(a.y, b.y, frac),
    }
}

fn lerp_clamped(a: f64, b: f64, frac: f64) -> f64 {
    let v = a + (b - a) * frac;
    v.clamp(a.min(b), a.max(b))
}

/// Messages the simulator emits at `t_ms`: one position per agent, plus a
/// transcript (confidence 1.0) for each utterance in `(prev_ms, t_ms]`, or
/// `[0, t_ms]` on the first step.
pub fn step_scenario(
    script: &ScenarioScript,
    prev_ms: Option<Millis>,
    t_ms: Millis,
) -> Result<Vec<SensorMessage>, IngestError> {
    if t_ms > script.duration_ms {
        return Err(IngestError::TimeOutOfRange {
            t: t_ms,
            duration: script.duration_ms,
        });
    }
    let mut out: Vec<SensorMessage> = script
        .agents
        .iter()
        .map(|agent| {
            let p = agent_position(agent, t_ms);
            SensorMessage::PositionUpdate {
                id: agent.id.clone(),
                kind: agent.kind,
                x: p.x,
                y: p.y,
                source_timestamp: Some(t_ms),
            }
        })
        .collect();
    for u in &script.utterances {
        let due = match prev_ms {
            Some(prev) => u.t_ms > prev && u.t_ms <= t_ms,
            None => u.t_ms <= t_ms,
        };
        if due {
            out.push(SensorMessage::SpeechTranscript {
                speaker: u.speaker.clone(),
                text: u.text.clone(),
                confidence: 1.0,
                position: None,
                source_timestamp: Some(u.t_ms),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApplyParams {
    pub staleness_ms: Millis,
    pub speech_window_ms: Millis,
    pub attribution_radius: f64,
}

impl Default for ApplyParams {
    fn default() -> Self {
        Self {
            staleness_ms: 2000,
            speech_window_ms: 15_000,
            attribution_radius: 1.5,
        }
    }
}

fn nearest_entity(entities: &[TrackedEntity], p: Position, radius: f64) -> Option<&TrackedEntity> {
    entities
        .iter()
        .map(|e| (distance(e.position, p), e))
        .filter(|(d, _)| *d <= radius)
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)))
        .map(|(_, e)| e)
}

/// Removes entities older than the staleness horizon and speech older than
/// the window. Returns true when anything was removed.
pub fn prune(snapshot: &mut EnvironmentSnapshot, now: Millis, params: &ApplyParams) -> bool {
    let before = (snapshot.entities.len(), snapshot.recent_speech.len());
    snapshot
        .entities
        .retain(|e| now.saturating_sub(e.last_seen) <= params.staleness_ms);
    snapshot
        .recent_speech
        .retain(|s| now.saturating_sub(s.timestamp) <= params.speech_window_ms);
    before != (snapshot.entities.len(), snapshot.recent_speech.len())
}

/// Applies one decoded message at engine time `now`, returning the next snapshot.
pub fn apply_message(
    snapshot: &EnvironmentSnapshot,
    msg: &SensorMessage,
    now: Millis,
    params: &ApplyParams,
) -> EnvironmentSnapshot {
    let mut next = snapshot.clone();
    match msg {
        SensorMessage::PositionUpdate { id, kind, x, y, .. } => {
            let position = Position { x: *x, y: *y };
            match next.entities.iter_mut().find(|e| &e.id == id) {
                Some(e) => {
                    e.position = position;
                    e.kind = *kind;
                    e.last_seen = e.last_seen.max(now);
                }
                None => next.entities.push(TrackedEntity {
                    id: id.clone(),
                    kind: *kind,
                    position,
                    last_seen: now,
                    label: None,
                }),
            }
        }
        SensorMessage::SpeechTranscript {
            speaker,
            text,
            confidence,
            position,
            ..
        } => {
            let (speaker, position) = match (speaker, position) {
                (Some(s), Some(p)) => (Some(s.clone()), Some(*p)),
                (Some(s), None) => (Some(s.clone()), next.entity(s).map(|e| e.position)),
                (None, Some(p)) => (
                    nearest_entity(&next.entities, *p, params.attribution_radius).map(|e| e.id.clone()),
                    Some(*p),
                ),
                (None, None) => (None, None),
            };
            next.recent_speech.push(SpeechEvent {
                speaker,
                text: text.clone(),
                confidence: *confidence,
                timestamp: now,
                position,
            });
        }
        SensorMessage::EntityLost { id } => {
            next.entities.retain(|e| &e.id != id);
        }
    }
    prune(&mut next, now, params);
    next.touch(now);
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_position() {
        let m = decode_sensor_message(
            br#"{"type":"position","id":"a1","kind":"audience","x":1.0,"y":2.0,"t":120}"#,
        )
        .unwrap();
        assert_eq!(
            m,
            SensorMessage::PositionUpdate {
                id: "a1".into(),
                kind: EntityKind::Audience,
                x: 1.0,
                y: 2.0,
                source_timestamp: Some(120)
            }
        );
    }

    #[test]
    fn decode_speech_without_speaker() {
        let m = decode_sensor_message(
            br#"{"type":"speech","text":"How are you?","confidence":0.9,"t":500}"#,
        )
        .unwrap();
        assert_eq!(
            m,
            SensorMessage::SpeechTranscript {
                speaker: None,
                text: "How are you?".into(),
                confidence: 0.9,
                position: None,
                source_timestamp: Some(500)
            }
        );
    }

    #[test]
    fn decode_errors_name_the_field() {
        let err = decode_sensor_message(br#"{"type":"position","id":"a1","x":"oops"}"#).unwrap_err();
        assert!(matches!(err, IngestError::Field { ref field, .. } if field == "x"), "{err:?}");

        let err = decode_sensor_message(br#"{"type":"teleport","id":"a1"}"#).unwrap_err();
        assert_eq!(err, IngestError::UnknownType("teleport".into()));

        let err =
            decode_sensor_message(br#"{"type":"speech","text":"hi","confidence":1.5}"#).unwrap_err();
        assert!(matches!(err, IngestError::Range { ref field, .. } if field == "confidence"));

        let err = decode_sensor_message(br#"{"type":"speech","text":"  ","confidence":0.5}"#)
            .unwrap_err();
        assert!(matches!(err, IngestError::Range { ref field, .. } if field == "text"));

        assert_eq!(decode_sensor_message(&[0xff, 0xfe]).unwrap_err(), IngestError::NotUtf8);
        assert!(matches!(
            decode_sensor_message(b"not json").unwrap_err(),
            IngestError::Malformed(_)
        ));
    }

    #[test]
    fn decode_ignores_unknown_fields() {
        let m = decode_sensor_message(br#"{"type":"lost","id":"z","extra":[1,2]}"#).unwrap();
        assert_eq!(m, SensorMessage::EntityLost { id: "z".into() });
    }

    fn script(waypoints: Vec<(Millis, f64, f64)>) -> ScenarioScript {
        ScenarioScript {
            duration_ms: 2000,
            agents: vec![ScenarioAgent {
                id: "v1".into(),
                kind: EntityKind::Virtual,
                waypoints: waypoints
                    .into_iter()
                    .map(|(t_ms, x, y)| Waypoint { t_ms, x, y })
                    .collect(),
            }],
            utterances: vec![
                Utterance {
                    t_ms: 500,
                    speaker: Some("v1".into()),
                    text: "hello".into(),
                },
                Utterance {
                    t_ms: 1000,
                    speaker: None,
                    text: "again".into(),
                },
            ],
        }
    }

    fn position_of(msgs: &[SensorMessage]) -> (f64, f64) {
        match &msgs[0] {
            SensorMessage::PositionUpdate { x, y, .. } => (*x, *y),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interpolation_examples() {
        let s = script(vec![(0, 0.0, 0.0), (1000, 2.0, 2.0)]);
        assert_eq!(position_of(&step_scenario(&s, None, 500).unwrap()), (1.0, 1.0));
        assert_eq!(position_of(&step_scenario(&s, None, 1000).unwrap()), (2.0, 2.0));
        assert_eq!(position_of(&step_scenario(&s, None, 1800).unwrap()), (2.0, 2.0));

        let s = script(vec![(0, 0.0, 0.0), (1000, 3.0, 0.0), (2000, 3.0, 4.0)]);
        assert_eq!(position_of(&step_scenario(&s, None, 1500).unwrap()), (3.0, 2.0));
    }

    #[test]
    fn utterances_fire_once_in_half_open_window() {
        let s = script(vec![(0, 0.0, 0.0), (1000, 2.0, 2.0)]);
        let speech = |prev, t| {
            step_scenario(&s, prev, t)
                .unwrap()
                .into_iter()
                .filter(|m| m.is_speech())
                .count()
        };
        assert_eq!(speech(None, 400), 0);
        assert_eq!(speech(Some(400), 500), 1);
        assert_eq!(speech(Some(500), 600), 0);
        assert_eq!(speech(Some(900), 1000), 1);
        assert_eq!(speech(None, 1000), 2);
        assert!(step_scenario(&s, None, 2001).is_err());
    }

    #[test]
    fn scenario_validation() {
        let bounds = RoomBounds { width: 5.0, height: 5.0 };
        assert!(script(vec![(0, 0.0, 0.0), (1000, 2.0, 2.0)]).validate(bounds).is_ok());
        assert!(script(vec![(0, 0.0, 0.0), (0, 2.0, 2.0)]).validate(bounds).is_err());
        assert!(script(vec![(0, 0.0, 0.0), (10, 6.0, 2.0)]).validate(bounds).is_err());
        let mut late = script(vec![(0, 0.0, 0.0)]);
        late.utterances[0].t_ms = 5000;
        assert!(late.validate(bounds).is_err());
    }

    fn pos(id: &str, x: f64, y: f64) -> SensorMessage {
        SensorMessage::PositionUpdate {
            id: id.into(),
            kind: EntityKind::Audience,
            x,
            y,
            source_timestamp: None,
        }
    }

    #[test]
    fn upsert_and_eviction() {
        let params = ApplyParams::default();
        let s0 = EnvironmentSnapshot::default();
        let s1 = apply_message(&s0, &pos("a", 1.0, 1.0), 0, &params);
        assert_eq!(s1.entities.len(), 1);
        assert!(s1.version > s0.version);
        let s2 = apply_message(&s1, &pos("a", 2.0, 1.0), 100, &params);
        assert_eq!(s2.entities.len(), 1);
        assert_eq!(s2.entities[0].position, Position { x: 2.0, y: 1.0 });
        assert_eq!(s2.entities[0].last_seen, 100);

        let s3 = apply_message(&s2, &pos("b", 3.0, 3.0), 2100, &params);
        assert_eq!(s3.entities.len(), 2);
        let s4 = apply_message(&s3, &pos("b", 3.0, 3.0), 2101, &params);
        assert_eq!(s4.entities.len(), 1, "a last seen at 100 is stale at 2101");

        let s5 = apply_message(&s4, &SensorMessage::EntityLost { id: "b".into() }, 2200, &params);
        assert!(s5.entities.is_empty());
    }

    #[test]
    fn eviction_example_from_time_zero() {
        let params = ApplyParams::default();
        let s = apply_message(&EnvironmentSnapshot::default(), &pos("a", 1.0, 1.0), 0, &params);
        let s = apply_message(&s, &pos("b", 1.0, 1.0), 2500, &params);
        assert!(s.entity("a").is_none());
    }

    #[test]
    fn speech_attribution() {
        let params = ApplyParams::default();
        let mut s = EnvironmentSnapshot::default();
        s = apply_message(&s, &pos("near", 1.0, 1.0), 0, &params);
        s = apply_message(&s, &pos("far", 4.0, 4.0), 0, &params);
        let heard = |p: Option<Position>, speaker: Option<&str>| SensorMessage::SpeechTranscript {
            speaker: speaker.map(String::from),
            text: "hi".into(),
            confidence: 0.8,
            position: p,
            source_timestamp: None,
        };
        let s1 = apply_message(&s, &heard(Some(Position { x: 1.5, y: 1.5 }), None), 10, &params);
        assert_eq!(s1.recent_speech[0].speaker.as_deref(), Some("near"));

        let s2 = apply_message(&s, &heard(Some(Position { x: 2.5, y: 2.5 }), None), 10, &params);
        assert_eq!(s2.recent_speech[0].speaker, None);

        let s3 = apply_message(&s, &heard(None, Some("far")), 10, &params);
        assert_eq!(s3.recent_speech[0].position, Some(Position { x: 4.0, y: 4.0 }));
    }

    #[test]
    fn speech_window_prunes_old_events() {
        let params = ApplyParams {
            speech_window_ms: 1000,
            staleness_ms: 100_000,
            ..Default::default()
        };
        let say = |t: &str| SensorMessage::SpeechTranscript {
            speaker: None,
            text: t.into(),
            confidence: 1.0,
            position: None,
            source_timestamp: None,
        };
        let s = apply_message(&EnvironmentSnapshot::default(), &say("one"), 0, &params);
        let s = apply_message(&s, &say("two"), 900, &params);
        assert_eq!(s.recent_speech.len(), 2);
        let s = apply_message(&s, &say("three"), 1500, &params);
        let texts: Vec<_> = s.recent_speech.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(texts, vec!["two", "three"]);
    }
}
