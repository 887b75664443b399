//! Append-only NDJSON session log with dense sequence numbers, decision
//! entries synced to disk, and run diffing.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::actuation::{ActuationCommand, PhysicalResult};
use crate::decision::ReasoningTrace;
use crate::dramaturgy::DramaturgicalProfile;
use crate::ingest::SensorMessage;
use crate::memory::{Annotation, DramaturgicalScore};
use crate::model::Millis;

pub const LOG_FILE: &str = "log.ndjson";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("session is closed")]
    Closed,
    #[error("log time went backwards: {t} after {last}")]
    TimeWentBackwards { t: Millis, last: Millis },
    #[error("log storage: {0}")]
    Storage(#[from] std::io::Error),
    #[error("log line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("log has no header")]
    MissingHeader,
    #[error("config hash mismatch: log {log}, config {config}")]
    ConfigMismatch { log: String, config: String },
    #[error("runs are not aligned: {0}")]
    Alignment(String),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub session: String,
    pub config_hash: String,
    pub score_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_score: Option<DramaturgicalScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Tick,
    SensorIn {
        message: SensorMessage,
    },
    RuleFired {
        rule: String,
    },
    PromptComposed {
        exchange: String,
        hash: String,
        event: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prompt: Option<String>,
    },
    ProviderReply {
        exchange: String,
        raw: String,
    },
    ProviderFailed {
        exchange: String,
        error: String,
    },
    ActionDispatched {
        command: ActuationCommand,
    },
    ViolationDropped {
        exchange: String,
        actuator: String,
        reasons: Vec<String>,
    },
    TraceRecorded {
        trace: ReasoningTrace,
    },
    Annotation {
        exchange: String,
        annotation: Annotation,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
    ScoreConsolidated {
        version: u64,
        score: DramaturgicalScore,
    },
    PhysicalResult {
        result: PhysicalResult,
    },
    ProfileSet {
        profile: DramaturgicalProfile,
    },
    CommandApplied {
        source: String,
        grammar_form: String,
        translated: bool,
    },
    Panic,
}

impl Payload {
    /// Decision entries are synced to disk before the engine moves on.
    pub fn is_decision(&self) -> bool {
        matches!(
            self,
            Payload::PromptComposed { .. }
                | Payload::ProviderReply { .. }
                | Payload::ProviderFailed { .. }
                | Payload::ActionDispatched { .. }
                | Payload::ViolationDropped { .. }
                | Payload::TraceRecorded { .. }
                | Payload::Panic
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub t_ms: Millis,
    #[serde(flatten)]
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename = "header")]
struct HeaderLine {
    #[serde(flatten)]
    header: LogHeader,
}

enum Sink {
    File { writer: BufWriter<File>, path: PathBuf },
    Memory,
}

pub struct SessionLog {
    header: LogHeader,
    entries: Vec<LogEntry>,
    sink: Sink,
    closed: bool,
}

impl SessionLog {
    pub fn in_memory(header: LogHeader) -> Self {
        Self {
            header,
            entries: Vec::new(),
            sink: Sink::Memory,
            closed: false,
        }
    }

    /// Creates `dir/log.ndjson` and writes the header line.
    pub fn create(dir: &Path, header: LogHeader) -> Result<Self, LogError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new().create_new(true).write(true).open(&path)?;
        let mut writer = BufWriter::new(file);
        let line = serde_json::to_string(&HeaderLine { header: header.clone() }).expect("header serializes");
        writeln!(writer, "{line}")?;
        writer.flush()?;
        writer.get_ref().sync_data()?;
        Ok(Self {
            header,
            entries: Vec::new(),
            sink: Sink::File { writer, path },
            closed: false,
        })
    }

    pub fn header(&self) -> &LogHeader {
        &self.header
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.sink {
            Sink::File { path, .. } => Some(path),
            Sink::Memory => None,
        }
    }

    pub fn next_seq(&self) -> u64 {
        self.entries.len() as u64
    }

    /// Appends one entry. Decision entries reach disk before this returns.
    pub fn append(&mut self, t_ms: Millis, payload: Payload) -> Result<&LogEntry, LogError> {
        if self.closed {
            return Err(LogError::Closed);
        }
        if let Some(last) = self.entries.last() {
            if t_ms < last.t_ms {
                return Err(LogError::TimeWentBackwards { t: t_ms, last: last.t_ms });
            }
        }
        let entry = LogEntry {
            seq: self.next_seq(),
            t_ms,
            payload,
        };
        if let Sink::File { writer, .. } = &mut self.sink {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(writer, "{line}")?;
            if entry.payload.is_decision() {
                writer.flush()?;
                writer.get_ref().sync_data()?;
            }
        }
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }

    /// Flushes buffered sensor entries (called once per tick).
    pub fn flush(&mut self) -> Result<(), LogError> {
        if let Sink::File { writer, .. } = &mut self.sink {
            writer.flush()?;
        }
        Ok(())
    }

    pub fn close(&mut self) -> Result<(), LogError> {
        if self.closed {
            return Ok(());
        }
        if let Sink::File { writer, .. } = &mut self.sink {
            writer.flush()?;
            writer.get_ref().sync_all()?;
        }
        self.closed = true;
        Ok(())
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn to_loaded(&self) -> LoadedLog {
        LoadedLog {
            header: self.header.clone(),
            entries: self.entries.clone(),
            partial: false,
        }
    }
}

impl Drop for SessionLog {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedLog {
    pub header: LogHeader,
    pub entries: Vec<LogEntry>,
    /// True when the file ended in an incomplete or unreadable line.
    pub partial: bool,
}

impl LoadedLog {
    pub fn dispatched(&self) -> Vec<&ActuationCommand> {
        self.entries
            .iter()
            .filter_map(|e| match &e.payload {
                Payload::ActionDispatched { command } => Some(command),
                _ => None,
            })
            .collect()
    }

    /// Canonical byte form of the dispatched sequence.
    pub fn dispatched_bytes(&self) -> String {
        self.dispatched()
            .iter()
            .map(|c| serde_json::to_string(c).expect("command serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn sensor_inputs(&self) -> Vec<(Millis, &SensorMessage)> {
        self.entries
            .iter()
            .filter_map(|e| match &e.payload {
                Payload::SensorIn { message } => Some((e.t_ms, message)),
                _ => None,
            })
            .collect()
    }

    pub fn traces(&self) -> Vec<&ReasoningTrace> {
        self.entries
            .iter()
            .filter_map(|e| match &e.payload {
                Payload::TraceRecorded { trace } => Some(trace),
                _ => None,
            })
            .collect()
    }
}

/// Reads a log file or a session directory containing `log.ndjson`.
/// Reading stops at the first incomplete or corrupt line.
pub fn read_log(path: &Path) -> Result<LoadedLog, LogError> {
    let file = if path.is_dir() { path.join(LOG_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file)?;
    parse_log(&text)
}

pub fn parse_log(text: &str) -> Result<LoadedLog, LogError> {
    let mut lines = text.split_inclusive('\n');
    let first = lines.next().ok_or(LogError::MissingHeader)?;
    let header = serde_json::from_str::<HeaderLine>(first.trim())
        .map_err(|e| LogError::Corrupt {
            line: 1,
            reason: e.to_string(),
        })?
        .header;
    let mut entries: Vec<LogEntry> = Vec::new();
    let mut partial = false;
    for line in lines {
        if !line.ends_with('\n') {
            partial = true;
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogEntry>(line.trim()) {
            Ok(e) if e.seq == entries.len() as u64 => entries.push(e),
            _ => {
                partial = true;
                break;
            }
        }
    }
    Ok(LoadedLog {
        header,
        entries,
        partial,
    })
}

// ---------------------------------------------------------------------------
// Diff

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExchangeView {
    pub prompt_hash: Option<String>,
    pub actions: Vec<ActuationCommand>,
    pub reasoning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeDiff {
    pub exchange: String,
    pub a: Option<ExchangeView>,
    pub b: Option<ExchangeView>,
    pub actions_differ: bool,
    pub reasoning_differs: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub sensor_events: usize,
    pub exchanges: Vec<ExchangeDiff>,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.exchanges.is_empty()
    }
}

fn exchange_views(log: &LoadedLog) -> BTreeMap<String, ExchangeView> {
    let mut views: BTreeMap<String, ExchangeView> = BTreeMap::new();
    for e in &log.entries {
        match &e.payload {
            Payload::PromptComposed { exchange, hash, .. } => {
                views.entry(exchange.clone()).or_default().prompt_hash = Some(hash.clone());
            }
            Payload::ActionDispatched { command } => {
                if let Some(x) = &command.exchange {
                    views.entry(x.clone()).or_default().actions.push(command.clone());
                }
            }
            Payload::TraceRecorded { trace } => {
                views.entry(trace.exchange.clone()).or_default().reasoning = Some(trace.reasoning.clone());
            }
            _ => {}
        }
    }
    views
}

/// Compares two runs of the same scenario exchange by exchange.
pub fn diff(a: &LoadedLog, b: &LoadedLog) -> Result<DiffReport, LogError> {
    let (sa, sb) = (a.sensor_inputs(), b.sensor_inputs());
    let (ma, mb): (Vec<_>, Vec<_>) = (sa.iter().map(|(_, m)| m).collect(), sb.iter().map(|(_, m)| m).collect());
    if ma != mb {
        let at = ma.iter().zip(&mb).position(|(x, y)| x != y).unwrap_or(ma.len().min(mb.len()));
        return Err(LogError::Alignment(format!(
            "sensor sequences diverge at event {at} ({} vs {} events)",
            ma.len(),
            mb.len()
        )));
    }
    let (va, vb) = (exchange_views(a), exchange_views(b));
    let mut ids: Vec<&String> = va.keys().chain(vb.keys()).collect();
    ids.sort();
    ids.dedup();
    let mut exchanges = Vec::new();
    for id in ids {
        let (x, y) = (va.get(id), vb.get(id));
        // issue times may shift with provider latency, so compare targets only
        let strip = |v: Option<&ExchangeView>| {
            v.map(|v| v.actions.iter().map(|c| (c.actuator.clone(), c.target)).collect::<Vec<_>>())
        };
        let actions_differ = strip(x) != strip(y);
        let reasoning_differs = x.map(|v| &v.reasoning) != y.map(|v| &v.reasoning);
        if actions_differ || reasoning_differs {
            exchanges.push(ExchangeDiff {
                exchange: id.clone(),
                a: x.cloned(),
                b: y.cloned(),
                actions_differ,
                reasoning_differs,
            });
        }
    }
    Ok(DiffReport {
        sensor_events: ma.len(),
        exchanges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::director::ActuationTarget;
    use crate::model::EntityKind;

    fn header() -> LogHeader {
        LogHeader {
            session: "s".into(),
            config_hash: "h".into(),
            score_version: 0,
            initial_score: None,
        }
    }

    fn pos(id: &str, x: f64) -> Payload {
        Payload::SensorIn {
            message: SensorMessage::PositionUpdate {
                id: id.into(),
                kind: EntityKind::Performer,
                x,
                y: 1.0,
                source_timestamp: None,
            },
        }
    }

    #[test]
    fn seqs_are_dense_from_zero() {
        let mut log = SessionLog::in_memory(header());
        for i in 0..1000 {
            let e = log.append(i, Payload::Tick).unwrap();
            assert_eq!(e.seq, i);
        }
        assert!(matches!(log.append(5, Payload::Tick), Err(LogError::TimeWentBackwards { .. })));
        log.close().unwrap();
        assert!(matches!(log.append(2000, Payload::Tick), Err(LogError::Closed)));
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = SessionLog::create(dir.path(), header()).unwrap();
        log.append(0, pos("a", 1.0)).unwrap();
        log.append(
            10,
            Payload::ActionDispatched {
                command: ActuationCommand {
                    actuator: "fan".into(),
                    target: ActuationTarget::Relay(true),
                    issued_at: 10,
                    exchange: None,
                },
            },
        )
        .unwrap();
        log.append(20, Payload::Tick).unwrap();
        log.close().unwrap();
        let loaded = read_log(dir.path()).unwrap();
        assert_eq!(loaded.header, header());
        assert_eq!(loaded.entries, log.entries());
        assert!(!loaded.partial);
        assert_eq!(loaded.dispatched().len(), 1);

        let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let cut = &text[..text.len() - 5];
        let partial = parse_log(cut).unwrap();
        assert!(partial.partial);
        assert_eq!(partial.entries.len(), 2);
    }

    #[test]
    fn decision_entries_reach_disk_immediately() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = SessionLog::create(dir.path(), header()).unwrap();
        log.append(0, pos("a", 1.0)).unwrap();
        log.append(
            1,
            Payload::ActionDispatched {
                command: ActuationCommand {
                    actuator: "fan".into(),
                    target: ActuationTarget::Relay(true),
                    issued_at: 1,
                    exchange: None,
                },
            },
        )
        .unwrap();
        // read while the log is still open
        let loaded = read_log(dir.path()).unwrap();
        assert_eq!(loaded.dispatched().len(), 1);
        std::mem::forget(log);
    }

    #[test]
    fn diff_alignment() {
        let mut a = SessionLog::in_memory(header());
        a.append(0, pos("a", 1.0)).unwrap();
        let mut b = SessionLog::in_memory(header());
        b.append(0, pos("a", 1.0)).unwrap();
        assert!(diff(&a.to_loaded(), &b.to_loaded()).unwrap().is_empty());
        b.append(1, pos("b", 2.0)).unwrap();
        assert!(matches!(diff(&a.to_loaded(), &b.to_loaded()), Err(LogError::Alignment(_))));
    }
}
