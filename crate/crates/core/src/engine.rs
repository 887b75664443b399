//! The authoritative loop: ingest, rules, decisions, actuation and logging.
//!
//! All state lives in [`Engine`] and is mutated only through its methods,
//! which take the engine clock explicitly. Provider calls run through a
//! [`DecisionExecutor`] so they can happen off-loop while ticks continue.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuation::{Actuation, ActuationCommand, ActuationError};
use crate::config::{ConfigError, EngineConfig};
use crate::decision::{
    compose_prompt, finalize, should_query, ActionOutcome, Attempt, DecisionEvent, DecisionJob, EventKind, JobOutcome,
    PromptSections, ReasoningTrace, TraceSource,
};
use crate::director::{
    describe_rule, describe_rules_section, eval_triggers, parse_command, parse_grammar, validate_action, ActuationTarget,
    CommandError, CompileContext, CompiledCommand, Constraint, DirectorState, DirectorialRule, ParsedCommand,
    ProposedAction, RuleAction, Validation,
};
use crate::dramaturgy::{
    apply_clarification, interpret_framing, render_context_section, render_unframed_context, ClarificationQuestion,
    DramaturgicalProfile, DramaturgyError, ProfileRevision,
};
use crate::heatgrid::{HeatGrid, HeatGridWire};
use crate::ingest::{apply_message, prune, IngestError, ScenarioScript, SensorMessage};
use crate::memory::{Annotation, DramaturgicalScore, Exchange, Memory, MemoryError, MemoryStore, PatternKey};
use crate::model::{distance, zone_contains, zone_memberships, EnvironmentSnapshot, Millis, Position, ZoneMemberships};
use crate::provider::{LanguageModelProvider, ScriptedProvider, ScriptedReply};
use crate::session_log::{sha256_hex, LoadedLog, LogError, LogHeader, Payload, SessionLog};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Command(#[from] CommandError),
    #[error(transparent)]
    Dramaturgy(#[from] DramaturgyError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Actuation(#[from] ActuationError),
    #[error("sensor message rejected: {0}")]
    Rejected(String),
    #[error("no pending clarification question `{0}`")]
    UnknownQuestion(String),
    #[error("no framing has been given yet")]
    NoProfile,
    #[error("replay: {0}")]
    Replay(String),
}

// ---------------------------------------------------------------------------
// Executors

pub trait DecisionExecutor: Send {
    fn launch(&mut self, job: DecisionJob);
    /// Outcomes ready at `now`, ordered by exchange id.
    fn poll(&mut self, now: Millis) -> Vec<JobOutcome>;
    fn inflight(&self) -> usize;
}

/// Runs each job at launch and hands it back at the next poll.
pub struct InlineExecutor {
    provider: Arc<dyn LanguageModelProvider>,
    ready: Vec<JobOutcome>,
}

impl InlineExecutor {
    pub fn new(provider: Arc<dyn LanguageModelProvider>) -> Self {
        Self {
            provider,
            ready: Vec::new(),
        }
    }
}

impl DecisionExecutor for InlineExecutor {
    fn launch(&mut self, job: DecisionJob) {
        self.ready.push(job.run(self.provider.as_ref()));
    }

    fn poll(&mut self, _now: Millis) -> Vec<JobOutcome> {
        std::mem::take(&mut self.ready)
    }

    fn inflight(&self) -> usize {
        self.ready.len()
    }
}

/// One worker thread per job; completions are collected at poll.
pub struct ThreadedExecutor {
    provider: Arc<dyn LanguageModelProvider>,
    tx: Sender<JobOutcome>,
    rx: Receiver<JobOutcome>,
    inflight: usize,
}

impl ThreadedExecutor {
    pub fn new(provider: Arc<dyn LanguageModelProvider>) -> Self {
        let (tx, rx) = channel();
        Self {
            provider,
            tx,
            rx,
            inflight: 0,
        }
    }
}

impl DecisionExecutor for ThreadedExecutor {
    fn launch(&mut self, job: DecisionJob) {
        let provider = Arc::clone(&self.provider);
        let tx = self.tx.clone();
        self.inflight += 1;
        std::thread::Builder::new()
            .name(format!("decision-{}", job.exchange))
            .spawn(move || {
                let _ = tx.send(job.run(provider.as_ref()));
            })
            .expect("spawn decision worker");
    }

    fn poll(&mut self, _now: Millis) -> Vec<JobOutcome> {
        let mut out: Vec<_> = self.rx.try_iter().collect();
        self.inflight -= out.len();
        out.sort_by(|a, b| a.exchange.cmp(&b.exchange));
        out
    }

    fn inflight(&self) -> usize {
        self.inflight
    }
}

/// Re-runs jobs against the replies recorded in a log and delivers each at
/// the logical time its trace was originally recorded.
pub struct ReplayExecutor {
    attempts: BTreeMap<String, Vec<Attempt>>,
    completions: BTreeMap<String, Millis>,
    held: Vec<(Option<Millis>, JobOutcome)>,
}

impl ReplayExecutor {
    pub fn from_log(log: &LoadedLog) -> Self {
        let mut attempts: BTreeMap<String, Vec<Attempt>> = BTreeMap::new();
        let mut completions = BTreeMap::new();
        for e in &log.entries {
            match &e.payload {
                Payload::ProviderReply { exchange, raw } => {
                    attempts.entry(exchange.clone()).or_default().push(Attempt::Reply { raw: raw.clone() })
                }
                Payload::ProviderFailed { exchange, error } => attempts
                    .entry(exchange.clone())
                    .or_default()
                    .push(Attempt::Failed { error: error.clone() }),
                Payload::TraceRecorded { trace } if matches!(trace.source, TraceSource::Provider { .. }) => {
                    completions.insert(trace.exchange.clone(), e.t_ms);
                }
                _ => {}
            }
        }
        Self {
            attempts,
            completions,
            held: Vec::new(),
        }
    }
}

impl DecisionExecutor for ReplayExecutor {
    fn launch(&mut self, job: DecisionJob) {
        let replies = self.attempts.get(&job.exchange).cloned().unwrap_or_default();
        let provider = ScriptedProvider::new(replies.into_iter().map(|a| match a {
            Attempt::Reply { raw } => ScriptedReply::Text(raw),
            Attempt::Failed { error } => ScriptedReply::Failure { error },
        }));
        let due = self.completions.get(&job.exchange).copied();
        self.held.push((due, job.run(&provider)));
    }

    fn poll(&mut self, now: Millis) -> Vec<JobOutcome> {
        let (ready, held): (Vec<_>, Vec<_>) = std::mem::take(&mut self.held)
            .into_iter()
            .partition(|(due, _)| due.is_some_and(|d| d <= now));
        self.held = held;
        let mut out: Vec<_> = ready.into_iter().map(|(_, o)| o).collect();
        out.sort_by(|a, b| a.exchange.cmp(&b.exchange));
        out
    }

    fn inflight(&self) -> usize {
        self.held.len()
    }
}

// ---------------------------------------------------------------------------
// Engine

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Storage {
    /// Session files under `config.data_dir`.
    Directory,
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutorKind {
    Inline,
    Threaded,
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub session_id: Option<String>,
    pub storage: Storage,
    pub executor: ExecutorKind,
    /// Interpret `config.framing` through the provider at startup.
    pub interpret_framing: bool,
    /// Abort the process right after the first dispatch is persisted.
    pub crash_after_persist: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            session_id: None,
            storage: Storage::Memory,
            executor: ExecutorKind::Inline,
            interpret_framing: true,
            crash_after_persist: false,
        }
    }
}

/// Things subscribers may want to hear about, drained by the service layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EngineEvent {
    Trace {
        trace: ReasoningTrace,
    },
    Rules {
        version: u64,
        rules: Vec<DirectorialRule>,
        constraints: Vec<Constraint>,
        section: String,
    },
    Score {
        score: DramaturgicalScore,
    },
    Profile {
        profile: DramaturgicalProfile,
        questions: Vec<ClarificationQuestion>,
    },
    Dispatched {
        command: ActuationCommand,
    },
}

struct Inflight {
    event: DecisionEvent,
    requested_at: Millis,
    memberships: ZoneMemberships,
    sections: PromptSections,
}

pub fn anonymize(id: &str) -> String {
    format!("anon-{}", &sha256_hex(id.as_bytes())[..12])
}

fn anonymized(msg: &SensorMessage) -> SensorMessage {
    let mut m = msg.clone();
    match &mut m {
        SensorMessage::PositionUpdate { id, .. } | SensorMessage::EntityLost { id } => *id = anonymize(id),
        SensorMessage::SpeechTranscript { speaker: Some(s), .. } => *s = anonymize(s),
        SensorMessage::SpeechTranscript { .. } => {}
    }
    m
}

fn close_pairs(snapshot: &EnvironmentSnapshot, radius: f64) -> usize {
    let e = &snapshot.entities;
    let mut n = 0;
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            if distance(e[i].position, e[j].position) < radius {
                n += 1;
            }
        }
    }
    n
}

fn new_session_id() -> String {
    let ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    format!("session-{ms}")
}

pub struct Engine {
    config: Arc<EngineConfig>,
    ctx: CompileContext,
    provider: Arc<dyn LanguageModelProvider>,
    executor: Box<dyn DecisionExecutor>,
    snapshot: EnvironmentSnapshot,
    grid: HeatGrid,
    director: DirectorState,
    profile: Option<DramaturgicalProfile>,
    questions: Vec<ClarificationQuestion>,
    score: DramaturgicalScore,
    memory: Memory,
    memory_store: Option<MemoryStore>,
    actuation: Actuation,
    log: SessionLog,
    session_dir: Option<PathBuf>,
    exchange_counter: u64,
    last_query: Option<Millis>,
    inflight: BTreeMap<String, Inflight>,
    rule_last_fired: BTreeMap<String, Millis>,
    traces: Vec<ReasoningTrace>,
    events: Vec<EngineEvent>,
    clock: Millis,
    degraded: bool,
    crash_after_persist: bool,
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        provider: Arc<dyn LanguageModelProvider>,
        opts: EngineOptions,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        let session = opts.session_id.clone().unwrap_or_else(new_session_id);
        let (memory_store, session_dir) = match opts.storage {
            Storage::Directory => (
                Some(MemoryStore::new(&config.data_dir, &session)),
                Some(config.data_dir.join("sessions").join(&session)),
            ),
            Storage::Memory => (None, None),
        };
        let mut memory = Memory::new(config.memory, config.colors.clone())?;
        let mut initial = None;
        if let Some(store) = &memory_store {
            let (entries, score) = store.load_production()?;
            let version = score.as_ref().map(|s| s.version).unwrap_or(0);
            memory = memory.with_longterm(entries, version);
            initial = score;
        }
        let executor: Box<dyn DecisionExecutor> = match opts.executor {
            ExecutorKind::Inline => Box::new(InlineExecutor::new(Arc::clone(&provider))),
            ExecutorKind::Threaded => Box::new(ThreadedExecutor::new(Arc::clone(&provider))),
        };
        let mut engine = Self::assemble(config, provider, executor, memory, memory_store, session, session_dir, initial)?;
        engine.crash_after_persist = opts.crash_after_persist;
        if opts.interpret_framing {
            if let Some(text) = engine.config.framing.clone() {
                engine.set_framing(&text, 0)?;
            }
        }
        engine.log.flush()?;
        Ok(engine)
    }

    /// An engine that re-executes a recorded session against its replies.
    pub fn for_replay(config: EngineConfig, log: &LoadedLog) -> Result<Self, EngineError> {
        let mut config = config;
        config.bindings.clear();
        let header = &log.header;
        let memory = Memory::new(config.memory, config.colors.clone())?
            .with_longterm(Vec::new(), header.score_version);
        Self::assemble(
            config,
            Arc::new(crate::provider::Unavailable),
            Box::new(ReplayExecutor::from_log(log)),
            memory,
            None,
            format!("{}-replay", header.session),
            None,
            header.initial_score.clone(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: EngineConfig,
        provider: Arc<dyn LanguageModelProvider>,
        executor: Box<dyn DecisionExecutor>,
        memory: Memory,
        memory_store: Option<MemoryStore>,
        session: String,
        session_dir: Option<PathBuf>,
        initial: Option<DramaturgicalScore>,
    ) -> Result<Self, EngineError> {
        let ctx = config.compile_context();
        let mut director = DirectorState::default();
        for (cmd, rc) in config.compile_commands()? {
            let parsed = ParsedCommand {
                source: rc.command().to_string(),
                grammar_form: cmd.to_string(),
                translated: false,
                command: cmd,
            };
            director.install(&parsed);
            if let (CompiledCommand::Rule { .. }, Some(rule)) = (&parsed.command, director.rules.last_mut()) {
                rule.cooldown_ms = rc.cooldown_ms();
                rule.enabled = rc.enabled();
            }
        }
        let grid = HeatGrid::new(config.room, &config.heatgrid).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let actuation = Actuation::new(config.build_actuators())?;
        let score = match initial {
            Some(s) => s,
            None => DramaturgicalScore {
                version: memory.score_version(),
                context_section: render_unframed_context(),
                rules_section: describe_rules_section(&director.rules, &director.constraints, &config.zones),
                distilled_notes: Vec::new(),
                created_at: 0,
                fallback: false,
            },
        };
        let header = LogHeader {
            session: session.clone(),
            config_hash: config.behaviour_hash(),
            score_version: score.version,
            initial_score: Some(score.clone()),
        };
        let log = match &session_dir {
            Some(dir) => SessionLog::create(dir, header)?,
            None => SessionLog::in_memory(header),
        };
        let mut engine = Self {
            config: Arc::new(config),
            ctx,
            provider,
            executor,
            snapshot: EnvironmentSnapshot::default(),
            grid,
            director,
            profile: None,
            questions: Vec::new(),
            score,
            memory,
            memory_store,
            actuation,
            log,
            session_dir,
            exchange_counter: 0,
            last_query: None,
            inflight: BTreeMap::new(),
            rule_last_fired: BTreeMap::new(),
            traces: Vec::new(),
            events: Vec::new(),
            clock: 0,
            degraded: false,
            crash_after_persist: false,
        };
        engine.refresh_score();
        engine.sync_actuator_state(0);
        Ok(engine)
    }

    // -- accessors ---------------------------------------------------------

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn session_id(&self) -> &str {
        &self.log.header().session
    }

    pub fn session_dir(&self) -> Option<&PathBuf> {
        self.session_dir.as_ref()
    }

    pub fn snapshot(&self) -> &EnvironmentSnapshot {
        &self.snapshot
    }

    pub fn grid(&self) -> &HeatGrid {
        &self.grid
    }

    pub fn heatgrid_wire(&self) -> HeatGridWire {
        self.grid.to_wire(&self.snapshot.hotspots)
    }

    pub fn director(&self) -> &DirectorState {
        &self.director
    }

    pub fn score(&self) -> &DramaturgicalScore {
        &self.score
    }

    pub fn profile(&self) -> Option<&DramaturgicalProfile> {
        self.profile.as_ref()
    }

    pub fn pending_questions(&self) -> &[ClarificationQuestion] {
        &self.questions
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn actuation(&self) -> &Actuation {
        &self.actuation
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    pub fn traces(&self) -> &[ReasoningTrace] {
        &self.traces
    }

    pub fn inflight(&self) -> usize {
        self.executor.inflight()
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded
    }

    pub fn clock(&self) -> Millis {
        self.clock
    }

    pub fn drain_events(&mut self) -> Vec<EngineEvent> {
        std::mem::take(&mut self.events)
    }

    /// Current full prompt, as the next decision would see it.
    pub fn current_prompt(&self) -> PromptSections {
        compose_prompt(&self.score, &self.snapshot, &self.config.zones)
    }

    pub fn rules_event(&self) -> EngineEvent {
        EngineEvent::Rules {
            version: self.director.version,
            rules: self.director.rules.clone(),
            constraints: self.director.constraints.clone(),
            section: self.score.rules_section.clone(),
        }
    }

    // -- internals ---------------------------------------------------------

    fn advance(&mut self, now: Millis) -> Millis {
        self.clock = self.clock.max(now);
        self.clock
    }

    fn record(&mut self, t: Millis, payload: Payload) -> bool {
        match self.log.append(t, payload) {
            Ok(_) => true,
            Err(e) => {
                if !self.degraded {
                    log::error!("session log failed, halting decisions: {e}");
                }
                self.degraded = true;
                false
            }
        }
    }

    fn next_exchange(&mut self) -> String {
        self.exchange_counter += 1;
        format!("ex-{:06}", self.exchange_counter)
    }

    fn persist_memory(&mut self) {
        let records = self.memory.drain_records();
        if let Some(store) = &self.memory_store {
            if let Err(e) = store.append(&records) {
                log::error!("memory journal: {e}");
            }
        }
    }

    fn refresh_score(&mut self) {
        self.score.context_section = self
            .profile
            .as_ref()
            .map(render_context_section)
            .unwrap_or_else(render_unframed_context);
        self.score.rules_section =
            describe_rules_section(&self.director.rules, &self.director.constraints, &self.config.zones);
    }

    fn sync_actuator_state(&mut self, now: Millis) -> bool {
        let lights = self.actuation.light_states(now);
        let relays = self.actuation.relay_states();
        let changed = lights != self.snapshot.lights || relays != self.snapshot.relays;
        self.snapshot.lights = lights;
        self.snapshot.relays = relays;
        changed
    }

    fn memberships(&self) -> ZoneMemberships {
        zone_memberships(&self.snapshot.entities, &self.config.zones)
    }

    fn zone_name_at(&self, p: Position) -> Option<&str> {
        self.config
            .zones
            .iter()
            .find(|z| zone_contains(z, p))
            .map(|z| z.name.as_str())
    }

    /// Persist first, then actuate.
    fn dispatch_command(&mut self, cmd: ActuationCommand, now: Millis) {
        if !self.record(now, Payload::ActionDispatched { command: cmd.clone() }) {
            return;
        }
        if self.crash_after_persist {
            log::error!("crash injection after persisting dispatch of {}", cmd.actuator);
            std::process::abort();
        }
        if let Err(e) = self.actuation.dispatch(&cmd, now) {
            log::error!("dispatch to {} failed: {e}", cmd.actuator);
        }
        self.events.push(EngineEvent::Dispatched { command: cmd });
    }

    fn push_trace(&mut self, trace: ReasoningTrace, now: Millis) {
        let mut logged = trace.clone();
        if !self.config.log_full_prompts {
            logged.prompt = None;
        }
        self.record(now, Payload::TraceRecorded { trace: logged });
        self.traces.push(trace.clone());
        self.events.push(EngineEvent::Trace { trace });
    }

    /// Applies a deterministic action without consulting the provider.
    fn run_direct(&mut self, source: TraceSource, action: &RuleAction, reasoning: String, now: Millis) -> ReasoningTrace {
        let exchange = self.next_exchange();
        let kind = action.actuator_kind();
        let proposed: Vec<ProposedAction> = self
            .actuation
            .all()
            .filter(|a| a.kind() == kind && action.selector().matches(&a.id))
            .map(|a| ProposedAction {
                actuator: a.id.clone(),
                target: match action {
                    RuleAction::SetLight { patch, .. } => {
                        ActuationTarget::Light(patch.resolve(a.light_target().unwrap_or(crate::model::LightState::OFF)))
                    }
                    RuleAction::SetRelay { on, .. } => ActuationTarget::Relay(*on),
                },
            })
            .collect();
        let mut outcomes = Vec::new();
        for p in proposed {
            let validation = validate_action(&p, &self.director.constraints, &self.config.colors);
            let cmd = ActuationCommand::from_validation(&validation, now, Some(exchange.clone()));
            if let Validation::Violation { reasons } = &validation {
                self.record(
                    now,
                    Payload::ViolationDropped {
                        exchange: exchange.clone(),
                        actuator: p.actuator.clone(),
                        reasons: reasons.clone(),
                    },
                );
            }
            let dispatched = cmd.is_some();
            let action = validation.accepted().cloned().unwrap_or(p);
            if let Some(cmd) = cmd {
                self.dispatch_command(cmd, now);
            }
            outcomes.push(ActionOutcome {
                action,
                validation,
                dispatched,
            });
        }
        let trigger = match &source {
            TraceSource::Rule { rule } => {
                let kind = self.director.rule(rule).map(|r| r.trigger.kind_name()).unwrap_or("rule");
                format!("rule:{kind}")
            }
            TraceSource::Director { .. } => "director".to_string(),
            TraceSource::Provider { event, .. } => event.to_string(),
        };
        let trace = ReasoningTrace {
            exchange: exchange.clone(),
            timestamp: now,
            requested_at: now,
            source,
            prompt_hash: None,
            prompt: None,
            raw_replies: Vec::new(),
            reasoning,
            outcomes,
            reprompted: false,
            stale: false,
            latency_ms: 0,
            error: None,
        };
        self.remember(&trace, &trigger, true);
        self.push_trace(trace.clone(), now);
        trace
    }

    fn remember(&mut self, trace: &ReasoningTrace, trigger: &str, from_rule: bool) {
        let actions: Vec<ProposedAction> = trace.dispatched().cloned().collect();
        let exchange = Exchange {
            id: trace.exchange.clone(),
            timestamp: trace.timestamp,
            prompt_digest: trace.prompt_hash.clone().unwrap_or_default(),
            pattern: PatternKey::from_actions(trigger, &actions, &self.config.colors),
            actions,
            reasoning: trace.reasoning.clone(),
            annotation: Annotation::None,
            note: None,
            trigger: trigger.to_string(),
            from_rule,
        };
        if let Err(e) = self.memory.record_exchange(exchange) {
            log::warn!("memory: {e}");
        }
        self.persist_memory();
    }

    fn fire_rules(&mut self, prev: &EnvironmentSnapshot, now: Millis) {
        if self.degraded {
            return;
        }
        let version = self.director.version;
        let fired = eval_triggers(&self.director.rules, prev, &self.snapshot, &self.config.zones);
        for id in fired {
            let Some(rule) = self.director.rule(&id).cloned() else { continue };
            if let Some(last) = self.rule_last_fired.get(&id) {
                if rule.cooldown_ms > 0 && now.saturating_sub(*last) < rule.cooldown_ms {
                    continue;
                }
            }
            self.rule_last_fired.insert(id.clone(), now);
            self.record(now, Payload::RuleFired { rule: id.clone() });
            let reasoning = format!("Directorial rule: {}", describe_rule(&rule, &self.config.zones));
            self.run_direct(TraceSource::Rule { rule: id }, &rule.action, reasoning, now);
        }
        debug_assert_eq!(version, self.director.version, "rule set changed during evaluation");
    }

    fn candidate_events(
        &self,
        prev: &EnvironmentSnapshot,
        msg: Option<&SensorMessage>,
        now: Millis,
    ) -> Vec<DecisionEvent> {
        let mut events = Vec::new();
        if let Some(SensorMessage::SpeechTranscript { .. }) = msg {
            if let Some(s) = self.snapshot.recent_speech.last() {
                let who = s.speaker.clone().unwrap_or_else(|| "Someone".to_string());
                let place = s
                    .position
                    .and_then(|p| self.zone_name_at(p))
                    .map(|z| format!(" near the {z}"))
                    .unwrap_or_default();
                events.push(DecisionEvent {
                    kind: EventKind::Speech,
                    at: now,
                    line: format!("{who} said \"{}\"{place}.", s.text.trim()),
                });
            }
        }
        let before = zone_memberships(&prev.entities, &self.config.zones);
        let after = self.memberships();
        let empty = BTreeSet::new();
        'outer: for id in before.keys().chain(after.keys()) {
            let (b, a) = (before.get(id).unwrap_or(&empty), after.get(id).unwrap_or(&empty));
            for z in &self.config.zones {
                let verb = match (b.contains(&z.id), a.contains(&z.id)) {
                    (false, true) => "entered",
                    (true, false) => "left",
                    _ => continue,
                };
                events.push(DecisionEvent {
                    kind: EventKind::ZoneChange,
                    at: now,
                    line: format!("{id} {verb} the {}.", z.name),
                });
                break 'outer;
            }
        }
        let fresh = self
            .snapshot
            .hotspots
            .iter()
            .find(|h| !prev.hotspots.iter().any(|p| p.col == h.col && p.row == h.row));
        if let Some(h) = fresh {
            let place = self
                .zone_name_at(h.world_center)
                .map(|z| format!("the {z}"))
                .unwrap_or_else(|| "the open floor".to_string());
            events.push(DecisionEvent {
                kind: EventKind::HotspotEmerged,
                at: now,
                line: format!("Activity is concentrating at {place}."),
            });
        }
        let r = self.config.policy.proximity_m;
        let (p0, p1) = (close_pairs(prev, r), close_pairs(&self.snapshot, r));
        if p0 != p1 {
            events.push(DecisionEvent {
                kind: EventKind::ProximityChange,
                at: now,
                line: format!("{p1} pairs of participants are now within {r} metres of each other."),
            });
        }
        events
    }

    fn consider(&mut self, prev: &EnvironmentSnapshot, msg: Option<&SensorMessage>, now: Millis) {
        if self.degraded {
            return;
        }
        for event in self.candidate_events(prev, msg, now) {
            if should_query(&self.config.policy, event.kind, now, self.last_query, self.executor.inflight()) {
                self.launch(event, now);
                return;
            }
        }
    }

    fn launch(&mut self, event: DecisionEvent, now: Millis) {
        let exchange = self.next_exchange();
        let sections = self.current_prompt();
        let hash = sections.hash();
        let prompt = self.config.log_full_prompts.then(|| sections.text());
        if !self.record(
            now,
            Payload::PromptComposed {
                exchange: exchange.clone(),
                hash,
                event: event.line.clone(),
                prompt,
            },
        ) {
            return;
        }
        let memberships = self.memberships();
        let job = DecisionJob {
            exchange: exchange.clone(),
            event: event.clone(),
            sections: sections.clone(),
            constraints: self.director.constraints.clone(),
            colors: self.config.colors.clone(),
            actuators: self.actuation.refs(),
            requested_at: now,
            memberships: memberships.clone(),
        };
        self.inflight.insert(
            exchange,
            Inflight {
                event,
                requested_at: now,
                memberships,
                sections,
            },
        );
        self.last_query = Some(now);
        self.executor.launch(job);
    }

    fn finish(&mut self, outcome: JobOutcome, now: Millis) {
        let Some(info) = self.inflight.remove(&outcome.exchange) else {
            log::warn!("completion for unknown exchange {}", outcome.exchange);
            return;
        };
        for a in &outcome.attempts {
            let payload = match a {
                Attempt::Reply { raw } => Payload::ProviderReply {
                    exchange: outcome.exchange.clone(),
                    raw: raw.clone(),
                },
                Attempt::Failed { error } => Payload::ProviderFailed {
                    exchange: outcome.exchange.clone(),
                    error: error.clone(),
                },
            };
            self.record(now, payload);
        }
        let stale = crate::decision::mark_staleness(&info.memberships, &self.memberships());
        let (outcomes, dropped) = if outcome.error.is_some() {
            (Vec::new(), Vec::new())
        } else {
            finalize(&outcome, &self.director.constraints, &self.config.colors)
        };
        for (actuator, reasons) in dropped {
            self.record(
                now,
                Payload::ViolationDropped {
                    exchange: outcome.exchange.clone(),
                    actuator,
                    reasons,
                },
            );
        }
        if !self.degraded {
            for o in &outcomes {
                if let Some(cmd) = ActuationCommand::from_validation(&o.validation, now, Some(outcome.exchange.clone())) {
                    self.dispatch_command(cmd, now);
                }
            }
        }
        let hash = info.sections.hash();
        let trace = ReasoningTrace {
            exchange: outcome.exchange.clone(),
            timestamp: now,
            requested_at: info.requested_at,
            source: TraceSource::Provider {
                event: info.event.kind,
                line: info.event.line.clone(),
            },
            prompt_hash: Some(hash),
            prompt: Some(info.sections),
            raw_replies: outcome
                .attempts
                .iter()
                .filter_map(|a| match a {
                    Attempt::Reply { raw } => Some(raw.clone()),
                    Attempt::Failed { .. } => None,
                })
                .collect(),
            reasoning: outcome.reasoning.clone(),
            outcomes,
            reprompted: outcome.reprompted,
            stale,
            latency_ms: now.saturating_sub(info.requested_at),
            error: outcome.error.clone(),
        };
        if trace.error.is_none() {
            self.remember(&trace, &info.event.kind.to_string(), false);
        }
        self.push_trace(trace, now);
    }

    // -- inputs ------------------------------------------------------------

    /// Accepts one decoded sensor message at engine time `now`.
    pub fn ingest(&mut self, msg: SensorMessage, now: Millis) -> Result<(), EngineError> {
        if let SensorMessage::PositionUpdate { x, y, id, .. } = &msg {
            if !self.config.room.contains(Position { x: *x, y: *y }) {
                return Err(EngineError::Rejected(format!("position of `{id}` lies outside the room")));
            }
        }
        let msg = if self.config.hash_entity_ids { anonymized(&msg) } else { msg };
        self.ingest_prepared(msg, now);
        Ok(())
    }

    /// Ingest without validation or id hashing (used by replay).
    pub fn ingest_prepared(&mut self, msg: SensorMessage, now: Millis) {
        let now = self.advance(now);
        self.record(now, Payload::SensorIn { message: msg.clone() });
        let prev = self.snapshot.clone();
        self.snapshot = apply_message(&prev, &msg, now, &self.config.sensing);
        self.fire_rules(&prev, now);
        self.consider(&prev, Some(&msg), now);
    }

    /// One loop iteration: completions, pruning, heat grid, rules, physical results.
    pub fn tick(&mut self, now: Millis) {
        let now = self.advance(now);
        self.record(now, Payload::Tick);
        for outcome in self.executor.poll(now) {
            self.finish(outcome, now);
        }
        let prev = self.snapshot.clone();
        let mut changed = prune(&mut self.snapshot, now, &self.config.sensing);
        self.grid = self.grid.tick(&self.snapshot.entities);
        let hotspots = self.grid.hotspots(self.config.heatgrid.theta_rel, self.config.heatgrid.h_min);
        if hotspots != self.snapshot.hotspots {
            self.snapshot.hotspots = hotspots;
            changed = true;
        }
        changed |= self.sync_actuator_state(now);
        if changed {
            self.snapshot.touch(now);
            self.fire_rules(&prev, now);
            self.consider(&prev, None, now);
        }
        for result in self.actuation.drain_physical_results() {
            self.record(now, Payload::PhysicalResult { result });
        }
        if let Err(e) = self.log.flush() {
            log::error!("log flush: {e}");
            self.degraded = true;
        }
    }

    /// Parses and installs a director command (provider translation allowed).
    pub fn apply_command(&mut self, text: &str, now: Millis) -> Result<ParsedCommand, EngineError> {
        let parsed = parse_command(text, Some(self.provider.as_ref()), &self.ctx)?;
        self.install_command(&parsed, now);
        Ok(parsed)
    }

    /// Re-installs a command from its logged grammar form.
    pub fn apply_logged_command(
        &mut self,
        source: &str,
        grammar_form: &str,
        translated: bool,
        now: Millis,
    ) -> Result<ParsedCommand, EngineError> {
        let command = parse_grammar(grammar_form, &self.config.colors).map_err(|e| CommandError::Unparsed {
            grammar: e.to_string(),
            provider: "replayed command".into(),
        })?;
        self.ctx.check(&command)?;
        let parsed = ParsedCommand {
            source: source.to_string(),
            grammar_form: grammar_form.to_string(),
            translated,
            command,
        };
        self.install_command(&parsed, now);
        Ok(parsed)
    }

    fn install_command(&mut self, parsed: &ParsedCommand, now: Millis) {
        let now = self.advance(now);
        self.record(
            now,
            Payload::CommandApplied {
                source: parsed.source.clone(),
                grammar_form: parsed.grammar_form.clone(),
                translated: parsed.translated,
            },
        );
        let immediate = self.director.install(parsed);
        self.refresh_score();
        self.events.push(self.rules_event());
        if let Some(action) = immediate {
            if !self.degraded {
                self.run_direct(
                    TraceSource::Director {
                        command: parsed.source.clone(),
                    },
                    &action,
                    format!("Director command: {}", parsed.source),
                    now,
                );
            }
        }
    }

    pub fn set_framing(
        &mut self,
        text: &str,
        now: Millis,
    ) -> Result<(DramaturgicalProfile, Vec<ClarificationQuestion>), EngineError> {
        let now = self.advance(now);
        let (profile, questions) = interpret_framing(text, self.provider.as_ref(), now)?;
        self.install_profile(profile.clone(), now);
        self.questions = questions.clone();
        self.events.push(EngineEvent::Profile {
            profile: profile.clone(),
            questions: questions.clone(),
        });
        Ok((profile, questions))
    }

    pub fn clarify(
        &mut self,
        question_id: &str,
        answer: &str,
        now: Millis,
    ) -> Result<(DramaturgicalProfile, ProfileRevision), EngineError> {
        let now = self.advance(now);
        let profile = self.profile.clone().ok_or(EngineError::NoProfile)?;
        let q = self
            .questions
            .iter()
            .find(|q| q.id == question_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownQuestion(question_id.to_string()))?;
        let (next, revision) = apply_clarification(&profile, &q, answer, self.provider.as_ref())?;
        self.questions.retain(|x| x.id != question_id);
        self.install_profile(next.clone(), now);
        self.events.push(EngineEvent::Profile {
            profile: next.clone(),
            questions: self.questions.clone(),
        });
        Ok((next, revision))
    }

    pub fn install_profile(&mut self, profile: DramaturgicalProfile, now: Millis) {
        let now = self.advance(now);
        self.record(now, Payload::ProfileSet { profile: profile.clone() });
        self.profile = Some(profile);
        self.refresh_score();
        self.events.push(EngineEvent::Score { score: self.score.clone() });
    }

    pub fn annotate(
        &mut self,
        exchange: &str,
        annotation: Annotation,
        note: Option<String>,
        now: Millis,
    ) -> Result<f64, EngineError> {
        let now = self.advance(now);
        let weight = self.memory.annotate(exchange, annotation, note.clone())?;
        self.record(
            now,
            Payload::Annotation {
                exchange: exchange.to_string(),
                annotation,
                note,
            },
        );
        self.persist_memory();
        Ok(weight)
    }

    /// Promotes candidates and builds a new score; the provider summarises
    /// notes when it can.
    pub fn consolidate(&mut self, now: Millis) -> DramaturgicalScore {
        let now = self.advance(now);
        self.memory.promote();
        let score = self.memory.consolidate(
            self.profile.as_ref(),
            &self.director.rules,
            &self.director.constraints,
            &self.config.zones,
            Some(self.provider.as_ref()),
            now,
        );
        self.persist_memory();
        if let Some(store) = &self.memory_store {
            if let Err(e) = store.compact(&self.memory, Some(&score)) {
                log::error!("production store: {e}");
            }
        }
        self.install_score(score.clone(), now);
        score
    }

    pub fn install_score(&mut self, score: DramaturgicalScore, now: Millis) {
        let now = self.advance(now);
        self.record(
            now,
            Payload::ScoreConsolidated {
                version: score.version,
                score: score.clone(),
            },
        );
        self.memory.adopt_score_version(score.version);
        self.score = score;
        self.events.push(EngineEvent::Score { score: self.score.clone() });
    }

    /// Safety override: relays off and lights to full white, bypassing constraints.
    pub fn panic(&mut self, now: Millis) -> Vec<ActuationCommand> {
        let now = self.advance(now);
        self.record(now, Payload::Panic);
        let cmds = self.actuation.panic_commands(now);
        for c in &cmds {
            self.dispatch_command(c.clone(), now);
        }
        cmds
    }

    /// Waits for physical sends, then closes the log and compacts memory.
    pub fn close(&mut self) -> Result<(), EngineError> {
        self.actuation.flush_physical(std::time::Duration::from_secs(5));
        let now = self.clock;
        for result in self.actuation.drain_physical_results() {
            self.record(now, Payload::PhysicalResult { result });
        }
        self.persist_memory();
        if let Some(store) = &self.memory_store {
            store.compact(&self.memory, Some(&self.score))?;
        }
        self.log.close()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scenario runs and replay

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub session: String,
    pub ticks: u64,
    pub end_ms: Millis,
    pub dispatched: usize,
    pub traces: usize,
}

/// Drives a scripted scenario on logical time: at each tick, the agents'
/// messages are ingested and then the loop ticks. Outstanding decisions are
/// given up to one extra second to land.
pub fn run_scenario(engine: &mut Engine, script: &ScenarioScript) -> Result<RunSummary, EngineError> {
    script.validate(engine.config().room)?;
    let step = engine.config().tick_ms();
    let mut prev = None;
    let mut t = 0;
    let mut ticks = 0;
    loop {
        for msg in crate::ingest::step_scenario(script, prev, t)? {
            engine.ingest(msg, t)?;
        }
        engine.tick(t);
        ticks += 1;
        prev = Some(t);
        if t >= script.duration_ms {
            break;
        }
        t = (t + step).min(script.duration_ms);
    }
    let mut extra = 0;
    while engine.inflight() > 0 && extra < 1000 / step.max(1) + 1 {
        t += step;
        engine.tick(t);
        ticks += 1;
        extra += 1;
    }
    let loaded = engine.log().to_loaded();
    Ok(RunSummary {
        session: engine.session_id().to_string(),
        ticks,
        end_ms: t,
        dispatched: loaded.dispatched().len(),
        traces: engine.traces().len(),
    })
}

/// Runs independent scenarios, in parallel when the `parallel` feature is on.
pub fn run_batch<F>(jobs: Vec<ScenarioScript>, make: F) -> Vec<Result<(RunSummary, LoadedLog), EngineError>>
where
    F: Fn(usize) -> Result<Engine, EngineError> + Sync,
{
    let run = |(i, script): (usize, ScenarioScript)| {
        let mut engine = make(i)?;
        let summary = run_scenario(&mut engine, &script)?;
        Ok((summary, engine.log().to_loaded()))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        jobs.into_par_iter().enumerate().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        jobs.into_iter().enumerate().map(run).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub session: String,
    pub original: Vec<ActuationCommand>,
    pub reproduced: Vec<ActuationCommand>,
    pub identical: bool,
    pub partial: bool,
    pub prompt_mismatches: Vec<String>,
    pub log: LoadedLog,
}

fn prompt_hashes(log: &LoadedLog) -> BTreeMap<String, String> {
    log.entries
        .iter()
        .filter_map(|e| match &e.payload {
            Payload::PromptComposed { exchange, hash, .. } => Some((exchange.clone(), hash.clone())),
            _ => None,
        })
        .collect()
}

/// Re-executes a recorded session on logical time with recorded replies.
/// `progress` receives (entries processed, total entries).
pub fn replay(
    log: &LoadedLog,
    config: &EngineConfig,
    progress: &mut dyn FnMut(usize, usize),
) -> Result<ReplayReport, EngineError> {
    let config_hash = config.behaviour_hash();
    if log.header.config_hash != config_hash {
        return Err(LogError::ConfigMismatch {
            log: log.header.config_hash.clone(),
            config: config_hash,
        }
        .into());
    }
    let mut engine = Engine::for_replay(config.clone(), log)?;
    let total = log.entries.len();
    for (i, entry) in log.entries.iter().enumerate() {
        let t = entry.t_ms;
        match &entry.payload {
            Payload::Tick => engine.tick(t),
            Payload::SensorIn { message } => engine.ingest_prepared(message.clone(), t),
            Payload::ProfileSet { profile } => engine.install_profile(profile.clone(), t),
            Payload::CommandApplied {
                source,
                grammar_form,
                translated,
            } => {
                engine.apply_logged_command(source, grammar_form, *translated, t)?;
            }
            Payload::Annotation {
                exchange,
                annotation,
                note,
            } => {
                engine.annotate(exchange, *annotation, note.clone(), t)?;
            }
            Payload::ScoreConsolidated { score, .. } => {
                engine.memory.promote();
                engine.install_score(score.clone(), t);
            }
            Payload::Panic => {
                engine.panic(t);
            }
            _ => {}
        }
        progress(i + 1, total);
    }
    let reproduced_log = engine.log().to_loaded();
    let (a, b) = (prompt_hashes(log), prompt_hashes(&reproduced_log));
    let prompt_mismatches = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    let original: Vec<_> = log.dispatched().into_iter().cloned().collect();
    let reproduced: Vec<_> = reproduced_log.dispatched().into_iter().cloned().collect();
    Ok(ReplayReport {
        session: log.header.session.clone(),
        identical: log.dispatched_bytes() == reproduced_log.dispatched_bytes(),
        original,
        reproduced,
        partial: log.partial,
        prompt_mismatches,
        log: reproduced_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EngineConfig;
    use crate::model::EntityKind;
    use crate::provider::{MockProvider, Unavailable};

    const CONFIG: &str = r#"{
        "room": {"width": 10, "height": 8},
        "zones": [{"id": "pillar", "name": "pillar", "shape": {"circle": {"center": {"x": 5, "y": 4}, "radius": 1.5}}}],
        "actuators": [{"id": "pillar_light", "kind": "light", "zone": "pillar"}, {"id": "fan", "kind": "relay"}],
        "commands": ["when proximity(<2m, 2) then relay(fan, on)"]
    }"#;

    fn pos(id: &str, x: f64, y: f64) -> SensorMessage {
        SensorMessage::PositionUpdate {
            id: id.into(),
            kind: EntityKind::Performer,
            x,
            y,
            source_timestamp: None,
        }
    }

    fn engine(provider: Arc<dyn LanguageModelProvider>) -> Engine {
        Engine::new(EngineConfig::from_json(CONFIG).unwrap(), provider, EngineOptions::default()).unwrap()
    }

    #[test]
    fn proximity_rule_fires_without_provider() {
        let mut e = engine(Arc::new(Unavailable));
        e.ingest(pos("a", 1.0, 1.0), 0).unwrap();
        e.ingest(pos("b", 4.0, 1.0), 0).unwrap();
        e.tick(0);
        assert_eq!(e.actuation().get("fan").unwrap().relay_on(), Some(false));
        e.ingest(pos("b", 2.9, 1.0), 100).unwrap();
        assert_eq!(e.actuation().get("fan").unwrap().relay_on(), Some(true));
        let rule_traces: Vec<_> = e
            .traces()
            .iter()
            .filter(|t| matches!(t.source, TraceSource::Rule { .. }))
            .collect();
        assert_eq!(rule_traces.len(), 1);
        assert!(rule_traces[0].raw_replies.is_empty());
        // the unavailable provider was consulted for zone changes only, never for the rule
        assert!(e.log().entries().iter().any(|x| matches!(x.payload, Payload::RuleFired { .. })));
    }

    #[test]
    fn out_of_room_position_rejected() {
        let mut e = engine(Arc::new(Unavailable));
        assert!(matches!(e.ingest(pos("a", 11.0, 1.0), 0), Err(EngineError::Rejected(_))));
        assert!(e.log().entries().is_empty());
    }

    #[test]
    fn provider_failure_keeps_ticking() {
        let mut e = engine(Arc::new(Unavailable));
        e.ingest(pos("a", 5.0, 4.0), 0).unwrap();
        for t in 0..10 {
            e.tick(t * 100);
        }
        let failed: Vec<_> = e.traces().iter().filter(|t| t.error.is_some()).collect();
        assert_eq!(failed.len(), 1);
        assert!(e.grid().global_max() > 0.0);
    }

    #[test]
    fn immediate_command_dispatches() {
        let mut e = engine(Arc::new(MockProvider::holding()));
        e.apply_command("now light(pillar_light, on, bri=30%)", 0).unwrap();
        let s = e.actuation().get("pillar_light").unwrap().light_at(0).unwrap();
        assert!(s.on);
        assert_eq!(s.bri, 76);
        assert!(e.apply_command("when enter(lobby) then relay(fan, on)", 0).is_err());
    }

    #[test]
    fn constraint_reaches_next_prompt() {
        let mut e = engine(Arc::new(MockProvider::holding()));
        e.apply_command("constraint transition >= 3s", 0).unwrap();
        assert!(e.current_prompt().rules.contains("Make all transitions last at least 3 seconds."));
    }

    #[test]
    fn hashed_ids_never_reach_the_log() {
        let mut cfg = EngineConfig::from_json(CONFIG).unwrap();
        cfg.hash_entity_ids = true;
        let mut e = Engine::new(cfg, Arc::new(Unavailable), EngineOptions::default()).unwrap();
        e.ingest(pos("alice", 1.0, 1.0), 0).unwrap();
        let line = serde_json::to_string(&e.log().entries()[0]).unwrap();
        assert!(!line.contains("alice"));
        assert!(e.snapshot().entities[0].id.starts_with("anon-"));
    }

    #[test]
    fn panic_sets_safe_state() {
        let mut e = engine(Arc::new(Unavailable));
        e.apply_command("constraint palette(red)", 0).unwrap();
        e.panic(10);
        assert_eq!(e.actuation().get("pillar_light").unwrap().light_at(10), Some(crate::actuation::SAFE_WHITE));
        assert_eq!(e.actuation().get("fan").unwrap().relay_on(), Some(false));
    }
}
