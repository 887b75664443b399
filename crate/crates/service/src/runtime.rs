//! The engine thread. Every mutation and every read of engine state goes
//! through one queue, drained between ticks.

use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use serde_json::{json, Value};
use tokio::sync::{broadcast, oneshot};

use stagehand_core::director::CommandError;
use stagehand_core::dramaturgy::DramaturgyError;
use stagehand_core::engine::{Engine, EngineError, EngineEvent};
use stagehand_core::ingest::SensorMessage;
use stagehand_core::memory::{Annotation, MemoryError};

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub body: Value,
}

impl ApiError {
    pub fn new(status: u16, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::Command(CommandError::Unparsed { grammar, provider }) => ApiError {
                status: 422,
                body: json!({ "error": message, "grammar": grammar, "provider": provider }),
            },
            EngineError::Command(_) => ApiError::new(422, message),
            EngineError::Rejected(_) | EngineError::Ingest(_) => ApiError::new(400, message),
            EngineError::UnknownQuestion(_) | EngineError::Memory(MemoryError::UnknownExchange(_)) => {
                ApiError::new(404, message)
            }
            EngineError::NoProfile => ApiError::new(409, message),
            EngineError::Dramaturgy(DramaturgyError::EmptyFraming | DramaturgyError::EmptyAnswer) => {
                ApiError::new(400, message)
            }
            EngineError::Dramaturgy(_) => ApiError::new(502, message),
            _ => ApiError::new(500, message),
        }
    }
}

pub type Reply = Result<Value, ApiError>;

#[derive(Debug)]
pub enum Request {
    Sensor(SensorMessage),
    Framing(String),
    Clarify { question_id: String, answer: String },
    Command(String),
    Annotate { exchange: String, annotation: Annotation, note: Option<String> },
    Consolidate,
    Panic,
    State,
    Heatgrid,
    Score,
    /// Every frame a newly connected console needs.
    Resync,
    Shutdown,
}

struct Job {
    request: Request,
    reply: Option<oneshot::Sender<Reply>>,
}

/// Cheap, cloneable access to the engine thread.
#[derive(Clone)]
pub struct EngineHandle {
    tx: mpsc::Sender<Job>,
    frames: broadcast::Sender<Arc<str>>,
    session: Arc<str>,
}

impl EngineHandle {
    pub fn session(&self) -> &str {
        &self.session
    }

    pub async fn call(&self, request: Request) -> Reply {
        let (tx, rx) = oneshot::channel();
        self.tx
            .send(Job {
                request,
                reply: Some(tx),
            })
            .map_err(|_| ApiError::new(503, "engine stopped"))?;
        rx.await.map_err(|_| ApiError::new(503, "engine stopped"))?
    }

    /// Blocking variant for non-async callers.
    pub fn call_blocking(&self, request: Request) -> Reply {
        let (tx, rx) = oneshot::channel();
        self.tx
            .send(Job {
                request,
                reply: Some(tx),
            })
            .map_err(|_| ApiError::new(503, "engine stopped"))?;
        rx.blocking_recv().map_err(|_| ApiError::new(503, "engine stopped"))?
    }

    /// Fire-and-forget; used for sensor frames.
    pub fn send(&self, request: Request) -> Result<(), ApiError> {
        self.tx
            .send(Job { request, reply: None })
            .map_err(|_| ApiError::new(503, "engine stopped"))
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<str>> {
        self.frames.subscribe()
    }

    pub fn publish(&self, frame: Value) {
        let _ = self.frames.send(frame.to_string().into());
    }
}

fn event_frame(event: &EngineEvent) -> Value {
    serde_json::to_value(event).unwrap_or(Value::Null)
}

fn snapshot_frame(engine: &Engine) -> Value {
    json!({ "type": "snapshot", "clock_ms": engine.clock(), "snapshot": engine.snapshot() })
}

fn heatgrid_frame(engine: &Engine) -> Value {
    json!({ "type": "heatgrid", "heatgrid": engine.heatgrid_wire() })
}

fn state_value(engine: &Engine) -> Value {
    json!({
        "session": engine.session_id(),
        "clock_ms": engine.clock(),
        "snapshot": engine.snapshot(),
        "rules": engine.director().rules,
        "constraints": engine.director().constraints,
        "rules_version": engine.director().version,
        "lights": engine.actuation().light_states(engine.clock()),
        "relays": engine.actuation().relay_states(),
        "profile": engine.profile(),
        "questions": engine.pending_questions(),
        "inflight": engine.inflight(),
        "degraded": engine.is_degraded(),
    })
}

fn serve_request(engine: &mut Engine, request: Request, now: u64) -> Reply {
    let ok = |v: Value| Ok(v);
    match request {
        Request::Sensor(msg) => {
            engine.ingest(msg, now)?;
            ok(json!({ "accepted": true }))
        }
        Request::Framing(text) => {
            let (profile, questions) = engine.set_framing(&text, now)?;
            ok(json!({ "profile": profile, "questions": questions }))
        }
        Request::Clarify { question_id, answer } => {
            let (profile, revision) = engine.clarify(&question_id, &answer, now)?;
            ok(json!({ "profile": profile, "revision": revision, "questions": engine.pending_questions() }))
        }
        Request::Command(text) => {
            let parsed = engine.apply_command(&text, now)?;
            ok(json!({
                "source": parsed.source,
                "grammar_form": parsed.grammar_form,
                "translated": parsed.translated,
                "rules_version": engine.director().version,
            }))
        }
        Request::Annotate {
            exchange,
            annotation,
            note,
        } => {
            let weight = engine.annotate(&exchange, annotation, note, now)?;
            ok(json!({ "exchange": exchange, "pattern_weight": weight }))
        }
        Request::Consolidate => ok(serde_json::to_value(engine.consolidate(now)).unwrap_or(Value::Null)),
        Request::Panic => {
            let cmds = engine.panic(now);
            ok(json!({ "dispatched": cmds }))
        }
        Request::State => ok(state_value(engine)),
        Request::Heatgrid => ok(serde_json::to_value(engine.heatgrid_wire()).unwrap_or(Value::Null)),
        Request::Score => ok(json!({ "score": engine.score(), "prompt": engine.current_prompt().text() })),
        Request::Resync => {
            let mut frames = vec![snapshot_frame(engine), heatgrid_frame(engine), event_frame(&engine.rules_event())];
            frames.push(json!({ "type": "score", "score": engine.score() }));
            if let Some(p) = engine.profile() {
                frames.push(json!({ "type": "profile", "profile": p, "questions": engine.pending_questions() }));
            }
            frames.extend(engine.traces().iter().map(|t| json!({ "type": "trace", "trace": t })));
            ok(Value::Array(frames))
        }
        Request::Shutdown => {
            engine.close()?;
            ok(json!({ "closed": true }))
        }
    }
}

pub struct EngineThread {
    pub handle: EngineHandle,
    join: Option<JoinHandle<()>>,
}

impl EngineThread {
    /// Moves the engine onto its own thread and starts ticking.
    pub fn spawn(mut engine: Engine) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        let (frames, _) = broadcast::channel(1024);
        let handle = EngineHandle {
            tx,
            frames,
            session: engine.session_id().into(),
        };
        let out = handle.clone();
        let period = engine.config().tick_period();
        let join = std::thread::Builder::new()
            .name("engine".into())
            .spawn(move || {
                let start = Instant::now();
                let now_ms = || start.elapsed().as_millis() as u64;
                let mut next = start;
                loop {
                    let wait = next.saturating_duration_since(Instant::now());
                    match rx.recv_timeout(wait) {
                        Ok(job) => {
                            let shutdown = matches!(job.request, Request::Shutdown);
                            let reply = serve_request(&mut engine, job.request, now_ms());
                            if let Some(tx) = job.reply {
                                let _ = tx.send(reply);
                            } else if let Err(e) = reply {
                                log::warn!("{}", e.body);
                            }
                            for ev in engine.drain_events() {
                                out.publish(event_frame(&ev));
                            }
                            if shutdown {
                                break;
                            }
                        }
                        Err(RecvTimeoutError::Timeout) => {}
                        Err(RecvTimeoutError::Disconnected) => {
                            let _ = engine.close();
                            break;
                        }
                    }
                    let now = Instant::now();
                    if now >= next {
                        engine.tick(now_ms());
                        for ev in engine.drain_events() {
                            out.publish(event_frame(&ev));
                        }
                        out.publish(snapshot_frame(&engine));
                        out.publish(heatgrid_frame(&engine));
                        next += period;
                        if next + period < now {
                            log::warn!("tick loop behind schedule; skipping ahead");
                            next = now + period;
                        }
                    }
                }
            })
            .expect("spawn engine thread");
        Self {
            handle,
            join: Some(join),
        }
    }

    /// Closes the session and waits for the thread to finish.
    pub fn shutdown(mut self) -> Reply {
        let reply = self.handle.call_blocking(Request::Shutdown);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
        reply
    }
}

/// Long operations off the engine thread report here.
pub fn replay_progress_frame(session: &str, processed: usize, total: usize) -> Value {
    json!({ "type": "replay_progress", "session": session, "processed": processed, "total": total })
}
