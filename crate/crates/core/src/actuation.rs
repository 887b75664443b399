//! Virtual actuators, Hue-subset encoding, and the off-loop physical sender.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::director::{ActuationTarget, ActuatorKind, ProposedAction, Validation};
use crate::model::{LightState, Millis, MAX_BRI};

pub const QUEUE_CAPACITY: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActuationError {
    #[error("actuator `{0}` is not configured")]
    Unknown(String),
    #[error("actuator `{id}` is a {actual:?}, command targets a {expected:?}")]
    KindMismatch {
        id: String,
        expected: ActuatorKind,
        actual: ActuatorKind,
    },
    #[error("command for `{cmd}` applied to `{actuator}`")]
    WrongTarget { cmd: String, actuator: String },
    #[error("relay commands have no Hue encoding")]
    NotALight,
    #[error("invalid binding for `{actuator}`: {reason}")]
    Binding { actuator: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhysicalBinding {
    Hue {
        bridge: String,
        key: String,
        physical_id: String,
    },
    Webhook {
        webhook: String,
    },
}

fn check_url(url: &str) -> Result<(), String> {
    let uri: ureq::http::Uri = url.parse().map_err(|e| format!("`{url}`: {e}"))?;
    match (uri.scheme_str(), uri.host()) {
        (Some("http" | "https"), Some(h)) if !h.is_empty() => Ok(()),
        _ => Err(format!("`{url}` is not an http(s) URL")),
    }
}

impl PhysicalBinding {
    pub fn validate(&self, actuator: &str, kind: ActuatorKind) -> Result<(), ActuationError> {
        let err = |reason: String| ActuationError::Binding {
            actuator: actuator.to_string(),
            reason,
        };
        match (self, kind) {
            (PhysicalBinding::Hue { bridge, key, physical_id }, ActuatorKind::Light) => {
                check_url(bridge).map_err(err)?;
                if key.is_empty() || physical_id.is_empty() {
                    return Err(err("key and physical_id must be non-empty".into()));
                }
                Ok(())
            }
            (PhysicalBinding::Webhook { webhook }, ActuatorKind::Relay) => check_url(webhook).map_err(err),
            (PhysicalBinding::Hue { .. }, ActuatorKind::Relay) => Err(err("relays bind to a webhook".into())),
            (PhysicalBinding::Webhook { .. }, ActuatorKind::Light) => {
                Err(err("lights bind to a Hue bridge".into()))
            }
        }
    }
}

/// A command that has passed constraint validation. The only other way to
/// build one is the explicit safety override used by panic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActuationCommand {
    pub actuator: String,
    pub target: ActuationTarget,
    pub issued_at: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exchange: Option<String>,
}

impl ActuationCommand {
    pub fn from_validation(v: &Validation, issued_at: Millis, exchange: Option<String>) -> Option<Self> {
        v.accepted().map(|a| Self {
            actuator: a.actuator.clone(),
            target: a.target,
            issued_at,
            exchange,
        })
    }

    /// Bypasses constraints; reserved for the panic path.
    pub fn safety_override(action: ProposedAction, issued_at: Millis) -> Self {
        Self {
            actuator: action.actuator,
            target: action.target,
            issued_at,
            exchange: None,
        }
    }
}

pub const SAFE_WHITE: LightState = LightState {
    on: true,
    bri: MAX_BRI,
    hue: 0,
    sat: 0,
    transition_ms: 0,
};

// ---------------------------------------------------------------------------
// Virtual state

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightTransition {
    pub from: LightState,
    pub to: LightState,
    pub start: Millis,
}

fn lerp_u8(a: u8, b: u8, f: f64) -> u8 {
    (a as f64 + (b as f64 - a as f64) * f).round() as u8
}

/// Signed shortest step from `a` to `b` on the hue circle.
pub fn hue_arc(a: u16, b: u16) -> i64 {
    let d = (b as i64 - a as i64).rem_euclid(65536);
    if d > 32768 {
        d - 65536
    } else {
        d
    }
}

impl LightTransition {
    pub fn settled(state: LightState) -> Self {
        Self {
            from: state,
            to: state,
            start: 0,
        }
    }

    pub fn state_at(&self, t: Millis) -> LightState {
        let dur = self.to.transition_ms as u64;
        let elapsed = t.saturating_sub(self.start);
        if dur == 0 || elapsed >= dur {
            return self.to;
        }
        if t <= self.start {
            return self.from;
        }
        let f = elapsed as f64 / dur as f64;
        let hue = (self.from.hue as f64 + hue_arc(self.from.hue, self.to.hue) as f64 * f).round() as i64;
        LightState {
            // a fading-out light stays lit until the fade completes
            on: self.from.on || self.to.on,
            bri: lerp_u8(self.from.bri, self.to.bri, f),
            hue: hue.rem_euclid(65536) as u16,
            sat: lerp_u8(self.from.sat, self.to.sat, f),
            transition_ms: self.to.transition_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VirtualState {
    Light(LightTransition),
    Relay { on: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actuator {
    pub id: String,
    pub zone: Option<String>,
    pub state: VirtualState,
    pub binding: Option<PhysicalBinding>,
}

impl Actuator {
    pub fn light(id: &str, zone: Option<&str>, initial: LightState) -> Self {
        Self {
            id: id.to_string(),
            zone: zone.map(str::to_string),
            state: VirtualState::Light(LightTransition::settled(initial)),
            binding: None,
        }
    }

    pub fn relay(id: &str, zone: Option<&str>) -> Self {
        Self {
            id: id.to_string(),
            zone: zone.map(str::to_string),
            state: VirtualState::Relay { on: false },
            binding: None,
        }
    }

    pub fn kind(&self) -> ActuatorKind {
        match self.state {
            VirtualState::Light(_) => ActuatorKind::Light,
            VirtualState::Relay { .. } => ActuatorKind::Relay,
        }
    }

    pub fn light_at(&self, t: Millis) -> Option<LightState> {
        match &self.state {
            VirtualState::Light(tr) => Some(tr.state_at(t)),
            VirtualState::Relay { .. } => None,
        }
    }

    /// The state the actuator is heading towards.
    pub fn light_target(&self) -> Option<LightState> {
        match &self.state {
            VirtualState::Light(tr) => Some(tr.to),
            VirtualState::Relay { .. } => None,
        }
    }

    pub fn relay_on(&self) -> Option<bool> {
        match self.state {
            VirtualState::Relay { on } => Some(on),
            VirtualState::Light(_) => None,
        }
    }
}

/// Starts a transition from the state at `now` towards the command target.
pub fn apply_virtual(actuator: &mut Actuator, cmd: &ActuationCommand, now: Millis) -> Result<(), ActuationError> {
    if actuator.id != cmd.actuator {
        return Err(ActuationError::WrongTarget {
            cmd: cmd.actuator.clone(),
            actuator: actuator.id.clone(),
        });
    }
    let (id, actual) = (actuator.id.clone(), actuator.kind());
    let mismatch = |expected| ActuationError::KindMismatch { id, expected, actual };
    match (&mut actuator.state, cmd.target) {
        (VirtualState::Light(tr), ActuationTarget::Light(target)) => {
            let current = tr.state_at(now);
            *tr = LightTransition {
                from: current,
                to: target,
                start: now,
            };
            Ok(())
        }
        (VirtualState::Relay { on }, ActuationTarget::Relay(target)) => {
            *on = target;
            Ok(())
        }
        (_, t) => Err(mismatch(t.kind())),
    }
}

// ---------------------------------------------------------------------------
// Wire encoding

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpRequest {
    pub method: String,
    pub url: String,
    pub path: String,
    pub body: String,
}

#[derive(Serialize)]
struct HueBody {
    on: bool,
    bri: u8,
    hue: u16,
    sat: u8,
    transitiontime: u32,
}

/// Hue deciseconds, rounded half up.
pub fn transition_deciseconds(ms: u32) -> u32 {
    ((ms as u64 + 50) / 100) as u32
}

pub fn hue_body(state: &LightState) -> String {
    if !state.on {
        return r#"{"on":false}"#.to_string();
    }
    serde_json::to_string(&HueBody {
        on: true,
        bri: state.bri,
        hue: state.hue,
        sat: state.sat,
        transitiontime: transition_deciseconds(state.transition_ms),
    })
    .expect("hue body serializes")
}

pub fn encode_hue_request(cmd: &ActuationCommand, binding: &PhysicalBinding) -> Result<HttpRequest, ActuationError> {
    let ActuationTarget::Light(state) = cmd.target else {
        return Err(ActuationError::NotALight);
    };
    let PhysicalBinding::Hue { bridge, key, physical_id } = binding else {
        return Err(ActuationError::Binding {
            actuator: cmd.actuator.clone(),
            reason: "light needs a Hue binding".into(),
        });
    };
    let path = format!("/api/{key}/lights/{physical_id}/state");
    Ok(HttpRequest {
        method: "PUT".into(),
        url: format!("{}{path}", bridge.trim_end_matches('/')),
        path,
        body: hue_body(&state),
    })
}

pub fn encode_webhook_request(cmd: &ActuationCommand, binding: &PhysicalBinding) -> Result<HttpRequest, ActuationError> {
    match (cmd.target, binding) {
        (ActuationTarget::Relay(on), PhysicalBinding::Webhook { webhook }) => {
            let path = webhook
                .parse::<ureq::http::Uri>()
                .map(|u| u.path().to_string())
                .unwrap_or_else(|_| "/".into());
            Ok(HttpRequest {
                method: "POST".into(),
                url: webhook.clone(),
                path,
                body: format!(r#"{{"on":{on}}}"#),
            })
        }
        _ => Err(ActuationError::Binding {
            actuator: cmd.actuator.clone(),
            reason: "relay needs a webhook binding".into(),
        }),
    }
}

pub fn encode_physical(cmd: &ActuationCommand, binding: &PhysicalBinding) -> Result<HttpRequest, ActuationError> {
    match cmd.target {
        ActuationTarget::Light(_) => encode_hue_request(cmd, binding),
        ActuationTarget::Relay(_) => encode_webhook_request(cmd, binding),
    }
}

// ---------------------------------------------------------------------------
// Physical sender

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicalResult {
    pub actuator: String,
    pub ok: bool,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exchange: Option<String>,
}

#[derive(Debug)]
struct Job {
    actuator: String,
    exchange: Option<String>,
    request: HttpRequest,
}

#[derive(Default)]
struct Shared {
    queue: Mutex<(VecDeque<Job>, bool)>,
    ready: Condvar,
    results: Mutex<Vec<PhysicalResult>>,
    busy: AtomicBool,
}

/// Sends physical requests on a worker thread. The queue holds at most
/// [`QUEUE_CAPACITY`] jobs; the oldest is dropped when it overflows.
pub struct PhysicalSender {
    shared: Arc<Shared>,
    worker: Option<JoinHandle<()>>,
}

fn send_once(agent: &ureq::Agent, req: &HttpRequest) -> Result<(), String> {
    let builder = match req.method.as_str() {
        "PUT" => agent.put(&req.url),
        _ => agent.post(&req.url),
    };
    let resp = builder
        .header("content-type", "application/json")
        .send(req.body.as_bytes())
        .map_err(|e| e.to_string())?;
    let status = resp.status();
    if status.is_success() {
        Ok(())
    } else {
        Err(format!("HTTP {}", status.as_u16()))
    }
}

impl PhysicalSender {
    pub fn new(timeout: Duration) -> Self {
        let shared = Arc::new(Shared::default());
        let worker_shared = Arc::clone(&shared);
        let worker = std::thread::Builder::new()
            .name("physical-sender".into())
            .spawn(move || {
                let agent: ureq::Agent = ureq::Agent::config_builder()
                    .http_status_as_error(false)
                    .timeout_global(Some(timeout))
                    .build()
                    .into();
                loop {
                    let job = {
                        let mut q = worker_shared.queue.lock().unwrap();
                        loop {
                            if let Some(job) = q.0.pop_front() {
                                worker_shared.busy.store(true, Ordering::SeqCst);
                                break Some(job);
                            }
                            if q.1 {
                                break None;
                            }
                            q = worker_shared.ready.wait(q).unwrap();
                        }
                    };
                    let Some(job) = job else { return };
                    let mut attempts = 0;
                    let mut error = None;
                    for _ in 0..2 {
                        attempts += 1;
                        match send_once(&agent, &job.request) {
                            Ok(()) => {
                                error = None;
                                break;
                            }
                            Err(e) => error = Some(e),
                        }
                    }
                    if let Some(e) = &error {
                        log::warn!("physical send to {} failed after {attempts} attempts: {e}", job.actuator);
                    }
                    worker_shared.results.lock().unwrap().push(PhysicalResult {
                        actuator: job.actuator,
                        ok: error.is_none(),
                        attempts,
                        error,
                        exchange: job.exchange,
                    });
                    worker_shared.busy.store(false, Ordering::SeqCst);
                    worker_shared.ready.notify_all();
                }
            })
            .expect("spawn physical sender");
        Self {
            shared,
            worker: Some(worker),
        }
    }

    pub fn enqueue(&self, actuator: &str, exchange: Option<String>, request: HttpRequest) {
        let mut q = self.shared.queue.lock().unwrap();
        if q.0.len() >= QUEUE_CAPACITY {
            let dropped = q.0.pop_front().expect("queue is full");
            log::warn!("physical queue full, dropping oldest request for {}", dropped.actuator);
            self.shared.results.lock().unwrap().push(PhysicalResult {
                actuator: dropped.actuator,
                ok: false,
                attempts: 0,
                error: Some("dropped: outbound queue full".into()),
                exchange: dropped.exchange,
            });
        }
        q.0.push_back(Job {
            actuator: actuator.to_string(),
            exchange,
            request,
        });
        self.shared.ready.notify_all();
    }

    pub fn pending(&self) -> usize {
        let q = self.shared.queue.lock().unwrap();
        q.0.len() + usize::from(self.shared.busy.load(Ordering::SeqCst))
    }

    pub fn drain_results(&self) -> Vec<PhysicalResult> {
        std::mem::take(&mut *self.shared.results.lock().unwrap())
    }

    /// Blocks until the queue is empty or `timeout` passes.
    pub fn flush(&self, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        let mut q = self.shared.queue.lock().unwrap();
        loop {
            if q.0.is_empty() && !self.shared.busy.load(Ordering::SeqCst) {
                return true;
            }
            let now = std::time::Instant::now();
            if now >= deadline {
                return false;
            }
            q = self.shared.ready.wait_timeout(q, deadline - now).unwrap().0;
        }
    }
}

impl Drop for PhysicalSender {
    fn drop(&mut self) {
        self.shared.queue.lock().unwrap().1 = true;
        self.shared.ready.notify_all();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

// ---------------------------------------------------------------------------
// Actuator set

/// Result of one dispatch: virtual state is always applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchOutcome {
    pub actuator: String,
    pub physical: Option<HttpRequest>,
}

pub struct Actuation {
    actuators: BTreeMap<String, Actuator>,
    sender: Option<PhysicalSender>,
}

impl Actuation {
    pub fn new(actuators: Vec<Actuator>) -> Result<Self, ActuationError> {
        let mut map = BTreeMap::new();
        for a in actuators {
            if let Some(b) = &a.binding {
                b.validate(&a.id, a.kind())?;
            }
            map.insert(a.id.clone(), a);
        }
        let needs_sender = map.values().any(|a| a.binding.is_some());
        Ok(Self {
            actuators: map,
            sender: needs_sender.then(|| PhysicalSender::new(Duration::from_secs(2))),
        })
    }

    pub fn get(&self, id: &str) -> Option<&Actuator> {
        self.actuators.get(id)
    }

    pub fn all(&self) -> impl Iterator<Item = &Actuator> {
        self.actuators.values()
    }

    pub fn refs(&self) -> Vec<(String, ActuatorKind)> {
        self.actuators.values().map(|a| (a.id.clone(), a.kind())).collect()
    }

    pub fn light_states(&self, t: Millis) -> BTreeMap<String, LightState> {
        self.actuators
            .values()
            .filter_map(|a| a.light_at(t).map(|s| (a.id.clone(), s)))
            .collect()
    }

    pub fn relay_states(&self) -> BTreeMap<String, bool> {
        self.actuators
            .values()
            .filter_map(|a| a.relay_on().map(|s| (a.id.clone(), s)))
            .collect()
    }

    /// Applies the command to the blueprint and queues the physical mirror.
    pub fn dispatch(&mut self, cmd: &ActuationCommand, now: Millis) -> Result<DispatchOutcome, ActuationError> {
        let actuator = self
            .actuators
            .get_mut(&cmd.actuator)
            .ok_or_else(|| ActuationError::Unknown(cmd.actuator.clone()))?;
        apply_virtual(actuator, cmd, now)?;
        let physical = match &actuator.binding {
            Some(b) => Some(encode_physical(cmd, b)?),
            None => None,
        };
        if let (Some(req), Some(sender)) = (&physical, &self.sender) {
            sender.enqueue(&cmd.actuator, cmd.exchange.clone(), req.clone());
        }
        Ok(DispatchOutcome {
            actuator: cmd.actuator.clone(),
            physical,
        })
    }

    pub fn drain_physical_results(&self) -> Vec<PhysicalResult> {
        self.sender.as_ref().map(|s| s.drain_results()).unwrap_or_default()
    }

    pub fn flush_physical(&self, timeout: Duration) -> bool {
        self.sender.as_ref().map(|s| s.flush(timeout)).unwrap_or(true)
    }

    /// Safety commands: every relay off, every light to full white.
    pub fn panic_commands(&self, now: Millis) -> Vec<ActuationCommand> {
        self.actuators
            .values()
            .map(|a| {
                let target = match a.kind() {
                    ActuatorKind::Light => ActuationTarget::Light(SAFE_WHITE),
                    ActuatorKind::Relay => ActuationTarget::Relay(false),
                };
                ActuationCommand::safety_override(
                    ProposedAction {
                        actuator: a.id.clone(),
                        target,
                    },
                    now,
                )
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Fake bridge

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceivedRequest {
    pub method: String,
    pub path: String,
    pub body: String,
}

/// In-process HTTP server speaking the Hue subset and accepting webhooks.
pub struct FakeBridge {
    server: Arc<tiny_http::Server>,
    received: Arc<Mutex<Vec<ReceivedRequest>>>,
    failing: Arc<AtomicBool>,
    worker: Option<JoinHandle<()>>,
    port: u16,
}

impl FakeBridge {
    pub fn start(port: u16) -> std::io::Result<Self> {
        let server = tiny_http::Server::http(("127.0.0.1", port)).map_err(std::io::Error::other)?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| std::io::Error::other("fake bridge has no ip address"))?;
        let server = Arc::new(server);
        let received = Arc::new(Mutex::new(Vec::new()));
        let failing = Arc::new(AtomicBool::new(false));
        let (srv, rec, fail) = (Arc::clone(&server), Arc::clone(&received), Arc::clone(&failing));
        let worker = std::thread::Builder::new()
            .name("fake-bridge".into())
            .spawn(move || {
                for mut request in srv.incoming_requests() {
                    let mut body = String::new();
                    let _ = request.as_reader().read_to_string(&mut body);
                    let path = request.url().to_string();
                    rec.lock().unwrap().push(ReceivedRequest {
                        method: request.method().to_string(),
                        path: path.clone(),
                        body,
                    });
                    let response = if fail.load(Ordering::SeqCst) {
                        tiny_http::Response::from_string(r#"{"error":"unavailable"}"#).with_status_code(503)
                    } else {
                        tiny_http::Response::from_string(format!(r#"[{{"success":{{"{path}":true}}}}]"#))
                    };
                    let _ = request.respond(response);
                }
            })?;
        Ok(Self {
            server,
            received,
            failing,
            worker: Some(worker),
            port,
        })
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn base_url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    pub fn received(&self) -> Vec<ReceivedRequest> {
        self.received.lock().unwrap().clone()
    }

    pub fn set_failing(&self, failing: bool) {
        self.failing.store(failing, Ordering::SeqCst);
    }
}

impl Drop for FakeBridge {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn light(on: bool, bri: u8, hue: u16, sat: u8, transition_ms: u32) -> LightState {
        LightState { on, bri, hue, sat, transition_ms }
    }

    fn cmd(id: &str, target: ActuationTarget, at: Millis) -> ActuationCommand {
        let v = Validation::Valid {
            action: ProposedAction { actuator: id.into(), target },
        };
        ActuationCommand::from_validation(&v, at, None).unwrap()
    }

    #[test]
    fn violation_yields_no_command() {
        let v = Validation::Violation { reasons: vec!["no".into()] };
        assert!(ActuationCommand::from_validation(&v, 0, None).is_none());
    }

    #[test]
    fn linear_midpoint() {
        let mut a = Actuator::light("l", None, light(true, 0, 0, 0, 0));
        apply_virtual(&mut a, &cmd("l", ActuationTarget::Light(light(true, 254, 0, 0, 1000)), 0), 0).unwrap();
        assert_eq!(a.light_at(500).unwrap().bri, 127);
        assert_eq!(a.light_at(0).unwrap().bri, 0);
        assert_eq!(a.light_at(1000).unwrap().bri, 254);
    }

    #[test]
    fn zero_transition_is_immediate() {
        let mut a = Actuator::light("l", None, LightState::OFF);
        let target = light(true, 200, 100, 50, 0);
        apply_virtual(&mut a, &cmd("l", ActuationTarget::Light(target), 10), 10).unwrap();
        assert_eq!(a.light_at(10).unwrap(), target);
    }

    #[test]
    fn hue_takes_shorter_arc() {
        assert_eq!(hue_arc(65000, 500), 1036);
        assert_eq!(hue_arc(500, 65000), -1036);
        let mut a = Actuator::light("l", None, light(true, 100, 65000, 100, 0));
        apply_virtual(&mut a, &cmd("l", ActuationTarget::Light(light(true, 100, 500, 100, 1000)), 0), 0).unwrap();
        assert_eq!(a.light_at(500).unwrap().hue, 65518);
        let h = a.light_at(750).unwrap().hue;
        assert!(h < 1000, "{h}");
    }

    #[test]
    fn kind_mismatch_rejected() {
        let mut a = Actuator::relay("fan", None);
        let err = apply_virtual(&mut a, &cmd("fan", ActuationTarget::Light(SAFE_WHITE), 0), 0).unwrap_err();
        assert!(matches!(err, ActuationError::KindMismatch { .. }));
        apply_virtual(&mut a, &cmd("fan", ActuationTarget::Relay(true), 0), 0).unwrap();
        assert_eq!(a.relay_on(), Some(true));
    }

    fn binding() -> PhysicalBinding {
        PhysicalBinding::Hue {
            bridge: "http://127.0.0.1:9".into(),
            key: "k".into(),
            physical_id: "3".into(),
        }
    }

    #[test]
    fn hue_encoding_golden() {
        let c = cmd("l", ActuationTarget::Light(light(true, 76, 0, 254, 3000)), 0);
        let req = encode_hue_request(&c, &binding()).unwrap();
        assert_eq!(req.method, "PUT");
        assert_eq!(req.path, "/api/k/lights/3/state");
        assert_eq!(req.body, r#"{"on":true,"bri":76,"hue":0,"sat":254,"transitiontime":30}"#);
        let off = cmd("l", ActuationTarget::Light(light(false, 76, 0, 254, 3000)), 0);
        assert_eq!(encode_hue_request(&off, &binding()).unwrap().body, r#"{"on":false}"#);
        let relay = cmd("l", ActuationTarget::Relay(true), 0);
        assert_eq!(encode_hue_request(&relay, &binding()).unwrap_err(), ActuationError::NotALight);
        assert_eq!(transition_deciseconds(149), 1);
        assert_eq!(transition_deciseconds(150), 2);
    }

    #[test]
    fn binding_validation() {
        assert!(binding().validate("l", ActuatorKind::Light).is_ok());
        assert!(binding().validate("l", ActuatorKind::Relay).is_err());
        let bad = PhysicalBinding::Hue {
            bridge: "not a url".into(),
            key: "k".into(),
            physical_id: "1".into(),
        };
        assert!(bad.validate("l", ActuatorKind::Light).is_err());
    }

    #[test]
    fn bound_dispatch_reaches_fake_bridge() {
        let bridge = FakeBridge::start(0).unwrap();
        let mut lamp = Actuator::light("lamp", None, LightState::OFF);
        lamp.binding = Some(PhysicalBinding::Hue {
            bridge: bridge.base_url(),
            key: "abc".into(),
            physical_id: "1".into(),
        });
        let mut fan = Actuator::relay("fan", None);
        fan.binding = Some(PhysicalBinding::Webhook {
            webhook: format!("{}/relay/fan", bridge.base_url()),
        });
        let mut act = Actuation::new(vec![lamp, fan, Actuator::light("loose", None, LightState::OFF)]).unwrap();

        act.dispatch(&cmd("lamp", ActuationTarget::Light(light(true, 76, 0, 254, 3000)), 0), 0).unwrap();
        act.dispatch(&cmd("fan", ActuationTarget::Relay(true), 0), 0).unwrap();
        let out = act.dispatch(&cmd("loose", ActuationTarget::Light(SAFE_WHITE), 0), 0).unwrap();
        assert!(out.physical.is_none());
        assert!(act.flush_physical(Duration::from_secs(5)));

        let got = bridge.received();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].method, "PUT");
        assert_eq!(got[0].path, "/api/abc/lights/1/state");
        assert_eq!(got[0].body, r#"{"on":true,"bri":76,"hue":0,"sat":254,"transitiontime":30}"#);
        assert_eq!(got[1].method, "POST");
        assert_eq!(got[1].path, "/relay/fan");
        assert_eq!(got[1].body, r#"{"on":true}"#);
        let results = act.drain_physical_results();
        assert!(results.iter().all(|r| r.ok && r.attempts == 1));
    }

    #[test]
    fn failing_bridge_retried_once_virtual_kept() {
        let bridge = FakeBridge::start(0).unwrap();
        bridge.set_failing(true);
        let mut lamp = Actuator::light("lamp", None, LightState::OFF);
        lamp.binding = Some(PhysicalBinding::Hue {
            bridge: bridge.base_url(),
            key: "abc".into(),
            physical_id: "1".into(),
        });
        let mut act = Actuation::new(vec![lamp]).unwrap();
        act.dispatch(&cmd("lamp", ActuationTarget::Light(SAFE_WHITE), 0), 0).unwrap();
        assert!(act.flush_physical(Duration::from_secs(5)));
        assert_eq!(bridge.received().len(), 2);
        let r = act.drain_physical_results();
        assert_eq!(r.len(), 1);
        assert!(!r[0].ok);
        assert_eq!(r[0].attempts, 2);
        assert_eq!(act.get("lamp").unwrap().light_at(0), Some(SAFE_WHITE));
    }

    #[test]
    fn unreachable_bridge_reports_failure() {
        let mut lamp = Actuator::light("lamp", None, LightState::OFF);
        // port 9 (discard) is closed on test hosts
        lamp.binding = Some(binding());
        let mut act = Actuation::new(vec![lamp]).unwrap();
        act.dispatch(&cmd("lamp", ActuationTarget::Light(SAFE_WHITE), 0), 0).unwrap();
        assert!(act.flush_physical(Duration::from_secs(10)));
        let r = act.drain_physical_results();
        assert!(!r[0].ok && r[0].attempts == 2);
    }

    #[test]
    fn panic_targets_every_actuator() {
        let act = Actuation::new(vec![Actuator::relay("fan", None), Actuator::light("l", None, LightState::OFF)]).unwrap();
        let cmds = act.panic_commands(0);
        assert_eq!(cmds.len(), 2);
        assert!(cmds.iter().any(|c| c.target == ActuationTarget::Relay(false)));
        assert!(cmds.iter().any(|c| c.target == ActuationTarget::Light(SAFE_WHITE)));
    }
}
