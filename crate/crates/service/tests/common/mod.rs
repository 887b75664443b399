#![allow(dead_code)]

use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde_json::Value;
use stagehand_core::config::EngineConfig;
use stagehand_service::{cli, ServeOptions, Server};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

pub fn pillar_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/pillar")
}

pub fn pillar_config(data: &Path) -> EngineConfig {
    let mut c = cli::load_config(&pillar_dir().join("config.json")).unwrap();
    c.data_dir = data.to_path_buf();
    c
}

pub fn start(data: &Path) -> Server {
    let mut opts = ServeOptions::new(pillar_config(data));
    opts.fake_bridge = Some(0);
    Server::start(opts).unwrap()
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(10)))
        .build()
        .into()
}

fn finish(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> (u16, Value) {
    let mut resp = resp.unwrap();
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

pub fn get(server: &Server, path: &str) -> (u16, Value) {
    finish(agent().get(format!("{}{path}", server.url())).call())
}

pub fn post(server: &Server, path: &str, body: &str) -> (u16, Value) {
    finish(
        agent()
            .post(format!("{}{path}", server.url()))
            .header("content-type", "application/json")
            .send(body),
    )
}

pub type Ws = WebSocket<MaybeTlsStream<TcpStream>>;

pub fn ws(server: &Server, path: &str) -> Ws {
    let (mut sock, _) = tungstenite::connect(format!("ws://{}{path}", server.addr())).unwrap();
    if let MaybeTlsStream::Plain(s) = sock.get_mut() {
        s.set_read_timeout(Some(Duration::from_millis(200))).unwrap();
    }
    sock
}

pub fn send(sock: &mut Ws, text: &str) {
    sock.send(Message::Text(text.into())).unwrap();
}

/// Reads frames until one satisfies `pred` or the deadline passes.
pub fn wait_frame(sock: &mut Ws, timeout: Duration, pred: impl Fn(&Value) -> bool) -> Option<Value> {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        match sock.read() {
            Ok(Message::Text(t)) => {
                let v: Value = serde_json::from_str(t.as_str()).unwrap();
                if pred(&v) {
                    return Some(v);
                }
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) => panic!("websocket: {e}"),
        }
    }
    None
}

pub fn eventually(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    false
}

pub const GREETING: &str =
    r#"{"type":"speech","speaker":"visitor","text":"How are you?","confidence":0.9,"x":5.2,"y":4.1,"t":0}"#;
