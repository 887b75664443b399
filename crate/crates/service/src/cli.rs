//! Subcommand bodies; `main` only parses arguments and maps exit codes.

use std::path::Path;
use std::sync::Arc;

use serde_json::{json, Value};

use stagehand_core::config::{EngineConfig, ProviderConfig};
use stagehand_core::engine::{run_scenario, Engine, EngineOptions, ExecutorKind, Storage};
use stagehand_core::ingest::ScenarioScript;
use stagehand_core::provider::{LanguageModelProvider, MockProvider, ScriptedProvider};
use stagehand_core::session_log::{diff, read_log};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ProviderChoice {
    Mock,
    Scripted,
}

/// Loads a config with every relative path made absolute, so a copy stored
/// in a session directory still resolves.
pub fn load_config(path: &Path) -> Result<EngineConfig, String> {
    let abs = std::path::absolute(path).map_err(|e| format!("{}: {e}", path.display()))?;
    EngineConfig::load(&abs).map_err(|e| format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn choose_provider(
    config: &EngineConfig,
    choice: Option<ProviderChoice>,
    replies: Option<&Path>,
) -> Result<Arc<dyn LanguageModelProvider>, String> {
    match (choice, replies, &config.provider) {
        (Some(ProviderChoice::Scripted), Some(p), _) | (None, Some(p), _) => Ok(Arc::new(
            ScriptedProvider::from_json(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?,
        )),
        (Some(ProviderChoice::Scripted), None, ProviderConfig::Scripted { .. }) => {
            config.provider.build().map_err(|e| e.to_string())
        }
        (Some(ProviderChoice::Scripted), None, _) => {
            Err("--provider scripted needs --replies or a scripted provider in the config".into())
        }
        (Some(ProviderChoice::Mock), _, ProviderConfig::Mock { .. }) | (None, None, _) => {
            config.provider.build().map_err(|e| e.to_string())
        }
        (Some(ProviderChoice::Mock), _, _) => Ok(Arc::new(MockProvider::holding())),
    }
}

/// Runs a scenario on logical time and writes a session directory.
pub fn simulate(
    config: EngineConfig,
    scenario: &Path,
    provider: Arc<dyn LanguageModelProvider>,
    session_id: Option<String>,
) -> Result<Value, String> {
    let script = ScenarioScript::from_json(&read(scenario)?).map_err(|e| format!("{}: {e}", scenario.display()))?;
    let mut engine = Engine::new(
        config.clone(),
        provider,
        EngineOptions {
            session_id,
            storage: Storage::Directory,
            executor: ExecutorKind::Inline,
            interpret_framing: true,
            crash_after_persist: false,
        },
    )
    .map_err(|e| e.to_string())?;
    let dir = engine.session_dir().cloned();
    if let Some(d) = &dir {
        let text = serde_json::to_string_pretty(&config).map_err(|e| e.to_string())?;
        std::fs::write(d.join("config.json"), text).map_err(|e| e.to_string())?;
    }
    let summary = run_scenario(&mut engine, &script).map_err(|e| e.to_string())?;
    engine.close().map_err(|e| e.to_string())?;
    Ok(json!({
        "session": summary.session,
        "session_dir": dir,
        "ticks": summary.ticks,
        "end_ms": summary.end_ms,
        "dispatched": summary.dispatched,
        "traces": summary.traces,
    }))
}

/// Replays a session directory; `config` overrides the stored copy.
pub fn replay_session(dir: &Path, config: Option<&Path>, quiet: bool) -> Result<Value, String> {
    let fallback = config.map(load_config).transpose()?;
    let mut last = 0;
    let mut progress = |done: usize, total: usize| {
        let pct = (done * 100).checked_div(total).unwrap_or(100);
        if !quiet && pct >= last + 10 {
            last = pct;
            eprintln!("replay {pct}% ({done}/{total})");
        }
    };
    let report = match (config, fallback) {
        (Some(_), Some(cfg)) => {
            let log = read_log(&dir.join("log.ndjson")).map_err(|e| e.to_string())?;
            let r = stagehand_core::engine::replay(&log, &cfg, &mut progress).map_err(|e| e.to_string())?;
            json!({
                "session": r.session,
                "identical": r.identical,
                "partial": r.partial,
                "original": r.original.len(),
                "reproduced": r.reproduced.len(),
                "prompt_mismatches": r.prompt_mismatches,
            })
        }
        _ => crate::server::replay_dir(dir, None, &mut progress).map_err(|e| e.body["error"].to_string())?,
    };
    Ok(report)
}

pub fn diff_sessions(a: &Path, b: &Path) -> Result<stagehand_core::session_log::DiffReport, String> {
    let la = read_log(&a.join("log.ndjson")).map_err(|e| format!("{}: {e}", a.display()))?;
    let lb = read_log(&b.join("log.ndjson")).map_err(|e| format!("{}: {e}", b.display()))?;
    diff(&la, &lb).map_err(|e| e.to_string())
}

/// Asks a running engine to go to its safe state.
pub fn remote_panic(base_url: &str) -> Result<Value, String> {
    let url = format!("{}/api/panic", base_url.trim_end_matches('/'));
    let mut resp = ureq::post(&url).send_empty().map_err(|e| format!("{url}: {e}"))?;
    let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}
