use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stagehand_service::cli::{self, ProviderChoice};
use stagehand_service::{ServeOptions, Server};

#[derive(Parser)]
#[command(name = "stagehand", version, about = "Rehearsal orchestration engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the engine with its HTTP and WebSocket API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Co-start a fake Hue bridge on this port and bind all actuators to it.
        #[arg(long, value_name = "PORT")]
        fake_bridge: Option<u16>,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: SocketAddr,
        /// Store full prompt text in the session log.
        #[arg(long)]
        log_full_prompts: bool,
        #[arg(long)]
        session: Option<String>,
    },
    /// Run a scenario file on logical time and record a session.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        provider: Option<ProviderChoice>,
        /// Reply list for the scripted provider.
        #[arg(long)]
        replies: Option<PathBuf>,
        #[arg(long)]
        session: Option<String>,
    },
    /// Re-execute a recorded session and compare its dispatches.
    Replay {
        #[arg(long)]
        session: PathBuf,
        /// Use this config instead of the copy stored with the session.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare two sessions of the same scenario exchange by exchange.
    Diff { a: PathBuf, b: PathBuf },
    /// All relays off, lights to safe white, on a running engine.
    Panic {
        #[arg(long, default_value = "http://127.0.0.1:7878")]
        url: String,
    },
}

fn print(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve {
            config,
            fake_bridge,
            bind,
            log_full_prompts,
            session,
        } => {
            let cfg = match cli::load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let mut opts = ServeOptions::new(cfg);
            opts.bind = bind;
            opts.fake_bridge = fake_bridge;
            opts.log_full_prompts = log_full_prompts;
            opts.session_id = session;
            opts.crash_after_persist = std::env::var_os("STAGEHAND_CRASH_AFTER_DISPATCH").is_some();
            let server = match Server::start(opts) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            println!("{{\"url\":\"{}\",\"session\":\"{}\"}}", server.url(), server.session());
            server.wait_for_interrupt();
            log::info!("shutting down");
            match server.shutdown() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e.body),
            }
        }
        Command::Simulate {
            config,
            scenario,
            provider,
            replies,
            session,
        } => {
            let run = || {
                let cfg = cli::load_config(&config)?;
                let p = cli::choose_provider(&cfg, provider, replies.as_deref())?;
                cli::simulate(cfg, &scenario, p, session)
            };
            match run() {
                Ok(v) => {
                    print(&v);
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Replay { session, config } => match cli::replay_session(&session, config.as_deref(), false) {
            Ok(v) => {
                print(&v);
                if v["identical"] == true {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => fail(e),
        },
        Command::Diff { a, b } => match cli::diff_sessions(&a, &b) {
            Ok(report) => {
                print(&report);
                if report.is_empty() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => fail(e),
        },
        Command::Panic { url } => match cli::remote_panic(&url) {
            Ok(v) => {
                print(&v);
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
