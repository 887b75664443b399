//! Service layer for the stagehand engine: the engine thread, the HTTP and
//! WebSocket API, and the helpers behind the command-line tool.

pub mod cli;
pub mod runtime;
pub mod server;

pub use runtime::{ApiError, EngineHandle, EngineThread, Request};
pub use server::{bind_to_bridge, replay_dir, ServeError, ServeOptions, Server};
