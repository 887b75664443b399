pub mod actuation;
pub mod config;
pub mod decision;
pub mod director;
pub mod dramaturgy;
pub mod engine;
pub mod heatgrid;
pub mod ingest;
pub mod memory;
pub mod model;
pub mod provider;
pub mod session_log;
