//! REST service for the acm control plane: code upload, job submission and
//! inspection, log following, cluster status and workspace listings, plus
//! static hosting for the web UI.

pub mod config;
pub mod control;
pub mod routes;
pub mod service;
pub mod types;

pub use config::{BackendSettings, ServerConfig, TokenEntry, DEFAULT_PAGE_SIZE};
pub use routes::{router, AppState};
pub use service::{HttpServer, Service};
