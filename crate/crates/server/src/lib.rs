//! HTTP API and command-line front end for the signpost engine.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;

pub use api::{router, AppState};
pub use config::AppConfig;
pub use error::{ApiError, AppError, ErrorBody};
