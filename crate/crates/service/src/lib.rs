//! HTTP surface, session persistence and training jobs around `forge_core`.

pub mod api;
pub mod config;
pub mod error;
pub mod jobs;
pub mod session;
pub mod store;

pub use api::{router, AppState};
pub use config::ForgeConfig;
pub use error::ServiceError;
