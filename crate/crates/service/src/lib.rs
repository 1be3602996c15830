//! HTTP facade over the interleaved decoder. Sessions live as one JSON file
//! each under the data directory and survive restarts.

mod api;
mod store;

pub use api::{router, serve, AppState, ServiceConfig, DEFAULT_GENERATION_CAP};
pub use store::{now_ms, ApiSession, SessionStore, Slot, StoreError, WriteFault, WriteGuard};
