//! Project store, job runner and HTTP API.

pub mod api;
pub mod app;
pub mod jobs;
pub mod store;

pub use app::{Service, ServiceError};
