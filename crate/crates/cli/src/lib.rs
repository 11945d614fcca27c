//! Command-line front end and HTTP service for `complyscan-core`.

pub mod cli;
pub mod error;
pub mod service;
