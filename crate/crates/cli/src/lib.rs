//! Command-line front end and session service for `weakloop-core`.

pub mod commands;
pub mod service;
