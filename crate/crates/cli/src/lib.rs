//! `reader-bench` command line and grading HTTP server.

pub mod commands;
pub mod config;
pub mod error;
pub mod http_predictor;
pub mod server;
