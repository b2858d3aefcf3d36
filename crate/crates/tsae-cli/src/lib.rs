//! Library surface of the pipeline CLI: configuration parsing, manifest
//! hashing, error classification, and the command implementations. The
//! `tsae` binary is a thin dispatcher over these.

pub mod commands;
pub mod config;
pub mod errors;
pub mod manifest;
