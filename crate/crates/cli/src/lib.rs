//! Config parsing and report writing for `rbso-lab`.

pub mod config;
pub mod report;
