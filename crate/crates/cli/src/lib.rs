//! Library side of the `l2nnn` command-line tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod report;
