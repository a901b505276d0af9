//! Command-line and REST front end for lungscope.

pub mod api;
pub mod cli;
