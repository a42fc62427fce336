//! Operator surface for moodgen: the `moodgen` command and its HTTP service.

pub mod cli;
pub mod model;
pub mod server;
