//! File formats, run configuration and the command-line front end for
//! `tomopd-core`.

pub mod cli;
pub mod config;
pub mod io;
