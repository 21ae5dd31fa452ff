//! IO and driver layer around `disco-core`: the scenario config file
//! format, the metrics/trace documents, vocabulary bootstrap files and the
//! command line interface.

pub mod cli;
pub mod config;
pub mod metrics_doc;
pub mod vocab_io;
