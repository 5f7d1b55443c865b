//! Host side of thinkact: artifact files, the TCP action transport, the
//! durable labeling store, the HTTP service and the command-line tool.

pub mod cli;
pub mod files;
pub mod journal;
pub mod ops;
pub mod service;
pub mod store;
pub mod wire;
