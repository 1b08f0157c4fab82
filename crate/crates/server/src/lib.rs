//! Edge pose server: HTTP proxies around the core pipelines, the benchmark
//! client and the `edgepose` command line.

pub mod bench;
pub mod cli;
pub mod client;
pub mod commands;
pub mod config;
pub mod proxy;
pub mod remote;
pub mod report;
pub mod server;
pub mod staged;
pub mod txstamp;
