//! Discrete-event simulator for batches of tool-using LLM agents sharing a
//! prefix-tree KV cache, with pluggable admission control.

pub mod cache;
pub mod config;
pub mod controller;
pub mod cost;
pub mod engine;
pub mod experiment;
pub mod metrics;
pub mod workload;
