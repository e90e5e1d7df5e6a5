pub mod algorithms;
pub mod chain;
pub mod config;
pub mod data;
pub mod engine;
pub mod experiment;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod streams;
