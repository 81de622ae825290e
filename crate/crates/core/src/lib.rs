//! Deterministic discrete-event simulator for model and profile version
//! control in speaker-recognition deployments.
//!
//! A run wires user devices, a frontend, a profile database, cloud servers
//! and a model store together, drives them from a single event queue, and
//! reports availability, latency, re-enrollment and version-bounce metrics
//! for one of the version-control strategies in [`strategies`].

pub mod domain;
pub mod engine;
pub mod kernel;
pub mod metrics;
pub mod runner;
pub mod scenario;
pub mod strategies;
pub mod topology;
pub mod world;

pub use metrics::Report;
pub use runner::{compare, run, run_detailed, RunFailed};
pub use scenario::{load_scenario, Scenario, ScenarioError};
