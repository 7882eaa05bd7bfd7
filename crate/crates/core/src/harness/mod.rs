//! Desk-scale test harness: mock IdP, echo upstreams, programmatic device
//! clients, a full loopback environment and a JSON scenario runner.

pub mod client;
pub mod env;
pub mod idp;
pub mod scenario;
pub mod upstream;

pub use crate::control_plane::HttpServer;
pub use client::{ConnectResult, DeviceClient, HttpResult};
pub use env::{EnvOptions, Environment};
pub use scenario::{run_isolated, run_scenario, Scenario, ScenarioReport};
