//! JSON scenarios: named actors, ordered steps, expectations checked as
//! they run.

use std::collections::{BTreeMap, HashMap};
use std::net::IpAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncReadExt, AsyncWriteExt};

use super::client::{ConnectResult, DeviceClient, HttpResult};
use super::env::{wait_until, EnvOptions, Environment, LaunchError};
use super::idp::FIXTURE_PASSWORD;
use super::upstream::EchoDump;
use crate::policy::RoutePolicy;
use crate::token::IDENTITY_HEADER;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Actor {
    pub device: String,
    #[serde(default = "localhost")]
    pub source_ip: IpAddr,
}

fn localhost() -> IpAddr {
    IpAddr::V4(std::net::Ipv4Addr::LOCALHOST)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Login,
    HttpGet,
    Connect,
    AdminOp,
    AdvanceClock,
    Assert,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expect {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Count of identity headers the upstream received.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity_headers: Option<usize>,
    /// Keep retrying the step until it matches or this much time passes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub within_ms: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step {
    #[serde(default)]
    pub actor: Option<String>,
    pub action: Action,
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(default)]
    pub expect: Option<Expect>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScenarioOptions {
    #[serde(default)]
    pub poll_interval_ms: Option<u64>,
    #[serde(default)]
    pub max_staleness_s: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub options: ScenarioOptions,
    pub actors: BTreeMap<String, Actor>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Deserialize)]
struct LoginParams {
    user: String,
    #[serde(default = "fixture_password")]
    password: String,
    host: String,
    #[serde(default = "root_path")]
    path: String,
}

#[derive(Debug, Deserialize)]
struct GetParams {
    host: String,
    #[serde(default = "root_path")]
    path: String,
    #[serde(default)]
    headers: Vec<(String, String)>,
}

#[derive(Debug, Deserialize)]
struct ConnectParams {
    host: String,
    #[serde(default = "ssh_port")]
    port: u16,
    /// Keep the tunnel open for a later `tunnel_closed` assertion.
    #[serde(default)]
    hold: bool,
    /// Bytes to push through and compare after echo.
    #[serde(default)]
    echo_bytes: usize,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum AdminOp {
    Killswitch { enabled: bool },
    Revoke { device: String, #[serde(default)] reason: String },
    Route { route: RoutePolicy },
    StopControlPlane,
    StartControlPlane,
}

#[derive(Debug, Deserialize)]
struct AdvanceParams {
    seconds: i64,
}

#[derive(Debug, Deserialize)]
struct AssertParams {
    #[serde(default)]
    step: Option<usize>,
    #[serde(default)]
    tunnel_closed: Option<String>,
    #[serde(default)]
    within_ms: Option<u64>,
}

fn fixture_password() -> String {
    FIXTURE_PASSWORD.to_string()
}

fn root_path() -> String {
    "/".into()
}

fn ssh_port() -> u16 {
    22
}

/// What a step produced.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub status: Option<u16>,
    pub reason: Option<String>,
    pub identity_headers: Option<usize>,
    pub error: Option<String>,
    /// Time until the expectation first held, for retried steps.
    pub elapsed_ms: Option<u64>,
}

impl Observation {
    fn from_http(r: &HttpResult) -> Self {
        let identity_headers = r
            .json::<EchoDump>()
            .ok()
            .map(|d| d.header_values(IDENTITY_HEADER).len());
        Self {
            status: Some(r.status.as_u16()),
            reason: r.reason(),
            identity_headers,
            ..Self::default()
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Self {
            error: Some(e.to_string()),
            ..Self::default()
        }
    }

    fn ok() -> Self {
        Self::default()
    }

    fn satisfies(&self, e: &Expect) -> bool {
        e.status.is_none_or(|s| self.status == Some(s))
            && e.reason.as_ref().is_none_or(|r| self.reason.as_ref() == Some(r))
            && e.identity_headers.is_none_or(|n| self.identity_headers == Some(n))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub index: usize,
    pub action: Action,
    pub observation: Observation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepFailure {
    pub index: usize,
    pub expected: Expect,
    pub observed: Observation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub steps: Vec<StepReport>,
    pub failure: Option<StepFailure>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }

    /// Denial reasons in step order; identical across reruns of a scenario.
    pub fn reasons(&self) -> Vec<Option<String>> {
        self.steps.iter().map(|s| s.observation.reason.clone()).collect()
    }

    pub fn elapsed_ms(&self, step: usize) -> Option<u64> {
        self.steps.get(step).and_then(|s| s.observation.elapsed_ms)
    }
}

impl std::fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.failure {
            None => write!(f, "{}: pass ({} steps)", self.name, self.steps.len()),
            Some(fail) => write!(
                f,
                "{}: FAIL at step {}: expected {}, observed {}",
                self.name,
                fail.index,
                serde_json::to_string(&fail.expected).unwrap_or_default(),
                serde_json::to_string(&fail.observed).unwrap_or_default(),
            ),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Launch(#[from] LaunchError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl Scenario {
    pub fn from_json(json: &str) -> Result<Self, ScenarioError> {
        let s: Self = serde_json::from_str(json).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |i: usize, m: &str| Err(ScenarioError::Invalid(format!("step {i}: {m}")));
        for (i, step) in self.steps.iter().enumerate() {
            let needs_actor = matches!(step.action, Action::Login | Action::HttpGet | Action::Connect);
            match &step.actor {
                Some(a) if !self.actors.contains_key(a) => return invalid(i, &format!("unknown actor {a}")),
                None if needs_actor => return invalid(i, "missing actor"),
                _ => {}
            }
            if step.action == Action::Assert {
                let p: AssertParams = serde_json::from_value(step.params.clone())
                    .map_err(|e| ScenarioError::Invalid(format!("step {i}: {e}")))?;
                match (p.step, p.tunnel_closed) {
                    (Some(prior), None) if prior < i => {}
                    (Some(_), None) => return invalid(i, "assert must reference an earlier step"),
                    (None, Some(actor)) => {
                        let opened = self.steps[..i].iter().any(|s| {
                            s.action == Action::Connect && s.actor.as_deref() == Some(actor.as_str())
                        });
                        if !opened {
                            return invalid(i, "tunnel_closed names an actor with no earlier connect");
                        }
                    }
                    _ => return invalid(i, "assert needs exactly one of step or tunnel_closed"),
                }
            }
        }
        Ok(())
    }

    pub fn env_options(&self) -> EnvOptions {
        let mut o = EnvOptions::default();
        if let Some(ms) = self.options.poll_interval_ms {
            o.poll_interval = Duration::from_millis(ms);
        }
        if let Some(s) = self.options.max_staleness_s {
            o.max_staleness_s = s;
        }
        o
    }
}

const BUILTIN: &[(&str, &str)] = &[
    ("happy_path", include_str!("../../scenarios/happy_path.json")),
    ("kill_switch_propagation", include_str!("../../scenarios/kill_switch_propagation.json")),
    ("impossible_travel_london_nyc", include_str!("../../scenarios/impossible_travel_london_nyc.json")),
];

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

pub fn builtin(name: &str) -> Option<Scenario> {
    BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, json)| Scenario::from_json(json).expect("builtin scenarios are valid"))
}

struct Tunnel {
    closed: Arc<AtomicBool>,
}

struct Runner<'a> {
    env: &'a Environment,
    scenario: &'a Scenario,
    clients: HashMap<String, DeviceClient>,
    tunnels: HashMap<String, Tunnel>,
    rng: rand::rngs::StdRng,
}

fn params<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<T, ScenarioError> {
    serde_json::from_value(v.clone()).map_err(|e| ScenarioError::Invalid(e.to_string()))
}

impl Runner<'_> {
    fn client(&mut self, actor: &str) -> &DeviceClient {
        let a = &self.scenario.actors[actor];
        let env = self.env;
        self.clients
            .entry(actor.to_string())
            .or_insert_with(|| env.client_from(&a.device, a.source_ip))
    }

    async fn once(&mut self, step: &Step) -> Result<Observation, ScenarioError> {
        let actor = step.actor.as_deref().unwrap_or_default();
        Ok(match step.action {
            Action::Login => {
                let p: LoginParams = params(&step.params)?;
                match self.client(actor).login(&p.host, &p.path, &p.user, &p.password).await {
                    Ok(out) => Observation::from_http(&out.landing),
                    Err(e) => Observation::error(e),
                }
            }
            Action::HttpGet => {
                let p: GetParams = params(&step.params)?;
                let extra: Vec<(&str, &str)> = p.headers.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
                match self.client(actor).get_with(&p.host, &p.path, &extra).await {
                    Ok(r) => Observation::from_http(&r),
                    Err(e) => Observation::error(e),
                }
            }
            Action::Connect => {
                let p: ConnectParams = params(&step.params)?;
                let client = self.client(actor);
                let session = client.session_id();
                match client.connect(&p.host, p.port, session.as_deref()).await {
                    Err(e) => Observation::error(e),
                    Ok(ConnectResult::Refused(r)) => Observation::from_http(&r),
                    Ok(ConnectResult::Established(mut io)) => {
                        let mut obs = Observation {
                            status: Some(200),
                            ..Observation::default()
                        };
                        if p.echo_bytes > 0 {
                            let mut sent = vec![0u8; p.echo_bytes];
                            self.rng.fill_bytes(&mut sent);
                            let mut back = vec![0u8; p.echo_bytes];
                            let (mut r, mut w) = tokio::io::split(&mut io);
                            let (wr, rd) = tokio::join!(w.write_all(&sent), r.read_exact(&mut back));
                            if let Err(e) = wr.and(rd.map(|_| ())) {
                                obs.error = Some(format!("echo failed: {e}"));
                            } else if back != sent {
                                obs.error = Some("echoed bytes differ".into());
                            }
                        }
                        if p.hold {
                            let closed = Arc::new(AtomicBool::new(false));
                            let flag = closed.clone();
                            tokio::spawn(async move {
                                let mut buf = [0u8; 1024];
                                loop {
                                    match io.read(&mut buf).await {
                                        Ok(0) | Err(_) => break,
                                        Ok(_) => {}
                                    }
                                }
                                flag.store(true, Ordering::SeqCst);
                            });
                            self.tunnels.insert(actor.to_string(), Tunnel { closed });
                        }
                        obs
                    }
                }
            }
            Action::AdminOp => {
                let op: AdminOp = params(&step.params)?;
                let admin = &self.env.admin;
                let res = match op {
                    AdminOp::Killswitch { enabled } => admin.set_kill_switch(enabled).await.map(|_| ()),
                    AdminOp::Revoke { device, reason } => {
                        let fp = self.env.fingerprint(&device);
                        admin.add_revocation(&fp, &reason).await.map(|_| ())
                    }
                    AdminOp::Route { route } => admin.upsert_route(&route).await.map(|_| ()),
                    AdminOp::StopControlPlane => {
                        self.env.stop_control_plane().await;
                        Ok(())
                    }
                    AdminOp::StartControlPlane => {
                        return Ok(match self.env.start_control_plane().await {
                            Ok(()) => Observation::ok(),
                            Err(e) => Observation::error(e),
                        });
                    }
                };
                match res {
                    Ok(()) => Observation::ok(),
                    Err(e) => Observation::error(e),
                }
            }
            Action::AdvanceClock => {
                let p: AdvanceParams = params(&step.params)?;
                self.env.advance(chrono::Duration::seconds(p.seconds)).await;
                Observation::ok()
            }
            Action::Assert => unreachable!("asserts are handled by the caller"),
        })
    }
}

/// Runs `s` against a launched environment. Assertion failures end up in
/// the report; only malformed scenarios are errors.
pub async fn run_scenario(s: &Scenario, env: &Environment) -> Result<ScenarioReport, ScenarioError> {
    s.validate()?;
    let mut runner = Runner {
        env,
        scenario: s,
        clients: HashMap::new(),
        tunnels: HashMap::new(),
        rng: rand::rngs::StdRng::seed_from_u64(s.seed),
    };
    let mut reports: Vec<StepReport> = Vec::new();
    for (index, step) in s.steps.iter().enumerate() {
        let expect = step.expect.clone().unwrap_or_default();
        let observation = if step.action == Action::Assert {
            let p: AssertParams = params(&step.params)?;
            if let Some(prior) = p.step {
                reports[prior].observation.clone()
            } else {
                let actor = p.tunnel_closed.expect("validated");
                let within = Duration::from_millis(p.within_ms.unwrap_or(0));
                let closed = runner
                    .tunnels
                    .get(&actor)
                    .map(|t| t.closed.clone())
                    .unwrap_or_else(|| Arc::new(AtomicBool::new(false)));
                match wait_until(within, || {
                    let c = closed.clone();
                    async move { c.load(Ordering::SeqCst) }
                })
                .await
                {
                    Some(d) => Observation {
                        elapsed_ms: Some(d.as_millis() as u64),
                        ..Observation::default()
                    },
                    None => Observation::error(format!("tunnel for {actor} still open after {within:?}")),
                }
            }
        } else {
            let start = tokio::time::Instant::now();
            let deadline = Duration::from_millis(expect.within_ms.unwrap_or(0));
            loop {
                let mut obs = runner.once(step).await?;
                let done = obs.error.is_none() && obs.satisfies(&expect);
                if done || start.elapsed() >= deadline {
                    if expect.within_ms.is_some() {
                        obs.elapsed_ms = Some(start.elapsed().as_millis() as u64);
                    }
                    break obs;
                }
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        };
        let failed = observation.error.is_some() || !observation.satisfies(&expect);
        reports.push(StepReport {
            index,
            action: step.action,
            observation: observation.clone(),
        });
        if failed {
            return Ok(ScenarioReport {
                name: s.name.clone(),
                steps: reports,
                failure: Some(StepFailure {
                    index,
                    expected: expect,
                    observed: observation,
                }),
            });
        }
    }
    Ok(ScenarioReport {
        name: s.name.clone(),
        steps: reports,
        failure: None,
    })
}

/// Launches a fresh environment configured from the scenario, runs it and
/// tears the environment down.
pub async fn run_isolated(s: &Scenario) -> Result<ScenarioReport, ScenarioError> {
    let env = Environment::launch_with(s.env_options()).await?;
    let report = run_scenario(s, &env).await;
    env.shutdown().await;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_validate() {
        for name in builtin_names() {
            let s = builtin(name).unwrap();
            assert_eq!(s.name, name);
            assert!(!s.steps.is_empty());
        }
    }

    #[test]
    fn assert_must_look_backwards() {
        let json = r#"{"name":"x","actors":{},"steps":[
            {"action":"assert","params":{"step":0}}
        ]}"#;
        assert!(matches!(Scenario::from_json(json), Err(ScenarioError::Invalid(_))));
        let json = r#"{"name":"x","actors":{},"steps":[
            {"action":"assert","params":{"tunnel_closed":"a"}}
        ]}"#;
        assert!(matches!(Scenario::from_json(json), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn unknown_actor_rejected() {
        let json = r#"{"name":"x","actors":{},"steps":[
            {"actor":"ghost","action":"http_get","params":{"host":"a"}}
        ]}"#;
        assert!(matches!(Scenario::from_json(json), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn expectation_matching() {
        let obs = Observation {
            status: Some(403),
            reason: Some("kill_switch".into()),
            ..Observation::default()
        };
        assert!(obs.satisfies(&Expect {
            status: Some(403),
            ..Expect::default()
        }));
        assert!(!obs.satisfies(&Expect {
            reason: Some("ok".into()),
            ..Expect::default()
        }));
    }
}
