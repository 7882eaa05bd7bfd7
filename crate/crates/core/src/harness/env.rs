//! A complete desk-scale deployment on loopback: CA and device certs,
//! control plane, mock IdP, echo upstreams and one gateway.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::Request;
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::Router;
use chrono::{DateTime, Utc};
use ipnet::IpNet;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::client::DeviceClient;
use super::idp::{self, IdpCore, UserDirectory};
use super::upstream::{echo_router, TcpEcho};
use crate::authn::{EmploymentType, GeoDb, GeoPoint, HttpIdpClient, IdpConfig, SessionStore};
use crate::clock::{Clock, OffsetClock, SharedClock};
use crate::control_plane::client::ControlPlaneClient;
use crate::control_plane::{self, ControlPlaneState, HttpServer, InitialSettings, LogStore, PolicyStore};
use crate::gateway::{Gateway, GatewayParts};
use crate::observe::{read_journal, AccessLogRecord};
use crate::pki::{CertificateAuthority, IssuedDevice};
use crate::policy::{RouteKind, RoutePolicy, DEFAULT_MAX_STALENESS_S, DEFAULT_VELOCITY_LIMIT_KMH};
use crate::tls_gate::{load_certs_pem, load_key_pem};
use crate::token::{IdentityClaims, PublishedKeys, SigningKeyPair, SigningKeys, VerifyError};

pub const ADMIN_TOKEN: &str = "harness-admin-token";
pub const GATEWAY_TOKEN: &str = "harness-gateway-token";
pub const IDP_CLIENT_ID: &str = "zta-gateway";
pub const DEVICES: [&str; 3] = ["laptop-001", "laptop-002", "laptop-003"];
pub const APP1: &str = "app1.corp.test";
pub const APP2: &str = "app2.corp.test";
pub const BASTION: &str = "bastion.corp.test";

/// Source addresses the geo table places in London and New York.
pub const LONDON_IP: IpAddr = IpAddr::V4(Ipv4Addr::new(127, 0, 0, 2));
pub const NYC_IP: IpAddr = IpAddr::V4(Ipv4Addr::new(127, 0, 0, 3));
pub const LONDON: GeoPoint = GeoPoint::new(51.5074, -0.1278);
pub const NYC: GeoPoint = GeoPoint::new(40.7128, -74.0060);

#[derive(Debug, Clone)]
pub struct EnvOptions {
    pub poll_interval: Duration,
    pub max_staleness_s: u64,
    pub velocity_limit_kmh: f64,
    pub header_limit_bytes: usize,
    /// Fraction of control-plane requests answered with 503, and the seed.
    pub flaky_control_plane: Option<(f64, u64)>,
}

impl Default for EnvOptions {
    fn default() -> Self {
        Self {
            poll_interval: Duration::from_secs(1),
            max_staleness_s: DEFAULT_MAX_STALENESS_S,
            velocity_limit_kmh: DEFAULT_VELOCITY_LIMIT_KMH,
            header_limit_bytes: crate::config::DEFAULT_HEADER_LIMIT_BYTES,
            flaky_control_plane: None,
        }
    }
}

/// Failures bringing the environment up, as opposed to scenario failures.
#[derive(Debug, thiserror::Error)]
#[error("environment launch failed: {0}")]
pub struct LaunchError(#[from] anyhow::Error);

#[derive(Debug, Default)]
pub struct FaultStats {
    pub seen: std::sync::atomic::AtomicU64,
    pub failed: std::sync::atomic::AtomicU64,
}

fn flaky(router: Router, rate: f64, seed: u64, stats: Arc<FaultStats>) -> Router {
    let rng = Arc::new(Mutex::new(StdRng::seed_from_u64(seed)));
    router.layer(middleware::from_fn(move |req: Request, next: Next| {
        let rng = rng.clone();
        let stats = stats.clone();
        async move {
            use std::sync::atomic::Ordering::Relaxed;
            stats.seen.fetch_add(1, Relaxed);
            let fail = rng.lock().unwrap().gen_bool(rate);
            if fail {
                stats.failed.fetch_add(1, Relaxed);
                return (StatusCode::SERVICE_UNAVAILABLE, "injected fault").into_response();
            }
            let resp: Response = next.run(req).await;
            resp
        }
    }))
}

pub fn default_routes(http_upstream: SocketAddr, tcp_upstream: SocketAddr) -> Vec<RoutePolicy> {
    let fte = BTreeSet::from([EmploymentType::Fte]);
    vec![
        RoutePolicy {
            host: APP1.into(),
            upstream: http_upstream.to_string(),
            kind: RouteKind::Http,
            required_groups: BTreeSet::from(["eng".to_string()]),
            allowed_employment: BTreeSet::from([EmploymentType::Fte, EmploymentType::Contractor]),
            session_max_age_s: 12 * 3600,
        },
        RoutePolicy {
            host: APP2.into(),
            upstream: http_upstream.to_string(),
            kind: RouteKind::Http,
            required_groups: BTreeSet::new(),
            allowed_employment: fte.clone(),
            session_max_age_s: 12 * 3600,
        },
        RoutePolicy {
            host: BASTION.into(),
            upstream: tcp_upstream.to_string(),
            kind: RouteKind::TcpTunnel,
            required_groups: BTreeSet::new(),
            allowed_employment: fte,
            session_max_age_s: 12 * 3600,
        },
    ]
}

pub fn harness_geo() -> GeoDb {
    GeoDb::new([
        (IpNet::from(LONDON_IP), LONDON),
        (IpNet::from(NYC_IP), NYC),
    ])
}

/// Every service of the deployment, each on an ephemeral loopback port.
pub struct Environment {
    pub dir: tempfile::TempDir,
    pub clock: Arc<OffsetClock>,
    pub ca: Mutex<CertificateAuthority>,
    pub devices: BTreeMap<String, IssuedDevice>,
    pub control_plane: ControlPlaneState,
    pub admin: ControlPlaneClient,
    pub idp: Arc<IdpCore>,
    pub gateway: Gateway,
    pub tcp_echo: TcpEcho,
    pub fault_stats: Arc<FaultStats>,
    cp_router: Router,
    cp_addr: SocketAddr,
    cp_server: tokio::sync::Mutex<Option<HttpServer>>,
    idp_server: HttpServer,
    upstream: HttpServer,
    options: EnvOptions,
}

impl std::fmt::Debug for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Environment")
            .field("gateway", &self.gateway.addr())
            .field("control_plane", &self.cp_addr)
            .finish_non_exhaustive()
    }
}

fn loopback() -> SocketAddr {
    SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), 0)
}

impl Environment {
    pub async fn launch() -> Result<Self, LaunchError> {
        Self::launch_with(EnvOptions::default()).await
    }

    pub async fn launch_with(options: EnvOptions) -> Result<Self, LaunchError> {
        Ok(Self::start(options).await?)
    }

    async fn start(options: EnvOptions) -> anyhow::Result<Self> {
        let dir = tempfile::tempdir()?;
        let offset = Arc::new(OffsetClock::new());
        let clock: SharedClock = offset.clone();
        let now = clock.now();

        let mut ca = CertificateAuthority::init(3650, now - chrono::Duration::days(60))?;
        let mut devices = BTreeMap::new();
        for d in DEVICES {
            devices.insert(d.to_string(), ca.issue_device_cert(d, true, 30, now)?);
        }
        let server = ca.issue_server_cert(&["gateway.corp.test", "*.corp.test", "localhost"], 365, now)?;

        let upstream = HttpServer::bind(loopback(), echo_router()).await?;
        let tcp_echo = TcpEcho::bind(loopback()).await?;

        let settings = InitialSettings {
            geo_velocity_limit_kmh: options.velocity_limit_kmh,
            max_staleness_s: options.max_staleness_s,
        };
        let state = ControlPlaneState::new(
            PolicyStore::open(&dir.path().join("control-plane.json"), settings, now)?,
            LogStore::in_memory(control_plane::LOG_RING_CAPACITY),
            ADMIN_TOKEN.into(),
            Some(GATEWAY_TOKEN.into()),
            clock.clone(),
        );
        for r in default_routes(upstream.addr(), tcp_echo.addr()) {
            state.upsert_route(r, "harness").await?;
        }
        let fault_stats = Arc::new(FaultStats::default());
        let mut cp_router = control_plane::router(state.clone(), &[]);
        if let Some((rate, seed)) = options.flaky_control_plane {
            cp_router = flaky(cp_router, rate, seed, fault_stats.clone());
        }
        let cp_server = HttpServer::bind(loopback(), cp_router.clone()).await?;
        let cp_addr = cp_server.addr();
        let admin = ControlPlaneClient::new(&cp_server.url(), Some(ADMIN_TOKEN.into()))?.with_actor("harness");

        let secret = hex::encode(rand::random::<[u8; 16]>());
        let idp_core = Arc::new(IdpCore::new(
            UserDirectory::default_fixture(),
            [(IDP_CLIENT_ID.to_string(), secret.clone())],
            clock.clone(),
        ));
        let idp_server = HttpServer::bind(loopback(), idp::router(idp_core.clone())).await?;
        let idp_config = IdpConfig {
            authorize_url: format!("{}/authorize", idp_server.url()),
            token_url: format!("{}/token", idp_server.url()),
            client_id: IDP_CLIENT_ID.into(),
            client_secret: secret,
        };

        let parts = GatewayParts {
            listen: loopback(),
            gateway_id: "gw-harness".into(),
            trust_root: ca.root_der().clone(),
            server_chain: load_certs_pem(&server.cert_pem)?,
            server_key: load_key_pem(&server.key_pem)?,
            signing_keys: SigningKeys::new(SigningKeyPair::generate(now)),
            idp: Arc::new(HttpIdpClient::new(idp_config.clone())),
            idp_config,
            geo: harness_geo(),
            sessions: Arc::new(SessionStore::new()),
            control_plane: ControlPlaneClient::new(&format!("http://{cp_addr}"), Some(GATEWAY_TOKEN.into()))?,
            clock: clock.clone(),
            poll_interval: options.poll_interval,
            header_limit_bytes: options.header_limit_bytes,
            token_ttl_s: crate::token::DEFAULT_TOKEN_TTL_SECS,
            session_ttl: chrono::Duration::seconds(crate::authn::DEFAULT_SESSION_TTL_SECS),
            upstream_connect_timeout: Duration::from_secs(5),
            log_path: dir.path().join(crate::observe::DEFAULT_LOG_FILE),
            dead_letter_path: dir.path().join("access.deadletter.jsonl"),
        };
        let gateway = Gateway::start(parts).await?;

        Ok(Self {
            dir,
            clock: offset,
            ca: Mutex::new(ca),
            devices,
            control_plane: state,
            admin,
            idp: idp_core,
            gateway,
            tcp_echo,
            fault_stats,
            cp_router,
            cp_addr,
            cp_server: tokio::sync::Mutex::new(Some(cp_server)),
            idp_server,
            upstream,
            options,
        })
    }

    pub fn options(&self) -> &EnvOptions {
        &self.options
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    /// Jumps the clock, then polls once so policy freshness reflects a
    /// poller that kept running through the jump. With the control plane
    /// down the poll fails and the snapshot goes stale, as it would.
    pub async fn advance(&self, by: chrono::Duration) {
        self.clock.advance(by);
        self.gateway.poll_now().await;
    }

    pub fn device(&self, name: &str) -> &IssuedDevice {
        self.devices.get(name).unwrap_or_else(|| panic!("unknown device {name}"))
    }

    pub fn fingerprint(&self, device: &str) -> String {
        self.device(device).certificate.fingerprint.clone()
    }

    /// A client presenting `device`'s certificate from 127.0.0.1.
    pub fn client(&self, device: &str) -> DeviceClient {
        self.client_from(device, IpAddr::V4(Ipv4Addr::LOCALHOST))
    }

    pub fn client_from(&self, device: &str, ip: IpAddr) -> DeviceClient {
        DeviceClient::for_device(self.gateway.addr(), self.ca.lock().unwrap().root_der(), self.device(device)).bind_to(ip)
    }

    /// A client that presents no certificate at all.
    pub fn anonymous_client(&self) -> DeviceClient {
        DeviceClient::new(self.gateway.addr(), self.ca.lock().unwrap().root_der(), None)
    }

    /// Issues a device certificate whose validity ended before now.
    pub fn expired_device(&self, name: &str) -> anyhow::Result<IssuedDevice> {
        let issued_at = self.now() - chrono::Duration::days(10);
        Ok(self.ca.lock().unwrap().issue_device_cert(name, true, 1, issued_at)?)
    }

    pub fn client_with(&self, device: &IssuedDevice) -> DeviceClient {
        DeviceClient::for_device(self.gateway.addr(), self.ca.lock().unwrap().root_der(), device)
    }

    pub fn idp_url(&self) -> String {
        self.idp_server.url()
    }

    pub fn upstream_addr(&self) -> SocketAddr {
        self.upstream.addr()
    }

    pub fn control_plane_url(&self) -> String {
        format!("http://{}", self.cp_addr)
    }

    pub fn log_path(&self) -> PathBuf {
        self.gateway.logger().path().to_path_buf()
    }

    pub fn local_log(&self) -> Vec<AccessLogRecord> {
        read_journal(&self.log_path()).unwrap_or_default()
    }

    pub fn verify_identity(&self, token: &str, audience: &str) -> Result<IdentityClaims, VerifyError> {
        let keys: PublishedKeys = self.gateway.published_keys();
        crate::token::verify(token, &keys, audience, self.now())
    }

    pub async fn stop_control_plane(&self) {
        if let Some(s) = self.cp_server.lock().await.take() {
            s.stop().await;
        }
    }

    /// Restarts the control plane on its original address with the same state.
    pub async fn start_control_plane(&self) -> anyhow::Result<()> {
        let mut slot = self.cp_server.lock().await;
        if slot.is_none() {
            let mut last = None;
            for _ in 0..50 {
                match HttpServer::bind(self.cp_addr, self.cp_router.clone()).await {
                    Ok(s) => {
                        *slot = Some(s);
                        return Ok(());
                    }
                    Err(e) => {
                        last = Some(e);
                        tokio::time::sleep(Duration::from_millis(100)).await;
                    }
                }
            }
            return Err(last.expect("at least one attempt").into());
        }
        Ok(())
    }

    pub async fn shutdown(self) {
        self.gateway.shutdown().await;
        if let Some(s) = self.cp_server.lock().await.take() {
            s.stop().await;
        }
        self.idp_server.stop().await;
        self.upstream.stop().await;
        self.tcp_echo.stop();
    }
}

/// Polls `check` every 20 ms until it holds or `within` elapses. Returns the
/// elapsed time on success.
pub async fn wait_until<F, Fut>(within: Duration, mut check: F) -> Option<Duration>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = bool>,
{
    let start = tokio::time::Instant::now();
    loop {
        if check().await {
            return Some(start.elapsed());
        }
        if start.elapsed() >= within {
            return None;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}
