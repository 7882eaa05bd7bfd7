use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use zta::authn::{CliToken, DEFAULT_SESSION_TTL_SECS};
use zta::config::{load_json, ControlPlaneConfig, GatewayConfig};
use zta::control_plane::client::ControlPlaneClient;
use zta::control_plane::{router, ControlPlaneState, HttpServer};
use zta::gateway::Gateway;
use zta::harness::idp::{self, IdpCore, UserDirectory};
use zta::harness::upstream::{echo_router, TcpEcho};
use zta::harness::{scenario, ConnectResult, DeviceClient, Scenario};
use zta::observe::{tail, LogOutcome};
use zta::pki::CertificateAuthority;
use zta::policy::RoutePolicy;
use zta::tls_gate::{load_certs_pem, load_key_pem};
use zta::token::SigningKeyPair;
use zta::{Clock, SharedClock, SystemClock};

#[derive(Parser)]
#[command(name = "zta", version, about = "Zero Trust access gateway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Device certificate authority.
    Ca {
        #[command(subcommand)]
        command: CaCommand,
    },
    /// Issue or revoke certificates.
    Cert {
        #[command(subcommand)]
        command: CertCommand,
    },
    /// Generate an Ed25519 identity-token signing key.
    Keygen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one of the services in the foreground.
    Serve {
        #[command(subcommand)]
        service: Service,
    },
    /// Push routes from a JSON file to the control plane.
    Policy {
        #[command(subcommand)]
        command: PolicyCommand,
    },
    /// Flip the global kill switch.
    Killswitch {
        state: Switch,
        #[command(flatten)]
        admin: AdminArgs,
    },
    /// Log in through the gateway and cache a session reference for `zta tunnel`.
    Login {
        #[command(flatten)]
        device: DeviceArgs,
        #[arg(long)]
        user: String,
        #[arg(long)]
        password: String,
        /// Any route host; the session is valid for every route.
        #[arg(long)]
        host: String,
        #[arg(long, default_value_os_t = CliToken::default_path())]
        token_file: PathBuf,
    },
    /// Open a CONNECT tunnel and relay stdin/stdout, for use as an SSH ProxyCommand.
    Tunnel {
        #[command(flatten)]
        device: DeviceArgs,
        host: String,
        port: u16,
        #[arg(long, default_value_os_t = CliToken::default_path())]
        token_file: PathBuf,
    },
    /// Read the local access log.
    Logs {
        #[command(subcommand)]
        command: LogsCommand,
    },
    /// Run a scenario file, or a built-in scenario by name.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
}

#[derive(Subcommand)]
enum CaCommand {
    Init {
        #[arg(long, default_value = "ca")]
        dir: PathBuf,
        #[arg(long, default_value_t = 3650)]
        days: u32,
    },
}

#[derive(Subcommand)]
enum CertCommand {
    /// Issue a device (clientAuth) certificate.
    Issue {
        #[arg(long, default_value = "ca")]
        ca_dir: PathBuf,
        #[arg(long)]
        device_id: String,
        #[arg(long, default_value_t = 90)]
        days: u32,
        #[arg(long)]
        unmanaged: bool,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Issue a gateway (serverAuth) certificate.
    Server {
        #[arg(long, default_value = "ca")]
        ca_dir: PathBuf,
        #[arg(long = "dns", required = true)]
        dns_names: Vec<String>,
        #[arg(long, default_value_t = 365)]
        days: u32,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Add a fingerprint to the control plane's revocation list.
    Revoke {
        #[arg(long)]
        fingerprint: String,
        #[arg(long, default_value = "")]
        reason: String,
        #[command(flatten)]
        admin: AdminArgs,
    },
}

#[derive(Subcommand)]
enum Service {
    Gateway {
        #[arg(long)]
        config: PathBuf,
    },
    ControlPlane {
        #[arg(long)]
        config: PathBuf,
    },
    /// Mock identity provider with the fixture users.
    Idp {
        #[arg(long, default_value = "127.0.0.1:9000")]
        listen: SocketAddr,
        /// Registered relying parties as `id:secret`.
        #[arg(long = "client", required = true)]
        clients: Vec<String>,
    },
    /// HTTP echo and TCP echo upstreams.
    Upstream {
        #[arg(long, default_value = "127.0.0.1:8080")]
        http: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:2222")]
        tcp: SocketAddr,
    },
}

#[derive(Subcommand)]
enum PolicyCommand {
    Apply {
        file: PathBuf,
        #[command(flatten)]
        admin: AdminArgs,
    },
}

#[derive(Subcommand)]
enum LogsCommand {
    Tail {
        #[arg(long, default_value = zta::observe::DEFAULT_LOG_FILE)]
        file: PathBuf,
        #[arg(long)]
        outcome: Option<LogOutcome>,
        /// Keep reading appended records.
        #[arg(long, short)]
        follow: bool,
    },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    Run { scenario: String },
    List,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct AdminArgs {
    #[arg(long, env = "ZTA_CONTROL_PLANE", default_value = "http://127.0.0.1:7000")]
    control_plane: String,
    #[arg(long, env = "ZTA_ADMIN_TOKEN")]
    token: String,
}

impl AdminArgs {
    fn client(&self) -> Result<ControlPlaneClient> {
        let actor = std::env::var("USER").unwrap_or_else(|_| "cli".into());
        Ok(ControlPlaneClient::new(&self.control_plane, Some(self.token.clone()))?.with_actor(&actor))
    }
}

#[derive(Args)]
struct DeviceArgs {
    #[arg(long, env = "ZTA_GATEWAY", default_value = "127.0.0.1:8443")]
    gateway: SocketAddr,
    #[arg(long, env = "ZTA_CA_CERT")]
    ca_cert: PathBuf,
    #[arg(long, env = "ZTA_DEVICE_CERT")]
    cert: PathBuf,
    #[arg(long, env = "ZTA_DEVICE_KEY")]
    key: PathBuf,
}

impl DeviceArgs {
    fn client(&self) -> Result<DeviceClient> {
        let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
        let root = load_certs_pem(&read(&self.ca_cert)?)?.remove(0);
        let chain = load_certs_pem(&read(&self.cert)?)?;
        let key = load_key_pem(&read(&self.key)?)?;
        Ok(DeviceClient::new(self.gateway, &root, Some((chain, key))))
    }
}

/// `policy apply` input: routes to upsert, optionally the kill switch.
#[derive(Deserialize)]
struct PolicyFile {
    routes: Vec<RoutePolicy>,
    #[serde(default)]
    kill_switch: Option<bool>,
}

fn clock() -> SharedClock {
    Arc::new(SystemClock)
}

async fn until_ctrl_c() {
    let _ = tokio::signal::ctrl_c().await;
}

async fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ca {
            command: CaCommand::Init { dir, days },
        } => {
            let ca = CertificateAuthority::init(days, SystemClock.now())?;
            std::fs::create_dir_all(&dir)?;
            ca.save(&dir)?;
            println!("CA written to {}", dir.display());
        }
        Command::Cert { command } => match command {
            CertCommand::Issue {
                ca_dir,
                device_id,
                days,
                unmanaged,
                out_dir,
            } => {
                let mut ca = CertificateAuthority::load(&ca_dir)?;
                let dev = ca.issue_device_cert(&device_id, !unmanaged, days, SystemClock.now())?;
                ca.save(&ca_dir)?;
                std::fs::create_dir_all(&out_dir)?;
                let (cert, key) = dev.write_to(&out_dir)?;
                println!("{}", dev.certificate.fingerprint);
                eprintln!("wrote {} and {}", cert.display(), key.display());
            }
            CertCommand::Server {
                ca_dir,
                dns_names,
                days,
                out_dir,
            } => {
                let mut ca = CertificateAuthority::load(&ca_dir)?;
                let names: Vec<&str> = dns_names.iter().map(String::as_str).collect();
                let issued = ca.issue_server_cert(&names, days, SystemClock.now())?;
                ca.save(&ca_dir)?;
                std::fs::create_dir_all(&out_dir)?;
                let (cert, key) = issued.write_to(&out_dir, "server")?;
                println!("wrote {} and {}", cert.display(), key.display());
            }
            CertCommand::Revoke {
                fingerprint,
                reason,
                admin,
            } => {
                zta::pki::validate_fingerprint(&fingerprint)?;
                let ack = admin.client()?.add_revocation(&fingerprint, &reason).await?;
                println!("revoked; policy version {}", ack.version);
            }
        },
        Command::Keygen { out } => {
            SigningKeyPair::generate(SystemClock.now()).save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Serve { service } => serve(service).await?,
        Command::Policy {
            command: PolicyCommand::Apply { file, admin },
        } => {
            let doc: PolicyFile = load_json(&file)?;
            let errors: Vec<String> = doc
                .routes
                .iter()
                .flat_map(|r| r.validate().into_iter().map(move |e| format!("{}: {}: {}", r.host, e.field, e.message)))
                .collect();
            if !errors.is_empty() {
                bail!("invalid policy file:\n  {}", errors.join("\n  "));
            }
            let client = admin.client()?;
            let mut version = None;
            for route in &doc.routes {
                version = Some(client.upsert_route(route).await?.version);
            }
            if let Some(enabled) = doc.kill_switch {
                version = Some(client.set_kill_switch(enabled).await?.version);
            }
            match version {
                Some(v) => println!("applied {} route(s); policy version {v}", doc.routes.len()),
                None => println!("nothing to apply"),
            }
        }
        Command::Killswitch { state, admin } => {
            let enabled = matches!(state, Switch::On);
            let ack = admin.client()?.set_kill_switch(enabled).await?;
            println!("kill switch {}; policy version {}", if enabled { "on" } else { "off" }, ack.version);
        }
        Command::Login {
            device,
            user,
            password,
            host,
            token_file,
        } => {
            let client = device.client()?;
            let outcome = match client.login(&host, "/", &user, &password).await {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("login failed: {e}");
                    return Ok(ExitCode::FAILURE);
                }
            };
            let Some(session) = client.session_id() else {
                eprintln!("login failed: gateway returned {} without a session", outcome.callback.status);
                return Ok(ExitCode::FAILURE);
            };
            let token = CliToken {
                session,
                user,
                gateway: device.gateway.to_string(),
                expires_at: SystemClock.now() + chrono::Duration::seconds(DEFAULT_SESSION_TTL_SECS),
            };
            if let Some(dir) = token_file.parent() {
                std::fs::create_dir_all(dir)?;
            }
            token.save(&token_file)?;
            eprintln!("session cached in {}", token_file.display());
        }
        Command::Tunnel {
            device,
            host,
            port,
            token_file,
        } => {
            let token = CliToken::load(&token_file)
                .with_context(|| format!("no cached session in {}; run `zta login` first", token_file.display()))?;
            let client = device.client()?;
            match client.connect(&host, port, Some(&token.session)).await? {
                ConnectResult::Established(mut io) => {
                    let mut stdio = tokio::io::join(tokio::io::stdin(), tokio::io::stdout());
                    let _ = tokio::io::copy_bidirectional(&mut io, &mut stdio).await;
                }
                ConnectResult::Refused(r) => {
                    let reason = r.reason().unwrap_or_else(|| r.status.to_string());
                    eprintln!("tunnel refused: {reason}");
                    if reason == "no_session" {
                        eprintln!("the cached session is missing or expired; run `zta login` again");
                    }
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
        Command::Logs {
            command: LogsCommand::Tail { file, outcome, follow },
        } => {
            let out = std::io::stdout();
            tokio::select! {
                r = tail(&file, outcome, follow, out.lock()) => r.with_context(|| format!("reading {}", file.display()))?,
                _ = until_ctrl_c() => {}
            }
        }
        Command::Scenario { command } => match command {
            ScenarioCommand::List => {
                for name in scenario::builtin_names() {
                    println!("{name}");
                }
            }
            ScenarioCommand::Run { scenario: which } => {
                let s = match scenario::builtin(&which) {
                    Some(s) => s,
                    None => Scenario::from_json(
                        &std::fs::read_to_string(&which).with_context(|| format!("reading {which}"))?,
                    )?,
                };
                let report = scenario::run_isolated(&s).await?;
                println!("{report}");
                if !report.passed() {
                    return Ok(ExitCode::FAILURE);
                }
            }
        },
    }
    Ok(ExitCode::SUCCESS)
}

async fn serve(service: Service) -> Result<()> {
    match service {
        Service::Gateway { config } => {
            let cfg = GatewayConfig::load(&config)?;
            let gw = Gateway::from_config(&cfg, clock()).await?;
            tracing::info!(addr = %gw.addr(), id = gw.gateway_id(), "gateway listening");
            until_ctrl_c().await;
            gw.shutdown().await;
        }
        Service::ControlPlane { config } => {
            let cfg: ControlPlaneConfig = load_json(&config)?;
            let state = ControlPlaneState::open(&cfg, clock())?;
            let server = HttpServer::bind(cfg.listen, router(state, &cfg.cors_origins)).await?;
            tracing::info!(addr = %server.addr(), "control plane listening");
            until_ctrl_c().await;
            server.stop().await;
        }
        Service::Idp { listen, clients } => {
            let mut registered = BTreeMap::new();
            for c in clients {
                let (id, secret) = c.split_once(':').context("--client must be id:secret")?;
                registered.insert(id.to_string(), secret.to_string());
            }
            let core = Arc::new(IdpCore::new(UserDirectory::default_fixture(), registered, clock()));
            let server = HttpServer::bind(listen, idp::router(core)).await?;
            tracing::info!(addr = %server.addr(), "idp listening");
            until_ctrl_c().await;
            server.stop().await;
        }
        Service::Upstream { http, tcp } => {
            let server = HttpServer::bind(http, echo_router()).await?;
            let echo = TcpEcho::bind(tcp).await?;
            tracing::info!(http = %server.addr(), tcp = %echo.addr(), "echo upstreams listening");
            until_ctrl_c().await;
            echo.stop();
            server.stop().await;
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
