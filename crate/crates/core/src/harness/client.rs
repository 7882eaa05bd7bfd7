//! Programmatic device client: mTLS to the gateway from a chosen loopback
//! address, a cookie jar, the SSO login dance and CONNECT tunnels.

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex};

use bytes::Bytes;
use http::header::{self, HeaderMap, HeaderName, HeaderValue};
use http::{Method, Request, StatusCode};
use http_body_util::{BodyExt, Full};
use hyper::upgrade::Upgraded;
use hyper_util::rt::TokioIo;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, ServerName};
use tokio::net::{TcpSocket, TcpStream};
use tokio_rustls::client::TlsStream;
use tokio_rustls::TlsConnector;

use crate::authn::SESSION_COOKIE;
use crate::pki::IssuedDevice;
use crate::tls_gate::{client_config, load_key_pem};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("tcp connect failed: {0}")]
    Connect(std::io::Error),
    #[error("tls failed: {0}")]
    Tls(std::io::Error),
    #[error("http exchange failed: {0}")]
    Http(#[from] hyper::Error),
    #[error("identity provider: {0}")]
    Idp(String),
    #[error("unexpected response: {0}")]
    Unexpected(String),
}

#[derive(Debug, Clone)]
pub struct HttpResult {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Bytes,
}

impl HttpResult {
    pub fn location(&self) -> Option<&str> {
        self.headers.get(header::LOCATION).and_then(|v| v.to_str().ok())
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self) -> Result<T, ClientError> {
        serde_json::from_slice(&self.body).map_err(|e| ClientError::Unexpected(format!("body is not the expected json: {e}")))
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }

    /// The `reason` field of a gateway refusal body.
    pub fn reason(&self) -> Option<String> {
        let v: serde_json::Value = serde_json::from_slice(&self.body).ok()?;
        v.get("reason")?.as_str().map(str::to_string)
    }
}

pub enum ConnectResult {
    Established(TokioIo<Upgraded>),
    Refused(HttpResult),
}

impl std::fmt::Debug for ConnectResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Established(_) => f.write_str("Established"),
            Self::Refused(r) => write!(f, "Refused({})", r.status),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoginOutcome {
    pub sso_redirect: HttpResult,
    pub callback: HttpResult,
    pub landing: HttpResult,
}

/// One simulated device. The cookie jar is shared across hosts, like a
/// browser profile that holds the gateway session for every app.
pub struct DeviceClient {
    gateway: SocketAddr,
    connector: TlsConnector,
    local_ip: Option<IpAddr>,
    jar: Mutex<BTreeMap<String, String>>,
    idp_http: reqwest::Client,
}

impl std::fmt::Debug for DeviceClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceClient")
            .field("gateway", &self.gateway)
            .field("local_ip", &self.local_ip)
            .finish_non_exhaustive()
    }
}

impl DeviceClient {
    pub fn new(
        gateway: SocketAddr,
        trust_root: &CertificateDer<'static>,
        identity: Option<(Vec<CertificateDer<'static>>, PrivateKeyDer<'static>)>,
    ) -> Self {
        let config = client_config(trust_root, identity).expect("client tls config");
        Self {
            gateway,
            connector: TlsConnector::from(Arc::new(config)),
            local_ip: None,
            jar: Mutex::new(BTreeMap::new()),
            idp_http: reqwest::Client::builder()
                .redirect(reqwest::redirect::Policy::none())
                .build()
                .expect("http client builds"),
        }
    }

    pub fn for_device(gateway: SocketAddr, trust_root: &CertificateDer<'static>, device: &IssuedDevice) -> Self {
        let key = load_key_pem(&device.material.key_pem).expect("device key");
        Self::new(gateway, trust_root, Some((vec![device.material.der.clone()], key)))
    }

    /// Source address for every connection, e.g. 127.0.0.2.
    pub fn bind_to(mut self, ip: IpAddr) -> Self {
        self.local_ip = Some(ip);
        self
    }

    pub fn set_cookie(&self, name: &str, value: &str) {
        self.jar.lock().unwrap().insert(name.to_string(), value.to_string());
    }

    pub fn cookie(&self, name: &str) -> Option<String> {
        self.jar.lock().unwrap().get(name).cloned()
    }

    pub fn session_id(&self) -> Option<String> {
        self.cookie(SESSION_COOKIE)
    }

    pub fn cookie_header(&self) -> Option<String> {
        let jar = self.jar.lock().unwrap();
        (!jar.is_empty()).then(|| jar.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("; "))
    }

    fn absorb_cookies(&self, headers: &HeaderMap) {
        for v in headers.get_all(header::SET_COOKIE) {
            let Ok(s) = v.to_str() else { continue };
            let Some((k, v)) = s.split(';').next().and_then(|kv| kv.split_once('=')) else {
                continue;
            };
            self.set_cookie(k.trim(), v.trim());
        }
    }

    async fn tls(&self, sni: &str) -> Result<TlsStream<TcpStream>, ClientError> {
        let socket = match self.gateway {
            SocketAddr::V4(_) => TcpSocket::new_v4(),
            SocketAddr::V6(_) => TcpSocket::new_v6(),
        }
        .map_err(ClientError::Connect)?;
        if let Some(ip) = self.local_ip {
            socket.bind(SocketAddr::new(ip, 0)).map_err(ClientError::Connect)?;
        }
        let tcp = socket.connect(self.gateway).await.map_err(ClientError::Connect)?;
        let _ = tcp.set_nodelay(true);
        let name = ServerName::try_from(sni.to_string()).map_err(|e| ClientError::Unexpected(e.to_string()))?;
        self.connector.connect(name, tcp).await.map_err(ClientError::Tls)
    }

    /// Sends one request on a fresh connection.
    pub async fn send(&self, host: &str, req: Request<Full<Bytes>>) -> Result<HttpResult, ClientError> {
        let tls = self.tls(host).await?;
        let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(tls)).await?;
        tokio::spawn(async move {
            let _ = conn.await;
        });
        let resp = sender.send_request(req).await?;
        let (parts, body) = resp.into_parts();
        let body = body.collect().await?.to_bytes();
        self.absorb_cookies(&parts.headers);
        Ok(HttpResult {
            status: parts.status,
            headers: parts.headers,
            body,
        })
    }

    fn request(&self, method: Method, host: &str, path_and_query: &str, extra: &[(&str, &str)]) -> Request<Full<Bytes>> {
        let mut b = Request::builder()
            .method(method)
            .uri(path_and_query)
            .header(header::HOST, host)
            .header(header::USER_AGENT, "zta-harness/1")
            .header(header::ACCEPT, "*/*");
        if let Some(c) = self.cookie_header() {
            b = b.header(header::COOKIE, c);
        }
        let mut req = b.body(Full::new(Bytes::new())).expect("valid request");
        for (k, v) in extra {
            req.headers_mut().append(
                HeaderName::from_bytes(k.as_bytes()).expect("header name"),
                HeaderValue::from_str(v).expect("header value"),
            );
        }
        req
    }

    pub async fn get(&self, host: &str, path: &str) -> Result<HttpResult, ClientError> {
        self.send(host, self.request(Method::GET, host, path, &[])).await
    }

    pub async fn get_with(&self, host: &str, path: &str, extra: &[(&str, &str)]) -> Result<HttpResult, ClientError> {
        self.send(host, self.request(Method::GET, host, path, extra)).await
    }

    /// Bytes of the header block this client would send for `GET host path`.
    pub fn outbound_header_bytes(&self, host: &str, path: &str, extra: &[(&str, &str)]) -> usize {
        crate::gateway::header_block_size(self.request(Method::GET, host, path, extra).headers())
    }

    /// Runs the whole SSO flow for `host`: gateway redirect, IdP form post,
    /// callback, then the original URL.
    pub async fn login(&self, host: &str, path: &str, user: &str, password: &str) -> Result<LoginOutcome, ClientError> {
        let sso_redirect = self.get(host, path).await?;
        if sso_redirect.status != StatusCode::FOUND {
            return Err(ClientError::Unexpected(format!("expected 302 from gateway, got {}", sso_redirect.status)));
        }
        let authorize = sso_redirect
            .location()
            .ok_or_else(|| ClientError::Unexpected("redirect without location".into()))?
            .to_string();
        let callback_url = self.idp_login(&authorize, user, password).await?;
        let cb = url::Url::parse(&callback_url).map_err(|e| ClientError::Unexpected(e.to_string()))?;
        let cb_path = match cb.query() {
            Some(q) => format!("{}?{q}", cb.path()),
            None => cb.path().to_string(),
        };
        let callback = self.get(host, &cb_path).await?;
        if callback.status != StatusCode::FOUND {
            return Err(ClientError::Unexpected(format!(
                "callback returned {}: {}",
                callback.status,
                callback.text()
            )));
        }
        let original = callback
            .location()
            .and_then(|l| url::Url::parse(l).ok())
            .ok_or_else(|| ClientError::Unexpected("callback without location".into()))?;
        let original_path = match original.query() {
            Some(q) => format!("{}?{q}", original.path()),
            None => original.path().to_string(),
        };
        let landing = self.get(host, &original_path).await?;
        Ok(LoginOutcome {
            sso_redirect,
            callback,
            landing,
        })
    }

    /// Drives the IdP authorize endpoint and login form; returns the
    /// callback URL carrying the code.
    pub async fn idp_login(&self, authorize_url: &str, user: &str, password: &str) -> Result<String, ClientError> {
        let idp_err = |e: reqwest::Error| ClientError::Idp(e.to_string());
        let authorize = url::Url::parse(authorize_url).map_err(|e| ClientError::Idp(e.to_string()))?;
        let resp = self.idp_http.get(authorize.clone()).send().await.map_err(idp_err)?;
        if resp.status() != reqwest::StatusCode::FOUND {
            return Err(ClientError::Idp(format!("authorize returned {}", resp.status())));
        }
        let form_url = resp
            .headers()
            .get(reqwest::header::LOCATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|l| authorize.join(l).ok())
            .ok_or_else(|| ClientError::Idp("authorize without location".into()))?;
        let q: BTreeMap<String, String> = form_url.query_pairs().into_owned().collect();
        let field = |k: &str| q.get(k).cloned().unwrap_or_default();
        let post_url = form_url.join("/login").map_err(|e| ClientError::Idp(e.to_string()))?;
        let resp = self
            .idp_http
            .post(post_url)
            .form(&[
                ("user", user.to_string()),
                ("password", password.to_string()),
                ("client_id", field("client_id")),
                ("redirect_uri", field("redirect_uri")),
                ("state", field("state")),
            ])
            .send()
            .await
            .map_err(idp_err)?;
        match resp.status() {
            reqwest::StatusCode::FOUND => resp
                .headers()
                .get(reqwest::header::LOCATION)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
                .ok_or_else(|| ClientError::Idp("login without location".into())),
            reqwest::StatusCode::OK => Err(ClientError::Idp("invalid username or password".into())),
            other => Err(ClientError::Idp(format!("login returned {other}"))),
        }
    }

    /// Opens `CONNECT host:port` with `Proxy-Authorization: ZTA <session>`.
    pub async fn connect(&self, host: &str, port: u16, session: Option<&str>) -> Result<ConnectResult, ClientError> {
        let tls = self.tls(host).await?;
        let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(tls)).await?;
        tokio::spawn(async move {
            let _ = conn.with_upgrades().await;
        });
        let authority = format!("{host}:{port}");
        let mut b = Request::builder()
            .method(Method::CONNECT)
            .uri(authority.as_str())
            .header(header::HOST, authority.as_str());
        if let Some(s) = session {
            b = b.header(header::PROXY_AUTHORIZATION, format!("ZTA {s}"));
        }
        let resp = sender
            .send_request(b.body(Full::new(Bytes::new())).expect("valid request"))
            .await?;
        if resp.status() == StatusCode::OK {
            let upgraded = hyper::upgrade::on(resp).await?;
            return Ok(ConnectResult::Established(TokioIo::new(upgraded)));
        }
        let (parts, body) = resp.into_parts();
        let body = body.collect().await?.to_bytes();
        Ok(ConnectResult::Refused(HttpResult {
            status: parts.status,
            headers: parts.headers,
            body,
        }))
    }
}
