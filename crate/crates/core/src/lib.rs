//! Zero Trust access gateway.
//!
//! A reverse proxy that admits a request only after three independent checks
//! succeed: the device presents a client certificate issued by the fleet CA
//! (mutual TLS), the user holds a live SSO session bound to that device, and
//! the centrally distributed policy snapshot permits the pair on the requested
//! host. Allowed requests are forwarded with exactly one proxy-signed identity
//! token in `X-ZTA-Identity`; every decision is logged.
//!
//! The crate is organized by subsystem:
//!
//! - [`pki`]: device CA, certificate issuance, fingerprints, revocation lists
//! - [`tls_gate`]: mTLS termination and device certificate validation
//! - [`authn`]: OIDC-style relying party and the session store
//! - [`token`]: identity token minting, verification and key sets
//! - [`policy`]: policy snapshots, polling, staleness and the decision function
//! - [`gateway`]: the request pipeline, HTTP forwarding and CONNECT tunnels
//! - [`control_plane`]: policy authority and access-log sink
//! - [`observe`]: access-log records, the local journal and log shipping
//! - [`harness`]: mock IdP, echo upstreams, test clients and scenarios
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod authn;
pub mod clock;
pub mod config;
pub mod control_plane;
pub mod gateway;
pub mod harness;
pub mod observe;
pub mod pki;
pub mod policy;
pub mod tls_gate;
pub mod token;

mod util;

pub use clock::{Clock, ManualClock, OffsetClock, SharedClock, SystemClock};
