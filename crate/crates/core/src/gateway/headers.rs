use http::header::{self, HeaderMap, HeaderName, HeaderValue};

use crate::authn::SESSION_COOKIE;

/// Reserved prefix for headers only the gateway may set.
pub const RESERVED_PREFIX: &str = "x-zta-";
pub const AUTH_SCHEME: &str = "ZTA";

const HOP_BY_HOP: [&str; 8] = [
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "proxy-connection",
    "te",
    "trailer",
    "upgrade",
];

/// Bytes the header block occupies on the wire: `name: value\r\n` per field.
pub fn header_block_size(headers: &HeaderMap) -> usize {
    headers
        .iter()
        .map(|(k, v)| k.as_str().len() + v.as_bytes().len() + 4)
        .sum()
}

fn is_zta_authorization(value: &HeaderValue) -> bool {
    value
        .to_str()
        .ok()
        .and_then(|v| v.split_whitespace().next())
        .is_some_and(|scheme| scheme.eq_ignore_ascii_case(AUTH_SCHEME))
}

/// Cookie header with the session cookie removed, or `None` if nothing is left.
pub fn strip_session_cookie(value: &HeaderValue) -> Option<HeaderValue> {
    let Ok(s) = value.to_str() else {
        return Some(value.clone());
    };
    let kept: Vec<&str> = s
        .split(';')
        .map(str::trim)
        .filter(|pair| {
            !pair.is_empty() && pair.split_once('=').map_or(pair.trim(), |(k, _)| k.trim()) != SESSION_COOKIE
        })
        .collect();
    if kept.is_empty() {
        None
    } else {
        HeaderValue::from_str(&kept.join("; ")).ok()
    }
}

/// Removes the reserved identity surface and hop-by-hop fields: every
/// `X-ZTA-*` header, `Authorization: ZTA ...`, the session cookie, and the
/// fields named in `Connection`.
pub fn sanitize_inbound(headers: &HeaderMap) -> HeaderMap {
    let listed: Vec<HeaderName> = headers
        .get_all(header::CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .filter_map(|name| HeaderName::from_bytes(name.trim().as_bytes()).ok())
        .collect();
    let mut out = HeaderMap::with_capacity(headers.len());
    for (name, value) in headers {
        let n = name.as_str();
        if n.starts_with(RESERVED_PREFIX) || HOP_BY_HOP.contains(&n) || listed.contains(name) {
            continue;
        }
        if name == header::AUTHORIZATION && is_zta_authorization(value) {
            continue;
        }
        if name == header::COOKIE {
            if let Some(v) = strip_session_cookie(value) {
                out.append(name.clone(), v);
            }
            continue;
        }
        out.append(name.clone(), value.clone());
    }
    out
}

/// Response headers that must not be relayed as-is.
pub fn strip_response_hop_by_hop(headers: &mut HeaderMap) {
    for name in HOP_BY_HOP {
        headers.remove(name);
    }
    headers.remove(header::TRANSFER_ENCODING);
}

/// Value for `X-Forwarded-For` with `client` appended.
pub fn forwarded_for(existing: &HeaderMap, client: std::net::IpAddr) -> HeaderValue {
    let prior: Vec<&str> = existing
        .get_all("x-forwarded-for")
        .iter()
        .filter_map(|v| v.to_str().ok())
        .collect();
    let value = if prior.is_empty() {
        client.to_string()
    } else {
        format!("{}, {client}", prior.join(", "))
    };
    HeaderValue::from_str(&value).expect("ip list is a valid header")
}
