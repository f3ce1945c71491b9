//! Cookies per RFC 6265: `Set-Cookie` parsing, domain and path matching,
//! and a [`CookieJar`] that can hold third-party cookies in quarantine.

mod date;
mod jar;

use alloc::string::{String, ToString};
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::party::{canonical_host, is_ip_literal};
use crate::url::Url;

pub use date::parse_cookie_date;
pub use jar::{CookieJar, JarSnapshot, Placement, QuarantineEntry, QuarantineKey, StoreError};

/// Seconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnixTime(pub i64);

impl UnixTime {
    pub fn saturating_add_secs(self, secs: i64) -> Self {
        Self(self.0.saturating_add(secs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SameSite {
    Strict,
    Lax,
    None,
}

/// A stored cookie. `domain` is the canonical host the cookie is scoped to;
/// with `host_only` it matches that host exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cookie {
    pub name: String,
    pub value: String,
    pub domain: String,
    pub host_only: bool,
    pub path: String,
    /// `None` for session cookies.
    pub expires: Option<UnixTime>,
    pub secure: bool,
    #[serde(default)]
    pub http_only: bool,
    #[serde(default)]
    pub same_site: Option<SameSite>,
    pub created_at: UnixTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CookieParseError {
    /// No `=` in the name-value pair.
    MissingEquals,
    EmptyName,
}

impl fmt::Display for CookieParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MissingEquals => f.write_str("set-cookie has no name=value pair"),
            Self::EmptyName => f.write_str("set-cookie has an empty name"),
        }
    }
}

impl core::error::Error for CookieParseError {}

impl Cookie {
    /// Parses a `Set-Cookie` header value received in the response to
    /// `request_url` at time `now`.
    ///
    /// Domain validity against the response host is checked later, when the
    /// cookie is stored.
    pub fn parse(header: &str, request_url: &Url, now: UnixTime) -> Result<Self, CookieParseError> {
        let mut parts = header.split(';');
        let pair = parts.next().unwrap_or("");
        let (name, value) = pair.split_once('=').ok_or(CookieParseError::MissingEquals)?;
        let name = name.trim();
        if name.is_empty() {
            return Err(CookieParseError::EmptyName);
        }
        let value = value.trim();

        let mut expires = None;
        let mut max_age: Option<UnixTime> = None;
        let mut domain_attr: Option<String> = None;
        let mut path_attr: Option<String> = None;
        let mut secure = false;
        let mut http_only = false;
        let mut same_site = None;

        for attr in parts {
            let (key, val) = match attr.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => (attr.trim(), ""),
            };
            if key.eq_ignore_ascii_case("expires") {
                if let Some(t) = parse_cookie_date(val) {
                    expires = Some(t);
                }
            } else if key.eq_ignore_ascii_case("max-age") {
                if let Some(delta) = parse_max_age(val) {
                    max_age = Some(if delta <= 0 { UnixTime(i64::MIN) } else { now.saturating_add_secs(delta) });
                }
            } else if key.eq_ignore_ascii_case("domain") {
                if !val.is_empty() {
                    let d = val.strip_prefix('.').unwrap_or(val);
                    domain_attr = Some(canonical_host(d));
                }
            } else if key.eq_ignore_ascii_case("path") {
                path_attr = val.starts_with('/').then(|| val.to_string());
            } else if key.eq_ignore_ascii_case("secure") {
                secure = true;
            } else if key.eq_ignore_ascii_case("httponly") {
                http_only = true;
            } else if key.eq_ignore_ascii_case("samesite") {
                same_site = if val.eq_ignore_ascii_case("strict") {
                    Some(SameSite::Strict)
                } else if val.eq_ignore_ascii_case("lax") {
                    Some(SameSite::Lax)
                } else if val.eq_ignore_ascii_case("none") {
                    Some(SameSite::None)
                } else {
                    same_site
                };
            }
        }

        let (domain, host_only) = match domain_attr {
            Some(d) => (d, false),
            None => (request_url.host().to_string(), true),
        };
        let path = path_attr.unwrap_or_else(|| default_path(request_url.path()));
        Ok(Self {
            name: name.to_string(),
            value: value.to_string(),
            domain,
            host_only,
            path,
            expires: max_age.or(expires),
            secure,
            http_only,
            same_site,
            created_at: now,
        })
    }

    pub fn is_expired(&self, now: UnixTime) -> bool {
        self.expires.is_some_and(|t| t < now)
    }

    /// Whether this cookie would be sent on a request to `url`, ignoring expiry.
    pub fn matches(&self, url: &Url) -> bool {
        let domain_ok = if self.host_only { url.host() == self.domain } else { domain_match(url.host(), &self.domain) };
        domain_ok && path_match(url.path(), &self.path) && (!self.secure || url.is_secure())
    }
}

fn parse_max_age(val: &str) -> Option<i64> {
    let digits = val.strip_prefix('-').unwrap_or(val);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    // Out-of-range values saturate.
    Some(val.parse::<i64>().unwrap_or(if val.starts_with('-') { i64::MIN } else { i64::MAX }))
}

/// Default cookie path for a request path.
pub fn default_path(request_path: &str) -> String {
    if !request_path.starts_with('/') {
        return "/".to_string();
    }
    match request_path.rfind('/') {
        Some(0) | None => "/".to_string(),
        Some(i) => request_path[..i].to_string(),
    }
}

/// RFC 6265 domain-match of a canonical `host` against a cookie `domain`.
pub fn domain_match(host: &str, domain: &str) -> bool {
    if host == domain {
        return true;
    }
    host.len() > domain.len()
        && host.ends_with(domain)
        && host.as_bytes()[host.len() - domain.len() - 1] == b'.'
        && !is_ip_literal(host)
}

/// RFC 6265 path-match.
pub fn path_match(request_path: &str, cookie_path: &str) -> bool {
    if request_path == cookie_path {
        return true;
    }
    request_path.starts_with(cookie_path)
        && (cookie_path.ends_with('/') || request_path.as_bytes().get(cookie_path.len()) == Some(&b'/'))
}
