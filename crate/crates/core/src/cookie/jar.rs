use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use super::{domain_match, Cookie, UnixTime};
use crate::party::{is_public_suffix, registrable_domain, PartyClass, SitePair, SuffixRuleSet};
use crate::policy::{RequestContext, SetCookieAction};
use crate::url::Url;

/// Quarantine bucket key: the third party that set the cookies and the
/// top-level site it was embedded in when it did.
pub type QuarantineKey = SitePair;

/// (domain, path, name)
type CookieKey = (String, String, String);

fn key_of(c: &Cookie) -> CookieKey {
    (c.domain.clone(), c.path.clone(), c.name.clone())
}

/// Where a stored cookie ended up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Placement {
    Active,
    Quarantined(QuarantineKey),
    Dropped,
    /// The cookie arrived already expired; any same-key cookie it targeted
    /// was removed and nothing was stored.
    Evicted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreError {
    /// The cookie's domain does not domain-match the response host.
    DomainMismatch { domain: String, host: String },
    /// `Domain=` named a public suffix other than the response host itself.
    PublicSuffixDomain { domain: String },
}

impl fmt::Display for StoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DomainMismatch { domain, host } => {
                write!(f, "domain mismatch: cookie domain {domain} does not match host {host}")
            }
            Self::PublicSuffixDomain { domain } => {
                write!(f, "cookie domain {domain} is a public suffix")
            }
        }
    }
}

impl core::error::Error for StoreError {}

/// Active cookies plus quarantined third-party cookies.
///
/// Quarantined cookies are invisible to [`CookieJar::cookies_for`] until
/// their bucket is released. Nothing here removes a cookie because a request
/// was stripped: only storing, releasing and expiry change the jar.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CookieJar {
    active: BTreeMap<CookieKey, Cookie>,
    quarantine: BTreeMap<QuarantineKey, BTreeMap<CookieKey, Cookie>>,
}

fn upsert(map: &mut BTreeMap<CookieKey, Cookie>, mut cookie: Cookie) {
    let key = key_of(&cookie);
    if let Some(old) = map.get(&key) {
        cookie.created_at = old.created_at;
    }
    map.insert(key, cookie);
}

impl CookieJar {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a cookie received in the response to `source`.
    ///
    /// `cookie.created_at` is taken as the current time.
    pub fn store(
        &mut self,
        mut cookie: Cookie,
        source: &RequestContext,
        party: PartyClass,
        directive: SetCookieAction,
        rules: &SuffixRuleSet,
    ) -> Result<Placement, StoreError> {
        let host = source.url.host();
        if !cookie.host_only && is_public_suffix(&cookie.domain, rules) {
            if cookie.domain == host {
                cookie.host_only = true;
            } else {
                return Err(StoreError::PublicSuffixDomain { domain: cookie.domain });
            }
        }
        let matches = if cookie.host_only { cookie.domain == host } else { domain_match(host, &cookie.domain) };
        if !matches {
            return Err(StoreError::DomainMismatch { domain: cookie.domain, host: host.into() });
        }

        let now = cookie.created_at;
        let quarantine_key = match (directive, party) {
            (SetCookieAction::Drop, _) => return Ok(Placement::Dropped),
            (SetCookieAction::Quarantine, PartyClass::ThirdParty) => {
                let key = SitePair::new(registrable_domain(&cookie.domain, rules), source.site.clone());
                (key.third_party != key.site).then_some(key)
            }
            _ => None,
        };

        match quarantine_key {
            Some(key) => {
                if cookie.is_expired(now) {
                    if let Some(bucket) = self.quarantine.get_mut(&key) {
                        bucket.remove(&key_of(&cookie));
                        if bucket.is_empty() {
                            self.quarantine.remove(&key);
                        }
                    }
                    return Ok(Placement::Evicted);
                }
                upsert(self.quarantine.entry(key.clone()).or_default(), cookie);
                Ok(Placement::Quarantined(key))
            }
            None => {
                if cookie.is_expired(now) {
                    self.active.remove(&key_of(&cookie));
                    return Ok(Placement::Evicted);
                }
                upsert(&mut self.active, cookie);
                Ok(Placement::Active)
            }
        }
    }

    /// Inserts directly into the active jar, bypassing policy.
    pub fn insert_active(&mut self, cookie: Cookie) {
        upsert(&mut self.active, cookie);
    }

    /// `Cookie` header value for a request to `url`, or `None` when nothing
    /// matches. Longer paths first, then older cookies, then by name, domain
    /// and path.
    pub fn cookies_for(&self, url: &Url, now: UnixTime) -> Option<String> {
        let mut matching: Vec<&Cookie> =
            self.active.values().filter(|c| !c.is_expired(now) && c.matches(url)).collect();
        if matching.is_empty() {
            return None;
        }
        matching.sort_by(|a, b| {
            b.path
                .len()
                .cmp(&a.path.len())
                .then(a.created_at.cmp(&b.created_at))
                .then_with(|| a.name.cmp(&b.name))
                .then_with(|| a.domain.cmp(&b.domain))
                .then_with(|| a.path.cmp(&b.path))
        });
        let mut header = String::new();
        for (i, c) in matching.iter().enumerate() {
            if i > 0 {
                header.push_str("; ");
            }
            header.push_str(&c.name);
            header.push('=');
            header.push_str(&c.value);
        }
        Some(header)
    }

    /// Moves every cookie under `key` into the active jar. Returns how many
    /// moved; a missing key releases nothing.
    pub fn release_quarantine(&mut self, key: &QuarantineKey) -> usize {
        let Some(bucket) = self.quarantine.remove(key) else {
            return 0;
        };
        let n = bucket.len();
        for cookie in bucket.into_values() {
            upsert(&mut self.active, cookie);
        }
        n
    }

    /// Removes active and quarantined cookies that expired before `now`.
    pub fn purge_expired(&mut self, now: UnixTime) -> usize {
        let before = self.len_total();
        self.active.retain(|_, c| !c.is_expired(now));
        for bucket in self.quarantine.values_mut() {
            bucket.retain(|_, c| !c.is_expired(now));
        }
        self.quarantine.retain(|_, b| !b.is_empty());
        before - self.len_total()
    }

    fn len_total(&self) -> usize {
        self.active.len() + self.quarantine.values().map(BTreeMap::len).sum::<usize>()
    }

    pub fn active(&self) -> impl Iterator<Item = &Cookie> {
        self.active.values()
    }

    pub fn active_len(&self) -> usize {
        self.active.len()
    }

    pub fn quarantined(&self, key: &QuarantineKey) -> impl Iterator<Item = &Cookie> {
        self.quarantine.get(key).into_iter().flat_map(BTreeMap::values)
    }

    pub fn quarantine_keys(&self) -> impl Iterator<Item = &QuarantineKey> {
        self.quarantine.keys()
    }

    pub fn quarantined_len(&self) -> usize {
        self.quarantine.values().map(BTreeMap::len).sum()
    }

    /// True when any active cookie belongs to `domain`'s registrable domain.
    pub fn has_active_for(&self, domain: &crate::party::RegistrableDomain, rules: &SuffixRuleSet) -> bool {
        self.active.values().any(|c| registrable_domain(&c.domain, rules) == *domain)
    }

    pub fn snapshot(&self) -> JarSnapshot {
        JarSnapshot {
            active: self.active.values().cloned().collect(),
            quarantine: self
                .quarantine
                .iter()
                .map(|(key, bucket)| QuarantineEntry {
                    third_party: key.third_party.clone(),
                    site: key.site.clone(),
                    cookies: bucket.values().cloned().collect(),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snapshot: JarSnapshot) -> Self {
        let mut jar = Self::new();
        for c in snapshot.active {
            jar.active.insert(key_of(&c), c);
        }
        for entry in snapshot.quarantine {
            let bucket = jar.quarantine.entry(SitePair::new(entry.third_party, entry.site)).or_default();
            for c in entry.cookies {
                bucket.insert(key_of(&c), c);
            }
        }
        jar.quarantine.retain(|_, b| !b.is_empty());
        jar
    }
}

/// Serializable jar contents.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JarSnapshot {
    pub active: Vec<Cookie>,
    #[serde(default)]
    pub quarantine: Vec<QuarantineEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    #[serde(rename = "thirdParty", alias = "third_party")]
    pub third_party: crate::party::RegistrableDomain,
    pub site: crate::party::RegistrableDomain,
    pub cookies: Vec<Cookie>,
}
