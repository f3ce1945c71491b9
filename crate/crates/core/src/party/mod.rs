//! Site identity: public-suffix rules, registrable domains (eTLD+1) and the
//! first-party / third-party split.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::net::{Ipv4Addr, Ipv6Addr};

use serde::{Deserialize, Serialize};

/// Rule text of the bundled snapshot, in public-suffix-list format.
pub const BUNDLED_RULES: &str = include_str!("bundled.dat");

/// One public-suffix rule. `labels` are stored right to left, so
/// `*.kobe.jp` is `["jp", "kobe", "*"]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SuffixRule {
    pub labels: Vec<String>,
    pub wildcard: bool,
    pub exception: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleParseError {
    /// A rule line contained whitespace after trimming.
    EmbeddedWhitespace { line: usize },
    /// A rule line contained an empty label (`a..b`, `.com`).
    EmptyLabel { line: usize },
    /// `*` used somewhere other than the leftmost label, or combined with `!`.
    MisplacedWildcard { line: usize },
    /// An exception rule with no wildcard rule covering it.
    OrphanException { line: usize },
}

impl fmt::Display for RuleParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmbeddedWhitespace { line } => {
                write!(f, "line {line}: whitespace inside a suffix rule")
            }
            Self::EmptyLabel { line } => write!(f, "line {line}: empty label in suffix rule"),
            Self::MisplacedWildcard { line } => {
                write!(f, "line {line}: wildcard is only allowed as the leftmost label")
            }
            Self::OrphanException { line } => {
                write!(f, "line {line}: exception rule has no matching wildcard rule")
            }
        }
    }
}

impl core::error::Error for RuleParseError {}

/// Parsed public-suffix rules. Immutable after loading.
///
/// Rules are kept in three sets of dotted names: plain rules (`co.uk`),
/// the parents of wildcard rules (`kobe.jp` for `*.kobe.jp`) and exception
/// rules without the `!` (`city.kobe.jp`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SuffixRuleSet {
    plain: BTreeSet<String>,
    wildcard_parents: BTreeSet<String>,
    exceptions: BTreeSet<String>,
}

impl SuffixRuleSet {
    /// The bundled snapshot subset.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_RULES).expect("bundled suffix list is well-formed")
    }

    /// Parses public-suffix-list text: one rule per line, `//` comments,
    /// blank lines ignored, `*.` wildcard and `!` exception prefixes.
    pub fn parse(text: &str) -> Result<Self, RuleParseError> {
        let mut set = Self::default();
        let mut exception_lines = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with("//") {
                continue;
            }
            if line.chars().any(char::is_whitespace) {
                return Err(RuleParseError::EmbeddedWhitespace { line: line_no });
            }
            let line = line.to_lowercase();
            let (exception, body) = match line.strip_prefix('!') {
                Some(rest) => (true, rest),
                None => (false, line.as_str()),
            };
            if body.split('.').any(str::is_empty) {
                return Err(RuleParseError::EmptyLabel { line: line_no });
            }
            let (wildcard, name) = match body.strip_prefix("*.") {
                Some(rest) => (true, rest),
                None => (false, body),
            };
            if name.split('.').any(|l| l == "*") || (wildcard && exception) || body == "*" {
                return Err(RuleParseError::MisplacedWildcard { line: line_no });
            }
            if exception {
                set.exceptions.insert(name.to_string());
                exception_lines.push((line_no, name.to_string()));
            } else if wildcard {
                set.wildcard_parents.insert(name.to_string());
            } else {
                set.plain.insert(name.to_string());
            }
        }
        for (line_no, name) in exception_lines {
            let covered = name.split_once('.').is_some_and(|(_, parent)| set.wildcard_parents.contains(parent));
            if !covered {
                return Err(RuleParseError::OrphanException { line: line_no });
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.plain.len() + self.wildcard_parents.len() + self.exceptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All rules, sorted by label sequence.
    pub fn rules(&self) -> Vec<SuffixRule> {
        let reversed = |name: &str| name.rsplit('.').map(String::from).collect::<Vec<_>>();
        let mut out: Vec<SuffixRule> = self
            .plain
            .iter()
            .map(|n| SuffixRule { labels: reversed(n), wildcard: false, exception: false })
            .chain(self.wildcard_parents.iter().map(|n| {
                let mut labels = reversed(n);
                labels.push("*".into());
                SuffixRule { labels, wildcard: true, exception: false }
            }))
            .chain(self.exceptions.iter().map(|n| SuffixRule { labels: reversed(n), wildcard: false, exception: true }))
            .collect();
        out.sort();
        out
    }

    /// Number of labels in the public suffix of `labels` (a non-empty,
    /// left-to-right label list). Falls back to the implicit `*` rule, so
    /// the answer is at least 1.
    fn suffix_len(&self, host: &str, label_count: usize) -> usize {
        let mut best = 1;
        // Walk suffixes from longest to shortest; `offset` is the byte offset
        // of the candidate suffix inside `host`.
        let mut offset = 0;
        for i in 0..label_count {
            let candidate = &host[offset..];
            let remaining = label_count - i;
            if self.exceptions.contains(candidate) {
                // An exception always wins and drops its leftmost label.
                return remaining - 1;
            }
            if remaining > best {
                if self.plain.contains(candidate) {
                    best = remaining;
                } else if let Some((_, parent)) = candidate.split_once('.') {
                    if self.wildcard_parents.contains(parent) {
                        best = remaining;
                    }
                }
            }
            if let Some(dot) = candidate.find('.') {
                offset += dot + 1;
            }
        }
        best
    }
}

/// The registrable domain (eTLD+1) of a host, used as site identity.
///
/// IP literals, single-label hosts and hosts that are themselves a public
/// suffix are their own registrable domain (the host literal).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegistrableDomain(String);

impl RegistrableDomain {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Wraps an already-canonical value without consulting any rules.
    /// Callers are trusted to pass a lowercase name without a trailing dot.
    pub fn from_canonical(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    /// True when the value is an IP literal rather than a DNS name.
    pub fn is_ip_literal(&self) -> bool {
        is_ip_literal(&self.0)
    }
}

impl fmt::Display for RegistrableDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for RegistrableDomain {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// A (third party, top-level site) pair: the unit of activation,
/// whitelisting, cookie quarantine and exposure accounting.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SitePair {
    #[serde(alias = "thirdParty")]
    pub third_party: RegistrableDomain,
    pub site: RegistrableDomain,
}

impl SitePair {
    pub fn new(third_party: RegistrableDomain, site: RegistrableDomain) -> Self {
        Self { third_party, site }
    }
}

impl fmt::Display for SitePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.third_party, self.site)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PartyClass {
    FirstParty,
    ThirdParty,
}

/// Lowercases and strips one trailing dot. IPv6 brackets are removed.
pub fn canonical_host(host: &str) -> String {
    let host = host.strip_suffix('.').unwrap_or(host);
    let host = host.strip_prefix('[').and_then(|h| h.strip_suffix(']')).unwrap_or(host);
    host.to_ascii_lowercase()
}

pub fn is_ip_literal(host: &str) -> bool {
    host.parse::<Ipv4Addr>().is_ok() || host.parse::<Ipv6Addr>().is_ok()
}

/// Registrable domain of `host` under `rules`. Case folding happens here.
pub fn registrable_domain(host: &str, rules: &SuffixRuleSet) -> RegistrableDomain {
    let host = canonical_host(host);
    if host.is_empty() || is_ip_literal(&host) {
        return RegistrableDomain(host);
    }
    let label_count = host.split('.').count();
    if label_count == 1 {
        return RegistrableDomain(host);
    }
    let suffix_len = rules.suffix_len(&host, label_count);
    if suffix_len >= label_count {
        return RegistrableDomain(host);
    }
    let drop = label_count - (suffix_len + 1);
    if drop == 0 {
        return RegistrableDomain(host);
    }
    let start = host.match_indices('.').map(|(i, _)| i + 1).nth(drop - 1).unwrap_or(0);
    RegistrableDomain(host[start..].to_string())
}

/// Public suffix of `host`, or `None` for IP literals.
pub fn public_suffix(host: &str, rules: &SuffixRuleSet) -> Option<String> {
    let host = canonical_host(host);
    if host.is_empty() || is_ip_literal(&host) {
        return None;
    }
    let label_count = host.split('.').count();
    let suffix_len = rules.suffix_len(&host, label_count).min(label_count);
    let start = if suffix_len == label_count {
        0
    } else {
        host.match_indices('.').map(|(i, _)| i + 1).nth(label_count - suffix_len - 1).unwrap_or(0)
    };
    Some(host[start..].to_string())
}

/// True when `host` is exactly a public suffix (and not an IP literal).
pub fn is_public_suffix(host: &str, rules: &SuffixRuleSet) -> bool {
    public_suffix(host, rules).is_some_and(|s| s == canonical_host(host))
}

pub fn classify(request_host: &str, top_level_site: &RegistrableDomain, rules: &SuffixRuleSet) -> PartyClass {
    if registrable_domain(request_host, rules) == *top_level_site {
        PartyClass::FirstParty
    } else {
        PartyClass::ThirdParty
    }
}
