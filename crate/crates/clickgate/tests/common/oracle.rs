//! Brute-force reference for the replay simulator.
//!
//! Re-derives every decision from the rules directly: suffix rules are
//! matched by scanning the whole list, cookies live in flat vectors, state
//! is a handful of sets. Only data types are shared with the engine. Cookie
//! parsing covers the attribute forms the trace generator emits.

use std::collections::BTreeSet;

use clickgate_core::policy::{CookieAction, Destination, FrameId, RequestDecision, SetCookieAction};
use clickgate_core::replay::{EventKind, LogEntry};
use clickgate_core::{ExposureReport, PartyClass, PolicyKind, RegistrableDomain, SessionTrace, SitePair, Url};

const SUFFIX_LIST: &str = include_str!("../../../core/src/party/bundled.dat");

pub struct NaiveSuffixes {
    rules: Vec<Vec<String>>,
    exceptions: Vec<Vec<String>>,
}

impl NaiveSuffixes {
    pub fn bundled() -> Self {
        let mut rules = Vec::new();
        let mut exceptions = Vec::new();
        for line in SUFFIX_LIST.lines() {
            let line = line.split_whitespace().next().unwrap_or("");
            if line.is_empty() || line.starts_with("//") {
                continue;
            }
            let (exception, body) = match line.strip_prefix('!') {
                Some(b) => (true, b),
                None => (false, line),
            };
            let labels: Vec<String> = body.to_lowercase().split('.').map(String::from).collect();
            if exception {
                exceptions.push(labels);
            } else {
                rules.push(labels);
            }
        }
        Self { rules, exceptions }
    }

    fn matches(rule: &[String], labels: &[&str]) -> bool {
        if rule.len() > labels.len() {
            return false;
        }
        let tail = &labels[labels.len() - rule.len()..];
        rule.iter().zip(tail).all(|(r, l)| r == "*" || r == l)
    }

    /// Label count of the public suffix of `host`.
    fn suffix_labels(&self, labels: &[&str]) -> usize {
        if let Some(e) = self.exceptions.iter().find(|e| Self::matches(e, labels)) {
            return e.len() - 1;
        }
        self.rules.iter().filter(|r| Self::matches(r, labels)).map(Vec::len).max().unwrap_or(1)
    }

    pub fn is_public_suffix(&self, host: &str) -> bool {
        let labels: Vec<&str> = host.split('.').collect();
        self.suffix_labels(&labels) >= labels.len()
    }

    pub fn site_of(&self, host: &str) -> RegistrableDomain {
        if host.parse::<std::net::IpAddr>().is_ok() {
            return RegistrableDomain::from_canonical(host);
        }
        let labels: Vec<&str> = host.split('.').collect();
        let keep = self.suffix_labels(&labels) + 1;
        if keep >= labels.len() {
            return RegistrableDomain::from_canonical(host);
        }
        RegistrableDomain::from_canonical(labels[labels.len() - keep..].join("."))
    }
}

#[derive(Debug, Clone)]
struct NaiveCookie {
    name: String,
    value: String,
    domain: String,
    host_only: bool,
    path: String,
    expires: Option<i64>,
    secure: bool,
    created: i64,
}

fn days_since_epoch(year: i64, month: i64, day: i64) -> i64 {
    let leap = |y: i64| (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
    let month_len = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
    let mut days = 0;
    for y in 1970..year {
        days += if leap(y) { 366 } else { 365 };
    }
    for m in 1..month {
        days += month_len[(m - 1) as usize] + if m == 2 && leap(year) { 1 } else { 0 };
    }
    days + day - 1
}

/// `Wdy, DD Mon YYYY HH:MM:SS GMT` only.
fn parse_imf_date(s: &str) -> Option<i64> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 6 {
        return None;
    }
    let day: i64 = parts[1].parse().ok()?;
    let months = ["jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec"];
    let month = months.iter().position(|m| parts[2].eq_ignore_ascii_case(m))? as i64 + 1;
    let year: i64 = parts[3].parse().ok()?;
    let hms: Vec<i64> = parts[4].split(':').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    Some(days_since_epoch(year, month, day) * 86400 + hms[0] * 3600 + hms[1] * 60 + hms[2])
}

fn directory_of(path: &str) -> String {
    match path.rfind('/') {
        Some(0) | None => "/".into(),
        Some(i) => path[..i].into(),
    }
}

fn parse_cookie(raw: &str, url: &Url, now: i64) -> Option<NaiveCookie> {
    let mut pieces = raw.split(';');
    let (name, value) = pieces.next()?.split_once('=')?;
    let name = name.trim();
    if name.is_empty() {
        return None;
    }
    let mut c = NaiveCookie {
        name: name.into(),
        value: value.trim().into(),
        domain: url.host().into(),
        host_only: true,
        path: directory_of(url.path()),
        expires: None,
        secure: false,
        created: now,
    };
    let mut max_age = None;
    let mut expires = None;
    for attr in pieces {
        let (k, v) = attr.split_once('=').map_or((attr.trim(), ""), |(k, v)| (k.trim(), v.trim()));
        match k.to_ascii_lowercase().as_str() {
            "domain" if !v.is_empty() => {
                c.domain = v.trim_start_matches('.').to_lowercase();
                c.host_only = false;
            }
            "path" if v.starts_with('/') => c.path = v.into(),
            "path" => c.path = directory_of(url.path()),
            "secure" => c.secure = true,
            "max-age" => {
                if let Ok(n) = v.parse::<i64>() {
                    max_age = Some(if n <= 0 { i64::MIN } else { now + n });
                }
            }
            "expires" => {
                if let Some(t) = parse_imf_date(v) {
                    expires = Some(t);
                }
            }
            _ => {}
        }
    }
    c.expires = max_age.or(expires);
    Some(c)
}

fn domain_matches(host: &str, domain: &str) -> bool {
    host == domain || host.ends_with(&format!(".{domain}"))
}

fn path_matches(path: &str, cookie_path: &str) -> bool {
    path == cookie_path
        || (path.starts_with(cookie_path) && (cookie_path.ends_with('/') || path[cookie_path.len()..].starts_with('/')))
}

fn same_key(a: &NaiveCookie, b: &NaiveCookie) -> bool {
    a.name == b.name && a.domain == b.domain && a.path == b.path
}

fn put(list: &mut Vec<NaiveCookie>, mut c: NaiveCookie) {
    if let Some(i) = list.iter().position(|o| same_key(o, &c)) {
        c.created = list[i].created;
        list[i] = c;
    } else {
        list.push(c);
    }
}

struct World<'a> {
    psl: &'a NaiveSuffixes,
    policy: PolicyKind,
    jar: Vec<NaiveCookie>,
    held: Vec<(SitePair, NaiveCookie)>,
    activated: BTreeSet<SitePair>,
    whitelist: BTreeSet<SitePair>,
    visited: BTreeSet<RegistrableDomain>,
    report: ExposureReport,
}

#[derive(Clone)]
struct Frame {
    id: FrameId,
    depth: u32,
    host: String,
    url: Url,
}

impl World<'_> {
    fn header_for(&self, url: &Url, now: i64) -> Option<String> {
        let mut hits: Vec<&NaiveCookie> = self
            .jar
            .iter()
            .filter(|c| c.expires.is_none_or(|e| e >= now))
            .filter(|c| if c.host_only { url.host() == c.domain } else { domain_matches(url.host(), &c.domain) })
            .filter(|c| path_matches(url.path(), &c.path))
            .filter(|c| !c.secure || url.is_secure())
            .collect();
        if hits.is_empty() {
            return None;
        }
        hits.sort_by_key(|c| {
            (std::cmp::Reverse(c.path.len()), c.created, c.name.clone(), c.domain.clone(), c.path.clone())
        });
        Some(hits.iter().map(|c| format!("{}={}", c.name, c.value)).collect::<Vec<_>>().join("; "))
    }

    fn release(&mut self, pair: &SitePair) {
        let (moving, staying): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.held).into_iter().partition(|(k, _)| k == pair);
        self.held = staying;
        for (_, c) in moving {
            put(&mut self.jar, c);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn request(
        &mut self,
        seq: u64,
        now: i64,
        method_is_document: bool,
        url: &Url,
        frame: &Frame,
        site: &RegistrableDomain,
        destination: Destination,
        clicked: bool,
        set_cookies: &[String],
    ) {
        if method_is_document && frame.depth == 0 {
            self.visited.insert(self.psl.site_of(url.host()));
        }
        let tp = self.psl.site_of(url.host());
        let third = tp != *site;
        let pair = SitePair::new(tp.clone(), site.clone());
        let consent = self.activated.contains(&pair) || self.whitelist.contains(&pair);
        let (cookie_action, set_action) = if !third {
            (CookieAction::PassUnchanged, SetCookieAction::Accept)
        } else {
            match self.policy {
                PolicyKind::AcceptAll => (CookieAction::Attach, SetCookieAction::Accept),
                PolicyKind::BlockThirdParty => (CookieAction::Strip, SetCookieAction::Drop),
                PolicyKind::VisitedBased if self.visited.contains(&tp) => {
                    (CookieAction::Attach, SetCookieAction::Accept)
                }
                PolicyKind::VisitedBased => (CookieAction::Strip, SetCookieAction::Drop),
                PolicyKind::InteractionBased if clicked || consent => (CookieAction::Attach, SetCookieAction::Accept),
                PolicyKind::InteractionBased => (CookieAction::Strip, SetCookieAction::Quarantine),
            }
        };
        let header = match cookie_action {
            CookieAction::Strip => None,
            _ => self.header_for(url, now),
        };
        if third && header.is_some() {
            self.report.cookie_bearing_pairs.insert(pair.clone());
            if !(clicked || consent) {
                self.report.non_consented_pairs.insert(pair);
            }
        }
        self.report.per_request_log.push(LogEntry {
            seq,
            url: url.clone(),
            site: site.clone(),
            frame_id: frame.id.clone(),
            destination,
            party: if third { PartyClass::ThirdParty } else { PartyClass::FirstParty },
            interaction_initiated: clicked,
            decision: RequestDecision { cookie_action, set_cookie_action: set_action },
            cookie_header: header,
        });

        for raw in set_cookies {
            let Some(mut c) = parse_cookie(raw, url, now) else { continue };
            if !c.host_only && self.psl.is_public_suffix(&c.domain) {
                if c.domain == url.host() {
                    c.host_only = true;
                } else {
                    continue;
                }
            }
            let ok = if c.host_only {
                c.domain == url.host()
            } else {
                domain_matches(url.host(), &c.domain) && url.host().parse::<std::net::IpAddr>().is_err()
                    || c.domain == url.host()
            };
            if !ok {
                continue;
            }
            let dead = c.expires.is_some_and(|e| e < now);
            match set_action {
                SetCookieAction::Drop => {}
                SetCookieAction::Quarantine if third => {
                    let key = SitePair::new(self.psl.site_of(&c.domain), site.clone());
                    if key.third_party == key.site {
                        self.store_active(c, dead);
                        continue;
                    }
                    if dead {
                        self.held.retain(|(k, o)| !(k == &key && same_key(o, &c)));
                    } else if let Some(slot) = self.held.iter_mut().find(|(k, o)| k == &key && same_key(o, &c)) {
                        c.created = slot.1.created;
                        slot.1 = c;
                    } else {
                        self.held.push((key, c));
                    }
                }
                _ => self.store_active(c, dead),
            }
        }
    }

    fn store_active(&mut self, c: NaiveCookie, dead: bool) {
        if dead {
            self.jar.retain(|o| !same_key(o, &c));
        } else {
            put(&mut self.jar, c);
        }
    }
}

const AD_WORDS: [&str; 8] = ["/ads/", "/ad/", "bid", "doubleclick", "adserver", "banner", "/pagead", "adnxs"];

fn ad_like(url: &Url) -> bool {
    let path = url.path_and_query().to_lowercase();
    AD_WORDS.iter().any(|w| path.contains(w) || url.host().contains(w.trim_matches('/')))
}

/// Reference replay of `trace` under `policy`.
pub fn oracle_simulate(trace: &SessionTrace, policy: PolicyKind, psl: &NaiveSuffixes) -> ExposureReport {
    replay(trace, policy, psl).report
}

/// (name, value, domain, path) of every cookie in the active jar after a
/// reference replay, sorted.
pub fn oracle_active_jar(
    trace: &SessionTrace,
    policy: PolicyKind,
    psl: &NaiveSuffixes,
) -> Vec<(String, String, String, String)> {
    let mut jar: Vec<_> =
        replay(trace, policy, psl).jar.into_iter().map(|c| (c.name, c.value, c.domain, c.path)).collect();
    jar.sort();
    jar
}

fn replay<'a>(trace: &SessionTrace, policy: PolicyKind, psl: &'a NaiveSuffixes) -> World<'a> {
    let start = trace.start_time.0;
    let mut world = World {
        psl,
        policy,
        jar: Vec::new(),
        held: Vec::new(),
        activated: BTreeSet::new(),
        whitelist: BTreeSet::new(),
        visited: BTreeSet::new(),
        report: ExposureReport::empty(policy),
    };
    for seed in &trace.initial_cookies {
        if let Some(c) = parse_cookie(&seed.set_cookie, &seed.url, start) {
            put(&mut world.jar, c);
        }
    }
    for pair in &trace.whitelist {
        if pair.third_party != pair.site {
            world.whitelist.insert(pair.clone());
            world.release(pair);
        }
    }

    for (i, page) in trace.pages.iter().enumerate() {
        let now = start + page.seq as i64;
        let site = psl.site_of(page.top_level_url.host());
        let main = Frame {
            id: FrameId("main".into()),
            depth: 0,
            host: page.top_level_url.host().into(),
            url: page.top_level_url.clone(),
        };
        let mut frames = vec![main.clone()];
        for f in &page.frames {
            frames.push(Frame {
                id: f.frame_id.clone(),
                depth: f.depth,
                host: f.url.host().into(),
                url: f.url.clone(),
            });
        }
        let find = |id: &FrameId| frames.iter().find(|f| &f.id == id).cloned().expect("validated trace");

        world.request(
            page.seq,
            now,
            true,
            &page.top_level_url,
            &main,
            &site,
            Destination::Document,
            false,
            &page.set_cookies,
        );
        for f in &page.frames {
            let frame = find(&f.frame_id);
            if f.depth == 1 && psl.site_of(f.url.host()) != site && ad_like(&f.url) {
                world.report.single_iframe_ad_risk_count += 1;
            }
            world.request(page.seq, now, false, &f.url, &frame, &site, Destination::Iframe, false, &f.set_cookies);
        }
        for r in &page.requests {
            let frame = find(&r.frame_id);
            let is_doc = r.destination == Destination::Document;
            world.request(page.seq, now, is_doc, &r.url, &frame, &site, r.destination, false, &r.set_cookies);
        }

        let next = trace.pages.get(i + 1).map(|p| p.seq);
        for event in trace.events.iter().filter(|e| e.seq > page.seq && next.is_none_or(|n| e.seq < n)) {
            let EventKind::Click = event.kind;
            if policy != PolicyKind::InteractionBased {
                continue;
            }
            let frame = find(&event.frame_id);
            let widget = frame.depth == 1 && psl.site_of(&frame.host) != site;
            if !widget {
                continue;
            }
            let pair = SitePair::new(psl.site_of(&frame.host), site.clone());
            if world.activated.contains(&pair) || world.whitelist.contains(&pair) {
                continue;
            }
            world.activated.insert(pair.clone());
            world.release(&pair);
            let set_cookies = page
                .frames
                .iter()
                .find(|f| f.frame_id == event.frame_id)
                .map(|f| f.set_cookies.clone())
                .unwrap_or_default();
            let now = start + event.seq as i64;
            world.request(event.seq, now, false, &frame.url, &frame, &site, Destination::Iframe, true, &set_cookies);
        }
    }
    world
}
