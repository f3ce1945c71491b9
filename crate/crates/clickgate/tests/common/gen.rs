//! Seeded random session traces.
//!
//! Limits: at most 5 publisher sites, 4 third parties and 20 requests per
//! trace (page documents, frame documents and listed requests all count).

use clickgate_core::policy::{Destination, FrameId};
use clickgate_core::replay::{EventKind, PageLoad, SeedCookie, TraceEvent, TraceFrame, TraceRequest};
use clickgate_core::{RegistrableDomain, SessionTrace, SitePair, Url};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_SITES: usize = 5;
pub const MAX_THIRD_PARTIES: usize = 4;
pub const MAX_REQUESTS: usize = 20;

const SITES: [&str; 7] =
    ["pub.com", "news.co.uk", "shop.net", "blog.github.io", "city.kobe.jp", "daily.org", "mag.com.au"];
const THIRD_PARTIES: [&str; 6] =
    ["osn.com", "tracker.net", "adserver.io", "cdn.herokuapp.com", "widgets.co.uk", "bidder.org"];
const PATHS: [&str; 7] = ["/", "/a", "/a/b", "/a/b/c.html", "/x?q=1", "/ads/slot", "/pixel.gif"];
const NAMES: [&str; 5] = ["sid", "uid", "t", "seen", "pref"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Any host may be a top-level site at any time.
    Mixed,
    /// Third parties are visited as first parties only before any page
    /// embeds them, and publishers are never embedded.
    LoginFirst,
}

struct Gen {
    rng: ChaCha8Rng,
    sites: Vec<&'static str>,
    tps: Vec<&'static str>,
    budget: usize,
}

impl Gen {
    fn host(&mut self, domain: &str) -> String {
        match self.rng.random_range(0..4) {
            0 => format!("www.{domain}"),
            1 => format!("static.{domain}"),
            _ => domain.to_string(),
        }
    }

    fn url(&mut self, domain: &str) -> Url {
        let scheme = if self.rng.random_bool(0.8) { "https" } else { "http" };
        let host = self.host(domain);
        let path = *PATHS.choose(&mut self.rng).unwrap();
        Url::parse(&format!("{scheme}://{host}{path}")).unwrap()
    }

    fn set_cookies(&mut self, url: &Url, domain: &str) -> Vec<String> {
        let n = match self.rng.random_range(0..10) {
            0..=4 => 0,
            5..=8 => 1,
            _ => 2,
        };
        (0..n).map(|_| self.set_cookie(url, domain)).collect()
    }

    fn set_cookie(&mut self, url: &Url, domain: &str) -> String {
        let name = NAMES.choose(&mut self.rng).unwrap();
        let value = self.rng.random_range(0..100);
        let mut s = format!("{name}={value}");
        match self.rng.random_range(0..10) {
            0..=2 => s.push_str(&format!("; Domain={domain}")),
            3 => s.push_str(&format!("; Domain=.{}", url.host())),
            4 => s.push_str("; Domain=elsewhere.com"),
            5 => s.push_str("; Domain=co.uk"),
            _ => {}
        }
        match self.rng.random_range(0..6) {
            0 | 1 => s.push_str("; Path=/"),
            2 => s.push_str("; Path=/a"),
            3 => s.push_str("; Path=nope"),
            _ => {}
        }
        match self.rng.random_range(0..12) {
            0 => s.push_str("; Max-Age=0"),
            1 => s.push_str("; Max-Age=-1"),
            2 => s.push_str("; Max-Age=15"),
            3 => s.push_str("; Max-Age=86400"),
            4 => s.push_str("; Expires=Sat, 01 Jan 2000 00:00:00 GMT"),
            5 => s.push_str("; Expires=Tue, 14 Nov 2023 22:13:30 GMT"),
            6 => s.push_str("; Expires=Fri, 01 Jan 2038 00:00:00 GMT; Max-Age=0"),
            _ => {}
        }
        if self.rng.random_bool(0.2) {
            s.push_str("; Secure");
        }
        if self.rng.random_bool(0.2) {
            s.push_str("; HttpOnly");
        }
        s
    }

    fn take(&mut self) -> bool {
        if self.budget == 0 {
            return false;
        }
        self.budget -= 1;
        true
    }

    fn embedded_domain(&mut self, site: &str, shape: Shape) -> &'static str {
        let pick_site = shape == Shape::Mixed && self.rng.random_bool(0.2) || self.rng.random_bool(0.15);
        if pick_site {
            if shape == Shape::LoginFirst {
                // First-party content of the page itself.
                return SITES.iter().find(|s| **s == site).copied().unwrap_or(self.tps[0]);
            }
            return self.sites.choose(&mut self.rng).copied().unwrap();
        }
        self.tps.choose(&mut self.rng).copied().unwrap()
    }

    fn page(&mut self, seq: u64, domain: &'static str, embed: bool, shape: Shape) -> PageLoad {
        let top_level_url = self.url(domain);
        let set_cookies = self.set_cookies(&top_level_url, domain);
        let mut page = PageLoad { seq, top_level_url, set_cookies, frames: Vec::new(), requests: Vec::new() };
        if !embed {
            return page;
        }
        let mut depths: Vec<(FrameId, u32)> = Vec::new();
        for i in 0..self.rng.random_range(0..=3) {
            if !self.take() {
                break;
            }
            let (parent, depth) = match depths.choose(&mut self.rng) {
                Some((id, d)) if self.rng.random_bool(0.4) => (Some(id.clone()), d + 1),
                _ => (None, 1),
            };
            let d = self.embedded_domain(domain, shape);
            let url = self.url(d);
            let frame_id = FrameId(format!("f{i}"));
            depths.push((frame_id.clone(), depth));
            let set_cookies = self.set_cookies(&url, d);
            page.frames.push(TraceFrame { frame_id, parent_frame_id: parent, url, depth, set_cookies });
        }
        for _ in 0..self.rng.random_range(0..=4) {
            if !self.take() {
                break;
            }
            let d = self.embedded_domain(domain, shape);
            let url = self.url(d);
            let (frame_id, depth) = match depths.choose(&mut self.rng) {
                Some((id, depth)) if self.rng.random_bool(0.5) => (id.clone(), *depth),
                _ => (FrameId("main".into()), 0),
            };
            let destination = match self.rng.random_range(0..8) {
                0 if depth >= 1 => Destination::Iframe,
                1 if depth == 0 && shape == Shape::Mixed => Destination::Document,
                _ => Destination::Subresource,
            };
            let method = if self.rng.random_bool(0.2) { "POST" } else { "GET" }.to_string();
            let set_cookies = self.set_cookies(&url, d);
            page.requests.push(TraceRequest { url, frame_id, destination, method, set_cookies });
        }
        page
    }
}

/// A valid random trace; equal seeds give equal traces.
pub fn random_trace(seed: u64, shape: Shape) -> SessionTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sites = rng.random_range(1..=MAX_SITES);
    let n_tps = rng.random_range(1..=MAX_THIRD_PARTIES);
    let sites: Vec<&str> = SITES.choose_multiple(&mut rng, n_sites).copied().collect();
    let tps: Vec<&str> = THIRD_PARTIES.choose_multiple(&mut rng, n_tps).copied().collect();
    let mut g = Gen { rng, sites, tps, budget: MAX_REQUESTS };

    let mut trace = SessionTrace::default();
    let mut seq = 0u64;

    if g.rng.random_bool(0.3) {
        let d = g.tps.choose(&mut g.rng).copied().unwrap();
        let url = Url::parse(&format!("https://{d}/")).unwrap();
        trace.initial_cookies.push(SeedCookie { url, set_cookie: format!("pre=1; Domain={d}; Path=/") });
    }
    if g.rng.random_bool(0.2) {
        let tp = g.tps.choose(&mut g.rng).copied().unwrap();
        let site = g.sites.choose(&mut g.rng).copied().unwrap();
        trace
            .whitelist
            .push(SitePair::new(RegistrableDomain::from_canonical(tp), RegistrableDomain::from_canonical(site)));
    }

    if shape == Shape::LoginFirst {
        let logins: Vec<&'static str> = g.tps.clone();
        for d in logins {
            if g.rng.random_bool(0.6) && g.take() {
                seq += g.rng.random_range(1..=3);
                let page = g.page(seq, d, false, shape);
                trace.pages.push(page);
            }
        }
    }

    while g.take() {
        seq += g.rng.random_range(1..=5);
        let top = match shape {
            Shape::Mixed if g.rng.random_bool(0.25) => g.tps.choose(&mut g.rng).copied().unwrap(),
            _ => g.sites.choose(&mut g.rng).copied().unwrap(),
        };
        let page = g.page(seq, top, true, shape);
        let mut clickable: Vec<FrameId> = page.frames.iter().map(|f| f.frame_id.clone()).collect();
        clickable.push(FrameId("main".into()));
        trace.pages.push(page);
        for _ in 0..g.rng.random_range(0..=2) {
            seq += 1;
            let frame_id = clickable.choose(&mut g.rng).cloned().unwrap();
            trace.events.push(TraceEvent { seq, kind: EventKind::Click, frame_id });
        }
    }
    trace.validate().expect("generator emits valid traces");
    trace
}

pub fn request_count(trace: &SessionTrace) -> usize {
    trace.pages.iter().map(|p| 1 + p.frames.len() + p.requests.len()).sum()
}
