//! Deterministic replay of recorded browsing sessions under each cookie
//! policy, producing tracking-exposure reports.
//!
//! A trace is a sequence of page loads and click events ordered by `seq`.
//! Each page has an implicit top-level frame with id `main`; listed frames
//! form a tree under it. Simulated time is `start_time + seq` seconds.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::cookie::{Cookie, UnixTime};
use crate::party::{PartyClass, RegistrableDomain, SitePair, SuffixRuleSet};
use crate::policy::{
    ClickAction, Destination, Engine, FrameContext, FrameId, PolicyKind, RequestContext, RequestDecision,
};
use crate::url::Url;

/// Id of the implicit top-level frame of every page.
pub const MAIN_FRAME: &str = "main";

pub const DEFAULT_START_TIME: UnixTime = UnixTime(1_700_000_000);

fn default_start_time() -> UnixTime {
    DEFAULT_START_TIME
}

fn main_frame() -> FrameId {
    FrameId::from(MAIN_FRAME)
}

fn default_method() -> String {
    "GET".to_string()
}

fn default_destination() -> Destination {
    Destination::Subresource
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTrace {
    #[serde(default = "default_start_time")]
    pub start_time: UnixTime,
    /// Cookies already in the browser before the session starts.
    #[serde(default)]
    pub initial_cookies: Vec<SeedCookie>,
    /// Pairs whitelisted before the session starts.
    #[serde(default)]
    pub whitelist: Vec<SitePair>,
    #[serde(default)]
    pub pages: Vec<PageLoad>,
    #[serde(default)]
    pub events: Vec<TraceEvent>,
}

impl Default for SessionTrace {
    fn default() -> Self {
        Self {
            start_time: DEFAULT_START_TIME,
            initial_cookies: Vec::new(),
            whitelist: Vec::new(),
            pages: Vec::new(),
            events: Vec::new(),
        }
    }
}

/// A cookie as if set by a response from `url`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedCookie {
    pub url: Url,
    pub set_cookie: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageLoad {
    pub seq: u64,
    pub top_level_url: Url,
    /// `Set-Cookie` headers on the top-level document response.
    #[serde(default)]
    pub set_cookies: Vec<String>,
    #[serde(default)]
    pub frames: Vec<TraceFrame>,
    #[serde(default)]
    pub requests: Vec<TraceRequest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFrame {
    pub frame_id: FrameId,
    /// `None` means the top-level frame.
    #[serde(default)]
    pub parent_frame_id: Option<FrameId>,
    pub url: Url,
    pub depth: u32,
    /// `Set-Cookie` headers on the frame document response.
    #[serde(default)]
    pub set_cookies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub url: Url,
    #[serde(default = "main_frame")]
    pub frame_id: FrameId,
    #[serde(default = "default_destination")]
    pub destination: Destination,
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default)]
    pub set_cookies: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Click,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub frame_id: FrameId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceError {
    NonMonotonicSeq { seq: u64 },
    ReservedFrameId { page_seq: u64 },
    DuplicateFrame { page_seq: u64, frame_id: FrameId },
    DanglingFrame { seq: u64, frame_id: FrameId },
    DepthMismatch { page_seq: u64, frame_id: FrameId, expected: u32, found: u32 },
    BadDestination { page_seq: u64, index: usize },
    EventBeforeFirstPage { seq: u64 },
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonMonotonicSeq { seq } => write!(f, "sequence number {seq} is not strictly increasing"),
            Self::ReservedFrameId { page_seq } => {
                write!(f, "page {page_seq}: frame id {MAIN_FRAME:?} is reserved for the top-level frame")
            }
            Self::DuplicateFrame { page_seq, frame_id } => {
                write!(f, "page {page_seq}: duplicate frame id {frame_id:?}")
            }
            Self::DanglingFrame { seq, frame_id } => {
                write!(f, "seq {seq}: frame id {frame_id:?} does not resolve within its page")
            }
            Self::DepthMismatch { page_seq, frame_id, expected, found } => write!(
                f,
                "page {page_seq}: frame {frame_id:?} has depth {found} but its parent chain implies {expected}"
            ),
            Self::BadDestination { page_seq, index } => {
                write!(f, "page {page_seq}: request {index} has a destination inconsistent with its frame")
            }
            Self::EventBeforeFirstPage { seq } => write!(f, "event {seq} precedes every page load"),
        }
    }
}

impl core::error::Error for TraceError {}

impl SessionTrace {
    /// Checks frame references, depths and sequence ordering.
    pub fn validate(&self) -> Result<(), TraceError> {
        let mut last_seq: Option<u64> = None;
        for page in &self.pages {
            if last_seq.is_some_and(|l| page.seq <= l) {
                return Err(TraceError::NonMonotonicSeq { seq: page.seq });
            }
            last_seq = Some(page.seq);
            let mut depths: BTreeMap<&FrameId, u32> = BTreeMap::new();
            for frame in &page.frames {
                if frame.frame_id.0 == MAIN_FRAME {
                    return Err(TraceError::ReservedFrameId { page_seq: page.seq });
                }
                if depths.contains_key(&frame.frame_id) {
                    return Err(TraceError::DuplicateFrame { page_seq: page.seq, frame_id: frame.frame_id.clone() });
                }
                let parent_depth = match &frame.parent_frame_id {
                    None => 0,
                    Some(p) if p.0 == MAIN_FRAME => 0,
                    Some(p) => *depths
                        .get(p)
                        .ok_or_else(|| TraceError::DanglingFrame { seq: page.seq, frame_id: p.clone() })?,
                };
                if frame.depth != parent_depth + 1 {
                    return Err(TraceError::DepthMismatch {
                        page_seq: page.seq,
                        frame_id: frame.frame_id.clone(),
                        expected: parent_depth + 1,
                        found: frame.depth,
                    });
                }
                depths.insert(&frame.frame_id, frame.depth);
            }
            for (index, req) in page.requests.iter().enumerate() {
                let depth = if req.frame_id.0 == MAIN_FRAME {
                    0
                } else {
                    *depths
                        .get(&req.frame_id)
                        .ok_or_else(|| TraceError::DanglingFrame { seq: page.seq, frame_id: req.frame_id.clone() })?
                };
                let ok = match req.destination {
                    Destination::Document => depth == 0,
                    Destination::Iframe => depth >= 1,
                    Destination::Subresource => true,
                };
                if !ok {
                    return Err(TraceError::BadDestination { page_seq: page.seq, index });
                }
            }
        }

        let mut last_event: Option<u64> = None;
        for event in &self.events {
            if last_event.is_some_and(|l| event.seq <= l) {
                return Err(TraceError::NonMonotonicSeq { seq: event.seq });
            }
            last_event = Some(event.seq);
            let page = self
                .page_at(event.seq)
                .map_err(|_| TraceError::NonMonotonicSeq { seq: event.seq })?
                .ok_or(TraceError::EventBeforeFirstPage { seq: event.seq })?;
            let known = event.frame_id.0 == MAIN_FRAME || page.frames.iter().any(|f| f.frame_id == event.frame_id);
            if !known {
                return Err(TraceError::DanglingFrame { seq: event.seq, frame_id: event.frame_id.clone() });
            }
        }
        Ok(())
    }

    /// The page loaded most recently before `seq`. `Err` when a page has
    /// exactly this sequence number.
    fn page_at(&self, seq: u64) -> Result<Option<&PageLoad>, ()> {
        match self.pages.binary_search_by_key(&seq, |p| p.seq) {
            Ok(_) => Err(()),
            Err(0) => Ok(None),
            Err(i) => Ok(Some(&self.pages[i - 1])),
        }
    }

    pub fn click_count(&self) -> usize {
        self.events.iter().filter(|e| e.kind == EventKind::Click).count()
    }
}

/// One decided request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub url: Url,
    pub site: RegistrableDomain,
    pub frame_id: FrameId,
    pub destination: Destination,
    pub party: PartyClass,
    pub interaction_initiated: bool,
    pub decision: RequestDecision,
    /// The `Cookie` header sent, if any.
    pub cookie_header: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: u64,
    pub median_ns: u64,
    pub p99_ns: u64,
}

impl LatencySummary {
    /// Lower median and nearest-rank 99th percentile.
    pub fn from_samples(mut samples: Vec<u64>) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        samples.sort_unstable();
        let n = samples.len();
        let p99_rank = (n * 99).div_ceil(100).max(1);
        Some(Self { samples: n as u64, median_ns: samples[(n - 1) / 2], p99_ns: samples[p99_rank - 1] })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureReport {
    pub policy: PolicyKind,
    /// Pairs whose third party received at least one cookie-bearing request.
    pub cookie_bearing_pairs: BTreeSet<SitePair>,
    /// Subset of `cookie_bearing_pairs` that received cookies without a prior
    /// activation, click or whitelist entry.
    pub non_consented_pairs: BTreeSet<SitePair>,
    pub per_request_log: Vec<LogEntry>,
    /// Depth-1 third-party frames that look like ads; the widget heuristic
    /// treats these as widgets.
    pub single_iframe_ad_risk_count: u64,
    /// Wall time of policy decisions. Absent for untimed runs, which keeps
    /// reports byte-for-byte reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_latency: Option<LatencySummary>,
}

impl ExposureReport {
    pub fn empty(policy: PolicyKind) -> Self {
        Self {
            policy,
            cookie_bearing_pairs: BTreeSet::new(),
            non_consented_pairs: BTreeSet::new(),
            per_request_log: Vec::new(),
            single_iframe_ad_risk_count: 0,
            decision_latency: None,
        }
    }

    pub fn first_party_log(&self) -> impl Iterator<Item = &LogEntry> {
        self.per_request_log.iter().filter(|e| e.party == PartyClass::FirstParty)
    }

    pub fn cookie_bearing_requests(&self) -> usize {
        self.per_request_log.iter().filter(|e| e.party == PartyClass::ThirdParty && e.cookie_header.is_some()).count()
    }
}

/// Path and host tokens typical of ad-serving URLs.
const AD_TOKENS: [&str; 8] = ["/ads/", "/ad/", "bid", "doubleclick", "adserver", "banner", "/pagead", "adnxs"];

/// Reporting aid only: never feeds into a decision.
pub fn looks_like_ad(url: &Url) -> bool {
    let host = url.host();
    let path = url.path_and_query().to_ascii_lowercase();
    AD_TOKENS.iter().any(|t| path.contains(t) || host.contains(t.trim_matches('/')))
}

/// Accumulates an [`ExposureReport`] from decided requests. Shared by the
/// simulator and the live proxy.
#[derive(Debug, Clone)]
pub struct ReportBuilder {
    report: ExposureReport,
    latencies: Vec<u64>,
}

impl ReportBuilder {
    pub fn new(policy: PolicyKind) -> Self {
        Self { report: ExposureReport::empty(policy), latencies: Vec::new() }
    }

    /// Records one request. `consented` is the consent state when the
    /// decision was made.
    #[allow(clippy::too_many_arguments)]
    pub fn record(
        &mut self,
        seq: u64,
        ctx: &RequestContext,
        party: PartyClass,
        decision: RequestDecision,
        cookie_header: Option<String>,
        third_party: RegistrableDomain,
        consented: bool,
    ) {
        if party == PartyClass::ThirdParty && cookie_header.is_some() {
            let pair = SitePair::new(third_party, ctx.site.clone());
            if !consented {
                self.report.non_consented_pairs.insert(pair.clone());
            }
            self.report.cookie_bearing_pairs.insert(pair);
        }
        self.report.per_request_log.push(LogEntry {
            seq,
            url: ctx.url.clone(),
            site: ctx.site.clone(),
            frame_id: ctx.frame.frame_id.clone(),
            destination: ctx.destination,
            party,
            interaction_initiated: ctx.is_interaction_initiated(),
            decision,
            cookie_header,
        });
    }

    pub fn record_latency(&mut self, nanos: u64) {
        self.latencies.push(nanos);
    }

    pub fn note_single_iframe_ad(&mut self) {
        self.report.single_iframe_ad_risk_count += 1;
    }

    pub fn snapshot(&self) -> ExposureReport {
        let mut report = self.report.clone();
        report.decision_latency = LatencySummary::from_samples(self.latencies.clone());
        report
    }

    pub fn finish(mut self) -> ExposureReport {
        self.report.decision_latency = LatencySummary::from_samples(self.latencies);
        self.report
    }
}

/// Monotonic nanosecond clock used to time decisions.
pub type Clock<'a> = &'a dyn Fn() -> u64;

struct Simulation<'a> {
    engine: Engine,
    builder: ReportBuilder,
    clock: Option<Clock<'a>>,
}

impl Simulation<'_> {
    fn request(&mut self, seq: u64, now: UnixTime, ctx: &RequestContext, set_cookies: &[String]) {
        self.engine.note_request(ctx);
        let decision = match self.clock {
            Some(clock) => {
                let start = clock();
                let d = self.engine.decide(ctx);
                let elapsed = clock().saturating_sub(start);
                self.builder.record_latency(elapsed);
                d
            }
            None => self.engine.decide(ctx),
        };
        let cookie_header = self.engine.cookie_header(ctx, decision, now);
        let consented = self.engine.has_consent(ctx);
        let party = self.engine.party_of(ctx);
        let third_party = self.engine.registrable_domain(ctx.url.host());
        self.builder.record(seq, ctx, party, decision, cookie_header, third_party, consented);
        // Malformed or mismatched Set-Cookie headers are ignored, as a browser would.
        let _ = self.engine.apply_set_cookies(ctx, decision, set_cookies.iter().map(String::as_str), now);
    }
}

fn frame_contexts(page: &PageLoad, site: &RegistrableDomain) -> BTreeMap<FrameId, (FrameContext, Url)> {
    let mut frames = BTreeMap::new();
    let top = FrameContext::top_level(main_frame(), page.top_level_url.host(), site.clone());
    frames.insert(main_frame(), (top, page.top_level_url.clone()));
    for f in &page.frames {
        let parent_id = f.parent_frame_id.clone().unwrap_or_else(main_frame);
        let parent = frames[&parent_id].0.clone();
        let ctx = FrameContext::child_of(&parent, f.frame_id.clone(), f.url.host());
        frames.insert(f.frame_id.clone(), (ctx, f.url.clone()));
    }
    frames
}

/// Replays `trace` under `policy`. The trace must be valid.
pub fn simulate(trace: &SessionTrace, policy: PolicyKind, rules: &SuffixRuleSet) -> ExposureReport {
    run(trace, policy, rules, None)
}

/// As [`simulate`], also timing each decision with `clock`.
pub fn simulate_timed(
    trace: &SessionTrace,
    policy: PolicyKind,
    rules: &SuffixRuleSet,
    clock: Clock<'_>,
) -> ExposureReport {
    run(trace, policy, rules, Some(clock))
}

/// As [`simulate`], also returning the engine in its final state.
pub fn simulate_with_engine(
    trace: &SessionTrace,
    policy: PolicyKind,
    rules: &SuffixRuleSet,
) -> (ExposureReport, Engine) {
    let sim = replay(trace, policy, rules, None);
    (sim.builder.finish(), sim.engine)
}

fn run(trace: &SessionTrace, policy: PolicyKind, rules: &SuffixRuleSet, clock: Option<Clock<'_>>) -> ExposureReport {
    replay(trace, policy, rules, clock).builder.finish()
}

fn replay<'a>(
    trace: &SessionTrace,
    policy: PolicyKind,
    rules: &SuffixRuleSet,
    clock: Option<Clock<'a>>,
) -> Simulation<'a> {
    let mut engine = Engine::new(policy, rules.clone());
    for seed in &trace.initial_cookies {
        if let Ok(cookie) = Cookie::parse(&seed.set_cookie, &seed.url, trace.start_time) {
            engine.jar_mut().insert_active(cookie);
        }
    }
    for pair in &trace.whitelist {
        let _ = engine.whitelist_add(pair.third_party.clone(), pair.site.clone());
    }
    let mut sim = Simulation { engine, builder: ReportBuilder::new(policy), clock };

    let mut events = trace.events.iter().peekable();
    for (i, page) in trace.pages.iter().enumerate() {
        let now = trace.start_time.saturating_add_secs(page.seq as i64);
        let site = sim.engine.registrable_domain(page.top_level_url.host());
        let frames = frame_contexts(page, &site);

        let (top, _) = &frames[&main_frame()];
        let doc = RequestContext::new("GET", page.top_level_url.clone(), Destination::Document, top.clone());
        sim.request(page.seq, now, &doc, &page.set_cookies);

        for f in &page.frames {
            let (ctx, url) = &frames[&f.frame_id];
            if ctx.depth == 1
                && sim.engine.party_of_host(url.host(), &site) == PartyClass::ThirdParty
                && looks_like_ad(url)
            {
                sim.builder.note_single_iframe_ad();
            }
            let req = RequestContext::new("GET", url.clone(), Destination::Iframe, ctx.clone());
            sim.request(page.seq, now, &req, &f.set_cookies);
        }

        for r in &page.requests {
            let (ctx, _) = &frames[&r.frame_id];
            let req = RequestContext::new(&r.method, r.url.clone(), r.destination, ctx.clone());
            sim.request(page.seq, now, &req, &r.set_cookies);
        }

        let next_page_seq = trace.pages.get(i + 1).map(|p| p.seq);
        while let Some(event) = events.next_if(|e| next_page_seq.is_none_or(|n| e.seq < n)) {
            if event.seq < page.seq {
                continue;
            }
            let EventKind::Click = event.kind;
            let now = trace.start_time.saturating_add_secs(event.seq as i64);
            let (frame, url) = &frames[&event.frame_id];
            if let ClickAction::ReloadWithCookies(_) = sim.engine.click(frame) {
                let reload = RequestContext::reload(url.clone(), frame.clone());
                let set_cookies = page
                    .frames
                    .iter()
                    .find(|f| f.frame_id == event.frame_id)
                    .map(|f| f.set_cookies.as_slice())
                    .unwrap_or(&[]);
                sim.request(event.seq, now, &reload, set_cookies);
            }
        }
    }
    sim
}

/// Subset and emptiness checks between policies on one trace. A check is
/// `None` when a policy it needs was not run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DominanceCheck {
    pub block_third_party_cookie_free: Option<bool>,
    pub block_third_party_non_consented_empty: Option<bool>,
    pub interaction_non_consented_empty: Option<bool>,
    pub visited_within_accept_all: Option<bool>,
    /// First-party requests get the same decisions under every policy.
    pub first_party_decisions_equal: bool,
    /// First-party requests also carry the same `Cookie` headers. Not part
    /// of [`DominanceCheck::all_hold`]: a third party visited directly after
    /// being embedded sees the cookies each policy let it set.
    pub first_party_cookie_headers_equal: bool,
}

impl DominanceCheck {
    pub fn all_hold(&self) -> bool {
        self.first_party_decisions_equal
            && [
                self.block_third_party_cookie_free,
                self.block_third_party_non_consented_empty,
                self.interaction_non_consented_empty,
                self.visited_within_accept_all,
            ]
            .iter()
            .all(|c| c.unwrap_or(true))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub reports: Vec<ExposureReport>,
    pub dominance: DominanceCheck,
}

/// Runs every policy in `policies` over `trace` and checks the expected
/// ordering between them.
pub fn compare(trace: &SessionTrace, policies: &[PolicyKind], rules: &SuffixRuleSet) -> Comparison {
    compare_with(trace, policies, |p| simulate(trace, p, rules))
}

pub fn compare_timed(
    trace: &SessionTrace,
    policies: &[PolicyKind],
    rules: &SuffixRuleSet,
    clock: Clock<'_>,
) -> Comparison {
    compare_with(trace, policies, |p| simulate_timed(trace, p, rules, clock))
}

fn compare_with(
    _trace: &SessionTrace,
    policies: &[PolicyKind],
    mut run: impl FnMut(PolicyKind) -> ExposureReport,
) -> Comparison {
    let reports: Vec<ExposureReport> = policies.iter().map(|&p| run(p)).collect();
    let dominance = check_dominance(&reports);
    Comparison { reports, dominance }
}

pub fn check_dominance(reports: &[ExposureReport]) -> DominanceCheck {
    let find = |p: PolicyKind| reports.iter().find(|r| r.policy == p);
    let block = find(PolicyKind::BlockThirdParty);
    let interaction = find(PolicyKind::InteractionBased);
    let visited = find(PolicyKind::VisitedBased);
    let accept = find(PolicyKind::AcceptAll);
    let first_party: Vec<Vec<&LogEntry>> = reports.iter().map(|r| r.first_party_log().collect()).collect();
    DominanceCheck {
        block_third_party_cookie_free: block.map(|r| r.cookie_bearing_pairs.is_empty()),
        block_third_party_non_consented_empty: block.map(|r| r.non_consented_pairs.is_empty()),
        interaction_non_consented_empty: interaction.map(|r| r.non_consented_pairs.is_empty()),
        visited_within_accept_all: visited
            .zip(accept)
            .map(|(v, a)| v.cookie_bearing_pairs.is_subset(&a.cookie_bearing_pairs)),
        first_party_decisions_equal: first_party.windows(2).all(|w| {
            w[0].len() == w[1].len()
                && w[0].iter().zip(&w[1]).all(|(a, b)| {
                    LogEntry { cookie_header: None, ..(*a).clone() } == LogEntry { cookie_header: None, ..(*b).clone() }
                })
        }),
        first_party_cookie_headers_equal: first_party.windows(2).all(|w| w[0] == w[1]),
    }
}

impl Engine {
    fn party_of_host(&self, host: &str, site: &RegistrableDomain) -> PartyClass {
        crate::party::classify(host, site, self.rules())
    }
}
