//! Cookie policies and the two-click activation state machine.
//!
//! [`decide_request`] is a pure function of the request context, the
//! [`ActivationTable`] and the selected [`PolicyKind`]. [`Engine`] bundles
//! the table with a [`CookieJar`] so that activation releases quarantined
//! cookies and `Set-Cookie` headers are routed by the decision.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cookie::{Cookie, CookieJar, CookieParseError, Placement, StoreError, UnixTime};
use crate::party::{classify, registrable_domain, PartyClass, RegistrableDomain, SitePair, SuffixRuleSet};
use crate::url::Url;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Browser default: every cookie is sent and accepted.
    AcceptAll,
    /// Never send or accept third-party cookies.
    #[serde(rename = "block-third")]
    BlockThirdParty,
    /// Third-party cookies only for sites visited as a first party.
    #[serde(rename = "visited")]
    VisitedBased,
    /// Third-party cookies only after the user interacts with the content.
    #[serde(rename = "interaction")]
    InteractionBased,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] =
        [Self::AcceptAll, Self::BlockThirdParty, Self::VisitedBased, Self::InteractionBased];

    /// The command-line name.
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AcceptAll => "accept-all",
            Self::BlockThirdParty => "block-third",
            Self::VisitedBased => "visited",
            Self::InteractionBased => "interaction",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownPolicy(pub String);

impl fmt::Display for UnknownPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown policy {:?} (expected accept-all, block-third, visited or interaction)", self.0)
    }
}

impl core::error::Error for UnknownPolicy {}

impl FromStr for PolicyKind {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|p| p.as_str().eq_ignore_ascii_case(s)).ok_or_else(|| UnknownPolicy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameId(pub String);

impl From<&str> for FrameId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Position of a frame in the page's frame tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameContext {
    pub frame_id: FrameId,
    pub parent_frame_id: Option<FrameId>,
    /// 0 for the top-level document.
    pub depth: u32,
    /// Host the frame's document was loaded from.
    pub frame_origin: String,
    pub top_level_site: RegistrableDomain,
}

impl FrameContext {
    pub fn top_level(frame_id: FrameId, origin: &str, site: RegistrableDomain) -> Self {
        Self { frame_id, parent_frame_id: None, depth: 0, frame_origin: origin.to_string(), top_level_site: site }
    }

    /// A frame nested directly inside `parent`.
    pub fn child_of(parent: &FrameContext, frame_id: FrameId, origin: &str) -> Self {
        Self {
            frame_id,
            parent_frame_id: Some(parent.frame_id.clone()),
            depth: parent.depth + 1,
            frame_origin: origin.to_string(),
            top_level_site: parent.top_level_site.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    Document,
    Iframe,
    Subresource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestContext {
    pub method: String,
    pub url: Url,
    pub destination: Destination,
    pub frame: FrameContext,
    /// Top-level site.
    pub site: RegistrableDomain,
    interaction_initiated: bool,
}

impl RequestContext {
    pub fn new(method: &str, url: Url, destination: Destination, frame: FrameContext) -> Self {
        let site = frame.top_level_site.clone();
        Self { method: method.to_string(), url, destination, frame, site, interaction_initiated: false }
    }

    /// The reload of `frame`'s document issued after a [`ClickAction::ReloadWithCookies`]
    /// directive or an explicit activation. Only trusted callers executing
    /// such a directive construct these.
    pub fn reload(url: Url, frame: FrameContext) -> Self {
        let mut ctx = Self::new("GET", url, Destination::Iframe, frame);
        ctx.interaction_initiated = true;
        ctx
    }

    pub fn is_interaction_initiated(&self) -> bool {
        self.interaction_initiated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CookieAction {
    Attach,
    Strip,
    PassUnchanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetCookieAction {
    Accept,
    Quarantine,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestDecision {
    pub cookie_action: CookieAction,
    pub set_cookie_action: SetCookieAction,
}

impl RequestDecision {
    const fn new(cookie_action: CookieAction, set_cookie_action: SetCookieAction) -> Self {
        Self { cookie_action, set_cookie_action }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    WidgetCandidate,
    AdvertisementCandidate,
    NonInteractive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClickAction {
    ReloadWithCookies(FrameId),
    PassThrough,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActivationError {
    /// The "third party" is the site itself.
    SameParty(RegistrableDomain),
}

impl fmt::Display for ActivationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SameParty(d) => write!(f, "{d} is first party on itself; nothing to activate"),
        }
    }
}

impl core::error::Error for ActivationError {}

/// Consent state: activated pairs (session lifetime), whitelisted pairs
/// (persisted by the embedder) and sites visited as a first party.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActivationTable {
    activated: BTreeSet<SitePair>,
    whitelist: BTreeSet<SitePair>,
    visited_first_party: BTreeSet<RegistrableDomain>,
}

fn checked_pair(third_party: RegistrableDomain, site: RegistrableDomain) -> Result<SitePair, ActivationError> {
    if third_party == site {
        return Err(ActivationError::SameParty(site));
    }
    Ok(SitePair::new(third_party, site))
}

impl ActivationTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns true when the pair was newly activated.
    pub fn activate(
        &mut self,
        third_party: RegistrableDomain,
        site: RegistrableDomain,
    ) -> Result<bool, ActivationError> {
        Ok(self.activated.insert(checked_pair(third_party, site)?))
    }

    pub fn whitelist_add(
        &mut self,
        third_party: RegistrableDomain,
        site: RegistrableDomain,
    ) -> Result<bool, ActivationError> {
        Ok(self.whitelist.insert(checked_pair(third_party, site)?))
    }

    pub fn whitelist_remove(
        &mut self,
        third_party: RegistrableDomain,
        site: RegistrableDomain,
    ) -> Result<bool, ActivationError> {
        Ok(self.whitelist.remove(&checked_pair(third_party, site)?))
    }

    pub fn record_first_party_visit(&mut self, site: RegistrableDomain) {
        self.visited_first_party.insert(site);
    }

    pub fn is_activated(&self, pair: &SitePair) -> bool {
        self.activated.contains(pair)
    }

    pub fn is_whitelisted(&self, pair: &SitePair) -> bool {
        self.whitelist.contains(pair)
    }

    /// Activated or whitelisted.
    pub fn has_consent(&self, pair: &SitePair) -> bool {
        self.is_activated(pair) || self.is_whitelisted(pair)
    }

    pub fn was_visited(&self, site: &RegistrableDomain) -> bool {
        self.visited_first_party.contains(site)
    }

    pub fn activated(&self) -> impl Iterator<Item = &SitePair> {
        self.activated.iter()
    }

    pub fn whitelist(&self) -> impl Iterator<Item = &SitePair> {
        self.whitelist.iter()
    }

    pub fn visited_first_party(&self) -> impl Iterator<Item = &RegistrableDomain> {
        self.visited_first_party.iter()
    }

    /// Forgets session activations and visits; the whitelist stays.
    pub fn end_session(&mut self) {
        self.activated.clear();
        self.visited_first_party.clear();
    }
}

/// Widget-versus-advertisement heuristic. Social widgets sit in a single
/// third-party iframe; ads sit in nested iframes from the auction chain.
pub fn classify_frame(frame: &FrameContext, rules: &SuffixRuleSet) -> FrameKind {
    if frame.depth == 0 || classify(&frame.frame_origin, &frame.top_level_site, rules) == PartyClass::FirstParty {
        FrameKind::NonInteractive
    } else if frame.depth == 1 {
        FrameKind::WidgetCandidate
    } else {
        FrameKind::AdvertisementCandidate
    }
}

pub fn decide_request(
    ctx: &RequestContext,
    state: &ActivationTable,
    policy: PolicyKind,
    rules: &SuffixRuleSet,
) -> RequestDecision {
    use CookieAction::*;
    use SetCookieAction::*;

    let third_party = registrable_domain(ctx.url.host(), rules);
    if third_party == ctx.site {
        return RequestDecision::new(PassUnchanged, Accept);
    }
    match policy {
        PolicyKind::AcceptAll => RequestDecision::new(Attach, Accept),
        PolicyKind::BlockThirdParty => RequestDecision::new(Strip, Drop),
        PolicyKind::VisitedBased => {
            if state.was_visited(&third_party) {
                RequestDecision::new(Attach, Accept)
            } else {
                RequestDecision::new(Strip, Drop)
            }
        }
        PolicyKind::InteractionBased => {
            let pair = SitePair::new(third_party, ctx.site.clone());
            if ctx.interaction_initiated || state.has_consent(&pair) {
                RequestDecision::new(Attach, Accept)
            } else {
                RequestDecision::new(Strip, Quarantine)
            }
        }
    }
}

/// Two-click control. The first click on a blocked widget activates its
/// (third party, site) pair and asks for a reload with cookies; any later
/// click, and every click on an ad or first-party frame, passes through.
pub fn on_click(frame: &FrameContext, state: &mut ActivationTable, rules: &SuffixRuleSet) -> ClickAction {
    if classify_frame(frame, rules) != FrameKind::WidgetCandidate {
        return ClickAction::PassThrough;
    }
    let pair = SitePair::new(registrable_domain(&frame.frame_origin, rules), frame.top_level_site.clone());
    if state.has_consent(&pair) {
        return ClickAction::PassThrough;
    }
    state.activated.insert(pair);
    ClickAction::ReloadWithCookies(frame.frame_id.clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SetCookieError {
    Parse(CookieParseError),
    Store(StoreError),
}

impl fmt::Display for SetCookieError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Parse(e) => e.fmt(f),
            Self::Store(e) => e.fmt(f),
        }
    }
}

impl core::error::Error for SetCookieError {}

/// Policy state for one browsing session: the activation table, the cookie
/// jar and the suffix rules, under one selected policy.
#[derive(Debug, Clone)]
pub struct Engine {
    policy: PolicyKind,
    rules: SuffixRuleSet,
    table: ActivationTable,
    jar: CookieJar,
    refuse_new_third_party_cookies: bool,
}

impl Engine {
    pub fn new(policy: PolicyKind, rules: SuffixRuleSet) -> Self {
        Self {
            policy,
            rules,
            table: ActivationTable::new(),
            jar: CookieJar::new(),
            refuse_new_third_party_cookies: false,
        }
    }

    /// Drop third-party `Set-Cookie` headers instead of quarantining them.
    pub fn with_refuse_new_third_party_cookies(mut self, refuse: bool) -> Self {
        self.refuse_new_third_party_cookies = refuse;
        self
    }

    pub fn with_jar(mut self, jar: CookieJar) -> Self {
        self.jar = jar;
        self
    }

    pub fn policy(&self) -> PolicyKind {
        self.policy
    }

    pub fn rules(&self) -> &SuffixRuleSet {
        &self.rules
    }

    pub fn table(&self) -> &ActivationTable {
        &self.table
    }

    pub fn jar(&self) -> &CookieJar {
        &self.jar
    }

    pub fn jar_mut(&mut self) -> &mut CookieJar {
        &mut self.jar
    }

    pub fn registrable_domain(&self, host: &str) -> RegistrableDomain {
        registrable_domain(host, &self.rules)
    }

    pub fn party_of(&self, ctx: &RequestContext) -> PartyClass {
        classify(ctx.url.host(), &ctx.site, &self.rules)
    }

    pub fn decide(&self, ctx: &RequestContext) -> RequestDecision {
        let mut decision = decide_request(ctx, &self.table, self.policy, &self.rules);
        if self.refuse_new_third_party_cookies && decision.set_cookie_action == SetCookieAction::Quarantine {
            decision.set_cookie_action = SetCookieAction::Drop;
        }
        decision
    }

    /// Whether a cookie-bearing request to this context's third party would
    /// have the user's consent (activation, whitelist or reload directive).
    pub fn has_consent(&self, ctx: &RequestContext) -> bool {
        ctx.interaction_initiated
            || self.table.has_consent(&SitePair::new(self.registrable_domain(ctx.url.host()), ctx.site.clone()))
    }

    /// The `Cookie` header the jar would supply for `ctx` under `decision`.
    pub fn cookie_header(&self, ctx: &RequestContext, decision: RequestDecision, now: UnixTime) -> Option<String> {
        match decision.cookie_action {
            CookieAction::Strip => None,
            CookieAction::Attach | CookieAction::PassUnchanged => self.jar.cookies_for(&ctx.url, now),
        }
    }

    /// Routes response `Set-Cookie` headers per `decision`.
    pub fn apply_set_cookies<'a>(
        &mut self,
        ctx: &RequestContext,
        decision: RequestDecision,
        headers: impl IntoIterator<Item = &'a str>,
        now: UnixTime,
    ) -> Vec<Result<Placement, SetCookieError>> {
        let party = self.party_of(ctx);
        headers
            .into_iter()
            .map(|raw| {
                let cookie = Cookie::parse(raw, &ctx.url, now).map_err(SetCookieError::Parse)?;
                self.jar
                    .store(cookie, ctx, party, decision.set_cookie_action, &self.rules)
                    .map_err(SetCookieError::Store)
            })
            .collect()
    }

    /// Top-level document loads count as first-party visits.
    pub fn note_request(&mut self, ctx: &RequestContext) {
        if ctx.destination == Destination::Document && ctx.frame.depth == 0 {
            self.table.record_first_party_visit(self.registrable_domain(ctx.url.host()));
        }
    }

    pub fn record_first_party_visit(&mut self, site: RegistrableDomain) {
        self.table.record_first_party_visit(site);
    }

    pub fn classify_frame(&self, frame: &FrameContext) -> FrameKind {
        classify_frame(frame, &self.rules)
    }

    /// Click handling. Only the interaction-based policy has a two-click
    /// control; under the other policies clicks are the widget's own.
    /// A reload directive releases the pair's quarantined cookies first.
    pub fn click(&mut self, frame: &FrameContext) -> ClickAction {
        if self.policy != PolicyKind::InteractionBased {
            return ClickAction::PassThrough;
        }
        let action = on_click(frame, &mut self.table, &self.rules);
        if let ClickAction::ReloadWithCookies(_) = action {
            let pair = SitePair::new(self.registrable_domain(&frame.frame_origin), frame.top_level_site.clone());
            self.jar.release_quarantine(&pair);
        }
        action
    }

    /// Activates a pair and releases its quarantine. Returns the number of
    /// cookies released.
    pub fn activate(
        &mut self,
        third_party: RegistrableDomain,
        site: RegistrableDomain,
    ) -> Result<usize, ActivationError> {
        self.table.activate(third_party.clone(), site.clone())?;
        Ok(self.jar.release_quarantine(&SitePair::new(third_party, site)))
    }

    /// Whitelisting is standing consent, so quarantined cookies for the
    /// pair are released as well.
    pub fn whitelist_add(
        &mut self,
        third_party: RegistrableDomain,
        site: RegistrableDomain,
    ) -> Result<bool, ActivationError> {
        let added = self.table.whitelist_add(third_party.clone(), site.clone())?;
        self.jar.release_quarantine(&SitePair::new(third_party, site));
        Ok(added)
    }

    pub fn whitelist_remove(
        &mut self,
        third_party: RegistrableDomain,
        site: RegistrableDomain,
    ) -> Result<bool, ActivationError> {
        self.table.whitelist_remove(third_party, site)
    }
}
