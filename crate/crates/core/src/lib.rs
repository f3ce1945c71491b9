//! Interaction-gated third-party cookie policy.
//!
//! Third-party content is fetched without its cookies until the user
//! interacts with it. The first click on a third-party widget activates the
//! (third party, site) pair and reloads the frame with cookies; the second
//! click is the widget's own action. Content nobody can click, such as
//! tracking pixels, never receives cookies.
//!
//! This crate is `no_std` (with `alloc`) and contains no IO:
//!
//! - [`party`]: public-suffix rules, registrable domains, first/third party.
//! - [`url`]: the small absolute-URL parser the rest of the crate needs.
//! - [`cookie`]: RFC 6265 cookie parsing and a jar with a quarantine store.
//! - [`policy`]: the four cookie policies, the frame heuristic and the
//!   two-click state machine.
//! - [`replay`]: session traces and the deterministic policy simulator.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod cookie;
pub mod party;
pub mod policy;
pub mod replay;
pub mod url;

pub use cookie::{Cookie, CookieJar, Placement, QuarantineKey, UnixTime};
pub use party::{PartyClass, RegistrableDomain, SitePair, SuffixRuleSet};
pub use policy::{
    ActivationTable, ClickAction, CookieAction, Destination, Engine, FrameContext, FrameId, FrameKind, PolicyKind,
    RequestContext, RequestDecision, SetCookieAction,
};
pub use replay::{ExposureReport, SessionTrace};
pub use url::Url;
