//! Frame and top-level site attribution for proxied requests.
//!
//! A proxy sees no DOM, so each request is placed in a frame tree rebuilt
//! from request headers:
//!
//! 1. `Sec-Fetch-Dest` gives the destination when present.
//! 2. Otherwise a request without `Referer` is a top-level document, and one
//!    with `Referer` that accepts `text/html` is a frame document.
//! 3. The `Referer` is looked up among documents this client loaded earlier;
//!    a hit supplies the parent frame and the top-level site.
//! 4. With no known parent the request host is its own top-level site.

use std::collections::{HashMap, VecDeque};
use std::net::IpAddr;

use clickgate_core::policy::{Destination, FrameContext, FrameId, RequestContext};
use clickgate_core::{RegistrableDomain, Url};
use hyper::header::{HeaderMap, ACCEPT, REFERER};

const MAX_FRAMES: usize = 4096;

#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub context: FrameContext,
    pub url: Url,
    pub client: IpAddr,
}

#[derive(Debug, Default)]
pub struct PageRegistry {
    frames: HashMap<FrameId, FrameRecord>,
    by_url: HashMap<(IpAddr, String), FrameId>,
    order: VecDeque<FrameId>,
    next_id: u64,
}

fn destination(headers: &HeaderMap) -> Destination {
    let header = |name: &str| headers.get(name).and_then(|v| v.to_str().ok()).map(str::to_ascii_lowercase);
    if let Some(dest) = header("sec-fetch-dest") {
        return match dest.as_str() {
            "document" => Destination::Document,
            "iframe" | "frame" => Destination::Iframe,
            _ => Destination::Subresource,
        };
    }
    if !headers.contains_key(REFERER) {
        return Destination::Document;
    }
    let accepts_html = headers.get_all(ACCEPT).iter().filter_map(|v| v.to_str().ok()).any(|v| v.contains("text/html"));
    if accepts_html {
        Destination::Iframe
    } else {
        Destination::Subresource
    }
}

/// Referers carry no fragment; the key is the URL as serialized.
fn url_key(url: &Url) -> String {
    url.to_string()
}

impl PageRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frame(&self, id: &FrameId) -> Option<&FrameRecord> {
        self.frames.get(id)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn parent(&self, client: IpAddr, headers: &HeaderMap) -> Option<&FrameRecord> {
        let referer = headers.get(REFERER)?.to_str().ok()?;
        let referer = Url::parse(referer).ok()?;
        let id = self.by_url.get(&(client, url_key(&referer)))?;
        self.frames.get(id)
    }

    fn fresh_id(&mut self) -> FrameId {
        self.next_id += 1;
        FrameId(format!("f{}", self.next_id))
    }

    fn register(&mut self, context: FrameContext, url: &Url, client: IpAddr) {
        let id = context.frame_id.clone();
        self.by_url.insert((client, url_key(url)), id.clone());
        self.frames.insert(id.clone(), FrameRecord { context, url: url.clone(), client });
        self.order.push_back(id);
        while self.order.len() > MAX_FRAMES {
            let Some(old) = self.order.pop_front() else { break };
            if let Some(rec) = self.frames.remove(&old) {
                let key = (rec.client, url_key(&rec.url));
                if self.by_url.get(&key) == Some(&old) {
                    self.by_url.remove(&key);
                }
            }
        }
    }

    /// Builds the request context and records new documents as frames.
    pub fn attribute(
        &mut self,
        client: IpAddr,
        method: &str,
        url: &Url,
        headers: &HeaderMap,
        site_of: impl Fn(&str) -> RegistrableDomain,
    ) -> RequestContext {
        let dest = destination(headers);
        let parent = self.parent(client, headers).map(|p| p.context.clone());
        let host = url.host();
        match (dest, parent) {
            (Destination::Subresource, Some(parent)) => RequestContext::new(method, url.clone(), dest, parent),
            (Destination::Subresource, None) => {
                let frame = FrameContext::top_level(FrameId("-".into()), host, site_of(host));
                RequestContext::new(method, url.clone(), dest, frame)
            }
            (Destination::Iframe, Some(parent)) => {
                let frame = FrameContext::child_of(&parent, self.fresh_id(), host);
                self.register(frame.clone(), url, client);
                RequestContext::new(method, url.clone(), dest, frame)
            }
            (Destination::Document | Destination::Iframe, _) => {
                let frame = FrameContext::top_level(self.fresh_id(), host, site_of(host));
                self.register(frame.clone(), url, client);
                RequestContext::new(method, url.clone(), Destination::Document, frame)
            }
        }
    }
}
