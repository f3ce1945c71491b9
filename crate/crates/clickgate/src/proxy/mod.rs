//! The enforcing forward proxy and its control API.
//!
//! Every proxied request is placed in a frame tree (see [`attribution`]),
//! decided by the policy engine and rewritten: stripped requests lose their
//! `Cookie` header, attached ones get the jar's, and first-party requests are
//! forwarded untouched. Response `Set-Cookie` headers go to the jar, the
//! quarantine or nowhere. CONNECT tunnels are opaque unless TLS interception
//! is compiled in and enabled.

pub mod attribution;
mod control;
#[cfg(feature = "tls-intercept")]
mod tls;
pub mod upstream;

use std::collections::{BTreeMap, BTreeSet};
use std::convert::Infallible;
use std::io;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use bytes::Bytes;
use clickgate_core::cookie::{JarSnapshot, UnixTime};
use clickgate_core::party::RuleParseError;
use clickgate_core::policy::{ActivationError, Destination, FrameId, FrameKind, RequestContext};
use clickgate_core::replay::{looks_like_ad, ReportBuilder};
use clickgate_core::{
    CookieAction, Engine, ExposureReport, PartyClass, RegistrableDomain, RequestDecision, SetCookieAction, SitePair,
    SuffixRuleSet, Url,
};
use http_body_util::{BodyExt, Empty, Full};
use hyper::body::Incoming;
use hyper::header::{HeaderMap, HeaderName, HeaderValue, CONNECTION, COOKIE, HOST, SET_COOKIE};
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Method, Request, Response, StatusCode, Uri, Version};
use hyper_util::rt::TokioIo;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::config::{ConfigError, ProxyConfig};
use crate::persist::{self, PersistError};
use attribution::PageRegistry;
use upstream::{Body, Upstream, UpstreamError};

#[derive(Debug, thiserror::Error)]
pub enum ProxyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read suffix list {}: {source}", path.display())]
    SuffixList { path: PathBuf, source: io::Error },
    #[error("invalid suffix list {}: {source}", path.display())]
    SuffixRules { path: PathBuf, source: RuleParseError },
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error("tls_intercept is set but this build lacks the tls-intercept feature")]
    TlsUnavailable,
    #[error("TLS interception setup failed: {0}")]
    Tls(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ReloadError {
    #[error("unknown frame {0}")]
    UnknownFrame(FrameId),
    #[error("no activation or whitelist entry for {0}")]
    NotConsented(SitePair),
    #[error(transparent)]
    Upstream(#[from] UpstreamError),
}

/// What a reload sent and got back.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ReloadOutcome {
    pub frame_id: FrameId,
    pub url: String,
    pub status: u16,
    pub cookie_header: Option<String>,
    pub released: usize,
}

#[derive(Debug, Default, Clone)]
pub(crate) struct ThirdPartyStats {
    pub frame_kind: Option<FrameKind>,
    pub request_count: u64,
    pub frames: BTreeSet<FrameId>,
}

pub(crate) struct State {
    pub engine: Engine,
    pub pages: PageRegistry,
    pub report: ReportBuilder,
    pub sites: BTreeMap<RegistrableDomain, BTreeMap<RegistrableDomain, ThirdPartyStats>>,
    seq: u64,
}

/// One decided request, ready to be forwarded.
struct Admitted {
    ctx: RequestContext,
    decision: RequestDecision,
    jar_header: Option<String>,
}

impl State {
    fn new(engine: Engine) -> Self {
        let report = ReportBuilder::new(engine.policy());
        Self { engine, pages: PageRegistry::new(), report, sites: BTreeMap::new(), seq: 0 }
    }

    /// Decides `ctx`, records it and returns the jar's header for it.
    /// `client_cookie` is what a pass-through request would carry.
    fn admit(&mut self, ctx: RequestContext, client_cookie: Option<String>, now: UnixTime) -> Admitted {
        self.engine.note_request(&ctx);
        let started = Instant::now();
        let decision = self.engine.decide(&ctx);
        self.report.record_latency(started.elapsed().as_nanos() as u64);

        let jar_header = self.engine.cookie_header(&ctx, decision, now);
        let sent = match decision.cookie_action {
            CookieAction::Attach => jar_header.clone(),
            CookieAction::Strip => None,
            CookieAction::PassUnchanged => client_cookie,
        };
        let party = self.engine.party_of(&ctx);
        let third_party = self.engine.registrable_domain(ctx.url.host());
        let consented = self.engine.has_consent(&ctx);
        self.seq += 1;
        self.report.record(self.seq, &ctx, party, decision, sent, third_party.clone(), consented);

        let site_entry = self.sites.entry(ctx.site.clone()).or_default();
        if party == PartyClass::ThirdParty {
            let stats = site_entry.entry(third_party).or_default();
            stats.request_count += 1;
            if ctx.destination == Destination::Iframe && ctx.frame.depth > 0 {
                let kind = self.engine.classify_frame(&ctx.frame);
                if stats.frame_kind.is_none_or(|k| kind < k) {
                    stats.frame_kind = Some(kind);
                }
                stats.frames.insert(ctx.frame.frame_id.clone());
                if ctx.frame.depth == 1 && !ctx.is_interaction_initiated() && looks_like_ad(&ctx.url) {
                    self.report.note_single_iframe_ad();
                }
            }
        }
        Admitted { ctx, decision, jar_header }
    }

    fn store_set_cookies(&mut self, admitted: &Admitted, headers: &HeaderMap, now: UnixTime) {
        let raw: Vec<&str> = headers.get_all(SET_COOKIE).iter().filter_map(|v| v.to_str().ok()).collect();
        if raw.is_empty() {
            return;
        }
        for result in self.engine.apply_set_cookies(&admitted.ctx, admitted.decision, raw, now) {
            if let Err(e) = result {
                log::debug!("ignoring Set-Cookie from {}: {e}", admitted.ctx.url);
            }
        }
    }

    pub fn whitelist(&self) -> Vec<SitePair> {
        self.engine.table().whitelist().cloned().collect()
    }
}

pub(crate) struct Inner {
    state: Mutex<State>,
    upstream: Upstream,
    whitelist_path: Option<PathBuf>,
    jar_path: Option<PathBuf>,
    #[cfg(feature = "tls-intercept")]
    interceptor: Option<tls::Interceptor>,
}

impl Inner {
    pub fn lock(&self) -> MutexGuard<'_, State> {
        // A panic while holding the lock leaves consistent data: every
        // mutation is a single engine call.
        self.state.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    pub fn save_whitelist(&self) -> Result<(), PersistError> {
        let Some(path) = &self.whitelist_path else { return Ok(()) };
        let pairs = self.lock().whitelist();
        persist::save_whitelist(path, &pairs)
    }

    fn save_jar(&self) -> Result<(), PersistError> {
        let Some(path) = &self.jar_path else { return Ok(()) };
        let snapshot = self.lock().engine.jar().clone();
        persist::save_jar(path, &snapshot)
    }

    pub async fn execute_reload(&self, frame_id: &FrameId) -> Result<ReloadOutcome, ReloadError> {
        let now = unix_now();
        let (admitted, released) = {
            let mut state = self.lock();
            let record =
                state.pages.frame(frame_id).cloned().ok_or_else(|| ReloadError::UnknownFrame(frame_id.clone()))?;
            let ctx = RequestContext::reload(record.url, record.context);
            let mut released = 0;
            if state.engine.party_of(&ctx) == PartyClass::ThirdParty {
                let pair = SitePair::new(state.engine.registrable_domain(ctx.url.host()), ctx.site.clone());
                if !state.engine.table().has_consent(&pair) {
                    return Err(ReloadError::NotConsented(pair));
                }
                released = state.engine.jar_mut().release_quarantine(&pair);
            }
            (state.admit(ctx, None, now), released)
        };

        let url = &admitted.ctx.url;
        let mut req = Request::builder()
            .method(Method::GET)
            .uri(url.path_and_query())
            .header(HOST, host_header(url))
            .header("accept", "text/html,*/*")
            .header("sec-fetch-dest", "iframe");
        if let Some(cookie) = &admitted.jar_header {
            req = req.header(COOKIE, cookie.as_str());
        }
        let req = req.body(empty_body()).expect("reload request is well-formed");
        let response = self.upstream.send(url, req).await?;
        let status = response.status().as_u16();
        let (parts, body) = response.into_parts();
        self.lock().store_set_cookies(&admitted, &parts.headers, unix_now());
        let _ = body.collect().await;
        log::info!("reloaded frame {frame_id} ({url}) with status {status}");
        Ok(ReloadOutcome {
            frame_id: frame_id.clone(),
            url: url.to_string(),
            status,
            cookie_header: admitted.jar_header,
            released,
        })
    }
}

fn unix_now() -> UnixTime {
    UnixTime(SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs() as i64))
}

fn host_header(url: &Url) -> String {
    let host = url.host();
    let host = if host.contains(':') { format!("[{host}]") } else { host.to_string() };
    match url.port() {
        Some(port) => format!("{host}:{port}"),
        None => host,
    }
}

fn empty_body() -> Body {
    Empty::new().map_err(|never| match never {}).boxed()
}

fn text_response(status: StatusCode, text: impl Into<String>) -> Response<Body> {
    let mut resp = Response::new(Full::new(Bytes::from(text.into())).map_err(|never| match never {}).boxed());
    *resp.status_mut() = status;
    resp.headers_mut().insert("content-type", HeaderValue::from_static("text/plain; charset=utf-8"));
    resp
}

const HOP_BY_HOP: [&str; 9] = [
    "connection",
    "proxy-connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

fn strip_hop_by_hop(headers: &mut HeaderMap) {
    let listed: Vec<HeaderName> = headers
        .get_all(CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .filter_map(|token| HeaderName::from_bytes(token.trim().as_bytes()).ok())
        .collect();
    for name in listed {
        headers.remove(name);
    }
    for name in HOP_BY_HOP {
        headers.remove(name);
    }
}

fn joined_cookie(headers: &HeaderMap) -> Option<String> {
    let values: Vec<&str> = headers.get_all(COOKIE).iter().filter_map(|v| v.to_str().ok()).collect();
    (!values.is_empty()).then(|| values.join("; "))
}

/// Forwards one request whose target is `url`. `parts.uri` may be in any
/// form; it is rewritten to origin form.
async fn forward(
    inner: &Inner,
    client: IpAddr,
    url: Url,
    mut parts: hyper::http::request::Parts,
    body: Body,
) -> Response<Body> {
    let now = unix_now();
    let client_cookie = joined_cookie(&parts.headers);
    strip_hop_by_hop(&mut parts.headers);
    let admitted = {
        let mut state = inner.lock();
        let State { pages, engine, .. } = &mut *state;
        let ctx = pages
            .attribute(client, parts.method.as_str(), &url, &parts.headers, |host| engine.registrable_domain(host));
        state.admit(ctx, client_cookie, now)
    };

    match admitted.decision.cookie_action {
        CookieAction::PassUnchanged => {}
        CookieAction::Strip => {
            parts.headers.remove(COOKIE);
        }
        CookieAction::Attach => {
            parts.headers.remove(COOKIE);
            if let Some(value) = admitted.jar_header.as_deref().and_then(|v| HeaderValue::from_str(v).ok()) {
                parts.headers.insert(COOKIE, value);
            }
        }
    }
    if !parts.headers.contains_key(HOST) {
        if let Ok(value) = HeaderValue::from_str(&host_header(&url)) {
            parts.headers.insert(HOST, value);
        }
    }
    parts.uri = match url.path_and_query().parse::<Uri>() {
        Ok(uri) => uri,
        Err(_) => return text_response(StatusCode::BAD_REQUEST, "unparseable request target\n"),
    };
    parts.version = Version::HTTP_11;

    let response = match inner.upstream.send(&url, Request::from_parts(parts, body)).await {
        Ok(r) => r,
        Err(e) => {
            log::warn!("{e}");
            return text_response(StatusCode::BAD_GATEWAY, format!("{e}\n"));
        }
    };
    let (mut rparts, rbody) = response.into_parts();
    inner.lock().store_set_cookies(&admitted, &rparts.headers, unix_now());
    if admitted.decision.set_cookie_action != SetCookieAction::Accept {
        rparts.headers.remove(SET_COOKIE);
    }
    strip_hop_by_hop(&mut rparts.headers);
    Response::from_parts(rparts, rbody.boxed())
}

fn absolute_url(uri: &Uri) -> Option<Url> {
    uri.scheme()?;
    uri.authority()?;
    Url::parse(&uri.to_string()).ok()
}

async fn handle(inner: Arc<Inner>, client: SocketAddr, req: Request<Incoming>) -> Result<Response<Body>, Infallible> {
    if req.method() == Method::CONNECT {
        return Ok(tunnel(inner, client, req).await);
    }
    let Some(url) = absolute_url(req.uri()) else {
        return Ok(text_response(StatusCode::BAD_REQUEST, "forward proxy requests need an absolute http URL\n"));
    };
    if url.is_secure() {
        return Ok(text_response(StatusCode::BAD_REQUEST, "use CONNECT for https\n"));
    }
    let (parts, body) = req.into_parts();
    Ok(forward(&inner, client.ip(), url, parts, body.boxed()).await)
}

fn connect_target(uri: &Uri) -> Option<(String, u16)> {
    let authority = uri.authority()?;
    Some((authority.host().to_string(), authority.port_u16().unwrap_or(443)))
}

#[cfg_attr(not(feature = "tls-intercept"), allow(unused_variables))]
async fn tunnel(inner: Arc<Inner>, client: SocketAddr, req: Request<Incoming>) -> Response<Body> {
    let Some((host, port)) = connect_target(req.uri()) else {
        return text_response(StatusCode::BAD_REQUEST, "CONNECT needs host:port\n");
    };

    #[cfg(feature = "tls-intercept")]
    if inner.interceptor.is_some() {
        tokio::spawn(async move {
            match hyper::upgrade::on(req).await {
                Ok(upgraded) => tls::intercept(inner, client, upgraded, host, port).await,
                Err(e) => log::debug!("CONNECT upgrade failed: {e}"),
            }
        });
        return Response::new(empty_body());
    }

    let mut server: TcpStream = match inner.upstream.connect(&host, port).await {
        Ok(s) => s,
        Err(e) => return text_response(StatusCode::BAD_GATEWAY, format!("{e}\n")),
    };
    tokio::spawn(async move {
        match hyper::upgrade::on(req).await {
            Ok(upgraded) => {
                let mut client = TokioIo::new(upgraded);
                if let Err(e) = tokio::io::copy_bidirectional(&mut client, &mut server).await {
                    log::debug!("tunnel to {host}:{port} closed: {e}");
                }
            }
            Err(e) => log::debug!("CONNECT upgrade failed: {e}"),
        }
    });
    Response::new(empty_body())
}

async fn serve_connection<I>(io: I, peer: SocketAddr, inner: Arc<Inner>, mut shutdown: watch::Receiver<bool>)
where
    I: tokio::io::AsyncRead + tokio::io::AsyncWrite + Unpin + Send + 'static,
{
    let service = service_fn(move |req| handle(inner.clone(), peer, req));
    let conn =
        http1::Builder::new().preserve_header_case(true).serve_connection(TokioIo::new(io), service).with_upgrades();
    tokio::pin!(conn);
    tokio::select! {
        res = conn.as_mut() => {
            if let Err(e) = res {
                log::debug!("client connection from {peer}: {e}");
            }
        }
        _ = shutdown.changed() => {
            conn.as_mut().graceful_shutdown();
            let _ = conn.await;
        }
    }
}

async fn accept_loop(listener: TcpListener, inner: Arc<Inner>, mut shutdown: watch::Receiver<bool>) {
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let _ = stream.set_nodelay(true);
                    tokio::spawn(serve_connection(stream, peer, inner.clone(), shutdown.clone()));
                }
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    tokio::time::sleep(Duration::from_millis(20)).await;
                }
            },
            _ = shutdown.changed() => break,
        }
    }
}

fn load_rules(path: Option<&Path>) -> Result<SuffixRuleSet, ProxyError> {
    let Some(path) = path else { return Ok(SuffixRuleSet::bundled()) };
    let text =
        std::fs::read_to_string(path).map_err(|source| ProxyError::SuffixList { path: path.to_path_buf(), source })?;
    SuffixRuleSet::parse(&text).map_err(|source| ProxyError::SuffixRules { path: path.to_path_buf(), source })
}

async fn bind(addr: SocketAddr) -> Result<TcpListener, ProxyError> {
    TcpListener::bind(addr).await.map_err(|source| ProxyError::Bind { addr, source })
}

/// A running proxy.
pub struct ProxyHandle {
    proxy_addr: SocketAddr,
    control_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
    inner: Arc<Inner>,
}

impl ProxyHandle {
    pub fn proxy_addr(&self) -> SocketAddr {
        self.proxy_addr
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    pub fn report(&self) -> ExposureReport {
        self.inner.lock().report.snapshot()
    }

    pub fn jar_snapshot(&self) -> JarSnapshot {
        self.inner.lock().engine.jar().snapshot()
    }

    pub fn whitelist(&self) -> Vec<SitePair> {
        self.inner.lock().whitelist()
    }

    /// Third party and site are canonicalized first.
    pub fn activate(&self, third_party: &str, site: &str) -> Result<usize, ActivationError> {
        let mut state = self.inner.lock();
        let tp = state.engine.registrable_domain(third_party);
        let site = state.engine.registrable_domain(site);
        state.engine.activate(tp, site)
    }

    pub async fn execute_reload(&self, frame_id: &FrameId) -> Result<ReloadOutcome, ReloadError> {
        self.inner.execute_reload(frame_id).await
    }

    /// Writes the whitelist and jar files.
    pub fn flush(&self) -> Result<(), ProxyError> {
        self.inner.save_whitelist()?;
        self.inner.save_jar()?;
        Ok(())
    }

    /// Stops both listeners and flushes persistence files.
    pub async fn shutdown(self) -> Result<(), ProxyError> {
        let _ = self.shutdown.send(true);
        for task in self.tasks {
            if tokio::time::timeout(Duration::from_secs(5), task).await.is_err() {
                log::warn!("listener did not stop within 5s");
            }
        }
        self.inner.save_whitelist()?;
        self.inner.save_jar()?;
        Ok(())
    }
}

/// Starts the proxy and control listeners.
pub async fn start(config: ProxyConfig) -> Result<ProxyHandle, ProxyError> {
    config.validate()?;
    if config.tls_intercept && !cfg!(feature = "tls-intercept") {
        return Err(ProxyError::TlsUnavailable);
    }
    let rules = load_rules(config.suffix_list_path.as_deref())?;
    let jar = match &config.jar_persistence_path {
        Some(path) => persist::load_jar(path)?,
        None => Default::default(),
    };
    let mut engine = Engine::new(config.policy, rules)
        .with_refuse_new_third_party_cookies(config.drop_new_third_party_cookies)
        .with_jar(jar);
    if let Some(path) = &config.whitelist_path {
        for entry in persist::load_whitelist(path)? {
            let pair = entry.to_pair(|d| engine.registrable_domain(d));
            if engine.whitelist_add(pair.third_party.clone(), pair.site.clone()).is_err() {
                log::warn!("{}: skipping whitelist entry {pair} naming one site twice", path.display());
            }
        }
    }

    let upstream = Upstream::new(config.upstream_overrides.clone());
    #[cfg(feature = "tls-intercept")]
    let (upstream, interceptor) = if config.tls_intercept {
        let (connector, interceptor) = tls::setup(&config)?;
        (upstream.with_tls(connector), Some(interceptor))
    } else {
        (upstream, None)
    };

    let proxy_listener = bind(config.listen_address).await?;
    let control_listener = bind(config.control_address).await?;
    let proxy_addr =
        proxy_listener.local_addr().map_err(|source| ProxyError::Bind { addr: config.listen_address, source })?;
    let control_addr =
        control_listener.local_addr().map_err(|source| ProxyError::Bind { addr: config.control_address, source })?;

    let inner = Arc::new(Inner {
        state: Mutex::new(State::new(engine)),
        upstream,
        whitelist_path: config.whitelist_path.clone(),
        jar_path: config.jar_persistence_path.clone(),
        #[cfg(feature = "tls-intercept")]
        interceptor,
    });
    let (shutdown, rx) = watch::channel(false);
    let proxy_task = tokio::spawn(accept_loop(proxy_listener, inner.clone(), rx.clone()));
    let control_task = tokio::spawn(control::serve(control_listener, inner.clone(), rx));
    log::info!("proxy on {proxy_addr}, control API on {control_addr}, policy {}", config.policy);
    Ok(ProxyHandle { proxy_addr, control_addr, shutdown, tasks: vec![proxy_task, control_task], inner })
}

/// Serves until Ctrl-C, then shuts down cleanly.
pub async fn run(config: ProxyConfig) -> Result<(), ProxyError> {
    let handle = start(config).await?;
    if let Err(e) = tokio::signal::ctrl_c().await {
        log::error!("cannot listen for shutdown signal: {e}");
    }
    handle.shutdown().await
}
