#![allow(dead_code)]

pub mod gen;
pub mod oracle;

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::header::HeaderMap;
use hyper::service::service_fn;
use hyper::{Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use tokio::net::{TcpListener, TcpStream};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// One request as an origin server saw it.
#[derive(Debug, Clone)]
pub struct Captured {
    pub host: String,
    pub method: String,
    pub target: String,
    pub headers: Vec<(String, String)>,
}

impl Captured {
    pub fn cookie(&self) -> Option<&str> {
        self.header("cookie")
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

/// Canned response for `host` + path.
#[derive(Debug, Clone, Default)]
pub struct Canned {
    pub set_cookies: Vec<String>,
    pub body: String,
}

/// A plain HTTP server standing in for every origin. Requests are told
/// apart by their `Host` header and all of them are recorded.
pub struct MockOrigins {
    pub addr: SocketAddr,
    pub captured: Arc<Mutex<Vec<Captured>>>,
}

impl MockOrigins {
    pub async fn start(routes: BTreeMap<(String, String), Canned>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let captured = Arc::new(Mutex::new(Vec::new()));
        let routes = Arc::new(routes);
        let log = captured.clone();
        tokio::spawn(async move {
            loop {
                let Ok((stream, _)) = listener.accept().await else { continue };
                let routes = routes.clone();
                let log = log.clone();
                tokio::spawn(async move {
                    let service = service_fn(move |req: Request<Incoming>| {
                        let routes = routes.clone();
                        let log = log.clone();
                        async move { Ok::<_, Infallible>(respond(req, &routes, &log)) }
                    });
                    let _ = hyper::server::conn::http1::Builder::new()
                        .preserve_header_case(true)
                        .serve_connection(TokioIo::new(stream), service)
                        .await;
                });
            }
        });
        Self { addr, captured }
    }

    pub fn captured(&self) -> Vec<Captured> {
        self.captured.lock().unwrap().clone()
    }

    pub fn to_host(&self, host: &str) -> Vec<Captured> {
        self.captured().into_iter().filter(|c| c.host == host).collect()
    }
}

fn respond(
    req: Request<Incoming>,
    routes: &BTreeMap<(String, String), Canned>,
    log: &Mutex<Vec<Captured>>,
) -> Response<Full<Bytes>> {
    let host = req
        .headers()
        .get("host")
        .and_then(|h| h.to_str().ok())
        .map(|h| h.split(':').next().unwrap_or(h).to_string())
        .unwrap_or_default();
    let target = req.uri().to_string();
    let path = req.uri().path().to_string();
    log.lock().unwrap().push(Captured {
        host: host.clone(),
        method: req.method().to_string(),
        target,
        headers: req
            .headers()
            .iter()
            .map(|(k, v)| (k.as_str().to_string(), v.to_str().unwrap_or("").to_string()))
            .collect(),
    });
    let Some(canned) = routes.get(&(host, path)) else {
        let mut r = Response::new(Full::new(Bytes::from_static(b"not found")));
        *r.status_mut() = StatusCode::NOT_FOUND;
        return r;
    };
    let mut resp = Response::builder().header("content-type", "text/html");
    for c in &canned.set_cookies {
        resp = resp.header("set-cookie", c.as_str());
    }
    resp.body(Full::new(Bytes::from(canned.body.clone()))).unwrap()
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Bytes,
}

/// Sends one absolute-form request through the proxy at `proxy`.
pub async fn via_proxy(proxy: SocketAddr, method: &str, url: &str, headers: &[(&str, &str)]) -> Reply {
    let stream = TcpStream::connect(proxy).await.unwrap();
    let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream)).await.unwrap();
    tokio::spawn(conn);
    let uri: hyper::Uri = url.parse().unwrap();
    let mut req = Request::builder().method(method).uri(url);
    if let Some(a) = uri.authority() {
        req = req.header("host", a.as_str());
    }
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let resp = sender.send_request(req.body(Full::new(Bytes::new())).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    Reply { status, headers, body }
}

/// Plain request to the control API.
pub async fn control(
    addr: SocketAddr,
    method: &str,
    path: &str,
    body: Option<serde_json::Value>,
) -> (StatusCode, serde_json::Value) {
    let stream = TcpStream::connect(addr).await.unwrap();
    let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream)).await.unwrap();
    tokio::spawn(conn);
    let mut req = Request::builder().method(method).uri(path).header("host", addr.to_string());
    let payload = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Bytes::from(v.to_string())
        }
        None => Bytes::new(),
    };
    let resp = sender.send_request(req.body(Full::new(payload)).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null);
    (status, value)
}

pub fn route(host: &str, path: &str, set_cookies: &[&str], body: &str) -> ((String, String), Canned) {
    (
        (host.to_string(), path.to_string()),
        Canned { set_cookies: set_cookies.iter().map(|s| s.to_string()).collect(), body: body.to_string() },
    )
}

/// Config for a proxy on ephemeral ports whose named hosts all resolve to `origin`.
pub fn proxy_config(origin: SocketAddr, hosts: &[&str]) -> clickgate::ProxyConfig {
    clickgate::ProxyConfig {
        listen_address: "127.0.0.1:0".parse().unwrap(),
        control_address: "127.0.0.1:0".parse().unwrap(),
        upstream_overrides: hosts.iter().map(|h| (h.to_string(), origin)).collect(),
        ..Default::default()
    }
}
