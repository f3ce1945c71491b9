//! Connections to origin servers.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;

use bytes::Bytes;
use clickgate_core::Url;
use http_body_util::combinators::BoxBody;
use hyper::body::Incoming;
use hyper::{Request, Response};
use hyper_util::rt::TokioIo;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::TcpStream;

pub type Body = BoxBody<Bytes, hyper::Error>;

#[derive(Debug, thiserror::Error)]
pub enum UpstreamError {
    #[error("cannot connect to {authority}: {source}")]
    Connect { authority: String, source: io::Error },
    #[error("upstream exchange with {authority} failed: {source}")]
    Http { authority: String, source: hyper::Error },
    #[error("https upstream {0} needs TLS interception")]
    TlsUnavailable(String),
    #[cfg(feature = "tls-intercept")]
    #[error("TLS handshake with {authority} failed: {source}")]
    Tls { authority: String, source: io::Error },
}

#[derive(Clone)]
pub struct Upstream {
    overrides: BTreeMap<String, SocketAddr>,
    #[cfg(feature = "tls-intercept")]
    tls: Option<tokio_rustls::TlsConnector>,
}

impl Upstream {
    pub fn new(overrides: BTreeMap<String, SocketAddr>) -> Self {
        Self {
            overrides,
            #[cfg(feature = "tls-intercept")]
            tls: None,
        }
    }

    #[cfg(feature = "tls-intercept")]
    pub fn with_tls(mut self, connector: tokio_rustls::TlsConnector) -> Self {
        self.tls = Some(connector);
        self
    }

    /// Opens a TCP connection, honouring configured overrides (`host:port`
    /// entries first, then bare `host`).
    pub async fn connect(&self, host: &str, port: u16) -> Result<TcpStream, UpstreamError> {
        let authority = format!("{host}:{port}");
        let target = self.overrides.get(&authority).or_else(|| self.overrides.get(host)).copied();
        let stream = match target {
            Some(addr) => TcpStream::connect(addr).await,
            None => TcpStream::connect((host.trim_matches(['[', ']']), port)).await,
        };
        let stream = stream.map_err(|source| UpstreamError::Connect { authority, source })?;
        let _ = stream.set_nodelay(true);
        Ok(stream)
    }

    /// Sends one origin-form request to `url`'s origin on a fresh connection.
    pub async fn send(&self, url: &Url, req: Request<Body>) -> Result<Response<Incoming>, UpstreamError> {
        let host = url.host();
        let port = url.port_or_default();
        let stream = self.connect(host, port).await?;
        let authority = format!("{host}:{port}");
        if !url.is_secure() {
            return exchange(stream, req, authority).await;
        }
        #[cfg(feature = "tls-intercept")]
        if let Some(connector) = &self.tls {
            let name = rustls::pki_types::ServerName::try_from(host.trim_matches(['[', ']']).to_string())
                .map_err(|e| UpstreamError::Tls { authority: authority.clone(), source: io::Error::other(e) })?;
            let tls = connector
                .connect(name, stream)
                .await
                .map_err(|source| UpstreamError::Tls { authority: authority.clone(), source })?;
            return exchange(tls, req, authority).await;
        }
        Err(UpstreamError::TlsUnavailable(authority))
    }
}

async fn exchange<I>(io: I, req: Request<Body>, authority: String) -> Result<Response<Incoming>, UpstreamError>
where
    I: AsyncRead + AsyncWrite + Unpin + Send + 'static,
{
    let http_err = |source| UpstreamError::Http { authority: authority.clone(), source };
    let (mut sender, conn) = hyper::client::conn::http1::Builder::new()
        .preserve_header_case(true)
        .handshake(TokioIo::new(io))
        .await
        .map_err(http_err)?;
    tokio::spawn(async move {
        if let Err(e) = conn.await {
            log::debug!("upstream connection closed: {e}");
        }
    });
    sender.send_request(req).await.map_err(http_err)
}
