//! TLS interception for CONNECT tunnels.
//!
//! The client's TLS session is terminated with a leaf certificate for the
//! tunnel's host, signed by a local CA the user has chosen to trust. Requests
//! inside are handled exactly like plain forward-proxy requests, then sent
//! upstream over a fresh verified TLS connection.

use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use clickgate_core::Url;
use http_body_util::BodyExt;
use hyper::body::Incoming;
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::upgrade::Upgraded;
use hyper::{Request, StatusCode};
use hyper_util::rt::TokioIo;
use rcgen::{CertificateParams, Issuer, KeyPair};
use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer};
use rustls::{ClientConfig, RootCertStore, ServerConfig};
use tokio_rustls::{TlsAcceptor, TlsConnector};

use super::{forward, text_response, Inner, ProxyError};
use crate::config::ProxyConfig;

/// Mints and caches per-host server configurations.
pub struct Interceptor {
    issuer: Issuer<'static, KeyPair>,
    ca_der: CertificateDer<'static>,
    provider: Arc<rustls::crypto::CryptoProvider>,
    cache: Mutex<HashMap<String, Arc<ServerConfig>>>,
}

impl Interceptor {
    pub fn from_pem(ca_cert_pem: &str, ca_key_pem: &str) -> Result<Self, ProxyError> {
        let tls_err = |what: &str, e: &dyn std::fmt::Display| ProxyError::Tls(format!("{what}: {e}"));
        let key = KeyPair::from_pem(ca_key_pem).map_err(|e| tls_err("CA key", &e))?;
        let issuer = Issuer::from_ca_cert_pem(ca_cert_pem, key).map_err(|e| tls_err("CA certificate", &e))?;
        let ca_der =
            CertificateDer::from_pem_slice(ca_cert_pem.as_bytes()).map_err(|e| tls_err("CA certificate", &e))?;
        Ok(Self { issuer, ca_der, provider: provider(), cache: Mutex::new(HashMap::new()) })
    }

    fn server_config(&self, host: &str) -> Result<Arc<ServerConfig>, ProxyError> {
        let mut cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(config) = cache.get(host) {
            return Ok(config.clone());
        }
        let tls_err = |e: &dyn std::fmt::Display| ProxyError::Tls(format!("leaf certificate for {host}: {e}"));
        let leaf_key = KeyPair::generate().map_err(|e| tls_err(&e))?;
        let leaf = CertificateParams::new(vec![host.to_string()])
            .and_then(|params| params.signed_by(&leaf_key, &self.issuer))
            .map_err(|e| tls_err(&e))?;
        let chain = vec![leaf.der().clone(), self.ca_der.clone()];
        let key = PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(leaf_key.serialize_der()));
        let config = ServerConfig::builder_with_provider(self.provider.clone())
            .with_safe_default_protocol_versions()
            .and_then(|b| b.with_no_client_auth().with_single_cert(chain, key))
            .map_err(|e| tls_err(&e))?;
        let config = Arc::new(config);
        cache.insert(host.to_string(), config.clone());
        Ok(config)
    }
}

fn provider() -> Arc<rustls::crypto::CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

fn read(path: &Path) -> Result<String, ProxyError> {
    fs::read_to_string(path).map_err(|e| ProxyError::Tls(format!("cannot read {}: {e}", path.display())))
}

/// Loads the CA named in `config` and builds the upstream connector.
pub fn setup(config: &ProxyConfig) -> Result<(TlsConnector, Interceptor), ProxyError> {
    let (Some(cert), Some(key)) = (&config.ca_cert_path, &config.ca_key_path) else {
        return Err(ProxyError::Tls("ca_cert_path and ca_key_path are required".into()));
    };
    let interceptor = Interceptor::from_pem(&read(cert)?, &read(key)?)?;
    let roots = RootCertStore { roots: webpki_roots::TLS_SERVER_ROOTS.to_vec() };
    let client = ClientConfig::builder_with_provider(provider())
        .with_safe_default_protocol_versions()
        .map_err(|e| ProxyError::Tls(e.to_string()))?
        .with_root_certificates(roots)
        .with_no_client_auth();
    Ok((TlsConnector::from(Arc::new(client)), interceptor))
}

/// Serves the decrypted side of a CONNECT tunnel to `host:port`.
pub async fn intercept(inner: Arc<Inner>, client: SocketAddr, upgraded: Upgraded, host: String, port: u16) {
    let Some(interceptor) = &inner.interceptor else { return };
    let config = match interceptor.server_config(&host) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("{e}");
            return;
        }
    };
    let tls = match TlsAcceptor::from(config).accept(TokioIo::new(upgraded)).await {
        Ok(s) => s,
        Err(e) => {
            log::debug!("client TLS handshake for {host} failed: {e}");
            return;
        }
    };
    let authority = if port == 443 { host.clone() } else { format!("{host}:{port}") };
    let service = service_fn(move |req: Request<Incoming>| {
        let inner = inner.clone();
        let authority = authority.clone();
        async move {
            let target = req.uri().path_and_query().map_or("/", |p| p.as_str());
            let Ok(url) = Url::parse(&format!("https://{authority}{target}")) else {
                return Ok::<_, std::convert::Infallible>(text_response(
                    StatusCode::BAD_REQUEST,
                    "bad request target\n",
                ));
            };
            let (parts, body) = req.into_parts();
            Ok(forward(&inner, client.ip(), url, parts, body.boxed()).await)
        }
    });
    if let Err(e) = http1::Builder::new().preserve_header_case(true).serve_connection(TokioIo::new(tls), service).await
    {
        log::debug!("intercepted connection to {host}: {e}");
    }
}
