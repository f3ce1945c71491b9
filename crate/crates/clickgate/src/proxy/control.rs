//! JSON control API under `/ctl/v1`.

use std::sync::Arc;

use axum::extract::{Path, State as AxumState};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clickgate_core::policy::{FrameId, FrameKind};
use clickgate_core::{RegistrableDomain, SitePair};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::watch;

use super::{Inner, ReloadError, State};

type Shared = Arc<Inner>;

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairState {
    Blocked,
    Activated,
    Whitelisted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CookieStatus {
    None,
    Quarantined,
    HasCookies,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ThirdPartyView {
    pub domain: RegistrableDomain,
    /// Absent when the third party was only seen as a subresource.
    pub frame_kind: Option<FrameKind>,
    pub state: PairState,
    pub cookie_status: CookieStatus,
    pub request_count: u64,
    pub frames: Vec<FrameId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SiteView {
    pub site: RegistrableDomain,
    pub third_parties: Vec<ThirdPartyView>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct PairBody {
    site: String,
    third_party: String,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct ReloadBody {
    frame_id: String,
}

fn well_formed(domain: &str) -> bool {
    let d = domain.trim();
    !d.is_empty() && !d.contains(|c: char| c.is_whitespace() || c == '/' || c == '@')
}

/// Canonical pair from a request body. 400 for junk, 422 when both name the
/// same site.
fn pair_from(state: &State, body: &PairBody) -> Result<SitePair, ApiError> {
    for d in [&body.site, &body.third_party] {
        if !well_formed(d) {
            return Err(ApiError(StatusCode::BAD_REQUEST, format!("not a domain: {d:?}")));
        }
    }
    let pair =
        SitePair::new(state.engine.registrable_domain(&body.third_party), state.engine.registrable_domain(&body.site));
    if pair.third_party == pair.site {
        return Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, format!("third party and site are both {}", pair.site)));
    }
    Ok(pair)
}

fn site_view(state: &State, site: &RegistrableDomain) -> Option<SiteView> {
    let stats = state.sites.get(site)?;
    let table = state.engine.table();
    let jar = state.engine.jar();
    let third_parties = stats
        .iter()
        .map(|(tp, s)| {
            let pair = SitePair::new(tp.clone(), site.clone());
            let pair_state = if table.is_whitelisted(&pair) {
                PairState::Whitelisted
            } else if table.is_activated(&pair) {
                PairState::Activated
            } else {
                PairState::Blocked
            };
            let cookie_status = if jar.quarantined(&pair).next().is_some() {
                CookieStatus::Quarantined
            } else if jar.has_active_for(tp, state.engine.rules()) {
                CookieStatus::HasCookies
            } else {
                CookieStatus::None
            };
            ThirdPartyView {
                domain: tp.clone(),
                frame_kind: s.frame_kind,
                state: pair_state,
                cookie_status,
                request_count: s.request_count,
                frames: s.frames.iter().cloned().collect(),
            }
        })
        .collect();
    Some(SiteView { site: site.clone(), third_parties })
}

async fn health(AxumState(inner): AxumState<Shared>) -> Json<serde_json::Value> {
    let policy = inner.lock().engine.policy();
    Json(json!({ "status": "ok", "policy": policy }))
}

async fn sites(AxumState(inner): AxumState<Shared>) -> Json<Vec<RegistrableDomain>> {
    Json(inner.lock().sites.keys().cloned().collect())
}

async fn site(AxumState(inner): AxumState<Shared>, Path(site): Path<String>) -> Result<Json<SiteView>, ApiError> {
    let state = inner.lock();
    let rd = state.engine.registrable_domain(&site);
    site_view(&state, &rd)
        .map(Json)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no traffic seen for site {site}")))
}

async fn activate(
    AxumState(inner): AxumState<Shared>,
    Json(body): Json<PairBody>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let mut state = inner.lock();
    let pair = pair_from(&state, &body)?;
    if !state.sites.contains_key(&pair.site) {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("no traffic seen for site {}", pair.site)));
    }
    let released = state
        .engine
        .activate(pair.third_party.clone(), pair.site.clone())
        .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    log::info!("activated {pair}, released {released} quarantined cookies");
    Ok(Json(
        json!({ "site": pair.site, "thirdParty": pair.third_party, "state": PairState::Activated, "released": released }),
    ))
}

async fn whitelist(AxumState(inner): AxumState<Shared>) -> Json<Vec<crate::persist::WhitelistEntry>> {
    Json(inner.lock().whitelist().iter().map(Into::into).collect())
}

async fn whitelist_change(inner: Shared, body: PairBody, add: bool) -> Result<Json<serde_json::Value>, ApiError> {
    let changed = {
        let mut state = inner.lock();
        let pair = pair_from(&state, &body)?;
        let result = if add {
            state.engine.whitelist_add(pair.third_party, pair.site)
        } else {
            state.engine.whitelist_remove(pair.third_party, pair.site)
        };
        result.map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?
    };
    if changed {
        inner.save_whitelist().map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    }
    Ok(Json(json!({ "changed": changed })))
}

async fn whitelist_add(
    AxumState(inner): AxumState<Shared>,
    Json(body): Json<PairBody>,
) -> Result<Json<serde_json::Value>, ApiError> {
    whitelist_change(inner, body, true).await
}

async fn whitelist_remove(
    AxumState(inner): AxumState<Shared>,
    Json(body): Json<PairBody>,
) -> Result<Json<serde_json::Value>, ApiError> {
    whitelist_change(inner, body, false).await
}

async fn reload(AxumState(inner): AxumState<Shared>, Json(body): Json<ReloadBody>) -> Result<Response, ApiError> {
    match inner.execute_reload(&FrameId(body.frame_id)).await {
        Ok(outcome) => Ok(Json(outcome).into_response()),
        Err(e @ ReloadError::UnknownFrame(_)) => Err(ApiError(StatusCode::NOT_FOUND, e.to_string())),
        Err(e @ ReloadError::NotConsented(_)) => Err(ApiError(StatusCode::CONFLICT, e.to_string())),
        Err(e @ ReloadError::Upstream(_)) => Err(ApiError(StatusCode::BAD_GATEWAY, e.to_string())),
    }
}

async fn report(AxumState(inner): AxumState<Shared>) -> Json<clickgate_core::ExposureReport> {
    Json(inner.lock().report.snapshot())
}

fn router(inner: Shared) -> Router {
    Router::new()
        .route("/ctl/v1/health", get(health))
        .route("/ctl/v1/sites", get(sites))
        .route("/ctl/v1/sites/{site}", get(site))
        .route("/ctl/v1/activate", post(activate))
        .route("/ctl/v1/whitelist", get(whitelist).post(whitelist_add).delete(whitelist_remove))
        .route("/ctl/v1/reload", post(reload))
        .route("/ctl/v1/report", get(report))
        .with_state(inner)
}

pub(super) async fn serve(listener: TcpListener, inner: Shared, mut shutdown: watch::Receiver<bool>) {
    let app = router(inner);
    let result = axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            let _ = shutdown.changed().await;
        })
        .await;
    if let Err(e) = result {
        log::error!("control API stopped: {e}");
    }
}
