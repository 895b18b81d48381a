//! HTTP review service over a flag queue.
//!
//! Reads are concurrent; decisions go through a single write lock so the log
//! and the in-memory state never disagree.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use cmrqc_core::biomarkers::BiomarkerSet;
use cmrqc_core::case::ImageSeries;
use cmrqc_core::qc::{CriterionCode, QcReport};
use cmrqc_core::{Label, SegmentationFrame};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::layout::{load_case, CaseDir};
use crate::pipeline::CaseRecord;
use crate::review::{Decision, DecisionRequest, ReviewError, ReviewStatus, ReviewStore};
use crate::slices::{image_png, label_png};

pub const DEFAULT_LIMIT: usize = 50;
pub const MAX_LIMIT: usize = 500;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(err: impl std::fmt::Display) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match e {
            ReviewError::NotFlagged(_) => StatusCode::NOT_FOUND,
            ReviewError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ReviewError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

/// Loaded voxel data of one case, kept for slice requests.
struct CaseView {
    frames: BTreeMap<usize, SegmentationFrame>,
    images: Option<ImageSeries>,
    dims: [usize; 3],
}

pub struct AppState {
    store: RwLock<ReviewStore>,
    views: Mutex<HashMap<String, Arc<CaseView>>>,
}

impl AppState {
    pub fn open(queue_path: &Path) -> anyhow::Result<Arc<Self>> {
        let store = ReviewStore::open(queue_path)?;
        Ok(Arc::new(AppState {
            store: RwLock::new(store),
            views: Mutex::new(HashMap::new()),
        }))
    }

    pub fn warnings(&self) -> Vec<String> {
        self.store.read().expect("store lock").warnings.clone()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, ReviewStore> {
        self.store.read().expect("store lock")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseItem {
    pub case_id: String,
    pub flagged: bool,
    pub criteria: Vec<CriterionCode>,
    /// Review status; absent for unflagged cases.
    pub status: Option<ReviewStatus>,
    pub decision: Option<Decision>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CasePage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<CaseItem>,
}

#[derive(Debug, Deserialize)]
struct ListParams {
    flagged: Option<bool>,
    offset: Option<usize>,
    limit: Option<usize>,
}

fn item(store: &ReviewStore, case_id: &str) -> Option<CaseItem> {
    if let Some(entry) = store.queue().entry(case_id) {
        return Some(CaseItem {
            case_id: entry.case_id.clone(),
            flagged: true,
            criteria: entry.criteria.clone(),
            status: Some(store.status(case_id)),
            decision: store.decision(case_id).cloned(),
        });
    }
    store.queue().unflagged.iter().any(|c| c == case_id).then(|| CaseItem {
        case_id: case_id.to_string(),
        flagged: false,
        criteria: Vec::new(),
        status: None,
        decision: None,
    })
}

async fn list_cases(State(state): State<Arc<AppState>>, Query(params): Query<ListParams>) -> Json<CasePage> {
    let store = state.read();
    let ids: Vec<&String> = if params.flagged.unwrap_or(true) {
        store.queue().entries.iter().map(|e| &e.case_id).collect()
    } else {
        store.queue().unflagged.iter().collect()
    };
    let offset = params.offset.unwrap_or(0);
    let limit = params.limit.unwrap_or(DEFAULT_LIMIT).min(MAX_LIMIT);
    let items = ids
        .iter()
        .skip(offset)
        .take(limit)
        .filter_map(|id| item(&store, id))
        .collect();
    Json(CasePage {
        total: ids.len(),
        offset,
        limit,
        items,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseGeometry {
    pub n_slices: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub segmented_frames: Vec<usize>,
    /// Cine image frame count; 0 without a usable image.
    pub n_image_frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseDetail {
    #[serde(flatten)]
    pub item: CaseItem,
    pub history: Vec<Decision>,
    pub qc: Option<QcReport>,
    pub biomarkers: Option<BiomarkerSet>,
    pub geometry: CaseGeometry,
}

fn case_dir(store: &ReviewStore, case_id: &str) -> CaseDir {
    let queue = store.queue();
    let rel = queue
        .entry(case_id)
        .map(|e| e.case_dir.clone())
        .unwrap_or_else(|| case_id.to_string());
    CaseDir {
        case_id: case_id.to_string(),
        dir: PathBuf::from(&queue.input_root).join(rel),
    }
}

async fn view(state: &Arc<AppState>, case_id: &str) -> Result<Arc<CaseView>, ApiError> {
    if let Some(v) = state.views.lock().expect("view cache").get(case_id) {
        return Ok(v.clone());
    }
    let (dir, label_map) = {
        let store = state.read();
        (case_dir(&store, case_id), store.queue().label_map.clone())
    };
    let loaded = tokio::task::spawn_blocking(move || -> anyhow::Result<CaseView> {
        let case = load_case(&dir, &label_map.build()?, false)?.case;
        Ok(CaseView {
            dims: case.geometry().dims(),
            images: case.images().cloned(),
            frames: case.frames().clone(),
        })
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(|e| ApiError::internal(format!("{e:#}")))?;
    let v = Arc::new(loaded);
    state.views.lock().expect("view cache").insert(case_id.to_string(), v.clone());
    Ok(v)
}

fn read_record(store: &ReviewStore, case_id: &str) -> Option<CaseRecord> {
    let path = store
        .base_dir()
        .join(&store.queue().records_dir)
        .join(format!("{case_id}.json"));
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

async fn get_case(State(state): State<Arc<AppState>>, UrlPath(case_id): UrlPath<String>) -> Result<Json<CaseDetail>, ApiError> {
    let (item, history, record) = {
        let store = state.read();
        let item = item(&store, &case_id).ok_or_else(|| ApiError::not_found(format!("unknown case {case_id}")))?;
        let history = store.history().iter().filter(|d| d.case_id == case_id).cloned().collect();
        (item, history, read_record(&store, &case_id))
    };
    let v = view(&state, &case_id).await?;
    let (qc, biomarkers) = record.map(|r| (r.qc, r.biomarkers)).unwrap_or_default();
    Ok(Json(CaseDetail {
        item,
        history,
        qc,
        biomarkers,
        geometry: CaseGeometry {
            n_slices: v.dims[0],
            n_rows: v.dims[1],
            n_cols: v.dims[2],
            segmented_frames: v.frames.keys().copied().collect(),
            n_image_frames: v.images.as_ref().map_or(0, |i| i.frames.len()),
        },
    }))
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Layer {
    Image,
    Segmentation,
    Both,
}

#[derive(Debug, Deserialize)]
struct SliceParams {
    layer: Option<Layer>,
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn get_slice(
    State(state): State<Arc<AppState>>,
    UrlPath((case_id, frame, slice)): UrlPath<(String, usize, usize)>,
    Query(params): Query<SliceParams>,
) -> Result<Response, ApiError> {
    if item(&state.read(), &case_id).is_none() {
        return Err(ApiError::not_found(format!("unknown case {case_id}")));
    }
    let v = view(&state, &case_id).await?;
    let [ns, nr, nc] = v.dims;
    if slice >= ns {
        return Err(ApiError::not_found(format!("slice {slice} out of range (0..{ns})")));
    }
    let labels: Option<Vec<Label>> = v.frames.get(&frame).map(|f| f.grid().slice_plane(slice).to_vec());
    let image: Option<Vec<f64>> = v
        .images
        .as_ref()
        .and_then(|i| i.frames.get(frame))
        .map(|g| g.slice_plane(slice).to_vec());
    let seg_png = labels.map(|l| label_png(nr, nc, &l)).transpose().map_err(ApiError::internal)?;
    let img_png = image.map(|i| image_png(nr, nc, &i)).transpose().map_err(ApiError::internal)?;
    let missing = || ApiError::not_found(format!("frame {frame} has no data for this layer"));
    match params.layer.unwrap_or(Layer::Both) {
        // no image layer: fall back to the segmentation
        Layer::Image => img_png.or(seg_png).map(png_response).ok_or_else(missing),
        Layer::Segmentation => seg_png.map(png_response).ok_or_else(missing),
        Layer::Both => {
            if img_png.is_none() && seg_png.is_none() {
                return Err(missing());
            }
            let b64 = |p: Option<Vec<u8>>| p.map(|b| base64::engine::general_purpose::STANDARD.encode(b));
            Ok(Json(json!({
                "case_id": case_id,
                "frame": frame,
                "slice": slice,
                "rows": nr,
                "cols": nc,
                "image_png": b64(img_png),
                "segmentation_png": b64(seg_png),
            }))
            .into_response())
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

async fn post_decision(
    State(state): State<Arc<AppState>>,
    UrlPath(case_id): UrlPath<String>,
    Json(request): Json<DecisionRequest>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let decision = {
        let mut store = state.store.write().expect("store lock");
        store.decide(&case_id, request, now_ms())?
    };
    Ok(Json(json!({ "status": decision.status(), "decision": decision })))
}

async fn queue_summary(State(state): State<Arc<AppState>>) -> Json<crate::review::QueueSummary> {
    Json(state.read().summary())
}

pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/cases", get(list_cases))
        .route("/api/cases/{id}", get(get_case))
        .route("/api/cases/{id}/frames/{frame}/slices/{slice}", get(get_slice))
        .route("/api/cases/{id}/decision", post(post_decision))
        .route("/api/queue/summary", get(queue_summary))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(queue_path: &Path, addr: SocketAddr, ui_dir: Option<&Path>) -> anyhow::Result<()> {
    let state = AppState::open(queue_path)?;
    for w in state.warnings() {
        eprintln!("warning: {w}");
    }
    let app = router(state, ui_dir);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    eprintln!("review service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
