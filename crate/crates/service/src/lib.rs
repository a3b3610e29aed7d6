//! HTTP API under `/api/v1` over editing sessions, renders, edit and
//! inversion jobs, and latent swaps.
//!
//! Sessions are created from a checkpoint plus a seed (immediate) or an
//! uploaded image and mask (an inversion job). Renders run on a single FIFO
//! worker; edits and inversions run as jobs whose progress is polled. A
//! session accepts one job at a time and its state changes only through
//! completed edits and swaps.

mod error;
mod state;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use lcnerf_core::inversion_editing::{
    all_regions, apply_delta, decode_bank, encode_bank, invert, EditOptions, EditSession, HistoryEntry, InvertOptions, Which,
};
use lcnerf_core::{io, Camera, LatentBank};
use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use error::{ApiError, ApiResult};
pub use state::{AppState, JobKind, JobProgress, JobStatus, ServiceConfig};

use state::{Job, SessionSlot};

/// Router with every endpoint mounted under `/api/v1`.
pub fn router(config: ServiceConfig) -> Router {
    let state = Arc::new(AppState::new(config));
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/render", get(render_image))
        .route("/sessions/{id}/mask", get(render_mask))
        .route("/sessions/{id}/latents", get(session_latents))
        .route("/sessions/{id}/edits", post(submit_edit))
        .route("/sessions/{id}/latents/swap", post(swap_latents))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/preview", get(job_preview))
        .with_state(state);
    Router::new()
        .nest("/api/v1", api)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no_route", "no such endpoint") })
}

/// Serve until the process is stopped.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}/api/v1", listener.local_addr()?);
    axum::serve(listener, router(config)).await
}

type Shared = State<Arc<AppState>>;

fn parse_json<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable("malformed_body", format!("request body: {e}")))
}

fn decode_b64(field: &str, text: &str) -> ApiResult<Vec<u8>> {
    B64.decode(text.trim())
        .map_err(|e| ApiError::unprocessable("malformed_upload", format!("`{field}` is not base64: {e}")))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))
}

#[derive(Serialize)]
struct CameraView {
    azimuth: f64,
    elevation: f64,
    size: usize,
}

fn camera_view(c: &Camera) -> CameraView {
    CameraView {
        azimuth: c.azimuth,
        elevation: c.elevation,
        size: c.height,
    }
}

fn session_json(slot: &SessionSlot) -> Value {
    let s = slot.session.lock().expect("session lock");
    json!({
        "session_id": slot.id,
        "checkpoint": slot.checkpoint,
        "created": slot.created,
        "camera": camera_view(&s.camera),
        "regions": s.regions(),
        "history_length": s.history.len(),
        "active_job": *slot.active_job.lock().expect("job lock"),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    checkpoint: String,
    seed: Option<u64>,
    image_png: Option<String>,
    mask_png: Option<String>,
    azimuth: Option<f64>,
    elevation: Option<f64>,
    #[serde(default)]
    invert: Option<InvertOptions>,
}

async fn create_session(State(app): Shared, body: Bytes) -> ApiResult<Response> {
    let req: CreateSession = parse_json(&body)?;
    let model = app.model(&req.checkpoint)?;
    let mut camera = AppState::default_camera(&model);
    camera.azimuth = req.azimuth.unwrap_or(camera.azimuth);
    camera.elevation = req.elevation.unwrap_or(camera.elevation);
    camera.validate().map_err(|e| ApiError::bad_request("bad_camera", e.to_string()))?;
    match (req.seed, req.image_png, req.mask_png) {
        (Some(seed), None, None) => {
            let m = model.clone();
            let session = blocking(move || {
                EditSession::from_seed(m.field.clone(), m.params.clone(), seed, camera, m.config.render.clone())
            })
            .await??;
            let slot = app.add_session(&model.name, session);
            Ok(Json(session_json(&slot)).into_response())
        }
        (None, Some(image), Some(mask)) => {
            let image = io::decode_rgb(&decode_b64("image_png", &image)?)?;
            let labels = io::decode_mask(&decode_b64("mask_png", &mask)?)?;
            let side = model.config.render.resolution;
            if image.dim() != (side, side, 3) || labels.dim() != (side, side) {
                return Err(ApiError::unprocessable(
                    "malformed_upload",
                    format!("image and mask must be {side}x{side}"),
                ));
            }
            let regions = model.field.regions();
            if let Some(&l) = labels.iter().find(|&&l| l as usize >= regions) {
                return Err(ApiError::unprocessable("label_out_of_range", format!("mask label {l} is not below {regions}")));
            }
            let options = req.invert.unwrap_or_default();
            let job = app.add_job(JobKind::Invert, options.latent_steps + options.tune_steps, None);
            spawn_inversion(app.clone(), model, job.clone(), image, labels, camera, options);
            Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job.id }))).into_response())
        }
        _ => Err(ApiError::unprocessable(
            "malformed_body",
            "give either `seed` or both `image_png` and `mask_png`",
        )),
    }
}

fn spawn_inversion(
    app: Arc<AppState>,
    model: Arc<state::Model>,
    job: Arc<Job>,
    image: Array3<f32>,
    labels: Array2<u8>,
    camera: Camera,
    options: InvertOptions,
) {
    std::thread::spawn(move || {
        let mut count = 0;
        let result = invert(
            model.field.clone(),
            model.params.clone(),
            &image,
            &labels,
            camera,
            model.config.render.clone(),
            &options,
            |p| {
                count += 1;
                let mut g = job.progress.lock().expect("job lock");
                g.phase = p.phase.to_string();
                g.iteration = count;
                g.loss = Some(p.loss);
                g.initial_loss.get_or_insert(p.loss);
            },
        );
        let mut g = job.progress.lock().expect("job lock");
        match result {
            Ok(inv) => {
                let slot = app.add_session(&model.name, inv.session);
                g.final_loss = inv.tune_losses.last().or(inv.latent_losses.last()).copied();
                g.session_id = Some(slot.id.clone());
                g.status = JobStatus::Done;
            }
            Err(e) => {
                g.error = Some(e.to_string());
                g.status = JobStatus::Failed;
            }
        }
    });
}

async fn session_info(State(app): Shared, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = app.session(&id)?;
    Ok(Json(session_json(&slot)))
}

fn parse_query<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<T>> {
    q.get(key)
        .map(|v| v.parse::<T>().map_err(|_| ApiError::bad_request("bad_query", format!("`{key}` must be a number, got `{v}`"))))
        .transpose()
}

/// Session camera overridden by the `azimuth`, `elevation` and `size` query.
fn query_camera(app: &AppState, base: &Camera, q: &HashMap<String, String>) -> ApiResult<Camera> {
    let mut c = base.clone();
    if let Some(a) = parse_query::<f64>(q, "azimuth")? {
        c.azimuth = a;
    }
    if let Some(e) = parse_query::<f64>(q, "elevation")? {
        c.elevation = e;
    }
    if let Some(size) = parse_query::<usize>(q, "size")? {
        if size == 0 || size > app.config.max_size {
            return Err(ApiError::bad_request(
                "bad_size",
                format!("size must be between 1 and {}", app.config.max_size),
            )
            .with_detail(json!({ "size": size, "max_size": app.config.max_size })));
        }
        c = c.with_resolution(size);
    }
    c.validate().map_err(|e| ApiError::bad_request("bad_camera", e.to_string()))?;
    Ok(c)
}

async fn render_png(app: Arc<AppState>, id: String, q: HashMap<String, String>, mask: bool) -> ApiResult<Response> {
    let slot = app.session(&id)?;
    let session = slot.session.lock().expect("session lock").clone();
    let camera = query_camera(&app, &session.camera, &q)?;
    let bytes = app
        .queue
        .run(move || {
            let r = session.render_at(&camera)?;
            if mask {
                io::encode_mask(&r.labels())
            } else {
                io::encode_rgb(&r.image_on_white())
            }
        })
        .await??;
    Ok(png(bytes))
}

async fn render_image(State(app): Shared, Path(id): Path<String>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Response> {
    render_png(app, id, q, false).await
}

async fn render_mask(State(app): Shared, Path(id): Path<String>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Response> {
    render_png(app, id, q, true).await
}

async fn session_latents(State(app): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = app.session(&id)?;
    let bytes = encode_bank(&slot.session.lock().expect("session lock").bank);
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

/// Reserve the session for a job; fails if one is already running.
fn claim(slot: &SessionSlot, job_id: &str) -> ApiResult<()> {
    let mut active = slot.active_job.lock().expect("job lock");
    if let Some(j) = active.as_ref() {
        return Err(ApiError::conflict(format!("job `{j}` is still running on session `{}`", slot.id))
            .with_detail(json!({ "job_id": j })));
    }
    *active = Some(job_id.to_string());
    Ok(())
}

fn ensure_idle(slot: &SessionSlot) -> ApiResult<()> {
    if let Some(j) = slot.active_job.lock().expect("job lock").as_ref() {
        return Err(ApiError::conflict(format!("job `{j}` is still running on session `{}`", slot.id))
            .with_detail(json!({ "job_id": j })));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditRequest {
    mask_png: String,
    region_ids: Vec<usize>,
    iterations: Option<usize>,
    lr: Option<f64>,
}

async fn submit_edit(State(app): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let slot = app.session(&id)?;
    ensure_idle(&slot)?;
    let req: EditRequest = parse_json(&body)?;
    let target = io::decode_mask(&decode_b64("mask_png", &req.mask_png)?)?;
    let snapshot = slot.session.lock().expect("session lock").clone();
    let (h, w) = (snapshot.camera.height, snapshot.camera.width);
    if target.dim() != (h, w) {
        return Err(ApiError::unprocessable("bad_mask", format!("mask must be {h}x{w}, got {:?}", target.dim())));
    }
    let regions = snapshot.regions();
    if let Some(((row, col), &l)) = target.indexed_iter().find(|(_, &l)| l as usize >= regions) {
        return Err(lcnerf_core::Error::LabelOutOfRange {
            label: l as u32,
            row,
            col,
            limit: regions,
        }
        .into());
    }
    if req.region_ids.is_empty() {
        return Err(ApiError::unprocessable("invalid_argument", "region_ids is empty"));
    }
    if let Some(&bad) = req.region_ids.iter().find(|&&r| r >= regions) {
        return Err(lcnerf_core::Error::UnknownRegion { id: bad, regions }.into());
    }
    let defaults = EditOptions::default();
    let options = EditOptions {
        iterations: req.iterations.unwrap_or(defaults.iterations),
        lr: req.lr.unwrap_or(defaults.lr),
    };
    if options.iterations == 0 || options.iterations > app.config.max_iterations {
        return Err(ApiError::unprocessable(
            "invalid_argument",
            format!("iterations must be between 1 and {}", app.config.max_iterations),
        ));
    }
    if !(options.lr.is_finite() && options.lr > 0.0) {
        return Err(ApiError::unprocessable("invalid_argument", "lr must be positive"));
    }
    let job = app.add_job(JobKind::Edit, options.iterations, Some(snapshot.clone()));
    if let Err(e) = claim(&slot, &job.id) {
        app.jobs.lock().expect("jobs lock").remove(&job.id);
        return Err(e);
    }
    job.progress.lock().expect("job lock").session_id = Some(slot.id.clone());
    let (slot2, job2) = (slot.clone(), job.clone());
    std::thread::spawn(move || run_edit(slot2, job2, snapshot, target, req.region_ids, options));
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job.id, "preview_url": preview_url(&job.id) }))).into_response())
}

fn run_edit(slot: Arc<SessionSlot>, job: Arc<Job>, snapshot: EditSession, target: Array2<u8>, region_ids: Vec<usize>, options: EditOptions) {
    let result = snapshot.optimize_edit(&target, &region_ids, &options, |p| {
        if let Some(d) = p.delta {
            *job.preview_delta.lock().expect("preview lock") = Some(d.clone());
        }
        let mut g = job.progress.lock().expect("job lock");
        g.phase = p.phase.to_string();
        g.iteration = p.iteration + 1;
        g.loss = Some(p.loss);
        g.initial_loss.get_or_insert(p.loss);
    });
    let outcome = result.and_then(|out| {
        slot.session.lock().expect("session lock").apply(HistoryEntry::Edit {
            region_ids,
            delta: out.delta.clone(),
        })?;
        Ok(out)
    });
    {
        let mut g = job.progress.lock().expect("job lock");
        match outcome {
            Ok(out) => {
                *job.preview_delta.lock().expect("preview lock") = Some(out.delta.clone());
                g.final_loss = Some(out.final_loss());
                g.status = JobStatus::Done;
            }
            Err(e) => {
                g.error = Some(e.to_string());
                g.status = JobStatus::Failed;
            }
        }
    }
    *slot.active_job.lock().expect("job lock") = None;
}

fn preview_url(job_id: &str) -> String {
    format!("/api/v1/jobs/{job_id}/preview")
}

async fn job_status(State(app): Shared, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let job = app.job(&id)?;
    let p = job.progress.lock().expect("job lock").clone();
    let mut v = serde_json::to_value(&p).expect("progress serializes");
    v["job_id"] = json!(job.id);
    v["kind"] = json!(job.kind);
    v["preview_url"] = if job.kind == JobKind::Edit { json!(preview_url(&job.id)) } else { Value::Null };
    Ok(Json(v))
}

async fn job_preview(State(app): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    let job = app.job(&id)?;
    let Some(snapshot) = job.snapshot.clone() else {
        return Err(ApiError::not_found("no_preview", "preview", &id));
    };
    let delta = job.preview_delta.lock().expect("preview lock").clone();
    let bytes = app
        .queue
        .run(move || {
            let bank = match delta {
                Some(d) => apply_delta(&snapshot.bank, &d)?,
                None => snapshot.bank.clone(),
            };
            io::encode_rgb(&snapshot.render_bank(&bank, &snapshot.camera)?.image_on_white())
        })
        .await??;
    Ok(png(bytes))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RegionSel {
    One(usize),
    Many(Vec<usize>),
    Named(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
enum Donor {
    #[serde(rename = "session_id")]
    Session(String),
    #[serde(rename = "file")]
    File(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SwapRequest {
    region_id: RegionSel,
    which: Which,
    donor: Donor,
}

async fn swap_latents(State(app): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let slot = app.session(&id)?;
    let req: SwapRequest = parse_json(&body)?;
    let donor: LatentBank<f32> = match &req.donor {
        Donor::Session(d) if *d == id => slot.session.lock().expect("session lock").bank.clone(),
        Donor::Session(d) => app.session(d)?.session.lock().expect("session lock").bank.clone(),
        Donor::File(b) => decode_bank(&decode_b64("donor.file", b)?)?,
    };
    let mut session = slot.session.lock().expect("session lock");
    ensure_idle(&slot)?;
    let regions = session.regions();
    let ids = match req.region_id {
        RegionSel::One(i) => vec![i],
        RegionSel::Many(v) => v,
        RegionSel::Named(s) if s == "all" => all_regions(regions),
        RegionSel::Named(s) => {
            return Err(ApiError::unprocessable("invalid_argument", format!("region_id must be an id, a list or \"all\", got `{s}`")))
        }
    };
    session.swap(&ids, &donor, req.which)?;
    Ok(Json(json!({ "session_id": slot.id, "history_length": session.history.len() })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swap_request_shapes_parse() {
        let r: SwapRequest =
            serde_json::from_str(r#"{"region_id":"all","which":"texture","donor":{"session_id":"s2"}}"#).unwrap();
        assert!(matches!(r.region_id, RegionSel::Named(ref s) if s == "all"));
        assert!(matches!(r.donor, Donor::Session(ref s) if s == "s2"));
        let r: SwapRequest = serde_json::from_str(r#"{"region_id":2,"which":"both","donor":{"file":"AAAA"}}"#).unwrap();
        assert!(matches!(r.region_id, RegionSel::One(2)));
        assert!(serde_json::from_str::<SwapRequest>(r#"{"region_id":2,"which":"hue","donor":{"file":""}}"#).is_err());
    }

    #[test]
    fn query_values_are_validated() {
        let app = AppState::new(ServiceConfig::new("."));
        let base = Camera::from_config(0.0, 0.0, &lcnerf_core::RenderConfig::toy());
        let q = |pairs: &[(&str, &str)]| pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect::<HashMap<_, _>>();
        assert_eq!(query_camera(&app, &base, &q(&[])).unwrap(), base);
        assert_eq!(query_camera(&app, &base, &q(&[("size", "16")])).unwrap().height, 16);
        for bad in [("size", "0"), ("size", "257"), ("elevation", "2.0"), ("azimuth", "NaN"), ("azimuth", "left")] {
            assert_eq!(query_camera(&app, &base, &q(&[bad])).unwrap_err().status, StatusCode::BAD_REQUEST, "{bad:?}");
        }
    }
}
