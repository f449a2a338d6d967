//! HTTP routes.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use forge_core::edit_ops::{EditPermutation, EditRecipe};
use forge_core::image::{ImageGrid, RegionMask};
use forge_core::pipeline::{edit_region, EditPlan, Models, Strategy};
use forge_core::saliency::Direction;
use forge_core::ForgeError;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Map, Value};
use tokio::sync::OwnedMutexGuard;
use uuid::Uuid;

use crate::config::ForgeConfig;
use crate::error::{Result, ServiceError};
use crate::jobs::{JobKind, JobQueue};
use crate::session::{create_session, step_session, undo_session};
use crate::store::Store;

const BODY_LIMIT: usize = 64 << 20;

#[derive(Clone)]
pub struct AppState {
    pub models: Arc<Models>,
    pub store: Arc<Store>,
    pub jobs: JobQueue,
    manifest: Arc<Value>,
    session_locks: Arc<Mutex<HashMap<Uuid, Arc<tokio::sync::Mutex<()>>>>>,
}

impl AppState {
    pub fn new(config: &ForgeConfig, models: Models, store: Store) -> Self {
        let store = Arc::new(store);
        let critic = models.critic.config();
        let manifest = json!({
            "version": env!("CARGO_PKG_VERSION"),
            "models": {
                "critic": {
                    "path": config.models.critic,
                    "resolution": critic.resolution,
                },
                "attenuate": config.models.attenuate.as_ref().filter(|_| models.attenuate.is_some()),
                "amplify": config.models.amplify.as_ref().filter(|_| models.amplify.is_some()),
                "saliency": config.saliency,
            },
            "objective": models.objective,
        });
        Self {
            jobs: JobQueue::new(store.clone(), config.server.job_workers),
            models: Arc::new(models),
            store,
            manifest: Arc::new(manifest),
            session_locks: Arc::default(),
        }
    }

    /// The single-writer lock guarding one session.
    pub fn session_lock(&self, id: Uuid) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.session_locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(id).or_default().clone()
    }

    fn try_lock_session(&self, id: Uuid) -> Result<OwnedMutexGuard<()>> {
        self.session_lock(id)
            .try_lock_owned()
            .map_err(|_| ServiceError::Conflict("session_busy", format!("session {id} already has a step in flight")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/score_realism", post(score_realism))
        .route("/saliency", post(saliency))
        .route("/estimate", post(estimate))
        .route("/edit", post(edit))
        .route("/sessions", post(new_session))
        .route("/sessions/{id}", get(show_session))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/plan", get(session_plan))
        .route("/sessions/{id}/image", get(session_image))
        .route("/jobs", post(submit_job).get(list_jobs))
        .route("/jobs/{id}", get(show_job))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Loads models, opens the store and serves until the process exits.
pub async fn serve(config: ForgeConfig) -> Result<()> {
    let models = config.load_models()?;
    let store = Store::open(config.home())?;
    let state = AppState::new(&config, models, store);
    let listener = tokio::net::TcpListener::bind(&config.server.bind).await.map_err(ForgeError::from)?;
    log::info!("listening on {}", config.server.bind);
    axum::serve(listener, router(state)).await.map_err(ForgeError::from)?;
    Ok(())
}

/// Request fields from either a JSON object (images as base64 PNG, data URLs
/// allowed) or a multipart form (images as file parts).
pub struct Payload {
    fields: Map<String, Value>,
    files: HashMap<String, Bytes>,
}

impl<S: Send + Sync> FromRequest<S> for Payload {
    type Rejection = ServiceError;

    async fn from_request(req: Request, state: &S) -> Result<Self> {
        let content_type = req
            .headers()
            .get(header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or_default()
            .to_owned();
        if content_type.starts_with("multipart/form-data") {
            let mut form = Multipart::from_request(req, state)
                .await
                .map_err(|e| ServiceError::BadRequest(e.body_text()))?;
            let mut payload = Payload { fields: Map::new(), files: HashMap::new() };
            while let Some(field) = form.next_field().await.map_err(|e| ServiceError::BadRequest(e.body_text()))? {
                let name = field.name().unwrap_or_default().to_owned();
                let is_file = field.file_name().is_some() || matches!(name.as_str(), "image" | "mask");
                let bytes = field.bytes().await.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
                if is_file {
                    payload.files.insert(name, bytes);
                } else {
                    let text = String::from_utf8_lossy(&bytes).into_owned();
                    let value = serde_json::from_str(&text).unwrap_or(Value::String(text));
                    payload.fields.insert(name, value);
                }
            }
            Ok(payload)
        } else {
            let body = Bytes::from_request(req, state)
                .await
                .map_err(|e| ServiceError::BadRequest(e.body_text()))?;
            let fields = if body.is_empty() {
                Map::new()
            } else {
                match serde_json::from_slice(&body) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(ServiceError::BadRequest("request body must be a JSON object".into())),
                    Err(e) => return Err(ServiceError::BadRequest(format!("invalid JSON body: {e}"))),
                }
            };
            Ok(Payload { fields, files: HashMap::new() })
        }
    }
}

impl Payload {
    fn bytes(&self, name: &str) -> Result<Option<Vec<u8>>> {
        if let Some(b) = self.files.get(name) {
            return Ok(Some(b.to_vec()));
        }
        match self.fields.get(name) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => {
                let data = s.split_once(";base64,").map_or(s.as_str(), |(_, d)| d);
                STANDARD
                    .decode(data.trim())
                    .map(Some)
                    .map_err(|e| ServiceError::BadRequest(format!("`{name}` is not valid base64: {e}")))
            }
            Some(_) => Err(ServiceError::BadRequest(format!("`{name}` must be a base64 string"))),
        }
    }

    fn field<T: DeserializeOwned>(&self, name: &str) -> Result<Option<T>> {
        match self.fields.get(name) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| ServiceError::BadRequest(format!("field `{name}`: {e}"))),
        }
    }

    fn image(&self) -> Result<ImageGrid> {
        let bytes = self.bytes("image")?.ok_or_else(|| ServiceError::BadRequest("missing `image`".into()))?;
        Ok(ImageGrid::decode(&bytes)?)
    }

    /// The mask, checked against the image shape.
    fn mask_for(&self, img: &ImageGrid) -> Result<RegionMask> {
        let bytes = self.bytes("mask")?.ok_or_else(|| ServiceError::BadRequest("missing `mask`".into()))?;
        let face = self.field::<bool>("contains_face")?.unwrap_or(false);
        let mask = RegionMask::decode(&bytes, face)?;
        mask.ensure_matches(img)?;
        Ok(mask)
    }

    fn direction(&self) -> Result<Direction> {
        let s: String = self.field("direction")?.ok_or_else(|| ServiceError::BadRequest("missing `direction`".into()))?;
        Ok(s.parse()?)
    }

    fn strategy(&self) -> Result<Strategy> {
        Ok(self.field::<String>("strategy")?.map(|s| s.parse()).transpose()?.unwrap_or_default())
    }

    fn permutation(&self) -> Result<EditPermutation> {
        match self.fields.get("order") {
            None | Some(Value::Null) => Ok(EditPermutation::canonical()),
            Some(Value::String(s)) => Ok(s.parse()?),
            Some(v) => serde_json::from_value(json!({ "order": v }))
                .map_err(|e| ServiceError::Core(ForgeError::InvalidParameter(format!("order: {e}")))),
        }
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

fn b64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

fn parse_id(raw: &str, what: &'static str) -> Result<Uuid> {
    raw.parse().map_err(|_| ServiceError::NotFound { what, id: raw.into() })
}

async fn healthz(State(state): State<AppState>) -> Json<Value> {
    let mut body = (*state.manifest).clone();
    body["status"] = json!("ok");
    Json(body)
}

async fn score_realism(State(state): State<AppState>, payload: Payload) -> Result<Json<Value>> {
    let img = payload.image()?;
    let mask = payload.mask_for(&img)?;
    let r = blocking(move || Ok(state.models.critic.score(&img, &mask)?)).await?;
    Ok(Json(json!({ "r": r.0 })))
}

async fn saliency(State(state): State<AppState>, payload: Payload) -> Result<Json<Value>> {
    let img = payload.image()?;
    let mask = if payload.bytes("mask")?.is_some() { Some(payload.mask_for(&img)?) } else { None };
    blocking(move || {
        let map = state.models.saliency.predict(&img)?;
        Ok(Json(json!({
            "mean": map.mean(),
            "masked_mean": mask.as_ref().map(|m| map.masked_mean(m)),
            "map": b64(&map.encode_png()?),
        })))
    })
    .await
}

async fn estimate(State(state): State<AppState>, payload: Payload) -> Result<Json<EditRecipe>> {
    let img = payload.image()?;
    let mask = payload.mask_for(&img)?;
    let direction = payload.direction()?;
    let perm = payload.permutation()?;
    blocking(move || {
        let params = state.models.estimator(direction)?.estimate(&img, &mask, &perm)?;
        Ok(Json(EditRecipe { perm, params }))
    })
    .await
}

async fn edit(State(state): State<AppState>, payload: Payload) -> Result<Json<Value>> {
    let img = payload.image()?;
    let mask = payload.mask_for(&img)?;
    let direction = payload.direction()?;
    let strategy = payload.strategy()?;
    let seed = payload.field::<u64>("seed")?.unwrap_or(0);
    blocking(move || {
        let mut plan = EditPlan::new(&img, seed);
        let (step, edited) = edit_region(&img, &mask, direction, strategy, &state.models, plan.step_seed(0))?;
        plan.push(step.clone(), &mask, &edited);
        Ok(Json(json!({
            "step": step,
            "s": step.s,
            "delta_r": step.delta_r,
            "image": b64(&edited.encode_png()?),
            "image_hash": edited.content_hash(),
            "plan": plan,
        })))
    })
    .await
}

async fn new_session(State(state): State<AppState>, payload: Payload) -> Result<(StatusCode, Json<Value>)> {
    let img = payload.image()?;
    let seed = payload.field::<u64>("seed")?.unwrap_or(0);
    let view = blocking(move || {
        let session = create_session(&state.store, &img, seed)?;
        session.view(&state.store)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(json!(view))))
}

async fn show_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>> {
    let id = parse_id(&id, "session")?;
    blocking(move || Ok(Json(json!(state.store.session(id)?.view(&state.store)?)))).await
}

async fn session_plan(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<EditPlan>> {
    let id = parse_id(&id, "session")?;
    blocking(move || {
        let session = state.store.session(id)?;
        let current = session.current_image(&state.store)?;
        Ok(Json(session.active_plan(&current)))
    })
    .await
}

async fn session_image(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response> {
    let id = parse_id(&id, "session")?;
    let png = blocking(move || Ok(state.store.session(id)?.current_image(&state.store)?.encode_png()?)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn step(State(state): State<AppState>, Path(id): Path<String>, payload: Payload) -> Result<Json<Value>> {
    let id = parse_id(&id, "session")?;
    let session = state.store.session(id)?;
    let mask_bytes = payload.bytes("mask")?.ok_or_else(|| ServiceError::BadRequest("missing `mask`".into()))?;
    let face = payload.field::<bool>("contains_face")?.unwrap_or(false);
    let mask = RegionMask::decode(&mask_bytes, face)?;
    let source = state.store.get_image(&session.source_hash)?;
    mask.ensure_matches(&source)?;
    let direction = payload.direction()?;
    let strategy = payload.strategy()?;
    state.models.estimator(direction)?;
    let guard = state.try_lock_session(id)?;
    blocking(move || {
        let _guard = guard;
        let out = step_session(&state.store, id, &mask, direction, strategy, &state.models)?;
        let pre = state.models.saliency.predict(&out.before)?;
        let post = state.models.saliency.predict(&out.after)?;
        Ok(Json(json!({
            "s": out.step.s,
            "delta_r": out.step.delta_r,
            "step": out.step,
            "image": b64(&out.after.encode_png()?),
            "image_hash": out.after.content_hash(),
            "saliency_pre": b64(&pre.encode_png()?),
            "saliency_post": b64(&post.encode_png()?),
            "session": out.session.view(&state.store)?,
        })))
    })
    .await
}

async fn undo(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>> {
    let id = parse_id(&id, "session")?;
    state.store.session(id)?;
    let guard = state.try_lock_session(id)?;
    blocking(move || {
        let _guard = guard;
        let session = undo_session(&state.store, id)?;
        Ok(Json(json!(session.view(&state.store)?)))
    })
    .await
}

#[derive(Deserialize)]
struct JobRequest {
    kind: JobKind,
    #[serde(default)]
    config: Value,
}

async fn submit_job(State(state): State<AppState>, payload: Payload) -> Result<(StatusCode, Json<Value>)> {
    let req: JobRequest = serde_json::from_value(Value::Object(payload.fields))
        .map_err(|e| ServiceError::BadRequest(format!("job request: {e}")))?;
    let record = state.jobs.submit(req.kind, req.config)?;
    Ok((StatusCode::ACCEPTED, Json(json!(record))))
}

async fn list_jobs(State(state): State<AppState>) -> Json<Value> {
    Json(json!(state.store.jobs()))
}

async fn show_job(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>> {
    let id = parse_id(&id, "job")?;
    Ok(Json(json!(state.store.job(id)?)))
}

async fn cancel_job(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>> {
    let id = parse_id(&id, "job")?;
    Ok(Json(json!(state.jobs.cancel(id)?)))
}
