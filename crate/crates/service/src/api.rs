use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::Json;
use ctxkmp::demonstrations::CorpusFile;
use ctxkmp::pipeline::{train as run_training, ModelFile};
use ctxkmp::rollout::{default_start_box, vector_field_grid};
use ctxkmp::{GridSpec, Strategy, TrainConfig, TrainedModel};
use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::store::StoredModel;
use crate::AppState;

pub(crate) fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        ctxkmp::Error::Schema { field: e.path().to_string(), message: e.inner().to_string() }.into()
    })
}

pub(crate) fn lookup(state: &AppState, id: &str) -> Result<Arc<StoredModel>, ApiError> {
    let mut models = state.models.lock().map_err(|_| ApiError::internal("model store poisoned"))?;
    models.get(id).ok_or_else(|| ApiError::not_found(id))
}

pub(crate) fn parse_strategy(name: Option<&str>) -> Result<Strategy, ApiError> {
    match name {
        None => Ok(Strategy::Full),
        Some(s) => s.parse().map_err(|_| ApiError::bad_request(format!("unknown strategy `{s}`"))),
    }
}

pub async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Lasa,
    Context,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    pub corpus: CorpusFile,
    #[serde(default)]
    pub preset: Option<Preset>,
    /// Partial config whose keys override the preset.
    #[serde(default)]
    pub config: Option<serde_json::Map<String, Value>>,
}

#[derive(Debug, Serialize)]
struct TrainResponse {
    id: String,
    hash: String,
    dims: ctxkmp::demonstrations::Dims,
    jitter: f64,
    em_iterations: usize,
    converged: bool,
    timings_ms: Value,
}

pub async fn train(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: TrainRequest = parse_body(&body)?;
    let base = match req.preset {
        Some(Preset::Context) => TrainConfig::context(),
        Some(Preset::Lasa) => TrainConfig::lasa(),
        None => state.config.defaults.clone(),
    };
    let config = match &req.config {
        Some(o) => base.merged(o)?,
        None => base,
    };
    let set = req.corpus.into_training_set::<f64>()?;
    let (model, timings) = tokio::task::spawn_blocking(move || run_training(&set, &config))
        .await
        .map_err(|e| ApiError::internal(format!("training task failed: {e}")))??;
    let id = uuid::Uuid::new_v4().to_string();
    let response = TrainResponse {
        id: id.clone(),
        hash: String::new(),
        dims: model.dims,
        jitter: model.kmp.jitter(),
        em_iterations: model.gmm.fit.iterations,
        converged: model.gmm.fit.converged,
        timings_ms: json!({
            "em": timings.em.as_secs_f64() * 1e3,
            "references": timings.references.as_secs_f64() * 1e3,
            "kmp": timings.kmp.as_secs_f64() * 1e3,
        }),
    };
    let stored = {
        let mut models = state.models.lock().map_err(|_| ApiError::internal("model store poisoned"))?;
        models.insert(StoredModel::new(id.clone(), model))?
    };
    log::info!("trained model {id}");
    Ok(Json(serde_json::to_value(TrainResponse { hash: stored.hash.clone(), ..response }).expect("serializable")))
}

#[derive(Debug, Deserialize)]
pub struct ModelQuery {
    #[serde(default)]
    pub full: bool,
}

pub(crate) fn model_summary(stored: &StoredModel, full: bool) -> Value {
    let m: &TrainedModel = &stored.model;
    let c = m.dims.context;
    let to_vec = |v: &DVector<f64>| v.iter().copied().collect::<Vec<f64>>();
    let bounds = default_start_box(&m.demo_positions).ok();
    let mut out = json!({
        "id": stored.id,
        "hash": stored.hash,
        "dims": m.dims,
        "config": m.config,
        "components": m.gmm.components(),
        "references": m.kmp.len(),
        "jitter": m.kmp.jitter(),
        "goal_positions": m.goals.positions.iter().map(to_vec).collect::<Vec<_>>(),
        "goal_contexts": m.goals.inputs.iter().map(|g| g.rows(0, c).iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
        "start_box": bounds.map(|b| json!({ "lo": to_vec(&b.lo), "hi": to_vec(&b.hi) })),
    });
    if full {
        let file: ModelFile = m.to_file();
        out["model"] = serde_json::to_value(file).expect("serializable");
    }
    out
}

pub async fn get_model(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ModelQuery>,
) -> Result<Json<Value>, ApiError> {
    let stored = lookup(&state, &id)?;
    Ok(Json(model_summary(&stored, q.full)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldRequest {
    /// Explicit lattice; defaults to the start box on an `nx` by `ny` lattice.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub nx: Option<usize>,
    #[serde(default)]
    pub ny: Option<usize>,
    #[serde(default)]
    pub context: Option<Vec<f64>>,
    #[serde(default)]
    pub strategy: Option<String>,
}

pub const DEFAULT_FIELD_SIZE: usize = 20;

pub async fn field(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let stored = lookup(&state, &id)?;
    let req: FieldRequest = parse_body(&body)?;
    let strategy = parse_strategy(req.strategy.as_deref())?;
    let m = &stored.model;
    let context = match (req.context, m.dims.context) {
        (Some(c), _) => c,
        (None, 0) => Vec::new(),
        (None, c) => return Err(ApiError::bad_request(format!("model has {c} context inputs; `context` is required"))),
    };
    let grid = match req.grid {
        Some(g) => g,
        None => {
            let b = default_start_box(&m.demo_positions)?;
            if b.lo.len() != 2 {
                return Err(ctxkmp::Error::UnsupportedProjection(format!("vector fields need 2-D positions, model has {}", b.lo.len())).into());
            }
            GridSpec::covering(&b, req.nx.unwrap_or(DEFAULT_FIELD_SIZE), req.ny.unwrap_or(DEFAULT_FIELD_SIZE))
        }
    };
    grid.validate()?;
    let key = format!(
        "{}|{}|{:?}|{}",
        stored.id,
        serde_json::to_string(&grid).expect("serializable"),
        context.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        strategy
    );
    if let Some(hit) = state.fields.lock().map_err(|_| ApiError::internal("field cache poisoned"))?.get(&key) {
        return Ok(Json((**hit).clone()));
    }
    let task_model = stored.clone();
    let ctx = DVector::from_vec(context.clone());
    let records = tokio::task::spawn_blocking(move || {
        let m = &task_model.model;
        vector_field_grid(&m.kmp, &m.goals, &m.fusion(), &grid, &ctx, strategy)
    })
    .await
    .map_err(|e| ApiError::internal(format!("field task failed: {e}")))??;
    let payload = Arc::new(json!({
        "model": stored.id,
        "strategy": strategy.name(),
        "context": context,
        "grid": grid,
        "records": records,
    }));
    state.fields.lock().map_err(|_| ApiError::internal("field cache poisoned"))?.put(key, payload.clone());
    Ok(Json((*payload).clone()))
}
