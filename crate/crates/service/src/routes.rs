use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use saliencytune::data::{decode_image, FeedbackRecord, FeedbackSource};
use saliencytune::explainer::{align_resolution, explain, heatmap_png, upsample_map, ExplanationMask, MaskOrigin};
use saliencytune::metrics::{evaluate, MetricsReport};
use saliencytune::trainer::TrainingConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ApiError;
use crate::state::AppState;
use crate::store::{CheckpointInfo, FineTuneJob, JobStatus};

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/feedback", post(submit_feedback))
        .route("/finetune", post(start_finetune))
        .route("/jobs/{id}", get(job))
        .route("/samples", get(samples))
        .route("/checkpoints", get(checkpoints))
        .route("/metrics/latest", get(latest_metrics))
        .route("/rollback", post(rollback))
        .route("/artifacts/{name}", get(artifact))
        .route("/spec", get(|| async { Json(crate::openapi::document()) }))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn decode_b64(field: &str, text: &str) -> ApiResult<Vec<u8>> {
    STANDARD
        .decode(text.trim())
        .map_err(|e| ApiError::unprocessable(format!("{field} is not valid base64: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub sample_id: Option<String>,
    /// Base64-encoded PNG or JPEG.
    pub image: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub checkpoint_id: String,
    pub sample_id: Option<String>,
    pub predicted_class: String,
    pub predicted_index: usize,
    pub probabilities: Vec<f64>,
    /// Artifact paths, servable under `/artifacts/`.
    pub saliency_png: String,
    pub mask_png: String,
    pub degenerate: bool,
}

async fn predict(State(state): State<AppState>, Json(req): Json<PredictRequest>) -> ApiResult<Json<PredictResponse>> {
    let published = state.active();
    let (image, key, sample_id) = match (req.sample_id, req.image) {
        (Some(id), None) => {
            let sample = state
                .catalog()
                .get(&id)
                .ok_or_else(|| ApiError::not_found(format!("unknown sample `{id}`")))?;
            let key: String = id
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
                .collect();
            (sample.image.clone(), key, Some(id))
        }
        (None, Some(data)) => {
            let bytes = decode_b64("image", &data)?;
            let image = decode_image(&bytes, published.network.input_shape())
                .map_err(|e| ApiError::unprocessable(format!("malformed image: {e}")))?;
            (image, format!("upload{}", state.next_token()), None)
        }
        _ => return Err(ApiError::unprocessable("give exactly one of sample_id and image")),
    };
    let threshold = state.training().threshold;
    let st = state.clone();
    blocking(move || {
        let e = explain(&published.network, &image, None, threshold)?;
        let (h, w, _) = image.dim();
        let saliency = heatmap_png(&upsample_map(&e.normalized.map.values, (h, w)))?;
        let mask = align_resolution(&e.mask, (h, w))?.to_png()?;
        let names = [
            format!("{}_{key}_saliency.png", published.id),
            format!("{}_{key}_mask.png", published.id),
        ];
        for (name, bytes) in names.iter().zip([saliency, mask]) {
            std::fs::write(st.dir("artifacts").join(name), bytes)?;
        }
        let class = e.class_index();
        let [saliency_png, mask_png] = names.map(|n| format!("/artifacts/{n}"));
        Ok(Json(PredictResponse {
            checkpoint_id: published.id.clone(),
            sample_id,
            predicted_class: st.catalog().classes.name(class).to_string(),
            predicted_index: class,
            probabilities: e.prediction.probabilities,
            saliency_png,
            mask_png,
            degenerate: e.normalized.degenerate,
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub sample_id: String,
    /// Class name.
    pub corrected_label: Option<String>,
    /// Base64 PNG at image resolution, pixels 0 or 255.
    pub corrected_mask: Option<String>,
}

async fn submit_feedback(
    State(state): State<AppState>,
    Json(req): Json<FeedbackRequest>,
) -> ApiResult<impl IntoResponse> {
    let sample = state
        .catalog()
        .get(&req.sample_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown sample `{}`", req.sample_id)))?;
    let label = req
        .corrected_label
        .as_deref()
        .map(|name| {
            state
                .catalog()
                .classes
                .index_of(name)
                .ok_or_else(|| ApiError::unprocessable(format!("unknown class `{name}`")))
        })
        .transpose()?;
    let mask = match &req.corrected_mask {
        Some(data) => {
            let bytes = decode_b64("corrected_mask", data)?;
            let mask = ExplanationMask::from_png(&bytes, MaskOrigin::Feedback)
                .map_err(|e| ApiError::unprocessable(format!("corrected_mask: {e}")))?;
            let (h, w, _) = sample.image.dim();
            if mask.resolution() != (h, w) {
                return Err(ApiError::unprocessable(format!(
                    "corrected_mask is {:?}, the image is {:?}",
                    mask.resolution(),
                    (h, w)
                )));
            }
            Some((mask, bytes))
        }
        None => None,
    };
    // validates that at least one correction is present
    FeedbackRecord::new(&req.sample_id, label, mask.as_ref().map(|m| m.0.clone()), FeedbackSource::Human)?;
    let mask_file = match mask {
        Some((_, bytes)) => {
            let name = format!("mask-{}-{}.png", crate::store::now(), state.next_token());
            std::fs::write(state.dir("feedback").join(&name), bytes)?;
            Some(name)
        }
        None => None,
    };
    let id = state
        .store()
        .insert_feedback(&req.sample_id, label, mask_file.as_deref())?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "feedback_id": id }))))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum FeedbackSelection {
    Ids(Vec<i64>),
    Keyword(String),
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRequest {
    /// Explicit record ids or `"all-pending"` (the default).
    pub feedback: Option<FeedbackSelection>,
    /// Fields overriding the service's default training config.
    pub config: Option<serde_json::Map<String, Value>>,
}

fn merged_config(base: &TrainingConfig, overrides: Option<serde_json::Map<String, Value>>) -> ApiResult<TrainingConfig> {
    let mut value = serde_json::to_value(base)?;
    if let (Some(o), Value::Object(obj)) = (overrides, &mut value) {
        obj.extend(o);
    }
    let config: TrainingConfig =
        serde_json::from_value(value).map_err(|e| ApiError::unprocessable(format!("config: {e}")))?;
    config
        .validate()
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    Ok(config)
}

async fn start_finetune(
    State(state): State<AppState>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: FinetuneRequest = if body.iter().all(u8::is_ascii_whitespace) {
        FinetuneRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(e.to_string()))?
    };
    let config = merged_config(state.training(), req.config)?;
    let slot = state
        .try_claim_job_slot()
        .ok_or_else(|| ApiError::conflict("a fine-tune job is already running for this model"))?;
    let ids = match req.feedback {
        None => state.store().pending_feedback()?,
        Some(FeedbackSelection::Keyword(k)) if k == "all-pending" => state.store().pending_feedback()?,
        Some(FeedbackSelection::Keyword(k)) => {
            return Err(ApiError::unprocessable(format!("unknown feedback selection `{k}`")))
        }
        Some(FeedbackSelection::Ids(ids)) => {
            let found = state.store().feedback(&ids)?;
            if let Some((id, _)) = ids.iter().zip(&found).find(|(_, f)| f.is_none()) {
                return Err(ApiError::not_found(format!("unknown feedback id {id}")));
            }
            ids
        }
    };
    if ids.is_empty() {
        return Err(ApiError::unprocessable("no pending feedback to train on"));
    }
    let input = state.active().id.clone();
    let job_id = state.store().create_job(&input, &config, &ids)?;
    let st = state.clone();
    let id = job_id.clone();
    tokio::task::spawn_blocking(move || st.execute(&id, slot));
    Ok((
        StatusCode::ACCEPTED,
        Json(serde_json::json!({ "job_id": job_id, "status": JobStatus::Queued, "feedback_ids": ids })),
    ))
}

async fn job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<FineTuneJob>> {
    state
        .store()
        .job(&id)?
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown job `{id}`")))
}

#[derive(Debug, Deserialize)]
pub struct Page {
    #[serde(default)]
    pub offset: usize,
    #[serde(default = "default_limit")]
    pub limit: usize,
}

fn default_limit() -> usize {
    50
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: String,
    pub label: String,
    pub has_ground_truth: bool,
}

async fn samples(State(state): State<AppState>, Query(page): Query<Page>) -> ApiResult<Json<Value>> {
    if page.limit == 0 || page.limit > 500 {
        return Err(ApiError::unprocessable("limit must be between 1 and 500"));
    }
    let catalog = state.catalog();
    let items: Vec<SampleSummary> = catalog
        .samples
        .iter()
        .skip(page.offset)
        .take(page.limit)
        .map(|s| SampleSummary {
            id: s.id.clone(),
            label: catalog.classes.name(s.label).to_string(),
            has_ground_truth: s.gt_mask.is_some(),
        })
        .collect();
    Ok(Json(serde_json::json!({
        "total": catalog.samples.len(),
        "offset": page.offset,
        "limit": page.limit,
        "items": items,
    })))
}

async fn checkpoints(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let items: Vec<CheckpointInfo> = state.store().checkpoints()?;
    Ok(Json(serde_json::json!({ "active": state.active().id, "checkpoints": items })))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LatestMetrics {
    pub checkpoint_id: String,
    /// The most recent finished job, if any.
    pub job_id: Option<String>,
    pub holdout: MetricsReport,
}

async fn latest_metrics(State(state): State<AppState>) -> ApiResult<Json<LatestMetrics>> {
    let published = state.active();
    let job_id = state
        .store()
        .jobs()?
        .into_iter()
        .rev()
        .find(|j| j.status == JobStatus::Done)
        .map(|j| j.job_id);
    let st = state.clone();
    blocking(move || {
        let c = st.catalog();
        let holdout = evaluate(&published.network, &c.holdout, st.training().threshold, &c.classes)?;
        Ok(Json(LatestMetrics {
            checkpoint_id: published.id.clone(),
            job_id,
            holdout,
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RollbackRequest {
    pub checkpoint_id: String,
}

async fn rollback(State(state): State<AppState>, Json(req): Json<RollbackRequest>) -> ApiResult<Json<Value>> {
    // holding the slot keeps a job from publishing over the rollback
    let _slot = state
        .try_claim_job_slot()
        .ok_or_else(|| ApiError::conflict("cannot roll back while a fine-tune job is running"))?;
    let st = state.clone();
    let id = req.checkpoint_id.clone();
    blocking(move || Ok(st.rollback(&id)?))
        .await?
        .ok_or_else(|| ApiError::not_found(format!("unknown checkpoint `{}`", req.checkpoint_id)))?;
    Ok(Json(serde_json::json!({ "active": req.checkpoint_id })))
}

async fn artifact(State(state): State<AppState>, Path(name): Path<String>) -> ApiResult<impl IntoResponse> {
    let ok = name.ends_with(".png")
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
    if !ok {
        return Err(ApiError::not_found("no such artifact"));
    }
    let bytes = std::fs::read(state.dir("artifacts").join(&name)).map_err(|_| ApiError::not_found("no such artifact"))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes))
}
