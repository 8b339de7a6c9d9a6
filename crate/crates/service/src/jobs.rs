//! Background fine-tune jobs. At most one job is queued or running at a time.

use std::sync::Arc;

use kalchas::dataset::{load_manifest, load_samples, sample_from_image, Sample};
use kalchas::train::{fine_tune, TrainConfig};
use kalchas::CrnnModel;
use log::{info, warn};
use serde::Deserialize;
use serde_json::json;

use crate::error::{ApiError, ApiResult};
use crate::state::{ExcludedLine, SharedState};
use crate::store::{new_id, now_rfc3339, Event, JobRecord, JobStatus};

pub const JOB_KIND_FINETUNE: &str = "finetune";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRequest {
    pub base_model: String,
    pub documents: Vec<String>,
    #[serde(default)]
    pub config: FinetuneOverrides,
}

/// Per-job replacements for the configured fine-tune settings.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
}

struct Prepared {
    model: CrnnModel<f32>,
    samples: Vec<Sample>,
}

fn prepare(state: &SharedState, req: &FinetuneRequest) -> ApiResult<Prepared> {
    let model = state.model(&req.base_model)?;
    let labels = state.collect_labels(&req.documents, model.charset())?;
    let mut excluded = labels.excluded;
    let mut samples = Vec::new();
    for l in labels.lines {
        match sample_from_image(&l.line_id, &l.image, &l.text, model.charset(), model.timesteps()) {
            Ok(s) => samples.push(s),
            Err(e) => excluded.push(ExcludedLine {
                line_id: l.line_id,
                page_id: String::new(),
                reason: e.to_string(),
                chars: Vec::new(),
            }),
        }
    }
    if samples.is_empty() {
        return Err(ApiError::unprocessable("no exportable corrected lines in the requested documents")
            .with_details(json!({ "excluded": excluded })));
    }
    if let Some(path) = &state.config.finetune.extra_manifest {
        let manifest = load_manifest(path)
            .map_err(|e| ApiError::internal(format!("extra manifest {}: {e}", path.display())))?;
        let extra = load_samples(&manifest.entries, model.charset(), model.timesteps())
            .map_err(|e| ApiError::internal(format!("extra manifest {}: {e}", path.display())))?;
        samples.extend(extra);
    }
    Ok(Prepared {
        model: (*model).clone(),
        samples,
    })
}

fn train_config(state: &SharedState, job_id: &str, o: &FinetuneOverrides) -> ApiResult<TrainConfig> {
    let base = &state.config.finetune;
    let cfg = TrainConfig {
        epochs: o.epochs.unwrap_or(base.epochs),
        batch_size: o.batch_size.unwrap_or(base.batch_size),
        learning_rate: o.learning_rate.unwrap_or(base.learning_rate),
        seed: o.seed.unwrap_or(base.seed),
        eval_every: 1,
        checkpoint_dir: Some(state.config.store_dir.join("jobs").join(job_id)),
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| ApiError::unprocessable(e.to_string()))?;
    Ok(cfg)
}

/// Validates the request, records a queued job and starts it.
pub async fn start_finetune(state: SharedState, req: FinetuneRequest) -> ApiResult<JobRecord> {
    let mut slot = state.job_task.lock().await;
    if let Some(active) = state.store().jobs().find(|j| j.status.is_active()) {
        return Err(ApiError::conflict(format!("job {} is already {}", active.id, active.status.as_str()))
            .with_details(json!({ "job_id": active.id })));
    }
    if req.documents.is_empty() {
        return Err(ApiError::unprocessable("no documents given, so there are no labels to train on"));
    }
    let job_id = new_id();
    let cfg = train_config(&state, &job_id, &req.config)?;
    let prepared = {
        let state = state.clone();
        let req = req.clone();
        tokio::task::spawn_blocking(move || prepare(&state, &req)).await??
    };
    let now = now_rfc3339();
    let job = JobRecord {
        id: job_id,
        kind: JOB_KIND_FINETUNE.into(),
        status: JobStatus::Queued,
        base_model: req.base_model,
        documents: req.documents,
        samples: prepared.samples.len(),
        epoch: 0,
        total_epochs: cfg.epochs,
        curves: Vec::new(),
        result_model: None,
        error: None,
        created_at: now.clone(),
        updated_at: now,
    };
    state.store().commit(vec![Event::PutJob(job.clone())])?;
    let task_state = state.clone();
    let task_job = job.clone();
    *slot = Some(tokio::task::spawn_blocking(move || run(task_state, task_job, prepared, cfg)));
    Ok(job)
}

fn save(state: &SharedState, job: &mut JobRecord) {
    job.updated_at = now_rfc3339();
    if let Err(e) = state.store().commit(vec![Event::PutJob(job.clone())]) {
        warn!("job {}: cannot record progress: {e}", job.id);
    }
}

/// Registry name for a fine-tuned model: `{base}-ft-{UTC timestamp}`, with
/// a numeric suffix if that name is taken.
fn result_name(state: &SharedState, base: &str) -> String {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let name = format!("{base}-ft-{stamp}");
    let mut candidate = name.clone();
    let mut n = 2;
    while state.registry().contains(&candidate) {
        candidate = format!("{name}-{n}");
        n += 1;
    }
    candidate
}

fn run(state: SharedState, mut job: JobRecord, prepared: Prepared, cfg: TrainConfig) {
    job.status = JobStatus::Running;
    save(&state, &mut job);
    info!("job {}: fine-tuning {} on {} lines", job.id, job.base_model, job.samples);
    let note = format!("job {} on documents {}", job.id, job.documents.join(","));
    let outcome = {
        let job = &mut job;
        let state = &state;
        fine_tune(prepared.model, &prepared.samples, &cfg, &note, &mut |p| {
            job.epoch = p.epoch;
            job.curves.push(p.clone());
            save(state, job);
        })
    };
    match outcome {
        Ok(model) => {
            let name = result_name(&state, &job.base_model);
            match state.registry().publish(&name, &model) {
                Ok(_) => {
                    info!("job {}: published {name}", job.id);
                    job.status = JobStatus::Done;
                    job.result_model = Some(name);
                }
                Err(e) => {
                    job.status = JobStatus::Failed;
                    job.error = Some(format!("publishing {name}: {e}"));
                }
            }
        }
        Err(e) => {
            warn!("job {} failed: {e}", job.id);
            job.status = JobStatus::Failed;
            job.error = Some(e.to_string());
        }
    }
    save(&state, &mut job);
}

/// Waits for the background job, if any, to finish.
pub async fn wait_for_job(state: &Arc<crate::state::AppState>) {
    let handle = state.job_task.lock().await.take();
    if let Some(h) = handle {
        if let Err(e) = h.await {
            warn!("fine-tune task ended abnormally: {e}");
        }
    }
}
