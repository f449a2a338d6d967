//! Background training and dataset jobs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use forge_core::critic::{train_critic, CriticConfig, RealismCritic};
use forge_core::estimator::{train_estimator, EstimatorConfig};
use forge_core::objective::ObjectiveConfig;
use forge_core::sample_generator::{generate_dataset, write_dataset, Corpus};
use forge_core::saliency::{load_backend, Direction, SaliencyConfig};
use forge_core::ForgeError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::Semaphore;
use uuid::Uuid;

use crate::error::{Result, ServiceError};
use crate::store::Store;

const LOG_TAIL: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    DatasetGen,
    CriticTrain,
    EstimatorTrain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobStatus {
    fn rank(self) -> u8 {
        match self {
            JobStatus::Queued => 0,
            JobStatus::Running => 1,
            JobStatus::Done | JobStatus::Failed | JobStatus::Cancelled => 2,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: Uuid,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    pub artifacts: Vec<PathBuf>,
    pub log_tail: Vec<String>,
    pub error: Option<String>,
    pub config: Value,
    pub created: DateTime<Utc>,
    pub updated: DateTime<Utc>,
}

impl JobRecord {
    pub fn new(kind: JobKind, config: Value) -> Self {
        let now = Utc::now();
        Self {
            id: Uuid::new_v4(),
            kind,
            status: JobStatus::Queued,
            progress: 0.0,
            artifacts: Vec::new(),
            log_tail: Vec::new(),
            error: None,
            config,
            created: now,
            updated: now,
        }
    }

    /// Moves the status forward; terminal records never change again.
    pub fn transition(&mut self, to: JobStatus) -> Result<()> {
        if self.status.is_terminal() {
            return Err(ServiceError::Conflict("job_finished", format!("job {} is already {:?}", self.id, self.status)));
        }
        if to.rank() <= self.status.rank() {
            return Err(ServiceError::Conflict(
                "invalid_transition",
                format!("job {} cannot go from {:?} to {:?}", self.id, self.status, to),
            ));
        }
        self.status = to;
        self.updated = Utc::now();
        Ok(())
    }

    pub fn log(&mut self, line: impl Into<String>) {
        self.log_tail.push(line.into());
        if self.log_tail.len() > LOG_TAIL {
            let extra = self.log_tail.len() - LOG_TAIL;
            self.log_tail.drain(..extra);
        }
        self.updated = Utc::now();
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetGenConfig {
    pub corpus: PathBuf,
    pub count_per_class: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_shard_size")]
    pub shard_size: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticTrainConfig {
    pub corpus: PathBuf,
    pub samples_per_class: usize,
    #[serde(default = "default_heldout_fraction")]
    pub heldout_fraction: f64,
    /// Seeds sample generation; the model seed lives in `critic`.
    #[serde(default)]
    pub seed: u64,
    /// Overrides for [`CriticConfig`].
    #[serde(default)]
    pub critic: Value,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorTrainConfig {
    pub corpus: PathBuf,
    pub critic: PathBuf,
    pub direction: Direction,
    #[serde(default)]
    pub max_items: Option<usize>,
    #[serde(default = "default_heldout_fraction")]
    pub heldout_fraction: f64,
    /// Seeds synthetic masks; the model seed lives in `estimator`.
    #[serde(default)]
    pub seed: u64,
    /// Overrides for [`EstimatorConfig`].
    #[serde(default)]
    pub estimator: Value,
    /// Overrides for [`ObjectiveConfig`].
    #[serde(default)]
    pub objective: Value,
    #[serde(default)]
    pub saliency: SaliencyConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_shard_size() -> usize {
    500
}

fn default_heldout_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug)]
pub enum JobSpec {
    DatasetGen(DatasetGenConfig),
    CriticTrain(CriticTrainConfig),
    EstimatorTrain(EstimatorTrainConfig),
}

fn merge(base: &mut Value, overrides: &Value) {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) if !o.is_null() => *b = o.clone(),
        _ => {}
    }
}

/// `T::default()` with the fields present in `overrides` replaced.
pub fn with_defaults<T: Default + Serialize + DeserializeOwned>(overrides: &Value) -> forge_core::Result<T> {
    let mut base = serde_json::to_value(T::default())?;
    merge(&mut base, overrides);
    Ok(serde_json::from_value(base)?)
}

fn check_fraction(f: f64) -> forge_core::Result<()> {
    if (0.0..1.0).contains(&f) {
        Ok(())
    } else {
        Err(ForgeError::InvalidParameter(format!("heldout_fraction {f} must lie in [0, 1)")))
    }
}

impl JobSpec {
    /// Validates a job request without touching the corpus contents.
    pub fn parse(kind: JobKind, config: &Value) -> forge_core::Result<Self> {
        let spec = match kind {
            JobKind::DatasetGen => {
                let c: DatasetGenConfig = serde_json::from_value(config.clone())?;
                if c.count_per_class == 0 {
                    return Err(ForgeError::InvalidParameter("count_per_class must be positive".into()));
                }
                JobSpec::DatasetGen(c)
            }
            JobKind::CriticTrain => {
                let c: CriticTrainConfig = serde_json::from_value(config.clone())?;
                check_fraction(c.heldout_fraction)?;
                with_defaults::<CriticConfig>(&c.critic)?.validate()?;
                JobSpec::CriticTrain(c)
            }
            JobKind::EstimatorTrain => {
                let c: EstimatorTrainConfig = serde_json::from_value(config.clone())?;
                check_fraction(c.heldout_fraction)?;
                with_defaults::<EstimatorConfig>(&c.estimator)?.validate()?;
                with_defaults::<ObjectiveConfig>(&c.objective)?.validate()?;
                JobSpec::EstimatorTrain(c)
            }
        };
        if !spec.corpus().is_dir() {
            return Err(ForgeError::Input(format!("corpus {} is not a directory", spec.corpus().display())));
        }
        Ok(spec)
    }

    pub fn kind(&self) -> JobKind {
        match self {
            JobSpec::DatasetGen(_) => JobKind::DatasetGen,
            JobSpec::CriticTrain(_) => JobKind::CriticTrain,
            JobSpec::EstimatorTrain(_) => JobKind::EstimatorTrain,
        }
    }

    fn corpus(&self) -> &Path {
        match self {
            JobSpec::DatasetGen(c) => &c.corpus,
            JobSpec::CriticTrain(c) => &c.corpus,
            JobSpec::EstimatorTrain(c) => &c.corpus,
        }
    }

    fn out(&self) -> Option<&PathBuf> {
        match self {
            JobSpec::DatasetGen(c) => c.out.as_ref(),
            JobSpec::CriticTrain(c) => c.out.as_ref(),
            JobSpec::EstimatorTrain(c) => c.out.as_ref(),
        }
    }

    /// Output directory: the configured `out`, or `default`.
    pub fn out_dir(&self, default: PathBuf) -> PathBuf {
        self.out().cloned().unwrap_or(default)
    }
}

/// Receives progress and log lines from a running job.
pub trait JobSink {
    fn progress(&mut self, fraction: f64);
    fn log(&mut self, line: String);
}

fn held_split(corpus: &Corpus, fraction: f64) -> (Corpus, Corpus) {
    let n = corpus.images().len();
    let held = ((n as f64) * fraction).round() as usize;
    corpus.split(n - held.min(n.saturating_sub(1)))
}

fn write_json(path: &Path, value: &impl Serialize) -> forge_core::Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Runs a job to completion on the current thread and returns its artifacts.
pub fn run_job(spec: &JobSpec, out_dir: &Path, sink: &mut dyn JobSink) -> forge_core::Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    match spec {
        JobSpec::DatasetGen(c) => {
            let corpus = Corpus::open(&c.corpus)?;
            sink.log(format!("generating {} samples per class from {} images", c.count_per_class, corpus.images().len()));
            let manifest = write_dataset(&corpus, c.count_per_class, c.seed, out_dir, c.shard_size, |done, total| {
                sink.progress(done as f64 / total as f64)
            })?;
            sink.log(format!("wrote {} real and {} fake samples", manifest.real, manifest.fake));
            Ok(vec![out_dir.join("manifest.json")])
        }
        JobSpec::CriticTrain(c) => {
            let cfg: CriticConfig = with_defaults(&c.critic)?;
            let corpus = Corpus::open(&c.corpus)?;
            let (train, held) = held_split(&corpus, c.heldout_fraction);
            let samples = generate_dataset(&train, c.samples_per_class, c.seed)?.collect::<forge_core::Result<Vec<_>>>()?;
            let heldout = if held.entries.is_empty() {
                Vec::new()
            } else {
                let n = (c.samples_per_class / 4).max(10);
                generate_dataset(&held, n, c.seed.wrapping_add(1))?.collect::<forge_core::Result<Vec<_>>>()?
            };
            sink.log(format!("training on {} samples, {} held out", samples.len(), heldout.len()));
            let epochs = cfg.epochs.max(1);
            let held_ref = (!heldout.is_empty()).then_some(heldout.as_slice());
            let (model, report) = train_critic(&samples, held_ref, cfg, |e| {
                sink.log(format!("epoch {} loss {:.5} heldout_auc {:?}", e.epoch, e.loss, e.heldout_auc));
                sink.progress((e.epoch + 1) as f64 / epochs as f64);
            })?;
            let ckpt = out_dir.join("critic.ckpt");
            model.save(&ckpt)?;
            let rep = out_dir.join("critic_report.json");
            write_json(&rep, &report)?;
            Ok(vec![ckpt, rep])
        }
        JobSpec::EstimatorTrain(c) => {
            let mut cfg: EstimatorConfig = with_defaults(&c.estimator)?;
            cfg.direction = c.direction;
            let objective: ObjectiveConfig = with_defaults(&c.objective)?;
            let critic = RealismCritic::load(&c.critic)?;
            let backend = load_backend(&c.saliency)?;
            let corpus = Corpus::open(&c.corpus)?;
            let (train, held) = held_split(&corpus, c.heldout_fraction);
            let mut items = train.region_items(c.seed)?;
            if let Some(n) = c.max_items {
                items.truncate(n);
            }
            let held_items = if held.entries.is_empty() { Vec::new() } else { held.region_items(c.seed.wrapping_add(1))? };
            sink.log(format!("training {} estimator on {} regions ({} mode)", c.direction, items.len(), objective.mode));
            let epochs = cfg.epochs.max(1);
            let run = train_estimator(&items, &held_items, &critic, backend.as_ref(), cfg, &objective, |e| {
                sink.log(format!(
                    "epoch {} loss {:.5} S {:.4} dR {:.4} critic_loss {:?}",
                    e.epoch, e.loss, e.mean_s, e.mean_delta_r, e.critic_loss
                ));
                sink.progress((e.epoch + 1) as f64 / epochs as f64);
            })?;
            let ckpt = out_dir.join(format!("estimator_{}.ckpt", c.direction));
            run.model.save(&ckpt)?;
            let rep = out_dir.join(format!("estimator_{}_report.json", c.direction));
            write_json(&rep, &run.report)?;
            let mut artifacts = vec![ckpt, rep];
            if let Some(adv) = &run.critic {
                let path = out_dir.join("critic_adversarial.ckpt");
                adv.save(&path)?;
                artifacts.push(path);
            }
            if let Some(reason) = &run.report.diverged {
                return Err(ForgeError::Divergence(format!(
                    "{reason}; the last finite model was saved to {}",
                    artifacts[0].display()
                )));
            }
            Ok(artifacts)
        }
    }
}

struct StoreSink {
    store: Arc<Store>,
    id: Uuid,
    last: f64,
}

impl JobSink for StoreSink {
    fn progress(&mut self, fraction: f64) {
        if fraction - self.last >= 0.01 || fraction >= 1.0 {
            self.last = fraction;
            let _ = self.store.update_job(self.id, |j| {
                j.progress = fraction.clamp(0.0, 1.0);
                Ok(())
            });
        }
    }

    fn log(&mut self, line: String) {
        log::info!("job {}: {line}", self.id);
        let _ = self.store.update_job(self.id, |j| {
            j.log(line);
            Ok(())
        });
    }
}

/// Runs submitted jobs on a bounded pool of blocking workers.
#[derive(Clone)]
pub struct JobQueue {
    store: Arc<Store>,
    permits: Arc<Semaphore>,
}

impl JobQueue {
    pub fn new(store: Arc<Store>, workers: usize) -> Self {
        Self { store, permits: Arc::new(Semaphore::new(workers)) }
    }

    pub fn add_workers(&self, n: usize) {
        self.permits.add_permits(n);
    }

    /// Validates and enqueues a job; must be called inside a Tokio runtime.
    pub fn submit(&self, kind: JobKind, config: Value) -> Result<JobRecord> {
        let spec = JobSpec::parse(kind, &config)?;
        let record = JobRecord::new(kind, config);
        let id = record.id;
        self.store.insert_job(record.clone())?;
        let store = self.store.clone();
        let permits = self.permits.clone();
        tokio::spawn(async move {
            let Ok(_permit) = permits.acquire_owned().await else { return };
            let start = store.update_job(id, |j| {
                if j.status != JobStatus::Queued {
                    return Ok(false);
                }
                j.transition(JobStatus::Running)?;
                Ok(true)
            });
            if !matches!(start, Ok(true)) {
                return;
            }
            let out_dir = spec.out_dir(store.artifacts_dir().join("jobs").join(id.to_string()));
            let worker_store = store.clone();
            let result = tokio::task::spawn_blocking(move || {
                let mut sink = StoreSink { store: worker_store, id, last: 0.0 };
                run_job(&spec, &out_dir, &mut sink)
            })
            .await;
            let _ = store.update_job(id, |j| {
                match result {
                    Ok(Ok(artifacts)) => {
                        j.artifacts = artifacts;
                        j.progress = 1.0;
                        j.transition(JobStatus::Done)?;
                    }
                    Ok(Err(e)) => {
                        j.log(format!("error: {e}"));
                        j.error = Some(e.to_string());
                        j.transition(JobStatus::Failed)?;
                    }
                    Err(e) => {
                        j.log(format!("worker panicked: {e}"));
                        j.error = Some(e.to_string());
                        j.transition(JobStatus::Failed)?;
                    }
                }
                Ok(())
            });
        });
        Ok(record)
    }

    /// Cancels a job that has not started.
    pub fn cancel(&self, id: Uuid) -> Result<JobRecord> {
        self.store.update_job(id, |j| {
            if j.status != JobStatus::Queued {
                return Err(ServiceError::Conflict("job_not_queued", format!("job {id} is {:?}", j.status)));
            }
            j.transition(JobStatus::Cancelled)?;
            Ok(j.clone())
        })
    }
}
