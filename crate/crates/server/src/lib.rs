//! HTTP front end for the pipeline. Datasets and fits are run directories
//! under a data root; long work runs as jobs on a fixed pool of workers
//! fed from one FIFO queue.
//!
//! Layout of the data root:
//!
//! ```text
//! jobs.jsonl                  job registry (append-only)
//! datasets/<id>/meta.json     upload digest and validation report
//! datasets/<id>/*.csv         uploaded inputs
//! datasets/<id>/run/          preprocess + describe run directory
//! fits/<id>/meta.json         dataset, model name
//! fits/<id>/spec.json
//! fits/<id>/run/              fit, diagnose, poststratify, report
//! ```

pub mod jobs;
mod routes;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::Router;
use mrp_core::pipeline::{Inputs, Run, RunConfig};
use mrp_core::sampler::{Progress, Stage};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use jobs::{Job, JobKind, JobProgress, JobState, Registry};

pub use routes::router;

/// Names of the multipart fields an upload must carry, with the file each
/// is stored as.
pub const UPLOAD_FIELDS: [(&str, &str); 4] = [
    ("records", "records.csv"),
    ("acs", "population.csv"),
    ("crosswalk", "crosswalk.csv"),
    ("tracts", "tracts.csv"),
];

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub data_root: PathBuf,
    pub workers: usize,
    /// Largest accepted request body in bytes.
    pub max_upload: usize,
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub id: String,
    pub digest: String,
    pub total_rows: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub reject_reasons: std::collections::BTreeMap<String, usize>,
    /// First rejected rows: line, record id and reason.
    pub rejects: Vec<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitMeta {
    pub id: String,
    pub dataset_id: String,
    /// Model directory name inside the run's stage directories.
    pub model: String,
}

/// Work handed to the pool.
#[derive(Debug)]
pub struct Task {
    pub job_id: String,
    pub run_dir: PathBuf,
    pub config: RunConfig,
}

pub struct AppState {
    pub config: ServerConfig,
    pub registry: Registry,
    queue: mpsc::UnboundedSender<Task>,
    ids: Mutex<()>,
}

impl AppState {
    pub fn datasets_dir(&self) -> PathBuf {
        self.config.data_root.join("datasets")
    }

    pub fn fits_dir(&self) -> PathBuf {
        self.config.data_root.join("fits")
    }

    /// Creates `<parent>/<prefix>-<n>` for the next free `n`.
    fn new_dir(&self, parent: &Path, prefix: &str) -> std::io::Result<(String, PathBuf)> {
        let _guard = self.ids.lock().expect("id lock");
        std::fs::create_dir_all(parent)?;
        let mut n = std::fs::read_dir(parent)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                e.file_name()
                    .to_str()?
                    .strip_prefix(&format!("{prefix}-"))?
                    .parse::<u64>()
                    .ok()
            })
            .max()
            .unwrap_or(0);
        loop {
            n += 1;
            let id = format!("{prefix}-{n}");
            let dir = parent.join(&id);
            match std::fs::create_dir(&dir) {
                Ok(()) => return Ok((id, dir)),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
    }

    fn enqueue(&self, kind: JobKind, target: &str, run_dir: PathBuf, config: RunConfig) -> std::io::Result<Job> {
        let job = self.registry.create(kind, target)?;
        let task = Task {
            job_id: job.id.clone(),
            run_dir,
            config,
        };
        if self.queue.send(task).is_err() {
            self.registry
                .transition(&job.id, JobState::Failed, Some("worker pool stopped".into()))?;
        }
        Ok(job)
    }

    /// Config for preprocessing an uploaded dataset.
    fn preprocess_config(&self, dataset_dir: &Path, seed: u64) -> RunConfig {
        let file = |name: &str| Some(dataset_dir.join(name));
        RunConfig {
            seed,
            inputs: Inputs {
                records: file("records.csv"),
                acs: file("population.csv"),
                crosswalk: file("crosswalk.csv"),
                tracts: file("tracts.csv"),
                preprocessed: None,
            },
            ..RunConfig::default()
        }
    }
}

struct JobSink<'a> {
    registry: &'a Registry,
    id: &'a str,
}

impl Progress for JobSink<'_> {
    fn update(&self, stage: Stage, chain: usize, iteration: usize) {
        self.registry.set_progress(
            self.id,
            JobProgress {
                stage: stage.as_str().into(),
                chain: Some(chain),
                iteration: Some(iteration),
            },
        );
    }
}

fn stage_progress(state: &AppState, id: &str, stage: &str) {
    state.registry.set_progress(
        id,
        JobProgress {
            stage: stage.into(),
            chain: None,
            iteration: None,
        },
    );
}

/// Runs one task to completion on the calling thread.
fn execute(state: &AppState, task: Task) {
    let id = task.job_id.as_str();
    let Some(job) = state.registry.get(id) else {
        return;
    };
    if !matches!(state.registry.transition(id, JobState::Running, None), Ok(true)) {
        return;
    }
    let result = (|| -> mrp_core::Result<()> {
        let mut run = Run::create(&task.run_dir, task.config)?;
        match job.kind {
            JobKind::Preprocess => {
                stage_progress(state, id, "preprocess");
                run.preprocess()?;
                stage_progress(state, id, "describe");
                run.describe()
            }
            JobKind::Fit => {
                stage_progress(state, id, "fit");
                run.fit(&JobSink {
                    registry: &state.registry,
                    id,
                })?;
                stage_progress(state, id, "diagnose");
                run.diagnose()?;
                stage_progress(state, id, "poststratify");
                run.poststratify()?;
                stage_progress(state, id, "report");
                run.report()
            }
            JobKind::Diagnose => run.diagnose(),
            JobKind::Poststratify => run.poststratify(),
        }
    })();
    let (next, error) = match result {
        Ok(()) => (JobState::Succeeded, None),
        Err(e) => (JobState::Failed, Some(e.to_string())),
    };
    let _ = state.registry.transition(id, next, error);
}

/// Opens the registry, starts `config.workers` workers and returns the
/// shared state. Must be called inside a Tokio runtime.
pub fn start(config: ServerConfig) -> std::io::Result<Arc<AppState>> {
    std::fs::create_dir_all(&config.data_root)?;
    let registry = Registry::open(&config.data_root.join("jobs.jsonl"))?;
    let (tx, rx) = mpsc::unbounded_channel::<Task>();
    let state = Arc::new(AppState {
        config,
        registry,
        queue: tx,
        ids: Mutex::new(()),
    });
    let rx = Arc::new(tokio::sync::Mutex::new(rx));
    for _ in 0..state.config.workers.max(1) {
        let rx = rx.clone();
        let weak = Arc::downgrade(&state);
        tokio::spawn(async move {
            loop {
                let task = rx.lock().await.recv().await;
                let (Some(task), Some(state)) = (task, weak.upgrade()) else {
                    break;
                };
                let _ = tokio::task::spawn_blocking(move || execute(&state, task)).await;
            }
        });
    }
    Ok(state)
}

/// Router plus worker pool for `config`.
pub fn app(config: ServerConfig) -> std::io::Result<(Router, Arc<AppState>)> {
    let state = start(config)?;
    Ok((router(state.clone()), state))
}
