//! Job records and the append-only registry behind them.
//!
//! Every state change appends the full job as one JSON line to
//! `jobs.jsonl`; on open the last line per id wins. Progress updates stay
//! in memory so polling never touches the disk.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Preprocess,
    Fit,
    Diagnose,
    Poststratify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed)
    }

    /// Allowed moves: queued to running or failed, running to a terminal
    /// state. Terminal states never change.
    pub fn can_move_to(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Running) | (Queued, Failed) | (Running, Succeeded) | (Running, Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    /// Dataset id for preprocessing, fit id otherwise.
    pub target: String,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<JobProgress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Inner {
    jobs: BTreeMap<String, Job>,
    next: u64,
    log: File,
}

pub struct Registry {
    path: PathBuf,
    inner: Mutex<Inner>,
}

pub const INTERRUPTED: &str = "interrupted: the service stopped before the job finished";

fn append(log: &mut File, job: &Job) -> std::io::Result<()> {
    let mut line = serde_json::to_vec(job).map_err(std::io::Error::other)?;
    line.push(b'\n');
    log.write_all(&line)?;
    log.sync_data()
}

impl Registry {
    /// Loads `path`, failing every job that was queued or running when the
    /// previous process stopped. A torn last line is ignored.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut jobs: BTreeMap<String, Job> = BTreeMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                if let Ok(job) = serde_json::from_str::<Job>(&line?) {
                    jobs.insert(job.id.clone(), job);
                }
            }
        }
        let next = jobs
            .keys()
            .filter_map(|k| k.strip_prefix("job-")?.parse::<u64>().ok())
            .max()
            .unwrap_or(0)
            + 1;
        let mut log = OpenOptions::new().create(true).append(true).open(path)?;
        if std::fs::read(path)?.last().is_some_and(|b| *b != b'\n') {
            log.write_all(b"\n")?;
        }
        for job in jobs.values_mut() {
            if !job.state.is_terminal() {
                job.state = JobState::Failed;
                job.error = Some(INTERRUPTED.into());
                job.progress = None;
                append(&mut log, job)?;
            }
        }
        Ok(Registry {
            path: path.to_path_buf(),
            inner: Mutex::new(Inner { jobs, next, log }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn create(&self, kind: JobKind, target: &str) -> std::io::Result<Job> {
        let mut inner = self.inner.lock().expect("registry lock");
        let job = Job {
            id: format!("job-{}", inner.next),
            kind,
            target: target.into(),
            state: JobState::Queued,
            progress: None,
            error: None,
        };
        inner.next += 1;
        append(&mut inner.log, &job)?;
        inner.jobs.insert(job.id.clone(), job.clone());
        Ok(job)
    }

    /// Applies a state change if it is allowed; returns whether it was.
    pub fn transition(&self, id: &str, state: JobState, error: Option<String>) -> std::io::Result<bool> {
        let mut inner = self.inner.lock().expect("registry lock");
        let Inner { jobs, log, .. } = &mut *inner;
        let Some(job) = jobs.get_mut(id) else {
            return Ok(false);
        };
        if !job.state.can_move_to(state) {
            return Ok(false);
        }
        job.state = state;
        job.error = error;
        if state.is_terminal() {
            job.progress = None;
        }
        append(log, job)?;
        Ok(true)
    }

    pub fn set_progress(&self, id: &str, progress: JobProgress) {
        let mut inner = self.inner.lock().expect("registry lock");
        if let Some(job) = inner.jobs.get_mut(id) {
            if job.state == JobState::Running {
                job.progress = Some(progress);
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.inner.lock().expect("registry lock").jobs.get(id).cloned()
    }

    /// Most recent job of `kind` for `target`.
    pub fn latest(&self, kind: JobKind, target: &str) -> Option<Job> {
        let inner = self.inner.lock().expect("registry lock");
        inner
            .jobs
            .values()
            .filter(|j| j.kind == kind && j.target == target)
            .max_by_key(|j| j.id.strip_prefix("job-").and_then(|n| n.parse::<u64>().ok()))
            .cloned()
    }
}
