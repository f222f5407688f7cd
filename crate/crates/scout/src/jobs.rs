//! Asynchronous scan jobs on a bounded worker pool.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use scout_core::domain::{EnvironmentInput, ScanRecord, ScanStatus};

use crate::batch::{self, BatchManifest, BatchRow};
use crate::engine::{Engine, EngineError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Partial,
    Complete,
    Failed,
}

impl JobState {
    fn rank(self) -> u8 {
        match self {
            JobState::Queued => 0,
            JobState::Running => 1,
            JobState::Partial | JobState::Complete | JobState::Failed => 2,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 2
    }

    /// Transitions only move forward: queued, running, then one terminal state.
    pub fn can_advance_to(self, next: JobState) -> bool {
        next.rank() > self.rank()
    }

    fn of_scan(status: ScanStatus) -> Self {
        match status {
            ScanStatus::Complete => JobState::Complete,
            ScanStatus::Partial => JobState::Partial,
            ScanStatus::Failed => JobState::Failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct ScanJob {
    pub job_id: String,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// What a job scans: a decoded image, or a manifest row resolved when the
/// job starts.
pub enum JobInput {
    Ready {
        env: EnvironmentInput,
        model_id: String,
    },
    Row(BatchRow),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct BatchStatus {
    pub batch_id: String,
    pub total: usize,
    pub queued: usize,
    pub running: usize,
    pub complete: usize,
    pub partial: usize,
    pub failed: usize,
    pub done: bool,
    pub concurrency: usize,
    /// Most rows of this batch ever running at once.
    pub peak_running: usize,
    pub jobs: Vec<ScanJob>,
}

/// Tracks how many holders are inside a section and the most ever seen.
#[derive(Debug, Default)]
pub struct Gauge {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl Gauge {
    pub fn enter(self: &Arc<Self>) -> GaugeGuard {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        GaugeGuard(self.clone())
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

pub struct GaugeGuard(Arc<Gauge>);

impl Drop for GaugeGuard {
    fn drop(&mut self) {
        self.0.current.fetch_sub(1, Ordering::SeqCst);
    }
}

struct Batch {
    job_ids: Vec<String>,
    concurrency: usize,
    gauge: Arc<Gauge>,
}

pub struct JobRegistry {
    engine: Arc<Engine>,
    jobs: Mutex<HashMap<String, ScanJob>>,
    idempotency: Mutex<HashMap<String, (String, String)>>,
    batches: Mutex<HashMap<String, Batch>>,
    next_job: AtomicU64,
    next_batch: AtomicU64,
    pool: Arc<Semaphore>,
    workers: usize,
    running: Arc<Gauge>,
}

#[derive(Debug, thiserror::Error)]
#[error("idempotency key was already used with a different request body")]
pub struct KeyReuse;

impl JobRegistry {
    pub fn new(engine: Arc<Engine>, workers: usize) -> Arc<Self> {
        let workers = workers.max(1);
        Arc::new(Self {
            engine,
            jobs: Mutex::new(HashMap::new()),
            idempotency: Mutex::new(HashMap::new()),
            batches: Mutex::new(HashMap::new()),
            next_job: AtomicU64::new(1),
            next_batch: AtomicU64::new(1),
            pool: Arc::new(Semaphore::new(workers)),
            workers,
            running: Arc::new(Gauge::default()),
        })
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Jobs running across the whole service.
    pub fn running(&self) -> &Gauge {
        &self.running
    }

    pub fn job(&self, id: &str) -> Option<ScanJob> {
        self.jobs.lock().unwrap().get(id).cloned()
    }

    fn insert_job(&self) -> String {
        let id = format!("job-{:06}", self.next_job.fetch_add(1, Ordering::SeqCst));
        self.jobs.lock().unwrap().insert(
            id.clone(),
            ScanJob {
                job_id: id.clone(),
                state: JobState::Queued,
                scan_id: None,
                error: None,
            },
        );
        id
    }

    fn advance(&self, id: &str, state: JobState, scan_id: Option<String>, error: Option<String>) {
        let mut jobs = self.jobs.lock().unwrap();
        if let Some(job) = jobs.get_mut(id) {
            if job.state.can_advance_to(state) {
                job.state = state;
                job.scan_id = scan_id.or(job.scan_id.take());
                job.error = error;
            }
        }
    }

    /// Queues one scan. With an idempotency key, a repeat of the same body
    /// returns the original job.
    pub fn submit(
        self: &Arc<Self>,
        input: JobInput,
        idempotency: Option<(String, String)>,
    ) -> Result<String, KeyReuse> {
        let mut keys = self.idempotency.lock().unwrap();
        if let Some((key, body)) = &idempotency {
            if let Some((seen, job)) = keys.get(key) {
                return if seen == body { Ok(job.clone()) } else { Err(KeyReuse) };
            }
        }
        let id = self.insert_job();
        if let Some((key, body)) = idempotency {
            keys.insert(key, (body, id.clone()));
        }
        drop(keys);
        self.spawn(id.clone(), input, None);
        Ok(id)
    }

    pub fn submit_batch(self: &Arc<Self>, manifest: BatchManifest) -> String {
        let concurrency = manifest.concurrency.unwrap_or(self.workers).max(1);
        let limit = Arc::new(Semaphore::new(concurrency));
        let gauge = Arc::new(Gauge::default());
        let batch_id = format!("batch-{:06}", self.next_batch.fetch_add(1, Ordering::SeqCst));
        let mut job_ids = Vec::new();
        for row in manifest.rows {
            let id = self.insert_job();
            self.spawn(id.clone(), JobInput::Row(row), Some((limit.clone(), gauge.clone())));
            job_ids.push(id);
        }
        self.batches.lock().unwrap().insert(
            batch_id.clone(),
            Batch {
                job_ids,
                concurrency,
                gauge,
            },
        );
        batch_id
    }

    pub fn batch(&self, id: &str) -> Option<BatchStatus> {
        let batches = self.batches.lock().unwrap();
        let b = batches.get(id)?;
        let jobs: Vec<ScanJob> = b.job_ids.iter().filter_map(|j| self.job(j)).collect();
        let count = |s: JobState| jobs.iter().filter(|j| j.state == s).count();
        Some(BatchStatus {
            batch_id: id.to_string(),
            total: jobs.len(),
            queued: count(JobState::Queued),
            running: count(JobState::Running),
            complete: count(JobState::Complete),
            partial: count(JobState::Partial),
            failed: count(JobState::Failed),
            done: jobs.iter().all(|j| j.state.is_terminal()),
            concurrency: b.concurrency,
            peak_running: b.gauge.peak(),
            jobs,
        })
    }

    fn spawn(self: &Arc<Self>, id: String, input: JobInput, batch: Option<(Arc<Semaphore>, Arc<Gauge>)>) {
        let reg = self.clone();
        tokio::spawn(async move {
            let _batch_permit = match &batch {
                Some((limit, _)) => Some(limit.clone().acquire_owned().await.expect("semaphore open")),
                None => None,
            };
            let _permit = reg.pool.clone().acquire_owned().await.expect("semaphore open");
            let _running = reg.running.enter();
            let _batch_running = batch.as_ref().map(|(_, g)| g.enter());
            reg.advance(&id, JobState::Running, None, None);
            match reg.run(input).await {
                Ok(record) => {
                    let state = JobState::of_scan(record.status);
                    let error = (state == JobState::Failed).then(|| failure_summary(&record));
                    let scan_id = (state != JobState::Failed).then(|| record.id.clone());
                    reg.advance(&id, state, scan_id, error);
                }
                Err(e) => reg.advance(&id, JobState::Failed, None, Some(e.to_string())),
            }
        });
    }

    async fn run(&self, input: JobInput) -> Result<ScanRecord, EngineError> {
        match input {
            JobInput::Ready { env, model_id } => self.engine.scan(env, &model_id, None).await,
            JobInput::Row(row) => {
                let env = batch::row_environment(&row, None, &self.engine.store).await?;
                let model = self.engine.model(&row.model_id, None)?;
                let scan_id = batch::row_scan_id(&env, &model);
                self.engine.scan(env, &row.model_id, Some(scan_id)).await
            }
        }
    }
}

/// One line naming every failed step of a scan.
pub fn failure_summary(record: &ScanRecord) -> String {
    let steps: Vec<String> = record
        .failures
        .iter()
        .map(|f| format!("{} ({}, {} attempt(s))", f.task_name, f.error_kind, f.attempts))
        .collect();
    format!("scan failed: {}", steps.join("; "))
}
