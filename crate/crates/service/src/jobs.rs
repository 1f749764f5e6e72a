//! In-process job queue. One worker thread runs jobs in submission order;
//! each job maps its dictionary on the pipeline's own worker pool.

use std::collections::HashMap;
use std::panic::AssertUnwindSafe;
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};

use cdemap_core::decomposer::DataDictionaryEntry;
use cdemap_core::pipeline::{map_dictionary, MappingResult, PipelineContext};
use chrono::{DateTime, Utc};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MappingJob {
    pub job_id: String,
    pub state: JobState,
    pub submitted_at: DateTime<Utc>,
    pub progress: Progress,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub results: Option<Arc<Vec<MappingResult>>>,
}

struct Submitted {
    job_id: String,
    entries: Vec<DataDictionaryEntry>,
    trace: bool,
}

pub struct JobQueue {
    jobs: Arc<Mutex<HashMap<String, MappingJob>>>,
    next: Mutex<u64>,
    sender: Mutex<mpsc::Sender<Submitted>>,
}

impl JobQueue {
    /// Starts the worker thread. Jobs run against whatever context `ctx`
    /// holds when they start.
    pub fn start(ctx: Arc<RwLock<Arc<PipelineContext>>>, parallelism: usize) -> Self {
        let jobs: Arc<Mutex<HashMap<String, MappingJob>>> = Arc::default();
        let (sender, receiver) = mpsc::channel::<Submitted>();
        let worker_jobs = jobs.clone();
        std::thread::Builder::new()
            .name("cdemap-jobs".into())
            .spawn(move || {
                for job in receiver {
                    run(&worker_jobs, &ctx, parallelism, job);
                }
            })
            .expect("spawn job worker");
        Self { jobs, next: Mutex::new(1), sender: Mutex::new(sender) }
    }

    pub fn submit(&self, entries: Vec<DataDictionaryEntry>, trace: bool) -> MappingJob {
        let job_id = {
            let mut next = self.next.lock().unwrap();
            let id = format!("job-{:06}", *next);
            *next += 1;
            id
        };
        let job = MappingJob {
            job_id: job_id.clone(),
            state: JobState::Queued,
            submitted_at: Utc::now(),
            progress: Progress { completed: 0, total: entries.len() },
            error: None,
            results: None,
        };
        self.jobs.lock().unwrap().insert(job_id.clone(), job.clone());
        let sent = self.sender.lock().unwrap().send(Submitted { job_id: job_id.clone(), entries, trace });
        if sent.is_err() {
            update(&self.jobs, &job_id, |j| {
                j.state = JobState::Failed;
                j.error = Some("job worker is not running".into());
            });
            return self.get(&job_id).expect("just inserted");
        }
        job
    }

    pub fn get(&self, job_id: &str) -> Option<MappingJob> {
        self.jobs.lock().unwrap().get(job_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.jobs.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn update(jobs: &Mutex<HashMap<String, MappingJob>>, job_id: &str, f: impl FnOnce(&mut MappingJob)) {
    if let Some(job) = jobs.lock().unwrap().get_mut(job_id) {
        f(job);
    }
}

fn run(
    jobs: &Mutex<HashMap<String, MappingJob>>,
    ctx: &RwLock<Arc<PipelineContext>>,
    parallelism: usize,
    job: Submitted,
) {
    update(jobs, &job.job_id, |j| j.state = JobState::Running);
    let mut ctx = PipelineContext::clone(&ctx.read().unwrap());
    ctx.config.trace = job.trace;
    let progress = |completed: usize, _total: usize| {
        // progress only moves forward even if callbacks race
        update(jobs, &job.job_id, |j| j.progress.completed = j.progress.completed.max(completed));
    };
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| {
        map_dictionary(&job.entries, &ctx, parallelism, Some(&progress))
    }));
    update(jobs, &job.job_id, |j| match outcome {
        Ok(results) => {
            j.progress.completed = j.progress.total;
            j.results = Some(Arc::new(results));
            j.state = JobState::Done;
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "mapping panicked".into());
            tracing::error!(job_id = %j.job_id, %message, "job failed");
            j.error = Some(message);
            j.state = JobState::Failed;
        }
    });
}
