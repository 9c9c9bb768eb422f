//! A single-worker queue for decomposition jobs.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use concept_lab::conceptor::{decompose, DecompositionConfig};
use concept_lab::oracle::PooledCosine;
use concept_lab::persist::{RunKind, RunRecord};
use concept_lab::subject::Subject;
use serde::{Deserialize, Serialize};

use crate::workspace::Workspace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_active(self) -> bool {
        matches!(self, JobState::Queued | JobState::Running)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobHandle {
    pub job_id: String,
    pub kind: String,
    pub concept: String,
    pub state: JobState,
    pub progress: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decomposition_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Task {
    job_id: String,
    concept: String,
    config: DecompositionConfig,
}

#[derive(Default)]
struct Table {
    next: u64,
    jobs: BTreeMap<String, JobHandle>,
}

/// Jobs run one at a time on a dedicated thread; at most one active job
/// per concept.
#[derive(Clone)]
pub struct JobQueue {
    table: Arc<Mutex<Table>>,
    tx: mpsc::Sender<Task>,
}

#[derive(Debug, PartialEq)]
pub enum SubmitError {
    /// An active job already targets the concept; carries its id.
    Conflict(String),
}

impl JobQueue {
    pub fn start(subject: Arc<Subject>, workspace: Workspace) -> Self {
        let table: Arc<Mutex<Table>> = Arc::default();
        let (tx, rx) = mpsc::channel::<Task>();
        let t = table.clone();
        std::thread::spawn(move || {
            for task in rx {
                run_task(&t, &subject, &workspace, task);
            }
        });
        Self { table, tx }
    }

    pub fn submit(&self, concept: &str, config: DecompositionConfig) -> Result<JobHandle, SubmitError> {
        let mut table = self.table.lock().unwrap();
        if let Some(active) = table.jobs.values().find(|j| j.concept == concept && j.state.is_active()) {
            return Err(SubmitError::Conflict(active.job_id.clone()));
        }
        table.next += 1;
        let handle = JobHandle {
            job_id: format!("job-{}", table.next),
            kind: "decompose".into(),
            concept: concept.to_string(),
            state: JobState::Queued,
            progress: 0.0,
            result_path: None,
            decomposition_id: None,
            error: None,
        };
        table.jobs.insert(handle.job_id.clone(), handle.clone());
        drop(table);
        let task = Task {
            job_id: handle.job_id.clone(),
            concept: concept.to_string(),
            config,
        };
        if self.tx.send(task).is_err() {
            self.update(&handle.job_id, |j| {
                j.state = JobState::Failed;
                j.error = Some("job worker stopped".into());
            });
        }
        Ok(handle)
    }

    pub fn get(&self, id: &str) -> Option<JobHandle> {
        self.table.lock().unwrap().jobs.get(id).cloned()
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobHandle)) {
        update(&self.table, id, f)
    }
}

fn update(table: &Mutex<Table>, id: &str, f: impl FnOnce(&mut JobHandle)) {
    if let Some(j) = table.lock().unwrap().jobs.get_mut(id) {
        f(j);
    }
}

fn run_task(table: &Mutex<Table>, subject: &Subject, workspace: &Workspace, task: Task) {
    update(table, &task.job_id, |j| j.state = JobState::Running);
    let mut progress = |step: usize, total: usize| {
        let frac = step as f64 / total.max(1) as f64;
        update(table, &task.job_id, |j| j.progress = frac);
    };
    let result = decompose(subject, &task.concept, &task.config, &PooledCosine::default(), &mut progress).and_then(|dec| {
        let (id, path) = workspace.save_decomposition(&dec)?;
        let inputs = BTreeMap::from([
            ("subject_hash".to_string(), subject.weights_hash().to_string()),
            ("vocab_hash".to_string(), subject.vocab_hash().to_string()),
            ("concept".to_string(), task.concept.clone()),
        ]);
        workspace.record(RunRecord::new(RunKind::Decompose, &task.config, inputs)?.with_outputs([path.display().to_string()]))?;
        Ok((id, path))
    });
    update(table, &task.job_id, |j| match result {
        Ok((id, path)) => {
            j.state = JobState::Done;
            j.progress = 1.0;
            j.decomposition_id = Some(id);
            j.result_path = Some(path.display().to_string());
        }
        Err(e) => {
            log::error!("job {} failed: {e}", j.job_id);
            j.state = JobState::Failed;
            j.error = Some(e.to_string());
        }
    });
}
