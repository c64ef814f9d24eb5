use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Embed,
    Classify,
    Audit,
    AdapterTrain,
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    fn rank(self) -> u8 {
        match self {
            JobState::Queued => 0,
            JobState::Running => 1,
            JobState::Done | JobState::Failed => 2,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub project_id: String,
    pub state: JobState,
    pub progress: f64,
    /// Endpoint holding the artifact the job produced.
    pub result_ref: Option<String>,
    /// Short summary of the outcome.
    pub result: Option<Value>,
    pub error: Option<String>,
    pub error_code: Option<String>,
}

#[derive(Debug, Default)]
pub struct JobRegistry {
    next: AtomicU64,
    jobs: RwLock<Vec<Job>>,
}

impl JobRegistry {
    pub fn create(&self, kind: JobKind, project_id: &str) -> Job {
        let n = self.next.fetch_add(1, Ordering::SeqCst) + 1;
        let job = Job {
            id: format!("job-{n:06}"),
            kind,
            project_id: project_id.to_string(),
            state: JobState::Queued,
            progress: 0.0,
            result_ref: None,
            result: None,
            error: None,
            error_code: None,
        };
        self.jobs.write().expect("job registry poisoned").push(job.clone());
        job
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.jobs
            .read()
            .expect("job registry poisoned")
            .iter()
            .find(|j| j.id == id)
            .cloned()
    }

    pub fn list(&self, project_id: Option<&str>) -> Vec<Job> {
        self.jobs
            .read()
            .expect("job registry poisoned")
            .iter()
            .filter(|j| project_id.is_none_or(|p| j.project_id == p))
            .cloned()
            .collect()
    }

    /// Moves a job forward. Backward state moves and shrinking progress are
    /// ignored, as is anything after a terminal state.
    pub fn advance(&self, id: &str, state: JobState, progress: f64) {
        self.update(id, |j| {
            if state.rank() >= j.state.rank() {
                j.state = state;
            }
            j.progress = j.progress.max(progress.clamp(0.0, 1.0));
        });
    }

    pub fn finish(&self, id: &str, result_ref: Option<String>, result: Value) {
        self.update(id, |j| {
            j.state = JobState::Done;
            j.progress = 1.0;
            j.result_ref = result_ref;
            j.result = Some(result);
        });
    }

    pub fn fail(&self, id: &str, code: &str, message: String) {
        self.update(id, |j| {
            j.state = JobState::Failed;
            j.error = Some(message);
            j.error_code = Some(code.to_string());
        });
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) {
        let mut jobs = self.jobs.write().expect("job registry poisoned");
        if let Some(j) = jobs.iter_mut().find(|j| j.id == id) {
            if !j.state.is_terminal() {
                f(j);
            }
        }
    }
}
