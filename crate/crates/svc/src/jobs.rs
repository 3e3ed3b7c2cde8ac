//! Training jobs. At most one job per dataset hash is queued or running.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Succeeded { model_id: String },
    Failed { code: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub dataset_hash: String,
    pub created_at: String,
    #[serde(flatten)]
    pub status: JobStatus,
}

#[derive(Default)]
pub struct JobStore {
    inner: Mutex<Inner>,
}

#[derive(Default)]
struct Inner {
    jobs: HashMap<String, Job>,
    /// Dataset hash -> id of its running job.
    active: HashMap<String, String>,
}

impl JobStore {
    /// Starts a job for `dataset_hash`, or returns the id of the job
    /// already running for it as the error.
    pub fn start(&self, dataset_hash: &str) -> Result<Job, String> {
        let mut inner = self.inner.lock().expect("job store poisoned");
        if let Some(id) = inner.active.get(dataset_hash) {
            return Err(id.clone());
        }
        let job = Job {
            id: Uuid::new_v4().to_string(),
            dataset_hash: dataset_hash.to_string(),
            created_at: crate::registry::now_rfc3339(),
            status: JobStatus::Running,
        };
        inner
            .active
            .insert(dataset_hash.to_string(), job.id.clone());
        inner.jobs.insert(job.id.clone(), job.clone());
        Ok(job)
    }

    pub fn finish(&self, id: &str, status: JobStatus) {
        let mut inner = self.inner.lock().expect("job store poisoned");
        if let Some(job) = inner.jobs.get_mut(id) {
            job.status = status;
            let hash = job.dataset_hash.clone();
            if inner.active.get(&hash).map(String::as_str) == Some(id) {
                inner.active.remove(&hash);
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.inner
            .lock()
            .expect("job store poisoned")
            .jobs
            .get(id)
            .cloned()
    }
}
