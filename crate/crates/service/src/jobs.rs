use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Cancelled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub state: JobState,
    pub progress: f64,
    pub message: String,
}

/// Training jobs. At most one is active (pending or running) at a time.
#[derive(Default)]
pub struct Jobs {
    next_id: u64,
    jobs: BTreeMap<u64, JobStatus>,
    active: Option<(u64, Arc<AtomicBool>)>,
}

impl Jobs {
    /// Registers a pending job and returns its id and cancel flag.
    pub fn start(&mut self) -> Result<(u64, Arc<AtomicBool>)> {
        if let Some((id, _)) = &self.active {
            return Err(ServiceError::conflict("training_active", format!("training job {id} is still active")));
        }
        self.next_id += 1;
        let id = self.next_id;
        let cancel = Arc::new(AtomicBool::new(false));
        self.jobs.insert(
            id,
            JobStatus {
                id,
                state: JobState::Pending,
                progress: 0.0,
                message: String::new(),
            },
        );
        self.active = Some((id, cancel.clone()));
        Ok((id, cancel))
    }

    pub fn get(&self, id: u64) -> Option<&JobStatus> {
        self.jobs.get(&id)
    }

    pub fn is_active(&self) -> bool {
        self.active.is_some()
    }

    /// Moves a job forward. Terminal states are final and progress never
    /// decreases.
    pub fn update(&mut self, id: u64, state: JobState, progress: Option<f64>, message: Option<String>) {
        let Some(job) = self.jobs.get_mut(&id) else {
            return;
        };
        if job.state.is_terminal() {
            return;
        }
        job.state = state;
        if let Some(p) = progress {
            job.progress = job.progress.max(p.clamp(0.0, 1.0));
        }
        if let Some(m) = message {
            job.message = m;
        }
        if state == JobState::Done {
            job.progress = 1.0;
        }
        if state.is_terminal() && self.active.as_ref().is_some_and(|(a, _)| *a == id) {
            self.active = None;
        }
    }

    /// Requests cancellation; the worker observes the flag.
    pub fn cancel(&mut self, id: u64) -> Result<JobStatus> {
        let job = self.jobs.get(&id).ok_or_else(|| ServiceError::NotFound(format!("unknown job {id}")))?;
        if let Some((a, flag)) = &self.active {
            if *a == id {
                flag.store(true, Ordering::Relaxed);
            }
        }
        Ok(job.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_active_job_and_monotone_states() {
        let mut jobs = Jobs::default();
        let (id, _) = jobs.start().unwrap();
        assert!(matches!(jobs.start(), Err(ServiceError::Conflict { .. })));
        jobs.update(id, JobState::Running, Some(0.5), None);
        jobs.update(id, JobState::Running, Some(0.2), None);
        assert_eq!(jobs.get(id).unwrap().progress, 0.5);
        jobs.update(id, JobState::Cancelled, None, None);
        jobs.update(id, JobState::Running, None, None);
        assert_eq!(jobs.get(id).unwrap().state, JobState::Cancelled);
        assert!(!jobs.is_active());
        assert!(jobs.start().is_ok());
        assert!(matches!(jobs.cancel(99), Err(ServiceError::NotFound(_))));
    }
}
