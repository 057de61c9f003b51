//! Job records and their progress feed.

use std::sync::Mutex;

use hairproxy_core::Progress;
use serde::Serialize;
use tokio::sync::watch;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running {
        stage: String,
        step: usize,
        /// Absent until the first optimizer step reports.
        loss: Option<f64>,
    },
    Done {
        result_id: String,
    },
    Failed {
        stage: String,
        message: String,
        partial: bool,
    },
}

impl JobState {
    fn rank(&self) -> u8 {
        match self {
            JobState::Queued => 0,
            JobState::Running { .. } => 1,
            JobState::Done { .. } | JobState::Failed { .. } => 2,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.rank() == 2
    }
}

/// One entry of a job's event log. `seq` is the index in the log.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JobEvent {
    Progress {
        seq: usize,
        stage: String,
        step: usize,
        loss: f64,
    },
    State {
        seq: usize,
        #[serde(flatten)]
        state: JobState,
    },
}

#[derive(Debug)]
struct Inner {
    state: JobState,
    events: Vec<JobEvent>,
}

#[derive(Debug)]
pub struct JobRecord {
    pub id: String,
    pub session: String,
    inner: Mutex<Inner>,
    /// Bumped on every event; long-poll and event-stream readers wait on it.
    version: watch::Sender<u64>,
}

impl JobRecord {
    pub fn new(id: String, session: String, state: JobState) -> Self {
        let events = vec![JobEvent::State {
            seq: 0,
            state: state.clone(),
        }];
        JobRecord {
            id,
            session,
            inner: Mutex::new(Inner { state, events }),
            version: watch::channel(0).0,
        }
    }

    pub fn state(&self) -> JobState {
        self.lock().state.clone()
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.version.subscribe()
    }

    /// Events from `from` on, and whether the job has finished.
    pub fn events_since(&self, from: usize) -> (Vec<JobEvent>, bool) {
        let inner = self.lock();
        let tail = inner.events.get(from..).unwrap_or(&[]).to_vec();
        (tail, inner.state.is_terminal())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Applies a transition. Backward moves (e.g. out of a terminal
    /// state) are ignored, so the visible state only advances.
    pub fn set_state(&self, state: JobState) -> bool {
        let mut inner = self.lock();
        if state.rank() < inner.state.rank() || inner.state.is_terminal() {
            return false;
        }
        let quiet_running = matches!(
            (&inner.state, &state),
            (JobState::Running { .. }, JobState::Running { .. })
        );
        inner.state = state.clone();
        if !quiet_running {
            let seq = inner.events.len();
            inner.events.push(JobEvent::State { seq, state });
        }
        drop(inner);
        self.version.send_modify(|v| *v += 1);
        true
    }

    fn progress(&self, stage: &str, step: usize, loss: f64) {
        let mut inner = self.lock();
        if inner.state.is_terminal() {
            return;
        }
        inner.state = JobState::Running {
            stage: stage.into(),
            step,
            loss: Some(loss),
        };
        let seq = inner.events.len();
        inner.events.push(JobEvent::Progress {
            seq,
            stage: stage.into(),
            step,
            loss,
        });
        drop(inner);
        self.version.send_modify(|v| *v += 1);
    }
}

/// Forwards optimizer reports into a job record unchanged.
pub struct JobProgress<'a>(pub &'a JobRecord);

impl Progress for JobProgress<'_> {
    fn report(&self, stage: &str, step: usize, loss: f64) {
        self.0.progress(stage, step, loss);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions_only_advance() {
        let job = JobRecord::new("j".into(), "s".into(), JobState::Queued);
        let running = JobState::Running {
            stage: "invert".into(),
            step: 0,
            loss: None,
        };
        assert!(job.set_state(running.clone()));
        assert!(job.set_state(JobState::Done {
            result_id: "j".into()
        }));
        assert!(!job.set_state(running));
        assert!(!job.set_state(JobState::Queued));
        assert!(matches!(job.state(), JobState::Done { .. }));
    }

    #[test]
    fn progress_is_logged_verbatim() {
        let job = JobRecord::new("j".into(), "s".into(), JobState::Queued);
        let p = JobProgress(&job);
        p.report("text", 3, 0.123456789012345);
        let (events, done) = job.events_since(1);
        assert!(!done);
        match &events[0] {
            JobEvent::Progress { loss, step, .. } => {
                assert_eq!(*loss, 0.123456789012345);
                assert_eq!(*step, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        let json = serde_json::to_string(&events[0]).unwrap();
        let back: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(back["loss"].as_f64().unwrap(), 0.123456789012345);
    }
}
