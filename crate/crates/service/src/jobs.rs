use serde::{Deserialize, Serialize};
use smartb_core::experiments::{SimulationKind, SimulationRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_final(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    PowerSim,
    SamplesizeSim,
}

impl From<SimulationKind> for JobKind {
    fn from(k: SimulationKind) -> Self {
        match k {
            SimulationKind::Power => JobKind::PowerSim,
            SimulationKind::Samplesize => JobKind::SamplesizeSim,
        }
    }
}

/// A submitted simulation and where it stands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    /// Submission order, used to restore the queue after a restart.
    pub seq: u64,
    pub kind: JobKind,
    pub status: JobStatus,
    pub config: SimulationRequest,
    pub progress: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl JobRecord {
    pub fn new(id: String, seq: u64, config: SimulationRequest) -> Self {
        Self {
            id,
            seq,
            kind: config.kind.into(),
            status: JobStatus::Queued,
            config,
            progress: 0.0,
            error: None,
        }
    }

    /// Moves to `next` if that is a forward step; returns whether it moved.
    pub fn advance(&mut self, next: JobStatus) -> bool {
        if next <= self.status || self.status.is_final() {
            return false;
        }
        self.status = next;
        if next == JobStatus::Done {
            self.progress = 1.0;
        }
        true
    }

    pub fn fail(&mut self, message: impl Into<String>) -> bool {
        let moved = self.advance(JobStatus::Failed);
        if moved {
            self.error = Some(message.into());
        }
        moved
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use smartb_core::experiments::GeneratorSource;
    use smartb_core::gee::ModelSpec;

    fn record() -> JobRecord {
        let gen = GeneratorSource::Table2 {
            rho: 0.6,
            odds_ratio: 2.0,
            null: false,
        };
        JobRecord::new(
            "x".into(),
            0,
            SimulationRequest::power(gen, ModelSpec::one_wave(1), 100, 10, 1),
        )
    }

    #[test]
    fn status_only_moves_forward() {
        let mut r = record();
        assert_eq!(r.kind, JobKind::PowerSim);
        assert!(r.advance(JobStatus::Running));
        assert!(!r.advance(JobStatus::Queued));
        assert!(r.advance(JobStatus::Done));
        assert_eq!(r.progress, 1.0);
        assert!(!r.fail("late"));
        assert_eq!(r.error, None);
    }

    #[test]
    fn kind_serializes_kebab() {
        let v = serde_json::to_value(record()).unwrap();
        assert_eq!(v["kind"], "power-sim");
        assert_eq!(v["status"], "queued");
    }
}
