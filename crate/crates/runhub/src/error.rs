use scrub_core::attack::AttackError;
use scrub_core::genmodels::GenError;
use scrub_core::latentfeat::LatentError;
use scrub_core::metrics::MetricsError;
use scrub_core::synthdata::SynthError;
use scrub_core::unlearner::UnlearnError;
use thiserror::Error;

/// Failure of a pipeline stage. Validation problems map to exit code 2,
/// everything else to 1.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("missing {what}: {detail}")]
    Missing { what: String, detail: String },
    #[error("unknown {kind} id `{id}`")]
    UnknownId { kind: &'static str, id: String },
    #[error("{0}")]
    Runtime(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn is_validation(&self) -> bool {
        !matches!(self, RunError::Runtime(_) | RunError::Io(_))
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            2
        } else {
            1
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        RunError::Invalid(msg.into())
    }

    pub fn runtime(err: impl std::fmt::Display) -> Self {
        RunError::Runtime(err.to_string())
    }
}

impl From<GenError> for RunError {
    fn from(e: GenError) -> Self {
        match e {
            GenError::EmptyDataset | GenError::DegenerateLabels(_) | GenError::LatentDim { .. } => {
                RunError::Invalid(e.to_string())
            }
            other => RunError::runtime(other),
        }
    }
}

impl From<SynthError> for RunError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io(io) => RunError::Io(io),
            other => RunError::Invalid(other.to_string()),
        }
    }
}

impl From<LatentError> for RunError {
    fn from(e: LatentError) -> Self {
        match e {
            LatentError::Model(m) => m.into(),
            other => RunError::Invalid(other.to_string()),
        }
    }
}

impl From<UnlearnError> for RunError {
    fn from(e: UnlearnError) -> Self {
        match e {
            UnlearnError::InvalidConfig(_) | UnlearnError::EmptyOracleSet(_) => RunError::Invalid(e.to_string()),
            UnlearnError::Latent(l) => l.into(),
            UnlearnError::Model(m) => m.into(),
            other => RunError::runtime(other),
        }
    }
}

impl From<MetricsError> for RunError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Model(m) => m.into(),
            MetricsError::Latent(l) => l.into(),
            MetricsError::Unlearn(u) => u.into(),
            MetricsError::EmptyAblation | MetricsError::TooFewSamples { .. } | MetricsError::SingleClass { .. } => {
                RunError::Invalid(e.to_string())
            }
            other => RunError::runtime(other),
        }
    }
}

impl From<AttackError> for RunError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::InvalidConfig(_) | AttackError::SameProbe(_) => RunError::Invalid(e.to_string()),
            AttackError::Model(m) => m.into(),
            AttackError::Metrics(m) => m.into(),
            other => RunError::runtime(other),
        }
    }
}

impl From<serde_json::Error> for RunError {
    fn from(e: serde_json::Error) -> Self {
        RunError::runtime(e)
    }
}
