use fusemerge::fusion::FusionError;
use fusemerge::merge::MergeError;
use fusemerge::train::TrainError;
use fusemerge::StoreError;

/// Failure of a subcommand, classified by the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{message}")]
    Usage { message: String, usage: Option<String> },
    #[error("{0}")]
    Incompatible(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    NonFinite(String),
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage {
            message: message.into(),
            usage: None,
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError::Io(message.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } => 1,
            CliError::Incompatible(_) => 2,
            CliError::Io(_) => 3,
            CliError::NonFinite(_) => 4,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<MergeError> for CliError {
    fn from(e: MergeError) -> Self {
        match e {
            MergeError::Incompatible(report) => {
                let details: Vec<String> = report
                    .mismatches
                    .iter()
                    .map(|m| format!("{} ({:?} in checkpoint {})", m.name, m.kind, m.checkpoint))
                    .collect();
                CliError::Incompatible(format!("checkpoints are incompatible: {}", details.join(", ")))
            }
            MergeError::NoTargets
            | MergeError::MissingBase { .. }
            | MergeError::InvalidParameter(_)
            | MergeError::Pattern(_) => CliError::usage(e.to_string()),
            MergeError::MissingUnitWeight(_) | MergeError::UnitMismatch => CliError::Io(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::InvalidLambda(_) | FusionError::InvalidTopK(_) => CliError::usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::NonFinite(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::usage(e.to_string()),
            TrainError::Fusion(f) => f.into(),
            _ => CliError::Io(e.to_string()),
        }
    }
}
