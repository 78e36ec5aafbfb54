//! Command failures and their exit codes.

use tensorgraph::data::DataError;
use tensorgraph::walkthrough::WalkthroughError;
use tensorgraph::{GraphError, PlacementError, RuntimeError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<PlacementError> for CliError {
    fn from(e: PlacementError) -> Self {
        match e {
            PlacementError::InvalidFleet(_) => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<WalkthroughError> for CliError {
    fn from(e: WalkthroughError) -> Self {
        match e {
            WalkthroughError::Data(d) => d.into(),
            WalkthroughError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_follow_the_error_class() {
        let bad_spec = DataError::BadSpec {
            spec: "x".into(),
            reason: "y".into(),
        };
        assert_eq!(CliError::from(bad_spec.clone()).exit_code(), 2);
        assert_eq!(CliError::from(WalkthroughError::Data(bad_spec)).exit_code(), 2);
        assert_eq!(CliError::from(WalkthroughError::Config("c".into())).exit_code(), 1);
        assert_eq!(CliError::from(RuntimeError::MissingFeed("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(PlacementError::InvalidFleet("f".into())).exit_code(), 2);
        let infeasible = PlacementError::ConstraintInfeasible {
            node: "n".into(),
            device: "d".into(),
            reason: "r".into(),
        };
        assert_eq!(CliError::from(infeasible).exit_code(), 3);
    }
}
