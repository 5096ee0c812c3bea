use std::fmt;

use kfuse_core::frontend::FrontendError;
use kfuse_core::fuser::FuseError;
use kfuse_core::machine::MachineError;
use kfuse_core::search::SearchError;
use kfuse_core::sim::SimError;

#[derive(Debug)]
pub enum CliError {
    Io(String),
    Usage(String),
    Frontend { path: String, error: FrontendError },
    Fuse(FuseError),
    Machine(MachineError),
    Sim(SimError),
    Search(SearchError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Frontend { .. } => 3,
            CliError::Fuse(FuseError::Frontend(_)) => 3,
            CliError::Fuse(_) => 4,
            CliError::Machine(_) => 5,
            CliError::Sim(_) => 6,
            CliError::Search(_) => 7,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Io(m) | CliError::Usage(m) => f.write_str(m),
            CliError::Frontend { path, error } => match error.span() {
                Some(_) => write!(f, "{path}:{error}"),
                None => write!(f, "{path}: {error}"),
            },
            CliError::Fuse(e) => write!(f, "{e}"),
            CliError::Machine(e) => write!(f, "{e}"),
            CliError::Sim(e) => write!(f, "{e}"),
            CliError::Search(e) => write!(f, "{e}"),
        }
    }
}

impl From<FuseError> for CliError {
    fn from(e: FuseError) -> Self {
        CliError::Fuse(e)
    }
}

impl From<MachineError> for CliError {
    fn from(e: MachineError) -> Self {
        CliError::Machine(e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Sim(e)
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Fuse(f) => CliError::Fuse(f),
            SearchError::Machine(m) => CliError::Machine(m),
            other => CliError::Search(other),
        }
    }
}
