use thiserror::Error;

use crate::allocsim::UsageError;
use crate::graph::{BuildError, InstantiationError, TemplateParseError};
use crate::kernel::InputError;
use crate::liveness::AnalysisError;
use crate::planner::{PlanError, ValidationError};
use crate::vmm::VmmError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Parse(#[from] TemplateParseError),
    #[error(transparent)]
    Instantiation(#[from] InstantiationError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Vmm(#[from] VmmError),
    #[error(transparent)]
    Usage(#[from] UsageError),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("step {step} does not fit: activation budget {budget} B, non-chunkable floor {floor} B")]
    Infeasible { step: u32, budget: u64, floor: u64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
