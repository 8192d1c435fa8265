use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice configuration: {0}")]
    InvalidConfig(String),

    #[error("cell index {index} out of range for a {side}x{side} lattice")]
    CellOutOfRange { index: usize, side: usize },

    #[error("schedule has {got} parameter vectors but the horizon is {expected}")]
    ScheduleLength { expected: usize, got: usize },

    #[error("horizon {horizon} too short for a lockdown starting at {start} (needs at least {needed})")]
    HorizonTooShort {
        horizon: usize,
        start: usize,
        needed: usize,
    },

    #[error("exact enumeration exceeded the size guard ({0} live paths)")]
    SizeGuard(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("ODE state left the simplex at step {step}: {state:?}")]
    SimplexExcursion { step: usize, state: [f64; 3] },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("bound violated: {0}")]
    BoundViolated(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::CellOutOfRange { .. } => "cell_out_of_range",
            Error::ScheduleLength { .. } => "schedule_length",
            Error::HorizonTooShort { .. } => "horizon_too_short",
            Error::SizeGuard(_) => "size_guard",
            Error::Shape(_) => "shape",
            Error::BackwardTwice => "backward_twice",
            Error::UnknownNode(_) => "unknown_node",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::SimplexExcursion { .. } => "simplex_excursion",
            Error::Checkpoint(_) => "checkpoint",
            Error::Dataset(_) => "dataset",
            Error::Training(_) => "training",
            Error::Evaluation(_) => "evaluation",
            Error::BoundViolated(_) => "bound_violated",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
