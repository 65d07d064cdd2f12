use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("element {element} is degenerate (rest volume {volume:e})")]
    DegenerateElement { element: usize, volume: f64 },
    #[error("element {element} has negative orientation (rest volume {volume:e})")]
    NegativeOrientation { element: usize, volume: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("inverted element{} (det F = {det:e})", fmt_element(.element))]
    InvertedElement { element: Option<usize>, det: f64 },
    #[error("simulation diverged at frame {frame}")]
    Divergence { frame: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward requires a scalar loss, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("missing normalization statistics: {0}")]
    MissingStatistics(String),
    #[error("missing parameter entry: {0}")]
    MissingParameter(String),
    #[error("trajectory {0} carries no internal forces")]
    MissingForces(usize),
    #[error("dataset contains no trajectories")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, segment starting at frame {frame} of trajectory {trajectory}")]
    NonFiniteLoss {
        epoch: usize,
        trajectory: usize,
        frame: usize,
    },
}

fn fmt_element(e: &Option<usize>) -> String {
    match e {
        Some(i) => alloc::format!(" {i}"),
        None => String::new(),
    }
}
