use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("workspace has no positive area")]
    EmptyWorkspace,
    #[error("obstacle {0} is malformed")]
    InvalidObstacle(usize),
    #[error("obstacle {0} does not intersect the workspace")]
    ObstacleOutsideWorkspace(usize),
    #[error("boundary margin {0} must be finite and nonnegative")]
    InvalidMargin(f64),
    #[error("disconnected safe set ({components} components on the validation grid)")]
    Disconnected { components: usize },
    #[error("unknown environment preset {0:?}")]
    UnknownPreset(String),
    #[error("sample count must be at least 1")]
    ZeroCount,
    #[error("sampling gave up after {0} consecutive rejections")]
    SamplingExhausted(usize),
}

#[derive(Debug, Error)]
pub enum RoadmapError {
    #[error("root {0:?} is not in the safe set")]
    UnsafeRoot(Vec<f64>),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("RRT reached {reached} of {requested} nodes within {iterations} iterations")]
    RrtStalled {
        reached: usize,
        requested: usize,
        iterations: usize,
    },
    #[error("root index {0} out of range")]
    BadRoot(usize),
    #[error("root unreachable from {unreachable} of {total} nodes; increase k")]
    TooSparse { unreachable: usize, total: usize },
}

#[derive(Debug, Error)]
pub enum BiLipError {
    #[error("block {block} did not converge in {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        block: usize,
        iterations: usize,
        residual: f64,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Map(#[from] BiLipError),
    #[error("inversion failed at sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: BiLipError,
    },
    #[error("Jacobian condition number {cond:.3e} exceeds 10x the certified distortion {distortion:.3e}")]
    IllConditioned { cond: f64, distortion: f64 },
    #[error("Jacobian is singular")]
    Singular,
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("empty dataset: {0}")]
    EmptyData(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("map has no goal centre; call set_goal_center first")]
    NoGoal,
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}: {1}")]
    File(String, #[source] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}, line {1}: {2}")]
    Line(String, usize, #[source] serde_json::Error),
    #[error("invalid model: {0}")]
    Model(#[from] BiLipError),
    #[error("invalid input: {0}")]
    Invalid(String),
}
