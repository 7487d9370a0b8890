//! Goal-conditioned safe motion fields from certified bi-Lipschitz maps.
//!
//! A learned diffeomorphism `g` sends a geometrically complex safe set onto
//! the unit ball. Straight lines between `g(x0)` and `g(x*)` pulled back
//! through `g` give trajectories that stay safe, converge exponentially, and
//! have bounded speed for every start/goal pair in the set.

pub mod bilip;
pub mod env;
pub mod error;
pub mod flow;
pub mod io;
pub mod roadmap;
pub mod shear;
pub mod train;
pub mod verify;

pub use bilip::{BiLipConfig, BiLipMap, CertBounds, Diffeomorphism};
pub use env::Environment;
pub use error::{BiLipError, EnvError, FlowError, IoError, RoadmapError, TrainError};
pub use flow::{FlowConfig, Method, Trajectory};
pub use roadmap::{DemoTriple, LabeledDatasets, Roadmap};
pub use shear::ShearMap;
pub use io::ModelFile;
pub use train::{TrainConfig, TrainReport};
pub use verify::{CertificateReport, SuiteConfig};

/// A point in state space.
pub type StateVec = nalgebra::DVector<f64>;
