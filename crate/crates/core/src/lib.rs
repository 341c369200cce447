//! Shrinkage estimation of voxel-pair functional connectivity and spectral
//! parcellation of the shrunk matrices, with a simulation harness and a
//! pipeline for split-scan reliability analyses.

pub mod appendix;
pub mod connectivity;
pub mod error;
pub mod estimation;
pub mod io;
pub mod metrics;
pub mod pairs;
pub mod pipeline;
pub mod rng;
pub mod simulation;
pub mod spectral;
pub mod variance;

pub use connectivity::{ConnectivityMatrix, Space, TimeSeriesMatrix};
pub use error::{Error, Result};
pub use estimation::{DataMode, GlobalNoiseSource};
pub use pairs::PairField;
pub use spectral::Parcellation;
pub use variance::{NoiseMethod, SignalNoiseSource};
