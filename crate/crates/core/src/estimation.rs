//! Estimation steps shared by the simulation harness and the real-data
//! pipeline: correlations per subject, variance components for a data mode,
//! and shrinking every subject's raw estimate.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::connectivity::{
    apply_shrinkage, compute_correlation, group_mean, ConnectivityMatrix, GroupMeanMatrix, Space,
    TimeSeriesMatrix,
};
use crate::error::{Error, Result};
use crate::spectral::{
    build_affinity, spectral_cluster, KMeansConfig, Parcellation, SpectralConfig,
};
use crate::variance::{
    adjust_global_for_split, difference_matrices, noise_variance_common, LambdaSet, NoiseMethod,
    SignalNoiseSource, ThetaModel, VarianceComponents,
};

/// Where the global noise variance comes from when noise is otherwise
/// estimated from split single scans.
#[derive(Debug, Clone, PartialEq)]
pub enum GlobalNoiseSource {
    /// Both full sessions, as genuine test-retest replicates.
    SecondSession,
    /// Split-scan estimate scaled by `theta(T)`, `T` the full scan length.
    ThetaAdjusted {
        model: ThetaModel,
        minutes_per_timepoint: f64,
    },
}

impl GlobalNoiseSource {
    pub fn name(&self) -> &'static str {
        match self {
            GlobalNoiseSource::SecondSession => "second-session",
            GlobalNoiseSource::ThetaAdjusted { .. } => "theta-adjusted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DataMode {
    /// Noise from the two halves of session 1.
    SingleSession,
    /// Noise from two genuine sessions.
    TestRetest,
}

impl DataMode {
    pub const ALL: [DataMode; 2] = [DataMode::SingleSession, DataMode::TestRetest];

    pub fn name(self) -> &'static str {
        match self {
            DataMode::SingleSession => "single-session",
            DataMode::TestRetest => "test-retest",
        }
    }
}

impl fmt::Display for DataMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DataMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single-session" | "single" | "1" => Ok(DataMode::SingleSession),
            "test-retest" | "retest" | "2" => Ok(DataMode::TestRetest),
            other => Err(Error::InvalidInput(format!("unknown data mode '{other}'"))),
        }
    }
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "correlation" | "r" => Ok(Space::Correlation),
            "fisher-z" | "fisherz" | "z" => Ok(Space::FisherZ),
            other => Err(Error::InvalidInput(format!("unknown space '{other}'"))),
        }
    }
}

/// Correlation matrix of every series, relabelled with its subject id.
pub fn correlations(series: &[TimeSeriesMatrix]) -> Result<Vec<ConnectivityMatrix>> {
    series.par_iter().map(compute_correlation).collect()
}

pub fn to_space(cs: &[ConnectivityMatrix], space: Space) -> Result<Vec<ConnectivityMatrix>> {
    cs.iter().map(|c| c.to_space(space)).collect()
}

/// Global noise variance from genuine replicate pairs.
pub fn replicate_global(
    first: &[ConnectivityMatrix],
    second: &[ConnectivityMatrix],
) -> Result<f64> {
    Ok(noise_variance_common(&difference_matrices(first, second)?)?.mean())
}

/// Per-subject shrunk estimate in correlation space and its degree of
/// shrinkage.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrunkEstimate {
    pub correlation: ConnectivityMatrix,
    pub mean_lambda: f64,
}

pub fn shrink_subjects(
    raw: &[ConnectivityMatrix],
    mean: &GroupMeanMatrix,
    lambdas: &LambdaSet,
) -> Result<Vec<ShrunkEstimate>> {
    raw.iter()
        .enumerate()
        .map(|(i, w)| {
            let lambda = lambdas.for_subject(i);
            let shrunk = apply_shrinkage(w, mean, lambda)?;
            Ok(ShrunkEstimate {
                correlation: shrunk.to_space(Space::Correlation)?,
                mean_lambda: lambda.mean(),
            })
        })
        .collect()
}

/// Inputs for one shrinkage run, every matrix already in the shrinkage space.
pub struct ModeInputs<'a> {
    /// Estimates to be shrunk, one per subject.
    pub raw: &'a [ConnectivityMatrix],
    pub replicate_a: &'a [ConnectivityMatrix],
    pub replicate_b: &'a [ConnectivityMatrix],
    pub total_sessions: Vec<&'a [ConnectivityMatrix]>,
    pub global_override: Option<f64>,
}

/// All requested methods for one data mode. Output order follows `methods`.
pub fn shrink_for_methods(
    inputs: &ModeInputs<'_>,
    methods: &[NoiseMethod],
    source: SignalNoiseSource,
) -> Result<Vec<(NoiseMethod, Vec<ShrunkEstimate>)>> {
    let components = VarianceComponents::estimate(
        inputs.replicate_a,
        inputs.replicate_b,
        &inputs.total_sessions,
        inputs.global_override,
    )?;
    let mean = group_mean(inputs.raw)?;
    methods
        .iter()
        .map(|&m| {
            let lambdas = components.lambdas(m, source)?;
            Ok((m, shrink_subjects(inputs.raw, &mean, &lambdas)?))
        })
        .collect()
}

/// Global override for split-scan data, given the split-scan replicates and
/// (for the second-session source) the full sessions.
pub fn split_scan_global(
    source: &GlobalNoiseSource,
    halves: (&[ConnectivityMatrix], &[ConnectivityMatrix]),
    full_sessions: Option<(&[ConnectivityMatrix], &[ConnectivityMatrix])>,
    full_timepoints: usize,
) -> Result<f64> {
    match source {
        GlobalNoiseSource::SecondSession => {
            let (a, b) = full_sessions.ok_or_else(|| {
                Error::InvalidInput(
                    "second-session global noise needs two sessions per subject".into(),
                )
            })?;
            replicate_global(a, b)
        }
        GlobalNoiseSource::ThetaAdjusted {
            model,
            minutes_per_timepoint,
        } => {
            let half = replicate_global(halves.0, halves.1)?;
            adjust_global_for_split(half, model, full_timepoints as f64 * minutes_per_timepoint)
        }
    }
}

pub fn cluster_correlation(
    c: &ConnectivityMatrix,
    k: usize,
    seed: u64,
    n_init: usize,
) -> Result<Parcellation> {
    let cfg = SpectralConfig {
        k,
        seed,
        kmeans: KMeansConfig {
            n_init,
            ..KMeansConfig::default()
        },
    };
    spectral_cluster(&build_affinity(c)?, &cfg)
}
