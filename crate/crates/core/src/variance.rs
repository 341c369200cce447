//! Moment estimators for noise (within-subject), total and signal
//! (between-subject) variance at every voxel pair, and the shrinkage weights
//! built from them.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::connectivity::{
    compute_correlation, ConnectivityMatrix, ShrinkageField, ShrinkageScope, Space,
    TimeSeriesMatrix,
};
use crate::error::{Error, Result};
use crate::pairs::PairField;
use crate::rng;

/// Default log-scan-length coefficients for the split-scan adjustment.
pub const DEFAULT_THETA_BETA0: f64 = 0.590;
pub const DEFAULT_THETA_BETA1: f64 = 0.129;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NoiseMethod {
    Common,
    Individual,
    Scaled,
    Global,
}

impl NoiseMethod {
    pub const ALL: [NoiseMethod; 4] = [
        NoiseMethod::Common,
        NoiseMethod::Individual,
        NoiseMethod::Scaled,
        NoiseMethod::Global,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseMethod::Common => "common",
            NoiseMethod::Individual => "individual",
            NoiseMethod::Scaled => "scaled",
            NoiseMethod::Global => "global",
        }
    }

    /// Whether each subject gets its own noise field.
    pub fn is_per_subject(self) -> bool {
        matches!(self, NoiseMethod::Individual | NoiseMethod::Scaled)
    }
}

impl fmt::Display for NoiseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "common" | "c" => Ok(NoiseMethod::Common),
            "individual" | "i" => Ok(NoiseMethod::Individual),
            "scaled" | "s" => Ok(NoiseMethod::Scaled),
            "global" | "g" => Ok(NoiseMethod::Global),
            other => Err(Error::InvalidInput(format!(
                "unknown noise method '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseValues {
    PerPair(PairField),
    /// One value shared by every pair of an `n_voxels` region.
    Uniform {
        n_voxels: usize,
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVarianceField {
    pub method: NoiseMethod,
    pub scope: ShrinkageScope,
    pub values: NoiseValues,
}

impl NoiseVarianceField {
    pub fn n_voxels(&self) -> usize {
        match &self.values {
            NoiseValues::PerPair(p) => p.dim(),
            NoiseValues::Uniform { n_voxels, .. } => *n_voxels,
        }
    }

    /// Value at flat pair index `k`.
    pub fn at(&self, k: usize) -> f64 {
        match &self.values {
            NoiseValues::PerPair(p) => p.values()[k],
            NoiseValues::Uniform { value, .. } => *value,
        }
    }

    pub fn to_pairs(&self) -> PairField {
        match &self.values {
            NoiseValues::PerPair(p) => p.clone(),
            NoiseValues::Uniform { n_voxels, value } => PairField::filled(*n_voxels, *value),
        }
    }

    /// Mean over unique pairs.
    pub fn mean(&self) -> f64 {
        match &self.values {
            NoiseValues::PerPair(p) => p.mean(),
            NoiseValues::Uniform { value, .. } => *value,
        }
    }
}

/// `D_i = W_i2 - W_i1` for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDifference {
    pub subject_id: String,
    pub pairs: PairField,
}

/// Pairs the two replicate lists by subject id and subtracts. The output
/// follows the order of `first`.
pub fn difference_matrices(
    first: &[ConnectivityMatrix],
    second: &[ConnectivityMatrix],
) -> Result<Vec<SubjectDifference>> {
    for b in second {
        if !first.iter().any(|a| a.subject_id == b.subject_id) {
            return Err(Error::UnpairedSubject(b.subject_id.clone()));
        }
    }
    first
        .iter()
        .map(|a| {
            let b = second
                .iter()
                .find(|b| b.subject_id == a.subject_id)
                .ok_or_else(|| Error::MissingReplicate(a.subject_id.clone()))?;
            if a.space() != b.space() {
                return Err(Error::MixedSpace);
            }
            Ok(SubjectDifference {
                subject_id: a.subject_id.clone(),
                pairs: b.pairs().zip_map(a.pairs(), |w2, w1| w2 - w1)?,
            })
        })
        .collect()
}

fn check_diffs(d: &[SubjectDifference]) -> Result<usize> {
    if d.len() < 2 {
        return Err(Error::TooFewSubjects {
            needed: 2,
            found: d.len(),
        });
    }
    let n = d[0].pairs.dim();
    for di in d {
        d[0].pairs.check_same_dim(&di.pairs)?;
    }
    Ok(n)
}

/// Half the between-subject sample variance of the differences.
pub fn noise_variance_common(d: &[SubjectDifference]) -> Result<NoiseVarianceField> {
    let n = check_diffs(d)?;
    let count = d.len() as f64;
    let pairs = PairField::from_values(
        n,
        (0..d[0].pairs.len())
            .map(|k| {
                let mean = d.iter().map(|di| di.pairs.values()[k]).sum::<f64>() / count;
                let ss: f64 = d
                    .iter()
                    .map(|di| {
                        let e = di.pairs.values()[k] - mean;
                        e * e
                    })
                    .sum();
                ss / (2.0 * (count - 1.0))
            })
            .collect(),
    )?;
    Ok(NoiseVarianceField {
        method: NoiseMethod::Common,
        scope: ShrinkageScope::Shared,
        values: NoiseValues::PerPair(pairs),
    })
}

/// `D_i^2 / 2` at every pair.
pub fn noise_variance_individual(d: &SubjectDifference) -> NoiseVarianceField {
    NoiseVarianceField {
        method: NoiseMethod::Individual,
        scope: ShrinkageScope::PerSubject(d.subject_id.clone()),
        values: NoiseValues::PerPair(d.pairs.map(|v| 0.5 * v * v)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFactors {
    pub subject_ids: Vec<String>,
    pub gamma: Vec<f64>,
}

/// Each subject's mean squared difference over unique pairs, relative to
/// the average of those means.
pub fn scaling_factor(d: &[SubjectDifference]) -> Result<ScalingFactors> {
    let n = check_diffs(d)?;
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 voxels".into()));
    }
    let msd: Vec<f64> = d
        .iter()
        .map(|di| di.pairs.values().iter().map(|v| v * v).sum::<f64>() / di.pairs.len() as f64)
        .collect();
    let grand = msd.iter().sum::<f64>() / msd.len() as f64;
    if !(grand > 0.0) {
        return Err(Error::AllZeroDifferences);
    }
    Ok(ScalingFactors {
        subject_ids: d.iter().map(|di| di.subject_id.clone()).collect(),
        gamma: msd.iter().map(|m| m / grand).collect(),
    })
}

/// `gamma_i` times the common field, one field per subject.
pub fn noise_variance_scaled(
    common: &NoiseVarianceField,
    gamma: &ScalingFactors,
) -> Result<Vec<NoiseVarianceField>> {
    let base = match (&common.method, &common.values) {
        (NoiseMethod::Common, NoiseValues::PerPair(p)) => p,
        _ => {
            return Err(Error::InvalidInput(
                "scaled noise variance needs a common field".into(),
            ))
        }
    };
    gamma
        .subject_ids
        .iter()
        .zip(&gamma.gamma)
        .map(|(id, &g)| {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "scaling factor {g} for subject {id} is not positive"
                )));
            }
            Ok(NoiseVarianceField {
                method: NoiseMethod::Scaled,
                scope: ShrinkageScope::PerSubject(id.clone()),
                values: NoiseValues::PerPair(base.map(|v| g * v)),
            })
        })
        .collect()
}

/// Mean of the common field over unique pairs, shared by every pair.
pub fn noise_variance_global(common: &NoiseVarianceField) -> NoiseVarianceField {
    global_from_value(common.n_voxels(), common.mean())
}

pub fn global_from_value(n_voxels: usize, value: f64) -> NoiseVarianceField {
    NoiseVarianceField {
        method: NoiseMethod::Global,
        scope: ShrinkageScope::Shared,
        values: NoiseValues::Uniform { n_voxels, value },
    }
}

/// Global noise variance relative to the Fisher sampling variance
/// `1 / (T - 3)`. Diagnostic only.
pub fn sampling_variance_ratio(global: f64, n_timepoints: usize) -> f64 {
    global * (n_timepoints as f64 - 3.0)
}

/// `theta(t) = beta0 + beta1 * ln(t)` relating noise variance at scan
/// length `t` minutes to that at `t / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaModel {
    pub beta0: f64,
    pub beta1: f64,
    pub beta0_se: f64,
    pub beta1_se: f64,
    pub adj_r_squared: f64,
    /// `(t minutes, theta-hat(t))` behind the fit. Empty for fixed models.
    pub fitted_points: Vec<(f64, f64)>,
}

impl Default for ThetaModel {
    fn default() -> Self {
        Self::fixed(DEFAULT_THETA_BETA0, DEFAULT_THETA_BETA1)
    }
}

impl ThetaModel {
    pub fn fixed(beta0: f64, beta1: f64) -> Self {
        Self {
            beta0,
            beta1,
            beta0_se: f64::NAN,
            beta1_se: f64::NAN,
            adj_r_squared: f64::NAN,
            fitted_points: Vec::new(),
        }
    }

    pub fn predict(&self, t_minutes: f64) -> Result<f64> {
        if !(t_minutes > 0.0) {
            return Err(Error::InvalidInput(format!(
                "scan length {t_minutes} minutes is not positive"
            )));
        }
        let theta = self.beta0 + self.beta1 * t_minutes.ln();
        if !(theta > 0.0) {
            return Err(Error::NonpositiveTheta(theta));
        }
        Ok(theta)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "beta0 = {}\nbeta1 = {}\nbeta0_se = {}\nbeta1_se = {}\nadj_r_squared = {}\n",
            self.beta0, self.beta1, self.beta0_se, self.beta1_se, self.adj_r_squared
        );
        for (t, theta) in &self.fitted_points {
            s.push_str(&format!("point = {t} {theta}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut model = ThetaModel::fixed(f64::NAN, f64::NAN);
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad number '{v}' in theta model")))
        };
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("bad theta model line '{line}'")))?;
            match key.trim() {
                "beta0" => model.beta0 = num(value)?,
                "beta1" => model.beta1 = num(value)?,
                "beta0_se" => model.beta0_se = num(value)?,
                "beta1_se" => model.beta1_se = num(value)?,
                "adj_r_squared" => model.adj_r_squared = num(value)?,
                "point" => {
                    let mut it = value.split_whitespace();
                    let (Some(t), Some(th), None) = (it.next(), it.next(), it.next()) else {
                        return Err(Error::InvalidInput(format!("bad theta point '{value}'")));
                    };
                    model.fitted_points.push((num(t)?, num(th)?));
                }
                other => {
                    return Err(Error::InvalidInput(format!(
                        "unknown theta model key '{other}'"
                    )))
                }
            }
        }
        if !model.beta0.is_finite() || !model.beta1.is_finite() {
            return Err(Error::InvalidInput(
                "theta model needs beta0 and beta1".into(),
            ));
        }
        Ok(model)
    }
}

/// `theta(T) * sigma2(T / 2)` for a global noise variance estimated from
/// split scans of total length `t_minutes`.
pub fn adjust_global_for_split(
    global_half: f64,
    theta: &ThetaModel,
    t_minutes: f64,
) -> Result<f64> {
    if !(global_half >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "global noise variance {global_half} is negative"
        )));
    }
    Ok(theta.predict(t_minutes)? * global_half)
}

/// One subject's scanning sessions, in session order.
#[derive(Debug, Clone)]
pub struct SubjectScans {
    pub subject_id: String,
    pub sessions: Vec<TimeSeriesMatrix>,
}

#[derive(Debug, Clone)]
pub struct ThetaFitConfig {
    /// Scan lengths `t` (minutes) at which `theta(t)` is evaluated; noise
    /// variance is estimated at each `t` and at `t / 2`.
    pub lengths_minutes: Vec<f64>,
    pub timepoints_per_minute: f64,
    pub resamples: usize,
    pub seed: u64,
    pub space: Space,
}

impl Default for ThetaFitConfig {
    fn default() -> Self {
        Self {
            lengths_minutes: vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
            timepoints_per_minute: 30.0,
            resamples: 50,
            seed: 0,
            space: Space::FisherZ,
        }
    }
}

fn window_len(t_minutes: f64, rate: f64) -> usize {
    (t_minutes * rate).round() as usize
}

/// Mean over resamples of the global noise variance from random contiguous
/// windows of `len` timepoints within each session.
fn resampled_global(
    scans: &[SubjectScans],
    len: usize,
    cfg: &ThetaFitConfig,
    length_index: u64,
) -> Result<f64> {
    let length_seed = rng::derive_seed(cfg.seed, "theta-length", length_index);
    let globals = (0..cfg.resamples as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::substream(length_seed, "theta-resample", r);
            let mut first = Vec::with_capacity(scans.len());
            let mut second = Vec::with_capacity(scans.len());
            for subject in scans {
                for (j, out) in [&mut first, &mut second].into_iter().enumerate() {
                    let ts = &subject.sessions[j];
                    let start = rng.random_range(0..=ts.n_timepoints() - len);
                    let mut w = ts.window(start..start + len, format!("{}", j + 1))?;
                    w.subject_id = subject.subject_id.clone();
                    out.push(compute_correlation(&w)?.to_space(cfg.space)?);
                }
            }
            let d = difference_matrices(&first, &second)?;
            Ok(noise_variance_common(&d)?.mean())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(globals.iter().sum::<f64>() / globals.len() as f64)
}

/// Resamples windows of each length, forms `theta-hat(t)` and fits it by
/// least squares on `ln t`.
pub fn fit_theta_model(scans: &[SubjectScans], cfg: &ThetaFitConfig) -> Result<ThetaModel> {
    if cfg.resamples == 0 {
        return Err(Error::InvalidInput("resamples must be positive".into()));
    }
    let mut lengths = cfg.lengths_minutes.clone();
    lengths.sort_by(f64::total_cmp);
    lengths.dedup();
    if lengths.len() < 2 {
        return Err(Error::InsufficientLength(
            "need at least two distinct scan lengths to fit theta".into(),
        ));
    }
    if scans.len() < 2 {
        return Err(Error::TooFewSubjects {
            needed: 2,
            found: scans.len(),
        });
    }
    let shortest_session = scans
        .iter()
        .map(|s| {
            if s.sessions.len() < 2 {
                Err(Error::MissingReplicate(s.subject_id.clone()))
            } else {
                Ok(s.sessions[0]
                    .n_timepoints()
                    .min(s.sessions[1].n_timepoints()))
            }
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min()
        .unwrap_or(0);

    let windows = lengths
        .iter()
        .map(|&t| {
            let full = window_len(t, cfg.timepoints_per_minute);
            let half = window_len(t / 2.0, cfg.timepoints_per_minute);
            if half < 4 || full > shortest_session {
                return Err(Error::InsufficientLength(format!(
                    "scan length {t} min needs windows of {half} and {full} timepoints; sessions have {shortest_session}"
                )));
            }
            Ok((full, half))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut points = Vec::with_capacity(lengths.len());
    for (li, (&t, &(full, half))) in lengths.iter().zip(&windows).enumerate() {
        let at_full = resampled_global(scans, full, cfg, 2 * li as u64)?;
        let at_half = resampled_global(scans, half, cfg, 2 * li as u64 + 1)?;
        if !(at_half > 0.0) {
            return Err(Error::AllZeroDifferences);
        }
        points.push((t, at_full / at_half));
    }

    let model = ols_log_fit(&points)?;
    for &(t, _) in &points {
        model.predict(t)?;
    }
    Ok(model)
}

/// Least-squares fit of `theta = b0 + b1 ln t` with classical standard
/// errors and adjusted R^2.
pub fn ols_log_fit(points: &[(f64, f64)]) -> Result<ThetaModel> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InsufficientLength("need at least two points".into()));
    }
    let xs: Vec<f64> = points.iter().map(|(t, _)| t.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, y)| *y).collect();
    let nf = n as f64;
    let xbar = xs.iter().sum::<f64>() / nf;
    let ybar = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InsufficientLength(
            "scan lengths are not distinct".into(),
        ));
    }
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xbar) * (y - ybar))
        .sum();
    let syy: f64 = ys.iter().map(|y| (y - ybar).powi(2)).sum();
    let beta1 = sxy / sxx;
    let beta0 = ybar - beta1 * xbar;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - beta0 - beta1 * x).powi(2))
        .sum();
    let (beta0_se, beta1_se, adj_r_squared) = if n > 2 {
        let s2 = sse / (nf - 2.0);
        let r2 = if syy > 0.0 { 1.0 - sse / syy } else { f64::NAN };
        (
            (s2 * (1.0 / nf + xbar * xbar / sxx)).sqrt(),
            (s2 / sxx).sqrt(),
            1.0 - (1.0 - r2) * (nf - 1.0) / (nf - 2.0),
        )
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    Ok(ThetaModel {
        beta0,
        beta1,
        beta0_se,
        beta1_se,
        adj_r_squared,
        fitted_points: points.to_vec(),
    })
}

/// Mean over sessions of the per-session between-subject sample variance.
pub fn total_variance(sessions: &[&[ConnectivityMatrix]]) -> Result<PairField> {
    let first = sessions
        .first()
        .and_then(|s| s.first())
        .ok_or(Error::EmptyInput)?;
    let n = first.n_voxels();
    let mut acc = vec![0.0; first.pairs().len()];
    for session in sessions {
        if session.len() < 2 {
            return Err(Error::TooFewSubjects {
                needed: 2,
                found: session.len(),
            });
        }
        let count = session.len() as f64;
        for w in session.iter() {
            first.pairs().check_same_dim(w.pairs())?;
            if w.space() != first.space() {
                return Err(Error::MixedSpace);
            }
        }
        for (k, a) in acc.iter_mut().enumerate() {
            let mean = session.iter().map(|w| w.pairs().values()[k]).sum::<f64>() / count;
            let ss: f64 = session
                .iter()
                .map(|w| (w.pairs().values()[k] - mean).powi(2))
                .sum();
            *a += ss / (count - 1.0);
        }
    }
    let j = sessions.len() as f64;
    PairField::from_values(n, acc.into_iter().map(|a| a / j).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalVarianceField {
    pub pairs: PairField,
    /// Pairs where total minus noise was negative and was set to zero.
    pub clamped_count: usize,
}

/// Total minus noise variance, floored at zero.
pub fn signal_variance(
    total: &PairField,
    noise: &NoiseVarianceField,
) -> Result<SignalVarianceField> {
    if noise.method.is_per_subject() {
        return Err(Error::InvalidInput(
            "signal variance needs the common or global noise variance".into(),
        ));
    }
    if total.dim() != noise.n_voxels() {
        return Err(Error::DimensionMismatch {
            expected: total.dim(),
            found: noise.n_voxels(),
        });
    }
    let mut clamped_count = 0;
    let values = total
        .values()
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let s = t - noise.at(k);
            if s < 0.0 {
                clamped_count += 1;
                0.0
            } else {
                s
            }
        })
        .collect();
    Ok(SignalVarianceField {
        pairs: PairField::from_values(total.dim(), values)?,
        clamped_count,
    })
}

/// `noise / (signal + noise)`; pairs where both vanish get full shrinkage.
pub fn shrinkage_parameter(
    noise: &NoiseVarianceField,
    signal: &SignalVarianceField,
) -> Result<ShrinkageField> {
    if signal.pairs.dim() != noise.n_voxels() {
        return Err(Error::DimensionMismatch {
            expected: signal.pairs.dim(),
            found: noise.n_voxels(),
        });
    }
    let values = signal
        .pairs
        .values()
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let u = noise.at(k);
            if !(u >= 0.0) || !(s >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "negative variance at pair index {k}"
                )));
            }
            let denom = s + u;
            Ok(if denom > 0.0 { u / denom } else { 1.0 })
        })
        .collect::<Result<Vec<_>>>()?;
    ShrinkageField::new(
        PairField::from_values(signal.pairs.dim(), values)?,
        noise.scope.clone(),
    )
}

/// Which noise estimate is subtracted from the total variance to get the
/// signal variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalNoiseSource {
    /// Global for the global method, common otherwise.
    Matched,
    Common,
    Global,
}

impl SignalNoiseSource {
    pub fn name(self) -> &'static str {
        match self {
            SignalNoiseSource::Matched => "matched",
            SignalNoiseSource::Common => "common",
            SignalNoiseSource::Global => "global",
        }
    }
}

impl FromStr for SignalNoiseSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "matched" => Ok(SignalNoiseSource::Matched),
            "common" => Ok(SignalNoiseSource::Common),
            "global" => Ok(SignalNoiseSource::Global),
            other => Err(Error::InvalidInput(format!(
                "unknown signal noise source '{other}'"
            ))),
        }
    }
}

/// Shrinkage weights for every subject under one method.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaSet {
    Shared(ShrinkageField),
    PerSubject(Vec<ShrinkageField>),
}

impl LambdaSet {
    pub fn for_subject(&self, i: usize) -> &ShrinkageField {
        match self {
            LambdaSet::Shared(f) => f,
            LambdaSet::PerSubject(fs) => &fs[i],
        }
    }
}

/// Everything the four estimators need, computed once per data set.
#[derive(Debug, Clone)]
pub struct VarianceComponents {
    pub diffs: Vec<SubjectDifference>,
    pub common: NoiseVarianceField,
    pub global: NoiseVarianceField,
    pub total: PairField,
}

impl VarianceComponents {
    /// `first`/`second` are the two replicates per subject (same order),
    /// `total_sessions` the sessions entering the total variance. When
    /// `global_override` is set it replaces the mean of the common field.
    pub fn estimate(
        first: &[ConnectivityMatrix],
        second: &[ConnectivityMatrix],
        total_sessions: &[&[ConnectivityMatrix]],
        global_override: Option<f64>,
    ) -> Result<Self> {
        let diffs = difference_matrices(first, second)?;
        let common = noise_variance_common(&diffs)?;
        let global = match global_override {
            Some(v) if v >= 0.0 => global_from_value(common.n_voxels(), v),
            Some(v) => {
                return Err(Error::InvalidInput(format!(
                    "global noise variance {v} is negative"
                )))
            }
            None => noise_variance_global(&common),
        };
        let total = total_variance(total_sessions)?;
        Ok(Self {
            diffs,
            common,
            global,
            total,
        })
    }

    pub fn signal(
        &self,
        method: NoiseMethod,
        source: SignalNoiseSource,
    ) -> Result<SignalVarianceField> {
        let noise = match (source, method) {
            (SignalNoiseSource::Global, _) | (SignalNoiseSource::Matched, NoiseMethod::Global) => {
                &self.global
            }
            _ => &self.common,
        };
        signal_variance(&self.total, noise)
    }

    pub fn lambdas(&self, method: NoiseMethod, source: SignalNoiseSource) -> Result<LambdaSet> {
        let signal = self.signal(method, source)?;
        Ok(match method {
            NoiseMethod::Common => LambdaSet::Shared(shrinkage_parameter(&self.common, &signal)?),
            NoiseMethod::Global => LambdaSet::Shared(shrinkage_parameter(&self.global, &signal)?),
            NoiseMethod::Individual => LambdaSet::PerSubject(
                self.diffs
                    .iter()
                    .map(|d| shrinkage_parameter(&noise_variance_individual(d), &signal))
                    .collect::<Result<_>>()?,
            ),
            NoiseMethod::Scaled => {
                let gamma = scaling_factor(&self.diffs)?;
                LambdaSet::PerSubject(
                    noise_variance_scaled(&self.common, &gamma)?
                        .iter()
                        .map(|n| shrinkage_parameter(n, &signal))
                        .collect::<Result<_>>()?,
                )
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand_distr::{Distribution, Normal};

    fn diff(id: &str, n: usize, values: Vec<f64>) -> SubjectDifference {
        SubjectDifference {
            subject_id: id.into(),
            pairs: PairField::from_values(n, values).unwrap(),
        }
    }

    fn zmat(id: &str, n: usize, values: Vec<f64>) -> ConnectivityMatrix {
        ConnectivityMatrix::new(
            PairField::from_values(n, values).unwrap(),
            Space::FisherZ,
            id,
            "1",
        )
        .unwrap()
    }

    #[test]
    fn differences_pair_by_subject() {
        let s1 = vec![
            zmat("a", 3, vec![0.1, 0.2, 0.3]),
            zmat("b", 3, vec![0.0; 3]),
        ];
        let s2 = vec![
            zmat("b", 3, vec![0.1; 3]),
            zmat("a", 3, vec![0.2, 0.3, 0.4]),
        ];
        let d = difference_matrices(&s1, &s2).unwrap();
        assert_eq!(d[0].subject_id, "a");
        for v in d[0].pairs.values().iter().chain(d[1].pairs.values()) {
            assert_abs_diff_eq!(*v, 0.1, epsilon = 1e-15);
        }
        let same = difference_matrices(&s1, &s1).unwrap();
        assert!(same
            .iter()
            .all(|d| d.pairs.values().iter().all(|&v| v == 0.0)));
        assert!(matches!(
            difference_matrices(&s1, &s2[..1]),
            Err(Error::MissingReplicate(_))
        ));
        let extra = vec![s2[0].clone(), s2[1].clone(), zmat("c", 3, vec![0.0; 3])];
        assert!(matches!(
            difference_matrices(&s1, &extra),
            Err(Error::UnpairedSubject(_))
        ));
    }

    #[test]
    fn common_noise_hand_values() {
        let d = [diff("a", 2, vec![0.0]), diff("b", 2, vec![2.0])];
        assert_abs_diff_eq!(
            noise_variance_common(&d).unwrap().at(0),
            1.0,
            epsilon = 1e-15
        );
        let same = [
            diff("a", 2, vec![0.7]),
            diff("b", 2, vec![0.7]),
            diff("c", 2, vec![0.7]),
        ];
        assert_abs_diff_eq!(
            noise_variance_common(&same).unwrap().at(0),
            0.0,
            epsilon = 1e-15
        );
        assert!(matches!(
            noise_variance_common(&d[..1]),
            Err(Error::TooFewSubjects { .. })
        ));
    }

    #[test]
    fn common_noise_is_consistent() {
        // D_i ~ N(0, 2 sigma^2) at many independent pairs; the pair average
        // of the estimate has standard error sigma^2 * sqrt(2 / (I - 1) / P).
        let sigma2 = 0.03;
        let subjects = 20;
        let pairs_n = 50; // 1225 pairs
        let mut rng = rng::substream(11, "test", 0);
        let normal = Normal::new(0.0, (2.0 * sigma2 as f64).sqrt()).unwrap();
        let d: Vec<_> = (0..subjects)
            .map(|i| {
                let p = PairField::from_fn(pairs_n, |_, _| normal.sample(&mut rng));
                SubjectDifference {
                    subject_id: i.to_string(),
                    pairs: p,
                }
            })
            .collect();
        let est = noise_variance_common(&d).unwrap().mean();
        let pc = crate::pairs::pair_count(pairs_n) as f64;
        let se = sigma2 * (2.0 / (subjects as f64 - 1.0) / pc).sqrt();
        assert!(
            (est - sigma2).abs() < 3.0 * se,
            "{est} vs {sigma2} (se {se})"
        );
    }

    #[test]
    fn individual_noise_hand_values() {
        let f = |v: f64| noise_variance_individual(&diff("a", 2, vec![v])).at(0);
        assert_eq!(f(0.0), 0.0);
        assert_eq!(f(2.0), 2.0);
        assert_eq!(f(-2.0), 2.0);
    }

    #[test]
    fn scaling_factor_cases() {
        let g = scaling_factor(&[diff("a", 2, vec![1.0]), diff("b", 2, vec![-1.0])]).unwrap();
        assert_eq!(g.gamma, vec![1.0, 1.0]);
        let g =
            scaling_factor(&[diff("a", 2, vec![1.0]), diff("b", 2, vec![3f64.sqrt()])]).unwrap();
        assert_abs_diff_eq!(g.gamma[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g.gamma[1], 1.5, epsilon = 1e-15);
        assert!(matches!(
            scaling_factor(&[diff("a", 2, vec![0.0]), diff("b", 2, vec![0.0])]),
            Err(Error::AllZeroDifferences)
        ));
    }

    #[test]
    fn scaled_and_global() {
        let common = NoiseVarianceField {
            method: NoiseMethod::Common,
            scope: ShrinkageScope::Shared,
            values: NoiseValues::PerPair(PairField::from_values(3, vec![0.1, 0.2, 0.3]).unwrap()),
        };
        let gamma = ScalingFactors {
            subject_ids: vec!["a".into(), "b".into()],
            gamma: vec![1.0, 2.0],
        };
        let scaled = noise_variance_scaled(&common, &gamma).unwrap();
        assert_eq!(scaled[0].to_pairs(), common.to_pairs());
        assert_abs_diff_eq!(scaled[1].at(2), 0.6, epsilon = 1e-15);
        let global = noise_variance_global(&common);
        assert_abs_diff_eq!(global.at(0), 0.2, epsilon = 1e-15);
        assert_eq!(global.at(0), global.at(2));
        let twice = noise_variance_global(&global);
        assert_eq!(twice.at(1), global.at(1));
        let bad = ScalingFactors {
            subject_ids: vec!["a".into()],
            gamma: vec![0.0],
        };
        assert!(noise_variance_scaled(&common, &bad).is_err());
        assert!(noise_variance_scaled(&global, &gamma).is_err());
    }

    #[test]
    fn theta_adjustment() {
        let identity = ThetaModel::fixed(1.0, 0.0);
        assert_eq!(adjust_global_for_split(0.05, &identity, 7.0).unwrap(), 0.05);
        let paper = ThetaModel::default();
        let theta = 0.590 + 0.129 * 7f64.ln();
        assert_abs_diff_eq!(paper.predict(7.0).unwrap(), theta, epsilon = 1e-15);
        assert_abs_diff_eq!(theta, 0.841, epsilon = 5e-4);
        assert_abs_diff_eq!(
            adjust_global_for_split(0.05, &paper, 7.0).unwrap(),
            0.04205,
            epsilon = 1e-5
        );
        assert!(paper.predict(4.0).unwrap() < paper.predict(7.0).unwrap());
        let negative = ThetaModel::fixed(-1.0, 0.0);
        assert!(matches!(
            adjust_global_for_split(0.05, &negative, 7.0),
            Err(Error::NonpositiveTheta(_))
        ));
    }

    #[test]
    fn theta_text_round_trip() {
        let model = ols_log_fit(&[(2.0, 0.6), (4.0, 0.7), (7.0, 0.85)]).unwrap();
        let back = ThetaModel::from_text(&model.to_text()).unwrap();
        assert_eq!(back.beta0, model.beta0);
        assert_eq!(back.beta1, model.beta1);
        assert_eq!(back.fitted_points, model.fitted_points);
        assert!(ThetaModel::from_text("beta0 = 1\n").is_err());
    }

    #[test]
    fn ols_recovers_exact_line() {
        let pts: Vec<_> = [2.0f64, 3.0, 5.0, 7.0]
            .iter()
            .map(|&t| (t, 0.5 + 0.1 * t.ln()))
            .collect();
        let m = ols_log_fit(&pts).unwrap();
        assert_abs_diff_eq!(m.beta0, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.beta1, 0.1, epsilon = 1e-12);
        assert!(ols_log_fit(&pts[..1]).is_err());
    }

    #[test]
    fn theta_fit_rejects_single_length() {
        let ts = TimeSeriesMatrix::new(
            DMatrix::from_fn(40, 3, |r, c| ((r * 7 + c * 3) % 5) as f64),
            "a",
            "1",
        )
        .unwrap();
        let scans = vec![
            SubjectScans {
                subject_id: "a".into(),
                sessions: vec![ts.clone(), ts.clone()],
            },
            SubjectScans {
                subject_id: "b".into(),
                sessions: vec![ts.clone(), ts],
            },
        ];
        let cfg = ThetaFitConfig {
            lengths_minutes: vec![1.0],
            timepoints_per_minute: 10.0,
            ..Default::default()
        };
        assert!(matches!(
            fit_theta_model(&scans, &cfg),
            Err(Error::InsufficientLength(_))
        ));
        let too_long = ThetaFitConfig {
            lengths_minutes: vec![1.0, 5.0],
            timepoints_per_minute: 10.0,
            ..Default::default()
        };
        assert!(matches!(
            fit_theta_model(&scans, &too_long),
            Err(Error::InsufficientLength(_))
        ));
    }

    #[test]
    fn total_variance_cases() {
        let s = vec![zmat("a", 2, vec![0.2]), zmat("b", 2, vec![0.4])];
        let t = total_variance(&[&s]).unwrap();
        assert_abs_diff_eq!(t.values()[0], 0.02, epsilon = 1e-15);
        let same = vec![zmat("a", 2, vec![0.3]), zmat("b", 2, vec![0.3])];
        assert_eq!(total_variance(&[&same]).unwrap().values()[0], 0.0);
        let two = total_variance(&[&s, &same]).unwrap();
        assert_abs_diff_eq!(two.values()[0], 0.01, epsilon = 1e-15);
        assert!(total_variance(&[&s[..1]]).is_err());
    }

    #[test]
    fn signal_and_lambda_cases() {
        let noise = |v: f64| global_from_value(2, v);
        let total = |v: f64| PairField::from_values(2, vec![v]).unwrap();
        let s = signal_variance(&total(0.05), &noise(0.02)).unwrap();
        assert_abs_diff_eq!(s.pairs.values()[0], 0.03, epsilon = 1e-15);
        assert_eq!(s.clamped_count, 0);
        let s = signal_variance(&total(0.02), &noise(0.02)).unwrap();
        assert_eq!((s.pairs.values()[0], s.clamped_count), (0.0, 0));
        let s = signal_variance(&total(0.01), &noise(0.02)).unwrap();
        assert_eq!((s.pairs.values()[0], s.clamped_count), (0.0, 1));
        assert_eq!(
            shrinkage_parameter(&noise(0.02), &s)
                .unwrap()
                .pairs()
                .values()[0],
            1.0
        );

        let sig = |v: f64| SignalVarianceField {
            pairs: total(v),
            clamped_count: 0,
        };
        assert_eq!(
            shrinkage_parameter(&noise(0.03), &sig(0.03))
                .unwrap()
                .pairs()
                .values()[0],
            0.5
        );
        assert_abs_diff_eq!(
            shrinkage_parameter(&noise(0.02), &sig(0.06))
                .unwrap()
                .pairs()
                .values()[0],
            0.25,
            epsilon = 1e-15
        );
        assert_eq!(
            shrinkage_parameter(&noise(0.0), &sig(0.0))
                .unwrap()
                .pairs()
                .values()[0],
            1.0
        );
        assert_eq!(
            shrinkage_parameter(&noise(0.0), &sig(0.1))
                .unwrap()
                .pairs()
                .values()[0],
            0.0
        );

        let indiv = noise_variance_individual(&diff("a", 2, vec![0.1]));
        assert!(signal_variance(&total(0.05), &indiv).is_err());
    }

    #[test]
    fn components_produce_all_methods() {
        let s1: Vec<_> = (0..4)
            .map(|i| {
                zmat(
                    &i.to_string(),
                    3,
                    vec![0.1 * i as f64, 0.05, -0.02 * i as f64],
                )
            })
            .collect();
        let s2: Vec<_> = (0..4)
            .map(|i| {
                zmat(
                    &i.to_string(),
                    3,
                    vec![0.1 * i as f64 + 0.01 * (i % 2) as f64, 0.06, 0.03],
                )
            })
            .collect();
        let vc = VarianceComponents::estimate(&s1, &s2, &[&s1, &s2], None).unwrap();
        for m in NoiseMethod::ALL {
            let set = vc.lambdas(m, SignalNoiseSource::Matched).unwrap();
            for i in 0..4 {
                assert!(set
                    .for_subject(i)
                    .pairs()
                    .values()
                    .iter()
                    .all(|l| (0.0..=1.0).contains(l)));
            }
            assert_eq!(matches!(set, LambdaSet::PerSubject(_)), m.is_per_subject());
        }
        assert!(VarianceComponents::estimate(&s1, &s2, &[&s1], Some(-1.0)).is_err());
    }
}
