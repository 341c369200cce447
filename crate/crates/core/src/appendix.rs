//! Monte Carlo check that the common noise-variance estimator and the mean
//! of the individual estimators have the same expectation, the average of
//! the subjects' noise variances, even when those variances differ.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pairs::PairField;
use crate::rng;
use crate::variance::{noise_variance_common, noise_variance_individual, SubjectDifference};

pub const MIN_REPLICATES: usize = 1000;
const CHUNK: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct AppendixReport {
    pub subjects: usize,
    pub replicates: usize,
    pub seed: u64,
    pub analytic_value: f64,
    pub mean_common: f64,
    pub se_common: f64,
    pub z_common: f64,
    pub mean_of_individuals: f64,
    pub se_individuals: f64,
    pub z_individuals: f64,
    /// Mean and z-score of the paired difference common - individuals.
    pub mean_difference: f64,
    pub z_difference: f64,
}

impl AppendixReport {
    pub fn max_abs_z(&self) -> f64 {
        self.z_common.abs().max(self.z_individuals.abs())
    }

    pub fn to_text(&self) -> String {
        let g = crate::io::format_g17;
        [
            ("subjects", self.subjects.to_string()),
            ("replicates", self.replicates.to_string()),
            ("seed", self.seed.to_string()),
            ("analytic_value", g(self.analytic_value)),
            ("mean_common", g(self.mean_common)),
            ("se_common", g(self.se_common)),
            ("z_common", g(self.z_common)),
            ("mean_of_individuals", g(self.mean_of_individuals)),
            ("se_individuals", g(self.se_individuals)),
            ("z_individuals", g(self.z_individuals)),
            ("mean_difference", g(self.mean_difference)),
            ("z_difference", g(self.z_difference)),
        ]
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sum: [f64; 3],
    sum_sq: [f64; 3],
}

impl Moments {
    fn push(&mut self, x: [f64; 3]) {
        self.n += 1.0;
        for k in 0..3 {
            self.sum[k] += x[k];
            self.sum_sq[k] += x[k] * x[k];
        }
    }

    fn merge(mut self, o: &Moments) -> Self {
        self.n += o.n;
        for k in 0..3 {
            self.sum[k] += o.sum[k];
            self.sum_sq[k] += o.sum_sq[k];
        }
        self
    }

    fn mean_se(&self, k: usize) -> (f64, f64) {
        let mean = self.sum[k] / self.n;
        let var = (self.sum_sq[k] - self.n * mean * mean) / (self.n - 1.0);
        (mean, (var.max(0.0) / self.n).sqrt())
    }
}

fn one_replicate(dists: &[Normal<f64>], rng: &mut rng::Rng) -> Result<[f64; 3]> {
    let diffs: Vec<SubjectDifference> = dists
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let (u1, u2) = (d.sample(rng), d.sample(rng));
            Ok(SubjectDifference {
                subject_id: i.to_string(),
                pairs: PairField::from_values(2, vec![u2 - u1])?,
            })
        })
        .collect::<Result<_>>()?;
    let common = noise_variance_common(&diffs)?.at(0);
    let individuals = diffs
        .iter()
        .map(|d| noise_variance_individual(d).at(0))
        .sum::<f64>()
        / diffs.len() as f64;
    Ok([common, individuals, common - individuals])
}

/// `noise_sds[i]` is subject `i`'s noise standard deviation per session.
pub fn verify_expectation_identity(
    subjects: usize,
    replicates: usize,
    noise_sds: &[f64],
    seed: u64,
) -> Result<AppendixReport> {
    if subjects < 2 {
        return Err(Error::TooFewSubjects {
            needed: 2,
            found: subjects,
        });
    }
    if replicates < MIN_REPLICATES {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_REPLICATES} replicates, got {replicates}"
        )));
    }
    if noise_sds.len() != subjects {
        return Err(Error::DimensionMismatch {
            expected: subjects,
            found: noise_sds.len(),
        });
    }
    let dists = noise_sds
        .iter()
        .map(|&s| {
            if s > 0.0 && s.is_finite() {
                Normal::new(0.0, s).map_err(|e| Error::InvalidInput(e.to_string()))
            } else {
                Err(Error::InvalidInput(format!(
                    "noise sd {s} must be positive"
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let chunks = replicates.div_ceil(CHUNK);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::substream(seed, "appendix", c as u64);
            let n = CHUNK.min(replicates - c * CHUNK);
            let mut m = Moments::default();
            for _ in 0..n {
                m.push(one_replicate(&dists, &mut rng)?);
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = parts.iter().fold(Moments::default(), |acc, m| acc.merge(m));

    let analytic = noise_sds.iter().map(|s| s * s).sum::<f64>() / subjects as f64;
    let (mc, sc) = total.mean_se(0);
    let (mi, si) = total.mean_se(1);
    let (md, sd) = total.mean_se(2);
    Ok(AppendixReport {
        subjects,
        replicates,
        seed,
        analytic_value: analytic,
        mean_common: mc,
        se_common: sc,
        z_common: (mc - analytic) / sc,
        mean_of_individuals: mi,
        se_individuals: si,
        z_individuals: (mi - analytic) / si,
        mean_difference: md,
        z_difference: if sd > 0.0 { md / sd } else { 0.0 },
    })
}

/// Standard deviations whose variances are `1/10, 2/10, ..., I/10`.
pub fn heterogeneous_sds(subjects: usize) -> Vec<f64> {
    (1..=subjects).map(|i| (i as f64 / 10.0).sqrt()).collect()
}
