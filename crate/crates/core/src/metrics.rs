//! Reliability measures: MSE of connectivity estimates against a reference,
//! Dice overlap of parcellation co-membership, and median summaries.

use crate::connectivity::ConnectivityMatrix;
use crate::error::{Error, Result};
use crate::spectral::Parcellation;

/// Mean squared difference over the strict upper triangle.
pub fn matrix_mse(estimate: &ConnectivityMatrix, truth: &ConnectivityMatrix) -> Result<f64> {
    estimate.pairs().check_same_dim(truth.pairs())?;
    if estimate.space() != truth.space() {
        return Err(Error::MixedSpace);
    }
    if estimate.pairs().is_empty() {
        return Err(Error::EmptyInput);
    }
    let ss: f64 = estimate
        .pairs()
        .values()
        .iter()
        .zip(truth.pairs().values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ss / estimate.pairs().len() as f64)
}

/// Co-membership pair counts over distinct voxel pairs drawn from `voxels`.
fn pair_counts(a: &Parcellation, b: &Parcellation, voxels: &[usize]) -> (usize, usize, usize) {
    let (mut both, mut in_a, mut in_b) = (0, 0, 0);
    for (x, &v) in voxels.iter().enumerate() {
        for &w in &voxels[x + 1..] {
            let sa = a.same_parcel(v, w);
            let sb = b.same_parcel(v, w);
            in_a += usize::from(sa);
            in_b += usize::from(sb);
            both += usize::from(sa && sb);
        }
    }
    (both, in_a, in_b)
}

fn dice_over(a: &Parcellation, b: &Parcellation, voxels: &[usize]) -> f64 {
    let (both, in_a, in_b) = pair_counts(a, b, voxels);
    if in_a + in_b == 0 {
        // Both relations empty on this subset: they agree.
        return 1.0;
    }
    2.0 * both as f64 / (in_a + in_b) as f64
}

/// Dice coefficient of the two co-membership relations, self-pairs excluded.
pub fn dice(a: &Parcellation, b: &Parcellation) -> Result<f64> {
    if a.n_voxels() != b.n_voxels() {
        return Err(Error::DimensionMismatch {
            expected: a.n_voxels(),
            found: b.n_voxels(),
        });
    }
    let all: Vec<usize> = (0..a.n_voxels()).collect();
    Ok(dice_over(a, b, &all))
}

/// Dice restricted to pairs with both voxels in `subset`.
pub fn dice_restricted(a: &Parcellation, b: &Parcellation, subset: &[usize]) -> Result<f64> {
    if a.n_voxels() != b.n_voxels() {
        return Err(Error::DimensionMismatch {
            expected: a.n_voxels(),
            found: b.n_voxels(),
        });
    }
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut voxels = subset.to_vec();
    voxels.sort_unstable();
    voxels.dedup();
    if let Some(&bad) = voxels.iter().find(|&&v| v >= a.n_voxels()) {
        return Err(Error::InvalidInput(format!("voxel {bad} is out of range")));
    }
    Ok(dice_over(a, b, &voxels))
}

/// Median; even lengths average the two central order statistics.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// `100 (raw - shrunk) / raw`.
pub fn percent_decrease(raw: f64, shrunk: f64) -> f64 {
    100.0 * (raw - shrunk) / raw
}

/// `100 (shrunk - raw) / raw`.
pub fn percent_increase(raw: f64, shrunk: f64) -> f64 {
    100.0 * (shrunk - raw) / raw
}

/// One subject's (or subject-iteration's) raw and shrunk reliability.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectReliability {
    pub subject_id: String,
    pub mse_raw: Option<f64>,
    pub mse_shrunk: Option<f64>,
    pub dice_raw: Option<f64>,
    pub dice_shrunk: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityReport {
    pub subjects: Vec<SubjectReliability>,
    pub median_mse_raw: Option<f64>,
    pub median_mse_shrunk: Option<f64>,
    pub median_dice_raw: Option<f64>,
    pub median_dice_shrunk: Option<f64>,
    pub mse_percent_decrease: Option<f64>,
    pub dice_percent_increase: Option<f64>,
}

fn column_median(
    rows: &[SubjectReliability],
    f: impl Fn(&SubjectReliability) -> Option<f64>,
) -> Result<Option<f64>> {
    let values: Vec<f64> = rows.iter().filter_map(&f).collect();
    if values.is_empty() {
        Ok(None)
    } else if values.len() != rows.len() {
        Err(Error::InvalidInput(
            "metric present for only some subjects".into(),
        ))
    } else {
        median(&values).map(Some)
    }
}

/// Medians of every metric present, and the percent changes between them.
pub fn summarize(rows: Vec<SubjectReliability>) -> Result<ReliabilityReport> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let median_mse_raw = column_median(&rows, |r| r.mse_raw)?;
    let median_mse_shrunk = column_median(&rows, |r| r.mse_shrunk)?;
    let median_dice_raw = column_median(&rows, |r| r.dice_raw)?;
    let median_dice_shrunk = column_median(&rows, |r| r.dice_shrunk)?;
    Ok(ReliabilityReport {
        mse_percent_decrease: median_mse_raw
            .zip(median_mse_shrunk)
            .map(|(r, s)| percent_decrease(r, s)),
        dice_percent_increase: median_dice_raw
            .zip(median_dice_shrunk)
            .map(|(r, s)| percent_increase(r, s)),
        subjects: rows,
        median_mse_raw,
        median_mse_shrunk,
        median_dice_raw,
        median_dice_shrunk,
    })
}
