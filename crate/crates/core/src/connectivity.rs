//! Time series, connectivity matrices, Fisher transforms, and the shrinkage
//! rule itself.

use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::pairs::PairField;

/// Largest correlation magnitude kept; exact +-1 is pulled in to this.
pub const CORRELATION_LIMIT: f64 = 1.0 - 1e-12;

/// Observed `T x V` signal for one subject-session. Columns are voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesMatrix {
    values: DMatrix<f64>,
    pub subject_id: String,
    pub session_id: String,
}

impl TimeSeriesMatrix {
    pub fn new(
        values: DMatrix<f64>,
        subject_id: impl Into<String>,
        session_id: impl Into<String>,
    ) -> Result<Self> {
        if values.nrows() < 4 {
            return Err(Error::InsufficientLength(format!(
                "time series has {} timepoints, need at least 4",
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::InvalidInput("time series has no voxels".into()));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at timepoint {}, voxel {}",
                k % values.nrows(),
                k / values.nrows()
            )));
        }
        Ok(Self {
            values,
            subject_id: subject_id.into(),
            session_id: session_id.into(),
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_timepoints(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.values.ncols()
    }

    /// Contiguous block of timepoints, relabelled with `session_id`.
    pub fn window(&self, rows: Range<usize>, session_id: impl Into<String>) -> Result<Self> {
        if rows.end > self.n_timepoints() || rows.start >= rows.end {
            return Err(Error::InsufficientLength(format!(
                "window {}..{} outside a {}-timepoint series",
                rows.start,
                rows.end,
                self.n_timepoints()
            )));
        }
        let block = self
            .values
            .rows(rows.start, rows.end - rows.start)
            .into_owned();
        Self::new(block, self.subject_id.clone(), session_id)
    }

    /// Copy with each voxel's mean removed.
    pub fn demeaned(&self) -> Self {
        let mut values = self.values.clone();
        for mut col in values.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        Self {
            values,
            subject_id: self.subject_id.clone(),
            session_id: self.session_id.clone(),
        }
    }

    /// Stacks series over time. All parts must share the voxel count.
    pub fn concat(
        parts: &[TimeSeriesMatrix],
        subject_id: impl Into<String>,
        session_id: impl Into<String>,
    ) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let n_voxels = first.n_voxels();
        let total: usize = parts.iter().map(|p| p.n_timepoints()).sum();
        let mut values = DMatrix::zeros(total, n_voxels);
        let mut offset = 0;
        for part in parts {
            if part.n_voxels() != n_voxels {
                return Err(Error::DimensionMismatch {
                    expected: n_voxels,
                    found: part.n_voxels(),
                });
            }
            values
                .rows_mut(offset, part.n_timepoints())
                .copy_from(&part.values);
            offset += part.n_timepoints();
        }
        Self::new(values, subject_id, session_id)
    }

    /// Contiguous first and second halves, each demeaned per voxel. An odd
    /// final timepoint is dropped.
    pub fn pseudo_halves(&self) -> Result<(TimeSeriesMatrix, TimeSeriesMatrix)> {
        let half = self.n_timepoints() / 2;
        let first = self.window(0..half, format!("{}a", self.session_id))?;
        let second = self.window(half..2 * half, format!("{}b", self.session_id))?;
        Ok((first.demeaned(), second.demeaned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Space {
    Correlation,
    FisherZ,
}

impl Space {
    pub fn name(self) -> &'static str {
        match self {
            Space::Correlation => "correlation",
            Space::FisherZ => "fisher-z",
        }
    }

    /// Implied diagonal value for dense export.
    pub fn diagonal(self) -> f64 {
        match self {
            Space::Correlation => 1.0,
            Space::FisherZ => 0.0,
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn check_space_entries(pairs: &PairField, space: Space) -> Result<()> {
    for ((i, j), v) in pairs.iter_pairs() {
        let ok = match space {
            Space::Correlation => v.is_finite() && v.abs() < 1.0,
            Space::FisherZ => v.is_finite(),
        };
        if !ok {
            return Err(Error::OutOfRange {
                row: i,
                col: j,
                value: v,
            });
        }
    }
    Ok(())
}

/// Symmetric `V x V` connectivity for one subject-session.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    pairs: PairField,
    space: Space,
    pub subject_id: String,
    pub session_id: String,
    /// Entries that were pulled in from +-1 when this matrix was produced.
    pub clamped: usize,
}

impl ConnectivityMatrix {
    pub fn new(
        pairs: PairField,
        space: Space,
        subject_id: impl Into<String>,
        session_id: impl Into<String>,
    ) -> Result<Self> {
        check_space_entries(&pairs, space)?;
        Ok(Self {
            pairs,
            space,
            subject_id: subject_id.into(),
            session_id: session_id.into(),
            clamped: 0,
        })
    }

    /// Builds from a dense square matrix, reading its upper triangle. The
    /// matrix must be symmetric to within `1e-12`.
    pub fn from_dense(
        dense: &DMatrix<f64>,
        space: Space,
        subject_id: impl Into<String>,
        session_id: impl Into<String>,
    ) -> Result<Self> {
        let pairs = PairField::from_upper(dense)?;
        for ((i, j), v) in pairs.iter_pairs() {
            if (dense[(j, i)] - v).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
        Self::new(pairs, space, subject_id, session_id)
    }

    pub fn pairs(&self) -> &PairField {
        &self.pairs
    }

    pub fn into_pairs(self) -> PairField {
        self.pairs
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn n_voxels(&self) -> usize {
        self.pairs.dim()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.space.diagonal()
        } else {
            self.pairs.get(i, j)
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.pairs.to_dense(self.space.diagonal())
    }

    fn with_pairs(&self, pairs: PairField, space: Space) -> Self {
        Self {
            pairs,
            space,
            subject_id: self.subject_id.clone(),
            session_id: self.session_id.clone(),
            clamped: 0,
        }
    }

    /// Same matrix in `space`, transforming if needed.
    pub fn to_space(&self, space: Space) -> Result<Self> {
        match (self.space, space) {
            (a, b) if a == b => Ok(self.clone()),
            (Space::Correlation, Space::FisherZ) => fisher_transform(self),
            _ => inverse_fisher(self),
        }
    }
}

/// Pearson correlation of every voxel pair.
///
/// Entries whose magnitude reaches [`CORRELATION_LIMIT`] are pulled in to it
/// and counted in `clamped`.
pub fn compute_correlation(ts: &TimeSeriesMatrix) -> Result<ConnectivityMatrix> {
    let mut centered = ts.values.clone();
    let mut scale = Vec::with_capacity(ts.n_voxels());
    for (v, mut col) in centered.column_iter_mut().enumerate() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let ss = col.norm_squared();
        if !(ss > 0.0) {
            return Err(Error::ZeroVarianceVoxel(v));
        }
        scale.push(ss.sqrt());
    }
    // The (T - 1) denominators cancel, so the raw cross-products suffice.
    let gram = centered.tr_mul(&centered);
    let mut clamped = 0;
    let pairs = PairField::from_fn(ts.n_voxels(), |i, j| {
        let r = gram[(i, j)] / (scale[i] * scale[j]);
        if r.abs() >= CORRELATION_LIMIT {
            clamped += 1;
            CORRELATION_LIMIT.copysign(r)
        } else {
            r
        }
    });
    Ok(ConnectivityMatrix {
        pairs,
        space: Space::Correlation,
        subject_id: ts.subject_id.clone(),
        session_id: ts.session_id.clone(),
        clamped,
    })
}

/// `z(r) = 0.5 * ln((1 + r) / (1 - r))`.
pub fn fisher_z(r: f64) -> f64 {
    r.atanh()
}

/// Inverse of [`fisher_z`], kept strictly inside `(-1, 1)`.
pub fn inverse_fisher_z(z: f64) -> f64 {
    let r = z.tanh();
    if r.abs() > CORRELATION_LIMIT {
        CORRELATION_LIMIT.copysign(r)
    } else {
        r
    }
}

pub fn fisher_transform(c: &ConnectivityMatrix) -> Result<ConnectivityMatrix> {
    if c.space != Space::Correlation {
        return Err(Error::WrongSpace {
            expected: Space::Correlation.name(),
            found: c.space.name(),
        });
    }
    let mut clamped = 0;
    let mut values = Vec::with_capacity(c.pairs.len());
    for ((i, j), r) in c.pairs.iter_pairs() {
        let r = if r.abs() == 1.0 {
            clamped += 1;
            CORRELATION_LIMIT.copysign(r)
        } else if r.is_finite() && r.abs() < 1.0 {
            r
        } else {
            return Err(Error::OutOfRange {
                row: i,
                col: j,
                value: r,
            });
        };
        values.push(fisher_z(r));
    }
    let pairs = PairField::from_values(c.n_voxels(), values)?;
    let mut out = c.with_pairs(pairs, Space::FisherZ);
    out.clamped = c.clamped + clamped;
    Ok(out)
}

pub fn inverse_fisher(z: &ConnectivityMatrix) -> Result<ConnectivityMatrix> {
    if z.space != Space::FisherZ {
        return Err(Error::WrongSpace {
            expected: Space::FisherZ.name(),
            found: z.space.name(),
        });
    }
    Ok(z.with_pairs(z.pairs.map(inverse_fisher_z), Space::Correlation))
}

/// Elementwise mean over subjects for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMeanMatrix {
    pairs: PairField,
    space: Space,
    pub session_id: String,
    pub n_subjects: usize,
}

impl GroupMeanMatrix {
    pub fn pairs(&self) -> &PairField {
        &self.pairs
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn n_voxels(&self) -> usize {
        self.pairs.dim()
    }

    pub fn to_connectivity(&self) -> ConnectivityMatrix {
        ConnectivityMatrix {
            pairs: self.pairs.clone(),
            space: self.space,
            subject_id: "group".into(),
            session_id: self.session_id.clone(),
            clamped: 0,
        }
    }
}

/// Summation runs in subject order, so the result is independent of how
/// callers schedule the inputs' construction.
pub fn group_mean(cs: &[ConnectivityMatrix]) -> Result<GroupMeanMatrix> {
    let first = cs.first().ok_or(Error::EmptyInput)?;
    if cs.len() < 2 {
        return Err(Error::TooFewSubjects {
            needed: 2,
            found: cs.len(),
        });
    }
    let mut sum = vec![0.0; first.pairs.len()];
    for c in cs {
        first.pairs.check_same_dim(&c.pairs)?;
        if c.space != first.space {
            return Err(Error::MixedSpace);
        }
        for (s, v) in sum.iter_mut().zip(c.pairs.values()) {
            *s += v;
        }
    }
    let n = cs.len() as f64;
    let pairs = PairField::from_values(first.n_voxels(), sum.into_iter().map(|s| s / n).collect())?;
    Ok(GroupMeanMatrix {
        pairs,
        space: first.space,
        session_id: first.session_id.clone(),
        n_subjects: cs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShrinkageScope {
    PerSubject(String),
    Shared,
}

/// Per-pair weight on the group mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageField {
    pairs: PairField,
    pub scope: ShrinkageScope,
}

impl ShrinkageField {
    pub fn new(pairs: PairField, scope: ShrinkageScope) -> Result<Self> {
        if let Some(&bad) = pairs.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::LambdaOutOfRange(bad));
        }
        Ok(Self { pairs, scope })
    }

    pub fn uniform(n_voxels: usize, lambda: f64) -> Result<Self> {
        Self::new(PairField::filled(n_voxels, lambda), ShrinkageScope::Shared)
    }

    pub fn pairs(&self) -> &PairField {
        &self.pairs
    }

    /// Degree of shrinkage: mean weight over all voxel pairs.
    pub fn mean(&self) -> f64 {
        self.pairs.mean()
    }
}

/// `lambda * mean + (1 - lambda) * raw`, pair by pair.
pub fn apply_shrinkage(
    raw: &ConnectivityMatrix,
    mean: &GroupMeanMatrix,
    lambda: &ShrinkageField,
) -> Result<ConnectivityMatrix> {
    raw.pairs.check_same_dim(&mean.pairs)?;
    raw.pairs.check_same_dim(&lambda.pairs)?;
    if raw.space != mean.space {
        return Err(Error::MixedSpace);
    }
    let values = raw
        .pairs
        .values()
        .iter()
        .zip(mean.pairs.values())
        .zip(lambda.pairs.values())
        .map(|((&w, &m), &l)| {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::LambdaOutOfRange(l));
            }
            // Rounding must not push the result outside [raw, mean].
            let s = l * m + (1.0 - l) * w;
            Ok(s.clamp(w.min(m), w.max(m)))
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs = PairField::from_values(raw.n_voxels(), values)?;
    Ok(raw.with_pairs(pairs, raw.space))
}
