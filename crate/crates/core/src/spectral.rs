//! Normalized spectral clustering of a correlation-derived affinity graph:
//! `D^-1/2 A D^-1/2`, its top-k eigenvectors, unit-norm rows, then k-means.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;

use crate::connectivity::{ConnectivityMatrix, Space};
use crate::error::{Error, Result};
use crate::rng;

/// Added to every degree before taking `D^-1/2`.
pub const DEGREE_EPSILON: f64 = 1e-10;

/// Hard assignment of voxels to `k` parcels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parcellation {
    labels: Vec<usize>,
    k: usize,
}

impl Parcellation {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidInput(format!(
                "label {bad} is not below k = {k}"
            )));
        }
        Ok(Self { labels, k })
    }

    /// Labels renumbered in order of first appearance; the number of
    /// parcels is the number of distinct labels.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        let (labels, k) = canonical_labels(labels);
        Self::new(labels, k)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_voxels(&self) -> usize {
        self.labels.len()
    }

    /// Co-membership relation; reflexive and symmetric.
    pub fn same_parcel(&self, v: usize, w: usize) -> bool {
        self.labels[v] == self.labels[w]
    }

    pub fn adjacency(&self) -> DMatrix<u8> {
        let n = self.n_voxels();
        DMatrix::from_fn(n, n, |i, j| u8::from(self.same_parcel(i, j)))
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn canonical_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map: Vec<(usize, usize)> = Vec::new();
    let out = labels
        .iter()
        .map(|&l| match map.iter().find(|(from, _)| *from == l) {
            Some(&(_, to)) => to,
            None => {
                let to = map.len();
                map.push((l, to));
                to
            }
        })
        .collect();
    (out, map.len())
}

/// Nonnegative symmetric similarity with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinity {
    matrix: DMatrix<f64>,
}

impl Affinity {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if n != matrix.ncols() || n == 0 {
            return Err(Error::InvalidInput(
                "affinity must be a nonempty square matrix".into(),
            ));
        }
        for i in 0..n {
            if matrix[(i, i)] != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "affinity diagonal at {i} is not zero"
                )));
            }
            for j in i + 1..n {
                let a = matrix[(i, j)];
                if !(a >= 0.0) || !a.is_finite() || a != matrix[(j, i)] {
                    return Err(Error::InvalidInput(format!(
                        "affinity at ({i}, {j}) is negative, non-finite or asymmetric"
                    )));
                }
            }
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn n_voxels(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.matrix.row_iter().map(|r| r.sum()).collect()
    }
}

/// Correlations rectified at zero; the diagonal is zero.
pub fn build_affinity(c: &ConnectivityMatrix) -> Result<Affinity> {
    if c.space() != Space::Correlation {
        return Err(Error::WrongSpace {
            expected: Space::Correlation.name(),
            found: c.space().name(),
        });
    }
    let n = c.n_voxels();
    let mut m = DMatrix::zeros(n, n);
    for ((i, j), r) in c.pairs().iter_pairs() {
        let a = r.max(0.0);
        m[(i, j)] = a;
        m[(j, i)] = a;
    }
    Ok(Affinity { matrix: m })
}

/// `D^-1/2 A D^-1/2` with `DEGREE_EPSILON` added to every degree.
pub fn normalized_affinity(affinity: &Affinity) -> DMatrix<f64> {
    let scale: Vec<f64> = affinity
        .degrees()
        .iter()
        .map(|d| 1.0 / (d + DEGREE_EPSILON).sqrt())
        .collect();
    let n = affinity.n_voxels();
    DMatrix::from_fn(n, n, |i, j| scale[i] * affinity.matrix[(i, j)] * scale[j])
}

/// The `k` largest eigenpairs of a symmetric matrix, in decreasing order.
/// Eigenvectors are the columns of the returned matrix.
pub fn top_eigenvectors(m: &DMatrix<f64>, k: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "cannot take {k} eigenvectors of a {n}x{n} matrix"
        )));
    }
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 0).ok_or_else(|| {
        Error::EigensolverFailure("symmetric eigensolver did not converge".into())
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let values: Vec<f64> = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigensolverFailure("non-finite eigenvalue".into()));
    }
    let vectors = DMatrix::from_fn(n, k, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub n_init: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            n_init: 10,
            max_iter: 300,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = dist2(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| dist2(p, &points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap_or(0))
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &points[next]));
        }
    }
    chosen.iter().map(|&i| points[i].clone()).collect()
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, cfg: &KMeansConfig) -> KMeansResult {
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels = vec![0; points.len()];
    for _ in 0..cfg.max_iter {
        let mut dists = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            labels[i] = c;
            dists.push(d);
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Empty cluster takes over the worst-fitting point.
                let far = dists
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &d)| if d > dists[best] { i } else { best });
                counts[labels[far]] -= 1;
                for (s, x) in sums[labels[far]].iter_mut().zip(&points[far]) {
                    *s -= x;
                }
                labels[far] = c;
                dists[far] = 0.0;
                counts[c] = 1;
                sums[c] = points[far].clone();
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(dist2(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        if shift < cfg.tol {
            break;
        }
    }
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest(p, &centroids);
        labels[i] = c;
        inertia += d;
    }
    KMeansResult {
        labels,
        centroids,
        inertia,
    }
}

/// k-means with k-means++ seeding; the restart with the lowest within-
/// cluster sum of squares wins, earliest on ties.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    cfg: &KMeansConfig,
    rng: &mut rng::Rng,
) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidInput(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.n_init.max(1) {
        let init = kmeans_plus_plus(points, k, rng);
        let run = lloyd(points, init, cfg);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralConfig {
    pub k: usize,
    pub seed: u64,
    pub kmeans: KMeansConfig,
}

impl SpectralConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            kmeans: KMeansConfig::default(),
        }
    }
}

/// Row-normalized spectral embedding. Rows of isolated voxels stay zero;
/// the second value flags them.
pub fn spectral_embedding(affinity: &Affinity, k: usize) -> Result<(DMatrix<f64>, Vec<bool>)> {
    let isolated: Vec<bool> = affinity.degrees().iter().map(|&d| d <= 0.0).collect();
    let connected = isolated.iter().filter(|&&z| !z).count();
    if connected == 0 {
        return Err(Error::DegenerateAffinity(
            "every row of the affinity is zero".into(),
        ));
    }
    if connected < k {
        return Err(Error::DegenerateAffinity(format!(
            "only {connected} voxels have nonzero affinity, fewer than k = {k}"
        )));
    }
    let (_, mut vectors) = top_eigenvectors(&normalized_affinity(affinity), k)?;
    for (mut row, &iso) in vectors.row_iter_mut().zip(&isolated) {
        let norm = row.norm();
        if iso || norm == 0.0 {
            row.fill(0.0);
        } else {
            row /= norm;
        }
    }
    Ok((vectors, isolated))
}

/// Spectral clustering into `cfg.k` parcels; deterministic in
/// `(affinity, k, seed)`. Labels are numbered by first appearance.
pub fn spectral_cluster(affinity: &Affinity, cfg: &SpectralConfig) -> Result<Parcellation> {
    let k = cfg.k;
    let n = affinity.n_voxels();
    if k < 2 || k > n {
        return Err(Error::InvalidInput(format!("k = {k} must lie in [2, {n}]")));
    }
    let (embedding, isolated) = spectral_embedding(affinity, k)?;
    let rows: Vec<usize> = (0..n).filter(|&v| !isolated[v]).collect();
    let points: Vec<Vec<f64>> = rows
        .iter()
        .map(|&v| embedding.row(v).iter().copied().collect())
        .collect();
    let mut rng = rng::substream(cfg.seed, "kmeans", 0);
    let fit = kmeans(&points, k, &cfg.kmeans, &mut rng)?;

    let mut labels = vec![usize::MAX; n];
    for (&v, &l) in rows.iter().zip(&fit.labels) {
        labels[v] = l;
    }
    for v in (0..n).filter(|&v| isolated[v]) {
        let mut votes = vec![0.0; k];
        for &u in &rows {
            votes[labels[u]] += affinity.matrix[(v, u)];
        }
        let best_vote = votes.iter().cloned().fold(0.0, f64::max);
        labels[v] = if best_vote > 0.0 {
            votes.iter().position(|&w| w == best_vote).unwrap_or(0)
        } else {
            nearest(&vec![0.0; k], &fit.centroids).0
        };
    }
    let (labels, _) = canonical_labels(&labels);
    Parcellation::new(labels, k)
}
