//! Synthetic reliability study on a 10 x 10 grid with four quadrant parcels.
//!
//! Each subject gets a perturbed parcellation (labels may swap across the
//! horizontal border in rows 4 and 5), a within-parcel correlation drawn
//! around the population value on the Fisher scale, and two sessions of
//! Gaussian time series with that exchangeable block correlation.

use nalgebra::{Cholesky, DMatrix};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::connectivity::{
    fisher_z, inverse_fisher_z, ConnectivityMatrix, Space, TimeSeriesMatrix,
};
use crate::error::{Error, Result};
use crate::estimation::{
    cluster_correlation, correlations, replicate_global, shrink_for_methods, split_scan_global,
    to_space, DataMode, GlobalNoiseSource, ModeInputs,
};
use crate::metrics::{
    dice, dice_restricted, matrix_mse, median, percent_decrease, percent_increase,
};
use crate::pairs::PairField;
use crate::rng;
use crate::spectral::Parcellation;
use crate::variance::{NoiseMethod, SignalNoiseSource};

pub const GRID_SIDE: usize = 10;
pub const N_VOXELS: usize = GRID_SIDE * GRID_SIDE;
pub const N_CLUSTERS: usize = 4;
/// Rows whose labels may differ between subjects.
pub const BORDER_ROWS: [usize; 2] = [4, 5];
/// Rejections allowed when drawing a positive subject correlation.
pub const RHO_REJECTION_LIMIT: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationDesign {
    pub subjects: usize,
    pub timepoints: usize,
    pub rho: f64,
    pub sigma2_x: f64,
    pub iterations: usize,
    pub seed: u64,
    pub flip_prob: f64,
    pub space: Space,
    pub methods: Vec<NoiseMethod>,
    pub modes: Vec<DataMode>,
    pub signal_source: SignalNoiseSource,
    pub global_source: GlobalNoiseSource,
    pub n_init: usize,
}

impl Default for SimulationDesign {
    fn default() -> Self {
        Self {
            subjects: 20,
            timepoints: 200,
            rho: 0.05,
            sigma2_x: 0.02,
            iterations: 200,
            seed: 1,
            flip_prob: 0.5,
            space: Space::FisherZ,
            methods: NoiseMethod::ALL.to_vec(),
            modes: DataMode::ALL.to_vec(),
            signal_source: SignalNoiseSource::Matched,
            global_source: GlobalNoiseSource::SecondSession,
            n_init: 10,
        }
    }
}

impl SimulationDesign {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.subjects < 2 {
            return bad("need at least 2 subjects");
        }
        if self.timepoints < 8 {
            return bad("need at least 8 timepoints so each half has 4");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.sigma2_x >= 0.0) || !self.sigma2_x.is_finite() {
            return bad("sigma2_x must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip probability must lie in [0, 1]");
        }
        if self.iterations == 0 {
            return bad("need at least one iteration");
        }
        if self.methods.is_empty() || self.modes.is_empty() {
            return bad("need at least one method and one mode");
        }
        Ok(())
    }

    pub fn iteration_seed(&self, iteration: usize) -> u64 {
        rng::derive_seed(self.seed, "iteration", iteration as u64)
    }
}

pub fn voxel_index(row: usize, col: usize) -> usize {
    row * GRID_SIDE + col
}

/// Quadrants in row-major voxel order: top-left 0, top-right 1,
/// bottom-left 2, bottom-right 3.
pub fn generate_group_parcellation() -> Parcellation {
    let half = GRID_SIDE / 2;
    let labels = (0..N_VOXELS)
        .map(|v| {
            let (row, col) = (v / GRID_SIDE, v % GRID_SIDE);
            2 * usize::from(row >= half) + usize::from(col >= half)
        })
        .collect();
    Parcellation::new(labels, N_CLUSTERS).expect("quadrant labels are valid")
}

/// Voxels in the border rows, where subject parcellations may differ.
pub fn border_voxels() -> Vec<usize> {
    BORDER_ROWS
        .iter()
        .flat_map(|&r| (0..GRID_SIDE).map(move |c| voxel_index(r, c)))
        .collect()
}

/// Voxels outside the border rows.
pub fn shared_voxels() -> Vec<usize> {
    (0..N_VOXELS)
        .filter(|v| !BORDER_ROWS.contains(&(v / GRID_SIDE)))
        .collect()
}

/// Each border-row voxel independently swaps to the label of the quadrant
/// above or below it with probability `flip_prob`.
pub fn perturb_subject_parcellation(
    group: &Parcellation,
    flip_prob: f64,
    rng: &mut rng::Rng,
) -> Parcellation {
    let mut labels = group.labels().to_vec();
    for v in border_voxels() {
        if rng.random::<f64>() < flip_prob {
            // 0 <-> 2 on the left half, 1 <-> 3 on the right.
            labels[v] ^= 2;
        }
    }
    Parcellation::new(labels, group.k()).expect("swapped labels stay in range")
}

/// `tanh(z(rho) + u)` with `u ~ N(0, sigma2_x)`, redrawn until positive.
pub fn draw_subject_rho(rho: f64, sigma2_x: f64, rng: &mut rng::Rng) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) || !(sigma2_x >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "need rho in (0, 1) and sigma2_x >= 0, got {rho} and {sigma2_x}"
        )));
    }
    let noise =
        Normal::new(0.0, sigma2_x.sqrt()).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let centre = fisher_z(rho);
    for _ in 0..RHO_REJECTION_LIMIT {
        let r = inverse_fisher_z(centre + noise.sample(rng));
        if r > 0.0 {
            return Ok(r);
        }
    }
    Err(Error::ResampleLimitExceeded(RHO_REJECTION_LIMIT))
}

/// Exchangeable block correlation: `rho_i` within a parcel, 0 across.
pub fn build_true_connectivity(
    parcellation: &Parcellation,
    rho_i: f64,
) -> Result<ConnectivityMatrix> {
    if !(0.0..1.0).contains(&rho_i) {
        return Err(Error::InvalidInput(format!(
            "within-parcel correlation {rho_i} outside [0, 1)"
        )));
    }
    let pairs = PairField::from_fn(parcellation.n_voxels(), |i, j| {
        if parcellation.same_parcel(i, j) {
            rho_i
        } else {
            0.0
        }
    });
    ConnectivityMatrix::new(pairs, Space::Correlation, "truth", "")
}

/// Draws rows `x_t = L z_t` with `L L^T` the covariance.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    lower: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(covariance: DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::new(covariance).ok_or(Error::FactorizationFailure)?;
        Ok(Self { lower: chol.l() })
    }

    pub fn sample(
        &self,
        n_timepoints: usize,
        rng: &mut rng::Rng,
        subject_id: &str,
        session_id: &str,
    ) -> Result<TimeSeriesMatrix> {
        let v = self.lower.nrows();
        let mut z = DMatrix::<f64>::zeros(n_timepoints, v);
        for t in 0..n_timepoints {
            for c in 0..v {
                z[(t, c)] = rng.sample(StandardNormal);
            }
        }
        TimeSeriesMatrix::new(z * self.lower.transpose(), subject_id, session_id)
    }
}

pub fn sample_session(
    truth: &ConnectivityMatrix,
    n_timepoints: usize,
    rng: &mut rng::Rng,
) -> Result<TimeSeriesMatrix> {
    GaussianSampler::new(truth.to_dense())?.sample(n_timepoints, rng, &truth.subject_id, "1")
}

/// Everything generated for one subject in one iteration.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub subject_id: String,
    pub parcellation: Parcellation,
    pub rho: f64,
    pub truth: ConnectivityMatrix,
    pub sessions: [TimeSeriesMatrix; 2],
}

pub fn simulate_subject(
    design: &SimulationDesign,
    iteration: usize,
    subject: usize,
) -> Result<SubjectData> {
    let mut rng = rng::substream(design.iteration_seed(iteration), "subject", subject as u64);
    let group = generate_group_parcellation();
    let parcellation = perturb_subject_parcellation(&group, design.flip_prob, &mut rng);
    let rho = draw_subject_rho(design.rho, design.sigma2_x, &mut rng)?;
    let subject_id = format!("sub{subject:03}");
    let mut truth = build_true_connectivity(&parcellation, rho)?;
    truth.subject_id = subject_id.clone();
    let sampler = GaussianSampler::new(truth.to_dense())?;
    let first = sampler.sample(design.timepoints, &mut rng, &subject_id, "1")?;
    let second = sampler.sample(design.timepoints, &mut rng, &subject_id, "2")?;
    Ok(SubjectData {
        subject_id,
        parcellation,
        rho,
        truth,
        sessions: [first, second],
    })
}

pub fn simulate_iteration_data(
    design: &SimulationDesign,
    iteration: usize,
) -> Result<Vec<SubjectData>> {
    (0..design.subjects)
        .into_par_iter()
        .map(|i| simulate_subject(design, iteration, i))
        .collect()
}

/// Seed for clustering subject `subject` given a run seed. The real-data
/// pipeline uses the same rule.
pub fn cluster_seed(seed: u64, subject: usize) -> u64 {
    rng::derive_seed(seed, "cluster", subject as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub iteration: usize,
    pub subject: usize,
    /// `None` for the raw estimate.
    pub method: Option<NoiseMethod>,
    pub mode: Option<DataMode>,
    pub mse: f64,
    pub dice_full: f64,
    pub dice_same: f64,
    pub dice_diff: f64,
    pub mean_lambda: f64,
}

struct Evaluator<'a> {
    data: &'a [SubjectData],
    shared: Vec<usize>,
    border: Vec<usize>,
    seed: u64,
    n_init: usize,
    iteration: usize,
}

impl Evaluator<'_> {
    fn row(
        &self,
        subject: usize,
        estimate: &ConnectivityMatrix,
        method: Option<NoiseMethod>,
        mode: Option<DataMode>,
        mean_lambda: f64,
    ) -> Result<ResultRow> {
        let truth = &self.data[subject];
        let labels = cluster_correlation(
            estimate,
            N_CLUSTERS,
            cluster_seed(self.seed, subject),
            self.n_init,
        )?;
        Ok(ResultRow {
            iteration: self.iteration,
            subject,
            method,
            mode,
            mse: matrix_mse(estimate, &truth.truth)?,
            dice_full: dice(&labels, &truth.parcellation)?,
            dice_same: dice_restricted(&labels, &truth.parcellation, &self.shared)?,
            dice_diff: dice_restricted(&labels, &truth.parcellation, &self.border)?,
            mean_lambda,
        })
    }
}

/// Raw and shrunk estimates for every subject of one iteration, scored
/// against the generating truth.
pub fn evaluate_iteration(
    design: &SimulationDesign,
    iteration: usize,
    data: &[SubjectData],
) -> Result<Vec<ResultRow>> {
    let first_ts: Vec<TimeSeriesMatrix> = data.iter().map(|d| d.sessions[0].clone()).collect();
    let second_ts: Vec<TimeSeriesMatrix> = data.iter().map(|d| d.sessions[1].clone()).collect();
    let raw1 = correlations(&first_ts)?;
    let raw2 = correlations(&second_ts)?;
    let raw1_s = to_space(&raw1, design.space)?;
    let raw2_s = to_space(&raw2, design.space)?;

    let eval = Evaluator {
        data,
        shared: shared_voxels(),
        border: border_voxels(),
        seed: design.iteration_seed(iteration),
        n_init: design.n_init,
        iteration,
    };

    let mut jobs: Vec<(
        usize,
        ConnectivityMatrix,
        Option<NoiseMethod>,
        Option<DataMode>,
        f64,
    )> = raw1
        .iter()
        .enumerate()
        .map(|(i, c)| (i, c.clone(), None, None, 0.0))
        .collect();

    for &mode in &design.modes {
        let shrunk = match mode {
            DataMode::TestRetest => {
                let inputs = ModeInputs {
                    raw: &raw1_s,
                    replicate_a: &raw1_s,
                    replicate_b: &raw2_s,
                    total_sessions: vec![&raw1_s, &raw2_s],
                    global_override: Some(replicate_global(&raw1_s, &raw2_s)?),
                };
                shrink_for_methods(&inputs, &design.methods, design.signal_source)?
            }
            DataMode::SingleSession => {
                let halves = first_ts
                    .iter()
                    .map(|ts| ts.pseudo_halves())
                    .collect::<Result<Vec<_>>>()?;
                let (a, b): (Vec<_>, Vec<_>) = halves.into_iter().unzip();
                let half_a = to_space(&correlations(&a)?, design.space)?;
                let half_b = to_space(&correlations(&b)?, design.space)?;
                let global = split_scan_global(
                    &design.global_source,
                    (&half_a, &half_b),
                    Some((&raw1_s, &raw2_s)),
                    design.timepoints,
                )?;
                let inputs = ModeInputs {
                    raw: &raw1_s,
                    replicate_a: &half_a,
                    replicate_b: &half_b,
                    total_sessions: vec![&raw1_s],
                    global_override: Some(global),
                };
                shrink_for_methods(&inputs, &design.methods, design.signal_source)?
            }
        };
        for (method, estimates) in shrunk {
            for (i, e) in estimates.into_iter().enumerate() {
                jobs.push((i, e.correlation, Some(method), Some(mode), e.mean_lambda));
            }
        }
    }

    jobs.par_iter()
        .map(|(i, c, method, mode, lambda)| eval.row(*i, c, *method, *mode, *lambda))
        .collect()
}

/// Summary of one (method, mode) arm over all subjects and iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Option<NoiseMethod>,
    pub mode: Option<DataMode>,
    pub n: usize,
    pub median_mse: f64,
    pub median_dice_full: f64,
    pub median_dice_same: f64,
    pub median_dice_diff: f64,
    pub median_lambda: f64,
    pub mse_percent_decrease: f64,
    pub dice_full_percent_increase: f64,
    pub dice_same_percent_increase: f64,
    pub dice_diff_percent_increase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResults {
    pub design: SimulationDesign,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

impl SimulationResults {
    pub fn raw(&self) -> &SummaryRow {
        self.arm(None, None).expect("raw arm always present")
    }

    pub fn arm(&self, method: Option<NoiseMethod>, mode: Option<DataMode>) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.method == method && s.mode == mode)
    }

    pub fn shrunk(&self, method: NoiseMethod, mode: DataMode) -> Option<&SummaryRow> {
        self.arm(Some(method), Some(mode))
    }
}

pub fn summarize_rows(rows: &[ResultRow]) -> Result<Vec<SummaryRow>> {
    let mut arms: Vec<(Option<NoiseMethod>, Option<DataMode>)> = Vec::new();
    for r in rows {
        if !arms.contains(&(r.method, r.mode)) {
            arms.push((r.method, r.mode));
        }
    }
    let col = |arm: &(Option<NoiseMethod>, Option<DataMode>), f: fn(&ResultRow) -> f64| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| (r.method, r.mode) == *arm)
            .map(f)
            .collect();
        median(&v)
    };
    let mut medians = Vec::new();
    for arm in &arms {
        medians.push((
            *arm,
            rows.iter().filter(|r| (r.method, r.mode) == *arm).count(),
            [
                col(arm, |r| r.mse)?,
                col(arm, |r| r.dice_full)?,
                col(arm, |r| r.dice_same)?,
                col(arm, |r| r.dice_diff)?,
                col(arm, |r| r.mean_lambda)?,
            ],
        ));
    }
    let raw = medians
        .iter()
        .find(|(arm, _, _)| *arm == (None, None))
        .map(|(_, _, m)| *m)
        .ok_or(Error::EmptyInput)?;
    Ok(medians
        .into_iter()
        .map(|((method, mode), n, m)| SummaryRow {
            method,
            mode,
            n,
            median_mse: m[0],
            median_dice_full: m[1],
            median_dice_same: m[2],
            median_dice_diff: m[3],
            median_lambda: m[4],
            mse_percent_decrease: percent_decrease(raw[0], m[0]),
            dice_full_percent_increase: percent_increase(raw[1], m[1]),
            dice_same_percent_increase: percent_increase(raw[2], m[2]),
            dice_diff_percent_increase: percent_increase(raw[3], m[3]),
        })
        .collect())
}

/// Every iteration of a design, merged in iteration order.
pub fn run_analysis_s1(design: &SimulationDesign) -> Result<SimulationResults> {
    design.validate()?;
    let per_iteration = (0..design.iterations)
        .into_par_iter()
        .map(|it| {
            let data = simulate_iteration_data(design, it)?;
            evaluate_iteration(design, it, &data)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<ResultRow> = per_iteration.into_iter().flatten().collect();
    let summary = summarize_rows(&rows)?;
    Ok(SimulationResults {
        design: design.clone(),
        rows,
        summary,
    })
}

/// Parameter values varied one at a time around the base design.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGrid {
    pub subjects: Vec<usize>,
    pub timepoints: Vec<usize>,
    pub rho: Vec<f64>,
    pub sigma2_x: Vec<f64>,
}

impl ParameterGrid {
    /// The full sensitivity grid: 13 distinct designs with the defaults.
    pub fn table1() -> Self {
        Self {
            subjects: vec![10, 20, 30, 100],
            timepoints: vec![100, 200, 300, 1000],
            rho: vec![0.01, 0.05, 0.1],
            sigma2_x: vec![0.01, 0.02, 0.03, 0.04, 0.05],
        }
    }

    /// Distinct designs, base design first, each labelled with the parameter
    /// it varies.
    pub fn designs(&self, base: &SimulationDesign) -> Vec<(String, SimulationDesign)> {
        let mut out = vec![("base".to_string(), base.clone())];
        let mut push = |label: String, d: SimulationDesign| {
            if !out.iter().any(|(_, e)| *e == d) {
                out.push((label, d));
            }
        };
        for &v in &self.subjects {
            push(
                format!("subjects={v}"),
                SimulationDesign {
                    subjects: v,
                    ..base.clone()
                },
            );
        }
        for &v in &self.timepoints {
            push(
                format!("timepoints={v}"),
                SimulationDesign {
                    timepoints: v,
                    ..base.clone()
                },
            );
        }
        for &v in &self.rho {
            push(
                format!("rho={v}"),
                SimulationDesign {
                    rho: v,
                    ..base.clone()
                },
            );
        }
        for &v in &self.sigma2_x {
            push(
                format!("sigma2x={v}"),
                SimulationDesign {
                    sigma2_x: v,
                    ..base.clone()
                },
            );
        }
        out
    }
}

/// One full run per distinct design of the grid, in grid order.
pub fn run_analysis_s2(
    base: &SimulationDesign,
    grid: &ParameterGrid,
) -> Result<Vec<(String, SimulationResults)>> {
    grid.designs(base)
        .into_iter()
        .map(|(label, d)| Ok((label, run_analysis_s1(&d)?)))
        .collect()
}

fn opt_name<T: std::fmt::Display>(v: Option<T>, none: &str) -> String {
    v.map_or_else(|| none.to_string(), |x| x.to_string())
}

fn g(x: f64) -> String {
    crate::io::format_g17(x)
}

pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(
        "iteration,subject,method,mode,mse,dice_full,dice_same,dice_diff,mean_lambda\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.subject,
            opt_name(r.method, "raw"),
            opt_name(r.mode, "none"),
            g(r.mse),
            g(r.dice_full),
            g(r.dice_same),
            g(r.dice_diff),
            g(r.mean_lambda)
        ));
    }
    out
}

pub const SUMMARY_HEADER: &str = "method,mode,n,median_mse,median_dice_full,median_dice_same,median_dice_diff,median_lambda,mse_pct_decrease,dice_full_pct_increase,dice_same_pct_increase,dice_diff_pct_increase";

pub fn summary_line(s: &SummaryRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        opt_name(s.method, "raw"),
        opt_name(s.mode, "none"),
        s.n,
        g(s.median_mse),
        g(s.median_dice_full),
        g(s.median_dice_same),
        g(s.median_dice_diff),
        g(s.median_lambda),
        g(s.mse_percent_decrease),
        g(s.dice_full_percent_increase),
        g(s.dice_same_percent_increase),
        g(s.dice_diff_percent_increase)
    )
}

pub fn summary_to_csv(summary: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for s in summary {
        out.push_str(&summary_line(s));
        out.push('\n');
    }
    out
}
