//! Data layouts and reliability analyses for real (or stand-in) scans.
//!
//! Two layouts are supported. `TestRetest3Part` concatenates two equal-length
//! sessions and cuts the timeline into thirds: parts 1 and 2 act as
//! replicates, part 1 is shrunk and part 3 is the test set. The middle part
//! straddles the session boundary, so each session's piece is demeaned before
//! concatenation. `SingleScanPseudo` splits session 1 into halves for the
//! noise estimate, shrinks the full session 1 and tests against session 2.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::connectivity::{ConnectivityMatrix, Space, TimeSeriesMatrix};
use crate::error::{Error, Result};
use crate::estimation::{
    cluster_correlation, correlations, replicate_global, shrink_for_methods, split_scan_global,
    to_space, GlobalNoiseSource, ModeInputs, ShrunkEstimate,
};
use crate::io;
use crate::metrics::{dice, matrix_mse, summarize, ReliabilityReport, SubjectReliability};
use crate::rng;
use crate::spectral::Parcellation;
use crate::variance::{NoiseMethod, SignalNoiseSource, SubjectScans};

/// Shortest part (in timepoints) a layout may produce.
pub const MIN_PART_LENGTH: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayoutMode {
    TestRetest3Part,
    SingleScanPseudo,
}

impl LayoutMode {
    pub fn name(self) -> &'static str {
        match self {
            LayoutMode::TestRetest3Part => "test-retest",
            LayoutMode::SingleScanPseudo => "single-session",
        }
    }
}

impl fmt::Display for LayoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "test-retest" | "retest" | "three-part" => Ok(LayoutMode::TestRetest3Part),
            "single-session" | "single" | "pseudo" => Ok(LayoutMode::SingleScanPseudo),
            other => Err(Error::InvalidInput(format!(
                "unknown layout mode '{other}'"
            ))),
        }
    }
}

/// A contiguous run of timepoints from one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub session: usize,
    pub range: Range<usize>,
    pub demean: bool,
}

/// A data part: segments concatenated in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Part {
    pub segments: Vec<Segment>,
}

impl Part {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.range.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn single(session: usize, range: Range<usize>, demean: bool) -> Self {
        Self {
            segments: vec![Segment {
                session,
                range,
                demean,
            }],
        }
    }

    pub fn extract(&self, scans: &SubjectScans, label: &str) -> Result<TimeSeriesMatrix> {
        let pieces = self
            .segments
            .iter()
            .map(|s| {
                let ts = scans.sessions.get(s.session).ok_or_else(|| {
                    Error::MissingReplicate(format!(
                        "{} session {}",
                        scans.subject_id,
                        s.session + 1
                    ))
                })?;
                let w = ts.window(s.range.clone(), label)?;
                Ok(if s.demean { w.demeaned() } else { w })
            })
            .collect::<Result<Vec<_>>>()?;
        if pieces.len() == 1 {
            let mut only = pieces.into_iter().next().expect("one piece");
            only.subject_id = scans.subject_id.clone();
            Ok(only)
        } else {
            TimeSeriesMatrix::concat(&pieces, scans.subject_id.clone(), label)
        }
    }
}

/// Which part plays which role, identical for every subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudyLayout {
    pub mode: LayoutMode,
    /// Estimate that is shrunk.
    pub target: Part,
    /// Two replicates whose difference gives the noise variance.
    pub replicates: [Part; 2],
    /// Parts entering the total variance.
    pub total: Vec<Part>,
    /// Held-out test set, absent when a single scan has no second session.
    pub test: Option<Part>,
    /// Full-length session 2 for the second-session global noise variance.
    pub second_session: Option<Part>,
    /// Length of session 1.
    pub session_length: usize,
}

/// Equal thirds of `total` timepoints; any remainder is dropped at the end.
pub fn three_part_boundaries(total: usize) -> Result<[Range<usize>; 3]> {
    let len = total / 3;
    if len < MIN_PART_LENGTH {
        return Err(Error::TooShort(len));
    }
    Ok([0..len, len..2 * len, 2 * len..3 * len])
}

/// Maps a range of the concatenated two-session timeline onto sessions.
fn split_on_sessions(range: Range<usize>, session_len: usize, demean: bool) -> Part {
    let mut segments = Vec::new();
    if range.start < session_len {
        segments.push(Segment {
            session: 0,
            range: range.start..range.end.min(session_len),
            demean,
        });
    }
    if range.end > session_len {
        segments.push(Segment {
            session: 1,
            range: range.start.max(session_len) - session_len..range.end - session_len,
            demean,
        });
    }
    Part { segments }
}

pub fn build_layout(scans: &[SubjectScans], mode: LayoutMode) -> Result<StudyLayout> {
    let first = scans.first().ok_or(Error::EmptyInput)?;
    let t1 = first
        .sessions
        .first()
        .ok_or_else(|| Error::MissingReplicate(first.subject_id.clone()))?
        .n_timepoints();
    let t2 = first.sessions.get(1).map(|s| s.n_timepoints());
    for s in scans {
        let lens: Vec<usize> = s.sessions.iter().map(|x| x.n_timepoints()).collect();
        if lens.first() != Some(&t1) || lens.get(1).copied() != t2 {
            return Err(Error::InvalidInput(format!(
                "subject {} has session lengths {lens:?}, the layout needs every subject to match the first",
                s.subject_id
            )));
        }
    }
    match mode {
        LayoutMode::TestRetest3Part => {
            let t2 = t2.ok_or_else(|| {
                Error::MissingReplicate(format!("{} session 2", first.subject_id))
            })?;
            if t1 != t2 {
                return Err(Error::UnequalSessionLengths {
                    subject: first.subject_id.clone(),
                    first: t1,
                    second: t2,
                });
            }
            let [a, b, c] = three_part_boundaries(t1 + t2)?;
            let p1 = split_on_sessions(a, t1, true);
            let p2 = split_on_sessions(b, t1, true);
            let p3 = split_on_sessions(c, t1, true);
            Ok(StudyLayout {
                mode,
                target: p1.clone(),
                replicates: [p1.clone(), p2.clone()],
                total: vec![p1, p2],
                test: Some(p3),
                second_session: None,
                session_length: t1,
            })
        }
        LayoutMode::SingleScanPseudo => {
            let half = t1 / 2;
            if half < MIN_PART_LENGTH {
                return Err(Error::TooShort(half));
            }
            let full = Part::single(0, 0..t1, false);
            let session2 = t2.map(|t| Part::single(1, 0..t, false));
            Ok(StudyLayout {
                mode,
                target: full.clone(),
                replicates: [
                    Part::single(0, 0..half, true),
                    Part::single(0, half..2 * half, true),
                ],
                total: vec![full],
                test: session2.clone(),
                second_session: session2,
                session_length: t1,
            })
        }
    }
}

/// Groups manifest rows by subject (first-appearance order), keeping each
/// subject's sessions in manifest order.
pub fn load_manifest(path: &Path) -> Result<Vec<SubjectScans>> {
    let entries = io::read_manifest(path)?;
    let mut out: Vec<SubjectScans> = Vec::new();
    for e in entries {
        let values = io::read_matrix(&e.path)?;
        let ts = TimeSeriesMatrix::new(values, e.subject_id.clone(), e.session_id.clone())?;
        match out.iter_mut().find(|s| s.subject_id == e.subject_id) {
            Some(s) => s.sessions.push(ts),
            None => out.push(SubjectScans {
                subject_id: e.subject_id,
                sessions: vec![ts],
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub space: Space,
    pub signal_source: SignalNoiseSource,
    pub global_source: GlobalNoiseSource,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            space: Space::Correlation,
            signal_source: SignalNoiseSource::Matched,
            global_source: GlobalNoiseSource::SecondSession,
        }
    }
}

/// Raw and shrunk estimates for every subject, all in correlation space.
#[derive(Debug, Clone)]
pub struct LayoutEstimates {
    pub raw: Vec<ConnectivityMatrix>,
    pub test: Option<Vec<ConnectivityMatrix>>,
    pub arms: Vec<(NoiseMethod, Vec<ShrunkEstimate>)>,
}

fn part_correlations(
    scans: &[SubjectScans],
    part: &Part,
    label: &str,
) -> Result<Vec<ConnectivityMatrix>> {
    let series = scans
        .iter()
        .map(|s| part.extract(s, label))
        .collect::<Result<Vec<_>>>()?;
    correlations(&series)
}

pub fn estimate_shrinkage(
    layout: &StudyLayout,
    scans: &[SubjectScans],
    methods: &[NoiseMethod],
    opts: &PipelineOptions,
) -> Result<LayoutEstimates> {
    let raw = part_correlations(scans, &layout.target, "target")?;
    let raw_s = to_space(&raw, opts.space)?;
    let test = layout
        .test
        .as_ref()
        .map(|p| part_correlations(scans, p, "test"))
        .transpose()?;
    let arms = match layout.mode {
        LayoutMode::TestRetest3Part => {
            let second = to_space(
                &part_correlations(scans, &layout.replicates[1], "replicate-2")?,
                opts.space,
            )?;
            let inputs = ModeInputs {
                raw: &raw_s,
                replicate_a: &raw_s,
                replicate_b: &second,
                total_sessions: vec![&raw_s, &second],
                global_override: Some(replicate_global(&raw_s, &second)?),
            };
            shrink_for_methods(&inputs, methods, opts.signal_source)?
        }
        LayoutMode::SingleScanPseudo => {
            let half_a = to_space(
                &part_correlations(scans, &layout.replicates[0], "half-a")?,
                opts.space,
            )?;
            let half_b = to_space(
                &part_correlations(scans, &layout.replicates[1], "half-b")?,
                opts.space,
            )?;
            let session2 = match (&opts.global_source, &layout.second_session) {
                (GlobalNoiseSource::SecondSession, Some(p)) => Some(to_space(
                    &part_correlations(scans, p, "session-2")?,
                    opts.space,
                )?),
                _ => None,
            };
            let global = split_scan_global(
                &opts.global_source,
                (&half_a, &half_b),
                session2.as_deref().map(|s2| (raw_s.as_slice(), s2)),
                layout.session_length,
            )?;
            let inputs = ModeInputs {
                raw: &raw_s,
                replicate_a: &half_a,
                replicate_b: &half_b,
                total_sessions: vec![&raw_s],
                global_override: Some(global),
            };
            shrink_for_methods(&inputs, methods, opts.signal_source)?
        }
    };
    Ok(LayoutEstimates { raw, test, arms })
}

/// What the estimates are scored against.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    /// Raw estimate (or its parcellation) from the held-out test set.
    TestSet,
    /// Known truth, e.g. from a simulation.
    Known(&'a [ConnectivityMatrix]),
    KnownParcellations(&'a [Parcellation]),
}

fn missing_test() -> Error {
    Error::InvalidInput("layout has no test set; a second session is required".into())
}

/// MSE of raw and shrunk estimates against the reference, one report per
/// method in `methods` order.
pub fn run_analysis_r1(
    layout: &StudyLayout,
    scans: &[SubjectScans],
    methods: &[NoiseMethod],
    opts: &PipelineOptions,
    reference: Reference<'_>,
) -> Result<Vec<(NoiseMethod, ReliabilityReport)>> {
    let est = estimate_shrinkage(layout, scans, methods, opts)?;
    let truth: &[ConnectivityMatrix] = match reference {
        Reference::TestSet => est.test.as_deref().ok_or_else(missing_test)?,
        Reference::Known(t) => t,
        Reference::KnownParcellations(_) => {
            return Err(Error::InvalidInput("MSE needs reference matrices".into()))
        }
    };
    if truth.len() != scans.len() {
        return Err(Error::DimensionMismatch {
            expected: scans.len(),
            found: truth.len(),
        });
    }
    est.arms
        .iter()
        .map(|(method, shrunk)| {
            let rows = scans
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    Ok(SubjectReliability {
                        subject_id: s.subject_id.clone(),
                        mse_raw: Some(matrix_mse(&est.raw[i], &truth[i])?),
                        mse_shrunk: Some(matrix_mse(&shrunk[i].correlation, &truth[i])?),
                        dice_raw: None,
                        dice_shrunk: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((*method, summarize(rows)?))
        })
        .collect()
}

/// Dice of raw and shrunk parcellations against the reference parcellation.
/// Subject `i` is clustered with the seed `derive_seed(seed, "cluster", i)`
/// for every arm and for its test set.
pub fn run_analysis_r2(
    layout: &StudyLayout,
    scans: &[SubjectScans],
    methods: &[NoiseMethod],
    opts: &PipelineOptions,
    k: usize,
    seed: u64,
    n_init: usize,
    reference: Reference<'_>,
) -> Result<Vec<(NoiseMethod, ReliabilityReport)>> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("need k >= 2, got {k}")));
    }
    let est = estimate_shrinkage(layout, scans, methods, opts)?;
    let subject_seed = |i: usize| rng::derive_seed(seed, "cluster", i as u64);
    let cluster_all = |cs: &[ConnectivityMatrix]| -> Result<Vec<Parcellation>> {
        cs.par_iter()
            .enumerate()
            .map(|(i, c)| cluster_correlation(c, k, subject_seed(i), n_init))
            .collect()
    };
    let truth: Vec<Parcellation> = match reference {
        Reference::TestSet => cluster_all(est.test.as_deref().ok_or_else(missing_test)?)?,
        Reference::KnownParcellations(p) => p.to_vec(),
        Reference::Known(_) => {
            return Err(Error::InvalidInput(
                "Dice needs reference parcellations".into(),
            ))
        }
    };
    if truth.len() != scans.len() {
        return Err(Error::DimensionMismatch {
            expected: scans.len(),
            found: truth.len(),
        });
    }
    let raw = cluster_all(&est.raw)?;
    est.arms
        .iter()
        .map(|(method, shrunk)| {
            let shrunk_c: Vec<ConnectivityMatrix> =
                shrunk.iter().map(|s| s.correlation.clone()).collect();
            let parcels = cluster_all(&shrunk_c)?;
            let rows = scans
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    Ok(SubjectReliability {
                        subject_id: s.subject_id.clone(),
                        mse_raw: None,
                        mse_shrunk: None,
                        dice_raw: Some(dice(&raw[i], &truth[i])?),
                        dice_shrunk: Some(dice(&parcels[i], &truth[i])?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((*method, summarize(rows)?))
        })
        .collect()
}

fn opt_g(v: Option<f64>) -> String {
    v.map(io::format_g17).unwrap_or_default()
}

/// Per-subject rows of every report.
pub fn reports_to_csv(reports: &[(NoiseMethod, ReliabilityReport)]) -> String {
    let mut out = String::from("method,subject_id,mse_raw,mse_shrunk,dice_raw,dice_shrunk\n");
    for (method, report) in reports {
        for r in &report.subjects {
            out.push_str(&format!(
                "{method},{},{},{},{},{}\n",
                r.subject_id,
                opt_g(r.mse_raw),
                opt_g(r.mse_shrunk),
                opt_g(r.dice_raw),
                opt_g(r.dice_shrunk)
            ));
        }
    }
    out
}

/// Medians and percent changes, one row per method.
pub fn report_summary_csv(reports: &[(NoiseMethod, ReliabilityReport)]) -> String {
    let mut out = String::from(
        "method,median_mse_raw,median_mse_shrunk,mse_pct_decrease,median_dice_raw,median_dice_shrunk,dice_pct_increase\n",
    );
    for (method, r) in reports {
        out.push_str(&format!(
            "{method},{},{},{},{},{},{}\n",
            opt_g(r.median_mse_raw),
            opt_g(r.median_mse_shrunk),
            opt_g(r.mse_percent_decrease),
            opt_g(r.median_dice_raw),
            opt_g(r.median_dice_shrunk),
            opt_g(r.dice_percent_increase)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::Rng as _;

    fn scans(n_subjects: usize, lens: &[usize], v: usize, seed: u64) -> Vec<SubjectScans> {
        let mut rng = rng::substream(seed, "test-scans", 0);
        (0..n_subjects)
            .map(|i| SubjectScans {
                subject_id: format!("s{i}"),
                sessions: lens
                    .iter()
                    .enumerate()
                    .map(|(j, &t)| {
                        let m = DMatrix::from_fn(t, v, |_, _| rng.random::<f64>() + 3.0);
                        TimeSeriesMatrix::new(m, format!("s{i}"), format!("{}", j + 1)).unwrap()
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn thirds() {
        assert_eq!(
            three_part_boundaries(420).unwrap(),
            [0..140, 140..280, 280..420]
        );
        assert_eq!(
            three_part_boundaries(421).unwrap(),
            [0..140, 140..280, 280..420]
        );
        assert!(matches!(three_part_boundaries(29), Err(Error::TooShort(9))));
    }

    #[test]
    fn three_part_layout_spans_sessions() {
        let data = scans(2, &[210, 210], 3, 1);
        let l = build_layout(&data, LayoutMode::TestRetest3Part).unwrap();
        assert_eq!(l.target.len(), 140);
        let mid = &l.replicates[1];
        assert_eq!(mid.segments.len(), 2);
        assert_eq!(mid.segments[0].range, 140..210);
        assert_eq!(mid.segments[1].range, 0..70);
        assert_eq!(l.test.as_ref().unwrap().segments[0].range, 70..210);
        assert_eq!(l.test.as_ref().unwrap().segments[0].session, 1);

        // Each session piece of the middle part is centred.
        let ts = mid.extract(&data[0], "m").unwrap();
        for (lo, hi) in [(0, 70), (70, 140)] {
            for c in 0..3 {
                let m = ts.values().view((lo, c), (hi - lo, 1)).mean();
                assert!(m.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn parts_are_disjoint_and_cover_the_timeline() {
        let data = scans(1, &[211, 211], 2, 2);
        let l = build_layout(&data, LayoutMode::TestRetest3Part).unwrap();
        let mut seen = vec![0u8; 422];
        for p in [&l.replicates[0], &l.replicates[1], l.test.as_ref().unwrap()] {
            for s in &p.segments {
                for t in s.range.clone() {
                    seen[s.session * 211 + t] += 1;
                }
            }
        }
        assert!(seen[..420].iter().all(|&c| c == 1));
        assert!(seen[420..].iter().all(|&c| c == 0));
    }

    #[test]
    fn layout_errors() {
        let data = scans(1, &[100, 90], 2, 3);
        assert!(matches!(
            build_layout(&data, LayoutMode::TestRetest3Part),
            Err(Error::UnequalSessionLengths { .. })
        ));
        let short = scans(1, &[14, 14], 2, 3);
        assert!(matches!(
            build_layout(&short, LayoutMode::TestRetest3Part),
            Err(Error::TooShort(9))
        ));
        let single = scans(1, &[200], 2, 3);
        let l = build_layout(&single, LayoutMode::SingleScanPseudo).unwrap();
        assert_eq!(l.replicates[0].len(), 100);
        assert_eq!(l.replicates[1].len(), 100);
        assert!(l.test.is_none());
    }

    #[test]
    fn zero_shrinkage_leaves_metrics_unchanged() {
        // Identical sessions give zero noise variance, so lambda is 0.
        let mut data = scans(4, &[60, 60], 4, 4);
        for s in &mut data {
            let mut copy = s.sessions[0].clone();
            copy.session_id = "2".into();
            s.sessions[1] = copy;
        }
        let l = build_layout(&data, LayoutMode::SingleScanPseudo).unwrap();
        // Halves differ, so swap the replicates for the full session twice.
        let l = StudyLayout {
            replicates: [l.target.clone(), l.target.clone()],
            ..l
        };
        let opts = PipelineOptions::default();
        let r1 =
            run_analysis_r1(&l, &data, &[NoiseMethod::Common], &opts, Reference::TestSet).unwrap();
        for row in &r1[0].1.subjects {
            assert_eq!(row.mse_raw, row.mse_shrunk);
        }
        let r2 = run_analysis_r2(
            &l,
            &data,
            &[NoiseMethod::Common],
            &opts,
            2,
            5,
            3,
            Reference::TestSet,
        )
        .unwrap();
        for row in &r2[0].1.subjects {
            assert_eq!(row.dice_raw, row.dice_shrunk);
        }
    }

    #[test]
    fn analyses_are_deterministic() {
        let data = scans(5, &[90, 90], 6, 6);
        let l = build_layout(&data, LayoutMode::TestRetest3Part).unwrap();
        let opts = PipelineOptions::default();
        let a = run_analysis_r2(
            &l,
            &data,
            &NoiseMethod::ALL,
            &opts,
            2,
            1,
            2,
            Reference::TestSet,
        )
        .unwrap();
        let b = run_analysis_r2(
            &l,
            &data,
            &NoiseMethod::ALL,
            &opts,
            2,
            1,
            2,
            Reference::TestSet,
        )
        .unwrap();
        assert_eq!(reports_to_csv(&a), reports_to_csv(&b));
        assert_eq!(a.len(), 4);
    }
}
