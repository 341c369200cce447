//! Checks shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

pub mod equivalence;

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use shrinkparc::connectivity::{
    apply_shrinkage, fisher_z, group_mean, inverse_fisher_z, ConnectivityMatrix, ShrinkageField,
};
use shrinkparc::estimation::cluster_correlation;
use shrinkparc::metrics::dice;
use shrinkparc::simulation::{rows_to_csv, run_analysis_s1, SimulationDesign};
use shrinkparc::variance::{
    global_from_value, noise_variance_common, scaling_factor, shrinkage_parameter, signal_variance,
    NoiseMethod, SubjectDifference,
};
use shrinkparc::{PairField, Parcellation, Space};

pub fn correlation() -> impl Strategy<Value = f64> {
    -0.999_999f64..0.999_999
}

pub fn fisher_round_trip(r: f64) -> Result<(), TestCaseError> {
    let back = inverse_fisher_z(fisher_z(r));
    prop_assert!((back - r).abs() <= 1e-12, "{r} -> {back}");
    Ok(())
}

fn corr_pair(value: f64, id: &str) -> ConnectivityMatrix {
    ConnectivityMatrix::new(
        PairField::from_values(2, vec![value]).unwrap(),
        Space::Correlation,
        id,
        "1",
    )
    .unwrap()
}

/// Raw value, the other subject's value (which sets the mean), and two
/// shrinkage weights.
pub fn shrinkage_case() -> impl Strategy<Value = (f64, f64, f64, f64)> {
    (-0.99f64..0.99, -0.99f64..0.99, 0.0f64..=1.0, 0.0f64..=1.0)
}

/// Shrunk values lie between the raw value and the group mean, and move
/// monotonically towards the mean as lambda grows.
pub fn shrinkage_convex_monotone(
    (w, other, l1, l2): (f64, f64, f64, f64),
) -> Result<(), TestCaseError> {
    let raw = corr_pair(w, "a");
    let mean = group_mean(&[raw.clone(), corr_pair(other, "b")]).unwrap();
    let m = mean.pairs().values()[0];
    let shrink = |l: f64| {
        apply_shrinkage(&raw, &mean, &ShrinkageField::uniform(2, l).unwrap())
            .unwrap()
            .pairs()
            .values()[0]
    };
    let (lo, hi) = (l1.min(l2), l1.max(l2));
    let (s_lo, s_hi) = (shrink(lo), shrink(hi));
    for s in [s_lo, s_hi] {
        prop_assert!(s >= w.min(m) && s <= w.max(m), "{s} outside [{w}, {m}]");
    }
    prop_assert!((s_hi - m).abs() <= (s_lo - m).abs() + 1e-15);
    prop_assert_eq!(shrink(0.0), w);
    prop_assert!((shrink(1.0) - m).abs() <= 1e-15);
    Ok(())
}

/// Noise and signal variances; lambda must not decrease as noise grows.
pub fn lambda_case() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0)
}

pub fn lambda_monotone((noise, extra, total): (f64, f64, f64)) -> Result<(), TestCaseError> {
    let lambda = |u: f64| {
        let field = global_from_value(2, u);
        let signal = signal_variance(&PairField::filled(2, total), &field).unwrap();
        shrinkage_parameter(&field, &signal)
            .unwrap()
            .pairs()
            .values()[0]
    };
    let (a, b) = (lambda(noise), lambda(noise + extra));
    prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
    prop_assert!(b >= a, "lambda fell from {a} to {b}");
    Ok(())
}

fn brute_force_dice(a: &[usize], b: &[usize]) -> f64 {
    let (mut both, mut na, mut nb) = (0u64, 0u64, 0u64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let (sa, sb) = (a[i] == a[j], b[i] == b[j]);
            na += sa as u64;
            nb += sb as u64;
            both += (sa && sb) as u64;
        }
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Every set partition of `n` items as a restricted growth string.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut labels = vec![0usize; n];
    fn rec(i: usize, max: usize, labels: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == labels.len() {
            out.push(labels.clone());
            return;
        }
        for l in 0..=max + 1 {
            labels[i] = l;
            rec(i + 1, max.max(l), labels, out);
        }
    }
    if n == 0 {
        return out;
    }
    rec(1, 0, &mut labels, &mut out);
    out
}

/// Dice against a pair-by-pair count for every pair of partitions of up to
/// `exhaustive_up_to` voxels, and every partition against `references` of
/// each larger size up to 8.
pub fn dice_matches_brute_force(
    exhaustive_up_to: usize,
    references: usize,
) -> Result<usize, String> {
    let mut checked = 0;
    for n in 1..=8 {
        let parts = set_partitions(n);
        let parcels: Vec<Parcellation> = parts
            .iter()
            .map(|p| Parcellation::from_labels(p).unwrap())
            .collect();
        let refs: Vec<usize> = if n <= exhaustive_up_to {
            (0..parts.len()).collect()
        } else {
            (0..parts.len())
                .step_by((parts.len() / references).max(1))
                .collect()
        };
        for (i, p) in parts.iter().enumerate() {
            for &j in &refs {
                let want = brute_force_dice(p, &parts[j]);
                let got = dice(&parcels[i], &parcels[j]).map_err(|e| e.to_string())?;
                if (got - want).abs() > 1e-15 {
                    return Err(format!(
                        "dice({p:?}, {:?}) = {got}, brute force {want}",
                        parts[j]
                    ));
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}

/// Block sizes (each at least 2), within-block correlation, and a voxel
/// permutation seed.
pub fn block_case() -> impl Strategy<Value = (Vec<usize>, f64, u64)> {
    (
        prop::collection::vec(2usize..12, 4),
        0.05f64..0.9,
        any::<u64>(),
    )
}

pub fn noiseless_blocks_recovered(
    (sizes, rho, seed): (Vec<usize>, f64, u64),
) -> Result<(), TestCaseError> {
    let mut labels: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
        .collect();
    // Scatter voxels with a seeded Fisher-Yates shuffle.
    let mut state = seed | 1;
    for i in (1..labels.len()).rev() {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        labels.swap(i, (state % (i as u64 + 1)) as usize);
    }
    let truth = Parcellation::from_labels(&labels).unwrap();
    let pairs = PairField::from_fn(
        labels.len(),
        |i, j| if labels[i] == labels[j] { rho } else { 0.0 },
    );
    let c = ConnectivityMatrix::new(pairs, Space::Correlation, "s", "1").unwrap();
    let found = cluster_correlation(&c, 4, seed, 10).unwrap();
    prop_assert_eq!(dice(&found, &truth).unwrap(), 1.0);
    Ok(())
}

/// Difference matrices for several subjects.
pub fn differences_case() -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
    (3usize..7, 2usize..8).prop_flat_map(|(n, subjects)| {
        let pairs = n * (n - 1) / 2;
        (
            Just(n),
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, pairs), subjects),
        )
    })
}

fn diffs(n: usize, values: &[Vec<f64>]) -> Vec<SubjectDifference> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| SubjectDifference {
            subject_id: format!("s{i}"),
            pairs: PairField::from_values(n, v.clone()).unwrap(),
        })
        .collect()
}

pub fn gamma_mean_is_one((n, values): (usize, Vec<Vec<f64>>)) -> Result<(), TestCaseError> {
    let d = diffs(n, &values);
    match scaling_factor(&d) {
        Ok(g) => {
            let mean = g.gamma.iter().sum::<f64>() / g.gamma.len() as f64;
            prop_assert!((mean - 1.0).abs() <= 1e-12, "mean gamma {mean}");
        }
        Err(_) => prop_assert!(values.iter().flatten().all(|&v| v == 0.0)),
    }
    Ok(())
}

pub fn signal_nonnegative((n, values): (usize, Vec<Vec<f64>>)) -> Result<(), TestCaseError> {
    let d = diffs(n, &values);
    let noise = noise_variance_common(&d).unwrap();
    prop_assert_eq!(noise.method, NoiseMethod::Common);
    // Total variance taken from the first subject's squared differences,
    // which is unrelated to the noise and often smaller.
    let total = PairField::from_values(n, values[0].iter().map(|v| v * v / 4.0).collect()).unwrap();
    let signal = signal_variance(&total, &noise).unwrap();
    prop_assert!(signal.pairs.values().iter().all(|&s| s >= 0.0));
    let recount = (0..total.len())
        .filter(|&k| total.values()[k] - noise.at(k) < 0.0)
        .count();
    prop_assert_eq!(signal.clamped_count, recount);
    Ok(())
}

/// A small simulation yields identical bytes on 1 and 4 worker threads.
pub fn thread_count_determinism(seed: u64) -> Result<(), String> {
    let design = SimulationDesign {
        subjects: 5,
        timepoints: 40,
        iterations: 3,
        n_init: 2,
        seed,
        ..SimulationDesign::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_analysis_s1(&design).map(|r| rows_to_csv(&r.rows)))
    };
    let one = run(1).map_err(|e| e.to_string())?;
    let four = run(4).map_err(|e| e.to_string())?;
    if one == four {
        Ok(())
    } else {
        Err("output differs between 1 and 4 threads".into())
    }
}
