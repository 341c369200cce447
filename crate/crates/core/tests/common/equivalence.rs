//! Simulated sessions routed through the real-data pipeline, compared with
//! the simulation harness's single-session numbers.

use shrinkparc::estimation::DataMode;
use shrinkparc::pipeline::{
    build_layout, run_analysis_r1, run_analysis_r2, LayoutMode, PipelineOptions, Reference,
};
use shrinkparc::simulation::{
    evaluate_iteration, simulate_iteration_data, ResultRow, SimulationDesign,
};
use shrinkparc::variance::SubjectScans;
use shrinkparc::NoiseMethod;

/// Per-subject (mse_raw, mse_shrunk, dice_raw, dice_shrunk) for each method.
pub type ArmNumbers = Vec<(NoiseMethod, Vec<[f64; 4]>)>;

fn harness_numbers(design: &SimulationDesign, iteration: usize) -> ArmNumbers {
    let data = simulate_iteration_data(design, iteration).unwrap();
    let rows = evaluate_iteration(design, iteration, &data).unwrap();
    let raw: Vec<&ResultRow> = rows.iter().filter(|r| r.method.is_none()).collect();
    design
        .methods
        .iter()
        .map(|&m| {
            let shrunk: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| r.method == Some(m) && r.mode == Some(DataMode::SingleSession))
                .collect();
            let per_subject = raw
                .iter()
                .zip(&shrunk)
                .map(|(r, s)| [r.mse, s.mse, r.dice_full, s.dice_full])
                .collect();
            (m, per_subject)
        })
        .collect()
}

fn pipeline_numbers(design: &SimulationDesign, iteration: usize) -> ArmNumbers {
    let data = simulate_iteration_data(design, iteration).unwrap();
    let scans: Vec<SubjectScans> = data
        .iter()
        .map(|d| SubjectScans {
            subject_id: d.subject_id.clone(),
            sessions: d.sessions.to_vec(),
        })
        .collect();
    let truth: Vec<_> = data.iter().map(|d| d.truth.clone()).collect();
    let parcels: Vec<_> = data.iter().map(|d| d.parcellation.clone()).collect();
    let layout = build_layout(&scans, LayoutMode::SingleScanPseudo).unwrap();
    let opts = PipelineOptions {
        space: design.space,
        signal_source: design.signal_source,
        global_source: design.global_source.clone(),
    };
    let r1 = run_analysis_r1(
        &layout,
        &scans,
        &design.methods,
        &opts,
        Reference::Known(&truth),
    )
    .unwrap();
    let r2 = run_analysis_r2(
        &layout,
        &scans,
        &design.methods,
        &opts,
        4,
        design.iteration_seed(iteration),
        design.n_init,
        Reference::KnownParcellations(&parcels),
    )
    .unwrap();
    r1.iter()
        .zip(&r2)
        .map(|((m, mse), (m2, dc))| {
            assert_eq!(m, m2);
            let per_subject = mse
                .subjects
                .iter()
                .zip(&dc.subjects)
                .map(|(a, b)| {
                    [
                        a.mse_raw.unwrap(),
                        a.mse_shrunk.unwrap(),
                        b.dice_raw.unwrap(),
                        b.dice_shrunk.unwrap(),
                    ]
                })
                .collect();
            (*m, per_subject)
        })
        .collect()
}

/// Compares bit patterns, so NaN or signed-zero differences also count.
pub fn equivalent(design: &SimulationDesign, iteration: usize) -> Result<usize, String> {
    let a = harness_numbers(design, iteration);
    let b = pipeline_numbers(design, iteration);
    let mut compared = 0;
    for ((ma, xa), (mb, xb)) in a.iter().zip(&b) {
        if ma != mb || xa.len() != xb.len() {
            return Err(format!("arm layout differs: {ma} vs {mb}"));
        }
        for (i, (ra, rb)) in xa.iter().zip(xb).enumerate() {
            for k in 0..4 {
                if ra[k].to_bits() != rb[k].to_bits() {
                    return Err(format!(
                        "{ma} subject {i} metric {k}: {} vs {}",
                        ra[k], rb[k]
                    ));
                }
                compared += 1;
            }
        }
    }
    Ok(compared)
}

pub fn small_design(seed: u64) -> SimulationDesign {
    SimulationDesign {
        subjects: 8,
        timepoints: 120,
        iterations: 1,
        n_init: 4,
        seed,
        modes: vec![DataMode::SingleSession],
        ..SimulationDesign::default()
    }
}
