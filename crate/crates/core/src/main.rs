use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use shrinkparc::appendix::{heterogeneous_sds, verify_expectation_identity};
use shrinkparc::connectivity::ConnectivityMatrix;
use shrinkparc::estimation::cluster_correlation;
use shrinkparc::io;
use shrinkparc::metrics::{dice, matrix_mse};
use shrinkparc::pipeline::{
    build_layout, load_manifest, report_summary_csv, reports_to_csv, run_analysis_r1,
    run_analysis_r2, LayoutMode, PipelineOptions, Reference,
};
use shrinkparc::simulation::{
    rows_to_csv, run_analysis_s1, run_analysis_s2, summary_line, summary_to_csv, ParameterGrid,
    SimulationDesign, SUMMARY_HEADER,
};
use shrinkparc::variance::{fit_theta_model, ThetaFitConfig, ThetaModel};
use shrinkparc::{
    DataMode, Error, GlobalNoiseSource, NoiseMethod, Result, SignalNoiseSource, Space,
};

#[derive(Debug, Parser)]
#[command(
    name = "shrinkparc",
    version,
    about = "Shrinkage connectivity estimation and spectral parcellation"
)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "SHRINKPARC_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the synthetic reliability study.
    Simulate(SimulateArgs),
    /// Shrink each subject's estimate and score MSE against the test set.
    Estimate(EstimateArgs),
    /// Cluster raw and shrunk estimates and score Dice against the test set.
    Parcellate(ParcellateArgs),
    /// Fit the split-scan noise adjustment against log scan length.
    FitTheta(FitThetaArgs),
    /// Monte Carlo check of the common/individual noise-variance expectation.
    VerifyAppendix(AppendixArgs),
    /// Spectral clustering of one correlation matrix.
    Cluster(ClusterArgs),
    /// MSE between matrices and/or Dice between parcellations.
    Metrics(MetricsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SpaceArg {
    Correlation,
    FisherZ,
}

impl From<SpaceArg> for Space {
    fn from(s: SpaceArg) -> Self {
        match s {
            SpaceArg::Correlation => Space::Correlation,
            SpaceArg::FisherZ => Space::FisherZ,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GlobalSourceArg {
    SecondSession,
    ThetaAdjusted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SignalSourceArg {
    Matched,
    Common,
    Global,
}

impl From<SignalSourceArg> for SignalNoiseSource {
    fn from(s: SignalSourceArg) -> Self {
        match s {
            SignalSourceArg::Matched => SignalNoiseSource::Matched,
            SignalSourceArg::Common => SignalNoiseSource::Common,
            SignalSourceArg::Global => SignalNoiseSource::Global,
        }
    }
}

#[derive(Debug, Args)]
struct ShrinkArgs {
    /// Noise variance methods.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "common,individual,scaled,global"
    )]
    methods: Vec<NoiseMethod>,
    /// Signal variance uses this noise estimate.
    #[arg(long, value_enum, default_value = "matched")]
    signal_source: SignalSourceArg,
    /// Global noise variance for split single scans.
    #[arg(long, value_enum, default_value = "second-session")]
    global_noise_source: GlobalSourceArg,
    /// Fitted model file for theta-adjusted global noise (default coefficients 0.590, 0.129).
    #[arg(long)]
    theta_model: Option<PathBuf>,
    /// Scan minutes per timepoint, used by the theta adjustment.
    #[arg(long, default_value_t = 2.0 / 60.0)]
    minutes_per_timepoint: f64,
}

impl ShrinkArgs {
    fn global_source(&self) -> Result<GlobalNoiseSource> {
        Ok(match self.global_noise_source {
            GlobalSourceArg::SecondSession => GlobalNoiseSource::SecondSession,
            GlobalSourceArg::ThetaAdjusted => GlobalNoiseSource::ThetaAdjusted {
                model: match &self.theta_model {
                    Some(p) => {
                        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                        ThetaModel::from_text(&text)?
                    }
                    None => ThetaModel::default(),
                },
                minutes_per_timepoint: self.minutes_per_timepoint,
            },
        })
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    #[arg(long, default_value_t = 200)]
    timepoints: usize,
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    /// Between-subject variance of the within-parcel correlation on the Fisher scale.
    #[arg(long, default_value_t = 0.02)]
    sigma2x: f64,
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "single-session,test-retest"
    )]
    modes: Vec<DataMode>,
    /// Probability that a border voxel swaps parcel.
    #[arg(long, default_value_t = 0.5)]
    flip_prob: f64,
    /// Space in which shrinkage is applied.
    #[arg(long, value_enum, default_value = "fisher-z")]
    space: SpaceArg,
    /// k-means restarts.
    #[arg(long, default_value_t = 10)]
    n_init: usize,
    /// Also run every one-at-a-time deviation of the sensitivity grid.
    #[arg(long)]
    sensitivity: bool,
    #[command(flatten)]
    shrink: ShrinkArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct RealDataArgs {
    /// CSV with columns subject_id,session_id,path.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test-retest")]
    mode: ModeArg,
    /// Space in which shrinkage is applied.
    #[arg(long, value_enum, default_value = "correlation")]
    space: SpaceArg,
    #[command(flatten)]
    shrink: ShrinkArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    TestRetest,
    SingleSession,
}

impl From<ModeArg> for LayoutMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TestRetest => LayoutMode::TestRetest3Part,
            ModeArg::SingleSession => LayoutMode::SingleScanPseudo,
        }
    }
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: RealDataArgs,
}

#[derive(Debug, Args)]
struct ParcellateArgs {
    #[command(flatten)]
    data: RealDataArgs,
    /// Number of parcels.
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    n_init: usize,
}

#[derive(Debug, Args)]
struct FitThetaArgs {
    /// CSV with columns subject_id,session_id,path; two sessions per subject.
    #[arg(long)]
    manifest: PathBuf,
    /// Scan lengths in minutes.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7")]
    lengths: Vec<f64>,
    #[arg(long, default_value_t = 30.0)]
    timepoints_per_minute: f64,
    #[arg(long, default_value_t = 50)]
    resamples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value = "fisher-z")]
    space: SpaceArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct AppendixArgs {
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    #[arg(long, default_value_t = 100_000)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Per-subject noise variances (default i/10 for subject i).
    #[arg(long, value_delimiter = ',')]
    noise_variances: Option<Vec<f64>>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    /// Dense correlation matrix (.csv or .bin).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    n_init: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Estimated correlation matrix.
    #[arg(long, requires = "truth")]
    estimate: Option<PathBuf>,
    /// Reference correlation matrix.
    #[arg(long, requires = "estimate")]
    truth: Option<PathBuf>,
    /// Parcellation CSV to score.
    #[arg(long, requires = "reference")]
    parcellation: Option<PathBuf>,
    /// Reference parcellation CSV.
    #[arg(long, requires = "parcellation")]
    reference: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Files produced by a run, written only after every computation succeeded.
struct Outputs {
    dir: Option<PathBuf>,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: Option<&Path>, config: String) -> Self {
        Self {
            dir: dir.map(Path::to_path_buf),
            files: vec![("config.resolved".into(), config.into_bytes())],
        }
    }

    fn add(&mut self, name: &str, text: String) {
        self.files.push((name.to_string(), text.into_bytes()));
    }

    fn write(self) -> Result<()> {
        if let Some(dir) = self.dir {
            for (name, bytes) in self.files {
                io::write_atomic(&dir.join(name), &bytes)?;
            }
        }
        Ok(())
    }
}

fn resolved_config(cli: &Cli) -> String {
    format!(
        "version = {}\nthreads = {}\n{:#?}\n",
        env!("CARGO_PKG_VERSION"),
        rayon::current_num_threads(),
        cli.command
    )
}

fn read_connectivity(path: &Path) -> Result<ConnectivityMatrix> {
    let m = io::read_matrix(path)?;
    ConnectivityMatrix::from_dense(&m, Space::Correlation, path.display().to_string(), "")
}

fn simulate(args: &SimulateArgs, out: &mut Outputs) -> Result<()> {
    let design = SimulationDesign {
        subjects: args.subjects,
        timepoints: args.timepoints,
        rho: args.rho,
        sigma2_x: args.sigma2x,
        iterations: args.iterations,
        seed: args.seed,
        flip_prob: args.flip_prob,
        space: args.space.into(),
        methods: args.shrink.methods.clone(),
        modes: args.modes.clone(),
        signal_source: args.shrink.signal_source.into(),
        global_source: args.shrink.global_source()?,
        n_init: args.n_init,
    };
    if args.sensitivity {
        let runs = run_analysis_s2(&design, &ParameterGrid::table1())?;
        let mut summary = format!("design,{SUMMARY_HEADER}\n");
        for (label, r) in &runs {
            for s in &r.summary {
                summary.push_str(&format!("{label},{}\n", summary_line(s)));
            }
        }
        let base = &runs[0].1;
        out.add("results_raw.csv", rows_to_csv(&base.rows));
        out.add("results_summary.csv", summary_to_csv(&base.summary));
        out.add("sensitivity_summary.csv", summary);
    } else {
        let r = run_analysis_s1(&design)?;
        out.add("results_raw.csv", rows_to_csv(&r.rows));
        out.add("results_summary.csv", summary_to_csv(&r.summary));
    }
    Ok(())
}

fn real_data(
    args: &RealDataArgs,
) -> Result<(
    shrinkparc::pipeline::StudyLayout,
    Vec<shrinkparc::variance::SubjectScans>,
    PipelineOptions,
)> {
    let scans = load_manifest(&args.manifest)?;
    let layout = build_layout(&scans, args.mode.into())?;
    let opts = PipelineOptions {
        space: args.space.into(),
        signal_source: args.shrink.signal_source.into(),
        global_source: args.shrink.global_source()?,
    };
    Ok((layout, scans, opts))
}

fn run(cli: &Cli) -> Result<()> {
    let config = resolved_config(cli);
    match &cli.command {
        Command::Simulate(a) => {
            let mut out = Outputs::new(Some(&a.out_dir), config);
            simulate(a, &mut out)?;
            out.write()
        }
        Command::Estimate(a) => {
            let (layout, scans, opts) = real_data(&a.data)?;
            let reports = run_analysis_r1(
                &layout,
                &scans,
                &a.data.shrink.methods,
                &opts,
                Reference::TestSet,
            )?;
            let mut out = Outputs::new(Some(&a.data.out_dir), config);
            out.add("mse_subjects.csv", reports_to_csv(&reports));
            out.add("mse_summary.csv", report_summary_csv(&reports));
            out.write()
        }
        Command::Parcellate(a) => {
            let (layout, scans, opts) = real_data(&a.data)?;
            let reports = run_analysis_r2(
                &layout,
                &scans,
                &a.data.shrink.methods,
                &opts,
                a.k,
                a.seed,
                a.n_init,
                Reference::TestSet,
            )?;
            let mut out = Outputs::new(Some(&a.data.out_dir), config);
            out.add("dice_subjects.csv", reports_to_csv(&reports));
            out.add("dice_summary.csv", report_summary_csv(&reports));
            out.write()
        }
        Command::FitTheta(a) => {
            let scans = load_manifest(&a.manifest)?;
            let cfg = ThetaFitConfig {
                lengths_minutes: a.lengths.clone(),
                timepoints_per_minute: a.timepoints_per_minute,
                resamples: a.resamples,
                seed: a.seed,
                space: a.space.into(),
            };
            let model = fit_theta_model(&scans, &cfg)?;
            print!("{}", model.to_text());
            let mut out = Outputs::new(Some(&a.out_dir), config);
            out.add("theta_model.txt", model.to_text());
            out.write()
        }
        Command::VerifyAppendix(a) => {
            let sds = match &a.noise_variances {
                Some(v) => v.iter().map(|x| x.sqrt()).collect(),
                None => heterogeneous_sds(a.subjects),
            };
            let report = verify_expectation_identity(a.subjects, a.replicates, &sds, a.seed)?;
            print!("{}", report.to_text());
            let mut out = Outputs::new(a.out_dir.as_deref(), config);
            out.add("appendix_report.txt", report.to_text());
            out.write()
        }
        Command::Cluster(a) => {
            let c = read_connectivity(&a.input)?;
            let p = cluster_correlation(&c, a.k, a.seed, a.n_init)?;
            let mut out = Outputs::new(Some(&a.out_dir), config);
            out.add("parcellation.csv", io::parcellation_to_csv(&p));
            out.write()
        }
        Command::Metrics(a) => {
            let mut text = String::new();
            if let (Some(e), Some(t)) = (&a.estimate, &a.truth) {
                let mse = matrix_mse(&read_connectivity(e)?, &read_connectivity(t)?)?;
                text.push_str(&format!("mse = {}\n", io::format_g17(mse)));
            }
            if let (Some(p), Some(r)) = (&a.parcellation, &a.reference) {
                let d = dice(&io::read_parcellation(p)?, &io::read_parcellation(r)?)?;
                text.push_str(&format!("dice = {}\n", io::format_g17(d)));
            }
            if text.is_empty() {
                return Err(Error::InvalidInput(
                    "give --estimate and --truth, or --parcellation and --reference".into(),
                ));
            }
            print!("{text}");
            let mut out = Outputs::new(a.out_dir.as_deref(), config);
            out.add("metrics.txt", text);
            out.write()
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 3 } else { 1 })
        }
    }
}
