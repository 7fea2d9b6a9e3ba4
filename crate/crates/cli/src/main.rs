use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use i2ekf::config::{self, ParsedConfig};
use i2ekf::eval::{evaluate, SampleStats, Trajectory};
use i2ekf::odometry::{run_dataset, OdometryConfig, RunSummary};
use i2ekf::pointcloud::ScanFormat;
use i2ekf::sim::{export_dataset, LidarModel, ProfileKind, ScanPattern, TrajectoryProfile, World};
use i2ekf::state::MotionModel;
use i2ekf::Error;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "i2ekf", version, about = "LiDAR-only odometry with a dual-iteration EKF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a motion-distorted dataset with ground truth.
    Sim(SimArgs),
    /// Run odometry over a dataset directory.
    Run(RunArgs),
    /// Compare an estimated trajectory with a reference.
    Eval(EvalArgs),
    /// Repeat a run and report per-frame timing.
    Bench(BenchArgs),
    /// Run the standard ablation arms against the dataset's ground truth.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SimArgs {
    #[arg(long, default_value = "room")]
    world: String,
    #[arg(long, default_value = "static")]
    profile: String,
    /// Scan rate, Hz.
    #[arg(long, default_value_t = 10.0)]
    rate: f64,
    #[arg(long, default_value_t = 5000)]
    points: usize,
    /// Seconds.
    #[arg(long)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Range noise standard deviation, meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// spinning or quasi_random.
    #[arg(long, default_value = "spinning")]
    pattern: String,
    /// bin or csv.
    #[arg(long, default_value = "bin")]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct PipelineArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// `key = value` file; a previous run's manifest works too.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    segments: Option<usize>,
    /// Single outer pass: deskew once with the prediction.
    #[arg(long)]
    no_dual_iter: bool,
    /// Disable noise adaptation and use this fixed scale.
    #[arg(long)]
    fixed_q: Option<f64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Maximum stamp difference for association, seconds.
    #[arg(long, default_value_t = 0.01)]
    max_dt: f64,
    /// Also write `eval.txt` and `errors.csv` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, default_value_t = 3)]
    repeat: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reference trajectory; defaults to the dataset's `gt.tum`.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    max_dt: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn kind_and_code(&self) -> (&'static str, u8) {
        match self {
            CliError::Usage(_) | CliError::Lib(Error::InvalidArgument(_)) => ("usage", 2),
            CliError::Lib(Error::NumericFailure(_) | Error::DegenerateMeasurement { .. }) => ("numeric", 4),
            CliError::Lib(_) => ("data", 3),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Lib(e) => e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Lib(Error::Io { path: path.to_path_buf(), source: e }))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Lib(Error::Io { path: path.to_path_buf(), source: e }))
}

/// Defaults, then the config file, then command-line flags.
fn resolve_config(args: &PipelineArgs) -> CliResult<OdometryConfig> {
    let parsed = match &args.config {
        Some(path) => config::load(path, OdometryConfig::default())?,
        None => ParsedConfig {
            config: OdometryConfig::default(),
            keys: Default::default(),
        },
    };
    let mut cfg = parsed.config;
    if let Some(model) = &args.model {
        cfg.filter.model = model.parse::<MotionModel>()?;
    }
    if let Some(n) = args.segments {
        cfg.segments = n;
    }
    if args.no_dual_iter {
        cfg.filter.max_outer = 1;
    }
    if let Some(q) = args.fixed_q {
        if parsed.keys.contains("adaptive_noise") && cfg.filter.adaptive_noise {
            return Err(CliError::Usage(
                "--fixed-q conflicts with adaptive_noise = true in the config file".into(),
            ));
        }
        cfg.filter.adaptive_noise = false;
        cfg.filter.q_scale = q;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest(header: &[(&str, String)], cfg: Option<&OdometryConfig>) -> String {
    let mut out = String::new();
    for (k, v) in header {
        let _ = writeln!(out, "# {k}: {v}");
    }
    if let Some(cfg) = cfg {
        out.push_str(&config::to_text(cfg));
    }
    out
}

fn run_summary_lines(summary: &RunSummary) -> Vec<(&'static str, String)> {
    let mut lines = vec![
        ("records", summary.records.len().to_string()),
        ("skipped_frames", summary.skipped_frames.to_string()),
        ("degenerate_updates", summary.degenerate_updates.to_string()),
        ("map_points", summary.map_points.to_string()),
    ];
    if let Some(t) = &summary.timing {
        lines.push(("frame_mean_ms", format!("{:.3}", t.mean)));
        lines.push(("frame_p95_ms", format!("{:.3}", t.p95)));
    }
    lines
}

fn cmd_sim(args: &SimArgs) -> CliResult<()> {
    let world = World::preset(&args.world)?;
    let kind: ProfileKind = args.profile.parse()?;
    let profile = TrajectoryProfile::preset(kind, &args.world, args.duration)?;
    let lidar = LidarModel {
        rate_hz: args.rate,
        points_per_scan: args.points,
        pattern: args.pattern.parse::<ScanPattern>()?,
        range_sigma: args.noise,
        seed: args.seed,
        ..Default::default()
    };
    let format = match args.format.as_str() {
        "bin" => ScanFormat::Binary,
        "csv" => ScanFormat::Csv,
        other => return Err(CliError::Usage(format!("unknown scan format '{other}' (expected bin or csv)"))),
    };
    let start = Instant::now();
    let summary = export_dataset(&world, &profile, &lidar, args.duration, &args.out, format)?;
    let header = [
        ("command", "sim".to_string()),
        ("version", VERSION.to_string()),
        ("world", args.world.clone()),
        ("profile", kind.to_string()),
        ("rate_hz", format!("{:?}", args.rate)),
        ("points", args.points.to_string()),
        ("duration_s", format!("{:?}", args.duration)),
        ("seed", args.seed.to_string()),
        ("noise_m", format!("{:?}", args.noise)),
        ("pattern", args.pattern.clone()),
        ("out", args.out.display().to_string()),
        ("frames", summary.frames.to_string()),
        ("returns", summary.points.to_string()),
        ("misses", summary.misses.to_string()),
        ("wall_clock_s", format!("{:.3}", start.elapsed().as_secs_f64())),
    ];
    write_file(&args.out.join("manifest.txt"), &manifest(&header, None))?;
    println!(
        "wrote {} frames ({} returns) to {}",
        summary.frames,
        summary.points,
        args.out.display()
    );
    Ok(())
}

fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let cfg = resolve_config(&args.pipeline)?;
    let start = Instant::now();
    let summary = run_dataset(&args.pipeline.dataset, &cfg, &args.out)?;
    let mut header = vec![
        ("command", "run".to_string()),
        ("version", VERSION.to_string()),
        ("dataset", args.pipeline.dataset.display().to_string()),
        ("out", args.out.display().to_string()),
        ("seed", "none".to_string()),
    ];
    header.extend(run_summary_lines(&summary));
    header.push(("wall_clock_s", format!("{:.3}", start.elapsed().as_secs_f64())));
    write_file(&args.out.join("manifest.txt"), &manifest(&header, Some(&cfg)))?;
    print!("{}", fs::read_to_string(&summary.timing_path).unwrap_or_default());
    println!("trajectory: {}", summary.trajectory_path.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let est = Trajectory::read_tum(&args.est)?;
    let reference = Trajectory::read_tum(&args.reference)?;
    let report = evaluate(&est, &reference, args.max_dt)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_file(&out.join("eval.txt"), &text)?;
        write_file(&out.join("errors.csv"), &report.errors_csv())?;
    }
    Ok(())
}

fn stats_line(label: &str, s: &SampleStats) -> String {
    format!(
        "{label}: frames {} mean {:.3} median {:.3} p95 {:.3} ms\n",
        s.count, s.mean, s.median, s.p95
    )
}

fn cmd_bench(args: &BenchArgs) -> CliResult<()> {
    if args.repeat == 0 {
        return Err(CliError::Usage("--repeat must be at least 1".into()));
    }
    let cfg = resolve_config(&args.pipeline)?;
    create_dir(&args.out)?;
    let mut report = String::new();
    let mut csv = String::from("repetition,frame,ms\n");
    let mut all = Vec::new();
    let mut means = Vec::new();
    for rep in 0..args.repeat {
        let summary = run_dataset(&args.pipeline.dataset, &cfg, &args.out.join(format!("rep_{rep}")))?;
        for (i, ms) in summary.frame_ms.iter().enumerate() {
            let _ = writeln!(csv, "{rep},{i},{ms:.6}");
        }
        if let Some(s) = &summary.timing {
            report.push_str(&stats_line(&format!("repetition {rep}"), s));
            means.push(s.mean);
        }
        all.extend(summary.frame_ms);
    }
    if let Some(s) = SampleStats::from_samples(&all) {
        report.push_str(&stats_line("all", &s));
    }
    if let Some(m) = SampleStats::from_samples(&means) {
        let _ = writeln!(report, "repetition_mean_spread: {:.1}%", 100.0 * (m.max - m.min) / m.mean);
    }
    print!("{report}");
    write_file(&args.out.join("bench.txt"), &report)?;
    write_file(&args.out.join("bench.csv"), &csv)?;
    let header = [
        ("command", "bench".to_string()),
        ("version", VERSION.to_string()),
        ("dataset", args.pipeline.dataset.display().to_string()),
        ("out", args.out.display().to_string()),
        ("repeat", args.repeat.to_string()),
    ];
    write_file(&args.out.join("manifest.txt"), &manifest(&header, Some(&cfg)))?;
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> CliResult<()> {
    let reference_path = args.reference.clone().unwrap_or_else(|| args.dataset.join("gt.tum"));
    let reference = Trajectory::read_tum(&reference_path)?;
    let base = PipelineArgs {
        dataset: args.dataset.clone(),
        config: args.config.clone(),
        model: None,
        segments: None,
        no_dual_iter: false,
        fixed_q: None,
    };
    let arms: Vec<(&str, PipelineArgs)> = vec![
        ("full", base.clone()),
        ("no_dual_iter", PipelineArgs { no_dual_iter: true, ..base.clone() }),
        ("fixed_q_0.01", PipelineArgs { fixed_q: Some(0.01), ..base.clone() }),
        ("fixed_q_100", PipelineArgs { fixed_q: Some(100.0), ..base.clone() }),
        ("model_1", PipelineArgs { model: Some("1".into()), ..base.clone() }),
        ("model_2", PipelineArgs { model: Some("2".into()), ..base.clone() }),
    ];
    create_dir(&args.out)?;
    let mut table = String::from("arm ate_rmse_m end_to_end_m mean_ms status\n");
    for (name, arm) in &arms {
        let cfg = resolve_config(arm)?;
        let out = args.out.join(name);
        let row = match run_dataset(&args.dataset, &cfg, &out) {
            Ok(summary) => {
                let est = Trajectory::read_tum(&summary.trajectory_path)?;
                let report = evaluate(&est, &reference, args.max_dt)?;
                write_file(&out.join("manifest.txt"), &manifest(&[("arm", name.to_string())], Some(&cfg)))?;
                let mean = summary.timing.map_or(f64::NAN, |t| t.mean);
                format!("{name} {:.6} {:.6} {mean:.3} ok", report.ate_rmse, report.end_to_end)
            }
            Err(Error::NumericFailure(msg)) => {
                log::warn!("arm {name}: {msg}");
                format!("{name} nan nan nan numeric_failure")
            }
            Err(e) => return Err(e.into()),
        };
        println!("{row}");
        table.push_str(&row);
        table.push('\n');
    }
    write_file(&args.out.join("ablation.txt"), &table)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            eprint!("{}", rendered.lines().skip(1).fold(String::new(), |acc, l| acc + l + "\n"));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Sim(a) => cmd_sim(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = e.kind_and_code();
            eprintln!("error[{kind}]: {}", e.message().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
