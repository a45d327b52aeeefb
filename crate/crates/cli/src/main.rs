//! `epirt` command-line tool.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use epirt::epidata::{self, LoadReport};
use epirt::model::{mle, sliding_median_baseline};
use epirt::pipeline::{self, PipelineResult, BASELINE_THRESHOLD, BASELINE_WINDOW};
use epirt::solver::{write_trace_csv, SolverConfig};
use epirt::synth::{self, ScenarioSpec};
use epirt::{CountMatrix, EpiGraph, Execution, Hyperparameters, SerialInterval};

use manifest::{Manifest, RunResult};

/// Exit status when the iteration budget ran out before convergence.
const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "epirt", version, about = "Robust reproduction-number estimation from daily counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Jointly estimate reproduction numbers and outliers.
    Estimate(EstimateArgs),
    /// Per-day ratio estimate Z / ΦZ.
    Mle(MleArgs),
    /// Sliding-median outlier removal, optionally followed by estimation.
    Baseline(BaselineArgs),
    /// Draw synthetic counts from a scenario file.
    Synth(SynthArgs),
    /// Re-run the command recorded in a manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    /// Cumulative counts, one row per region and one `m/d/yy` column per day.
    Wide,
    /// Daily counts with header `territory,date,count`.
    Long,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct InputArgs {
    /// Counts file (see --format).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Long)]
    format: Format,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct SerialIntervalArgs {
    /// Shape of the Gamma serial interval.
    #[arg(long, default_value_t = epirt::serial_interval::DEFAULT_SHAPE)]
    si_shape: f64,
    /// Rate (per day) of the Gamma serial interval.
    #[arg(long, default_value_t = epirt::serial_interval::DEFAULT_RATE)]
    si_rate: f64,
    /// Number of daily lags kept.
    #[arg(long, default_value_t = epirt::serial_interval::DEFAULT_TAU)]
    si_tau: usize,
}

impl SerialIntervalArgs {
    fn build(&self) -> Result<SerialInterval> {
        Ok(SerialInterval::discretize_gamma(self.si_shape, self.si_rate, self.si_tau)?)
    }
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct SolverArgs {
    #[arg(long, default_value_t = 1e-7)]
    epsilon: f64,
    /// Iteration budget (10000000 for the long runs).
    #[arg(long, default_value_t = 200_000)]
    k_max: usize,
    #[arg(long, default_value_t = 500)]
    k_smooth: usize,
    #[arg(long, default_value_t = 0.99)]
    step_safety: f64,
    /// Evaluate the objective every this many iterations.
    #[arg(long, default_value_t = 1)]
    trace_every: usize,
    /// Run every kernel on the calling thread.
    #[arg(long)]
    sequential: bool,
}

impl SolverArgs {
    fn build(&self) -> Result<SolverConfig> {
        let config = SolverConfig {
            epsilon: self.epsilon,
            k_max: self.k_max,
            k_smooth: self.k_smooth,
            step_safety: self.step_safety,
            trace_every: self.trace_every,
            execution: if self.sequential { Execution::Sequential } else { Execution::Parallel },
            ..SolverConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

fn parse_lambda(text: &str) -> std::result::Result<f64, String> {
    let v: f64 = text.trim().parse().map_err(|_| format!("expected a number or inf, got {text:?}"))?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be nonnegative, got {text}"))
    }
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct EstimateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    input: InputArgs,
    /// Territory adjacency (edge list). Without it territories are independent.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = Hyperparameters::LAMBDA_T, value_parser = parse_lambda)]
    lambda_t: f64,
    /// Defaults to 0.002 with --graph and 0 without.
    #[arg(long, value_parser = parse_lambda)]
    lambda_s: Option<f64>,
    /// Outlier weight; "inf" disables outliers.
    #[arg(long, default_value_t = Hyperparameters::LAMBDA_O, value_parser = parse_lambda)]
    #[serde(with = "epirt::model::extended_real")]
    lambda_o: f64,
    #[command(flatten)]
    #[serde(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    #[serde(flatten)]
    serial_interval: SerialIntervalArgs,
    /// Output directory, created if missing.
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write the iteration log trace.csv.
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct MleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    serial_interval: SerialIntervalArgs,
    /// Output directory, created if missing.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct BaselineArgs {
    #[command(flatten)]
    #[serde(flatten)]
    input: InputArgs,
    /// Odd window length of the sliding median.
    #[arg(long, default_value_t = BASELINE_WINDOW)]
    window: usize,
    /// Replace samples farther than this many in-window standard deviations.
    #[arg(long, default_value_t = BASELINE_THRESHOLD)]
    threshold: f64,
    /// Estimate R on the cleaned counts without an outlier term.
    #[arg(long)]
    estimate: bool,
    #[arg(long, default_value_t = Hyperparameters::LAMBDA_T, value_parser = parse_lambda)]
    lambda_t: f64,
    #[command(flatten)]
    #[serde(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    #[serde(flatten)]
    serial_interval: SerialIntervalArgs,
    /// Output directory, created if missing.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct SynthArgs {
    /// Scenario file (key = value lines).
    #[arg(long)]
    spec: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    serial_interval: SerialIntervalArgs,
    /// Output directory, created if missing.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Clone)]
struct ReplayArgs {
    /// manifest.json of an earlier run.
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write; defaults to the manifest's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn load_counts(input: &InputArgs) -> Result<(CountMatrix, LoadReport)> {
    let loaded = match input.format {
        Format::Wide => epidata::load_cumulative_wide(&input.input),
        Format::Long => epidata::load_daily_long(&input.input),
    };
    Ok(loaded?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_estimate(dir: &Path, like: &CountMatrix, result: &PipelineResult, trace: bool) -> Result<Vec<String>> {
    epidata::write_values(&dir.join("R_hat.csv"), like, result.r_hat.view())?;
    epidata::write_values(&dir.join("O_hat.csv"), like, result.o_hat.view())?;
    epidata::write_values(&dir.join("P_hat.csv"), like, result.p_hat.view())?;
    let mut outputs = vec!["R_hat.csv".to_string(), "O_hat.csv".into(), "P_hat.csv".into()];
    if trace {
        let labels: Vec<&str> = if result.runs.len() == 1 && like.num_territories() > 1 {
            vec!["joint"]
        } else {
            like.territories().iter().map(String::as_str).collect()
        };
        let runs: Vec<(&str, &epirt::Estimate)> = labels.into_iter().zip(&result.runs).collect();
        let file = fs::File::create(dir.join("trace.csv"))?;
        write_trace_csv(std::io::BufWriter::new(file), &runs)?;
        outputs.push("trace.csv".into());
    }
    Ok(outputs)
}

fn status(converged: bool) -> u8 {
    if converged {
        0
    } else {
        EXIT_NOT_CONVERGED
    }
}

fn run_estimate(args: &EstimateArgs, manifest: &mut Manifest) -> Result<u8> {
    let (z, mut report) = load_counts(&args.input)?;
    let phi = args.serial_interval.build()?;
    let config = args.solver.build()?;
    let (z, graph) = match &args.graph {
        Some(path) => {
            let graph = epidata::load_graph(path)?;
            let aligned = epidata::align_to_graph(&z, &graph)?;
            if !aligned.dropped.is_empty() {
                eprintln!("warning: {} territories not in the graph were dropped", aligned.dropped.len());
                report.warnings.push(format!("dropped territories not in the graph: {}", aligned.dropped.join(",")));
            }
            if !aligned.unmatched_vertices.is_empty() {
                report.warnings.push(format!("graph vertices without data: {}", aligned.unmatched_vertices.join(",")));
            }
            report.dropped_territories = aligned.dropped;
            (aligned.counts, aligned.graph)
        }
        None => {
            if args.lambda_s.is_some_and(|v| v > 0.0) {
                eprintln!("warning: --lambda-s ignored without --graph");
            }
            let n = z.num_territories();
            (z, EpiGraph::empty(n))
        }
    };
    let lambda_s = match (&args.graph, args.lambda_s) {
        (None, _) => 0.0,
        (Some(_), Some(v)) => v,
        (Some(_), None) => Hyperparameters::LAMBDA_S_JOINT,
    };
    let hyper = Hyperparameters::new(args.lambda_t, lambda_s, args.lambda_o)?;
    manifest.hyper = Some(hyper);
    manifest.solver = Some(config);
    manifest.serial_interval = Some(manifest::SerialIntervalInfo::from(&phi));

    fs::create_dir_all(&args.out_dir)?;
    let result = pipeline::estimate_counts(&z, &phi, &graph, &hyper, &config)?;
    manifest.outputs = write_estimate(&args.out_dir, &z, &result, args.trace)?;
    write_json(&args.out_dir.join("load_report.json"), &report)?;
    manifest.outputs.push("load_report.json".into());
    manifest.result = Some(RunResult::from(&result));
    manifest.territories = Some(z.num_territories());
    manifest.edges = Some(graph.num_edges());
    Ok(status(result.converged()))
}

fn run_mle(args: &MleArgs, manifest: &mut Manifest) -> Result<u8> {
    let (z, report) = load_counts(&args.input)?;
    let phi = args.serial_interval.build()?;
    manifest.serial_interval = Some(manifest::SerialIntervalInfo::from(&phi));
    fs::create_dir_all(&args.out_dir)?;
    epidata::write_values(&args.out_dir.join("R_mle.csv"), &z, mle(&z, &phi).view())?;
    write_json(&args.out_dir.join("load_report.json"), &report)?;
    manifest.outputs = vec!["R_mle.csv".into(), "load_report.json".into()];
    Ok(0)
}

fn run_baseline(args: &BaselineArgs, manifest: &mut Manifest) -> Result<u8> {
    let (z, report) = load_counts(&args.input)?;
    fs::create_dir_all(&args.out_dir)?;
    let (clean, removed) = sliding_median_baseline(&z, args.window, args.threshold)?;
    epidata::write_values(&args.out_dir.join("Z_clean.csv"), &z, clean.values())?;
    epidata::write_values(&args.out_dir.join("O_baseline.csv"), &z, removed.view())?;
    write_json(&args.out_dir.join("load_report.json"), &report)?;
    manifest.outputs = vec!["Z_clean.csv".into(), "O_baseline.csv".into(), "load_report.json".into()];
    if !args.estimate {
        return Ok(0);
    }
    let phi = args.serial_interval.build()?;
    let config = args.solver.build()?;
    let hyper = Hyperparameters::new(args.lambda_t, 0.0, f64::INFINITY)?;
    manifest.hyper = Some(hyper);
    manifest.solver = Some(config);
    manifest.serial_interval = Some(manifest::SerialIntervalInfo::from(&phi));
    let result = pipeline::estimate_counts(&clean, &phi, &EpiGraph::empty(clean.num_territories()), &hyper, &config)?;
    manifest.outputs.extend(write_estimate(&args.out_dir, &clean, &result, args.trace)?);
    manifest.result = Some(RunResult::from(&result));
    Ok(status(result.converged()))
}

fn run_synth(args: &SynthArgs, manifest: &mut Manifest) -> Result<u8> {
    let spec = ScenarioSpec::load(&args.spec)?;
    let phi = args.serial_interval.build()?;
    manifest.serial_interval = Some(manifest::SerialIntervalInfo::from(&phi));
    let (z, o_true) = synth::generate(&spec, &phi, Execution::Parallel)?;
    fs::create_dir_all(&args.out_dir)?;
    let file = fs::File::create(args.out_dir.join("Z.csv"))?;
    epidata::write_counts(std::io::BufWriter::new(file), &z)?;
    epidata::write_values(&args.out_dir.join("R_true.csv"), &z, spec.r_true.view())?;
    epidata::write_values(&args.out_dir.join("O_true.csv"), &z, o_true.view())?;
    manifest.outputs = vec!["Z.csv".into(), "R_true.csv".into(), "O_true.csv".into()];
    Ok(0)
}

fn out_dir(command: &Command) -> Option<&Path> {
    match command {
        Command::Estimate(a) => Some(&a.out_dir),
        Command::Mle(a) => Some(&a.out_dir),
        Command::Baseline(a) => Some(&a.out_dir),
        Command::Synth(a) => Some(&a.out_dir),
        Command::Replay(_) => None,
    }
}

fn execute(command: Command) -> Result<u8> {
    let command = match command {
        Command::Replay(replay) => {
            let text = fs::read_to_string(&replay.manifest)
                .with_context(|| format!("reading {}", replay.manifest.display()))?;
            let recorded: Manifest = serde_json::from_str(&text).context("parsing the manifest")?;
            let dir = match replay.out_dir {
                Some(dir) => dir,
                None => replay.manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            recorded.invocation.with_out_dir(dir)
        }
        other => other,
    };
    let dir = out_dir(&command).context("nothing to run")?.to_path_buf();
    let mut manifest = Manifest::new(&command);
    let start = Instant::now();
    let code = match &command {
        Command::Estimate(a) => run_estimate(a, &mut manifest)?,
        Command::Mle(a) => run_mle(a, &mut manifest)?,
        Command::Baseline(a) => run_baseline(a, &mut manifest)?,
        Command::Synth(a) => run_synth(a, &mut manifest)?,
        Command::Replay(_) => bail!("a manifest cannot record a replay"),
    };
    manifest.wall_time_seconds = start.elapsed().as_secs_f64();
    write_json(&dir.join("manifest.json"), &manifest)?;
    if code == EXIT_NOT_CONVERGED {
        eprintln!("warning: iteration budget exhausted before convergence; outputs written");
    }
    Ok(code)
}

impl Command {
    fn with_out_dir(self, dir: PathBuf) -> Command {
        match self {
            Command::Estimate(a) => Command::Estimate(EstimateArgs { out_dir: dir, ..a }),
            Command::Mle(a) => Command::Mle(MleArgs { out_dir: dir, ..a }),
            Command::Baseline(a) => Command::Baseline(BaselineArgs { out_dir: dir, ..a }),
            Command::Synth(a) => Command::Synth(SynthArgs { out_dir: dir, ..a }),
            Command::Replay(a) => Command::Replay(a),
        }
    }

    fn inputs(&self) -> serde_json::Value {
        match self {
            Command::Estimate(a) => {
                serde_json::json!({"input": a.input.input, "format": a.input.format, "graph": a.graph})
            }
            Command::Mle(a) => serde_json::json!({"input": a.input.input, "format": a.input.format}),
            Command::Baseline(a) => serde_json::json!({"input": a.input.input, "format": a.input.format}),
            Command::Synth(a) => serde_json::json!({"spec": a.spec}),
            Command::Replay(a) => serde_json::json!({"manifest": a.manifest}),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Estimate(_) => "estimate",
            Command::Mle(_) => "mle",
            Command::Baseline(_) => "baseline",
            Command::Synth(_) => "synth",
            Command::Replay(_) => "replay",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
