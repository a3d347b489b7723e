use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ope_core::correction::check_full_support;
use ope_core::estimators::{EstimateResult, EstimatorKind, Evaluation, PositionBiasCurve, PropensitySource};
use ope_core::harness::{self, CorrectionMode, ExperimentResults, ExperimentSpec, GridSpec};
use ope_core::log::{read_jsonl, write_jsonl, ObservationLog};
use ope_core::par::Execution;
use ope_core::position_bias::{fit_position_bias, harvest_interventions};
use ope_core::ranking::{MatrixFile, MatrixKind};
use ope_core::rules::RuleSet;
use ope_core::simulator::{simulate, Simulation, SimulationConfig};
use ope_core::OpeError;

/// Exit status when the target policy needs display probabilities that are zero.
const EXIT_SUPPORT: u8 = 3;
/// Exit status when some grid cells failed.
const EXIT_GRID: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "ope", version, about = "Off-policy evaluation of rankings under business rules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate logs: writes logs.jsonl[.gz] and simulation.json (config, decomposition, rules).
    Simulate(SimulateArgs),
    /// Rule-corrected display probabilities for every log, as corrected.jsonl.
    Correct(CorrectArgs),
    /// Estimate the target policy's expected clicks from existing logs.
    Estimate(EstimateArgs),
    /// Run one experiment spec across its seeds.
    Run(RunArgs),
    /// Run a grid of experiment cells; the standard 4x4 grid by default.
    Grid(GridArgs),
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Propensity {
    Raw,
    Exact,
    Stochastic,
    Mc,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Continue past full-support violations; unsupported clicks score 0.
    #[arg(long)]
    allow_violations: bool,
    /// Monte Carlo samples per context; switches corrections to sampling.
    #[arg(long = "mc-samples", value_name = "L")]
    mc_samples: Option<usize>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Compress the logs with gzip.
    #[arg(long)]
    gzip: bool,
    /// Override the number of rankings.
    #[arg(long)]
    rankings: Option<usize>,
}

#[derive(Args, Debug)]
struct LogInput {
    /// Directory written by `ope simulate`.
    #[arg(long)]
    logs: PathBuf,
    /// Rules the correction assumes (JSON rule set); defaults to the logged ones.
    #[arg(long)]
    rules: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CorrectArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: LogInput,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Propensity::Stochastic)]
    mode: Propensity,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: LogInput,
    /// Write results here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Propensity::Stochastic)]
    propensity: Propensity,
    /// Comma-separated, e.g. `pbm,ipm,interpol(3)`; defaults to the spec's list.
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<EstimatorKind>,
    /// Position-bias curve (JSON array); fitted from the logs when absent.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("OPE_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Correct(a) => cmd_correct(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Run(a) => cmd_run(a),
        Command::Grid(a) => cmd_grid(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<OpeError>() {
                Some(OpeError::FullSupportViolation { .. }) => ExitCode::from(EXIT_SUPPORT),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn load_spec(common: &Common) -> Result<ExperimentSpec> {
    let mut spec = match &common.config {
        Some(path) => read_json(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = common.seed {
        spec.seeds = vec![seed];
    }
    apply_overrides(&mut spec, common);
    Ok(spec)
}

fn apply_overrides(spec: &mut ExperimentSpec, common: &Common) {
    spec.allow_violations |= common.allow_violations;
    if let Some(samples) = common.mc_samples {
        if spec.correction != CorrectionMode::None {
            spec.correction = CorrectionMode::Mc { samples };
        }
    }
}

const LOGS: &str = "logs.jsonl";
const LOGS_GZ: &str = "logs.jsonl.gz";
const SIDECAR: &str = "simulation.json";

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode> {
    let mut config: SimulationConfig = match &args.common.config {
        Some(path) => read_json(path)?,
        None => SimulationConfig::default(),
    };
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    if let Some(n) = args.rankings {
        config.n_rankings = n;
    }
    let sim = simulate(&config, args.common.exec())?;
    fs::create_dir_all(&args.out)?;
    if args.gzip {
        let f = File::create(args.out.join(LOGS_GZ))?;
        let mut gz = GzEncoder::new(BufWriter::new(f), Compression::default());
        write_jsonl(&mut gz, &sim.logs)?;
        gz.finish()?.flush()?;
    } else {
        write_jsonl(BufWriter::new(File::create(args.out.join(LOGS))?), &sim.logs)?;
    }
    write_json(&args.out.join(SIDECAR), &sim)?;
    log::info!("wrote {} logs to {}", sim.logs.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Logs and sidecar from a simulate directory, with the assumed rules
/// registered in place of the logged ones when given.
fn load_logs(input: &LogInput) -> Result<(Simulation, Vec<ObservationLog>)> {
    let plain = input.logs.join(LOGS);
    let reader: Box<dyn BufRead> = if plain.exists() {
        Box::new(BufReader::new(File::open(&plain)?))
    } else {
        let gz = input.logs.join(LOGS_GZ);
        let f = File::open(&gz).with_context(|| format!("no {LOGS} or {LOGS_GZ} in {}", input.logs.display()))?;
        Box::new(BufReader::new(GzDecoder::new(f)))
    };
    let logs = read_jsonl(reader)?;
    let mut sim: Simulation = read_json(&input.logs.join(SIDECAR))?;
    if let Some(path) = &input.rules {
        sim.config.ruleset = read_json::<RuleSet>(path)?;
    }
    Ok((sim, logs))
}

fn propensity_source(mode: Propensity, mc_samples: Option<usize>) -> Result<PropensitySource> {
    Ok(match (mode, mc_samples) {
        (Propensity::Raw, _) => PropensitySource::Raw,
        (Propensity::Mc, None) => bail!("--mode mc needs --mc-samples"),
        (_, Some(samples)) => PropensitySource::CorrectedMc { samples },
        (Propensity::Exact, None) => PropensitySource::CorrectedExact,
        (Propensity::Stochastic, None) => PropensitySource::CorrectedStochastic,
    })
}

fn cmd_correct(args: CorrectArgs) -> Result<ExitCode> {
    let (sim, logs) = load_logs(&args.input)?;
    let registry = sim.registry();
    let mut eval = Evaluation::new(&registry);
    eval.propensity = propensity_source(args.mode, args.common.mc_samples)?;
    eval.mc_seed = args.common.seed.unwrap_or(0);
    let matrices = ope_core::par::try_map_range(args.common.exec(), logs.len(), |i| eval.propensities(&logs[i]))?;
    fs::create_dir_all(&args.out)?;
    let mut w = BufWriter::new(File::create(args.out.join("corrected.jsonl"))?);
    for (log, m) in logs.iter().zip(&matrices) {
        let line = serde_json::json!({
            "context_id": log.context_id,
            "matrix": MatrixFile::new(MatrixKind::Corrected, m),
        });
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    log::info!("wrote {} corrected matrices", matrices.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_estimate(args: EstimateArgs) -> Result<ExitCode> {
    let spec = load_spec(&args.common)?;
    let (sim, logs) = load_logs(&args.input)?;
    let curve = match &args.curve {
        Some(path) => read_json::<PositionBiasCurve>(path)?,
        None => fit_position_bias(&harvest_interventions(&logs)?, sim.config.n_items, &spec.sgd)?,
    };
    let registry = sim.registry();
    let target = spec.target_policy()?;
    let mut eval = Evaluation::new(&registry);
    eval.propensity = propensity_source(args.propensity, args.common.mc_samples)?;
    eval.curve = Some(&curve);
    eval.lambda = spec.lambda;
    eval.ci = spec.ci;
    eval.exec = args.common.exec();
    eval.mc_seed = args.common.seed.unwrap_or(0);
    eval.skip_unsupported = spec.allow_violations;

    let target_ranking = target.ranking();
    let mut violations = 0usize;
    for log in &logs {
        let bad = check_full_support(&eval.propensities(log)?, &target_ranking, 0.0);
        if let Some(&(item, position)) = bad.first() {
            violations += 1;
            if !spec.allow_violations {
                return Err(OpeError::FullSupportViolation { item, position })
                    .with_context(|| format!("context {} (offending pairs {bad:?})", log.context_id));
            }
        }
    }
    if violations > 0 {
        log::warn!("{violations} logs violate full support; unsupported clicks scored as 0");
    }

    let kinds = if args.estimators.is_empty() {
        spec.estimators.clone()
    } else {
        args.estimators.clone()
    };
    let results: Vec<EstimateResult> = eval
        .estimate_all(&logs, &target, &kinds)?
        .iter()
        .map(EstimateResult::summary)
        .collect();
    let out: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(io::stdout().lock()),
    };
    match args.common.format {
        Format::Json => write_estimates_json(out, &results)?,
        Format::Csv => write_estimates_csv(out, &results)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn write_estimates_json(mut out: Box<dyn Write>, results: &[EstimateResult]) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, results)?;
    writeln!(out)?;
    Ok(())
}

fn write_estimates_csv(out: Box<dyn Write>, results: &[EstimateResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["estimator", "mean", "se", "ci_low", "ci_high", "n_observations"])?;
    for r in results {
        w.write_record([
            r.estimator.clone(),
            r.mean.to_string(),
            r.std_error.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
            r.n_observations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn print_results(results: &ExperimentResults, format: Format) -> Result<()> {
    let stdout = io::stdout().lock();
    match format {
        Format::Csv => harness::write_summary_csv(stdout, &results.rows())?,
        Format::Json => {
            let mut stdout = stdout;
            serde_json::to_writer_pretty(&mut stdout, results)?;
            writeln!(stdout)?;
        }
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let spec = load_spec(&args.common)?;
    let results = harness::run_experiment(&spec, args.common.exec())?;
    harness::write_results(&results, &args.out)?;
    print_results(&results, args.common.format)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_grid(args: GridArgs) -> Result<ExitCode> {
    let mut grid: GridSpec = match &args.common.config {
        Some(path) => read_json(path)?,
        None => GridSpec::default(),
    };
    if let Some(seed) = args.common.seed {
        grid.base.seeds = vec![seed];
        grid.cells.iter_mut().for_each(|c| c.seeds = vec![seed]);
    }
    apply_overrides(&mut grid.base, &args.common);
    grid.cells.iter_mut().for_each(|c| apply_overrides(c, &args.common));
    let outcome = harness::run_grid(&grid, args.common.exec())?;
    harness::write_grid(&outcome, &args.out)?;
    match args.common.format {
        Format::Csv => harness::write_summary_csv(io::stdout().lock(), &outcome.rows())?,
        Format::Json => {
            let mut stdout = io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, &outcome.rows())?;
            writeln!(stdout)?;
        }
    }
    if outcome.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for (cell, e) in &outcome.failures {
            eprintln!("cell {cell} failed: {e}");
        }
        eprintln!(
            "{} of {} cells failed",
            outcome.failures.len(),
            outcome.failures.len() + outcome.results.len()
        );
        Ok(ExitCode::from(EXIT_GRID))
    }
}
