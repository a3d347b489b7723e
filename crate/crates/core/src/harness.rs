//! Experiment pipeline: simulate, fit the bias curve, correct propensities,
//! estimate, and compare against the on-policy oracle.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correction::check_full_support;
use crate::error::{OpeError, Result};
use crate::estimators::{
    CiMethod, EstimateResult, EstimatorKind, Evaluation, FixedTargetPolicy, LambdaKind, PositionBiasCurve,
    PropensitySource,
};
use crate::log::ObservationLog;
use crate::par::{self, Execution};
use crate::position_bias::{fit_position_bias, harvest_interventions, SgdConfig};
use crate::rules::{PinRule, RuleSet};
use crate::simulator::{oracle_on_policy_value, simulate, OracleValue, SimulationConfig};

/// Expected clicks per ranking quoted for the reference target policy.
pub const REPORTED_TARGET_VALUE: f64 = 2.0;

pub const SUMMARY_HEADER: [&str; 9] = ["cell", "estimator", "seed", "mean", "se", "ci_low", "ci_high", "oracle", "covered"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemSelector {
    /// Lowest id outside the relevant set.
    LowRelevance,
    /// Highest id in the relevant set.
    HighRelevance,
    Index(usize),
}

impl ItemSelector {
    pub fn resolve(self, config: &SimulationConfig) -> Result<usize> {
        let relevant = &config.relevant_items;
        let item = match self {
            ItemSelector::LowRelevance => (0..config.n_items).find(|i| !relevant.contains(i)),
            ItemSelector::HighRelevance => relevant.iter().copied().max(),
            ItemSelector::Index(i) => (i < config.n_items).then_some(i),
        };
        item.ok_or_else(|| OpeError::Config(format!("item selector {self:?} matches no item")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinSetting {
    pub item: ItemSelector,
    /// 1-based.
    pub target_position: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CorrectionMode {
    #[default]
    None,
    Exact,
    Stochastic,
    Mc { samples: usize },
}

impl CorrectionMode {
    fn source(self) -> PropensitySource {
        match self {
            CorrectionMode::None => PropensitySource::Raw,
            CorrectionMode::Exact => PropensitySource::CorrectedExact,
            CorrectionMode::Stochastic => PropensitySource::CorrectedStochastic,
            CorrectionMode::Mc { samples } => PropensitySource::CorrectedMc { samples },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            top: vec![7, 0, 3, 1],
            bottom: vec![2, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    /// `seed` and `ruleset` are overridden per run.
    pub simulation: SimulationConfig,
    pub pin: Option<PinSetting>,
    pub correction: CorrectionMode,
    /// Firing probability the correction assumes; defaults to the real one.
    pub assumed_probability: Option<f64>,
    pub estimators: Vec<EstimatorKind>,
    pub lambda: LambdaKind,
    pub seeds: Vec<u64>,
    pub target: TargetSpec,
    pub oracle_samples: usize,
    pub oracle_seed: u64,
    pub sgd: SgdConfig,
    pub ci: CiMethod,
    /// Continue past full-support violations, dropping unsupported terms.
    pub allow_violations: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "no_pin".into(),
            simulation: SimulationConfig::default(),
            pin: None,
            correction: CorrectionMode::None,
            assumed_probability: None,
            estimators: default_estimators(),
            lambda: LambdaKind::Unit,
            seeds: (0..10).collect(),
            target: TargetSpec::default(),
            oracle_samples: 1_000_000,
            oracle_seed: 12_345,
            sgd: SgdConfig::default(),
            ci: CiMethod::Normal,
            allow_violations: false,
        }
    }
}

pub fn default_estimators() -> Vec<EstimatorKind> {
    vec![
        EstimatorKind::Pbm,
        EstimatorKind::Ipm,
        EstimatorKind::Interpol { window: 1 },
        EstimatorKind::Interpol { window: 3 },
    ]
}

impl ExperimentSpec {
    /// No pinning, no correction.
    pub fn unpinned() -> Self {
        Self::default()
    }

    /// Low-relevance item pinned to the top with probability 0.95.
    pub fn pinned(correction: CorrectionMode) -> Self {
        let name = match correction {
            CorrectionMode::None => "pin95_uncorrected".to_owned(),
            CorrectionMode::Exact => "pin95_exact".to_owned(),
            CorrectionMode::Stochastic => "pin95_corrected".to_owned(),
            CorrectionMode::Mc { samples } => format!("pin95_mc{samples}"),
        };
        Self {
            name,
            pin: Some(PinSetting {
                item: ItemSelector::LowRelevance,
                target_position: 1,
                probability: 0.95,
            }),
            correction,
            ..Self::default()
        }
    }

    /// The three panels: unpinned, pinned and uncorrected, pinned and corrected.
    pub fn pinning_panels() -> [Self; 3] {
        [
            Self::unpinned(),
            Self::pinned(CorrectionMode::None),
            Self::pinned(CorrectionMode::Stochastic),
        ]
    }

    pub fn target_policy(&self) -> Result<FixedTargetPolicy> {
        FixedTargetPolicy::new(self.simulation.n_items, self.target.top.clone(), self.target.bottom.clone())
    }

    /// Rules the logging system actually applied.
    pub fn applied_rules(&self) -> Result<RuleSet> {
        match self.pin {
            None => Ok(self.simulation.ruleset.clone()),
            Some(pin) => RuleSet::new(vec![PinRule::new(
                pin.item.resolve(&self.simulation)?,
                pin.target_position,
                pin.probability,
            )?]),
        }
    }

    /// Rules as the correction believes they were applied.
    pub fn assumed_rules(&self) -> Result<RuleSet> {
        let applied = self.applied_rules()?;
        match self.assumed_probability {
            Some(p) => applied.with_probability(p),
            None => Ok(applied),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        self.target_policy()?;
        if self.estimators.is_empty() {
            return Err(OpeError::Config("no estimators selected".into()));
        }
        if self.seeds.is_empty() {
            return Err(OpeError::Config("no seeds".into()));
        }
        let assumed = self.assumed_rules()?;
        assumed.check_fits(self.simulation.n_items)?;
        if self.correction == CorrectionMode::Exact && !assumed.is_deterministic() {
            return Err(OpeError::Config(
                "exact correction needs every pin probability to be 1".into(),
            ));
        }
        if let CorrectionMode::Mc { samples: 0 } = self.correction {
            return Err(OpeError::ZeroSamples);
        }
        Ok(())
    }
}

/// Full-support problems found for one seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SupportDiagnostics {
    /// Logs with at least one unsupported `(item, position)` the target needs.
    pub logs_with_violations: usize,
    /// First few offenders as `(context_id, item, position)`.
    pub examples: Vec<(u64, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub estimates: Vec<EstimateResult>,
    pub curve: PositionBiasCurve,
    pub curve_monotone: bool,
    pub support: SupportDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub name: String,
    pub spec: ExperimentSpec,
    pub oracle: OracleValue,
    /// Quoted reference value, for comparison only.
    pub reported_value: f64,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub estimator: String,
    pub seed: u64,
    pub mean: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub oracle: f64,
    pub covered: bool,
}

impl ExperimentResults {
    pub fn rows(&self) -> Vec<SummaryRow> {
        self.seeds
            .iter()
            .flat_map(|s| {
                s.estimates.iter().map(move |e| SummaryRow {
                    cell: self.name.clone(),
                    estimator: e.estimator.clone(),
                    seed: s.seed,
                    mean: e.mean,
                    se: e.std_error,
                    ci_low: e.ci_low,
                    ci_high: e.ci_high,
                    oracle: self.oracle.value,
                    covered: e.covers(self.oracle.value),
                })
            })
            .collect()
    }

    /// Seeds whose CI for `estimator` covers the oracle.
    pub fn coverage(&self, estimator: EstimatorKind) -> usize {
        let name = estimator.to_string();
        self.rows()
            .iter()
            .filter(|r| r.estimator == name && r.covered)
            .count()
    }

    pub fn total_violations(&self) -> usize {
        self.seeds.iter().map(|s| s.support.logs_with_violations).sum()
    }
}

pub fn compute_oracle(spec: &ExperimentSpec, exec: Execution) -> Result<OracleValue> {
    oracle_on_policy_value(
        &spec.simulation,
        &spec.target_policy()?,
        spec.oracle_samples,
        spec.oracle_seed,
        exec,
    )
}

fn support_diagnostics(
    logs: &[ObservationLog],
    eval: &Evaluation<'_>,
    target: &FixedTargetPolicy,
    exec: Execution,
) -> Result<SupportDiagnostics> {
    let target_ranking = target.ranking();
    let per_log = par::try_map_range(exec, logs.len(), |i| {
        let p = eval.propensities(&logs[i])?;
        Ok::<_, OpeError>(check_full_support(&p, &target_ranking, 0.0))
    })?;
    let mut diag = SupportDiagnostics::default();
    for (log, bad) in logs.iter().zip(per_log) {
        if bad.is_empty() {
            continue;
        }
        diag.logs_with_violations += 1;
        for (item, position) in bad {
            if diag.examples.len() < 10 {
                diag.examples.push((log.context_id, item, position));
            }
        }
    }
    Ok(diag)
}

/// Fits the bias curve on the logs the experiment treats as "before rules".
fn fit_curve(spec: &ExperimentSpec, sim_cfg: &SimulationConfig, displayed: &[ObservationLog], exec: Execution) -> Result<PositionBiasCurve> {
    let n = sim_cfg.n_items;
    let counts = if spec.correction != CorrectionMode::None && !sim_cfg.ruleset.is_empty() {
        let unruled = SimulationConfig {
            ruleset: RuleSet::empty(),
            ..sim_cfg.clone()
        };
        harvest_interventions(&simulate(&unruled, exec)?.logs)?
    } else {
        harvest_interventions(displayed)?
    };
    fit_position_bias(&counts, n, &spec.sgd)
}

/// One seed of an experiment.
pub fn run_seed(spec: &ExperimentSpec, seed: u64, exec: Execution) -> Result<SeedResult> {
    let sim_cfg = SimulationConfig {
        seed,
        ruleset: spec.applied_rules()?,
        ..spec.simulation.clone()
    };
    let sim = simulate(&sim_cfg, exec)?;
    let curve = fit_curve(spec, &sim_cfg, &sim.logs, exec)?;

    let mut registry = sim.registry();
    registry
        .rulesets
        .insert(crate::simulator::RULESET_REF.to_owned(), spec.assumed_rules()?);
    let target = spec.target_policy()?;
    let mut eval = Evaluation::new(&registry);
    eval.propensity = spec.correction.source();
    eval.curve = Some(&curve);
    eval.lambda = spec.lambda;
    eval.ci = spec.ci;
    eval.exec = exec;
    eval.mc_seed = seed;
    eval.skip_unsupported = spec.allow_violations;

    let support = support_diagnostics(&sim.logs, &eval, &target, exec)?;
    if support.logs_with_violations > 0 {
        let (_, item, position) = support.examples[0];
        log::warn!(
            "{}: seed {seed}: {} logs violate full support, e.g. item {item} at position {position}",
            spec.name,
            support.logs_with_violations
        );
        if !spec.allow_violations {
            return Err(OpeError::FullSupportViolation { item, position });
        }
    }

    let estimates = eval
        .estimate_all(&sim.logs, &target, &spec.estimators)?
        .iter()
        .map(EstimateResult::summary)
        .collect();
    Ok(SeedResult {
        seed,
        estimates,
        curve_monotone: curve.is_monotone_decreasing(),
        curve,
        support,
    })
}

pub fn run_experiment_with_oracle(spec: &ExperimentSpec, oracle: OracleValue, exec: Execution) -> Result<ExperimentResults> {
    spec.validate()?;
    let seeds = spec
        .seeds
        .iter()
        .map(|&seed| run_seed(spec, seed, exec))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResults {
        name: spec.name.clone(),
        spec: spec.clone(),
        oracle,
        reported_value: REPORTED_TARGET_VALUE,
        seeds,
    })
}

pub fn run_experiment(spec: &ExperimentSpec, exec: Execution) -> Result<ExperimentResults> {
    spec.validate()?;
    let oracle = compute_oracle(spec, exec)?;
    log::info!(
        "{}: oracle value {:.4} (se {:.4}), reported {REPORTED_TARGET_VALUE}",
        spec.name,
        oracle.value,
        oracle.std_error
    );
    run_experiment_with_oracle(spec, oracle, exec)
}

/// Cells crossing pinned item × pin target × firing/assumed probability.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Settings shared by every cell; its `pin`, `correction` and
    /// `assumed_probability` are replaced per cell.
    pub base: ExperimentSpec,
    /// Explicit cells; when empty the standard 4×4 grid is used.
    pub cells: Vec<ExperimentSpec>,
}

/// Applied probability and (correction, assumed probability) per column.
const GRID_COLUMNS: [(&str, f64, Option<f64>); 4] = [
    ("p100_uncorrected", 1.0, None),
    ("p95_uncorrected", 0.95, None),
    ("p100_assume95", 1.0, Some(0.95)),
    ("p95_assume95", 0.95, Some(0.95)),
];

impl GridSpec {
    pub fn expand(&self) -> Vec<ExperimentSpec> {
        if !self.cells.is_empty() {
            return self.cells.clone();
        }
        let n = self.base.simulation.n_items;
        let mut cells = Vec::new();
        for (item_name, item) in [("low", ItemSelector::LowRelevance), ("high", ItemSelector::HighRelevance)] {
            for (pos_name, position) in [("first", 1), ("last", n)] {
                for (col, applied, assumed) in GRID_COLUMNS {
                    cells.push(ExperimentSpec {
                        name: format!("{item_name}_{pos_name}_{col}"),
                        pin: Some(PinSetting {
                            item,
                            target_position: position,
                            probability: applied,
                        }),
                        correction: if assumed.is_some() {
                            CorrectionMode::Stochastic
                        } else {
                            CorrectionMode::None
                        },
                        assumed_probability: assumed,
                        ..self.base.clone()
                    });
                }
            }
        }
        cells
    }
}

#[derive(Debug)]
pub struct GridOutcome {
    pub results: Vec<ExperimentResults>,
    pub failures: Vec<(String, OpeError)>,
}

impl GridOutcome {
    pub fn rows(&self) -> Vec<SummaryRow> {
        self.results.iter().flat_map(ExperimentResults::rows).collect()
    }
}

/// Runs every cell; a failing cell is recorded and the rest continue.
/// Cells that share simulation and target settings share one oracle run.
pub fn run_grid(grid: &GridSpec, exec: Execution) -> Result<GridOutcome> {
    let cells = grid.expand();
    let mut oracles: Vec<(SimulationConfig, TargetSpec, usize, u64, OracleValue)> = Vec::new();
    for cell in &cells {
        let known = oracles.iter().any(|(s, t, n, seed, _)| {
            *s == cell.simulation && *t == cell.target && *n == cell.oracle_samples && *seed == cell.oracle_seed
        });
        if !known {
            let value = compute_oracle(cell, exec)?;
            oracles.push((cell.simulation.clone(), cell.target.clone(), cell.oracle_samples, cell.oracle_seed, value));
        }
    }
    let outcomes = par::map_slice(exec, &cells, |cell| {
        let oracle = oracles
            .iter()
            .find(|(s, t, n, seed, _)| {
                *s == cell.simulation && *t == cell.target && *n == cell.oracle_samples && *seed == cell.oracle_seed
            })
            .map(|o| o.4)
            .expect("oracle computed above");
        run_experiment_with_oracle(cell, oracle, exec)
    });
    let mut out = GridOutcome {
        results: Vec::new(),
        failures: Vec::new(),
    };
    for (cell, outcome) in cells.iter().zip(outcomes) {
        match outcome {
            Ok(r) => out.results.push(r),
            Err(e) => {
                log::error!("cell {} failed: {e}", cell.name);
                out.failures.push((cell.name.clone(), e));
            }
        }
    }
    Ok(out)
}

pub fn write_summary_csv<W: Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(SUMMARY_HEADER)?;
    for r in rows {
        csv.write_record([
            r.cell.clone(),
            r.estimator.clone(),
            r.seed.to_string(),
            r.mean.to_string(),
            r.se.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
            r.oracle.to_string(),
            r.covered.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// Writes `<name>.csv` (one row per estimator and seed), the `<name>.json`
/// bundle, and one `<name>_curve_seed<k>.json` per seed into `dir`.
pub fn write_results(results: &ExperimentResults, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_summary_csv(fs::File::create(dir.join(format!("{}.csv", results.name)))?, &results.rows())?;
    serde_json::to_writer_pretty(fs::File::create(dir.join(format!("{}.json", results.name)))?, results)?;
    for s in &results.seeds {
        let f = fs::File::create(dir.join(format!("{}_curve_seed{}.json", results.name, s.seed)))?;
        serde_json::to_writer(f, &s.curve)?;
    }
    Ok(())
}

/// Per-cell result files go to `<dir>/<cell>/` next to `summary.csv`;
/// `failures.json` is added when a cell failed.
pub fn write_grid(outcome: &GridOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in &outcome.results {
        write_results(r, &dir.join(&r.name))?;
    }
    write_summary_csv(fs::File::create(dir.join("summary.csv"))?, &outcome.rows())?;
    if !outcome.failures.is_empty() {
        let failures: Vec<(String, String)> = outcome
            .failures
            .iter()
            .map(|(c, e)| (c.clone(), e.to_string()))
            .collect();
        serde_json::to_writer_pretty(fs::File::create(dir.join("failures.json"))?, &failures)?;
    }
    Ok(())
}
