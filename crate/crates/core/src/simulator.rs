//! Synthetic click logs.
//!
//! Each context has `n` items with one-hot features plus Gaussian noise.
//! Relevant items carry an all-ones weight vector and the rest all minus
//! ones; the deterministic ranker sorts by the resulting score and an item is
//! relevant when its score is positive. A BvN component randomizes the
//! ranking and the rules pin items; clicks follow a position-based model
//! with examination probability `b_k`.
//!
//! Every context draws from its own stream of the master seed, so output is
//! identical whether contexts are generated sequentially or in parallel.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bvn::{self, decompose, stay_probability_matrix, BvnDecomposition};
use crate::error::{OpeError, Result};
use crate::estimators::TargetPolicy;
use crate::log::{LogRegistry, ObservationLog};
use crate::par::{self, pairwise_sum, Execution};
use crate::ranking::{Ranking, STOCHASTIC_TOL};
use crate::rng;
use crate::rules::{apply_stochastic, RuleSet};

pub const DECOMPOSITION_REF: &str = "bvn";
pub const RULESET_REF: &str = "rules";

const ORACLE_STREAM: u64 = 0x6f72_6163_6c65;

/// Examination probabilities used to draw clicks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    /// `b_k = 1 / k`.
    #[default]
    InverseRank,
    /// `b_k = 1`.
    Flat,
    Custom(Vec<f64>),
}

impl BiasKind {
    pub fn curve(&self, n: usize) -> Result<Vec<f64>> {
        let b = match self {
            BiasKind::InverseRank => (1..=n).map(|k| 1.0 / k as f64).collect(),
            BiasKind::Flat => vec![1.0; n],
            BiasKind::Custom(b) => b.clone(),
        };
        if b.len() != n {
            return Err(OpeError::LengthMismatch {
                expected: n,
                got: b.len(),
            });
        }
        if let Some(v) = b.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(OpeError::Config(format!("examination probability {v} outside [0, 1]")));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n_rankings: usize,
    pub n_items: usize,
    pub stay_probability: f64,
    pub relevant_items: Vec<usize>,
    pub noise_std: f64,
    pub ruleset: RuleSet,
    pub seed: u64,
    pub position_bias: BiasKind,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_rankings: 50_000,
            n_items: 10,
            stay_probability: 0.95,
            relevant_items: vec![1, 2, 4, 7],
            noise_std: 1.0,
            ruleset: RuleSet::empty(),
            seed: 0,
            position_bias: BiasKind::InverseRank,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items < 2 {
            return Err(OpeError::Config(format!("n_items must be at least 2, got {}", self.n_items)));
        }
        if let Some(i) = self.relevant_items.iter().find(|&&i| i >= self.n_items) {
            return Err(OpeError::Config(format!("relevant item {i} out of range")));
        }
        if !(self.stay_probability > 0.0 && self.stay_probability <= 1.0) {
            return Err(OpeError::InvalidProbability(self.stay_probability));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(OpeError::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        self.ruleset.check_fits(self.n_items)?;
        self.position_bias.curve(self.n_items)?;
        Ok(())
    }

    /// The randomizer's decomposition for this configuration.
    pub fn decomposition(&self) -> Result<BvnDecomposition> {
        decompose(&stay_probability_matrix(self.n_items, self.stay_probability)?, STOCHASTIC_TOL)
    }
}

/// One generated context.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub id: u64,
    /// `u_j`: one-hot of `j` plus noise, one row per item.
    pub features: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub relevance: Vec<bool>,
}

impl Context {
    /// Items by descending score, ties broken by ascending item id.
    pub fn ranker_ranking(&self) -> Ranking {
        let mut items: Vec<usize> = (0..self.scores.len()).collect();
        items.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        Ranking::new(items).expect("sorted indices form a permutation")
    }
}

pub fn generate_context<R: Rng + ?Sized>(config: &SimulationConfig, id: u64, rng: &mut R) -> Context {
    let n = config.n_items;
    let noise = Normal::new(0.0, config.noise_std).expect("noise_std validated");
    let mut features = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for j in 0..n {
        let u: Vec<f64> = (0..n)
            .map(|d| if d == j { 1.0 } else { 0.0 } + noise.sample(rng))
            .collect();
        let sign = if config.relevant_items.contains(&j) { 1.0 } else { -1.0 };
        scores.push(u.iter().map(|x| x * sign).sum::<f64>());
        features.push(u);
    }
    let relevance = scores.iter().map(|&s| s > 0.0).collect();
    Context {
        id,
        features,
        scores,
        relevance,
    }
}

/// Randomizes, applies rules and draws PBM clicks for one context.
pub fn simulate_log<R: Rng + ?Sized>(
    config: &SimulationConfig,
    context: &Context,
    bvn: &BvnDecomposition,
    rules: &RuleSet,
    rng: &mut R,
) -> Result<ObservationLog> {
    let ranker_ranking = context.ranker_ranking();
    let (perm, component) = bvn::sample(bvn, rng)?;
    let randomized = ranker_ranking.apply(perm)?;
    let (displayed_ranking, _) = apply_stochastic(rules, &randomized, rng)?;
    let b = config.position_bias.curve(config.n_items)?;
    let clicks = displayed_ranking
        .items()
        .iter()
        .zip(&b)
        .map(|(&item, &bk)| u8::from(context.relevance[item] && rng.random_bool(bk)))
        .collect();
    Ok(ObservationLog {
        context_id: context.id,
        ranker_ranking,
        sampled_component: component,
        displayed_ranking,
        clicks,
        decomposition_ref: DECOMPOSITION_REF.to_owned(),
        ruleset_ref: RULESET_REF.to_owned(),
    })
}

/// Logs plus the artifacts they reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub config: SimulationConfig,
    pub decomposition: BvnDecomposition,
    #[serde(skip)]
    pub logs: Vec<ObservationLog>,
}

impl Simulation {
    pub fn registry(&self) -> LogRegistry {
        LogRegistry::single(
            DECOMPOSITION_REF,
            self.decomposition.clone(),
            RULESET_REF,
            self.config.ruleset.clone(),
        )
    }
}

/// Generates `config.n_rankings` logs, context `i` on stream `i`.
pub fn simulate(config: &SimulationConfig, exec: Execution) -> Result<Simulation> {
    config.validate()?;
    let decomposition = config.decomposition()?;
    let logs = par::try_map_range(exec, config.n_rankings, |i| {
        let mut r = rng::stream(config.seed, i as u64);
        let ctx = generate_context(config, i as u64, &mut r);
        simulate_log(config, &ctx, &decomposition, &config.ruleset, &mut r)
    })?;
    Ok(Simulation {
        config: config.clone(),
        decomposition,
        logs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

/// Average clicks per ranking when the target's rankings are shown as is,
/// without randomization or rules. Contexts come from streams disjoint from
/// the ones [`simulate`] uses for the same seed.
pub fn oracle_on_policy_value(
    config: &SimulationConfig,
    target: &dyn TargetPolicy,
    n_samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<OracleValue> {
    config.validate()?;
    if n_samples == 0 {
        return Err(OpeError::ZeroSamples);
    }
    let b = config.position_bias.curve(config.n_items)?;
    let master = rng::derive_seed(seed, ORACLE_STREAM);
    let values = par::try_map_range(exec, n_samples, |i| {
        let mut r = rng::stream(master, i as u64);
        let ctx = generate_context(config, i as u64, &mut r);
        let shown = target.rank(ctx.id, &ctx.ranker_ranking());
        if shown.len() != config.n_items {
            return Err(OpeError::LengthMismatch {
                expected: config.n_items,
                got: shown.len(),
            });
        }
        Ok(shown
            .items()
            .iter()
            .zip(&b)
            .filter(|&(&item, &bk)| ctx.relevance[item] && r.random_bool(bk))
            .count() as f64)
    })?;
    let n = values.len() as f64;
    let mean = pairwise_sum(&values) / n;
    let var = if values.len() > 1 {
        let sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
        pairwise_sum(&sq) / (n - 1.0)
    } else {
        0.0
    };
    Ok(OracleValue {
        value: mean,
        std_error: (var / n).sqrt(),
        n_samples,
    })
}
