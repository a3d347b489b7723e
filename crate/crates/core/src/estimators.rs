//! PBM, IPM and INTERPOL estimates of a target ranking policy's reward.
//!
//! The per-impression estimate is
//!
//! ```text
//! Σ_j  w(item_j) · λ(target position of item_j) · click_j
//! ```
//!
//! summed over displayed items. The IPM and INTERPOL weights compare the
//! position the item was *displayed* at (after rules) with the target
//! position, and divide by the matching entry of the propensity matrix; which
//! matrix is used (the randomizer's own, or one corrected for the rules) is
//! set by [`PropensitySource`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correction::{correct_mc_seeded, BvnSampler, Corrector};
use crate::error::{OpeError, Result};
use crate::log::{LogRegistry, ObservationLog};
use crate::par::{self, pairwise_sum, Execution};
use crate::ranking::{PropensityMatrix, Ranking};
use crate::rng;

/// z-value of a two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;

/// Metric weight of a 1-based position.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaKind {
    /// Every position counts 1: the reward is the number of clicks.
    #[default]
    Unit,
    /// `1 / ln(1 + j)`.
    Dcg,
    /// `1 / log2(1 + j)`.
    Dcg2,
}

pub fn lambda_weight(kind: LambdaKind, position: usize) -> Result<f64> {
    if position < 1 {
        return Err(OpeError::PositionOutOfRange { position, n: 0 });
    }
    let j = position as f64;
    Ok(match kind {
        LambdaKind::Unit => 1.0,
        LambdaKind::Dcg => 1.0 / (1.0 + j).ln(),
        LambdaKind::Dcg2 => 1.0 / (1.0 + j).log2(),
    })
}

/// Examination probability per position, anchored at `b_1 = 1`.
/// Serializes as a plain JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PositionBiasCurve(Vec<f64>);

impl PositionBiasCurve {
    pub fn new(b: Vec<f64>) -> Result<Self> {
        if b.is_empty() {
            return Err(OpeError::Config("empty position-bias curve".into()));
        }
        if let Some(v) = b.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(OpeError::Config(format!("position bias {v} is not positive")));
        }
        if b[0] != 1.0 {
            return Err(OpeError::Config(format!(
                "position bias must be 1 at position 1, got {}",
                b[0]
            )));
        }
        Ok(Self(b))
    }

    /// Rescales so that position 1 has bias 1.
    pub fn normalized(b: Vec<f64>) -> Result<Self> {
        let first = *b.first().ok_or_else(|| OpeError::Config("empty position-bias curve".into()))?;
        Self::new(b.into_iter().map(|v| v / first).collect())
    }

    /// `b_k = 1 / k`.
    pub fn inverse_rank(n: usize) -> Self {
        Self((1..=n).map(|k| 1.0 / k as f64).collect())
    }

    pub fn flat(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Bias at 1-based `position`.
    pub fn at(&self, position: usize) -> Result<f64> {
        position
            .checked_sub(1)
            .and_then(|i| self.0.get(i).copied())
            .ok_or(OpeError::PositionOutOfRange {
                position,
                n: self.0.len(),
            })
    }

    /// True when no position has a higher bias than the one above it.
    pub fn is_monotone_decreasing(&self) -> bool {
        self.0.windows(2).all(|w| w[1] <= w[0])
    }
}

impl TryFrom<Vec<f64>> for PositionBiasCurve {
    type Error = OpeError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PositionBiasCurve> for Vec<f64> {
    fn from(c: PositionBiasCurve) -> Self {
        c.0
    }
}

fn check_rank(rank: usize, n: usize) -> Result<()> {
    if rank < 1 || rank > n {
        return Err(OpeError::PositionOutOfRange { position: rank, n });
    }
    Ok(())
}

/// `b[target] / b[logged]`.
pub fn pbm_weight(b: &PositionBiasCurve, target_rank: usize, logged_rank: usize) -> Result<f64> {
    Ok(b.at(target_rank)? / b.at(logged_rank)?)
}

/// `1{displayed = target} / P[item][target]`.
pub fn ipm_weight(p: &PropensityMatrix, item: usize, target_rank: usize, displayed_rank: usize) -> Result<f64> {
    let n = p.n();
    check_rank(target_rank, n)?;
    check_rank(displayed_rank, n)?;
    if item >= n {
        return Err(OpeError::UnknownItem { item, n });
    }
    if displayed_rank != target_rank {
        return Ok(0.0);
    }
    let prop = p.get(item, target_rank - 1);
    if prop <= 0.0 {
        return Err(OpeError::FullSupportViolation {
            item,
            position: target_rank,
        });
    }
    Ok(1.0 / prop)
}

/// Index of the window holding 1-based `rank`; windows are
/// `[1..=w], [w+1..=2w], ...` with a possibly short last one.
fn window_of(rank: usize, window: usize) -> usize {
    (rank - 1) / window
}

/// PBM inside windows of `window` neighbouring positions, IPM across them:
/// `1{same window} / Σ_{k∈window(target)} P[item][k] · b[target] / b[displayed]`.
pub fn interpol_weight(
    b: &PositionBiasCurve,
    p: &PropensityMatrix,
    window: usize,
    item: usize,
    target_rank: usize,
    displayed_rank: usize,
) -> Result<f64> {
    let n = p.n();
    if window < 1 || window > n {
        return Err(OpeError::Config(format!("window size {window} outside 1..={n}")));
    }
    check_rank(target_rank, n)?;
    check_rank(displayed_rank, n)?;
    if item >= n {
        return Err(OpeError::UnknownItem { item, n });
    }
    let w = window_of(target_rank, window);
    if window_of(displayed_rank, window) != w {
        return Ok(0.0);
    }
    let start = w * window;
    let end = (start + window).min(n);
    let mass: f64 = p.row(item)[start..end].iter().sum();
    if mass <= 0.0 {
        return Err(OpeError::FullSupportViolation {
            item,
            position: target_rank,
        });
    }
    Ok(pbm_weight(b, target_rank, displayed_rank)? / mass)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Pbm,
    Ipm,
    Interpol { window: usize },
}

impl EstimatorKind {
    fn needs_propensities(self) -> bool {
        !matches!(self, EstimatorKind::Pbm)
    }

    fn needs_curve(self) -> bool {
        !matches!(self, EstimatorKind::Ipm)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorKind::Pbm => f.write_str("pbm"),
            EstimatorKind::Ipm => f.write_str("ipm"),
            EstimatorKind::Interpol { window } => write!(f, "interpol({window})"),
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = OpeError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "pbm" => return Ok(EstimatorKind::Pbm),
            "ipm" => return Ok(EstimatorKind::Ipm),
            _ => {}
        }
        let window = t
            .strip_prefix("interpol(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| t.strip_prefix("interpol:"))
            .and_then(|w| w.parse::<usize>().ok())
            .ok_or_else(|| OpeError::Config(format!("unknown estimator {s:?}")))?;
        Ok(EstimatorKind::Interpol { window })
    }
}

impl Serialize for EstimatorKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EstimatorKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which propensity matrix the IPM and INTERPOL weights divide by.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PropensitySource {
    /// The randomizer's matrix, ignoring any rules.
    #[default]
    Raw,
    CorrectedExact,
    CorrectedStochastic,
    CorrectedMc { samples: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum CiMethod {
    /// `mean ± 1.96 · SE`.
    #[default]
    Normal,
    /// Percentile bootstrap of the mean.
    Bootstrap { resamples: usize, seed: u64 },
}

/// A deterministic target policy, keyed on the context and what the
/// deterministic ranker did for it.
pub trait TargetPolicy: Sync {
    fn rank(&self, context_id: u64, ranker_ranking: &Ranking) -> Ranking;
}

impl<F> TargetPolicy for F
where
    F: Fn(u64, &Ranking) -> Ranking + Sync,
{
    fn rank(&self, context_id: u64, ranker_ranking: &Ranking) -> Ranking {
        self(context_id, ranker_ranking)
    }
}

/// Puts `top` first and `bottom` last, in the given orders, and fills the
/// middle with the remaining items in ascending id order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedTargetPolicy {
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
    pub n: usize,
    #[serde(skip)]
    ranking: Option<Ranking>,
}

impl FixedTargetPolicy {
    pub fn new(n: usize, top: Vec<usize>, bottom: Vec<usize>) -> Result<Self> {
        let mut p = Self {
            top,
            bottom,
            n,
            ranking: None,
        };
        p.ranking = Some(p.build()?);
        Ok(p)
    }

    fn build(&self) -> Result<Ranking> {
        let claimed: Vec<usize> = self.top.iter().chain(&self.bottom).copied().collect();
        let middle = (0..self.n).filter(|i| !claimed.contains(i));
        let items: Vec<usize> = self
            .top
            .iter()
            .copied()
            .chain(middle)
            .chain(self.bottom.iter().copied())
            .collect();
        if items.len() != self.n {
            return Err(OpeError::Config(format!(
                "target policy lists {} items for n = {}",
                items.len(),
                self.n
            )));
        }
        Ranking::new(items)
    }

    pub fn ranking(&self) -> Ranking {
        self.ranking.clone().unwrap_or_else(|| self.build().expect("validated on construction"))
    }
}

impl TargetPolicy for FixedTargetPolicy {
    fn rank(&self, _context_id: u64, _ranker_ranking: &Ranking) -> Ranking {
        self.ranking()
    }
}

/// Ships the deterministic ranker's own ranking unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct RankerPolicy;

impl TargetPolicy for RankerPolicy {
    fn rank(&self, _context_id: u64, ranker_ranking: &Ranking) -> Ranking {
        ranker_ranking.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub estimator: String,
    pub mean: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_observations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_observation: Vec<f64>,
}

impl EstimateResult {
    pub fn from_observations(estimator: String, per_observation: Vec<f64>, ci: CiMethod) -> Result<Self> {
        let n = per_observation.len();
        if n == 0 {
            return Err(OpeError::EmptyLogs);
        }
        let mean = pairwise_sum(&per_observation) / n as f64;
        let std_error = if n > 1 {
            let sq: Vec<f64> = per_observation.iter().map(|v| (v - mean).powi(2)).collect();
            (pairwise_sum(&sq) / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        let (ci_low, ci_high) = match ci {
            CiMethod::Normal => (mean - Z_95 * std_error, mean + Z_95 * std_error),
            CiMethod::Bootstrap { resamples, seed } => bootstrap_ci(&per_observation, resamples, seed)?,
        };
        Ok(Self {
            estimator,
            mean,
            std_error,
            ci_low: ci_low.min(mean),
            ci_high: ci_high.max(mean),
            n_observations: n,
            per_observation,
        })
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }

    /// Drops the per-impression values, e.g. before writing a summary.
    pub fn summary(&self) -> Self {
        Self {
            per_observation: Vec::new(),
            ..self.clone()
        }
    }
}

fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if resamples == 0 {
        return Err(OpeError::ZeroSamples);
    }
    let n = values.len();
    let mut means: Vec<f64> = par::map_range(Execution::Parallel, resamples, |b| {
        let mut r = rng::stream(seed, b as u64);
        (0..n).map(|_| values[r.random_range(0..n)]).sum::<f64>() / n as f64
    });
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok((at(0.025), at(0.975)))
}

/// Everything an estimate needs besides the logs and the target policy.
#[derive(Debug, Clone)]
pub struct Evaluation<'a> {
    pub registry: &'a LogRegistry,
    pub propensity: PropensitySource,
    /// Required by PBM and INTERPOL.
    pub curve: Option<&'a PositionBiasCurve>,
    pub lambda: LambdaKind,
    pub ci: CiMethod,
    pub exec: Execution,
    /// Master seed for Monte Carlo propensities; each context gets its own stream.
    pub mc_seed: u64,
    /// Score clicks whose propensity is zero as 0 instead of failing.
    pub skip_unsupported: bool,
}

impl<'a> Evaluation<'a> {
    pub fn new(registry: &'a LogRegistry) -> Self {
        Self {
            registry,
            propensity: PropensitySource::Raw,
            curve: None,
            lambda: LambdaKind::Unit,
            ci: CiMethod::Normal,
            exec: Execution::Parallel,
            mc_seed: 0,
            skip_unsupported: false,
        }
    }

    /// Propensity matrix (items × slots) for one logged impression.
    pub fn propensities(&self, log: &ObservationLog) -> Result<PropensityMatrix> {
        self.propensities_with(log, &mut Corrector::new())
    }

    fn propensities_with(&self, log: &ObservationLog, corrector: &mut Corrector) -> Result<PropensityMatrix> {
        let d = self.registry.decomposition(&log.decomposition_ref)?;
        match self.propensity {
            PropensitySource::Raw => d.reconstruct().reindex_rows(&log.ranker_ranking),
            PropensitySource::CorrectedExact => {
                corrector.exact(&log.ranker_ranking, d, self.registry.ruleset(&log.ruleset_ref)?)
            }
            PropensitySource::CorrectedStochastic => {
                corrector.stochastic(&log.ranker_ranking, d, self.registry.ruleset(&log.ruleset_ref)?)
            }
            PropensitySource::CorrectedMc { samples } => {
                let sampler = BvnSampler {
                    base: &log.ranker_ranking,
                    decomposition: d,
                };
                correct_mc_seeded(
                    &sampler,
                    self.registry.ruleset(&log.ruleset_ref)?,
                    samples,
                    rng::derive_seed(self.mc_seed, log.context_id),
                    Execution::Sequential,
                )
            }
        }
    }

    fn check_inputs(&self, kinds: &[EstimatorKind]) -> Result<()> {
        if kinds.iter().any(|k| k.needs_curve()) && self.curve.is_none() {
            return Err(OpeError::Config("PBM and INTERPOL need a position-bias curve".into()));
        }
        Ok(())
    }

    /// Per-impression estimates for several estimators at once; propensities
    /// are computed once per impression and shared.
    pub fn per_observation(
        &self,
        logs: &[ObservationLog],
        target: &dyn TargetPolicy,
        kinds: &[EstimatorKind],
    ) -> Result<Vec<Vec<f64>>> {
        if logs.is_empty() {
            return Err(OpeError::EmptyLogs);
        }
        self.check_inputs(kinds)?;
        let need_p = kinds.iter().any(|k| k.needs_propensities());
        let rows = par::try_map_range(self.exec, logs.len(), |i| {
            let log = &logs[i];
            let mut out = vec![0.0; kinds.len()];
            if log.total_clicks() == 0 {
                return Ok(out);
            }
            let target_ranking = target.rank(log.context_id, &log.ranker_ranking);
            if target_ranking.len() != log.n() {
                return Err(OpeError::LengthMismatch {
                    expected: log.n(),
                    got: target_ranking.len(),
                });
            }
            let target_rank = target_ranking.slots_by_item();
            let p = if need_p {
                Some(self.propensities_with(log, &mut Corrector::new())?)
            } else {
                None
            };
            for (slot, (&item, &click)) in log.displayed_ranking.items().iter().zip(&log.clicks).enumerate() {
                if click == 0 {
                    continue;
                }
                let shown = slot + 1;
                let wanted = target_rank[item] + 1;
                let lambda = lambda_weight(self.lambda, wanted)?;
                for (acc, kind) in out.iter_mut().zip(kinds) {
                    let w = match *kind {
                        EstimatorKind::Pbm => pbm_weight(self.curve.expect("checked"), wanted, shown),
                        EstimatorKind::Ipm => ipm_weight(p.as_ref().expect("computed"), item, wanted, shown),
                        EstimatorKind::Interpol { window } => interpol_weight(
                            self.curve.expect("checked"),
                            p.as_ref().expect("computed"),
                            window,
                            item,
                            wanted,
                            shown,
                        ),
                    };
                    let w = match w {
                        Err(OpeError::FullSupportViolation { .. }) if self.skip_unsupported => 0.0,
                        other => other?,
                    };
                    *acc += w * lambda;
                }
            }
            Ok(out)
        })?;
        Ok((0..kinds.len())
            .map(|e| rows.iter().map(|r| r[e]).collect())
            .collect())
    }

    pub fn estimate_all(
        &self,
        logs: &[ObservationLog],
        target: &dyn TargetPolicy,
        kinds: &[EstimatorKind],
    ) -> Result<Vec<EstimateResult>> {
        self.per_observation(logs, target, kinds)?
            .into_iter()
            .zip(kinds)
            .map(|(values, kind)| EstimateResult::from_observations(kind.to_string(), values, self.ci))
            .collect()
    }
}

/// Expected clicks of `target` estimated from `logs` with one estimator.
pub fn estimate(
    logs: &[ObservationLog],
    target: &dyn TargetPolicy,
    kind: EstimatorKind,
    eval: &Evaluation<'_>,
) -> Result<EstimateResult> {
    Ok(eval.estimate_all(logs, target, &[kind])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvn::{decompose, stay_probability_matrix, BvnDecomposition};
    use crate::ranking::{Permutation, STOCHASTIC_TOL};
    use crate::rules::RuleSet;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambda_values() {
        assert_eq!(lambda_weight(LambdaKind::Unit, 7).unwrap(), 1.0);
        assert_relative_eq!(lambda_weight(LambdaKind::Dcg, 1).unwrap(), 1.0 / 2f64.ln());
        assert_relative_eq!(lambda_weight(LambdaKind::Dcg, 1).unwrap(), std::f64::consts::LOG2_E);
        assert_eq!(lambda_weight(LambdaKind::Dcg2, 1).unwrap(), 1.0);
        assert!(lambda_weight(LambdaKind::Dcg, 0).is_err());
        for j in 1..20 {
            assert!(lambda_weight(LambdaKind::Dcg, j + 1).unwrap() < lambda_weight(LambdaKind::Dcg, j).unwrap());
        }
    }

    #[test]
    fn pbm_values() {
        let b = PositionBiasCurve::inverse_rank(10);
        assert_eq!(pbm_weight(&b, 3, 3).unwrap(), 1.0);
        assert_relative_eq!(pbm_weight(&b, 1, 2).unwrap(), 2.0);
        assert_relative_eq!(pbm_weight(&b, 4, 1).unwrap(), 0.25);
        assert!(pbm_weight(&b, 11, 1).is_err());
        assert!(pbm_weight(&b, 0, 1).is_err());
    }

    #[test]
    fn ipm_values() {
        let p = stay_probability_matrix(10, 0.95).unwrap();
        assert_eq!(ipm_weight(&p, 2, 3, 4).unwrap(), 0.0);
        assert_relative_eq!(ipm_weight(&p, 2, 3, 3).unwrap(), 1.0 / 0.95);
        assert_relative_eq!(ipm_weight(&p, 2, 3, 3).unwrap(), 1.052_631_578_947_368_4);
        let id = PropensityMatrix::identity(3);
        assert!(matches!(
            ipm_weight(&id, 0, 2, 2),
            Err(OpeError::FullSupportViolation { item: 0, position: 2 })
        ));
    }

    #[test]
    fn interpol_windows() {
        let b = PositionBiasCurve::inverse_rank(10);
        let p = stay_probability_matrix(10, 0.95).unwrap();
        // window 3: {1,2,3} {4,5,6} {7,8,9} {10}
        assert_eq!(interpol_weight(&b, &p, 3, 0, 1, 4).unwrap(), 0.0);
        let w = interpol_weight(&b, &p, 3, 0, 1, 3).unwrap();
        let mass = 0.95 + 2.0 * 0.05 / 9.0;
        assert_relative_eq!(w, 3.0 / mass, max_relative = 1e-12);
        assert!(interpol_weight(&b, &p, 0, 0, 1, 1).is_err());
        assert!(interpol_weight(&b, &p, 11, 0, 1, 1).is_err());
        let id = PropensityMatrix::identity(4);
        let b4 = PositionBiasCurve::inverse_rank(4);
        assert!(interpol_weight(&b4, &id, 2, 0, 3, 4).is_err());
    }

    fn random_doubly_stochastic(n: usize, rng: &mut ChaCha8Rng) -> PropensityMatrix {
        use rand::seq::SliceRandom;
        let mut m = PropensityMatrix::zeros(n);
        let parts = 1 + rng.random_range(0..6);
        let weights: Vec<f64> = (0..parts).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        for w in weights {
            let mut v: Vec<usize> = (0..n).collect();
            v.shuffle(rng);
            for (s, &d) in v.iter().enumerate() {
                m.add(s, d, w / total);
            }
        }
        m
    }

    #[test]
    fn interpol_degenerates_to_ipm_and_pbm() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n = rng.random_range(2..=10);
            let p = random_doubly_stochastic(n, &mut rng);
            let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            b[0] = 1.0;
            let b = PositionBiasCurve::new(b).unwrap();
            let item = rng.random_range(0..n);
            let t = rng.random_range(1..=n);
            let d = if rng.random_bool(0.5) { t } else { rng.random_range(1..=n) };
            if p.get(item, t - 1) > 0.0 {
                let one = interpol_weight(&b, &p, 1, item, t, d).unwrap();
                assert!((one - ipm_weight(&p, item, t, d).unwrap()).abs() < 1e-12);
            }
            let full = interpol_weight(&b, &p, n, item, t, d).unwrap();
            assert!((full - pbm_weight(&b, t, d).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn estimator_names_parse() {
        for k in [EstimatorKind::Pbm, EstimatorKind::Ipm, EstimatorKind::Interpol { window: 3 }] {
            assert_eq!(k.to_string().parse::<EstimatorKind>().unwrap(), k);
        }
        assert_eq!("INTERPOL:1".parse::<EstimatorKind>().unwrap(), EstimatorKind::Interpol { window: 1 });
        assert!("dr".parse::<EstimatorKind>().is_err());
        let v = serde_json::to_value(EstimatorKind::Interpol { window: 3 }).unwrap();
        assert_eq!(v, serde_json::json!("interpol(3)"));
    }

    #[test]
    fn fixed_target_policy_layout() {
        let p = FixedTargetPolicy::new(10, vec![7, 0, 3, 1], vec![2, 4]).unwrap();
        assert_eq!(p.ranking().items(), &[7, 0, 3, 1, 5, 6, 8, 9, 2, 4]);
        assert!(FixedTargetPolicy::new(10, vec![7, 7], vec![]).is_err());
    }

    #[test]
    fn curve_validation() {
        assert!(PositionBiasCurve::new(vec![0.5, 0.2]).is_err());
        assert!(PositionBiasCurve::new(vec![1.0, 0.0]).is_err());
        let c = PositionBiasCurve::normalized(vec![2.0, 1.0]).unwrap();
        assert_eq!(c.values(), &[1.0, 0.5]);
        assert!(serde_json::from_str::<PositionBiasCurve>("[1.0, -1.0]").is_err());
    }

    fn log(ranker: Vec<usize>, shown: Vec<usize>, clicks: Vec<u8>) -> ObservationLog {
        ObservationLog {
            context_id: 0,
            ranker_ranking: Ranking::new(ranker).unwrap(),
            sampled_component: 0,
            displayed_ranking: Ranking::new(shown).unwrap(),
            clicks,
            decomposition_ref: "d".into(),
            ruleset_ref: "r".into(),
        }
    }

    fn registry(n: usize) -> LogRegistry {
        let d = decompose(&stay_probability_matrix(n, 0.9).unwrap(), STOCHASTIC_TOL).unwrap();
        LogRegistry::single("d", d, "r", RuleSet::empty())
    }

    #[test]
    fn on_policy_identity() {
        let reg = LogRegistry::single(
            "d",
            BvnDecomposition::deterministic(Permutation::identity(3)),
            "r",
            RuleSet::empty(),
        );
        let logs = vec![
            log(vec![0, 1, 2], vec![0, 1, 2], vec![1, 0, 1]),
            log(vec![2, 0, 1], vec![2, 0, 1], vec![0, 1, 0]),
        ];
        let b = PositionBiasCurve::inverse_rank(3);
        let mut eval = Evaluation::new(&reg);
        eval.curve = Some(&b);
        let shown = |_: u64, r: &Ranking| r.clone();
        for kind in [EstimatorKind::Pbm, EstimatorKind::Ipm, EstimatorKind::Interpol { window: 2 }] {
            let res = estimate(&logs, &shown, kind, &eval).unwrap();
            assert_relative_eq!(res.mean, 1.5);
            assert_eq!(res.per_observation, vec![2.0, 1.0]);
        }
    }

    #[test]
    fn zero_clicks_give_zero() {
        let reg = registry(4);
        let logs = vec![log(vec![0, 1, 2, 3], vec![1, 0, 2, 3], vec![0; 4]); 5];
        let res = estimate(&logs, &RankerPolicy, EstimatorKind::Ipm, &Evaluation::new(&reg)).unwrap();
        assert_eq!((res.mean, res.ci_low, res.ci_high), (0.0, 0.0, 0.0));
        assert!(matches!(
            estimate(&[], &RankerPolicy, EstimatorKind::Ipm, &Evaluation::new(&reg)),
            Err(OpeError::EmptyLogs)
        ));
    }

    #[test]
    fn pbm_requires_curve() {
        let reg = registry(4);
        let logs = vec![log(vec![0, 1, 2, 3], vec![0, 1, 2, 3], vec![1, 0, 0, 0])];
        assert!(matches!(
            estimate(&logs, &RankerPolicy, EstimatorKind::Pbm, &Evaluation::new(&reg)),
            Err(OpeError::Config(_))
        ));
    }

    #[test]
    fn lambda_scaling_is_linear() {
        let reg = registry(4);
        let logs = vec![
            log(vec![0, 1, 2, 3], vec![1, 0, 2, 3], vec![1, 1, 0, 0]),
            log(vec![0, 1, 2, 3], vec![0, 1, 2, 3], vec![1, 0, 0, 1]),
        ];
        let target = FixedTargetPolicy::new(4, vec![1, 0], vec![]).unwrap();
        let mut eval = Evaluation::new(&reg);
        eval.lambda = LambdaKind::Dcg;
        let e = estimate(&logs, &target, EstimatorKind::Ipm, &eval).unwrap();
        eval.lambda = LambdaKind::Dcg2;
        let e2 = estimate(&logs, &target, EstimatorKind::Ipm, &eval).unwrap();
        // log2-based weights are the natural-log ones times ln 2
        assert_relative_eq!(e2.mean, e.mean * 2f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn normal_ci_half_width() {
        let r = EstimateResult::from_observations("x".into(), vec![1.0, 2.0, 3.0, 4.0], CiMethod::Normal).unwrap();
        assert_relative_eq!(r.mean, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert_relative_eq!(r.std_error, sd / 2.0);
        assert_relative_eq!(r.ci_high - r.mean, Z_95 * r.std_error);
        assert!(r.ci_low <= r.mean && r.mean <= r.ci_high);
    }

    #[test]
    fn bootstrap_ci_is_reasonable() {
        let values: Vec<f64> = (0..2000).map(|i| (i % 7) as f64).collect();
        let normal = EstimateResult::from_observations("x".into(), values.clone(), CiMethod::Normal).unwrap();
        let boot = EstimateResult::from_observations(
            "x".into(),
            values,
            CiMethod::Bootstrap { resamples: 2000, seed: 1 },
        )
        .unwrap();
        assert!(((boot.ci_high - boot.ci_low) / (normal.ci_high - normal.ci_low) - 1.0).abs() < 0.15);
    }
}
