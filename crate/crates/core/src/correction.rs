//! Corrected propensities after business rules.
//!
//! The logging policy ranks deterministically, permutes the ranking with a
//! component drawn from a [`BvnDecomposition`], and then hands it to the
//! rules. Because the decomposition is known, the true display
//! probabilities can be recovered exactly by replaying every component
//! (and every subset of rules that may have fired) against the ranker's
//! output. A Monte Carlo route is available for policies where enumeration is
//! not possible.
//!
//! Matrices returned here are indexed by item id (rows) and 0-based display
//! slot (columns).

use rand::Rng;

use crate::bvn::{self, BvnDecomposition};
use crate::error::{OpeError, Result};
use crate::par::{self, Execution};
use crate::ranking::{apply_into, PropensityMatrix, Ranking};
use crate::rng;
use crate::rules::{RuleSet, MAX_ENUMERATED_RULES};

fn check_sizes(base: &Ranking, d: &BvnDecomposition) -> Result<()> {
    if base.len() != d.n() {
        return Err(OpeError::LengthMismatch {
            expected: d.n(),
            got: base.len(),
        });
    }
    Ok(())
}

/// Reusable scratch for repeated corrections of same-sized rankings.
#[derive(Debug, Default)]
pub struct Corrector {
    randomized: Vec<usize>,
    shown: Vec<usize>,
}

impl Corrector {
    pub fn new() -> Self {
        Self::default()
    }

    fn accumulate(
        &mut self,
        base: &Ranking,
        d: &BvnDecomposition,
        rules: &RuleSet,
        subsets: &[(u64, f64)],
    ) -> Result<PropensityMatrix> {
        check_sizes(base, d)?;
        let n = base.len();
        rules.check_fits(n)?;
        let mut out = PropensityMatrix::zeros(n);
        self.randomized.resize(n, 0);
        for c in d.components() {
            apply_into(base.items(), c.perm.dest_by_source(), &mut self.randomized);
            for &(mask, p_subset) in subsets {
                self.shown.clear();
                self.shown.extend_from_slice(&self.randomized);
                rules.pin_in_place(mask, &mut self.shown);
                let w = c.p * p_subset;
                for (k, &item) in self.shown.iter().enumerate() {
                    out.add(item, k, w);
                }
            }
        }
        Ok(out)
    }

    pub fn exact(&mut self, base: &Ranking, d: &BvnDecomposition, rules: &RuleSet) -> Result<PropensityMatrix> {
        if let Some(r) = rules.rules().iter().find(|r| r.probability != 1.0) {
            return Err(OpeError::StochasticRules(r.probability));
        }
        let all = if rules.is_empty() { 0 } else { u64::MAX };
        self.accumulate(base, d, rules, &[(all, 1.0)])
    }

    pub fn stochastic(
        &mut self,
        base: &Ranking,
        d: &BvnDecomposition,
        rules: &RuleSet,
    ) -> Result<PropensityMatrix> {
        let subsets = power_set(rules)?;
        self.accumulate(base, d, rules, &subsets)
    }
}

/// Every subset with nonzero firing probability, as `(mask, probability)`.
fn power_set(rules: &RuleSet) -> Result<Vec<(u64, f64)>> {
    if rules.len() > MAX_ENUMERATED_RULES {
        return Err(OpeError::TooManyRules {
            count: rules.len(),
            limit: MAX_ENUMERATED_RULES,
        });
    }
    Ok((0..1u64 << rules.len())
        .map(|mask| (mask, rules.mask_probability(mask)))
        .filter(|&(_, p)| p > 0.0)
        .collect())
}

/// Display probabilities under deterministic rules: every component of `d`
/// is applied to `base` and then all of `rules`. `O(n·M)`.
///
/// Refuses rules that fire with probability below 1; use
/// [`correct_stochastic`] for those.
pub fn correct_exact(base: &Ranking, d: &BvnDecomposition, rules: &RuleSet) -> Result<PropensityMatrix> {
    Corrector::new().exact(base, d, rules)
}

/// Display probabilities when each rule fires independently with its own
/// probability: sums over components and over the power set of `rules`.
/// Equal to [`correct_exact`] entry for entry when every probability is 1.
pub fn correct_stochastic(
    base: &Ranking,
    d: &BvnDecomposition,
    rules: &RuleSet,
) -> Result<PropensityMatrix> {
    Corrector::new().stochastic(base, d, rules)
}

/// Source of randomized (pre-rule) rankings for one context.
pub trait RankingSampler {
    fn n(&self) -> usize;
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Ranking>;
}

/// The BvN randomizer: draws a component and applies it to the ranker output.
#[derive(Debug, Clone, Copy)]
pub struct BvnSampler<'a> {
    pub base: &'a Ranking,
    pub decomposition: &'a BvnDecomposition,
}

impl RankingSampler for BvnSampler<'_> {
    fn n(&self) -> usize {
        self.base.len()
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Ranking> {
        let (perm, _) = bvn::sample(self.decomposition, rng)?;
        self.base.apply(perm)
    }
}

fn mc_counts<S: RankingSampler, R: Rng + ?Sized>(
    sampler: &S,
    rules: &RuleSet,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<u64>> {
    let n = sampler.n();
    rules.check_fits(n)?;
    let mut counts = vec![0u64; n * n];
    let mut shown = Vec::with_capacity(n);
    for _ in 0..samples {
        let randomized = sampler.draw(rng)?;
        let mask = rules.sample_mask(rng);
        shown.clear();
        shown.extend_from_slice(randomized.items());
        rules.pin_in_place(mask, &mut shown);
        for (k, &item) in shown.iter().enumerate() {
            counts[item * n + k] += 1;
        }
    }
    Ok(counts)
}

fn counts_to_matrix(n: usize, counts: &[u64], samples: usize) -> PropensityMatrix {
    let mut m = PropensityMatrix::zeros(n);
    for j in 0..n {
        for k in 0..n {
            m.set(j, k, counts[j * n + k] as f64 / samples as f64);
        }
    }
    m
}

/// Empirical display frequencies over `samples` draws of the randomizer
/// followed by stochastic rule application.
pub fn correct_mc<S: RankingSampler, R: Rng + ?Sized>(
    sampler: &S,
    rules: &RuleSet,
    samples: usize,
    rng: &mut R,
) -> Result<PropensityMatrix> {
    if samples == 0 {
        return Err(OpeError::ZeroSamples);
    }
    let counts = mc_counts(sampler, rules, samples, rng)?;
    Ok(counts_to_matrix(sampler.n(), &counts, samples))
}

/// [`correct_mc`] split into fixed-size chunks, each on its own stream of
/// `seed`, so the result does not depend on the execution mode.
pub fn correct_mc_seeded<S: RankingSampler + Sync>(
    sampler: &S,
    rules: &RuleSet,
    samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<PropensityMatrix> {
    const CHUNK: usize = 1 << 15;
    if samples == 0 {
        return Err(OpeError::ZeroSamples);
    }
    let n = sampler.n();
    let chunks = samples.div_ceil(CHUNK);
    let parts = par::try_map_range(exec, chunks, |c| {
        let len = CHUNK.min(samples - c * CHUNK);
        mc_counts(sampler, rules, len, &mut rng::stream(seed, c as u64))
    })?;
    let mut counts = vec![0u64; n * n];
    for part in parts {
        for (acc, v) in counts.iter_mut().zip(part) {
            *acc += v;
        }
    }
    Ok(counts_to_matrix(n, &counts, samples))
}

/// `(item, position)` pairs the target ranking needs whose propensity is at
/// most `threshold`. Positions are 1-based. Empty means evaluation is safe.
pub fn check_full_support(p: &PropensityMatrix, target: &Ranking, threshold: f64) -> Vec<(usize, usize)> {
    target
        .items()
        .iter()
        .enumerate()
        .filter(|&(k, &item)| item >= p.n() || k >= p.n() || p.get(item, k) <= threshold)
        .map(|(k, &item)| (item, k + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvn::{decompose, stay_probability_matrix};
    use crate::ranking::STOCHASTIC_TOL;
    use crate::rules::PinRule;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pins(spec: &[(usize, usize, f64)]) -> RuleSet {
        RuleSet::new(
            spec.iter()
                .map(|&(i, t, p)| PinRule::new(i, t, p).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn stay10() -> BvnDecomposition {
        decompose(&stay_probability_matrix(10, 0.95).unwrap(), STOCHASTIC_TOL).unwrap()
    }

    /// Independent enumeration: explicit (component, subset) outcomes with a
    /// rotate-based pin, summed as a probability table.
    fn enumerate(base: &Ranking, d: &BvnDecomposition, rules: &RuleSet) -> Vec<Vec<f64>> {
        let n = base.len();
        let mut table = vec![vec![0.0; n]; n];
        for c in d.components() {
            let mut randomized = vec![usize::MAX; n];
            for (s, &dest) in c.perm.dest_by_source().iter().enumerate() {
                randomized[dest] = base.items()[s];
            }
            for mask in 0..1u64 << rules.len() {
                let mut prob = c.p;
                let mut shown = randomized.clone();
                for (i, r) in rules.rules().iter().enumerate() {
                    if mask >> i & 1 == 1 {
                        prob *= r.probability;
                        let from = shown.iter().position(|&x| x == r.item).unwrap();
                        let to = r.target_position - 1;
                        if from > to {
                            shown[to..=from].rotate_right(1);
                        } else {
                            shown[from..=to].rotate_left(1);
                        }
                    } else {
                        prob *= 1.0 - r.probability;
                    }
                }
                for (k, &item) in shown.iter().enumerate() {
                    table[item][k] += prob;
                }
            }
        }
        table
    }

    fn max_diff(m: &PropensityMatrix, t: &[Vec<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, row) in t.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                worst = worst.max((m.get(j, k) - v).abs());
            }
        }
        worst
    }

    #[test]
    fn no_rules_reindexes_reconstruction() {
        let d = stay10();
        let base = Ranking::new(vec![3, 9, 1, 0, 7, 2, 8, 4, 6, 5]).unwrap();
        let want = d.reconstruct().reindex_rows(&base).unwrap();
        let exact = correct_exact(&base, &d, &RuleSet::empty()).unwrap();
        let stoch = correct_stochastic(&base, &d, &RuleSet::empty()).unwrap();
        assert!(exact.max_abs_diff(&want) < 1e-12);
        assert_eq!(exact, stoch);
    }

    #[test]
    fn deterministic_pin_fills_first_column() {
        let d = stay10();
        let base = Ranking::identity(10);
        // item at logged rank 8 pinned to the top
        let pinned = base.item_at(8).unwrap();
        let m = correct_exact(&base, &d, &pins(&[(pinned, 1, 1.0)])).unwrap();
        for j in 0..10 {
            let want = if j == pinned { 1.0 } else { 0.0 };
            assert!((m.get(j, 0) - want).abs() < 1e-12, "item {j}");
        }
        assert!(m.check(STOCHASTIC_TOL).ok);
        assert!(max_diff(&m, &enumerate(&base, &d, &pins(&[(pinned, 1, 1.0)]))) < 1e-12);
    }

    #[test]
    fn single_component_gives_permutation_matrix() {
        let base = Ranking::new(vec![2, 0, 3, 1]).unwrap();
        let d = BvnDecomposition::deterministic(crate::ranking::Permutation::identity(4));
        let m = correct_exact(&base, &d, &pins(&[(1, 1, 1.0)])).unwrap();
        // displayed ranking [1, 2, 0, 3]
        for (k, item) in [1, 2, 0, 3].into_iter().enumerate() {
            assert_eq!(m.get(item, k), 1.0);
        }
    }

    #[test]
    fn exact_refuses_stochastic_rules() {
        let d = stay10();
        assert!(matches!(
            correct_exact(&Ranking::identity(10), &d, &pins(&[(0, 1, 0.95)])),
            Err(OpeError::StochasticRules(_))
        ));
    }

    #[test]
    fn power_set_guard() {
        let many: Vec<PinRule> = (0..17).map(|i| PinRule::new(i, i + 1, 0.5).unwrap()).collect();
        let rules = RuleSet::new(many).unwrap();
        let d = BvnDecomposition::deterministic(crate::ranking::Permutation::identity(20));
        assert!(matches!(
            correct_stochastic(&Ranking::identity(20), &d, &rules),
            Err(OpeError::TooManyRules { count: 17, .. })
        ));
    }

    #[test]
    fn stochastic_equals_exact_for_certain_rules() {
        let d = stay10();
        let base = Ranking::new(vec![1, 2, 4, 7, 0, 3, 5, 6, 8, 9]).unwrap();
        let rules = pins(&[(0, 1, 1.0), (9, 10, 1.0)]);
        assert_eq!(
            correct_exact(&base, &d, &rules).unwrap(),
            correct_stochastic(&base, &d, &rules).unwrap()
        );
    }

    #[test]
    fn stochastic_pin_mass_on_first_column() {
        let d = stay10();
        let base = Ranking::identity(10);
        let p = d.reconstruct();
        let m = correct_stochastic(&base, &d, &pins(&[(4, 1, 0.95)])).unwrap();
        assert!((m.get(4, 0) - (0.95 + 0.05 * p.get(4, 0))).abs() < 1e-12);
    }

    #[test]
    fn stochastic_matches_enumeration_on_random_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..50 {
            let n = 3 + trial % 8;
            let d = decompose(&stay_probability_matrix(n, 0.6 + 0.04 * (trial % 10) as f64).unwrap(), STOCHASTIC_TOL)
                .unwrap();
            let mut items: Vec<usize> = (0..n).collect();
            items.shuffle(&mut rng);
            let base = Ranking::new(items.clone()).unwrap();
            items.shuffle(&mut rng);
            let mut targets: Vec<usize> = (1..=n).collect();
            targets.shuffle(&mut rng);
            let k = 1 + trial % 3;
            let rules = RuleSet::new(
                (0..k)
                    .map(|i| PinRule::new(items[i], targets[i], rng.random_range(0.05..=1.0)).unwrap())
                    .collect(),
            )
            .unwrap();
            let m = correct_stochastic(&base, &d, &rules).unwrap();
            assert!(m.check(STOCHASTIC_TOL).ok, "trial {trial}");
            assert!(max_diff(&m, &enumerate(&base, &d, &rules)) < 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn mc_single_sample_is_permutation_matrix() {
        let d = stay10();
        let base = Ranking::identity(10);
        let s = BvnSampler { base: &base, decomposition: &d };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = correct_mc(&s, &pins(&[(3, 1, 0.5)]), 1, &mut rng).unwrap();
        assert!(m.to_rows().iter().flatten().all(|&v| v == 0.0 || v == 1.0));
        assert!(m.check(0.0).ok);
        assert!(matches!(correct_mc(&s, &RuleSet::empty(), 0, &mut rng), Err(OpeError::ZeroSamples)));
    }

    #[test]
    fn mc_converges_to_stochastic() {
        let d = stay10();
        let base = Ranking::new(vec![1, 2, 4, 7, 0, 3, 5, 6, 8, 9]).unwrap();
        let rules = pins(&[(0, 1, 0.95)]);
        let exact = correct_stochastic(&base, &d, &rules).unwrap();
        let s = BvnSampler { base: &base, decomposition: &d };
        let m = correct_mc_seeded(&s, &rules, 200_000, 17, Execution::Parallel).unwrap();
        // 0.5 / sqrt(L) per entry, generous 5-sigma envelope
        assert!(m.max_abs_diff(&exact) < 5.0 * 0.5 / (200_000f64).sqrt());
        for j in 0..10 {
            let row: f64 = m.row(j).iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
        let seq = correct_mc_seeded(&s, &rules, 200_000, 17, Execution::Sequential).unwrap();
        assert_eq!(m, seq);
    }

    #[test]
    fn full_support_diagnostics() {
        let d = stay10();
        let base = Ranking::identity(10);
        let target = Ranking::new(vec![7, 0, 3, 1, 5, 6, 8, 9, 2, 4]).unwrap();
        let raw = correct_exact(&base, &d, &RuleSet::empty()).unwrap();
        assert!(check_full_support(&raw, &target, 0.0).is_empty());

        let pinned = correct_exact(&base, &d, &pins(&[(8, 1, 1.0)])).unwrap();
        let v = check_full_support(&pinned, &target, 0.0);
        assert!(v.contains(&(7, 1)));

        let mut dusty = raw.clone();
        dusty.set(7, 0, 1e-15);
        assert!(check_full_support(&dusty, &target, 0.0).is_empty());
        assert_eq!(check_full_support(&dusty, &target, 1e-12), vec![(7, 1)]);
    }
}
