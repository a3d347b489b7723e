//! Birkhoff–von Neumann decomposition of propensity matrices.
//!
//! A doubly stochastic matrix `P` over ranker slots (rows) and display slots
//! (columns) is written as a convex combination `Σ p_m Π_m` of permutation
//! matrices. A logging policy that draws `Π_m` with probability `p_m` and
//! applies it to the deterministic ranking shows the item from ranker slot `s`
//! at slot `k` with probability exactly `P[s][k]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::matching::hopcroft_karp;
use crate::ranking::{Permutation, PropensityMatrix, STOCHASTIC_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvnComponent {
    /// Ranker slot to display slot, 0-based.
    pub perm: Permutation,
    pub p: f64,
}

/// Weighted permutations reproducing a propensity matrix.
///
/// JSON form: `{"n": 3, "components": [{"perm": [0, 1, 2], "p": 1.0}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDecomposition")]
pub struct BvnDecomposition {
    n: usize,
    components: Vec<BvnComponent>,
}

#[derive(Deserialize)]
struct RawDecomposition {
    n: usize,
    components: Vec<BvnComponent>,
}

impl TryFrom<RawDecomposition> for BvnDecomposition {
    type Error = OpeError;

    fn try_from(raw: RawDecomposition) -> Result<Self> {
        Self::new(raw.n, raw.components)
    }
}

impl BvnDecomposition {
    /// Validates sizes, positivity and `Σ p = 1` within [`STOCHASTIC_TOL`].
    pub fn new(n: usize, components: Vec<BvnComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(OpeError::EmptyDecomposition);
        }
        for c in &components {
            if c.perm.len() != n {
                return Err(OpeError::LengthMismatch {
                    expected: n,
                    got: c.perm.len(),
                });
            }
            if !(c.p > 0.0 && c.p <= 1.0) {
                return Err(OpeError::InvalidProbability(c.p));
            }
        }
        let total: f64 = components.iter().map(|c| c.p).sum();
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(OpeError::NotDoublyStochastic(format!(
                "component probabilities sum to {total}"
            )));
        }
        Ok(Self { n, components })
    }

    /// A single component that always applies `perm`.
    pub fn deterministic(perm: Permutation) -> Self {
        Self {
            n: perm.len(),
            components: vec![BvnComponent { perm, p: 1.0 }],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn components(&self) -> &[BvnComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// `Σ p_m Π_m`.
    pub fn reconstruct(&self) -> PropensityMatrix {
        let mut m = PropensityMatrix::zeros(self.n);
        for c in &self.components {
            for (s, &d) in c.perm.dest_by_source().iter().enumerate() {
                m.add(s, d, c.p);
            }
        }
        m
    }
}

/// Greedy Birkhoff construction: match on the support of the residual and
/// peel off the smallest matched entry until the remaining mass drops below
/// `tol`.
///
/// Every round zeroes at least one entry, so at most `(n-1)^2 + 1`
/// components are produced. Left-over mass under `tol * n` is dropped and the
/// weights renormalised.
pub fn decompose(p: &PropensityMatrix, tol: f64) -> Result<BvnDecomposition> {
    let report = p.check(tol);
    if !report.ok {
        return Err(OpeError::NotDoublyStochastic(format!("{report:?}")));
    }
    let n = p.n();
    if n == 0 {
        return Err(OpeError::EmptyDecomposition);
    }
    let mut residual = p.clone();
    let mut components = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::with_capacity(n); n];

    // exact arithmetic would need at most (n-1)^2 + 1 rounds
    for _ in 0..=n * n {
        let mass: f64 = (0..n).map(|r| residual.row(r).iter().sum::<f64>()).sum::<f64>() / n as f64;
        if mass < tol {
            break;
        }
        for (r, list) in adj.iter_mut().enumerate() {
            list.clear();
            list.extend((0..n).filter(|&c| residual.get(r, c) > tol));
        }
        let matching = hopcroft_karp(&adj, n);
        let Some(dest) = matching.into_iter().collect::<Option<Vec<usize>>>() else {
            if mass < tol * n as f64 {
                break;
            }
            return Err(OpeError::MatchingFailure { residual: mass });
        };
        let q = dest
            .iter()
            .enumerate()
            .map(|(r, &c)| residual.get(r, c))
            .fold(f64::INFINITY, f64::min);
        for (r, &c) in dest.iter().enumerate() {
            let v = residual.get(r, c) - q;
            residual.set(r, c, if v <= 0.0 { 0.0 } else { v });
        }
        components.push(BvnComponent {
            perm: Permutation::from_vec_unchecked(dest),
            p: q,
        });
    }

    let total: f64 = components.iter().map(|c| c.p).sum();
    if components.is_empty() || total <= 0.0 {
        return Err(OpeError::EmptyDecomposition);
    }
    components.retain(|c| c.p >= tol);
    let kept: f64 = components.iter().map(|c| c.p).sum();
    for c in &mut components {
        c.p /= kept;
    }
    log::debug!(
        "decomposed {n}x{n} matrix into {} components (dropped mass {:.2e})",
        components.len(),
        1.0 - total
    );
    Ok(BvnDecomposition { n, components })
}

/// Draws component `m` with probability `p_m`.
pub fn sample<'a, R: Rng + ?Sized>(
    d: &'a BvnDecomposition,
    rng: &mut R,
) -> Result<(&'a Permutation, usize)> {
    let last = d.components.len().checked_sub(1).ok_or(OpeError::EmptyDecomposition)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (m, c) in d.components.iter().enumerate() {
        acc += c.p;
        if u < acc {
            return Ok((&c.perm, m));
        }
    }
    // u landed in the float slack above the cumulative sum
    Ok((&d.components[last].perm, last))
}

/// Keeps each slot with probability `stay` and spreads the rest uniformly
/// over the other `n - 1` slots.
pub fn stay_probability_matrix(n: usize, stay: f64) -> Result<PropensityMatrix> {
    if n < 2 {
        return Err(OpeError::Config(format!("need at least 2 positions, got {n}")));
    }
    if !(stay > 0.0 && stay <= 1.0) {
        return Err(OpeError::InvalidProbability(stay));
    }
    let off = (1.0 - stay) / (n - 1) as f64;
    let mut m = PropensityMatrix::zeros(n);
    for r in 0..n {
        for c in 0..n {
            m.set(r, c, if r == c { stay } else { off });
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_mixture(n: usize, parts: usize, rng: &mut ChaCha8Rng) -> PropensityMatrix {
        let weights: Vec<f64> = (0..parts).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut m = PropensityMatrix::zeros(n);
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
    fn identity_gives_single_component() {
        let d = decompose(&PropensityMatrix::identity(3), STOCHASTIC_TOL).unwrap();
        assert_eq!(d.len(), 1);
        assert!(d.components()[0].perm.is_identity());
        assert_eq!(d.components()[0].p, 1.0);
    }

    #[test]
    fn uniform_two_by_two() {
        let m = PropensityMatrix::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let d = decompose(&m, STOCHASTIC_TOL).unwrap();
        let mut got: Vec<(Vec<usize>, f64)> = d
            .components()
            .iter()
            .map(|c| (c.perm.dest_by_source().to_vec(), c.p))
            .collect();
        got.sort_by(|a, b| a.0.cmp(&b.0));
        assert_eq!(got, vec![(vec![0, 1], 0.5), (vec![1, 0], 0.5)]);
    }

    #[test]
    fn stay_matrix_reconstructs() {
        let p = stay_probability_matrix(10, 0.95).unwrap();
        assert_eq!(p.get(0, 0), 0.95);
        assert!((p.get(0, 1) - 0.05 / 9.0).abs() < 1e-15);
        assert!(p.check(STOCHASTIC_TOL).ok);
        let d = decompose(&p, STOCHASTIC_TOL).unwrap();
        assert!(d.len() <= 82);
        assert!(d.reconstruct().max_abs_diff(&p) < 1e-9);
    }

    #[test]
    fn stay_matrix_edge_cases() {
        let half = stay_probability_matrix(2, 0.5).unwrap();
        assert!(half.to_rows().iter().flatten().all(|&v| v == 0.5));
        assert!(stay_probability_matrix(1, 0.5).is_err());
        assert!(stay_probability_matrix(4, 0.0).is_err());
        assert!(stay_probability_matrix(4, 1.2).is_err());
        let id = stay_probability_matrix(4, 1.0).unwrap();
        assert_eq!(id, PropensityMatrix::identity(4));
    }

    #[test]
    fn rejects_non_stochastic_input() {
        let m = PropensityMatrix::from_rows(vec![vec![0.9, 0.0], vec![0.1, 1.0]]).unwrap();
        assert!(matches!(
            decompose(&m, STOCHASTIC_TOL),
            Err(OpeError::NotDoublyStochastic(_))
        ));
    }

    #[test]
    fn random_mixtures_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..50 {
            let n = 2 + trial % 9;
            let m = random_mixture(n, 1 + trial % 12, &mut rng);
            let d = decompose(&m, STOCHASTIC_TOL).unwrap();
            assert!(d.reconstruct().max_abs_diff(&m) < 1e-9, "trial {trial}");
            assert!(d.len() <= (n - 1) * (n - 1) + 1);
            assert!(d.components().iter().all(|c| c.p > 0.0));
            let total: f64 = d.components().iter().map(|c| c.p).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decomposition_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_mixture(7, 9, &mut rng);
        assert_eq!(
            decompose(&m, STOCHASTIC_TOL).unwrap(),
            decompose(&m, STOCHASTIC_TOL).unwrap()
        );
    }

    #[test]
    fn sampling_frequencies() {
        let half = PropensityMatrix::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let d = decompose(&half, STOCHASTIC_TOL).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        let hits = (0..draws)
            .filter(|_| sample(&d, &mut rng).unwrap().1 == 0)
            .count();
        assert!((hits as f64 / draws as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn sampling_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_mixture(5, 6, &mut rng);
        let d = decompose(&m, STOCHASTIC_TOL).unwrap();
        let draws = 100_000;
        let mut counts = vec![0usize; d.len()];
        for _ in 0..draws {
            counts[sample(&d, &mut rng).unwrap().1] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(d.components())
            .map(|(&o, c)| {
                let e = c.p * draws as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        // df <= 16 here; 99.9% quantile of chi2(16) is 39.25
        assert!(chi2 < 39.25, "chi2 = {chi2}");
    }

    #[test]
    fn sampling_single_component_and_determinism() {
        let d = BvnDecomposition::deterministic(Permutation::new(vec![1, 0, 2]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample(&d, &mut rng).unwrap().1, 0);
        }
        let p = stay_probability_matrix(6, 0.7).unwrap();
        let d = decompose(&p, STOCHASTIC_TOL).unwrap();
        let seq = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample(&d, &mut rng).unwrap().1).collect::<Vec<_>>()
        };
        assert_eq!(seq(42), seq(42));
    }

    #[test]
    fn json_shape() {
        let d = BvnDecomposition::deterministic(Permutation::identity(2));
        let v = serde_json::to_value(&d).unwrap();
        assert_eq!(v, serde_json::json!({"n": 2, "components": [{"perm": [0, 1], "p": 1.0}]}));
        let back: BvnDecomposition = serde_json::from_value(v).unwrap();
        assert_eq!(back, d);
        let bad = serde_json::json!({"n": 2, "components": [{"perm": [0, 1], "p": 0.4}]});
        assert!(serde_json::from_value::<BvnDecomposition>(bad).is_err());
        let empty = serde_json::json!({"n": 2, "components": []});
        assert!(serde_json::from_value::<BvnDecomposition>(empty).is_err());
    }
}
