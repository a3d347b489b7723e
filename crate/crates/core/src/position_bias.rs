//! Position-bias curve estimation from randomized logs.
//!
//! Intervention harvesting: the randomizer occasionally shows the item the
//! ranker put in slot `s` at some other position `k`. Within such a unit the
//! relevance distribution is the same at every position, so click-through
//! rates across positions differ only by the examination probabilities,
//! `ctr[s][k] / ctr[s][k'] = b_k / b_k'`.
//!
//! Two objectives are available, both minimized by gradient steps on
//! `log b` with learning rate `lr_0 / (1 + decay · epoch)`. The default is
//! the likelihood of the click counts under `clicks ≈ impressions · r_s · b_k`.
//! The alternative matches log CTR ratios directly; it is simpler but biased
//! when cells hold only a handful of clicks, since zero-click cells must be
//! dropped and `E[log x] < log E[x]`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::estimators::PositionBiasCurve;
use crate::log::ObservationLog;
use crate::rng;

/// Impressions and clicks per harvesting unit and displayed position.
///
/// Units are ranker slots; per-item marginals are kept alongside.
/// Counts are `f64` so that expected (fractional) counts can be fitted too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionCounts {
    pub n: usize,
    /// `[unit][slot]`, row-major, units are 0-based ranker slots.
    pub impressions: Vec<f64>,
    pub clicks: Vec<f64>,
    /// `[item][slot]` marginals.
    pub item_impressions: Vec<f64>,
    pub item_clicks: Vec<f64>,
}

impl InterventionCounts {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            impressions: vec![0.0; n * n],
            clicks: vec![0.0; n * n],
            item_impressions: vec![0.0; n * n],
            item_clicks: vec![0.0; n * n],
        }
    }

    /// Impressions of ranker slot `unit` (0-based) at 1-based `position`.
    pub fn unit_impressions(&self, unit: usize, position: usize) -> f64 {
        self.impressions[unit * self.n + position - 1]
    }

    pub fn unit_clicks(&self, unit: usize, position: usize) -> f64 {
        self.clicks[unit * self.n + position - 1]
    }

    pub fn item_impressions(&self, item: usize, position: usize) -> f64 {
        self.item_impressions[item * self.n + position - 1]
    }

    pub fn item_clicks(&self, item: usize, position: usize) -> f64 {
        self.item_clicks[item * self.n + position - 1]
    }

    /// Total impressions at 1-based `position`.
    pub fn position_impressions(&self, position: usize) -> f64 {
        (0..self.n).map(|u| self.unit_impressions(u, position)).sum()
    }

    /// Clicks scaled by `factor`; used to check the fit only sees ratios.
    pub fn scale_clicks(&self, factor: f64) -> Self {
        let scale = |v: &Vec<f64>| v.iter().map(|c| c * factor).collect();
        Self {
            clicks: scale(&self.clicks),
            item_clicks: scale(&self.item_clicks),
            ..self.clone()
        }
    }
}

/// Tallies displayed positions and clicks per ranker slot and per item.
pub fn harvest_interventions(logs: &[ObservationLog]) -> Result<InterventionCounts> {
    let n = logs.first().ok_or(OpeError::EmptyLogs)?.n();
    let mut counts = InterventionCounts::zeros(n);
    let mut ranker_slot = vec![0; n];
    for log in logs {
        if log.n() != n {
            return Err(OpeError::LengthMismatch {
                expected: n,
                got: log.n(),
            });
        }
        for (s, &item) in log.ranker_ranking.items().iter().enumerate() {
            ranker_slot[item] = s;
        }
        for (k, (&item, &click)) in log.displayed_ranking.items().iter().zip(&log.clicks).enumerate() {
            let unit = ranker_slot[item];
            counts.impressions[unit * n + k] += 1.0;
            counts.clicks[unit * n + k] += f64::from(click);
            counts.item_impressions[item * n + k] += 1.0;
            counts.item_clicks[item * n + k] += f64::from(click);
        }
    }
    Ok(counts)
}

/// Loss minimized by [`fit_position_bias`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitObjective {
    /// Quasi-Poisson likelihood of every unit/position cell with mean
    /// `impressions · r_u · b_k`; the unit rates `r_u` are profiled out.
    #[default]
    Likelihood,
    /// Squared log-space residuals between within-unit CTR ratios and
    /// `b_k / b_k'`, each pair weighted by its smaller impression count.
    LogRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub objective: FitObjective,
    pub initial_lr: f64,
    /// Learning rate at epoch `t` is `initial_lr / (1 + decay · t)`.
    pub decay: f64,
    pub epochs: usize,
    /// Cells (likelihood) or pairs (log-ratio) per step; `None` takes the
    /// full gradient every epoch.
    pub batch_size: Option<usize>,
    /// Shuffles the terms when mini-batching.
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            objective: FitObjective::Likelihood,
            initial_lr: 0.1,
            decay: 0.01,
            epochs: 200,
            batch_size: None,
            seed: 0,
        }
    }
}

impl SgdConfig {
    fn lr(&self, epoch: usize) -> f64 {
        self.initial_lr / (1.0 + self.decay * epoch as f64)
    }
}

/// Fits `b` (with `b_1 = 1`) to the harvested counts.
pub fn fit_position_bias(counts: &InterventionCounts, n_positions: usize, cfg: &SgdConfig) -> Result<PositionBiasCurve> {
    let n = counts.n;
    if n_positions != n {
        return Err(OpeError::LengthMismatch {
            expected: n,
            got: n_positions,
        });
    }
    for position in 1..=n {
        if counts.position_impressions(position) <= 0.0 {
            return Err(OpeError::Unidentifiable(position));
        }
    }
    let theta = match cfg.objective {
        FitObjective::Likelihood => fit_likelihood(counts, cfg)?,
        FitObjective::LogRatio => fit_log_ratio(counts, cfg)?,
    };
    PositionBiasCurve::new(theta.iter().map(|t| (t - theta[0]).exp()).collect())
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    unit: usize,
    pos: usize,
    impressions: f64,
    clicks: f64,
}

/// Positions not linked to position 1 through units seen at several
/// positions, as 1-based ids. Only units with clicks count.
fn unlinked_positions(n: usize, cells: &[Cell]) -> Vec<usize> {
    let mut seen_at: Vec<Vec<usize>> = vec![Vec::new(); n];
    for c in cells {
        seen_at[c.unit].push(c.pos);
    }
    let mut linked = vec![false; n];
    linked[0] = true;
    let mut changed = true;
    while changed {
        changed = false;
        for positions in &seen_at {
            if positions.iter().any(|&k| linked[k]) {
                for &k in positions {
                    changed |= !linked[k];
                    linked[k] = true;
                }
            }
        }
    }
    (0..n).filter(|&k| !linked[k]).map(|k| k + 1).collect()
}

/// Profile-likelihood ascent on `θ = log b`.
///
/// For fixed `θ` the unit rates have the closed form
/// `r_u = Σ_k clicks[u][k] / Σ_k impressions[u][k] · b_k`, so only `θ` is
/// iterated. The step for `θ_k` is its gradient divided by the diagonal of
/// the profiled information, `Σ_u e_uk (1 - e_uk / e_u)` with `e` the
/// expected clicks; without the `1 - e_uk / e_u` factor a unit shown almost
/// always at one position would freeze that position.
fn fit_likelihood(counts: &InterventionCounts, cfg: &SgdConfig) -> Result<Vec<f64>> {
    let n = counts.n;
    let unit_clicks: Vec<f64> = (0..n)
        .map(|u| counts.clicks[u * n..(u + 1) * n].iter().sum())
        .collect();
    let mut cells: Vec<Cell> = (0..n * n)
        .map(|i| Cell {
            unit: i / n,
            pos: i % n,
            impressions: counts.impressions[i],
            clicks: counts.clicks[i],
        })
        .filter(|c| c.impressions > 0.0 && unit_clicks[c.unit] > 0.0)
        .collect();
    if let Some(&k) = unlinked_positions(n, &cells).first() {
        return Err(OpeError::Unidentifiable(k));
    }
    let mut column_clicks = vec![0.0; n];
    for c in &cells {
        column_clicks[c.pos] += c.clicks;
    }
    if let Some(k) = column_clicks.iter().position(|&c| c <= 0.0) {
        return Err(OpeError::Unidentifiable(k + 1));
    }

    let mut theta = vec![0.0f64; n];
    let mut rate = vec![0.0; n];
    let mut unit_expected = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut info = vec![0.0; n];
    let batch = cfg.batch_size.unwrap_or(cells.len()).max(1);
    let mut shuffle_rng = rng::seeded(cfg.seed);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        if batch < cells.len() {
            cells.shuffle(&mut shuffle_rng);
        }
        for chunk in cells.chunks(batch) {
            rate.fill(0.0);
            for c in cells.iter() {
                rate[c.unit] += c.impressions * theta[c.pos].exp();
            }
            for u in 0..n {
                if rate[u] > 0.0 {
                    rate[u] = unit_clicks[u] / rate[u];
                }
            }
            unit_expected.fill(0.0);
            for c in chunk {
                unit_expected[c.unit] += c.impressions * rate[c.unit] * theta[c.pos].exp();
            }
            grad.fill(0.0);
            info.fill(0.0);
            for c in chunk {
                let e = c.impressions * rate[c.unit] * theta[c.pos].exp();
                grad[c.pos] += c.clicks - e;
                info[c.pos] += e * (1.0 - e / unit_expected[c.unit]).max(0.0);
            }
            for k in 0..n {
                if info[k] > 0.0 {
                    theta[k] += (lr * grad[k] / info[k]).clamp(-1.0, 1.0);
                }
            }
        }
    }
    Ok(theta)
}

#[derive(Debug, Clone, Copy)]
struct Pair {
    hi: usize,
    lo: usize,
    log_ratio: f64,
    weight: f64,
}

fn build_pairs(counts: &InterventionCounts) -> Result<Vec<Pair>> {
    let n = counts.n;
    let mut pairs = Vec::new();
    for unit in 0..n {
        let ctr = |k: usize| {
            let imp = counts.unit_impressions(unit, k);
            let clk = counts.unit_clicks(unit, k);
            (imp > 0.0 && clk > 0.0).then(|| (clk / imp, imp))
        };
        for a in 1..=n {
            let Some((ctr_a, imp_a)) = ctr(a) else { continue };
            for b in a + 1..=n {
                let Some((ctr_b, imp_b)) = ctr(b) else { continue };
                pairs.push(Pair {
                    hi: a - 1,
                    lo: b - 1,
                    log_ratio: (ctr_a / ctr_b).ln(),
                    weight: imp_a.min(imp_b),
                });
            }
        }
    }
    // every position has to be linked to the rest through some pair
    let mut touched = vec![false; n];
    for p in &pairs {
        touched[p.hi] = true;
        touched[p.lo] = true;
    }
    if n > 1 {
        if let Some(k) = touched.iter().position(|t| !t) {
            return Err(OpeError::Unidentifiable(k + 1));
        }
    }
    Ok(pairs)
}

/// Gradient descent on the pairwise log-ratio loss. Each position's step is
/// normalized by the total weight of the pairs touching it.
fn fit_log_ratio(counts: &InterventionCounts, cfg: &SgdConfig) -> Result<Vec<f64>> {
    let mut pairs = build_pairs(counts)?;
    let n = counts.n;
    let mut incident = vec![0.0; n];
    for p in &pairs {
        incident[p.hi] += p.weight;
        incident[p.lo] += p.weight;
    }
    let batch = cfg.batch_size.unwrap_or(pairs.len()).max(1);
    let mut shuffle_rng = rng::seeded(cfg.seed);
    let mut theta = vec![0.0; n];
    let mut grad = vec![0.0; n];
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        if batch < pairs.len() {
            pairs.shuffle(&mut shuffle_rng);
        }
        for chunk in pairs.chunks(batch) {
            grad.fill(0.0);
            let mut chunk_incident = vec![0.0; n];
            for p in chunk {
                let r = p.log_ratio - (theta[p.hi] - theta[p.lo]);
                grad[p.hi] -= 2.0 * p.weight * r;
                grad[p.lo] += 2.0 * p.weight * r;
                chunk_incident[p.hi] += p.weight;
                chunk_incident[p.lo] += p.weight;
            }
            let norm = if batch < pairs.len() { &chunk_incident } else { &incident };
            for k in 0..n {
                if norm[k] > 0.0 {
                    theta[k] -= lr * grad[k] / norm[k];
                }
            }
        }
    }
    Ok(theta)
}
