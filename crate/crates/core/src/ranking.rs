//! Rankings, permutations and propensity matrices.
//!
//! Storage is 0-based throughout: a [`Ranking`] lists item ids by slot
//! `0..n`, and a [`Permutation`] maps source slot to destination slot.
//! Whenever a value is called a *position* or *rank* it is 1-based, matching
//! the position-bias curve `b_1..b_n` and the metric weights `λ(1..n)`.

use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};

/// Default tolerance for row/column sums of propensity matrices.
pub const STOCHASTIC_TOL: f64 = 1e-9;

fn check_bijection(values: &[usize]) -> Result<()> {
    let n = values.len();
    let mut seen = vec![false; n];
    for (slot, &v) in values.iter().enumerate() {
        if v >= n {
            return Err(OpeError::InvalidPermutation {
                n,
                detail: format!("value {v} at slot {slot} is out of range"),
            });
        }
        if std::mem::replace(&mut seen[v], true) {
            return Err(OpeError::InvalidPermutation {
                n,
                detail: format!("value {v} repeated at slot {slot}"),
            });
        }
    }
    Ok(())
}

/// Items ordered by display slot. `items()[0]` is shown at position 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Ranking(Vec<usize>);

impl Ranking {
    pub fn new(items_by_position: Vec<usize>) -> Result<Self> {
        check_bijection(&items_by_position)?;
        Ok(Self(items_by_position))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn items(&self) -> &[usize] {
        &self.0
    }

    /// Item shown at 1-based `position`.
    pub fn item_at(&self, position: usize) -> Option<usize> {
        position.checked_sub(1).and_then(|s| self.0.get(s).copied())
    }

    /// 1-based position of `item`.
    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.0.iter().position(|&i| i == item).map(|s| s + 1)
    }

    /// 0-based slot of every item, indexed by item id.
    pub fn slots_by_item(&self) -> Vec<usize> {
        let mut slots = vec![0; self.0.len()];
        for (slot, &item) in self.0.iter().enumerate() {
            slots[item] = slot;
        }
        slots
    }

    pub fn apply(&self, perm: &Permutation) -> Result<Ranking> {
        apply_permutation(self, perm)
    }
}

impl TryFrom<Vec<usize>> for Ranking {
    type Error = OpeError;

    fn try_from(value: Vec<usize>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Ranking> for Vec<usize> {
    fn from(r: Ranking) -> Self {
        r.0
    }
}

/// A reordering of slots: the entry at source slot `s` moves to
/// `dest_by_source()[s]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(dest_by_source: Vec<usize>) -> Result<Self> {
        check_bijection(&dest_by_source)?;
        Ok(Self(dest_by_source))
    }

    pub(crate) fn from_vec_unchecked(dest_by_source: Vec<usize>) -> Self {
        debug_assert!(check_bijection(&dest_by_source).is_ok());
        Self(dest_by_source)
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dest_by_source(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(s, &d)| s == d)
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.0.len()];
        for (s, &d) in self.0.iter().enumerate() {
            inv[d] = s;
        }
        Self(inv)
    }

    /// Dense 0/1 form with `m[s][d] = 1` iff source slot `s` moves to `d`.
    pub fn to_matrix(&self) -> PropensityMatrix {
        let n = self.0.len();
        let mut m = PropensityMatrix::zeros(n);
        for (s, &d) in self.0.iter().enumerate() {
            m.set(s, d, 1.0);
        }
        m
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = OpeError;

    fn try_from(value: Vec<usize>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

/// Moves the item at source slot `s` of `r` to slot `p.dest_by_source()[s]`.
pub fn apply_permutation(r: &Ranking, p: &Permutation) -> Result<Ranking> {
    if r.len() != p.len() {
        return Err(OpeError::LengthMismatch {
            expected: r.len(),
            got: p.len(),
        });
    }
    let mut out = vec![0; r.len()];
    apply_into(r.items(), p.dest_by_source(), &mut out);
    Ok(Ranking(out))
}

#[inline]
pub(crate) fn apply_into(items: &[usize], dest_by_source: &[usize], out: &mut [usize]) {
    for (s, &item) in items.iter().enumerate() {
        out[dest_by_source[s]] = item;
    }
}

/// `p1` followed by `p2`.
pub fn compose(p1: &Permutation, p2: &Permutation) -> Result<Permutation> {
    if p1.len() != p2.len() {
        return Err(OpeError::LengthMismatch {
            expected: p1.len(),
            got: p2.len(),
        });
    }
    Ok(Permutation(p1.0.iter().map(|&d| p2.0[d]).collect()))
}

/// Square matrix of display probabilities, `get(j, k)` being the probability
/// that row `j` (an item, or a ranker slot before items are assigned) lands
/// in column `k` (0-based slot, i.e. position `k + 1`).
///
/// Doubly stochastic whenever it comes out of the exact constructions;
/// Monte Carlo estimates are only row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl PropensityMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            entries: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Permutation::identity(n).to_matrix()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(OpeError::NotSquare {
                    rows: n,
                    row: i,
                    cols: row.len(),
                });
            }
            entries.extend(row);
        }
        Ok(Self { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.entries[row * self.n + col] = v;
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, v: f64) {
        self.entries[row * self.n + col] += v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.entries[row * self.n..(row + 1) * self.n]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.n.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn max_abs_diff(&self, other: &PropensityMatrix) -> f64 {
        assert_eq!(self.n, other.n, "matrix sizes differ");
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows reordered so that row `base.items()[s]` holds source row `s`.
    /// Turns a slot-indexed randomization matrix into an item-indexed one.
    pub fn reindex_rows(&self, base: &Ranking) -> Result<PropensityMatrix> {
        if base.len() != self.n {
            return Err(OpeError::LengthMismatch {
                expected: self.n,
                got: base.len(),
            });
        }
        let mut out = PropensityMatrix::zeros(self.n);
        for (s, &item) in base.items().iter().enumerate() {
            out.entries[item * self.n..(item + 1) * self.n].copy_from_slice(self.row(s));
        }
        Ok(out)
    }

    pub fn check(&self, tol: f64) -> StochasticityReport {
        report(self.n, |r, c| self.get(r, c), tol)
    }
}

/// Outcome of [`check_doubly_stochastic`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StochasticityReport {
    pub ok: bool,
    pub max_row_deviation: f64,
    pub max_col_deviation: f64,
    /// First entry outside `[0, 1]`, as `(row, col, value)`.
    pub bad_entry: Option<(usize, usize, f64)>,
    /// First row whose sum is off by more than the tolerance, with its sum.
    pub bad_row: Option<(usize, f64)>,
    pub bad_col: Option<(usize, f64)>,
}

fn report(n: usize, at: impl Fn(usize, usize) -> f64, tol: f64) -> StochasticityReport {
    let mut rep = StochasticityReport {
        ok: true,
        max_row_deviation: 0.0,
        max_col_deviation: 0.0,
        bad_entry: None,
        bad_row: None,
        bad_col: None,
    };
    let mut col_sums = vec![0.0; n];
    for r in 0..n {
        let mut row_sum = 0.0;
        for (c, col_sum) in col_sums.iter_mut().enumerate() {
            let v = at(r, c);
            if rep.bad_entry.is_none() && !(-tol..=1.0 + tol).contains(&v) {
                rep.bad_entry = Some((r, c, v));
            }
            row_sum += v;
            *col_sum += v;
        }
        let dev = (row_sum - 1.0).abs();
        rep.max_row_deviation = rep.max_row_deviation.max(dev);
        if rep.bad_row.is_none() && (dev.is_nan() || dev > tol) {
            rep.bad_row = Some((r, row_sum));
        }
    }
    for (c, &sum) in col_sums.iter().enumerate() {
        let dev = (sum - 1.0).abs();
        rep.max_col_deviation = rep.max_col_deviation.max(dev);
        if rep.bad_col.is_none() && (dev.is_nan() || dev > tol) {
            rep.bad_col = Some((c, sum));
        }
    }
    rep.ok = rep.bad_entry.is_none() && rep.bad_row.is_none() && rep.bad_col.is_none();
    rep
}

/// Checks a row-major square matrix for double stochasticity within `tol`.
pub fn check_doubly_stochastic(m: &[Vec<f64>], tol: f64) -> Result<StochasticityReport> {
    let n = m.len();
    if let Some((row, r)) = m.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(OpeError::NotSquare {
            rows: n,
            row,
            cols: r.len(),
        });
    }
    Ok(report(n, |r, c| m[r][c], tol))
}

/// What a serialized matrix describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Propensity,
    Corrected,
}

/// JSON form: `{"kind": "corrected", "n": 10, "entries": [[...], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixFile {
    pub kind: MatrixKind,
    pub n: usize,
    pub entries: Vec<Vec<f64>>,
}

impl MatrixFile {
    pub fn new(kind: MatrixKind, m: &PropensityMatrix) -> Self {
        Self {
            kind,
            n: m.n(),
            entries: m.to_rows(),
        }
    }

    pub fn into_matrix(self) -> Result<PropensityMatrix> {
        let m = PropensityMatrix::from_rows(self.entries)?;
        if m.n() != self.n {
            return Err(OpeError::LengthMismatch {
                expected: self.n,
                got: m.n(),
            });
        }
        Ok(m)
    }
}
