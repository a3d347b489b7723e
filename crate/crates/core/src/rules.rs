//! Pinning rules applied after randomization.
//!
//! A pin removes its item from wherever the randomized ranking put it and
//! re-inserts it at the target position; the items in between shift by one
//! and otherwise keep their relative order. Rules in a set fire
//! independently with their own probabilities and are applied in list order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::ranking::{Permutation, Ranking};

/// Upper bound on rule-set size for power-set enumeration.
pub const MAX_ENUMERATED_RULES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinRule {
    pub item: usize,
    /// 1-based.
    #[serde(rename = "target")]
    pub target_position: usize,
    #[serde(rename = "p")]
    pub probability: f64,
}

impl PinRule {
    pub fn new(item: usize, target_position: usize, probability: f64) -> Result<Self> {
        let rule = Self {
            item,
            target_position,
            probability,
        };
        rule.validate()?;
        Ok(rule)
    }

    fn validate(&self) -> Result<()> {
        if !(self.probability > 0.0 && self.probability <= 1.0) {
            return Err(OpeError::InvalidProbability(self.probability));
        }
        if self.target_position == 0 {
            return Err(OpeError::InvalidRuleSet(format!(
                "rule for item {} has target position 0; positions are 1-based",
                self.item
            )));
        }
        Ok(())
    }
}

/// JSON form: `{"rules": [{"item": 0, "target": 1, "p": 0.95}]}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawRuleSet")]
pub struct RuleSet {
    rules: Vec<PinRule>,
}

#[derive(Deserialize)]
struct RawRuleSet {
    rules: Vec<PinRule>,
}

impl TryFrom<RawRuleSet> for RuleSet {
    type Error = OpeError;

    fn try_from(raw: RawRuleSet) -> Result<Self> {
        Self::new(raw.rules)
    }
}

impl RuleSet {
    pub fn new(rules: Vec<PinRule>) -> Result<Self> {
        for (i, a) in rules.iter().enumerate() {
            a.validate()?;
            for b in &rules[..i] {
                if a.item == b.item {
                    return Err(OpeError::InvalidRuleSet(format!(
                        "item {} is pinned twice",
                        a.item
                    )));
                }
                if a.target_position == b.target_position {
                    return Err(OpeError::InvalidRuleSet(format!(
                        "items {} and {} share target position {}",
                        b.item, a.item, a.target_position
                    )));
                }
            }
        }
        Ok(Self { rules })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn rules(&self) -> &[PinRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn is_deterministic(&self) -> bool {
        self.rules.iter().all(|r| r.probability == 1.0)
    }

    /// Same rules with every probability replaced by `p`; used to model a
    /// correction that assumes a different firing rate than the one logged.
    pub fn with_probability(&self, p: f64) -> Result<RuleSet> {
        RuleSet::new(
            self.rules
                .iter()
                .map(|r| PinRule {
                    probability: p,
                    ..*r
                })
                .collect(),
        )
    }

    /// Rules whose bit is set in `mask`.
    pub fn subset(&self, mask: u64) -> RuleSet {
        RuleSet {
            rules: self
                .rules
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, r)| *r)
                .collect(),
        }
    }

    /// Bit mask of `subset` within `self`.
    pub fn mask_of(&self, subset: &RuleSet) -> Result<u64> {
        let mut mask = 0u64;
        for r in &subset.rules {
            let i = self
                .rules
                .iter()
                .position(|x| x == r)
                .ok_or_else(|| OpeError::NotASubset(format!("{r:?}")))?;
            mask |= 1 << i;
        }
        Ok(mask)
    }

    /// `Π_{r∈S} p_r · Π_{r∉S} (1 - p_r)` for the subset encoded by `mask`.
    pub fn mask_probability(&self, mask: u64) -> f64 {
        self.rules
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if mask >> i & 1 == 1 {
                    r.probability
                } else {
                    1.0 - r.probability
                }
            })
            .product()
    }

    /// Each rule independently with its own probability.
    pub fn sample_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let mut mask = 0;
        for (i, r) in self.rules.iter().enumerate() {
            if rng.random_bool(r.probability) {
                mask |= 1 << i;
            }
        }
        mask
    }

    pub(crate) fn check_fits(&self, n: usize) -> Result<()> {
        for r in &self.rules {
            if r.item >= n {
                return Err(OpeError::UnknownItem { item: r.item, n });
            }
            if r.target_position > n {
                return Err(OpeError::PositionOutOfRange {
                    position: r.target_position,
                    n,
                });
            }
        }
        Ok(())
    }

    /// Applies the rules selected by `mask` to `items` in place.
    /// Assumes [`RuleSet::check_fits`] passed for `items.len()`.
    pub(crate) fn pin_in_place(&self, mask: u64, items: &mut Vec<usize>) {
        for (i, r) in self.rules.iter().enumerate() {
            if mask >> i & 1 == 0 {
                continue;
            }
            let from = items
                .iter()
                .position(|&x| x == r.item)
                .expect("item presence checked by check_fits");
            let to = r.target_position - 1;
            if from != to {
                let item = items.remove(from);
                items.insert(to, item);
            }
        }
    }
}

/// The permutation `B(Y)` that applying every rule in `rules_subset` to `r`
/// amounts to.
pub fn rule_permutation(rules_subset: &RuleSet, r: &Ranking) -> Result<Permutation> {
    let n = r.len();
    rules_subset.check_fits(n)?;
    let mut displayed = r.items().to_vec();
    rules_subset.pin_in_place(u64::MAX, &mut displayed);
    let mut slot_of = vec![0; n];
    for (k, &item) in displayed.iter().enumerate() {
        slot_of[item] = k;
    }
    Ok(Permutation::from_vec_unchecked(
        r.items().iter().map(|&item| slot_of[item]).collect(),
    ))
}

/// Fires each rule independently and returns the displayed ranking with the
/// subset that fired.
pub fn apply_stochastic<R: Rng + ?Sized>(
    rules: &RuleSet,
    r: &Ranking,
    rng: &mut R,
) -> Result<(Ranking, RuleSet)> {
    rules.check_fits(r.len())?;
    let mask = rules.sample_mask(rng);
    let mut displayed = r.items().to_vec();
    rules.pin_in_place(mask, &mut displayed);
    Ok((Ranking::new(displayed)?, rules.subset(mask)))
}

/// Probability that exactly the rules in `subset` fire.
pub fn subset_probability(rules: &RuleSet, subset: &RuleSet) -> Result<f64> {
    Ok(rules.mask_probability(rules.mask_of(subset)?))
}
