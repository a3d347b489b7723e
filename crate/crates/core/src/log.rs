//! Logged impressions and their JSONL encoding.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::bvn::BvnDecomposition;
use crate::error::{OpeError, Result};
use crate::ranking::Ranking;
use crate::rules::RuleSet;

/// One impression: what the deterministic ranker produced, which
/// randomizing component was drawn, what the user actually saw after the
/// rules, and which displayed positions were clicked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationLog {
    pub context_id: u64,
    pub ranker_ranking: Ranking,
    pub sampled_component: usize,
    pub displayed_ranking: Ranking,
    /// 0/1 per displayed slot.
    pub clicks: Vec<u8>,
    pub decomposition_ref: String,
    pub ruleset_ref: String,
}

impl ObservationLog {
    pub fn n(&self) -> usize {
        self.displayed_ranking.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.clicks.len() != n {
            return Err(OpeError::LengthMismatch {
                expected: n,
                got: self.clicks.len(),
            });
        }
        if self.ranker_ranking.len() != n {
            return Err(OpeError::LengthMismatch {
                expected: n,
                got: self.ranker_ranking.len(),
            });
        }
        if let Some(&c) = self.clicks.iter().find(|&&c| c > 1) {
            return Err(OpeError::Config(format!("click indicator {c} is not 0/1")));
        }
        Ok(())
    }

    pub fn total_clicks(&self) -> u32 {
        self.clicks.iter().map(|&c| u32::from(c)).sum()
    }
}

pub fn write_jsonl<W: Write>(mut w: W, logs: &[ObservationLog]) -> Result<()> {
    for log in logs {
        serde_json::to_writer(&mut w, log)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one log per non-empty line, validating each.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<ObservationLog>> {
    let mut logs = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let log: ObservationLog = serde_json::from_str(&line)?;
        log.validate()?;
        logs.push(log);
    }
    Ok(logs)
}

/// Decompositions and rule sets that logs refer to by id.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LogRegistry {
    pub decompositions: HashMap<String, BvnDecomposition>,
    pub rulesets: HashMap<String, RuleSet>,
}

impl LogRegistry {
    pub fn single(decomposition_ref: &str, d: BvnDecomposition, ruleset_ref: &str, rules: RuleSet) -> Self {
        let mut reg = Self::default();
        reg.decompositions.insert(decomposition_ref.to_owned(), d);
        reg.rulesets.insert(ruleset_ref.to_owned(), rules);
        reg
    }

    pub fn decomposition(&self, key: &str) -> Result<&BvnDecomposition> {
        self.decompositions
            .get(key)
            .ok_or_else(|| OpeError::UnresolvedRef(key.to_owned()))
    }

    pub fn ruleset(&self, key: &str) -> Result<&RuleSet> {
        self.rulesets
            .get(key)
            .ok_or_else(|| OpeError::UnresolvedRef(key.to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_log() -> ObservationLog {
        ObservationLog {
            context_id: 3,
            ranker_ranking: Ranking::new(vec![1, 0, 2]).unwrap(),
            sampled_component: 0,
            displayed_ranking: Ranking::new(vec![2, 1, 0]).unwrap(),
            clicks: vec![1, 0, 0],
            decomposition_ref: "bvn".into(),
            ruleset_ref: "rules".into(),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let logs = vec![sample_log(), ObservationLog { context_id: 4, ..sample_log() }];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &logs).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 2);
        assert_eq!(read_jsonl(&buf[..]).unwrap(), logs);
    }

    #[test]
    fn rejects_bad_clicks() {
        let mut log = sample_log();
        log.clicks = vec![1, 0];
        assert!(log.validate().is_err());
        log.clicks = vec![2, 0, 0];
        assert!(log.validate().is_err());
    }

    #[test]
    fn unresolved_refs() {
        let reg = LogRegistry::default();
        assert!(matches!(reg.ruleset("x"), Err(OpeError::UnresolvedRef(_))));
    }
}
