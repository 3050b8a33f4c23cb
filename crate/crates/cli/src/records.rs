//! JSONL wire format for offline trajectories.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, RecordError, Result};

/// One trajectory as exchanged with external tools.
///
/// `entropies` covers every position, prompt included; only
/// `[gen_start, entropies.len())` is segmented. Unknown keys are carried
/// through untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub prompt_id: String,
    pub group_id: String,
    pub entropies: Vec<f64>,
    pub gen_start: usize,
    pub outcome_reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
    /// Half-open `[start, end)` ranges in absolute positions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<(usize, usize)>>,
    /// Per generated token, read by `analyze`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantages: Option<Vec<f64>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.entropies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entropies.is_empty()
    }

    pub fn gen_len(&self) -> usize {
        self.len().saturating_sub(self.gen_start)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.entropies.len();
        if n == 0 {
            return Err("`entropies` is empty".into());
        }
        if let Some(i) = self.entropies.iter().position(|h| !h.is_finite() || *h < 0.0) {
            return Err(format!("entropy at {i} is negative or not finite"));
        }
        if self.gen_start >= n {
            return Err(format!("gen_start {} is not below length {n}", self.gen_start));
        }
        if !self.outcome_reward.is_finite() {
            return Err("`outcome_reward` is not finite".into());
        }
        if let Some(tokens) = &self.tokens {
            if tokens.len() != n {
                return Err(format!("{} tokens for {n} entropies", tokens.len()));
            }
        }
        if let Some(scores) = &self.segment_scores {
            if scores.iter().any(|s| !s.is_finite()) {
                return Err("segment score is not finite".into());
            }
        }
        if let Some(segs) = &self.segments {
            let mut cur = self.gen_start;
            for &(s, e) in segs {
                if s != cur || e <= s {
                    return Err(format!("segments do not tile [{}, {n})", self.gen_start));
                }
                cur = e;
            }
            if cur != n {
                return Err(format!("segments do not tile [{}, {n})", self.gen_start));
            }
        }
        if let Some(adv) = &self.advantages {
            if adv.len() != self.gen_len() {
                return Err(format!(
                    "{} advantages for {} generated tokens",
                    adv.len(),
                    self.gen_len()
                ));
            }
            if adv.iter().any(|a| !a.is_finite()) {
                return Err("advantage is not finite".into());
            }
        }
        Ok(())
    }
}

/// A parsed record with its 1-based line number.
#[derive(Debug, Clone, PartialEq)]
pub struct Numbered {
    pub line: usize,
    pub record: TrajectoryRecord,
}

/// Parses and validates every non-blank line, returning the good records
/// and the per-line failures.
pub fn read_records<R: BufRead>(input: R, path: &str) -> Result<(Vec<Numbered>, Vec<RecordError>)> {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| CliError::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<TrajectoryRecord>(&text)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r));
        match parsed {
            Ok(record) => ok.push(Numbered {
                line: line_no,
                record,
            }),
            Err(message) => bad.push(RecordError {
                line: line_no,
                message,
            }),
        }
    }
    Ok((ok, bad))
}

/// Like [`read_records`] but fails on the first batch of bad lines.
pub fn read_valid_records<R: BufRead>(input: R, path: &str) -> Result<Vec<Numbered>> {
    let (ok, bad) = read_records(input, path)?;
    if bad.is_empty() {
        Ok(ok)
    } else {
        Err(CliError::Records(bad))
    }
}

/// Groups record indices by `group_id`, in order of first appearance.
pub fn group_indices(records: &[Numbered]) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    let mut index: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for (i, r) in records.iter().enumerate() {
        match index.get(r.record.group_id.as_str()) {
            Some(&g) => groups[g].1.push(i),
            None => {
                index.insert(&r.record.group_id, groups.len());
                groups.push((r.record.group_id.clone(), vec![i]));
            }
        }
    }
    groups
}
