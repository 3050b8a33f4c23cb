//! ChainSum: a synthetic multi-step task with a rule-based verifier and an
//! oracle step scorer standing in for a process reward model.
//!
//! The prompt is a list of digits `d_1..d_n`. A well-formed completion writes
//! the running sums modulo 10, separated by `SEP`, then `ANS`, the final sum
//! and `EOS`:
//!
//! ```text
//! prompt  3 4 5
//! output  3 SEP 7 SEP 2 ANS 2 EOS
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEP: u32 = 10;
pub const ANS: u32 = 11;
pub const EOS: u32 = 12;
pub const VOCAB: usize = 13;

/// Score given to segments with no verifiable step token.
pub const NEUTRAL_SCORE: f64 = 0.5;
/// Multiplier applied to early segments by the hard-prefix oracle.
pub const HARD_PREFIX_FACTOR: f64 = 0.3;

pub fn is_digit(tok: u32) -> bool {
    tok < 10
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSumTask {
    pub digits: Vec<u32>,
    pub target: Vec<u32>,
    pub answer: u32,
}

impl ChainSumTask {
    pub fn new(digits: Vec<u32>) -> Result<Self> {
        if digits.is_empty() || digits.iter().any(|&d| d > 9) {
            return Err(Error::InvalidConfig(format!("bad ChainSum digits {digits:?}")));
        }
        let target: Vec<u32> = digits
            .iter()
            .scan(0, |acc, &d| {
                *acc = (*acc + d) % 10;
                Some(*acc)
            })
            .collect();
        let answer = *target.last().expect("non-empty");
        Ok(Self {
            digits,
            target,
            answer,
        })
    }

    /// Prompt tokens (the digits themselves).
    pub fn prompt(&self) -> &[u32] {
        &self.digits
    }

    pub fn steps(&self) -> usize {
        self.digits.len()
    }

    /// The well-formed correct completion.
    pub fn reference_completion(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(2 * self.steps() + 2);
        for (i, &s) in self.target.iter().enumerate() {
            if i > 0 {
                out.push(SEP);
            }
            out.push(s);
        }
        out.extend([ANS, self.answer, EOS]);
        out
    }

    pub fn id(&self) -> String {
        self.digits.iter().map(|d| char::from(b'0' + *d as u8)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub min_digits: usize,
    pub max_digits: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            min_digits: 2,
            max_digits: 6,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_digits < 1 || self.min_digits > self.max_digits {
            return Err(Error::InvalidConfig(format!(
                "task digits range {}..={} is invalid",
                self.min_digits, self.max_digits
            )));
        }
        Ok(())
    }
}

/// Samples a task with the default digit range.
pub fn sample_task(seed: u64) -> ChainSumTask {
    sample_task_with(&TaskConfig::default(), seed)
}

pub fn sample_task_with(cfg: &TaskConfig, seed: u64) -> ChainSumTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_digits..=cfg.max_digits);
    let digits = (0..n).map(|_| rng.random_range(0..10u32)).collect();
    ChainSumTask::new(digits).expect("digits in range")
}

/// `+1` iff the completion ends `ANS <answer> EOS`; `-1` otherwise,
/// including completions that never emit `EOS`.
pub fn outcome_reward(task: &ChainSumTask, generated: &[u32]) -> f64 {
    let Some(eos) = generated.iter().position(|&t| t == EOS) else {
        return -1.0;
    };
    match &generated[..eos] {
        [.., ANS, a] if *a == task.answer => 1.0,
        _ => -1.0,
    }
}

/// Per-position verdict on the generated tokens: `Some(correct)` for
/// verifiable step tokens, `None` for connectors.
///
/// Before the first `ANS`, the j-th digit is step j and is checked against
/// the true running sum; a step that does not open the completion or follow
/// `SEP` is malformed and counts as wrong. The token right after `ANS` is the answer. Any other
/// digit is a spurious step and counts as wrong. The first `EOS` is a step
/// too: it is correct only when it directly follows an answer digit.
pub fn step_labels(task: &ChainSumTask, generated: &[u32]) -> Vec<Option<bool>> {
    let mut labels = Vec::with_capacity(generated.len());
    let mut step = 0usize;
    let mut seen_ans = false;
    let mut seen_eos = false;
    let mut answer_pos = None;
    for (i, &tok) in generated.iter().enumerate() {
        let label = if tok == EOS && !seen_eos {
            seen_eos = true;
            let answered = answer_pos.is_some_and(|a| a + 1 == i && is_digit(generated[a]));
            Some(answered)
        } else if !is_digit(tok) {
            if tok == ANS && !seen_ans {
                seen_ans = true;
                answer_pos = Some(i + 1);
            }
            None
        } else if !seen_ans {
            let separated = i == 0 || generated[i - 1] == SEP;
            let ok = separated && task.target.get(step) == Some(&tok);
            step += 1;
            Some(ok)
        } else if answer_pos == Some(i) {
            Some(tok == task.answer)
        } else {
            Some(false)
        };
        labels.push(label);
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Standard deviation of Gaussian noise added to each segment score.
    pub noise_std: f64,
    /// Scale down segments that lie entirely in the first third of the span.
    pub hard_prefix: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.0,
            hard_prefix: false,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidConfig("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Oracle process score in `[0, 1]` for one segment.
///
/// `segment` is a half-open range over `generated` (positions relative to the
/// start of generation). The base score is the fraction of correct step
/// tokens in the segment, or [`NEUTRAL_SCORE`] if it holds none.
pub fn oracle_prm<R: Rng + ?Sized>(
    task: &ChainSumTask,
    generated: &[u32],
    segment: (usize, usize),
    cfg: &OracleConfig,
    rng: &mut R,
) -> f64 {
    let labels = step_labels(task, generated);
    score_from_labels(&labels, segment, cfg, rng)
}

/// Scores every segment of a completion, sharing one label pass.
pub fn oracle_scores<R: Rng + ?Sized>(
    task: &ChainSumTask,
    generated: &[u32],
    segments: &[(usize, usize)],
    cfg: &OracleConfig,
    rng: &mut R,
) -> Vec<f64> {
    let labels = step_labels(task, generated);
    segments
        .iter()
        .map(|&seg| score_from_labels(&labels, seg, cfg, rng))
        .collect()
}

fn score_from_labels<R: Rng + ?Sized>(
    labels: &[Option<bool>],
    (start, end): (usize, usize),
    cfg: &OracleConfig,
    rng: &mut R,
) -> f64 {
    let end = end.min(labels.len());
    let (mut steps, mut correct) = (0usize, 0usize);
    for l in labels[start.min(end)..end].iter().flatten() {
        steps += 1;
        correct += usize::from(*l);
    }
    let mut score = if steps == 0 {
        NEUTRAL_SCORE
    } else {
        correct as f64 / steps as f64
    };
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("finite std");
        score = (score + noise.sample(rng)).clamp(0.0, 1.0);
    }
    if cfg.hard_prefix && 3 * end <= labels.len() {
        score *= HARD_PREFIX_FACTOR;
    }
    score
}
