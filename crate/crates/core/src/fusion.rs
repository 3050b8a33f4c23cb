//! Per-token advantages from segment scores and group outcome rewards.
//!
//! PRPO expands each segment's process score to its tokens, standardizes it
//! with a prior, and shifts the result by the group-centered outcome reward:
//!
//! ```text
//! z_t  = (r_seg(t) - mu_prior) / sigma_prior
//! beta = R - mean_group(R)
//! AF_t = z_t + beta
//! ```
//!
//! GRPO, PRM-Avg and PURE baselines are provided for comparison, along with a
//! process-only variant used to study collapse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AdvantageVector, FusionConfig, PriorMode, RolloutGroup, SegmentSet};

/// Standard deviation below which a relative prior is considered degenerate.
pub const DEGENERATE_STD: f64 = 1e-8;

/// One process score per segment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessScores(pub Vec<f64>);

impl ProcessScores {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> Result<f64> {
        if self.0.is_empty() {
            return Err(Error::EmptyScores);
        }
        Ok(self.0.iter().sum::<f64>() / self.0.len() as f64)
    }
}

impl From<Vec<f64>> for ProcessScores {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Location and scale used to standardize process scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProcessPrior {
    /// Fixed prior; scores must lie in `[0, 1]`.
    Predefined { mean: f64, std: f64 },
    /// Sample statistics of the group's segment scores.
    Relative { mean: f64, std: f64 },
    /// Relative statistics with (near) zero spread; every z is 0.
    Degenerate,
}

impl ProcessPrior {
    pub fn predefined(cfg: &FusionConfig) -> Self {
        ProcessPrior::Predefined {
            mean: cfg.prior_mean,
            std: cfg.prior_std,
        }
    }

    /// Sample mean and (n - 1) standard deviation over every score given.
    pub fn relative<'a>(scores: impl IntoIterator<Item = &'a ProcessScores>) -> Self {
        let all: Vec<f64> = scores
            .into_iter()
            .flat_map(|s| s.0.iter().copied())
            .collect();
        if all.len() < 2 {
            return ProcessPrior::Degenerate;
        }
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        if std < DEGENERATE_STD {
            ProcessPrior::Degenerate
        } else {
            ProcessPrior::Relative { mean, std }
        }
    }

    /// The prior selected by `cfg.prior_mode` for a group.
    pub fn for_group<'a>(
        cfg: &FusionConfig,
        scores: impl IntoIterator<Item = &'a ProcessScores>,
    ) -> Self {
        match cfg.prior_mode {
            PriorMode::Predefined => Self::predefined(cfg),
            PriorMode::Relative => Self::relative(scores),
        }
    }

    fn standardize(&self, index: usize, score: f64) -> Result<f64> {
        match *self {
            ProcessPrior::Predefined { mean, std } => {
                if !(0.0..=1.0).contains(&score) {
                    return Err(Error::ScoreOutOfRange { index, score });
                }
                Ok((score - mean) / std)
            }
            ProcessPrior::Relative { mean, std } => Ok((score - mean) / std),
            ProcessPrior::Degenerate => Ok(0.0),
        }
    }
}

/// Expands segment scores to standardized per-token values over the span
/// covered by `segs`.
pub fn normalize_process(
    scores: &ProcessScores,
    segs: &SegmentSet,
    prior: &ProcessPrior,
) -> Result<AdvantageVector> {
    if scores.len() != segs.len() {
        return Err(Error::ScoreCountMismatch {
            index: 0,
            scores: scores.len(),
            segments: segs.len(),
        });
    }
    let mut z = Vec::with_capacity(segs.end() - segs.start());
    for (i, (&(s, e), &score)) in segs.ranges().iter().zip(&scores.0).enumerate() {
        let v = prior.standardize(i, score)?;
        z.extend(std::iter::repeat_n(v, e - s));
    }
    AdvantageVector::new(z)
}

fn check_group(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::GroupTooSmall { size: n });
    }
    Ok(())
}

/// `beta_j = R_j - mean(R)`; no scale normalization.
pub fn center_rewards(rewards: &[f64]) -> Result<Vec<f64>> {
    check_group(rewards.len())?;
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// Group-centered outcome shift for each trajectory of `group`.
pub fn center_outcome(group: &RolloutGroup) -> Result<Vec<f64>> {
    center_rewards(&group.outcomes())
}

/// `(R_j - mean) / (std + eps)` with the population standard deviation.
pub fn grpo_normalize(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_group(rewards.len())?;
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps)).collect())
}

/// Group-relative GRPO advantage per trajectory (broadcast to tokens by
/// [`compute_advantages`]).
pub fn grpo_advantage(group: &RolloutGroup, eps: f64) -> Result<Vec<f64>> {
    grpo_normalize(&group.outcomes(), eps)
}

/// `AF_t = z_t + beta`.
pub fn fuse(z: &AdvantageVector, beta: f64) -> AdvantageVector {
    AdvantageVector::new(z.values().iter().map(|v| v + beta).collect())
        .expect("finite z and beta")
}

/// Outcome plus the plain mean of the process scores.
pub fn prm_avg_reward(outcome: f64, scores: &ProcessScores) -> Result<f64> {
    Ok(outcome + scores.mean()?)
}

/// Softmin-weighted process credit.
#[derive(Debug, Clone, PartialEq)]
pub struct PureCredit {
    pub weights: Vec<f64>,
    /// `sum_i w_i s_i`; tends to `min(s)` as the temperature goes to 0.
    pub credit: f64,
}

/// Min-form credit: softmin weights at `temperature`, or a hard minimum
/// (first minimal segment) when `temperature == 0`.
pub fn pure_credit(scores: &ProcessScores, temperature: f64) -> Result<PureCredit> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(temperature >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "PURE temperature must be >= 0, got {temperature}"
        )));
    }
    let s = scores.as_slice();
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = if temperature == 0.0 {
        let at = s.iter().position(|&v| v == min).unwrap_or(0);
        (0..s.len()).map(|i| if i == at { 1.0 } else { 0.0 }).collect()
    } else {
        let raw: Vec<f64> = s.iter().map(|v| (-(v - min) / temperature).exp()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    };
    let credit = weights.iter().zip(s).map(|(w, v)| w * v).sum();
    Ok(PureCredit { weights, credit })
}

/// Zero up to `threshold` tokens, `length / threshold` beyond it.
pub fn length_penalty(length: usize, threshold: usize) -> f64 {
    if length <= threshold {
        0.0
    } else {
        length as f64 / threshold as f64
    }
}

/// Advantage estimators supported by the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Grpo,
    PrmAvg,
    Pure,
    Prpo,
    PrmAvgPrpo,
    ProcessOnly,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Grpo,
        Method::PrmAvg,
        Method::Pure,
        Method::Prpo,
        Method::PrmAvgPrpo,
        Method::ProcessOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Grpo => "grpo",
            Method::PrmAvg => "prm-avg",
            Method::Pure => "pure",
            Method::Prpo => "prpo",
            Method::PrmAvgPrpo => "prm-avg-prpo",
            Method::ProcessOnly => "process-only",
        }
    }

    pub fn needs_process_scores(self) -> bool {
        !matches!(self, Method::Grpo)
    }

    /// Whether the outcome reward gets the length penalty subtracted.
    pub fn uses_length_penalty(self) -> bool {
        !matches!(self, Method::Pure)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm || m.name().replace('-', "") == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// One trajectory's inputs to advantage computation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRollout {
    /// Outcome reward, already net of any length penalty.
    pub outcome: f64,
    /// Segmentation of the generated span.
    pub segments: SegmentSet,
    pub scores: Option<ProcessScores>,
}

impl ScoredRollout {
    fn span_len(&self) -> usize {
        self.segments.end() - self.segments.start()
    }
}

/// Process and outcome parts of a fused advantage.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedAdvantage {
    pub z: AdvantageVector,
    pub beta: f64,
    pub af: AdvantageVector,
}

fn scores_of(group: &[ScoredRollout]) -> Result<Vec<&ProcessScores>> {
    group
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let s = r.scores.as_ref().ok_or(Error::MissingProcessScores { index })?;
            if s.len() != r.segments.len() {
                return Err(Error::ScoreCountMismatch {
                    index,
                    scores: s.len(),
                    segments: r.segments.len(),
                });
            }
            Ok(s)
        })
        .collect()
}

fn process_z(group: &[ScoredRollout], cfg: &FusionConfig) -> Result<Vec<AdvantageVector>> {
    let scores = scores_of(group)?;
    let prior = ProcessPrior::for_group(cfg, scores.iter().copied());
    group
        .iter()
        .zip(&scores)
        .enumerate()
        .map(|(index, (r, s))| {
            normalize_process(s, &r.segments, &prior).map_err(|e| match e {
                Error::ScoreCountMismatch {
                    scores, segments, ..
                } => Error::ScoreCountMismatch {
                    index,
                    scores,
                    segments,
                },
                other => other,
            })
        })
        .collect()
}

/// z, beta and AF for the fused-advantage family (PRPO, PRM-Avg+PRPO and
/// process-only, whose beta is 0).
pub fn fused_components(
    group: &[ScoredRollout],
    method: Method,
    cfg: &FusionConfig,
) -> Result<Vec<FusedAdvantage>> {
    check_group(group.len())?;
    let z = process_z(group, cfg)?;
    let betas = match method {
        Method::Prpo => center_rewards(&group.iter().map(|r| r.outcome).collect::<Vec<_>>())?,
        Method::PrmAvgPrpo => {
            let scores = scores_of(group)?;
            let rewards = group
                .iter()
                .zip(scores)
                .map(|(r, s)| prm_avg_reward(r.outcome, s))
                .collect::<Result<Vec<_>>>()?;
            center_rewards(&rewards)?
        }
        Method::ProcessOnly => vec![0.0; group.len()],
        other => {
            return Err(Error::InvalidConfig(format!(
                "`{other}` has no process/outcome decomposition"
            )))
        }
    };
    Ok(z
        .into_iter()
        .zip(betas)
        .map(|(z, beta)| FusedAdvantage {
            af: fuse(&z, beta),
            z,
            beta,
        })
        .collect())
}

/// Per-token advantages for every trajectory of a group.
pub fn compute_advantages(
    group: &[ScoredRollout],
    method: Method,
    cfg: &FusionConfig,
) -> Result<Vec<AdvantageVector>> {
    check_group(group.len())?;
    match method {
        Method::Grpo => {
            let rewards: Vec<f64> = group.iter().map(|r| r.outcome).collect();
            let adv = grpo_normalize(&rewards, cfg.grpo_eps)?;
            Ok(group
                .iter()
                .zip(adv)
                .map(|(r, a)| AdvantageVector::filled(r.span_len(), a))
                .collect())
        }
        Method::PrmAvg => {
            let scores = scores_of(group)?;
            let rewards = group
                .iter()
                .zip(scores)
                .map(|(r, s)| prm_avg_reward(r.outcome, s))
                .collect::<Result<Vec<_>>>()?;
            let adv = grpo_normalize(&rewards, cfg.grpo_eps)?;
            Ok(group
                .iter()
                .zip(adv)
                .map(|(r, a)| AdvantageVector::filled(r.span_len(), a))
                .collect())
        }
        Method::Pure => pure_advantages(group, cfg),
        Method::Prpo | Method::PrmAvgPrpo | Method::ProcessOnly => {
            Ok(fused_components(group, method, cfg)?
                .into_iter()
                .map(|f| f.af)
                .collect())
        }
    }
}

/// PURE baseline: softmin-transformed segment rewards accumulated as a
/// return-to-go, plus a 0/1 outcome, minus the group mean of the initial
/// returns.
fn pure_advantages(group: &[ScoredRollout], cfg: &FusionConfig) -> Result<Vec<AdvantageVector>> {
    let scores = scores_of(group)?;
    let mut returns: Vec<Vec<f64>> = Vec::with_capacity(group.len());
    for (r, s) in group.iter().zip(scores) {
        let credit = pure_credit(s, cfg.pure_temperature)?;
        let outcome01 = if r.outcome > 0.0 { 1.0 } else { 0.0 };
        // return-to-go per segment
        let mut seg_returns = vec![0.0; s.len()];
        let mut acc = outcome01;
        for i in (0..s.len()).rev() {
            acc += credit.weights[i] * s.as_slice()[i];
            seg_returns[i] = acc;
        }
        let mut per_token = Vec::with_capacity(r.span_len());
        for (&(a, b), g) in r.segments.ranges().iter().zip(&seg_returns) {
            per_token.extend(std::iter::repeat_n(*g, b - a));
        }
        returns.push(per_token);
    }
    let baseline = returns.iter().map(|g| g[0]).sum::<f64>() / group.len() as f64;
    returns
        .into_iter()
        .map(|g| AdvantageVector::new(g.into_iter().map(|v| v - baseline).collect()))
        .collect()
}
