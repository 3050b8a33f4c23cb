//! Domain types shared by segmentation, advantage fusion, the policy and the trainer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// One sampled token sequence.
///
/// Positions `[0, gen_start)` hold the prompt; only `[gen_start, len)` is
/// segmented and receives advantages. `dists` may be absent for offline
/// records that only carry entropies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: String,
    pub tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dists: Option<Vec<Vec<f64>>>,
    pub entropies: Vec<f64>,
    pub outcome_reward: f64,
    pub gen_start: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of generated tokens.
    pub fn gen_len(&self) -> usize {
        self.tokens.len().saturating_sub(self.gen_start)
    }

    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.gen_start.min(self.tokens.len())..]
    }

    pub fn validate(&self) -> Result<()> {
        validate_trajectory(self)
    }
}

/// Checks the structural invariants of a [`Trajectory`].
pub fn validate_trajectory(t: &Trajectory) -> Result<()> {
    let n = t.tokens.len();
    if t.entropies.len() != n {
        return Err(Error::LengthMismatch {
            field: "entropies",
            expected: n,
            found: t.entropies.len(),
        });
    }
    if let Some(dists) = &t.dists {
        if dists.len() != n {
            return Err(Error::LengthMismatch {
                field: "dists",
                expected: n,
                found: dists.len(),
            });
        }
        for (index, d) in dists.iter().enumerate() {
            if d.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::NonNormalizedDistribution {
                    index,
                    sum: d.iter().sum(),
                });
            }
            let sum: f64 = d.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::NonNormalizedDistribution { index, sum });
            }
        }
    }
    for (index, &e) in t.entropies.iter().enumerate() {
        if !e.is_finite() {
            return Err(Error::NonFinite { index });
        }
        if e < 0.0 {
            return Err(Error::NegativeEntropy { index, value: e });
        }
    }
    if t.gen_start > n {
        return Err(Error::LengthMismatch {
            field: "gen_start",
            expected: n,
            found: t.gen_start,
        });
    }
    Ok(())
}

/// Ordered, contiguous, non-empty half-open ranges tiling a generated span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct SegmentSet {
    ranges: Vec<(usize, usize)>,
}

impl SegmentSet {
    /// Validates that `ranges` tile some span contiguously.
    pub fn new(ranges: Vec<(usize, usize)>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::InvalidSegments("no ranges".into()));
        }
        for (i, &(s, e)) in ranges.iter().enumerate() {
            if e <= s {
                return Err(Error::InvalidSegments(format!(
                    "range {i} = [{s}, {e}) is empty"
                )));
            }
            if i > 0 && ranges[i - 1].1 != s {
                return Err(Error::InvalidSegments(format!(
                    "range {i} starts at {s}, previous ends at {}",
                    ranges[i - 1].1
                )));
            }
        }
        Ok(Self { ranges })
    }

    /// A single range covering `[start, end)`.
    pub fn whole(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::EmptySpan { start, end });
        }
        Ok(Self {
            ranges: vec![(start, end)],
        })
    }

    /// Builds the tiling of `[start, end)` induced by a list of cut points.
    ///
    /// Cuts outside `(start, end)` and duplicates are ignored.
    pub fn from_cuts(start: usize, end: usize, cuts: &[usize]) -> Result<Self> {
        if start >= end {
            return Err(Error::EmptySpan { start, end });
        }
        let mut sorted: Vec<usize> = cuts
            .iter()
            .copied()
            .filter(|&c| c > start && c < end)
            .collect();
        sorted.sort_unstable();
        sorted.dedup();
        let mut ranges = Vec::with_capacity(sorted.len() + 1);
        let mut prev = start;
        for c in sorted {
            ranges.push((prev, c));
            prev = c;
        }
        ranges.push((prev, end));
        Ok(Self { ranges })
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn start(&self) -> usize {
        self.ranges[0].0
    }

    pub fn end(&self) -> usize {
        self.ranges[self.ranges.len() - 1].1
    }

    /// Interior cut positions (every range start except the first).
    pub fn cuts(&self) -> Vec<usize> {
        self.ranges.iter().skip(1).map(|r| r.0).collect()
    }

    /// Index of the segment containing absolute position `pos`.
    pub fn segment_of(&self, pos: usize) -> Option<usize> {
        self.ranges.iter().position(|&(s, e)| s <= pos && pos < e)
    }

    /// Checks that this set tiles exactly `[start, end)`.
    pub fn check_span(&self, start: usize, end: usize) -> Result<()> {
        if self.start() != start || self.end() != end {
            return Err(Error::InvalidSegments(format!(
                "segments cover [{}, {}), expected [{start}, {end})",
                self.start(),
                self.end()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<(usize, usize)>> for SegmentSet {
    type Error = Error;

    fn try_from(ranges: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(ranges)
    }
}

impl From<SegmentSet> for Vec<(usize, usize)> {
    fn from(s: SegmentSet) -> Self {
        s.ranges
    }
}

/// N trajectories sampled for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub group_id: String,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutGroup {
    pub fn outcomes(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.outcome_reward).collect()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Per-token advantages over a trajectory's generated span.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdvantageVector(Vec<f64>);

impl AdvantageVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self(vec![value; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Checks alignment with a trajectory's generated span.
    pub fn check_aligned(&self, t: &Trajectory) -> Result<()> {
        if self.0.len() != t.gen_len() {
            return Err(Error::MisalignedAdvantage {
                expected: t.gen_len(),
                found: self.0.len(),
            });
        }
        Ok(())
    }
}

/// How segment scores are standardized before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Fixed prior of the scorer's output distribution.
    #[default]
    Predefined,
    /// Sample statistics of every segment score in the rollout group.
    Relative,
}

/// Hyperparameters for segmentation and advantage fusion.
///
/// Defaults follow the reference training setup: five spikes at least ten
/// tokens apart, a uniform prior on `[0, 1]` (mean 0.5, std 0.289), clip ratio
/// 0.2, KL coefficient 0.001, length penalty above 1024 tokens and a PURE
/// assignment temperature of 0.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub k_spikes: usize,
    pub min_gap: usize,
    pub prior_mean: f64,
    pub prior_std: f64,
    pub grpo_eps: f64,
    pub clip_ratio: f64,
    pub kl_coeff: f64,
    pub length_threshold: usize,
    /// Softmin temperature for PURE credit; `0` selects the hard minimum.
    pub pure_temperature: f64,
    pub prior_mode: PriorMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            k_spikes: 5,
            min_gap: 10,
            prior_mean: 0.5,
            prior_std: 0.289,
            grpo_eps: 1e-6,
            clip_ratio: 0.2,
            kl_coeff: 0.001,
            length_threshold: 1024,
            pure_temperature: 0.1,
            prior_mode: PriorMode::Predefined,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior_std > 0.0) {
            return Err(Error::InvalidConfig("prior_std must be > 0".into()));
        }
        if self.min_gap < 1 {
            return Err(Error::InvalidConfig("min_gap must be >= 1".into()));
        }
        if self.k_spikes < 1 {
            return Err(Error::InvalidConfig("k_spikes must be >= 1".into()));
        }
        if !(self.grpo_eps >= 0.0) {
            return Err(Error::InvalidConfig("grpo_eps must be >= 0".into()));
        }
        if !(self.pure_temperature >= 0.0) {
            return Err(Error::InvalidConfig("pure_temperature must be >= 0".into()));
        }
        if self.length_threshold == 0 {
            return Err(Error::InvalidConfig("length_threshold must be > 0".into()));
        }
        Ok(())
    }
}
