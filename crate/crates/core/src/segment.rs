//! Token entropies and splitting of a generated span into segments.
//!
//! The primary splitter places cuts at entropy spikes: the top-`k` entropy
//! positions, thinned so that kept anchors and cuts are at least `min_gap`
//! tokens apart. Random and uniform splitters exist for ablations.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{SegmentSet, PROB_SUM_TOL};

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn token_entropy(dist: &[f64]) -> Result<f64> {
    if dist.is_empty() {
        return Err(Error::InvalidDistribution {
            reason: "empty vector".into(),
        });
    }
    let mut sum = 0.0;
    let mut h = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::InvalidDistribution {
                reason: format!("entry {i} = {p}"),
            });
        }
        sum += p;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::InvalidDistribution {
            reason: format!("sum = {sum}"),
        });
    }
    Ok(h.max(0.0))
}

/// Which splitter the trainer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    #[default]
    Entropy,
    Random,
    Uniform,
}

impl SplitStrategy {
    pub fn name(self) -> &'static str {
        match self {
            SplitStrategy::Entropy => "entropy",
            SplitStrategy::Random => "random",
            SplitStrategy::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for SplitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "entropy" => Ok(SplitStrategy::Entropy),
            "random" => Ok(SplitStrategy::Random),
            "uniform" => Ok(SplitStrategy::Uniform),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

fn check_span(entropies_len: usize, start: usize, out_len: usize) -> Result<()> {
    if start >= out_len {
        return Err(Error::EmptySpan {
            start,
            end: out_len,
        });
    }
    if entropies_len < out_len {
        return Err(Error::LengthMismatch {
            field: "entropies",
            expected: out_len,
            found: entropies_len,
        });
    }
    Ok(())
}

/// Higher entropy first; equal entropies prefer the lower index.
fn spike_order(entropies: &[f64], a: usize, b: usize) -> Ordering {
    entropies[b].total_cmp(&entropies[a]).then(a.cmp(&b))
}

/// Splits `[start, out_len)` at entropy spikes.
///
/// Spans shorter than `k + 1` tokens come back whole.
pub fn segment(
    entropies: &[f64],
    start: usize,
    out_len: usize,
    k: usize,
    min_gap: usize,
) -> Result<SegmentSet> {
    check_span(entropies.len(), start, out_len)?;
    if out_len - start < k + 1 {
        return SegmentSet::whole(start, out_len);
    }

    let mut anchors: Vec<usize> = (start..out_len).collect();
    if k < anchors.len() {
        anchors.select_nth_unstable_by(k - 1, |&a, &b| spike_order(entropies, a, b));
        anchors.truncate(k);
    }
    anchors.sort_unstable();

    let mut filtered: Vec<usize> = Vec::with_capacity(anchors.len());
    for a in anchors {
        match filtered.last() {
            Some(&kept) if a - kept < min_gap => {}
            _ => filtered.push(a),
        }
    }

    let mut cuts = Vec::with_capacity(filtered.len());
    let mut last_cut = start;
    for a in filtered {
        if a - last_cut >= min_gap {
            cuts.push(a);
            last_cut = a;
        }
    }

    finish(&cuts, start, out_len)
}

/// Turns sorted cut points into segments and applies the bound/gap sanitizer.
fn finish(cuts: &[usize], start: usize, out_len: usize) -> Result<SegmentSet> {
    let mut segments = Vec::with_capacity(cuts.len() + 1);
    let mut prev = start;
    for &c in cuts {
        segments.push((prev, c));
        prev = c;
    }
    segments.push((prev, out_len));

    let sanitized = sanitize(&segments, start, out_len);
    if sanitized.is_empty() {
        SegmentSet::whole(start, out_len)
    } else {
        SegmentSet::new(sanitized)
    }
}

/// Clamps ranges to the span, drops empty ones and fills holes.
fn sanitize(segments: &[(usize, usize)], start: usize, out_len: usize) -> Vec<(usize, usize)> {
    let clamp = |x: usize| x.min(out_len).max(start);
    let mut out = Vec::with_capacity(segments.len() + 1);
    let mut cur = start;
    for &(s, e) in segments {
        let (s, e) = (clamp(s), clamp(e));
        if e <= s {
            continue;
        }
        if s > cur {
            out.push((cur, s));
        }
        out.push((s, e));
        cur = e;
    }
    if cur < out_len {
        out.push((cur, out_len));
    }
    out
}

/// Ablation splitter: up to `k` random cuts, pairwise at least `min_gap` apart.
///
/// Candidates are visited in a seeded random order and accepted greedily, so
/// fewer than `k` cuts come back when the span cannot fit them.
pub fn segment_random(
    length: usize,
    start: usize,
    k: usize,
    min_gap: usize,
    seed: u64,
) -> Result<SegmentSet> {
    if start >= length {
        return Err(Error::EmptySpan { start, end: length });
    }
    if length - start < k + 1 {
        return SegmentSet::whole(start, length);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<usize> = (start + 1..length).collect();
    candidates.shuffle(&mut rng);

    let mut cuts: Vec<usize> = Vec::with_capacity(k);
    for c in candidates {
        if cuts.len() == k {
            break;
        }
        if cuts.iter().all(|&p| c.abs_diff(p) >= min_gap) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    finish(&cuts, start, length)
}

/// Ablation splitter: `k + 1` contiguous near-equal parts, remainder spread
/// over the leading parts.
pub fn segment_uniform(length: usize, start: usize, k: usize) -> Result<SegmentSet> {
    if start >= length {
        return Err(Error::EmptySpan { start, end: length });
    }
    let span = length - start;
    if span < k + 1 {
        return SegmentSet::whole(start, length);
    }
    let parts = k + 1;
    let (base, rem) = (span / parts, span % parts);
    let mut ranges = Vec::with_capacity(parts);
    let mut s = start;
    for i in 0..parts {
        let e = s + base + usize::from(i < rem);
        ranges.push((s, e));
        s = e;
    }
    SegmentSet::new(ranges)
}
