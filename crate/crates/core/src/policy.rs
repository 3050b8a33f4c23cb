//! Autoregressive log-linear softmax policy with exact gradients.
//!
//! Logits for the next token are `W^T phi(prefix)`, where `phi` is a fixed
//! sparse binary feature map of the prefix. Because features are binary, the
//! gradient of `log pi(x | prefix)` with respect to row `f` of `W` is
//! `e_x - pi` for every active feature `f`, and zero elsewhere.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, ChainSumTask, ANS, EOS};
use crate::error::{Error, Result};
use crate::segment::token_entropy;
use crate::types::{AdvantageVector, Trajectory};

/// Fixed context encoders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// Bias plus one-hot encodings of the last `context` generated tokens.
    LastTokens {
        vocab: usize,
        context: usize,
        eos: Option<u32>,
    },
    /// [`FeatureMap::LastTokens`] over the ChainSum vocabulary, plus the
    /// solver phase read off the prompt (next digit to add, or the
    /// answer/stop stages) and its conjunction with the latest running sum.
    ChainSum { context: usize },
}

/// Number of ChainSum phases: pending digit 0-9, all consumed, answer, done.
const PHASES: usize = 13;
const PHASE_NONE: usize = 10;
const PHASE_ANSWER: usize = 11;
const PHASE_DONE: usize = 12;

impl FeatureMap {
    pub fn chain_sum() -> Self {
        FeatureMap::ChainSum { context: 3 }
    }

    pub fn vocab(&self) -> usize {
        match self {
            FeatureMap::LastTokens { vocab, .. } => *vocab,
            FeatureMap::ChainSum { .. } => env::VOCAB,
        }
    }

    pub fn eos(&self) -> Option<u32> {
        match self {
            FeatureMap::LastTokens { eos, .. } => *eos,
            FeatureMap::ChainSum { .. } => Some(EOS),
        }
    }

    fn context(&self) -> usize {
        match self {
            FeatureMap::LastTokens { context, .. } | FeatureMap::ChainSum { context } => *context,
        }
    }

    fn lag_block(&self) -> usize {
        1 + self.context() * (self.vocab() + 1)
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::LastTokens { .. } => self.lag_block(),
            FeatureMap::ChainSum { .. } => self.lag_block() + PHASES + 10 * PHASES,
        }
    }

    /// Index of the one-hot feature "token `tok` at lag `lag`" (lag >= 1).
    pub fn lag_feature(&self, lag: usize, tok: Option<u32>) -> usize {
        let v = self.vocab();
        1 + (lag - 1) * (v + 1) + tok.map_or(v, |t| t as usize)
    }

    pub fn phase_feature(&self, phase: usize) -> usize {
        self.lag_block() + phase
    }

    pub fn conj_feature(&self, running: u32, phase: usize) -> usize {
        self.lag_block() + PHASES + running as usize * PHASES + phase
    }

    /// Active features for predicting the token at `tokens.len()`, where
    /// `tokens[..gen_start]` is the prompt.
    pub fn active(&self, tokens: &[u32], gen_start: usize, out: &mut Vec<usize>) {
        out.clear();
        out.push(0);
        let generated = &tokens[gen_start.min(tokens.len())..];
        for lag in 1..=self.context() {
            let tok = generated.len().checked_sub(lag).map(|i| generated[i]);
            out.push(self.lag_feature(lag, tok));
        }
        if let FeatureMap::ChainSum { .. } = self {
            let (phase, running) = chain_sum_state(&tokens[..gen_start.min(tokens.len())], generated);
            out.push(self.phase_feature(phase));
            out.push(self.conj_feature(running, phase));
        }
    }
}

/// Solver phase and latest running sum for a ChainSum prefix.
fn chain_sum_state(prompt: &[u32], generated: &[u32]) -> (usize, u32) {
    let mut steps = 0usize;
    let mut running = 0u32;
    let mut after_ans: Option<usize> = None;
    for &tok in generated {
        if let Some(n) = after_ans.as_mut() {
            *n += 1;
        } else if tok == ANS {
            after_ans = Some(0);
        } else if env::is_digit(tok) {
            steps += 1;
            running = tok;
        }
    }
    let phase = match after_ans {
        Some(0) => PHASE_ANSWER,
        Some(_) => PHASE_DONE,
        None if steps < prompt.len() => prompt[steps] as usize,
        None => PHASE_NONE,
    };
    (phase, running)
}

/// Weights of a [`FeatureMap`]-based policy, row-major `dim x vocab`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub map: FeatureMap,
    pub weights: Vec<f64>,
}

/// Decoding rule for sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, top_p: f64 },
}

impl Decoding {
    pub const ANCESTRAL: Decoding = Decoding::Sample {
        temperature: 1.0,
        top_p: 1.0,
    };
}

/// Hand-set starting point for ChainSum that already follows the output
/// format and adds correctly with moderate confidence, the way a supervised
/// warm start would.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmStart {
    /// Logit margin for format tokens.
    pub format: f64,
    /// Mean logit of the correct running sum.
    pub skill: f64,
    /// Per-(sum, digit) skill is drawn from `skill +- spread`.
    pub spread: f64,
    /// Logit of the off-by-one running sum, a systematic mistake that the
    /// warm start makes when it outweighs the skill.
    pub distractor: f64,
    /// Logit of `ANS` right after a step, i.e. of answering before all
    /// digits are consumed.
    pub shortcut: f64,
    /// Logit of copying the last sum as the answer.
    pub answer: f64,
    /// Bias logit of `EOS`.
    pub eos: f64,
    pub seed: u64,
}

impl Default for WarmStart {
    fn default() -> Self {
        Self {
            format: 4.0,
            skill: 4.5,
            spread: 1.5,
            distractor: 2.5,
            shortcut: -2.0,
            answer: 5.0,
            eos: -3.0,
            seed: 0,
        }
    }
}

impl PolicyParams {
    pub fn zeros(map: FeatureMap) -> Self {
        let n = map.dim() * map.vocab();
        Self {
            map,
            weights: vec![0.0; n],
        }
    }

    /// Weights drawn i.i.d. from `N(0, scale^2)`.
    pub fn random<R: Rng + ?Sized>(map: FeatureMap, scale: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, scale).expect("finite scale");
        let n = map.dim() * map.vocab();
        Self {
            map,
            weights: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn warm_start(cfg: &WarmStart) -> Self {
        let map = FeatureMap::chain_sum();
        let mut p = Self::zeros(map.clone());
        let f = cfg.format;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        p.set(0, EOS, cfg.eos);
        for d in 0..10u32 {
            // after a digit: separator, not another digit
            let row = map.lag_feature(1, Some(d));
            p.set(row, env::SEP, f);
            p.set(row, ANS, cfg.shortcut);
            for t in 0..10 {
                p.set(row, t, -2.0 * f);
            }
        }
        for tok in [None, Some(env::SEP), Some(ANS)] {
            let row = map.lag_feature(1, tok);
            p.set(row, env::SEP, -f);
            p.set(row, ANS, -f);
            if tok == Some(ANS) {
                p.set(row, EOS, -f);
            }
        }
        p.set(map.phase_feature(PHASE_NONE), ANS, 2.0 * f);
        p.set(map.phase_feature(PHASE_DONE), EOS, 3.0 * f);
        for r in 0..10u32 {
            for d in 0..10u32 {
                let s = cfg.skill + cfg.spread * (2.0 * rng.random::<f64>() - 1.0);
                p.set(map.conj_feature(r, d as usize), (r + d) % 10, s);
                p.set(map.conj_feature(r, d as usize), (r + d + 1) % 10, cfg.distractor);
            }
            p.set(map.conj_feature(r, PHASE_ANSWER), r, cfg.answer);
        }
        p
    }

    pub fn vocab(&self) -> usize {
        self.map.vocab()
    }

    pub fn get(&self, row: usize, tok: u32) -> f64 {
        self.weights[row * self.vocab() + tok as usize]
    }

    pub fn set(&mut self, row: usize, tok: u32, value: f64) {
        let v = self.vocab();
        self.weights[row * v + tok as usize] = value;
    }

    fn logits_into(&self, feats: &[usize], logits: &mut [f64]) {
        let v = self.vocab();
        logits.iter_mut().for_each(|l| *l = 0.0);
        for &f in feats {
            let row = &self.weights[f * v..(f + 1) * v];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += w;
            }
        }
    }

    /// Next-token distribution after `tokens` (prompt is `tokens[..gen_start]`).
    pub fn step_dist(&self, tokens: &[u32], gen_start: usize) -> Vec<f64> {
        let mut feats = Vec::new();
        self.map.active(tokens, gen_start, &mut feats);
        let mut p = vec![0.0; self.vocab()];
        self.logits_into(&feats, &mut p);
        softmax_in_place(&mut p);
        p
    }

    /// Samples a completion of `prompt` of at most `max_len` generated tokens.
    ///
    /// Prompt positions carry a one-hot distribution on the prompt token.
    /// Recorded distributions are the untempered policy distributions.
    pub fn sample_trajectory<R: Rng + ?Sized>(
        &self,
        prompt_id: &str,
        prompt: &[u32],
        max_len: usize,
        decoding: Decoding,
        rng: &mut R,
    ) -> Trajectory {
        let v = self.vocab();
        let gen_start = prompt.len();
        let mut tokens = prompt.to_vec();
        let mut dists: Vec<Vec<f64>> = prompt
            .iter()
            .map(|&t| {
                let mut d = vec![0.0; v];
                d[t as usize] = 1.0;
                d
            })
            .collect();
        let mut entropies = vec![0.0; gen_start];
        let eos = self.map.eos();
        while tokens.len() - gen_start < max_len {
            let p = self.step_dist(&tokens, gen_start);
            let tok = pick(&p, decoding, rng);
            entropies.push(token_entropy(&p).unwrap_or(0.0));
            dists.push(p);
            tokens.push(tok);
            if Some(tok) == eos {
                break;
            }
        }
        Trajectory {
            prompt_id: prompt_id.to_string(),
            tokens,
            dists: Some(dists),
            entropies,
            outcome_reward: 0.0,
            gen_start,
        }
    }

    /// Convenience wrapper for a ChainSum task; fills in the outcome reward.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        task: &ChainSumTask,
        max_len: usize,
        decoding: Decoding,
        rng: &mut R,
    ) -> Trajectory {
        let mut t = self.sample_trajectory(&task.id(), task.prompt(), max_len, decoding, rng);
        t.outcome_reward = env::outcome_reward(task, t.generated());
        t
    }

    /// Per generated position: active features and policy distribution.
    fn positions(&self, t: &Trajectory) -> Vec<(Vec<usize>, Vec<f64>)> {
        (t.gen_start..t.tokens.len())
            .map(|pos| {
                let mut feats = Vec::new();
                self.map.active(&t.tokens[..pos], t.gen_start, &mut feats);
                let mut p = vec![0.0; self.vocab()];
                self.logits_into(&feats, &mut p);
                softmax_in_place(&mut p);
                (feats, p)
            })
            .collect()
    }

    /// `log pi(x_t | x_<t)` for each generated position.
    pub fn log_probs(&self, t: &Trajectory) -> Vec<f64> {
        self.positions(t)
            .into_iter()
            .zip(t.generated())
            .map(|((_, p), &x)| p[x as usize].ln())
            .collect()
    }

    /// `sum_t w_t grad log pi(x_t | x_<t)` over generated positions.
    pub fn grad_log_prob_weighted(&self, t: &Trajectory, weights: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.weights.len()];
        for (((feats, p), &x), &w) in self.positions(t).iter().zip(t.generated()).zip(weights) {
            if w != 0.0 {
                accumulate_score(&mut g, feats, p, x, w, self.vocab());
            }
        }
        g
    }

    /// `||grad log pi(x_t | x_<t)||^2` for each generated position.
    pub fn grad_sq_norms(&self, t: &Trajectory) -> Vec<f64> {
        self.positions(t)
            .iter()
            .zip(t.generated())
            .map(|((feats, p), &x)| {
                let row: f64 = p
                    .iter()
                    .enumerate()
                    .map(|(v, &pv)| {
                        let d = f64::from(u8::from(v as u32 == x)) - pv;
                        d * d
                    })
                    .sum();
                row * multiplicity_sq(feats)
            })
            .collect()
    }

    /// Adds `step * direction` to the weights.
    pub fn step(&mut self, direction: &[f64], step: f64) {
        for (w, d) in self.weights.iter_mut().zip(direction) {
            *w += step * d;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

/// `sum_f m_f^2` over the multiplicities `m_f` of the active features.
fn multiplicity_sq(feats: &[usize]) -> f64 {
    let mut f = feats.to_vec();
    f.sort_unstable();
    f.chunk_by(|a, b| a == b)
        .map(|run| (run.len() * run.len()) as f64)
        .sum()
}

/// `g[f, :] += w * (e_x - p)` for every active feature `f`.
fn accumulate_score(g: &mut [f64], feats: &[usize], p: &[f64], x: u32, w: f64, v: usize) {
    for &f in feats {
        let row = &mut g[f * v..(f + 1) * v];
        for (gv, pv) in row.iter_mut().zip(p) {
            *gv -= w * pv;
        }
        row[x as usize] += w;
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

fn pick<R: Rng + ?Sized>(p: &[f64], decoding: Decoding, rng: &mut R) -> u32 {
    match decoding {
        Decoding::Greedy => argmax(p),
        Decoding::Sample { temperature, top_p } => {
            if temperature <= 0.0 {
                return argmax(p);
            }
            let mut q: Vec<(usize, f64)> = p
                .iter()
                .enumerate()
                .map(|(i, &pi)| (i, if pi > 0.0 { pi.ln() / temperature } else { f64::NEG_INFINITY }))
                .collect();
            let max = q.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in q.iter_mut() {
                x.1 = (x.1 - max).exp();
                total += x.1;
            }
            for x in q.iter_mut() {
                x.1 /= total;
            }
            if top_p < 1.0 {
                q.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let mut cum = 0.0;
                let mut keep = q.len();
                for (i, x) in q.iter().enumerate() {
                    cum += x.1;
                    if cum >= top_p {
                        keep = i + 1;
                        break;
                    }
                }
                q.truncate(keep);
                let total: f64 = q.iter().map(|x| x.1).sum();
                for x in q.iter_mut() {
                    x.1 /= total;
                }
            }
            let u: f64 = rng.random();
            let mut cum = 0.0;
            for &(i, pi) in &q {
                cum += pi;
                if u < cum {
                    return i as u32;
                }
            }
            q.last().map_or(0, |x| x.0 as u32)
        }
    }
}

fn argmax(p: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best as u32
}

/// Objective value and gradient with respect to the policy weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `(1/T) sum_t AF_t log(pi(x_t) / pi_ref(x_t))` over the generated span, and
/// its exact gradient.
pub fn grad_weighted_logratio(
    params: &PolicyParams,
    reference: &PolicyParams,
    t: &Trajectory,
    adv: &AdvantageVector,
) -> Result<ValueGrad> {
    adv.check_aligned(t)?;
    let n = t.gen_len();
    if n == 0 {
        return Ok(ValueGrad {
            value: 0.0,
            grad: vec![0.0; params.weights.len()],
        });
    }
    let scale = 1.0 / n as f64;
    let ref_lp = reference.log_probs(t);
    let mut grad = vec![0.0; params.weights.len()];
    let mut value = 0.0;
    for ((((feats, p), &x), &a), lq) in params
        .positions(t)
        .iter()
        .zip(t.generated())
        .zip(adv.values())
        .zip(&ref_lp)
    {
        value += a * (p[x as usize].ln() - lq);
        if a != 0.0 {
            accumulate_score(&mut grad, feats, p, x, a * scale, params.vocab());
        }
    }
    Ok(ValueGrad {
        value: value * scale,
        grad,
    })
}

/// PPO-style clipped surrogate `(1/T) sum_t min(r_t A_t, clip(r_t) A_t)` with
/// `r_t = pi(x_t) / pi_old(x_t)`; `old_log_probs` are the sampling-time
/// log-probabilities of the generated tokens.
pub fn clipped_surrogate(
    params: &PolicyParams,
    old_log_probs: &[f64],
    t: &Trajectory,
    adv: &AdvantageVector,
    clip: f64,
) -> Result<ValueGrad> {
    adv.check_aligned(t)?;
    if old_log_probs.len() != t.gen_len() {
        return Err(Error::MisalignedAdvantage {
            expected: t.gen_len(),
            found: old_log_probs.len(),
        });
    }
    let n = t.gen_len();
    let mut grad = vec![0.0; params.weights.len()];
    if n == 0 {
        return Ok(ValueGrad { value: 0.0, grad });
    }
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    for ((((feats, p), &x), &a), &old) in params
        .positions(t)
        .iter()
        .zip(t.generated())
        .zip(adv.values())
        .zip(old_log_probs)
    {
        let ratio = (p[x as usize].ln() - old).exp();
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
        let (unclipped_term, clipped_term) = (ratio * a, clipped * a);
        value += unclipped_term.min(clipped_term);
        // gradient flows only through the unclipped branch when it is the min
        let active = unclipped_term <= clipped_term;
        if active && a != 0.0 {
            accumulate_score(&mut grad, feats, p, x, a * ratio * scale, params.vocab());
        }
    }
    Ok(ValueGrad {
        value: value * scale,
        grad,
    })
}

/// Mean over generated positions of `KL(pi(.|x_<t) || pi_ref(.|x_<t))`.
pub fn kl_to_ref(params: &PolicyParams, reference: &PolicyParams, t: &Trajectory) -> f64 {
    kl_with_grad(params, reference, t, false).value
}

/// [`kl_to_ref`] and its gradient with respect to `params`.
pub fn kl_grad(params: &PolicyParams, reference: &PolicyParams, t: &Trajectory) -> ValueGrad {
    kl_with_grad(params, reference, t, true)
}

fn kl_with_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    t: &Trajectory,
    with_grad: bool,
) -> ValueGrad {
    let n = t.gen_len();
    let v = params.vocab();
    let mut grad = if with_grad {
        vec![0.0; params.weights.len()]
    } else {
        Vec::new()
    };
    if n == 0 {
        return ValueGrad { value: 0.0, grad };
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let ref_pos = reference.positions(t);
    for ((feats, p), (_, q)) in params.positions(t).iter().zip(&ref_pos) {
        let log_ratio: Vec<f64> = p.iter().zip(q).map(|(a, b)| a.ln() - b.ln()).collect();
        let kl: f64 = p.iter().zip(&log_ratio).map(|(a, lr)| a * lr).sum();
        total += kl;
        if with_grad {
            for &f in feats {
                let row = &mut grad[f * v..(f + 1) * v];
                for ((g, &pk), lr) in row.iter_mut().zip(p).zip(&log_ratio) {
                    *g += scale * pk * (lr - kl);
                }
            }
        }
    }
    ValueGrad {
        value: (total * scale).max(0.0),
        grad,
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PRPOCKPT";
const CHECKPOINT_VERSION: u32 = 1;

impl PolicyParams {
    /// Writes a versioned binary checkpoint: magic, version, feature-map
    /// header, then the flat weight array as little-endian `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let (kind, vocab, context, eos) = match &self.map {
            FeatureMap::LastTokens {
                vocab,
                context,
                eos,
            } => (0u32, *vocab as u32, *context as u32, eos.unwrap_or(u32::MAX)),
            FeatureMap::ChainSum { context } => (1, env::VOCAB as u32, *context as u32, EOS),
        };
        for x in [kind, vocab, context, eos] {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&(self.weights.len() as u64).to_le_bytes())?;
        for x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut u32s = [0u32; 5];
        for x in u32s.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(io)?;
            *x = u32::from_le_bytes(b);
        }
        let [version, kind, vocab, context, eos] = u32s;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let map = match kind {
            0 => FeatureMap::LastTokens {
                vocab: vocab as usize,
                context: context as usize,
                eos: (eos != u32::MAX).then_some(eos),
            },
            1 => FeatureMap::ChainSum {
                context: context as usize,
            },
            k => return Err(Error::Checkpoint(format!("unknown feature map {k}"))),
        };
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(io)?;
        let len = u64::from_le_bytes(b) as usize;
        if len != map.dim() * map.vocab() {
            return Err(Error::Checkpoint(format!(
                "weight count {len} does not match feature map ({} x {})",
                map.dim(),
                map.vocab()
            )));
        }
        let mut weights = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut b).map_err(io)?;
            weights.push(f64::from_le_bytes(b));
        }
        Ok(Self { map, weights })
    }
}
