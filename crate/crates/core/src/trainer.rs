//! Rollout, scoring and update loop on the ChainSum task.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collapse::has_collapse;
use crate::env::{self, ChainSumTask, OracleConfig, TaskConfig};
use crate::error::{Error, Result};
use crate::fusion::{compute_advantages, length_penalty, Method, ProcessScores, ScoredRollout};
use crate::policy::{clipped_surrogate, kl_grad, Decoding, PolicyParams, WarmStart};
use crate::segment::{segment, segment_random, segment_uniform, SplitStrategy};
use crate::types::{AdvantageVector, FusionConfig, SegmentSet, Trajectory};

/// Parameter update rule. Updates ascend the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}


impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    /// Trajectories sampled per prompt.
    pub rollout_n: usize,
    /// Prompts per update.
    pub batch_groups: usize,
    /// Step size. Billion-parameter runs use 1e-6; the toy policy needs a
    /// far larger step.
    pub lr: f64,
    pub kl_coeff: f64,
    pub clip_ratio: f64,
    pub epochs: usize,
    pub updates_per_epoch: usize,
    /// Stop after this many epochs without a new best training accuracy;
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
    /// Maximum generated tokens per rollout.
    pub max_len: usize,
    pub temperature: f64,
    pub split: SplitStrategy,
    pub optimizer: Optimizer,
    pub fusion: FusionConfig,
    pub oracle: OracleConfig,
    pub task: TaskConfig,
    pub warm_start: WarmStart,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Prpo,
            seed: 0,
            rollout_n: 8,
            batch_groups: 16,
            lr: 1e-2,
            kl_coeff: 0.001,
            clip_ratio: 0.2,
            epochs: 10,
            updates_per_epoch: 20,
            early_stop_patience: 3,
            max_len: 32,
            temperature: 1.0,
            split: SplitStrategy::Entropy,
            optimizer: Optimizer::Sgd,
            fusion: FusionConfig::default(),
            oracle: OracleConfig::default(),
            task: TaskConfig::default(),
            warm_start: WarmStart::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.rollout_n < 2 {
            return bad("rollout_n must be >= 2");
        }
        if self.batch_groups < 1 {
            return bad("batch_groups must be >= 1");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and >= 0");
        }
        if !(self.kl_coeff >= 0.0) {
            return bad("kl_coeff must be >= 0");
        }
        if !(self.clip_ratio >= 0.0 && self.clip_ratio < 1.0) {
            return bad("clip_ratio must be in [0, 1)");
        }
        if self.max_len < 1 {
            return bad("max_len must be >= 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        self.fusion.validate()?;
        self.oracle.validate()?;
        self.task.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Fraction of sampled rollouts with a correct answer.
    pub train_accuracy: f64,
    pub mean_gen_length: f64,
    /// Mean token entropy over generated positions.
    pub mean_entropy: f64,
    /// Fraction of rollouts whose advantages meet the collapse condition.
    pub collapse_rate: f64,
    pub loss: f64,
}

/// Statistics of a single update's batch.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub update: usize,
    pub rollouts: usize,
    pub correct: usize,
    pub gen_tokens: usize,
    pub entropy_sum: f64,
    pub collapsed: usize,
    pub loss: f64,
}

impl UpdateStats {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.rollouts as f64
    }

    pub fn mean_gen_length(&self) -> f64 {
        self.gen_tokens as f64 / self.rollouts as f64
    }
}

/// Mixes seed components into one well-spread 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = h.wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

const SEED_TASK: u64 = 1;
const SEED_ROLLOUT: u64 = 2;
const SEED_SPLIT: u64 = 3;
const SEED_ORACLE: u64 = 4;

/// One rollout after scoring.
#[derive(Debug, Clone)]
pub struct ScoredTrajectory {
    pub trajectory: Trajectory,
    pub segments: SegmentSet,
    pub scores: Vec<f64>,
}

/// Segments the generated span with the configured splitter.
pub fn split_trajectory(
    t: &Trajectory,
    strategy: SplitStrategy,
    cfg: &FusionConfig,
    seed: u64,
) -> Result<SegmentSet> {
    let (start, end) = (t.gen_start, t.len());
    match strategy {
        SplitStrategy::Entropy => segment(&t.entropies, start, end, cfg.k_spikes, cfg.min_gap),
        SplitStrategy::Random => segment_random(end, start, cfg.k_spikes, cfg.min_gap, seed),
        SplitStrategy::Uniform => segment_uniform(end, start, cfg.k_spikes),
    }
}

/// Optimizer state plus the live and reference policies.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    steps: u64,
    updates: usize,
    pub history: Vec<EpochMetrics>,
    pub update_history: Vec<UpdateStats>,
}

impl Trainer {
    /// Trainer starting from the configured warm start.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let params = PolicyParams::warm_start(&cfg.warm_start);
        Self::with_params(cfg, params)
    }

    pub fn with_params(cfg: TrainConfig, params: PolicyParams) -> Result<Self> {
        cfg.validate()?;
        if params.map.eos().is_none() || params.vocab() != env::VOCAB {
            return Err(Error::InvalidConfig(
                "policy must use the ChainSum vocabulary".into(),
            ));
        }
        let n = params.weights.len();
        Ok(Self {
            reference: params.clone(),
            params,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            steps: 0,
            updates: 0,
            history: Vec::new(),
            update_history: Vec::new(),
            cfg,
        })
    }

    pub fn epoch(&self) -> usize {
        self.history.len()
    }

    /// Tasks for the given global update index.
    pub fn batch_tasks(&self, update: usize) -> Vec<ChainSumTask> {
        (0..self.cfg.batch_groups)
            .map(|g| {
                let seed = derive_seed(&[self.cfg.seed, SEED_TASK, update as u64, g as u64]);
                env::sample_task_with(&self.cfg.task, seed)
            })
            .collect()
    }

    /// Samples, segments and scores one batch with the current policy.
    pub fn sample_batch(&self, update: usize) -> Result<Vec<(ChainSumTask, Vec<ScoredTrajectory>)>> {
        let cfg = &self.cfg;
        let decoding = Decoding::Sample {
            temperature: cfg.temperature,
            top_p: 1.0,
        };
        self.batch_tasks(update)
            .into_par_iter()
            .enumerate()
            .map(|(g, task)| {
                let group = (0..cfg.rollout_n)
                    .map(|i| {
                        let ids = [cfg.seed, update as u64, g as u64, i as u64];
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[SEED_ROLLOUT, ids[0], ids[1], ids[2], ids[3]]));
                        let t = self.params.rollout(&task, cfg.max_len, decoding, &mut rng);
                        let segments = split_trajectory(
                            &t,
                            cfg.split,
                            &cfg.fusion,
                            derive_seed(&[SEED_SPLIT, ids[0], ids[1], ids[2], ids[3]]),
                        )?;
                        let mut oracle_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                            SEED_ORACLE,
                            ids[0],
                            ids[1],
                            ids[2],
                            ids[3],
                        ]));
                        let relative: Vec<(usize, usize)> = segments
                            .ranges()
                            .iter()
                            .map(|&(s, e)| (s - t.gen_start, e - t.gen_start))
                            .collect();
                        let scores =
                            env::oracle_scores(&task, t.generated(), &relative, &cfg.oracle, &mut oracle_rng);
                        Ok(ScoredTrajectory {
                            trajectory: t,
                            segments,
                            scores,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((task, group))
            })
            .collect()
    }

    /// Advantages for one scored group under the configured method.
    pub fn group_advantages(&self, group: &[ScoredTrajectory]) -> Result<Vec<AdvantageVector>> {
        let cfg = &self.cfg;
        let scored: Vec<ScoredRollout> = group
            .iter()
            .map(|s| {
                let mut outcome = s.trajectory.outcome_reward;
                if cfg.method.uses_length_penalty() {
                    outcome -= length_penalty(s.trajectory.gen_len(), cfg.fusion.length_threshold);
                }
                ScoredRollout {
                    outcome,
                    segments: s.segments.clone(),
                    scores: Some(ProcessScores(s.scores.clone())),
                }
            })
            .collect();
        compute_advantages(&scored, cfg.method, &cfg.fusion)
    }

    /// Samples a batch and applies one update.
    pub fn update(&mut self) -> Result<UpdateStats> {
        let update = self.updates;
        let batch = self.sample_batch(update)?;

        let per_group: Vec<Vec<(Trajectory, AdvantageVector)>> = batch
            .into_par_iter()
            .map(|(_, group)| {
                let adv = self.group_advantages(&group)?;
                Ok(group.into_iter().map(|s| s.trajectory).zip(adv).collect())
            })
            .collect::<Result<_>>()?;
        let items: Vec<(Trajectory, AdvantageVector)> = per_group.into_iter().flatten().collect();

        let (clip, kl_coeff) = (self.cfg.clip_ratio, self.cfg.kl_coeff);
        let per_traj: Vec<(Vec<f64>, f64)> = items
            .par_iter()
            .map(|(t, adv)| {
                let old = self.params.log_probs(t);
                let surrogate = clipped_surrogate(&self.params, &old, t, adv, clip)?;
                let mut grad = surrogate.grad;
                let mut loss = -surrogate.value;
                if kl_coeff > 0.0 {
                    let kl = kl_grad(&self.params, &self.reference, t);
                    for (g, k) in grad.iter_mut().zip(&kl.grad) {
                        *g -= kl_coeff * k;
                    }
                    loss += kl_coeff * kl.value;
                }
                Ok((grad, loss))
            })
            .collect::<Result<_>>()?;

        let n = items.len() as f64;
        let mut grad = vec![0.0; self.params.weights.len()];
        let mut loss = 0.0;
        for (g, l) in &per_traj {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b / n;
            }
            loss += l / n;
        }
        self.apply(&grad);

        let mut stats = UpdateStats {
            update,
            rollouts: items.len(),
            correct: 0,
            gen_tokens: 0,
            entropy_sum: 0.0,
            collapsed: 0,
            loss,
        };
        for (t, adv) in &items {
            stats.correct += usize::from(t.outcome_reward > 0.0);
            stats.gen_tokens += t.gen_len();
            stats.entropy_sum += t.entropies[t.gen_start..].iter().sum::<f64>();
            stats.collapsed += usize::from(has_collapse(adv.values()));
        }
        self.updates += 1;
        self.update_history.push(stats.clone());
        Ok(stats)
    }

    fn apply(&mut self, grad: &[f64]) {
        let lr = self.cfg.lr;
        match self.cfg.optimizer {
            Optimizer::Sgd => self.params.step(grad, lr),
            Optimizer::Adam { beta1, beta2, eps } => {
                self.steps += 1;
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                for (((w, g), m), v) in self
                    .params
                    .weights
                    .iter_mut()
                    .zip(grad)
                    .zip(self.adam_m.iter_mut())
                    .zip(self.adam_v.iter_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w += lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }

    /// Refreshes the reference policy and runs one epoch of updates.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        self.reference = self.params.clone();
        let epoch = self.history.len();
        let mut total = UpdateStats {
            update: 0,
            rollouts: 0,
            correct: 0,
            gen_tokens: 0,
            entropy_sum: 0.0,
            collapsed: 0,
            loss: 0.0,
        };
        let updates = self.cfg.updates_per_epoch;
        for _ in 0..updates {
            let s = self.update()?;
            total.rollouts += s.rollouts;
            total.correct += s.correct;
            total.gen_tokens += s.gen_tokens;
            total.entropy_sum += s.entropy_sum;
            total.collapsed += s.collapsed;
            total.loss += s.loss;
        }
        let frac = |x: usize| {
            if total.rollouts == 0 {
                0.0
            } else {
                x as f64 / total.rollouts as f64
            }
        };
        let metrics = EpochMetrics {
            epoch,
            train_accuracy: frac(total.correct),
            mean_gen_length: frac(total.gen_tokens),
            mean_entropy: if total.gen_tokens == 0 {
                0.0
            } else {
                total.entropy_sum / total.gen_tokens as f64
            },
            collapse_rate: frac(total.collapsed),
            loss: if updates == 0 {
                0.0
            } else {
                total.loss / updates as f64
            },
        };
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    /// Runs up to `cfg.epochs` epochs, stopping early on stagnation, and
    /// calls `on_epoch` after each.
    pub fn train_with<F>(&mut self, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&EpochMetrics, &PolicyParams) -> Result<()>,
    {
        for _ in 0..self.cfg.epochs {
            let m = self.run_epoch()?;
            on_epoch(&m, &self.params)?;
            if early_stop(&self.history, self.cfg.early_stop_patience) {
                break;
            }
        }
        Ok(())
    }

    pub fn train(&mut self) -> Result<Vec<EpochMetrics>> {
        self.train_with(|_, _| Ok(()))?;
        Ok(self.history.clone())
    }
}

/// True when the best training accuracy is at least `patience` epochs old.
/// A patience of 0 never stops.
pub fn early_stop(history: &[EpochMetrics], patience: usize) -> bool {
    if patience == 0 || history.is_empty() {
        return false;
    }
    let mut best = 0;
    for (i, m) in history.iter().enumerate() {
        if m.train_accuracy > history[best].train_accuracy {
            best = i;
        }
    }
    history.len() - 1 - best >= patience
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    Greedy,
    /// `n` samples per task with temperature and nucleus sampling.
    Sampled {
        n: usize,
        temperature: f64,
        top_p: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// Mean accuracy over all samples (`mean@n`; plain accuracy for greedy).
    pub accuracy: f64,
    /// Fraction of tasks with at least one correct sample.
    pub pass_at_n: f64,
}

pub fn eval_accuracy(
    params: &PolicyParams,
    tasks: &[ChainSumTask],
    max_len: usize,
    mode: EvalMode,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::InvalidConfig("no evaluation tasks".into()));
    }
    let per_task: Vec<(usize, usize)> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| match mode {
            EvalMode::Greedy => {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let t = params.rollout(task, max_len, Decoding::Greedy, &mut rng);
                let ok = usize::from(t.outcome_reward > 0.0);
                (ok, 1)
            }
            EvalMode::Sampled {
                n,
                temperature,
                top_p,
                seed,
            } => {
                let decoding = Decoding::Sample { temperature, top_p };
                let correct = (0..n)
                    .filter(|&j| {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64, j as u64]));
                        params.rollout(task, max_len, decoding, &mut rng).outcome_reward > 0.0
                    })
                    .count();
                (correct, n)
            }
        })
        .collect();
    let total: usize = per_task.iter().map(|x| x.1).sum();
    if total == 0 {
        return Err(Error::InvalidConfig("eval requires n >= 1".into()));
    }
    let correct: usize = per_task.iter().map(|x| x.0).sum();
    let passed = per_task.iter().filter(|x| x.0 > 0).count();
    Ok(EvalReport {
        accuracy: correct as f64 / total as f64,
        pass_at_n: passed as f64 / tasks.len() as f64,
    })
}

/// Deterministic held-out tasks, disjoint in seed space from training.
pub fn eval_tasks(cfg: &TaskConfig, count: usize, seed: u64) -> Vec<ChainSumTask> {
    (0..count)
        .map(|i| env::sample_task_with(cfg, derive_seed(&[u64::MAX, seed, i as u64])))
        .collect()
}
