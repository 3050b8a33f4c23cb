//! Process-relative policy optimization on a toy reasoning task.
//!
//! The crate splits generated token sequences at entropy spikes, turns
//! per-segment process scores and group outcome rewards into per-token
//! advantages, and trains a small autoregressive softmax policy with exact
//! gradients so that the resulting dynamics can be checked directly.
//!
//! ```
//! use prpo_core::{segment, FusionConfig};
//!
//! let mut e = vec![0.0; 40];
//! e[5] = 3.0;
//! e[17] = 2.0;
//! e[29] = 1.0;
//! let segs = segment(&e, 0, 40, 3, 10).unwrap();
//! assert_eq!(segs.ranges(), &[(0, 17), (17, 29), (29, 40)]);
//! assert_eq!(FusionConfig::default().k_spikes, 5);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collapse;
pub mod env;
pub mod error;
pub mod fusion;
pub mod policy;
pub mod segment;
pub mod trainer;
pub mod types;

pub use collapse::{
    detect_collapse, estimate_delta_p, verify_delta_p_empirically, CollapseReport, DeltaPCheck,
    DeltaSign,
};
pub use env::{ChainSumTask, OracleConfig, TaskConfig};
pub use error::{Error, Result};
pub use fusion::{
    center_outcome, center_rewards, compute_advantages, fuse, fused_components, grpo_advantage,
    grpo_normalize, length_penalty, normalize_process, prm_avg_reward, pure_credit,
    FusedAdvantage, Method, ProcessPrior, ProcessScores, PureCredit, ScoredRollout,
};
pub use policy::{
    clipped_surrogate, grad_weighted_logratio, kl_grad, kl_to_ref, Decoding, FeatureMap,
    PolicyParams, ValueGrad, WarmStart,
};
pub use segment::{segment, segment_random, segment_uniform, token_entropy, SplitStrategy};
pub use trainer::{
    early_stop, eval_accuracy, eval_tasks, EpochMetrics, EvalMode, EvalReport, Optimizer,
    TrainConfig, Trainer,
};
pub use types::{
    validate_trajectory, AdvantageVector, FusionConfig, PriorMode, RolloutGroup, SegmentSet,
    Trajectory,
};
