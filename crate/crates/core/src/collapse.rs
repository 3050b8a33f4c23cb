//! Premature-collapse diagnostics for token-level advantages.
//!
//! A position `t*` is a collapse candidate when the advantages before it
//! average to `-a < 0` while `A[t*] = b > 0`. A first-order expansion of one
//! gradient-ascent step on `sum_t A_t log pi(x_t)`, with per-position score
//! vectors treated as orthogonal, gives
//!
//! ```text
//! delta p(x_{0..=t*}) ~ alpha * (-a * t* + b) * C
//! ```
//!
//! with `C` the mean squared score norm, so the prefix becomes less likely
//! whenever `a * t* > b`.

use serde::{Deserialize, Serialize};

use crate::policy::PolicyParams;
use crate::types::{AdvantageVector, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeltaSign {
    Negative,
    NonNegative,
}

impl DeltaSign {
    pub fn of(x: f64) -> Self {
        if x < 0.0 {
            DeltaSign::Negative
        } else {
            DeltaSign::NonNegative
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DeltaSign::Negative => "negative",
            DeltaSign::NonNegative => "non_negative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub t_star: usize,
    /// Magnitude of the (negative) prefix mean.
    pub a: f64,
    pub b: f64,
    pub condition_holds: bool,
    pub delta_p_sign: DeltaSign,
}

/// Every position with a negative prefix mean and a positive advantage.
pub fn detect_collapse(adv: &[f64]) -> Vec<CollapseReport> {
    let mut out = Vec::new();
    let mut prefix = 0.0;
    for (t, &b) in adv.iter().enumerate() {
        if t > 0 {
            let mean = prefix / t as f64;
            if mean < 0.0 && b > 0.0 {
                let a = -mean;
                let holds = a * t as f64 > b;
                out.push(CollapseReport {
                    t_star: t,
                    a,
                    b,
                    condition_holds: holds,
                    delta_p_sign: if holds {
                        DeltaSign::Negative
                    } else {
                        DeltaSign::NonNegative
                    },
                });
            }
        }
        prefix += b;
    }
    out
}

/// True when any position of `adv` meets the collapse condition.
pub fn has_collapse(adv: &[f64]) -> bool {
    detect_collapse(adv).iter().any(|r| r.condition_holds)
}

/// `alpha * (-a * t_star + b) * c`.
pub fn estimate_delta_p(a: f64, t_star: usize, b: f64, alpha: f64, c: f64) -> f64 {
    alpha * (-a * t_star as f64 + b) * c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaPCheck {
    pub t_star: usize,
    pub predicted: f64,
    pub observed: f64,
    pub predicted_sign: DeltaSign,
    pub observed_sign: DeltaSign,
}

impl DeltaPCheck {
    pub fn agrees(&self) -> bool {
        self.predicted_sign == self.observed_sign
    }
}

/// Takes one ascent step of size `alpha` on `sum_t A_t log pi(x_t)` using a
/// copy of `policy` and compares the predicted and observed change of the
/// generated prefix probability up to and including `t*`.
///
/// `t*` is the first reported position meeting the collapse condition, else
/// the first reported position, else the last position.
pub fn verify_delta_p_empirically(
    policy: &PolicyParams,
    trajectory: &Trajectory,
    adv: &AdvantageVector,
    alpha: f64,
) -> crate::Result<DeltaPCheck> {
    adv.check_aligned(trajectory)?;
    let values = adv.values();
    if values.is_empty() {
        return Err(crate::Error::EmptySpan {
            start: trajectory.gen_start,
            end: trajectory.len(),
        });
    }
    let reports = detect_collapse(values);
    let chosen = reports
        .iter()
        .find(|r| r.condition_holds)
        .or_else(|| reports.first())
        .copied();
    let (t_star, a, b) = match chosen {
        Some(r) => (r.t_star, r.a, r.b),
        None => {
            let t = values.len() - 1;
            let mean = values[..t].iter().sum::<f64>() / t.max(1) as f64;
            (t, (-mean).max(0.0), values[t])
        }
    };

    let norms = policy.grad_sq_norms(trajectory);
    let c = norms[..=t_star].iter().sum::<f64>() / (t_star + 1) as f64;
    let predicted = estimate_delta_p(a, t_star, b, alpha, c);

    let grad = policy.grad_log_prob_weighted(trajectory, values);
    let mut stepped = policy.clone();
    stepped.step(&grad, alpha);
    let prefix = |p: &PolicyParams| p.log_probs(trajectory)[..=t_star].iter().sum::<f64>();
    let (before, after) = (prefix(policy), prefix(&stepped));
    let observed = after.exp() - before.exp();

    Ok(DeltaPCheck {
        t_star,
        predicted,
        observed,
        predicted_sign: DeltaSign::of(predicted),
        observed_sign: DeltaSign::of(observed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Decoding, FeatureMap};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn condition_example() {
        let r = detect_collapse(&[-1.0, -1.0, -1.0, 2.0]);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].t_star, 3);
        assert_eq!((r[0].a, r[0].b), (1.0, 2.0));
        assert!(r[0].condition_holds);
        assert_eq!(r[0].delta_p_sign, DeltaSign::Negative);
    }

    #[test]
    fn all_positive_has_no_reports() {
        assert!(detect_collapse(&[0.5, 1.0, 2.0]).is_empty());
    }

    #[test]
    fn large_b_fails_condition() {
        let r = detect_collapse(&[-0.1, 5.0]);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].t_star, 1);
        assert!((r[0].a - 0.1).abs() < 1e-15);
        assert!(!r[0].condition_holds);
        assert_eq!(r[0].delta_p_sign, DeltaSign::NonNegative);
    }

    #[test]
    fn delta_p_examples() {
        assert!((estimate_delta_p(1.0, 3, 2.0, 0.1, 1.0) + 0.1).abs() < 1e-15);
        assert_eq!(estimate_delta_p(0.5, 4, 2.0, 0.3, 2.0), 0.0);
        assert!(estimate_delta_p(0.0, 4, 2.0, 0.3, 2.0) > 0.0);
    }

    fn small_policy(seed: u64) -> PolicyParams {
        let map = FeatureMap::LastTokens {
            vocab: 4,
            context: 2,
            eos: None,
        };
        PolicyParams::random(map, 0.5, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_advantage_leaves_prefix_unchanged() {
        let p = small_policy(1);
        let t = p.sample_trajectory("x", &[], 6, Decoding::ANCESTRAL, &mut ChaCha8Rng::seed_from_u64(2));
        let check = verify_delta_p_empirically(&p, &t, &AdvantageVector::zeros(6), 0.5).unwrap();
        assert!(check.observed.abs() < 1e-12);
    }

    #[test]
    fn single_positive_token_becomes_more_likely() {
        for seed in 0..20 {
            let p = small_policy(seed);
            let t = p.sample_trajectory("x", &[], 1, Decoding::ANCESTRAL, &mut ChaCha8Rng::seed_from_u64(seed));
            let check = verify_delta_p_empirically(&p, &t, &AdvantageVector::filled(1, 1.0), 0.1).unwrap();
            assert!(check.observed > 0.0);
            assert_eq!(check.predicted_sign, DeltaSign::NonNegative);
            assert!(check.agrees());
        }
    }
}
