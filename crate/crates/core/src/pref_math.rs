//! Scalar preference math.
//!
//! Every probability-space quantity is evaluated in log space with max
//! shifting, so all functions stay finite for rewards of magnitude up to
//! several hundred. Rewards passed to the loss functions are already scaled
//! by beta ([`implicit_reward`] applies it once); nothing here re-applies it.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// KL-penalty strength scaling the implicit reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Beta(f64);

impl Beta {
    pub const DEFAULT: f64 = 0.1;

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(Error::InvalidBeta(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Beta {
    fn default() -> Self {
        Self(Self::DEFAULT)
    }
}

impl TryFrom<f64> for Beta {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Beta> for f64 {
    fn from(beta: Beta) -> f64 {
        beta.0
    }
}

/// Sequence log-probabilities of one sample under the policy and the frozen
/// reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogProbPair {
    pub logp_policy: f64,
    pub logp_ref: f64,
}

impl LogProbPair {
    pub fn new(logp_policy: f64, logp_ref: f64) -> Self {
        Self { logp_policy, logp_ref }
    }
}

/// Implicit rewards of the preferred sample (`r_pp`), the language-rejected
/// sample (`r_pm`) and the vision-rejected sample (`r_mp`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTriplet {
    pub r_pp: f64,
    pub r_pm: f64,
    pub r_mp: f64,
}

impl RewardTriplet {
    pub fn new(r_pp: f64, r_pm: f64, r_mp: f64) -> Result<Self> {
        Ok(Self {
            r_pp: ensure_finite("r_pp", r_pp)?,
            r_pm: ensure_finite("r_pm", r_pm)?,
            r_mp: ensure_finite("r_mp", r_mp)?,
        })
    }

    /// Adds `c` to all three rewards.
    pub fn shifted(self, c: f64) -> Self {
        Self {
            r_pp: self.r_pp + c,
            r_pm: self.r_pm + c,
            r_mp: self.r_mp + c,
        }
    }
}

/// Split of gradient mass between the two rejected samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectedWeights {
    pub w_pm: f64,
    pub w_mp: f64,
}

/// Logistic function, evaluated so that `exp` only ever sees a non-positive
/// argument.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let z = (-x.abs()).exp();
    if x >= 0.0 {
        1.0 / (1.0 + z)
    } else {
        z / (1.0 + z)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log σ(x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Max-shifted `log Σ exp(x_i)`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `β · (log π_θ − log π_ref)`.
pub fn implicit_reward(pair: LogProbPair, beta: Beta) -> Result<f64> {
    let policy = ensure_finite("logp_policy", pair.logp_policy)?;
    let reference = ensure_finite("logp_ref", pair.logp_ref)?;
    Ok(beta.value() * (policy - reference))
}

/// Bradley-Terry probability that the sample with reward `r_w` is preferred
/// over the one with `r_l`. Non-finite input propagates as NaN.
pub fn bt_probability(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// Pairwise DPO loss `−log σ(r_w − r_l)`.
pub fn dpo_loss(r_w: f64, r_l: f64) -> f64 {
    softplus(r_l - r_w)
}

/// Plackett-Luce probability that the preferred sample ranks above every
/// rejected one.
pub fn pl_probability(r_pp: f64, rejected: &[f64]) -> Result<f64> {
    if rejected.is_empty() {
        return Err(Error::EmptyRejected);
    }
    ensure_finite("r_pp", r_pp)?;
    for &r in rejected {
        ensure_finite("rejected", r)?;
    }
    let mut all = Vec::with_capacity(rejected.len() + 1);
    all.push(r_pp);
    all.extend_from_slice(rejected);
    Ok((r_pp - log_sum_exp(&all)).exp())
}

/// `log Σ_j exp(r_j − r_pp)` over the two rejected samples: the argument
/// shared by the adaptive loss and its gradient gate.
fn rejected_margin(t: &RewardTriplet) -> f64 {
    log_sum_exp(&[t.r_pm - t.r_pp, t.r_mp - t.r_pp])
}

/// Adaptive three-way loss `−log σ(−log Σ_j exp(r_j − r_pp))`.
pub fn adaptive_loss(t: &RewardTriplet) -> f64 {
    softplus(rejected_margin(t))
}

/// Scalar multiplying the whole per-record gradient. Close to one when a
/// rejected sample is rated near or above the preferred one, close to zero
/// once the ranking is confidently correct.
pub fn gradient_gate(t: &RewardTriplet) -> f64 {
    sigmoid(rejected_margin(t))
}

/// Adaptive weights in sigmoid-difference form. `r_pp` does not enter.
pub fn rejected_weights(t: &RewardTriplet) -> RejectedWeights {
    RejectedWeights {
        w_pm: sigmoid(t.r_pm - t.r_mp),
        w_mp: sigmoid(t.r_mp - t.r_pm),
    }
}

/// The same weights as a two-way softmax over the rejected rewards.
pub fn rejected_weights_softmax(t: &RewardTriplet) -> RejectedWeights {
    let lse = log_sum_exp(&[t.r_pm, t.r_mp]);
    RejectedWeights {
        w_pm: (t.r_pm - lse).exp(),
        w_mp: (t.r_mp - lse).exp(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values computed with 40-digit mpmath evaluation.
    const SIGMOID_2: f64 = 0.880_797_077_977_882_4;
    const DPO_03_09: f64 = 1.037_487_950_485_885_6;
    const PL_EXAMPLE: f64 = 0.597_921_937_517_655_7;
    const ADAPTIVE_EXAMPLE: f64 = 0.514_295_072_820_631_4;
    const SIGMOID_07: f64 = 0.668_187_772_168_166_1;

    fn t(r_pp: f64, r_pm: f64, r_mp: f64) -> RewardTriplet {
        RewardTriplet::new(r_pp, r_pm, r_mp).unwrap()
    }

    #[test]
    fn implicit_reward_examples() {
        let beta = Beta::default();
        assert_eq!(implicit_reward(LogProbPair::new(-3.2, -3.2), beta).unwrap(), 0.0);
        let r = implicit_reward(LogProbPair::new(-1.0, -2.0), beta).unwrap();
        assert!((r - 0.1).abs() < 1e-15);
        let r = implicit_reward(LogProbPair::new(-2.7, -1.3), Beta::new(0.5).unwrap()).unwrap();
        assert!((r + 0.7).abs() < 1e-15);
    }

    #[test]
    fn implicit_reward_names_bad_field() {
        let err = implicit_reward(LogProbPair::new(f64::NEG_INFINITY, -1.0), Beta::default())
            .unwrap_err();
        assert!(err.to_string().contains("logp_policy"), "{err}");
        let err = implicit_reward(LogProbPair::new(-1.0, f64::NAN), Beta::default()).unwrap_err();
        assert!(err.to_string().contains("logp_ref"), "{err}");
    }

    #[test]
    fn beta_rejects_non_positive() {
        assert!(Beta::new(0.0).is_err());
        assert!(Beta::new(-0.1).is_err());
        assert!(Beta::new(f64::INFINITY).is_err());
        assert_eq!(Beta::default().value(), 0.1);
    }

    #[test]
    fn bt_probability_examples() {
        assert_eq!(bt_probability(0.0, 0.0), 0.5);
        for r in [-40.0, -1.5, 3.0, 600.0] {
            assert_eq!(bt_probability(r, r), 0.5);
        }
        assert!((bt_probability(1.0, -1.0) - SIGMOID_2).abs() < 1e-15);
    }

    #[test]
    fn dpo_loss_examples() {
        assert!((dpo_loss(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(dpo_loss(30.0, 0.0) < 1e-12);
        assert!((dpo_loss(0.3, 0.9) - DPO_03_09).abs() < 1e-14);
    }

    #[test]
    fn pl_probability_examples() {
        assert!((pl_probability(0.0, &[0.0, 0.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        for r in [-7.0, 0.0, 2.5] {
            assert!((pl_probability(r, &[r]).unwrap() - 0.5).abs() < 1e-15);
        }
        let p = pl_probability(1.0, &[0.2, -0.5]).unwrap();
        assert!((p - PL_EXAMPLE).abs() < 1e-14, "{p}");
        assert!(matches!(pl_probability(0.0, &[]), Err(Error::EmptyRejected)));
    }

    #[test]
    fn adaptive_loss_examples() {
        assert!((adaptive_loss(&t(0.0, 0.0, 0.0)) - 3f64.ln()).abs() < 1e-15);
        let reduced = adaptive_loss(&t(0.0, 0.0, -30.0));
        assert!((reduced - dpo_loss(0.0, 0.0)).abs() < 1e-6);
        assert!((adaptive_loss(&t(1.0, 0.2, -0.5)) - ADAPTIVE_EXAMPLE).abs() < 1e-14);
    }

    #[test]
    fn rejected_weights_examples() {
        let w = rejected_weights(&t(4.0, 0.0, 0.0));
        assert_eq!((w.w_pm, w.w_mp), (0.5, 0.5));
        let a = rejected_weights(&t(0.0, 0.3, -1.1));
        let b = rejected_weights(&t(9.0, 0.3 + 5.0, -1.1 + 5.0));
        assert!((a.w_pm - b.w_pm).abs() < 1e-12);
        let w = rejected_weights(&t(0.0, 0.2, -0.5));
        assert!((w.w_pm - SIGMOID_07).abs() < 1e-15);
        assert!((w.w_mp - (1.0 - SIGMOID_07)).abs() < 1e-15);
    }

    #[test]
    fn gradient_gate_examples() {
        assert!((gradient_gate(&t(0.0, 0.0, 0.0)) - 2.0 / 3.0).abs() < 1e-15);
        assert!(gradient_gate(&t(30.0, 0.0, 0.0)) < 1e-12);
        let g = gradient_gate(&t(1.0, 0.2, -0.5));
        assert!((g - (1.0 - PL_EXAMPLE)).abs() < 1e-14);
    }

    #[test]
    fn extreme_rewards_stay_finite() {
        for &(a, b, c) in &[(700.0, -700.0, 0.0), (-700.0, 700.0, 700.0), (0.0, -700.0, 700.0)] {
            let tr = t(a, b, c);
            assert!(adaptive_loss(&tr).is_finite());
            assert!(gradient_gate(&tr).is_finite());
            let w = rejected_weights(&tr);
            assert!(w.w_pm.is_finite() && w.w_mp.is_finite());
            assert!(pl_probability(a, &[b, c]).unwrap().is_finite());
            assert!(dpo_loss(a, b).is_finite());
        }
    }

    #[test]
    fn triplet_rejects_nan() {
        assert!(RewardTriplet::new(0.0, f64::NAN, 0.0).is_err());
    }
}
