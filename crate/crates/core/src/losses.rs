//! Scalar training objectives: cross-entropy, temperature-scaled KL
//! distillation, feature regression, the per-branch weighting schedule and
//! the combined multi-branch objective.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Floor applied inside every logarithm of a probability.
pub const LOG_FLOOR: f64 = 1e-12;

/// Per-branch weighting schedule `s_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// `1 / 2^k`
    ExpDecay,
    /// `1 / (1 + k)`
    LinearDecay,
    Constant,
    /// `k`
    IncreasingLinear,
    /// `2^k`
    IncreasingExp,
    /// `1` for `k = 0`, `1e-6` otherwise.
    BiasedFirst,
    /// `1` for `k = 0`; auxiliary weights fade linearly from 1 to 0 over
    /// training.
    LinearFade,
}

impl Schedule {
    pub const ALL: [Schedule; 7] = [
        Schedule::ExpDecay,
        Schedule::LinearDecay,
        Schedule::Constant,
        Schedule::IncreasingLinear,
        Schedule::IncreasingExp,
        Schedule::BiasedFirst,
        Schedule::LinearFade,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::ExpDecay => "exp_decay",
            Schedule::LinearDecay => "linear_decay",
            Schedule::Constant => "constant",
            Schedule::IncreasingLinear => "increasing_linear",
            Schedule::IncreasingExp => "increasing_exp",
            Schedule::BiasedFirst => "biased_first",
            Schedule::LinearFade => "linear_fade",
        }
    }

    /// Weight of branch `k` at the given fraction of training completed.
    pub fn weight(self, k: usize, epoch_fraction: f64) -> f64 {
        match self {
            Schedule::ExpDecay => 0.5f64.powi(k as i32),
            Schedule::LinearDecay => 1.0 / (1.0 + k as f64),
            Schedule::Constant => 1.0,
            Schedule::IncreasingLinear => k as f64,
            Schedule::IncreasingExp => 2f64.powi(k as i32),
            Schedule::BiasedFirst => {
                if k == 0 {
                    1.0
                } else {
                    1e-6
                }
            }
            Schedule::LinearFade => {
                if k == 0 {
                    1.0
                } else {
                    1.0 - epoch_fraction.clamp(0.0, 1.0)
                }
            }
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Schedule::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown schedule `{s}`")))
    }
}

/// `s_k` for branch `k` of `K`.
pub fn schedule_s(k: usize, branches: usize, kind: Schedule, epoch_fraction: f64) -> Result<f64> {
    if k > branches {
        return Err(Error::Parameter(format!(
            "schedule index {k} exceeds branch count {branches}"
        )));
    }
    Ok(kind.weight(k, epoch_fraction))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// Cross-entropy weight inside the logit loss.
    pub alpha: f64,
    /// KL weight inside the logit loss.
    pub beta: f64,
    /// Feature-regression weight.
    pub gamma: f64,
    /// Per-branch classification weight.
    pub lambda: f64,
    pub temperature: f64,
    /// Number of residual branches `K`.
    pub branches: usize,
    pub schedule: Schedule,
    /// Student/teacher probability merge coefficient for ST inference.
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 2.0,
            gamma: 1.0,
            lambda: 1.0,
            temperature: 4.0,
            branches: 4,
            schedule: Schedule::ExpDecay,
            mu: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Parameter(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Parameter(format!(
                "mu must lie in [0, 1], got {}",
                self.mu
            )));
        }
        Ok(())
    }

    pub fn s(&self, k: usize, epoch_fraction: f64) -> Result<f64> {
        schedule_s(k, self.branches, self.schedule, epoch_fraction)
    }
}

fn same_shape(t: &Tape, what: &str, a: Var, b: Var) -> Result<()> {
    if t.value(a).shape() != t.value(b).shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            t.value(a).shape(),
            t.value(b).shape()
        )));
    }
    Ok(())
}

/// Mean over the batch of `-ln p[label]`, with the log input clamped at
/// [`LOG_FLOOR`].
pub fn cross_entropy(t: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, m) = t.value(probs).dims2()?;
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "cross_entropy: {} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {m} classes"
        )));
    }
    for i in 0..n {
        let s: f64 = t.value(probs).row(i).iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "cross_entropy: row {i} sums to {s}, not 1"
            )));
        }
    }
    let picked = t.pick(probs, labels)?;
    let logs = t.log_clamped(picked, LOG_FLOOR)?;
    let m = t.mean(logs)?;
    t.scale(m, -1.0)
}

/// Cross-entropy of `softmax(logits)` (temperature 1) against labels.
pub fn cross_entropy_logits(t: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let p = t.softmax(logits, 1.0)?;
    cross_entropy(t, p, labels)
}

/// `T² · mean_n KL(σ(g_t/T) ‖ σ(g_s/T))`. The teacher logits are detached.
pub fn kl_distillation(
    t: &mut Tape,
    logits_t: Var,
    logits_s: Var,
    temperature: f64,
) -> Result<Var> {
    same_shape(t, "kl_distillation", logits_t, logits_s)?;
    let (n, _) = t.value(logits_s).dims2()?;
    let gt = t.detach(logits_t)?;
    let pt = t.softmax(gt, temperature)?;
    let ps = t.softmax(logits_s, temperature)?;
    let log_pt = t.log_clamped(pt, LOG_FLOOR)?;
    let log_ps = t.log_clamped(ps, LOG_FLOOR)?;
    let diff = t.sub(log_pt, log_ps)?;
    let terms = t.mul(pt, diff)?;
    let total = t.sum(terms)?;
    t.scale(total, temperature * temperature / n as f64)
}

/// `(1/N) Σ_n ‖target_n − pred_n‖²` with gradient reaching both arguments.
pub fn squared_error_mean(t: &mut Tape, target: Var, pred: Var) -> Result<Var> {
    same_shape(t, "feature_mse", target, pred)?;
    let (n, _) = t.value(pred).dims2()?;
    let d = t.sub(pred, target)?;
    let sq = t.mul(d, d)?;
    let s = t.sum(sq)?;
    t.scale(s, 1.0 / n as f64)
}

/// `(1/N) Σ_n ‖target_n − pred_n‖²`, target held constant.
pub fn feature_mse(t: &mut Tape, target: Var, pred: Var) -> Result<Var> {
    same_shape(t, "feature_mse", target, pred)?;
    let target = t.detach(target)?;
    squared_error_mean(t, target, pred)
}

/// Components of the logit-distillation loss.
#[derive(Debug, Clone, Copy)]
pub struct LogitLoss {
    pub total: Var,
    pub ce: Var,
    pub kl: Var,
}

/// `α·CE(y, σ(g_s)) + β·T²·KL(σ(g_t/T) ‖ σ(g_s/T))`.
pub fn logit_distillation(
    t: &mut Tape,
    logits_t: Var,
    logits_s: Var,
    labels: &[usize],
    w: &LossWeights,
) -> Result<LogitLoss> {
    let ce = cross_entropy_logits(t, logits_s, labels)?;
    let kl = kl_distillation(t, logits_t, logits_s, w.temperature)?;
    let a = t.scale(ce, w.alpha)?;
    let b = t.scale(kl, w.beta)?;
    let total = t.add(a, b)?;
    Ok(LogitLoss { total, ce, kl })
}

/// `L_KD + Σ_{k=0}^{K} s_k (γ·L_FD_k + λ·L_cls_k)` where `fd` holds
/// `L_FD_0..L_FD_K` and `cls` holds `L_cls_1..L_cls_K` (`L_cls_0` is zero).
pub fn total_era_loss(
    t: &mut Tape,
    l_kd: Var,
    fd: &[Var],
    cls: &[Var],
    w: &LossWeights,
    epoch_fraction: f64,
) -> Result<Var> {
    if fd.len() != w.branches + 1 || cls.len() != w.branches {
        return Err(Error::Contract(format!(
            "total loss for K = {} needs {} feature and {} classification terms, got {} and {}",
            w.branches,
            w.branches + 1,
            w.branches,
            fd.len(),
            cls.len()
        )));
    }
    let mut total = l_kd;
    for (k, &fd_k) in fd.iter().enumerate() {
        let mut term = t.scale(fd_k, w.gamma)?;
        if k >= 1 {
            let c = t.scale(cls[k - 1], w.lambda)?;
            term = t.add(term, c)?;
        }
        let weighted = t.scale(term, w.s(k, epoch_fraction)?)?;
        total = t.add(total, weighted)?;
    }
    Ok(total)
}
