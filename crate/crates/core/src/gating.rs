//! Hard concrete gating, its noisy training-time relaxation, top-M masks and
//! the per-instance budget schedule.
//!
//! The selector emits one logit per gated feature. Scores are
//! `tau(logit + delta)` where
//!
//! ```text
//! tau(x) = min(1, max(0, sigmoid(x / beta) * (zeta - gamma) + gamma))
//! ```
//!
//! During training the logit is perturbed with logistic noise scaled by
//! `kappa` before the division by `beta`. Only the `M` largest scores of
//! each instance survive; the binary mask that keeps them is a constant with
//! respect to gradients, so the selector learns through the soft scores.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{sigmoid, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GateError {
    #[error("invalid gate configuration: {0}")]
    Config(String),
    #[error("effective budget {m} for instance {instance} is outside 1..={features}")]
    BudgetOutOfRange {
        instance: usize,
        m: usize,
        features: usize,
    },
    #[error("training-mode gate needs a random source")]
    MissingRng,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Train,
    Eval,
}

/// Gate hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig<S: Scalar> {
    /// Temperature of the sigmoid.
    pub beta: S,
    /// Upper end of the stretch interval.
    pub zeta: S,
    /// Lower end of the stretch interval.
    pub gamma: S,
    /// Shift added to the selector logits before gating.
    pub delta: S,
    /// Scale of the logistic noise; 0 disables it.
    pub kappa: S,
    /// Probability of lifting an instance's budget to all features.
    pub epsilon: S,
    /// Feature budget per instance.
    pub m: usize,
    pub mode: GateMode,
}

impl<S: Scalar> Default for GateConfig<S> {
    fn default() -> Self {
        Self::train(24)
    }
}

impl<S: Scalar> GateConfig<S> {
    /// Training defaults: beta = 2/3, delta = 1, zeta = 1, gamma = 0,
    /// kappa = 0.1, epsilon = 0.1.
    pub fn train(m: usize) -> Self {
        Self {
            beta: S::of(2.0) / S::of(3.0),
            zeta: S::one(),
            gamma: S::zero(),
            delta: S::one(),
            kappa: S::of(0.1),
            epsilon: S::of(0.1),
            m,
            mode: GateMode::Train,
        }
    }

    /// Same shape parameters as [`train`](Self::train) with the noise off.
    pub fn eval(m: usize) -> Self {
        Self::train(m).for_eval()
    }

    /// Test-time counterpart of this configuration: no noise and a fixed
    /// budget.
    pub fn for_eval(&self) -> Self {
        Self {
            kappa: S::zero(),
            mode: GateMode::Eval,
            ..*self
        }
    }

    /// The classic stretch interval `(-0.1, 1.1)`.
    pub fn with_classic_stretch(self) -> Self {
        Self {
            zeta: S::of(1.1),
            gamma: S::of(-0.1),
            ..self
        }
    }

    /// Checks parameter ranges against the number of gated features.
    pub fn validate(&self, features: usize) -> Result<(), GateError> {
        let bad = |msg: String| Err(GateError::Config(msg));
        if self.beta.is_nan() || self.beta <= S::zero() || !self.beta.is_finite() {
            return bad(format!(
                "beta must be positive and finite, got {}",
                self.beta
            ));
        }
        if !(self.kappa >= S::zero() && self.kappa <= S::one()) {
            return bad(format!("kappa must lie in [0, 1], got {}", self.kappa));
        }
        if !(self.epsilon >= S::zero() && self.epsilon <= S::one()) {
            return bad(format!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if !(self.zeta.is_finite() && self.gamma.is_finite() && self.delta.is_finite()) {
            return bad("zeta, gamma and delta must be finite".into());
        }
        if self.zeta.is_nan() || self.gamma.is_nan() || self.zeta <= self.gamma {
            return bad(format!(
                "zeta ({}) must exceed gamma ({})",
                self.zeta, self.gamma
            ));
        }
        if self.m == 0 || self.m > features {
            return bad(format!("m must lie in 1..={features}, got {}", self.m));
        }
        Ok(())
    }
}

/// Scalar form of the hard concrete gate; bit-identical to
/// [`hard_concrete`].
pub fn hard_concrete_value<S: Scalar>(x: S, cfg: &GateConfig<S>) -> S {
    stretch_clamp(sigmoid(x / cfg.beta), cfg)
}

/// Scalar form of the noisy gate for a given uniform draw `u`; bit-identical
/// to [`stochastic_gate_with_noise`].
pub fn stochastic_gate_value<S: Scalar>(x: S, u: S, cfg: &GateConfig<S>) -> S {
    let noise = cfg.kappa * logit(u);
    stretch_clamp(sigmoid((noise + x) / cfg.beta), cfg)
}

fn stretch_clamp<S: Scalar>(s: S, cfg: &GateConfig<S>) -> S {
    (s * (cfg.zeta - cfg.gamma) + cfg.gamma)
        .max(S::zero())
        .min(S::one())
}

fn logit<S: Scalar>(u: S) -> S {
    u.ln() - (S::one() - u).ln()
}

fn gate_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    pre: Var,
    cfg: &GateConfig<S>,
) -> Result<Var, TensorError> {
    let scaled = tape.div_scalar(pre, cfg.beta)?;
    let s = tape.sigmoid(scaled)?;
    let stretched = tape.mul_scalar(s, cfg.zeta - cfg.gamma)?;
    let shifted = tape.add_scalar(stretched, cfg.gamma)?;
    tape.clamp01(shifted)
}

/// Deterministic hard concrete gate applied elementwise.
pub fn hard_concrete<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    cfg: &GateConfig<S>,
) -> Result<Var, GateError> {
    if cfg.beta.is_nan() || cfg.beta <= S::zero() {
        return Err(GateError::Config(format!(
            "beta must be positive, got {}",
            cfg.beta
        )));
    }
    Ok(gate_on_tape(tape, x, cfg)?)
}

/// Draws from the open interval `(0, 1)`, rejecting exact endpoints.
pub fn open_unit(rng: &mut dyn RngCore) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

/// Noisy gate with explicit uniform draws `u` (same shape as `x`).
///
/// The noise enters as a constant, so the gradient flows through `x` only.
pub fn stochastic_gate_with_noise<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    u: &Tensor<S>,
    cfg: &GateConfig<S>,
) -> Result<Var, GateError> {
    if u.shape() != tape.shape(x) {
        return Err(TensorError::ShapeMismatch {
            op: "stochastic_gate",
            left: tape.shape(x).to_vec(),
            right: u.shape().to_vec(),
        }
        .into());
    }
    if let Some(bad) = u.data().iter().find(|&&v| !(v > S::zero() && v < S::one())) {
        return Err(GateError::Config(format!(
            "uniform draw {bad} outside the open interval (0, 1)"
        )));
    }
    let noise = u.map(|v| cfg.kappa * logit(v));
    let noise = tape.constant(noise);
    let pre = tape.add(noise, x)?;
    hard_concrete(tape, pre, cfg)
}

/// Noisy gate used during training. In eval mode no noise is drawn and the
/// result is the plain hard concrete gate.
pub fn stochastic_gate<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    cfg: &GateConfig<S>,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var, GateError> {
    match cfg.mode {
        GateMode::Eval => hard_concrete(tape, x, cfg),
        GateMode::Train => {
            let rng = rng.ok_or(GateError::MissingRng)?;
            let shape = tape.shape(x).to_vec();
            let u = Tensor::from_fn(shape, |_| S::of(open_unit(rng)));
            stochastic_gate_with_noise(tape, x, &u, cfg)
        }
    }
}

/// Binary mask of the `effective_m[i]` largest entries of each row of a
/// `[B, F]` score matrix. Equal scores go to the lower feature index.
pub fn topm_mask<S: Scalar>(
    scores: &Tensor<S>,
    effective_m: &[usize],
) -> Result<Tensor<S>, GateError> {
    let &[batch, features] = scores.shape() else {
        return Err(TensorError::Rank {
            op: "topm_mask",
            expected: 2,
            shape: scores.shape().to_vec(),
        }
        .into());
    };
    if effective_m.len() != batch {
        return Err(GateError::Config(format!(
            "{} budgets supplied for a batch of {batch}",
            effective_m.len()
        )));
    }
    let mut mask = vec![S::zero(); batch * features];
    let mut order: Vec<usize> = Vec::with_capacity(features);
    for (i, (row, &m)) in scores
        .data()
        .chunks(features.max(1))
        .zip(effective_m)
        .enumerate()
    {
        if m == 0 || m > features {
            return Err(GateError::BudgetOutOfRange {
                instance: i,
                m,
                features,
            });
        }
        order.clear();
        order.extend(0..features);
        let rank = |&a: &usize, &b: &usize| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or_else(|| row[a].is_nan().cmp(&row[b].is_nan()))
                .then(a.cmp(&b))
        };
        if m < features {
            order.select_nth_unstable_by(m - 1, rank);
        }
        for &j in &order[..m] {
            mask[i * features + j] = S::one();
        }
    }
    Ok(Tensor::new(vec![batch, features], mask)?)
}

/// Per-instance budget given uniform draws `p`: `m` when `p > epsilon`,
/// otherwise all `features`.
pub fn dynamic_m_from_draws<S: Scalar>(
    draws: &[f64],
    cfg: &GateConfig<S>,
    features: usize,
) -> Vec<usize> {
    if cfg.mode == GateMode::Eval {
        return vec![cfg.m; draws.len()];
    }
    let eps = cfg.epsilon.to_f64_lossy();
    draws
        .iter()
        .map(|&p| if p > eps { cfg.m } else { features })
        .collect()
}

/// Draws one budget per instance. Eval mode always returns `cfg.m` and
/// consumes no randomness.
pub fn dynamic_m<S: Scalar>(
    batch: usize,
    cfg: &GateConfig<S>,
    features: usize,
    rng: &mut dyn RngCore,
) -> Vec<usize> {
    if cfg.mode == GateMode::Eval {
        return vec![cfg.m; batch];
    }
    let draws: Vec<f64> = (0..batch).map(|_| open_unit(rng)).collect();
    dynamic_m_from_draws(&draws, cfg, features)
}

/// `scores * mask * x`. Scores and mask may hold one entry per pixel
/// (`[B, 1, H, W]`) and are then repeated across the channels of `x`.
pub fn apply_gate<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    scores: Var,
    mask: Var,
) -> Result<Var, GateError> {
    let kept = tape.mul(scores, mask)?;
    let (sx, sk) = (tape.shape(x).to_vec(), tape.shape(kept).to_vec());
    let kept = if sx != sk && sx.len() == 4 && sk.len() == 4 && sk[1] == 1 {
        tape.expand_channels(kept, sx[1])?
    } else {
        kept
    };
    if tape.shape(kept) != sx.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "apply_gate",
            left: sx,
            right: tape.shape(kept).to_vec(),
        }
        .into());
    }
    Ok(tape.mul(kept, x)?)
}

/// Soft scores, binary mask and budgets of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask<S> {
    /// `[B, F]` gate outputs.
    pub scores: Tensor<S>,
    /// `[B, F]` binary mask.
    pub gamma_mask: Tensor<S>,
    pub effective_m: Vec<usize>,
}

impl<S: Scalar> SelectionMask<S> {
    /// Builds the mask for `[B, F]` scores.
    pub fn select(scores: Tensor<S>, effective_m: Vec<usize>) -> Result<Self, GateError> {
        let gamma_mask = topm_mask(&scores, &effective_m)?;
        Ok(Self {
            scores,
            gamma_mask,
            effective_m,
        })
    }

    pub fn features(&self) -> usize {
        self.scores.shape().get(1).copied().unwrap_or(0)
    }

    /// Number of ones in each row of the mask.
    pub fn cardinalities(&self) -> Vec<usize> {
        let f = self.features().max(1);
        self.gamma_mask
            .data()
            .chunks(f)
            .map(|row| row.iter().filter(|&&v| v == S::one()).count())
            .collect()
    }

    /// Mean score over the selected entries.
    pub fn mean_selected_score(&self) -> f64 {
        let (mut total, mut count) = (0.0, 0usize);
        for (&s, &g) in self.scores.data().iter().zip(self.gamma_mask.data()) {
            if g == S::one() {
                total += s.to_f64_lossy();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    /// Checks range, cardinality and placement of the mask.
    pub fn check_invariants(&self) -> Result<(), String> {
        let f = self.features();
        if self
            .scores
            .data()
            .iter()
            .any(|&s| !(s >= S::zero() && s <= S::one()))
        {
            return Err("score outside [0, 1]".into());
        }
        for (i, ((row, mrow), &m)) in self
            .scores
            .data()
            .chunks(f.max(1))
            .zip(self.gamma_mask.data().chunks(f.max(1)))
            .zip(&self.effective_m)
            .enumerate()
        {
            let ones = mrow.iter().filter(|&&v| v == S::one()).count();
            if ones != m.min(f) {
                return Err(format!(
                    "instance {i}: {ones} selected, expected {}",
                    m.min(f)
                ));
            }
            let floor = row
                .iter()
                .zip(mrow)
                .filter(|(_, &g)| g == S::one())
                .map(|(&s, _)| s)
                .fold(S::infinity(), S::min);
            for (j, (&s, &g)) in row.iter().zip(mrow).enumerate() {
                if g != S::one() && s > floor {
                    return Err(format!(
                        "instance {i}: unselected feature {j} scores {s} above selected {floor}"
                    ));
                }
            }
        }
        Ok(())
    }
}
