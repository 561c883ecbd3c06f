//! Clipped policy-gradient surrogates at token, turn and sequence granularity.
//!
//! All three objectives share the form
//!
//! ```text
//! J = 1/G Σ_i 1/|y_i| Σ_t M_it · min(s_it·A_it, clip(s_it, 1-ε_l, 1+ε_r)·A_it)
//! ```
//!
//! and differ only in the unit over which the importance ratio `s_it` is a
//! length-normalised geometric mean of `π_θ / π_θold`:
//!
//! * token-level (GRPO): each agent token is its own unit;
//! * turn-level (ATPO): the agent tokens of the token's turn;
//! * sequence-level (GSPO): all agent tokens of the trajectory.
//!
//! The unit ratio enters the gradient as a stop-gradient factor, so an
//! unclipped token contributes `s_it · A_it · ∇ log π_θ(y_it)` and a token on
//! the clipped branch contributes nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Gradient, PolicyParams, SparseGrad, TokenPolicy};
use crate::vocab_env::TokenId;

/// One response token as seen by the trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub token: TokenId,
    /// Turn index `k(t)` of the node holding this token (first turn = 1).
    pub turn: usize,
    /// `true` for agent-generated tokens; tool-injected tokens are masked out.
    pub mask: bool,
    pub advantage: f64,
    /// Sampling-time log-probability under the frozen policy; present iff `mask`.
    pub old_logprob: Option<f64>,
}

/// A root-to-leaf path flattened into per-token records. The context of
/// record `t` is the prompt followed by the tokens of records `0..t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    pub prompt: Vec<TokenId>,
    pub records: Vec<TrainRecord>,
}

impl Trajectory {
    /// Prompt plus all response tokens.
    pub fn sequence(&self) -> Vec<TokenId> {
        let mut seq = self.prompt.clone();
        seq.extend(self.records.iter().map(|r| r.token));
        seq
    }

    pub fn masked_len(&self) -> usize {
        self.records.iter().filter(|r| r.mask).count()
    }

    /// Distinct turn indices in order of appearance.
    pub fn turns(&self) -> Vec<usize> {
        let mut turns: Vec<usize> = Vec::new();
        for r in &self.records {
            if turns.last() != Some(&r.turn) {
                turns.push(r.turn);
            }
        }
        turns
    }

    /// Recomputes every masked token's old log-probability under `old`.
    pub fn fill_old_logprobs<P: TokenPolicy + ?Sized>(&mut self, old: &P) {
        let seq = self.sequence();
        let p = self.prompt.len();
        for (t, r) in self.records.iter_mut().enumerate() {
            r.old_logprob = r.mask.then(|| old.logprobs(&seq[..p + t])[r.token.index()]);
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        for (pos, r) in self.records.iter().enumerate() {
            if r.mask != r.old_logprob.is_some() {
                return Err(Error::Contract(format!(
                    "trajectory {}: token {pos} has mask={} but old logprob {:?}",
                    self.id, r.mask, r.old_logprob
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Atpo,
    Grpo,
    Gspo,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Self::Atpo, Self::Grpo, Self::Gspo];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Atpo => "ATPO",
            Self::Grpo => "GRPO",
            Self::Gspo => "GSPO",
        }
    }
}

/// Per-trajectory normaliser `|y_i|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthNorm {
    /// Every response token, tool-injected ones included.
    #[default]
    AllTokens,
    /// Agent tokens only.
    MaskedTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub objective: Objective,
    #[serde(default)]
    pub length_norm: LengthNorm,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 3e-3,
            eps_high: 4e-3,
            objective: Objective::Atpo,
            length_norm: LengthNorm::AllTokens,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_high > 0.0 && self.eps_low < 1.0) {
            return Err(Error::Config(format!(
                "clip bounds need 0 < eps_low < 1 and eps_high > 0, got ({}, {})",
                self.eps_low, self.eps_high
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub objective: f64,
    pub gradient: Gradient,
    pub clip_fraction: f64,
    pub clipped_tokens: usize,
    pub masked_tokens: usize,
    /// Per trajectory: `(turn, geometric-mean turn ratio)` for each turn with agent tokens.
    pub turn_ratios: Vec<Vec<(usize, f64)>>,
}

/// Current-policy log-probabilities and their gradients for the agent tokens
/// of one trajectory.
pub(crate) struct Scored {
    /// `(record index, new logprob, ∇ log π)` for each masked record.
    pub tokens: Vec<(usize, f64, SparseGrad)>,
}

pub(crate) fn score_trajectory(traj: &Trajectory, params: &PolicyParams) -> Result<Scored> {
    let seq = traj.sequence();
    let p = traj.prompt.len();
    let mut tokens = Vec::with_capacity(traj.masked_len());
    for (t, r) in traj.records.iter().enumerate() {
        if !r.mask {
            continue;
        }
        let buckets = params.features(&seq[..p + t]);
        let lp = params.logprobs_for(&buckets);
        let new = lp[r.token.index()];
        let old = r.old_logprob.unwrap_or(f64::NAN);
        if !new.is_finite() || !old.is_finite() {
            return Err(Error::NonFiniteLogprob { trajectory: traj.id, turn: r.turn });
        }
        tokens.push((t, new, SparseGrad::from_logprobs(buckets, &lp, r.token)));
    }
    Ok(Scored { tokens })
}

/// Ratio unit key of record `t` under `objective`.
fn unit_key(objective: Objective, record: &TrainRecord, t: usize) -> usize {
    match objective {
        Objective::Grpo => t,
        Objective::Atpo => record.turn,
        Objective::Gspo => 0,
    }
}

/// Length-normalised ratio `exp(mean(log π_θ - log π_θold))` per unit, in
/// order of first appearance.
fn unit_ratios(
    objective: Objective,
    traj: &Trajectory,
    scored: &Scored,
) -> Vec<(usize, f64)> {
    let mut units: Vec<(usize, f64, usize)> = Vec::new();
    for &(t, new, _) in &scored.tokens {
        let r = &traj.records[t];
        let key = unit_key(objective, r, t);
        let delta = new - r.old_logprob.unwrap();
        match units.iter_mut().find(|u| u.0 == key) {
            Some(u) => {
                u.1 += delta;
                u.2 += 1;
            }
            None => units.push((key, delta, 1)),
        }
    }
    units
        .into_iter()
        .map(|(k, sum, n)| (k, (sum / n as f64).exp()))
        .collect()
}

/// Geometric-mean ratio of turn `turn` of a trajectory, or `None` when the
/// turn has no agent tokens.
pub fn turn_ratio(traj: &Trajectory, turn: usize, params: &PolicyParams) -> Result<Option<f64>> {
    traj.check()?;
    let scored = score_trajectory(traj, params)?;
    Ok(unit_ratios(Objective::Atpo, traj, &scored)
        .into_iter()
        .find(|(k, _)| *k == turn)
        .map(|(_, s)| s))
}

pub fn atpo_loss(trajectories: &[Trajectory], params: &PolicyParams, clip: &ClipConfig) -> Result<LossReport> {
    surrogate_loss(Objective::Atpo, trajectories, params, clip)
}

pub fn grpo_loss(trajectories: &[Trajectory], params: &PolicyParams, clip: &ClipConfig) -> Result<LossReport> {
    surrogate_loss(Objective::Grpo, trajectories, params, clip)
}

pub fn gspo_loss(trajectories: &[Trajectory], params: &PolicyParams, clip: &ClipConfig) -> Result<LossReport> {
    surrogate_loss(Objective::Gspo, trajectories, params, clip)
}

/// Dispatches on `clip.objective`.
pub fn loss(trajectories: &[Trajectory], params: &PolicyParams, clip: &ClipConfig) -> Result<LossReport> {
    surrogate_loss(clip.objective, trajectories, params, clip)
}

fn surrogate_loss(
    objective: Objective,
    trajectories: &[Trajectory],
    params: &PolicyParams,
    clip: &ClipConfig,
) -> Result<LossReport> {
    clip.validate()?;
    let g = trajectories.len();
    let mut gradient = params.zero_gradient();
    let mut total = 0.0;
    let mut clipped_tokens = 0;
    let mut masked_tokens = 0;
    let mut turn_ratios = Vec::with_capacity(g);
    let (lo, hi) = (1.0 - clip.eps_low, 1.0 + clip.eps_high);

    for traj in trajectories {
        traj.check()?;
        let scored = score_trajectory(traj, params)?;
        let ratios = unit_ratios(objective, traj, &scored);
        turn_ratios.push(if objective == Objective::Atpo {
            ratios.clone()
        } else {
            unit_ratios(Objective::Atpo, traj, &scored)
        });

        let norm = match clip.length_norm {
            LengthNorm::AllTokens => traj.records.len(),
            LengthNorm::MaskedTokens => scored.tokens.len(),
        };
        if norm == 0 {
            continue;
        }
        let weight = 1.0 / (g as f64 * norm as f64);
        let mut sum = 0.0;
        for (t, _, grad) in &scored.tokens {
            let r = &traj.records[*t];
            let key = unit_key(objective, r, *t);
            let s = ratios.iter().find(|u| u.0 == key).unwrap().1;
            let a = r.advantage;
            let unclipped = s * a;
            let clipped = s.clamp(lo, hi) * a;
            masked_tokens += 1;
            if clipped < unclipped {
                clipped_tokens += 1;
                sum += clipped;
            } else {
                sum += unclipped;
                grad.add_scaled_to(&mut gradient, weight * s * a);
            }
        }
        total += sum / norm as f64;
    }

    let objective_value = if g == 0 { 0.0 } else { total / g as f64 };
    Ok(LossReport {
        objective: objective_value,
        gradient,
        clip_fraction: if masked_tokens == 0 {
            0.0
        } else {
            clipped_tokens as f64 / masked_tokens as f64
        },
        clipped_tokens,
        masked_tokens,
        turn_ratios,
    })
}
