//! Training diagnostics: per-turn KL estimates and the turn-entropy metric.

use crate::error::{Error, Result};
use crate::objectives::{score_trajectory, Trajectory};
use crate::policy::PolicyParams;

/// Per-turn KL estimates of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnKl {
    /// `(turn, KL_j)` for each turn holding agent tokens.
    pub per_turn: Vec<(usize, f64)>,
}

impl TurnKl {
    pub fn sequence(&self) -> f64 {
        self.per_turn.iter().map(|(_, kl)| kl).sum()
    }
}

/// `ρ - 1 - log ρ` summed over the agent tokens of each turn, with
/// `ρ = π_θ(y_t) / π_θold(y_t)` against the stored sampling log-probabilities.
pub fn estimate_turn_kl(traj: &Trajectory, params: &PolicyParams) -> Result<TurnKl> {
    let scored = score_trajectory(traj, params)?;
    let mut per_turn: Vec<(usize, f64)> = Vec::new();
    for &(t, new, _) in &scored.tokens {
        let r = &traj.records[t];
        let log_rho = new - r.old_logprob.expect("masked tokens carry old logprobs");
        // exp_m1 keeps the term accurate and nonnegative near ρ = 1
        let term = (log_rho.exp_m1() - log_rho).max(0.0);
        match per_turn.last_mut() {
            Some((turn, kl)) if *turn == r.turn => *kl += term,
            _ => per_turn.push((r.turn, term)),
        }
    }
    Ok(TurnKl { per_turn })
}

const KL_FLOOR: f64 = 1e-12;

/// Normalised entropy of the softmax of `KL_j / KL_seq` for one trajectory.
pub fn turn_entropy_contribution(kl: &TurnKl) -> f64 {
    let n = kl.per_turn.len();
    if n <= 1 {
        return 0.0;
    }
    let seq = kl.sequence();
    if seq < KL_FLOOR {
        return 1.0;
    }
    let logits: Vec<f64> = kl.per_turn.iter().map(|(_, k)| k / seq).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let entropy: f64 = logits
        .iter()
        .map(|l| {
            let log_p = l - max - z.ln();
            -log_p.exp() * log_p
        })
        .sum();
    (entropy / (n as f64).ln()).clamp(0.0, 1.0)
}

/// Batch mean of per-trajectory contributions; in `[0, 1]`.
pub fn turn_entropy(batch: &[TurnKl]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("turn entropy of an empty batch".into()));
    }
    let sum: f64 = batch.iter().map(turn_entropy_contribution).sum();
    Ok(sum / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::TrainRecord;
    use crate::vocab_env::TokenId;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kl(values: &[f64]) -> TurnKl {
        TurnKl { per_turn: values.iter().enumerate().map(|(i, &v)| (i + 1, v)).collect() }
    }

    #[test]
    fn contribution_cases() {
        assert!((turn_entropy_contribution(&kl(&[0.2, 0.2])) - 1.0).abs() < 1e-12);
        assert_eq!(turn_entropy_contribution(&kl(&[0.7])), 0.0);
        assert_eq!(turn_entropy_contribution(&kl(&[0.0, 0.0, 0.0])), 1.0);
        assert!(turn_entropy(&[]).is_err());
    }

    #[test]
    fn skew_lowers_contribution_monotonically() {
        let mut prev = 1.0 + 1e-12;
        for dominant in [1.0, 2.0, 5.0, 20.0, 1e3, 1e6] {
            let c = turn_entropy_contribution(&kl(&[dominant, 1.0, 1.0]));
            assert!(c < prev, "{dominant}: {c} !< {prev}");
            prev = c;
        }
        assert!(prev < 1.0);
    }

    proptest! {
        #[test]
        fn bounded(batch in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 1..6), 1..10)) {
            let batch: Vec<TurnKl> = batch.iter().map(|v| kl(v)).collect();
            let h = turn_entropy(&batch).unwrap();
            prop_assert!((0.0..=1.0).contains(&h));
        }
    }

    #[test]
    fn kl_matches_direct_recomputation() {
        let v = 6;
        let mut old = PolicyParams::new(32, v, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for w in old.weights_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        let mut new = old.clone();
        for w in new.weights_mut() {
            *w += rng.gen_range(-0.3..0.3);
        }
        let records: Vec<TrainRecord> = (0..12)
            .map(|i| TrainRecord {
                token: TokenId(rng.gen_range(0..v as u32)),
                turn: 1 + i / 4,
                mask: i % 4 != 3,
                advantage: 0.0,
                old_logprob: None,
            })
            .collect();
        let mut traj = Trajectory { id: 0, prompt: vec![TokenId(0)], records };
        traj.fill_old_logprobs(&old);

        assert!(estimate_turn_kl(&traj, &old).unwrap().per_turn.iter().all(|(_, k)| *k == 0.0));

        let est = estimate_turn_kl(&traj, &new).unwrap();
        let seq = traj.sequence();
        let mut direct = vec![0.0; 3];
        for (t, r) in traj.records.iter().enumerate() {
            if !r.mask {
                continue;
            }
            let ctx = &seq[..1 + t];
            let p_new = crate::policy::TokenPolicy::logprobs(&new, ctx)[r.token.index()].exp();
            let p_old = crate::policy::TokenPolicy::logprobs(&old, ctx)[r.token.index()].exp();
            let rho = p_new / p_old;
            assert!(rho - 1.0 - rho.ln() >= 0.0);
            direct[r.turn - 1] += rho - 1.0 - rho.ln();
        }
        assert_eq!(est.per_turn.len(), 3);
        for ((turn, k), d) in est.per_turn.iter().zip(&direct) {
            assert!((k - d).abs() < 1e-12, "turn {turn}: {k} vs {d}");
        }
    }
}
