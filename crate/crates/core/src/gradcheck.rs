//! Finite-difference verification of the surrogate gradients.
//!
//! The reference value is computed here from scratch with the policy's
//! log-probabilities only: the length-normalised unit ratio is a stop-gradient
//! factor, so around an anchor `θ` the objective being differentiated is
//!
//! ```text
//! J(θ') = 1/G Σ_i 1/|y_i| Σ_t M_it · min(s'_it A_it, clip(s'_it) A_it),
//! s'_it = s_unit(θ) · π_θ'(y_t) / π_θ(y_t)
//! ```
//!
//! whose derivative at `θ' = θ` is exactly the analytic surrogate gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::objectives::{loss, ClipConfig, LengthNorm, Objective, TrainRecord, Trajectory};
use crate::policy::{PolicyParams, TokenPolicy};
use crate::trainer::derive_seed;
use crate::vocab_env::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Negative control: perturbs one analytic gradient entry per instance.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { instances: 100, seed: 0, step: 1e-5, tolerance: 1e-4, corrupt: false }
    }
}

/// Relative error with a small absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub instance: usize,
    pub bucket: usize,
    pub token: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveCheck {
    pub objective: Objective,
    pub max_rel_error: f64,
    pub worst: Option<Worst>,
    pub coordinates: usize,
}

impl ObjectiveCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// A randomized small problem: current and frozen parameters, trajectories
/// with stored old log-probabilities, and clip settings.
#[derive(Debug, Clone)]
pub struct Instance {
    pub theta: PolicyParams,
    pub old: PolicyParams,
    pub trajectories: Vec<Trajectory>,
    pub clip: ClipConfig,
}

/// F ≤ 64, V ≤ 16, ≤ 4 trajectories of ≤ 4 turns, ratios kept away from the
/// clip boundaries so that central differences never straddle a kink.
pub fn random_instance(seed: u64, objective: Objective) -> Instance {
    for attempt in 0u64.. {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[attempt]));
        let f = rng.gen_range(8..=64);
        let v = rng.gen_range(4..=16);
        let c = rng.gen_range(1..=4);
        let mut old = PolicyParams::new(f, v, c, rng.gen()).unwrap();
        for w in old.weights_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        let mut theta = old.clone();
        for w in theta.weights_mut() {
            *w += rng.gen_range(-0.15..0.15);
        }
        let eps = rng.gen_range(0.02..0.3);
        let clip = ClipConfig {
            eps_low: eps,
            eps_high: if objective == Objective::Grpo { eps } else { rng.gen_range(0.02..0.3) },
            objective,
            length_norm: if rng.gen_bool(0.5) { LengthNorm::AllTokens } else { LengthNorm::MaskedTokens },
        };
        let prompt_len = rng.gen_range(0..3);
        let trajectories: Vec<Trajectory> = (0..rng.gen_range(1..=4))
            .map(|id| {
                let mut records = Vec::new();
                for turn in 1..=rng.gen_range(1..=4) {
                    let a: f64 = rng.gen_range(-1.5..1.5);
                    for _ in 0..rng.gen_range(1..=4) {
                        records.push(record(&mut rng, v, turn, true, a));
                    }
                    for _ in 0..rng.gen_range(0..=3) {
                        records.push(record(&mut rng, v, turn, false, a));
                    }
                }
                let mut t = Trajectory {
                    id,
                    prompt: (0..prompt_len).map(|_| TokenId(rng.gen_range(0..v as u32))).collect(),
                    records,
                };
                t.fill_old_logprobs(&old);
                t
            })
            .collect();
        let inst = Instance { theta, old, trajectories, clip };
        if away_from_kinks(&inst, 1e-3) {
            return inst;
        }
    }
    unreachable!()
}

fn record(rng: &mut ChaCha8Rng, v: usize, turn: usize, mask: bool, advantage: f64) -> TrainRecord {
    TrainRecord {
        token: TokenId(rng.gen_range(0..v as u32)),
        turn,
        mask,
        advantage,
        old_logprob: None,
    }
}

/// Ratio unit of each masked token, as `(record index, unit key)`.
fn units(objective: Objective, traj: &Trajectory) -> Vec<(usize, usize)> {
    traj.records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.mask)
        .map(|(t, r)| {
            let key = match objective {
                Objective::Grpo => t,
                Objective::Atpo => r.turn,
                Objective::Gspo => usize::MAX,
            };
            (t, key)
        })
        .collect()
}

fn token_logprobs(params: &PolicyParams, traj: &Trajectory) -> Vec<f64> {
    let seq = traj.sequence();
    let p = traj.prompt.len();
    (0..traj.records.len())
        .map(|t| params.logprobs(&seq[..p + t])[traj.records[t].token.index()])
        .collect()
}

/// Unit ratio at the anchor for every masked record (NaN elsewhere).
fn anchor_ratios(objective: Objective, traj: &Trajectory, anchor_lp: &[f64]) -> Vec<f64> {
    let u = units(objective, traj);
    let mut out = vec![f64::NAN; traj.records.len()];
    for &(t, key) in &u {
        let members: Vec<usize> = u.iter().filter(|(_, k)| *k == key).map(|(i, _)| *i).collect();
        let mean = members
            .iter()
            .map(|&i| anchor_lp[i] - traj.records[i].old_logprob.unwrap())
            .sum::<f64>()
            / members.len() as f64;
        out[t] = mean.exp();
    }
    out
}

fn away_from_kinks(inst: &Instance, margin: f64) -> bool {
    let (lo, hi) = (1.0 - inst.clip.eps_low, 1.0 + inst.clip.eps_high);
    inst.trajectories.iter().all(|traj| {
        let lp = token_logprobs(&inst.theta, traj);
        anchor_ratios(inst.clip.objective, traj, &lp)
            .iter()
            .filter(|s| !s.is_nan())
            .all(|s| (s - lo).abs() > margin && (s - hi).abs() > margin)
    })
}

/// Surrogate objective at `theta_prime` with stop-gradient factors frozen at `anchor`.
pub fn surrogate_value(inst: &Instance, anchor: &PolicyParams, theta_prime: &PolicyParams) -> f64 {
    let clip = &inst.clip;
    let (lo, hi) = (1.0 - clip.eps_low, 1.0 + clip.eps_high);
    let g = inst.trajectories.len() as f64;
    let mut j = 0.0;
    for traj in &inst.trajectories {
        let anchor_lp = token_logprobs(anchor, traj);
        let prime_lp = token_logprobs(theta_prime, traj);
        let s_unit = anchor_ratios(clip.objective, traj, &anchor_lp);
        let norm = match clip.length_norm {
            LengthNorm::AllTokens => traj.records.len(),
            LengthNorm::MaskedTokens => traj.masked_len(),
        } as f64;
        let mut sum = 0.0;
        for (t, r) in traj.records.iter().enumerate() {
            if !r.mask {
                continue;
            }
            let s = s_unit[t] * (prime_lp[t] - anchor_lp[t]).exp();
            sum += (s * r.advantage).min(s.clamp(lo, hi) * r.advantage);
        }
        j += sum / norm;
    }
    j / g
}

/// Max relative error of one instance's analytic gradient against central differences.
pub fn check_instance(inst: &Instance, step: f64, corrupt: bool) -> Result<(f64, Option<(usize, usize, f64, f64)>)> {
    let report = loss(&inst.trajectories, &inst.theta, &inst.clip)?;
    let mut analytic = report.gradient;
    let v = inst.theta.vocab_size();
    if corrupt {
        let (idx, _) = analytic
            .data
            .iter()
            .enumerate()
            .fold((0, 0.0), |best, (i, g)| if g.abs() > best.1 { (i, g.abs()) } else { best });
        analytic.data[idx] = analytic.data[idx] * 1.01 + 1e-3;
    }
    let mut buckets: Vec<usize> = inst
        .trajectories
        .iter()
        .flat_map(|t| {
            let seq = t.sequence();
            let p = t.prompt.len();
            (0..t.records.len())
                .flat_map(|i| inst.theta.features(&seq[..p + i]))
                .collect::<Vec<_>>()
        })
        .collect();
    buckets.sort_unstable();
    buckets.dedup();

    let mut worst: Option<(usize, usize, f64, f64)> = None;
    let mut max_err = 0.0;
    let mut probe = inst.theta.clone();
    for &b in &buckets {
        for tok in 0..v {
            let w0 = inst.theta.weight(b, tok);
            *probe.weight_mut(b, tok) = w0 + step;
            let up = surrogate_value(inst, &inst.theta, &probe);
            *probe.weight_mut(b, tok) = w0 - step;
            let down = surrogate_value(inst, &inst.theta, &probe);
            *probe.weight_mut(b, tok) = w0;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(b, tok);
            let err = relative_error(a, numeric);
            if err > max_err || worst.is_none() {
                max_err = err.max(max_err);
                worst = Some((b, tok, a, numeric));
            }
        }
    }
    Ok((max_err, worst))
}

/// Runs the suite over all three objectives.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<Vec<ObjectiveCheck>> {
    Objective::ALL
        .iter()
        .map(|&objective| {
            let mut check = ObjectiveCheck { objective, max_rel_error: 0.0, worst: None, coordinates: 0 };
            for i in 0..opts.instances {
                let inst = random_instance(derive_seed(opts.seed, &[objective as u64, i as u64]), objective);
                let (err, worst) = check_instance(&inst, opts.step, opts.corrupt)?;
                check.coordinates += 1;
                if err >= check.max_rel_error {
                    check.max_rel_error = err;
                    check.worst = worst.map(|(bucket, token, analytic, numeric)| Worst {
                        instance: i,
                        bucket,
                        token,
                        analytic,
                        numeric,
                    });
                }
            }
            Ok(check)
        })
        .collect()
}
