//! Training loop: snapshot, tree rollouts, scoring, credit, loss, update.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::credit::{assign_credit, CreditConfig, CreditedTree};
use crate::error::{Error, Result};
use crate::metrics::{estimate_turn_kl, turn_entropy};
use crate::objectives::{loss, ClipConfig, Objective, TrainRecord, Trajectory};
use crate::policy::{greedy, PolicyParams, PolicySnapshot, TokenPolicy};
use crate::rollout_tree::{rollout_from, EpisodeState, RolloutTree, TreeConfig};
use crate::vocab_env::{Environment, Segment, Task, TokenId};

/// Mixes a base seed with a path of indices into an independent stream seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = base ^ 0x6a09_e667_f3bc_c909;
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub world: u64,
    pub rollout: u64,
    pub init: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyShape {
    pub feature_buckets: usize,
    pub context_window: usize,
}

impl Default for PolicyShape {
    fn default() -> Self {
        Self { feature_buckets: 1024, context_window: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub tree: TreeConfig,
    pub credit: CreditConfig,
    pub clip: ClipConfig,
    pub learning_rate: f64,
    pub total_steps: usize,
    /// Parameter updates per rollout batch.
    pub mini_batches: usize,
    /// Hop counts drawn uniformly per prompt.
    pub hops: Vec<usize>,
    pub policy: PolicyShape,
    pub seeds: Seeds,
}

impl TrainConfig {
    pub fn new(seeds: Seeds) -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            tree: TreeConfig::default(),
            credit: CreditConfig::default(),
            clip: ClipConfig::default(),
            learning_rate: DEFAULT_LEARNING_RATE,
            total_steps: 2000,
            mini_batches: 1,
            hops: vec![1],
            policy: PolicyShape::default(),
            seeds,
        }
    }

    pub fn validate(&self, env: &Environment) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.tree.initial_chains == 0 {
            return bad("tree.initial_chains must be positive".into());
        }
        if self.tree.target_leaves() < 2 {
            return bad("tree needs M + L*K >= 2 leaves for reward normalisation".into());
        }
        if !(self.tree.alpha.is_finite() && self.tree.alpha >= 0.0) {
            return bad("tree.alpha must be finite and nonnegative".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and nonnegative".into());
        }
        if self.mini_batches == 0 {
            return bad("mini_batches must be positive".into());
        }
        if !(self.credit.std_epsilon > 0.0) {
            return bad("credit.std_epsilon must be positive".into());
        }
        if self.policy.feature_buckets == 0 || self.policy.context_window == 0 {
            return bad("policy.feature_buckets and policy.context_window must be positive".into());
        }
        if self.hops.is_empty() {
            return bad("hops must list at least one hop count".into());
        }
        for &h in &self.hops {
            if h == 0 || h + 1 > env.limits.max_turns {
                return bad(format!("hops entry {h} outside [1, max_turns - 1]"));
            }
        }
        self.clip.validate()
    }
}

pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_BATCH_SIZE: usize = 8;

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub mean_reward: f64,
    pub success: f64,
    pub objective: f64,
    pub clip_fraction: f64,
    pub h_turn: f64,
    pub mean_entropy: f64,
    pub leaves: usize,
    pub ms: u64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str =
        "step,mean_reward,success,J,clip_frac,h_turn,mean_entropy,leaves,ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            self.success,
            self.objective,
            self.clip_fraction,
            self.h_turn,
            self.mean_entropy,
            self.leaves,
            self.ms
        )
    }
}

/// Everything produced by one step, for inspection and export.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub report: StepReport,
    pub tasks: Vec<Task>,
    pub trees: Vec<RolloutTree>,
}

pub struct Trainer {
    config: TrainConfig,
    env: Environment,
    params: PolicyParams,
    step: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    /// Builds a trainer with a zero-initialised policy.
    pub fn new(config: TrainConfig, env: Environment) -> Result<Self> {
        config.validate(&env)?;
        let params = PolicyParams::new(
            config.policy.feature_buckets,
            env.vocab().size(),
            config.policy.context_window,
            config.seeds.init,
        )?;
        Ok(Self { config, env, params, step: 0, pool: None })
    }

    pub fn with_params(mut self, params: PolicyParams) -> Result<Self> {
        if params.vocab_size() != self.env.vocab().size() {
            return Err(Error::Config("checkpoint vocabulary does not match the environment".into()));
        }
        self.params = params;
        Ok(self)
    }

    /// Rollouts fan out across `workers` threads; 1 keeps everything on the caller's thread.
    pub fn with_workers(mut self, workers: usize) -> Result<Self> {
        self.pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::Config(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(self)
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Tasks for `step`, one per prompt slot.
    pub fn tasks_for(&self, step: usize) -> Result<Vec<Task>> {
        (0..self.config.batch_size)
            .map(|b| {
                let seed = derive_seed(self.config.seeds.rollout, &[0, step as u64, b as u64]);
                let hops = self.config.hops[(seed % self.config.hops.len() as u64) as usize];
                self.env.generate_task(hops, seed)
            })
            .collect()
    }

    /// Builds one tree per task with the given sampling policy.
    pub fn build_trees<P>(&self, step: usize, tasks: &[Task], policy: &P) -> Vec<RolloutTree>
    where
        P: TokenPolicy + Sync,
    {
        let build = |(b, task): (usize, &Task)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.config.seeds.rollout,
                &[1, step as u64, b as u64],
            ));
            RolloutTree::build(task.question_tokens.clone(), self.config.tree, &self.env, policy, &mut rng)
        };
        match &self.pool {
            Some(pool) => pool.install(|| tasks.par_iter().enumerate().map(build).collect()),
            None => tasks.iter().enumerate().map(build).collect(),
        }
    }

    pub fn train_step(&mut self) -> Result<StepOutput> {
        let started = Instant::now();
        let step = self.step;
        let snapshot: PolicySnapshot = self.params.snapshot();
        let tasks = self.tasks_for(step)?;
        let trees = self.build_trees(step, &tasks, &snapshot);

        let mut rewards_all = Vec::new();
        let mut trajectories = Vec::new();
        let mut credited = Vec::with_capacity(trees.len());
        for (tree, task) in trees.iter().zip(&tasks) {
            let rewards: Vec<f64> = tree
                .leaf_ids()
                .iter()
                .map(|&leaf| self.env.score_outcome(task, &leaf_response(tree, leaf)))
                .collect();
            let c = assign_credit(tree, &rewards, &self.config.credit)?;
            rewards_all.extend_from_slice(&rewards);
            let first = trajectories.len();
            trajectories.extend(flatten_tree(&c, self.config.clip.objective, first));
            credited.push(c);
        }
        for traj in &trajectories {
            verify_token_identity(traj, &trees)?;
        }

        let mut total_objective = 0.0;
        let (mut clipped, mut masked) = (0usize, 0usize);
        let chunk = trajectories.len().div_ceil(self.config.mini_batches).max(1);
        let mut updates = 0;
        for batch in trajectories.chunks(chunk) {
            let report = loss(batch, &self.params, &self.config.clip)?;
            if !report.gradient.is_finite() || !report.objective.is_finite() {
                let mut dump = String::new();
                for (i, c) in credited.iter().enumerate() {
                    dump.push_str(&c.to_jsonl(i)?);
                }
                return Err(Error::NonFiniteGradient { step, dump });
            }
            self.params.apply_gradient(&report.gradient, self.config.learning_rate);
            total_objective += report.objective;
            clipped += report.clipped_tokens;
            masked += report.masked_tokens;
            updates += 1;
        }

        let kls = trajectories
            .iter()
            .map(|t| estimate_turn_kl(t, &self.params))
            .collect::<Result<Vec<_>>>()?;
        let h_turn = if kls.is_empty() { 0.0 } else { turn_entropy(&kls)? };

        let entropies: Vec<f64> = trees
            .iter()
            .flat_map(|t| t.nodes().iter().filter_map(|n| n.entropy))
            .collect();
        let n_rewards = rewards_all.len().max(1) as f64;
        let report = StepReport {
            step,
            mean_reward: rewards_all.iter().sum::<f64>() / n_rewards,
            success: rewards_all.iter().filter(|&&r| r == 1.0).count() as f64 / n_rewards,
            objective: if updates == 0 { 0.0 } else { total_objective / updates as f64 },
            clip_fraction: if masked == 0 { 0.0 } else { clipped as f64 / masked as f64 },
            h_turn,
            mean_entropy: if entropies.is_empty() {
                0.0
            } else {
                entropies.iter().sum::<f64>() / entropies.len() as f64
            },
            leaves: rewards_all.len(),
            ms: started.elapsed().as_millis() as u64,
        };
        drop(credited);
        self.step += 1;
        Ok(StepOutput { report, tasks, trees })
    }

    /// Greedy success rate of the current parameters.
    pub fn evaluate(&self, n_tasks: usize, hops: usize, rng_seed: u64) -> Result<f64> {
        evaluate(&self.params, &self.env, n_tasks, hops, rng_seed)
    }
}

/// Agent and tool tokens on the root→leaf path.
pub fn leaf_response(tree: &RolloutTree, leaf: usize) -> Segment {
    tree.path(leaf)
        .into_iter()
        .flat_map(|n| tree.node(n).segment.iter().copied())
        .collect()
}

/// One trajectory per leaf. Token-level (GRPO) training uses the leaf's
/// normalised reward as every token's advantage; the other objectives use the
/// advantage of the node holding the token.
pub fn flatten_tree(credited: &CreditedTree<'_>, objective: Objective, first_id: usize) -> Vec<Trajectory> {
    let tree = credited.tree();
    tree.leaf_ids()
        .into_iter()
        .enumerate()
        .map(|(i, leaf)| {
            let leaf_value = credited.value(leaf).expect("leaf values are set");
            let mut records = Vec::new();
            for n in tree.path(leaf).into_iter().skip(1) {
                let node = tree.node(n);
                let advantage = match objective {
                    Objective::Grpo => leaf_value,
                    _ => credited.advantage(n).expect("non-root nodes carry advantages"),
                };
                let mut lps = node.logprobs.iter();
                for tok in &node.segment {
                    let mask = tok.is_agent();
                    records.push(TrainRecord {
                        token: tok.id,
                        turn: node.turn_index,
                        mask,
                        advantage,
                        old_logprob: if mask { lps.next().copied() } else { None },
                    });
                }
            }
            Trajectory { id: first_id + i, prompt: tree.prompt().to_vec(), records }
        })
        .collect()
}

/// Checks that a trajectory's token ids and old log-probabilities are exactly
/// those stored in the tree at sampling time.
fn verify_token_identity(traj: &Trajectory, trees: &[RolloutTree]) -> Result<()> {
    let mut offset = 0;
    for tree in trees {
        let leaves = tree.leaf_ids();
        if traj.id < offset + leaves.len() {
            let leaf = leaves[traj.id - offset];
            let mismatch = |position| Error::TokenMismatch { trajectory: traj.id, position };
            if traj.prompt != tree.prompt() {
                return Err(mismatch(0));
            }
            let mut pos = 0;
            for n in tree.path(leaf).into_iter().skip(1) {
                let node = tree.node(n);
                let mut lps = node.logprobs.iter();
                for tok in &node.segment {
                    let rec = traj.records.get(pos).ok_or_else(|| mismatch(pos))?;
                    let lp = if tok.is_agent() { lps.next().copied() } else { None };
                    if rec.token != tok.id
                        || rec.mask != tok.is_agent()
                        || rec.old_logprob.map(f64::to_bits) != lp.map(f64::to_bits)
                    {
                        return Err(mismatch(pos));
                    }
                    pos += 1;
                }
            }
            return if pos == traj.records.len() { Ok(()) } else { Err(mismatch(pos)) };
        }
        offset += leaves.len();
    }
    Err(Error::TokenMismatch { trajectory: traj.id, position: 0 })
}

/// Policy wrapper that always puts all mass on the argmax token.
struct Greedy<'a, P: ?Sized>(&'a P);

impl<P: TokenPolicy + ?Sized> TokenPolicy for Greedy<'_, P> {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    fn logprobs(&self, context: &[TokenId]) -> Vec<f64> {
        let (best, _) = greedy(self.0, context);
        let mut lp = vec![f64::NEG_INFINITY; self.0.vocab_size()];
        lp[best.index()] = 0.0;
        lp
    }
}

/// Greedy-decoded success rate (reward 1) over `n_tasks` fresh tasks.
pub fn evaluate<P: TokenPolicy + ?Sized>(
    policy: &P,
    env: &Environment,
    n_tasks: usize,
    hops: usize,
    rng_seed: u64,
) -> Result<f64> {
    if n_tasks == 0 {
        return Err(Error::Config("n_tasks must be at least 1".into()));
    }
    let greedy_policy = Greedy(policy);
    // greedy decoding never consults the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut solved = 0usize;
    for i in 0..n_tasks {
        let task = env.generate_task(hops, derive_seed(rng_seed, &[2, i as u64]))?;
        let turns = rollout_from(env, &greedy_policy, &task.question_tokens, EpisodeState::default(), &mut rng);
        let response: Segment = turns.into_iter().flat_map(|t| t.segment).collect();
        if env.score_outcome(&task, &response) == 1.0 {
            solved += 1;
        }
    }
    Ok(solved as f64 / n_tasks as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab_env::{EpisodeLimits, OptimalAgent, Vocab, World};

    fn env() -> Environment {
        let vocab = Vocab::new(16, 4).unwrap();
        Environment::new(World::new(7, vocab), EpisodeLimits::default()).unwrap()
    }

    fn config() -> TrainConfig {
        let mut c = TrainConfig::new(Seeds { world: 7, rollout: 3, init: 1 });
        c.batch_size = 2;
        c.learning_rate = 1.0;
        c
    }

    #[test]
    fn optimal_agent_solves_everything() {
        let env = env();
        let agent = OptimalAgent::new(*env.vocab());
        for hops in 1..=5 {
            assert_eq!(evaluate(&agent, &env, 50, hops, 9).unwrap(), 1.0);
        }
    }

    #[test]
    fn uniform_policy_rarely_succeeds() {
        let env = env();
        let p = PolicyParams::new(1024, env.vocab().size(), 4, 0).unwrap();
        let rate = evaluate(&p, &env, 500, 1, 4).unwrap();
        assert!(rate < 0.05);
        assert_eq!(rate, evaluate(&p, &env, 500, 1, 4).unwrap());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut c = config();
        c.learning_rate = 0.0;
        let mut t = Trainer::new(c, env()).unwrap();
        let before = t.params().clone();
        let out = t.train_step().unwrap();
        assert_eq!(t.params(), &before);
        assert_eq!(out.report.leaves, out.trees.iter().map(|t| t.leaf_ids().len()).sum::<usize>());
    }

    #[test]
    fn constant_rewards_give_zero_update() {
        // the tool budget of 1 forces every leaf to end truncated at the first search
        // or to answer in turn one; with a 1-token budget every episode truncates at -1
        let vocab = Vocab::new(16, 4).unwrap();
        let env = Environment::new(World::new(7, vocab), EpisodeLimits { max_turns: 6, max_tokens: 1 }).unwrap();
        let mut t = Trainer::new(config(), env).unwrap();
        let before = t.params().clone();
        let out = t.train_step().unwrap();
        assert_eq!(out.report.mean_reward, -1.0);
        assert_eq!(t.params(), &before);
    }

    #[test]
    fn steps_replay_identically() {
        let run = |workers| {
            let mut t = Trainer::new(config(), env()).unwrap().with_workers(workers).unwrap();
            (0..3)
                .map(|_| {
                    let mut r = t.train_step().unwrap().report;
                    r.ms = 0;
                    r
                })
                .collect::<Vec<_>>()
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(3));
    }

    #[test]
    fn flattened_records_mirror_tree() {
        let mut t = Trainer::new(config(), env()).unwrap();
        let out = t.train_step().unwrap();
        let tree = &out.trees[0];
        let leaves = tree.leaf_ids();
        let rewards: Vec<f64> = leaves.iter().map(|&l| t.env().score_outcome(&out.tasks[0], &leaf_response(tree, l))).collect();
        let c = assign_credit(tree, &rewards, &CreditConfig::default()).unwrap();
        let trajs = flatten_tree(&c, Objective::Atpo, 0);
        assert_eq!(trajs.len(), leaves.len());
        for traj in &trajs {
            verify_token_identity(traj, &out.trees).unwrap();
        }
        let mut broken = trajs[0].clone();
        broken.records[0].token = TokenId(broken.records[0].token.0 ^ 1);
        assert!(matches!(verify_token_identity(&broken, &out.trees), Err(Error::TokenMismatch { .. })));
    }

    #[test]
    fn validation() {
        let mut c = config();
        c.tree.initial_chains = 1;
        c.tree.iterations = 0;
        assert!(Trainer::new(c, env()).is_err());
        let mut c = config();
        c.hops = vec![6];
        assert!(Trainer::new(c, env()).is_err());
    }
}
