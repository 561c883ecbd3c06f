//! Turn-level rollout trees with entropy-guided expansion.
//!
//! Phase 1 samples `M` independent chains from the prompt. Phase 2 runs `L`
//! rounds; each round scores every non-root, non-terminal node that already
//! has a child by `s(n) = H(n) - α·|children(parent(n))|`, keeps the Top-K,
//! and re-samples from each selected node's state (the context just before
//! its action), attaching the continuation under `parent(n)`. Every round adds
//! exactly one leaf per selected node, so a tree without candidate shortfall
//! ends with `M + L·K` leaves.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample, TokenPolicy};
use crate::vocab_env::{
    Environment, Segment, Source, Token, TokenId, ANSWER_CLOSE, EOS, SEARCH_CLOSE,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    /// Initial chains `M`.
    pub initial_chains: usize,
    /// Nodes expanded per iteration `K`.
    pub beam: usize,
    /// Expansion iterations `L`.
    pub iterations: usize,
    /// Branching penalty `α`.
    pub alpha: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self { initial_chains: 10, beam: 6, iterations: 2, alpha: 0.1 }
    }
}

impl TreeConfig {
    pub fn target_leaves(&self) -> usize {
        self.initial_chains + self.iterations * self.beam
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Depth below the root; the root is turn 0.
    pub turn_index: usize,
    /// Agent tokens, then any tool-injected tokens.
    pub segment: Segment,
    /// Sampling-time log-probability of each agent token, in order.
    pub logprobs: Vec<f64>,
    pub entropy: Option<f64>,
    pub selection_count: usize,
    pub terminal: bool,
    pub truncated: bool,
}

impl TreeNode {
    pub fn is_root(&self) -> bool {
        self.parent.is_none()
    }

    pub fn agent_token_count(&self) -> usize {
        self.segment.iter().filter(|t| t.is_agent()).count()
    }
}

/// Monte-Carlo entropy estimate of a turn: mean negative sampled log-probability
/// over its agent tokens. `None` when the node has no agent tokens.
pub fn node_entropy(logprobs: &[f64]) -> Option<f64> {
    if logprobs.is_empty() {
        return None;
    }
    let sum: f64 = logprobs.iter().map(|l| -l).sum();
    Some(sum / logprobs.len() as f64)
}

/// One completed turn produced by [`rollout_from`].
#[derive(Debug, Clone, PartialEq)]
pub struct TurnDraft {
    pub segment: Segment,
    pub logprobs: Vec<f64>,
    pub terminal: bool,
    pub truncated: bool,
}

/// Episode counters at a turn boundary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EpisodeState {
    pub tool_calls: usize,
    pub agent_tokens: usize,
}

/// Samples turns from `context` until the episode terminates.
///
/// A turn ends at `SEARCH_CLOSE` (the tool output is appended), or terminally
/// at `ANSWER_CLOSE`, `EOS`, the agent-token budget, or the tool-call budget.
pub fn rollout_from<P, R>(
    env: &Environment,
    policy: &P,
    context: &[TokenId],
    mut state: EpisodeState,
    rng: &mut R,
) -> Vec<TurnDraft>
where
    P: TokenPolicy + ?Sized,
    R: Rng + ?Sized,
{
    let limits = env.limits;
    let mut ctx = context.to_vec();
    let mut turns = Vec::new();
    loop {
        let mut segment = Segment::new();
        let mut logprobs = Vec::new();
        let mut agent_ids = Vec::new();
        let (terminal, truncated) = loop {
            if state.agent_tokens >= limits.max_tokens {
                break (true, true);
            }
            let (tok, lp) = sample(policy, &ctx, rng);
            ctx.push(tok);
            agent_ids.push(tok);
            segment.push(Token::agent(tok));
            logprobs.push(lp);
            state.agent_tokens += 1;
            if tok == SEARCH_CLOSE {
                let result = env.respond_to_turn(&agent_ids);
                ctx.extend(result.iter().map(|t| t.id));
                segment.extend(result);
                state.tool_calls += 1;
                let out_of_budget = state.tool_calls >= limits.max_turns
                    || state.agent_tokens >= limits.max_tokens;
                break (out_of_budget, out_of_budget);
            }
            if tok == ANSWER_CLOSE || tok == EOS {
                break (true, false);
            }
        };
        turns.push(TurnDraft { segment, logprobs, terminal, truncated });
        if terminal {
            return turns;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub iteration: usize,
    pub available: usize,
    pub wanted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTree {
    prompt: Vec<TokenId>,
    nodes: Vec<TreeNode>,
    config: TreeConfig,
    shortfalls: Vec<Shortfall>,
}

impl RolloutTree {
    pub const ROOT: usize = 0;

    /// A tree holding only the root.
    pub fn new(prompt: Vec<TokenId>, config: TreeConfig) -> Self {
        let root = TreeNode {
            id: Self::ROOT,
            parent: None,
            children: Vec::new(),
            turn_index: 0,
            segment: Segment::new(),
            logprobs: Vec::new(),
            entropy: None,
            selection_count: 0,
            terminal: false,
            truncated: false,
        };
        Self { prompt, nodes: vec![root], config, shortfalls: Vec::new() }
    }

    /// Phase 1 and Phase 2.
    pub fn build<P, R>(
        prompt: Vec<TokenId>,
        config: TreeConfig,
        env: &Environment,
        policy: &P,
        rng: &mut R,
    ) -> Self
    where
        P: TokenPolicy + ?Sized,
        R: Rng + ?Sized,
    {
        let mut tree = Self::new(prompt, config);
        for _ in 0..config.initial_chains {
            tree.grow_from(Self::ROOT, env, policy, rng);
        }
        tree.expand(env, policy, rng);
        tree
    }

    /// Runs the `L` entropy-guided expansion rounds.
    pub fn expand<P, R>(&mut self, env: &Environment, policy: &P, rng: &mut R)
    where
        P: TokenPolicy + ?Sized,
        R: Rng + ?Sized,
    {
        let TreeConfig { beam, iterations, alpha, .. } = self.config;
        for iteration in 0..iterations {
            let available = self.candidates().len();
            if available < beam {
                log::debug!("expansion round {iteration}: {available} candidates for beam {beam}");
                self.shortfalls.push(Shortfall { iteration, available, wanted: beam });
            }
            // all scores are fixed before any branch of this round is attached
            let selected = self.select_top_k(beam, alpha);
            for id in selected {
                self.nodes[id].selection_count += 1;
                let fork = self.nodes[id].parent.expect("candidates are never the root");
                self.grow_from(fork, env, policy, rng);
            }
        }
    }

    /// Rolls out from the state after `parent` and attaches the chain under it.
    pub fn grow_from<P, R>(&mut self, parent: usize, env: &Environment, policy: &P, rng: &mut R)
    where
        P: TokenPolicy + ?Sized,
        R: Rng + ?Sized,
    {
        let context = self.context_of(parent);
        let state = self.episode_state(parent);
        let mut at = parent;
        for turn in rollout_from(env, policy, &context, state, rng) {
            at = self.add_node(at, turn);
        }
    }

    /// Appends a child of `parent`. Public so that callers can assemble trees
    /// from recorded turns.
    pub fn add_node(&mut self, parent: usize, turn: TurnDraft) -> usize {
        assert!(!self.nodes[parent].terminal, "terminal nodes take no children");
        let id = self.nodes.len();
        let entropy = node_entropy(&turn.logprobs);
        let turn_index = self.nodes[parent].turn_index + 1;
        self.nodes.push(TreeNode {
            id,
            parent: Some(parent),
            children: Vec::new(),
            turn_index,
            segment: turn.segment,
            logprobs: turn.logprobs,
            entropy,
            selection_count: 0,
            terminal: turn.terminal,
            truncated: turn.truncated,
        });
        self.nodes[parent].children.push(id);
        id
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn shortfalls(&self) -> &[Shortfall] {
        &self.shortfalls
    }

    /// Childless non-root nodes, in id order.
    pub fn leaf_ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| !n.is_root() && n.children.is_empty())
            .map(|n| n.id)
            .collect()
    }

    /// Node ids from the root down to `id`, inclusive.
    pub fn path(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut at = id;
        while let Some(p) = self.nodes[at].parent {
            path.push(p);
            at = p;
        }
        path.reverse();
        path
    }

    /// Prompt followed by every segment on the root→`id` path.
    pub fn context_of(&self, id: usize) -> Vec<TokenId> {
        let mut ctx = self.prompt.clone();
        for n in self.path(id) {
            ctx.extend(self.nodes[n].segment.iter().map(|t| t.id));
        }
        ctx
    }

    fn episode_state(&self, id: usize) -> EpisodeState {
        let path = self.path(id);
        EpisodeState {
            // every non-terminal turn ends in a tool call
            tool_calls: path.len() - 1,
            agent_tokens: path.iter().map(|&n| self.nodes[n].agent_token_count()).sum(),
        }
    }

    pub fn is_candidate(&self, id: usize) -> bool {
        let n = &self.nodes[id];
        !n.is_root() && !n.terminal && !n.children.is_empty() && n.entropy.is_some()
    }

    pub fn candidates(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&id| self.is_candidate(id)).collect()
    }

    /// `H(n) - α·|children(parent(n))|`.
    pub fn score_node(&self, id: usize, alpha: f64) -> Result<f64> {
        if !self.is_candidate(id) {
            return Err(Error::Contract(format!("node {id} is not an expansion candidate")));
        }
        let n = &self.nodes[id];
        let siblings = self.nodes[n.parent.unwrap()].children.len();
        Ok(n.entropy.unwrap() - alpha * siblings as f64)
    }

    /// The `k` best candidates by score; ties go to the lower node id.
    pub fn select_top_k(&self, k: usize, alpha: f64) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = self
            .candidates()
            .into_iter()
            .map(|id| (self.score_node(id, alpha).unwrap(), id))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, id)| id).collect()
    }

    /// Agent tokens sampled while building the tree.
    pub fn agent_tokens(&self) -> usize {
        self.nodes.iter().map(|n| n.agent_token_count()).sum()
    }

    /// Mean per-leaf agent tokens `B`, and the expected expansion budget
    /// `(M + L·K/2)·B`. Reported only.
    pub fn token_budget(&self) -> (f64, f64) {
        let leaves = self.leaf_ids();
        if leaves.is_empty() {
            return (0.0, 0.0);
        }
        let per_leaf: usize = leaves
            .iter()
            .map(|&l| self.path(l).iter().map(|&n| self.nodes[n].agent_token_count()).sum::<usize>())
            .sum();
        let b = per_leaf as f64 / leaves.len() as f64;
        let c = &self.config;
        (b, (c.initial_chains as f64 + (c.iterations * c.beam) as f64 / 2.0) * b)
    }

    /// One JSON record per node. `values`/`advantages`, when given, are indexed by node id.
    pub fn to_records(
        &self,
        tree: usize,
        values: Option<&[Option<f64>]>,
        advantages: Option<&[Option<f64>]>,
    ) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .map(|n| NodeRecord {
                tree,
                id: n.id,
                parent: n.parent,
                turn_index: n.turn_index,
                tokens: n.segment.iter().map(|t| t.id).collect(),
                tags: n.segment.iter().map(|t| t.source).collect(),
                logprobs: n.logprobs.clone(),
                entropy: n.entropy,
                selection_count: n.selection_count,
                terminal: n.terminal,
                truncated: n.truncated,
                prompt: n.is_root().then(|| self.prompt.clone()),
                config: n.is_root().then_some(self.config),
                shortfalls: n.is_root().then(|| self.shortfalls.clone()),
                value: values.and_then(|v| v[n.id]),
                advantage: advantages.and_then(|a| a[n.id]),
            })
            .collect()
    }

    pub fn to_jsonl(&self, tree: usize) -> Result<String> {
        let mut out = String::new();
        for r in self.to_records(tree, None, None) {
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Rebuilds the trees contained in a JSONL dump, ordered by tree index.
    pub fn from_jsonl(text: &str) -> Result<Vec<(usize, RolloutTree)>> {
        let mut trees: Vec<(usize, RolloutTree)> = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: NodeRecord = serde_json::from_str(line)?;
            let bad = |msg: &str| Error::Contract(format!("line {}: {msg}", line_no + 1));
            if r.tokens.len() != r.tags.len() {
                return Err(bad("tokens and tags differ in length"));
            }
            match r.parent {
                None => {
                    let (Some(prompt), Some(config)) = (r.prompt.clone(), r.config) else {
                        return Err(bad("root record lacks prompt/config"));
                    };
                    if r.id != Self::ROOT {
                        return Err(bad("root must have id 0"));
                    }
                    let mut t = RolloutTree::new(prompt, config);
                    t.nodes[0].selection_count = r.selection_count;
                    t.shortfalls = r.shortfalls.clone().unwrap_or_default();
                    trees.push((r.tree, t));
                }
                Some(parent) => {
                    let Some((_, t)) = trees.iter_mut().rev().find(|(i, _)| *i == r.tree) else {
                        return Err(bad("node precedes its tree's root"));
                    };
                    if r.id != t.nodes.len() || parent >= r.id {
                        return Err(bad("node ids must be dense and parents must come first"));
                    }
                    let segment = r
                        .tokens
                        .iter()
                        .zip(&r.tags)
                        .map(|(&id, &source)| Token { id, source })
                        .collect();
                    let id = t.add_node(
                        parent,
                        TurnDraft {
                            segment,
                            logprobs: r.logprobs.clone(),
                            terminal: r.terminal,
                            truncated: r.truncated,
                        },
                    );
                    let node = &mut t.nodes[id];
                    node.selection_count = r.selection_count;
                    node.entropy = r.entropy;
                    if node.turn_index != r.turn_index {
                        return Err(bad("turn_index disagrees with depth"));
                    }
                }
            }
        }
        trees.sort_by_key(|(i, _)| *i);
        Ok(trees)
    }
}

/// JSONL line schema for tree export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub tree: usize,
    pub id: usize,
    pub parent: Option<usize>,
    pub turn_index: usize,
    pub tokens: Vec<TokenId>,
    pub tags: Vec<Source>,
    pub logprobs: Vec<f64>,
    pub entropy: Option<f64>,
    pub selection_count: usize,
    pub terminal: bool,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TreeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortfalls: Option<Vec<Shortfall>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
}
