//! Token vocabulary and the synthetic multi-hop lookup environment.
//!
//! The environment stands in for a search tool plus an answer verifier. A
//! [`World`] holds one pseudorandom permutation of the entities per relation,
//! so `facts(relation, entity)` is total. A [`Task`] asks for the entity at
//! the end of a relation chain starting from a given entity.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TokenPolicy;

/// Integer token identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Who produced a token inside a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Agent,
    Tool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Token {
    pub id: TokenId,
    pub source: Source,
}

impl Token {
    pub fn agent(id: TokenId) -> Self {
        Self { id, source: Source::Agent }
    }

    pub fn tool(id: TokenId) -> Self {
        Self { id, source: Source::Tool }
    }

    pub fn is_agent(&self) -> bool {
        self.source == Source::Agent
    }
}

/// A contiguous run of tagged tokens.
pub type Segment = Vec<Token>;

pub const SEARCH_OPEN: TokenId = TokenId(0);
pub const SEARCH_CLOSE: TokenId = TokenId(1);
pub const RESULT_OPEN: TokenId = TokenId(2);
pub const RESULT_CLOSE: TokenId = TokenId(3);
pub const ANSWER_OPEN: TokenId = TokenId(4);
pub const ANSWER_CLOSE: TokenId = TokenId(5);
pub const THINK: TokenId = TokenId(6);
pub const EOS: TokenId = TokenId(7);

const CONTROL_COUNT: u32 = 8;

/// Layout: the eight control tokens, then entities, then relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    entity_count: u32,
    relation_count: u32,
}

impl Vocab {
    pub fn new(entity_count: usize, relation_count: usize) -> Result<Self> {
        if entity_count == 0 || relation_count == 0 {
            return Err(Error::Config(
                "entity_count and relation_count must be positive".into(),
            ));
        }
        Ok(Self {
            entity_count: entity_count as u32,
            relation_count: relation_count as u32,
        })
    }

    pub fn size(&self) -> usize {
        (CONTROL_COUNT + self.entity_count + self.relation_count) as usize
    }

    pub fn entity_count(&self) -> usize {
        self.entity_count as usize
    }

    pub fn relation_count(&self) -> usize {
        self.relation_count as usize
    }

    pub fn entity(&self, i: usize) -> TokenId {
        assert!(i < self.entity_count(), "entity index {i} out of range");
        TokenId(CONTROL_COUNT + i as u32)
    }

    pub fn relation(&self, i: usize) -> TokenId {
        assert!(i < self.relation_count(), "relation index {i} out of range");
        TokenId(CONTROL_COUNT + self.entity_count + i as u32)
    }

    /// Entity index of `t`, if it is an entity token.
    pub fn entity_index(&self, t: TokenId) -> Option<usize> {
        let lo = CONTROL_COUNT;
        (lo..lo + self.entity_count)
            .contains(&t.0)
            .then(|| (t.0 - lo) as usize)
    }

    pub fn relation_index(&self, t: TokenId) -> Option<usize> {
        let lo = CONTROL_COUNT + self.entity_count;
        (lo..lo + self.relation_count)
            .contains(&t.0)
            .then(|| (t.0 - lo) as usize)
    }

    pub fn is_control(&self, t: TokenId) -> bool {
        t.0 < CONTROL_COUNT
    }

    /// Human-readable name, e.g. `E3`, `R0`, `<search>`.
    pub fn name(&self, t: TokenId) -> String {
        if let Some(e) = self.entity_index(t) {
            return format!("E{e}");
        }
        if let Some(r) = self.relation_index(t) {
            return format!("R{r}");
        }
        match t {
            SEARCH_OPEN => "<search>".into(),
            SEARCH_CLOSE => "</search>".into(),
            RESULT_OPEN => "<result>".into(),
            RESULT_CLOSE => "</result>".into(),
            ANSWER_OPEN => "<answer>".into(),
            ANSWER_CLOSE => "</answer>".into(),
            THINK => "<think>".into(),
            EOS => "<eos>".into(),
            _ => format!("?{}", t.0),
        }
    }
}

/// Deterministic fact table: one entity permutation per relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct World {
    seed: u64,
    vocab: Vocab,
    // tables[r][e] = index of facts(R_r, E_e)
    tables: Vec<Vec<u32>>,
}

impl World {
    pub fn new(seed: u64, vocab: Vocab) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables = (0..vocab.relation_count())
            .map(|_| {
                let mut perm: Vec<u32> = (0..vocab.entity_count() as u32).collect();
                perm.shuffle(&mut rng);
                perm
            })
            .collect();
        Self { seed, vocab, tables }
    }

    /// Builds a world from explicit tables, `tables[r][e]` being the entity index of
    /// `facts(R_r, E_e)`. Every table must cover all entities.
    pub fn from_tables(seed: u64, vocab: Vocab, tables: Vec<Vec<u32>>) -> Result<Self> {
        let ok = tables.len() == vocab.relation_count()
            && tables.iter().all(|t| {
                t.len() == vocab.entity_count()
                    && t.iter().all(|&e| (e as usize) < vocab.entity_count())
            });
        if !ok {
            return Err(Error::Config("fact tables do not match the vocabulary".into()));
        }
        Ok(Self { seed, vocab, tables })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn facts(&self, relation: TokenId, entity: TokenId) -> TokenId {
        let r = self.vocab.relation_index(relation).expect("not a relation token");
        let e = self.vocab.entity_index(entity).expect("not an entity token");
        self.vocab.entity(self.tables[r][e] as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    /// Relation chain `r_1..r_h` followed by the start entity.
    pub question_tokens: Vec<TokenId>,
    pub hops: usize,
    pub gold_answer: TokenId,
}

impl Task {
    pub fn relations(&self) -> &[TokenId] {
        &self.question_tokens[..self.hops]
    }

    pub fn start_entity(&self) -> TokenId {
        self.question_tokens[self.hops]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToolCall {
    pub relation: TokenId,
    pub entity: TokenId,
}

/// Per-episode truncation limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeLimits {
    /// Maximum tool calls per episode.
    pub max_turns: usize,
    /// Maximum agent-generated tokens per episode.
    pub max_tokens: usize,
}

impl Default for EpisodeLimits {
    fn default() -> Self {
        Self { max_turns: 6, max_tokens: 48 }
    }
}

/// World plus episode limits. Immutable and shareable across rollout workers.
#[derive(Debug, Clone)]
pub struct Environment {
    pub world: World,
    pub limits: EpisodeLimits,
}

impl Environment {
    pub fn new(world: World, limits: EpisodeLimits) -> Result<Self> {
        if limits.max_turns == 0 || limits.max_tokens == 0 {
            return Err(Error::Config("max_turns and max_tokens must be positive".into()));
        }
        Ok(Self { world, limits })
    }

    pub fn vocab(&self) -> &Vocab {
        self.world.vocab()
    }

    pub fn generate_task(&self, hops: usize, rng_seed: u64) -> Result<Task> {
        if hops == 0 || hops + 1 > self.limits.max_turns {
            return Err(Error::Config(format!(
                "hops must lie in [1, {}], got {hops}",
                self.limits.max_turns.saturating_sub(1)
            )));
        }
        let vocab = self.world.vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let relations: Vec<TokenId> = (0..hops)
            .map(|_| vocab.relation(rng.gen_range(0..vocab.relation_count())))
            .collect();
        let start = vocab.entity(rng.gen_range(0..vocab.entity_count()));
        let gold_answer = relations
            .iter()
            .fold(start, |e, &r| self.world.facts(r, e));
        let mut question_tokens = relations;
        question_tokens.push(start);
        Ok(Task { question_tokens, hops, gold_answer })
    }

    pub fn tool_respond(&self, call: ToolCall) -> Segment {
        vec![
            Token::tool(RESULT_OPEN),
            Token::tool(self.world.facts(call.relation, call.entity)),
            Token::tool(RESULT_CLOSE),
        ]
    }

    /// Parses the tool call closed by the final `SEARCH_CLOSE` of `turn_tokens`.
    /// The block must be exactly `SEARCH_OPEN relation entity SEARCH_CLOSE`.
    pub fn parse_tool_call(&self, turn_tokens: &[TokenId]) -> Option<ToolCall> {
        let vocab = self.vocab();
        match turn_tokens {
            [.., open, relation, entity, close]
                if *open == SEARCH_OPEN && *close == SEARCH_CLOSE =>
            {
                vocab.relation_index(*relation)?;
                vocab.entity_index(*entity)?;
                Some(ToolCall { relation: *relation, entity: *entity })
            }
            _ => None,
        }
    }

    /// Tool output for a turn that ended with `SEARCH_CLOSE`; a malformed
    /// request yields an empty result block.
    pub fn respond_to_turn(&self, turn_tokens: &[TokenId]) -> Segment {
        match self.parse_tool_call(turn_tokens) {
            Some(call) => self.tool_respond(call),
            None => vec![Token::tool(RESULT_OPEN), Token::tool(RESULT_CLOSE)],
        }
    }

    /// Outcome reward: -1 when the response does not end with a well-formed
    /// `ANSWER_OPEN e ANSWER_CLOSE` block, otherwise exact match of the last
    /// block against the gold answer.
    pub fn score_outcome(&self, task: &Task, full_response: &[Token]) -> f64 {
        let ids: Vec<TokenId> = full_response.iter().map(|t| t.id).collect();
        match last_answer(self.vocab(), &ids) {
            Some(answer) if answer == task.gold_answer => 1.0,
            Some(_) => 0.0,
            None => -1.0,
        }
    }
}

/// Entity of the terminating answer block, if the sequence ends with one.
fn last_answer(vocab: &Vocab, ids: &[TokenId]) -> Option<TokenId> {
    match ids {
        [.., open, e, close]
            if *open == ANSWER_OPEN
                && *close == ANSWER_CLOSE
                && vocab.entity_index(*e).is_some() =>
        {
            Some(*e)
        }
        _ => None,
    }
}

/// Scripted agent that issues the required searches in order and then answers
/// with the last retrieved entity. Used as the environment sanity oracle.
#[derive(Debug, Clone, Copy)]
pub struct OptimalAgent {
    vocab: Vocab,
}

impl OptimalAgent {
    pub fn new(vocab: Vocab) -> Self {
        Self { vocab }
    }

    /// Next token given the full context (prompt followed by the response).
    pub fn next_token(&self, context: &[TokenId]) -> TokenId {
        let v = &self.vocab;
        let hops = context
            .iter()
            .take_while(|t| v.relation_index(**t).is_some())
            .count();
        let Some(&start) = context.get(hops) else {
            return EOS;
        };
        let response = &context[hops + 1..];

        // current entity = payload of the last result block, else the start entity
        let mut current = start;
        let mut completed = 0;
        let mut turn_start = 0;
        for (i, w) in response.windows(3).enumerate() {
            if w[0] == RESULT_OPEN && w[2] == RESULT_CLOSE {
                current = w[1];
                completed += 1;
                turn_start = i + 3;
            }
        }
        let partial = response.len() - turn_start;
        let plan = if completed < hops {
            vec![SEARCH_OPEN, context[completed], current, SEARCH_CLOSE]
        } else {
            vec![ANSWER_OPEN, current, ANSWER_CLOSE]
        };
        plan.get(partial).copied().unwrap_or(EOS)
    }
}

impl TokenPolicy for OptimalAgent {
    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn logprobs(&self, context: &[TokenId]) -> Vec<f64> {
        let mut lp = vec![f64::NEG_INFINITY; self.vocab.size()];
        lp[self.next_token(context).index()] = 0.0;
        lp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world() -> Environment {
        let vocab = Vocab::new(8, 2).unwrap();
        // R0: E0->E5, R1: E5->E3
        let r0 = vec![5, 1, 2, 3, 4, 0, 6, 7];
        let r1 = vec![0, 1, 2, 5, 4, 3, 6, 7];
        let world = World::from_tables(0, vocab, vec![r0, r1]).unwrap();
        Environment::new(world, EpisodeLimits::default()).unwrap()
    }

    #[test]
    fn vocab_layout_is_contiguous() {
        let v = Vocab::new(16, 4).unwrap();
        assert_eq!(v.size(), 28);
        let mut ids: Vec<u32> = (0..8).collect();
        ids.extend((0..16).map(|i| v.entity(i).0));
        ids.extend((0..4).map(|i| v.relation(i).0));
        assert_eq!(ids, (0..28).collect::<Vec<_>>());
        assert_eq!(v.entity_index(v.entity(3)), Some(3));
        assert_eq!(v.relation_index(v.relation(2)), Some(2));
        assert_eq!(v.entity_index(v.relation(0)), None);
        assert!(Vocab::new(0, 3).is_err());
    }

    #[test]
    fn world_tables_are_permutations() {
        let v = Vocab::new(16, 4).unwrap();
        let w = World::new(3, v);
        for r in 0..4 {
            let mut seen: Vec<TokenId> = (0..16).map(|e| w.facts(v.relation(r), v.entity(e))).collect();
            seen.sort();
            assert_eq!(seen, (0..16).map(|e| v.entity(e)).collect::<Vec<_>>());
        }
        assert_eq!(w, World::new(3, v));
    }

    #[test]
    fn one_and_two_hop_gold_answers() {
        let env = small_world();
        let v = *env.vocab();
        let one = Task {
            question_tokens: vec![v.relation(0), v.entity(0)],
            hops: 1,
            gold_answer: env.world.facts(v.relation(0), v.entity(0)),
        };
        assert_eq!(one.gold_answer, v.entity(5));
        let two = [v.relation(0), v.relation(1)]
            .iter()
            .fold(v.entity(0), |e, &r| env.world.facts(r, e));
        assert_eq!(two, v.entity(3));
    }

    #[test]
    fn generate_task_is_deterministic_and_consistent() {
        let v = Vocab::new(16, 4).unwrap();
        let env = Environment::new(World::new(7, v), EpisodeLimits::default()).unwrap();
        let a = env.generate_task(2, 11).unwrap();
        let b = env.generate_task(2, 11).unwrap();
        assert_eq!(a, b);
        let gold = a
            .relations()
            .iter()
            .fold(a.start_entity(), |e, &r| env.world.facts(r, e));
        assert_eq!(gold, a.gold_answer);
        assert!(env.generate_task(0, 1).is_err());
        assert!(env.generate_task(6, 1).is_err());
        assert!(env.generate_task(5, 1).is_ok());
    }

    #[test]
    fn tool_respond_format() {
        let env = small_world();
        let v = *env.vocab();
        let call = ToolCall { relation: v.relation(0), entity: v.entity(0) };
        let seg = env.tool_respond(call);
        assert_eq!(
            seg,
            vec![Token::tool(RESULT_OPEN), Token::tool(v.entity(5)), Token::tool(RESULT_CLOSE)]
        );
        assert_eq!(seg, env.tool_respond(call));
        assert!(seg.iter().all(|t| !t.is_agent()));
    }

    #[test]
    fn malformed_search_yields_empty_result() {
        let env = small_world();
        let v = *env.vocab();
        let bad = [SEARCH_OPEN, v.entity(0), v.relation(0), SEARCH_CLOSE];
        assert!(env.parse_tool_call(&bad).is_none());
        assert_eq!(env.respond_to_turn(&bad).len(), 2);
        let good = [THINK, SEARCH_OPEN, v.relation(0), v.entity(0), SEARCH_CLOSE];
        assert_eq!(env.respond_to_turn(&good)[1].id, v.entity(5));
        assert!(env.parse_tool_call(&[SEARCH_CLOSE]).is_none());
    }

    #[test]
    fn reward_casework() {
        let env = small_world();
        let v = *env.vocab();
        let task = Task {
            question_tokens: vec![v.relation(0), v.entity(0)],
            hops: 1,
            gold_answer: v.entity(5),
        };
        let ans = |e: TokenId| vec![Token::agent(ANSWER_OPEN), Token::agent(e), Token::agent(ANSWER_CLOSE)];
        assert_eq!(env.score_outcome(&task, &ans(v.entity(5))), 1.0);
        assert_eq!(env.score_outcome(&task, &ans(v.entity(4))), 0.0);
        assert_eq!(env.score_outcome(&task, &[Token::agent(THINK)]), -1.0);
        assert_eq!(env.score_outcome(&task, &[]), -1.0);
        // answer payload must be an entity
        assert_eq!(env.score_outcome(&task, &ans(v.relation(0))), -1.0);
        // last block wins
        let mut two = ans(v.entity(4));
        two.extend(ans(v.entity(5)));
        assert_eq!(env.score_outcome(&task, &two), 1.0);
        // block not at the end
        let mut trailing = ans(v.entity(5));
        trailing.push(Token::agent(THINK));
        assert_eq!(env.score_outcome(&task, &trailing), -1.0);
    }

    #[test]
    fn optimal_agent_walks_two_hops() {
        let env = small_world();
        let v = *env.vocab();
        let agent = OptimalAgent::new(v);
        let mut ctx = vec![v.relation(0), v.relation(1), v.entity(0)];
        let mut expected = vec![SEARCH_OPEN, v.relation(0), v.entity(0), SEARCH_CLOSE];
        for &t in &expected {
            assert_eq!(agent.next_token(&ctx), t);
            ctx.push(t);
        }
        ctx.extend([RESULT_OPEN, v.entity(5), RESULT_CLOSE]);
        expected = vec![SEARCH_OPEN, v.relation(1), v.entity(5), SEARCH_CLOSE];
        for &t in &expected {
            assert_eq!(agent.next_token(&ctx), t);
            ctx.push(t);
        }
        ctx.extend([RESULT_OPEN, v.entity(3), RESULT_CLOSE]);
        for t in [ANSWER_OPEN, v.entity(3), ANSWER_CLOSE] {
            assert_eq!(agent.next_token(&ctx), t);
            ctx.push(t);
        }
    }
}
