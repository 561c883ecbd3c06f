//! Turn-wise credit assignment over a rollout tree.
//!
//! Leaf rewards are standardised within the tree, then values flow bottom-up:
//! a leaf's value is its normalised reward, an internal node's value is a
//! weighted sum of its children's values. Advantages are derived from values
//! under one of four schemes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout_tree::RolloutTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `w_c = H(c) / Σ H(c')`.
    ChildWeighted,
    /// `w_c = 1 / |C(n)|`.
    ChildMean,
    /// Mean of all descendant leaf values.
    LeafMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdvantageScheme {
    /// `A_n = V_n`
    V,
    /// `A_n = V_n - V_parent`
    L,
    /// `A_n = V_n - V_root`
    G,
    /// `A_n = L_n + G_n`
    #[serde(rename = "L_plus_G")]
    LPlusG,
}

impl AdvantageScheme {
    pub const ALL: [AdvantageScheme; 4] = [Self::V, Self::L, Self::G, Self::LPlusG];
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Self::ChildWeighted, Self::ChildMean, Self::LeafMean];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreditConfig {
    pub aggregation: Aggregation,
    pub advantage: AdvantageScheme,
    pub std_epsilon: f64,
}

impl Default for CreditConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::ChildWeighted,
            advantage: AdvantageScheme::V,
            std_epsilon: 1e-6,
        }
    }
}

/// `(r - mean) / std` with the population standard deviation; all zeros when
/// `std < std_epsilon`.
pub fn normalize_leaf_rewards(rewards: &[f64], std_epsilon: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Contract("cannot normalise an empty reward group".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < std_epsilon {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// A rollout tree annotated with per-node values and advantages.
#[derive(Debug, Clone)]
pub struct CreditedTree<'t> {
    tree: &'t RolloutTree,
    values: Vec<Option<f64>>,
    advantages: Vec<Option<f64>>,
    child_weights: Vec<Vec<f64>>,
}

impl<'t> CreditedTree<'t> {
    pub fn tree(&self) -> &'t RolloutTree {
        self.tree
    }

    pub fn value(&self, id: usize) -> Option<f64> {
        self.values[id]
    }

    pub fn advantage(&self, id: usize) -> Option<f64> {
        self.advantages[id]
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn advantages(&self) -> &[Option<f64>] {
        &self.advantages
    }

    /// Aggregation weights used at `id`, aligned with its children. Empty for
    /// leaves and under `LeafMean`.
    pub fn child_weights(&self, id: usize) -> &[f64] {
        &self.child_weights[id]
    }

    pub fn to_jsonl(&self, tree_index: usize) -> Result<String> {
        let mut out = String::new();
        for r in self.tree.to_records(tree_index, Some(&self.values), Some(&self.advantages)) {
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Values for every node. `leaf_values` are normalised rewards aligned with
/// [`RolloutTree::leaf_ids`].
pub fn propagate_values<'t>(
    tree: &'t RolloutTree,
    leaf_values: &[f64],
    config: &CreditConfig,
) -> Result<CreditedTree<'t>> {
    let leaves = tree.leaf_ids();
    if leaves.len() != leaf_values.len() {
        return Err(Error::Contract(format!(
            "{} leaf values for {} leaves",
            leaf_values.len(),
            leaves.len()
        )));
    }
    let nodes = tree.nodes();
    let mut values: Vec<Option<f64>> = vec![None; nodes.len()];
    let mut child_weights = vec![Vec::new(); nodes.len()];
    for (&id, &v) in leaves.iter().zip(leaf_values) {
        values[id] = Some(v);
    }

    // children always carry larger ids than their parent
    for id in (0..nodes.len()).rev() {
        let children = &nodes[id].children;
        if children.is_empty() {
            continue;
        }
        let value = match config.aggregation {
            Aggregation::LeafMean => {
                let mut sum = 0.0;
                let mut count = 0usize;
                for leaf in descendant_leaves(tree, id) {
                    sum += values[leaf].expect("leaf value");
                    count += 1;
                }
                sum / count as f64
            }
            Aggregation::ChildWeighted | Aggregation::ChildMean => {
                let weights = aggregation_weights(tree, id, config.aggregation);
                let mut v = 0.0;
                for (w, &c) in weights.iter().zip(children) {
                    v += w * values[c].expect("children are visited first");
                }
                child_weights[id] = weights;
                v
            }
        };
        values[id] = Some(value);
    }

    Ok(CreditedTree {
        tree,
        values,
        advantages: vec![None; nodes.len()],
        child_weights,
    })
}

fn aggregation_weights(tree: &RolloutTree, id: usize, aggregation: Aggregation) -> Vec<f64> {
    let children = &tree.node(id).children;
    let uniform = || vec![1.0 / children.len() as f64; children.len()];
    match aggregation {
        Aggregation::ChildMean => uniform(),
        _ => {
            let mut total = 0.0;
            for &c in children {
                total += tree.node(c).entropy.unwrap_or(0.0);
            }
            if total > 0.0 {
                children
                    .iter()
                    .map(|&c| tree.node(c).entropy.unwrap_or(0.0) / total)
                    .collect()
            } else {
                log::warn!("node {id}: all child entropies are zero, using uniform weights");
                uniform()
            }
        }
    }
}

/// Leaves below `id` in depth-first order, children visited in insertion order.
fn descendant_leaves(tree: &RolloutTree, id: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut stack = vec![id];
    while let Some(n) = stack.pop() {
        let children = &tree.node(n).children;
        if children.is_empty() {
            out.push(n);
        } else {
            stack.extend(children.iter().rev());
        }
    }
    out
}

/// Fills per-node advantages; the root gets none.
pub fn compute_advantages(credited: &mut CreditedTree<'_>, scheme: AdvantageScheme) {
    let tree = credited.tree;
    let root_value = credited.values[RolloutTree::ROOT].unwrap_or(0.0);
    for node in tree.nodes() {
        let Some(parent) = node.parent else {
            credited.advantages[node.id] = None;
            continue;
        };
        let v = credited.values[node.id].expect("values propagated");
        let local = v - credited.values[parent].expect("values propagated");
        let global = v - root_value;
        credited.advantages[node.id] = Some(match scheme {
            AdvantageScheme::V => v,
            AdvantageScheme::L => local,
            AdvantageScheme::G => global,
            AdvantageScheme::LPlusG => local + global,
        });
    }
}

/// Normalise raw leaf rewards, propagate values and compute advantages.
pub fn assign_credit<'t>(
    tree: &'t RolloutTree,
    raw_leaf_rewards: &[f64],
    config: &CreditConfig,
) -> Result<CreditedTree<'t>> {
    let normalized = normalize_leaf_rewards(raw_leaf_rewards, config.std_epsilon)?;
    let mut credited = propagate_values(tree, &normalized, config)?;
    compute_advantages(&mut credited, config.advantage);
    Ok(credited)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout_tree::{TreeConfig, TurnDraft};
    use crate::vocab_env::{Token, THINK};
    use proptest::prelude::*;

    fn turn(entropy: f64) -> TurnDraft {
        TurnDraft {
            segment: vec![Token::agent(THINK)],
            logprobs: vec![-entropy],
            terminal: false,
            truncated: false,
        }
    }

    fn cfg(aggregation: Aggregation, advantage: AdvantageScheme) -> CreditConfig {
        CreditConfig { aggregation, advantage, std_epsilon: 1e-6 }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_leaf_rewards(&[1.0, 0.0, 0.0, 1.0], 1e-6).unwrap(), vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(normalize_leaf_rewards(&[0.3; 5], 1e-6).unwrap(), vec![0.0; 5]);
        assert!(normalize_leaf_rewards(&[], 1e-6).is_err());
    }

    proptest! {
        #[test]
        fn normalized_moments(rewards in prop::collection::vec(-1.0f64..1.0, 2..40)) {
            let out = normalize_leaf_rewards(&rewards, 1e-6).unwrap();
            let n = out.len() as f64;
            let mean = out.iter().sum::<f64>() / n;
            let std = (out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((std - 1.0).abs() < 1e-9 || std == 0.0);
        }
    }

    #[test]
    fn symmetric_children_cancel() {
        let mut t = RolloutTree::new(vec![], TreeConfig::default());
        let a = t.add_node(0, turn(1.0));
        t.add_node(a, turn(0.5));
        t.add_node(a, turn(0.5));
        let c = propagate_values(&t, &[0.5, -0.5], &CreditConfig::default()).unwrap();
        assert_eq!(c.value(a), Some(0.0));
    }

    #[test]
    fn entropy_weighted_parent() {
        let mut t = RolloutTree::new(vec![], TreeConfig::default());
        t.add_node(0, turn(3.0));
        t.add_node(0, turn(1.0));
        let c = propagate_values(&t, &[1.0, -1.0], &CreditConfig::default()).unwrap();
        assert_eq!(c.value(0), Some(0.5));
        assert_eq!(c.child_weights(0), &[0.75, 0.25]);
        let m = propagate_values(&t, &[1.0, -1.0], &cfg(Aggregation::ChildMean, AdvantageScheme::V)).unwrap();
        assert_eq!(m.value(0), Some(0.0));
    }

    #[test]
    fn zero_entropy_children_fall_back_to_uniform() {
        let mut t = RolloutTree::new(vec![], TreeConfig::default());
        t.add_node(0, turn(0.0));
        t.add_node(0, turn(0.0));
        let c = propagate_values(&t, &[1.0, 0.0], &CreditConfig::default()).unwrap();
        assert_eq!(c.value(0), Some(0.5));
        // one zero-entropy child alongside a nonzero one just gets weight 0
        let mut t = RolloutTree::new(vec![], TreeConfig::default());
        t.add_node(0, turn(0.0));
        t.add_node(0, turn(2.0));
        let c = propagate_values(&t, &[1.0, -1.0], &CreditConfig::default()).unwrap();
        assert_eq!(c.value(0), Some(-1.0));
    }

    #[test]
    fn leaf_mean_counts_all_descendants() {
        let mut t = RolloutTree::new(vec![], TreeConfig::default());
        let a = t.add_node(0, turn(1.0));
        t.add_node(a, turn(1.0));
        t.add_node(a, turn(1.0));
        t.add_node(0, turn(1.0));
        let c = propagate_values(&t, &[3.0, 0.0, 6.0], &cfg(Aggregation::LeafMean, AdvantageScheme::V)).unwrap();
        assert_eq!(c.value(0), Some(3.0));
        let w = propagate_values(&t, &[3.0, 0.0, 6.0], &cfg(Aggregation::ChildMean, AdvantageScheme::V)).unwrap();
        assert_eq!(w.value(0), Some(0.5 * 1.5 + 0.5 * 6.0));
    }

    #[test]
    fn single_chain_values_equal_leaf() {
        let mut t = RolloutTree::new(vec![], TreeConfig::default());
        let mut at = 0;
        for h in [0.4, 1.2, 0.7] {
            at = t.add_node(at, turn(h));
        }
        for agg in [Aggregation::ChildWeighted, Aggregation::ChildMean] {
            let c = propagate_values(&t, &[0.8], &cfg(agg, AdvantageScheme::V)).unwrap();
            assert!(c.values().iter().all(|v| *v == Some(0.8)));
        }
    }

    #[test]
    fn advantage_schemes() {
        let mut t = RolloutTree::new(vec![], TreeConfig::default());
        let a = t.add_node(0, turn(1.0));
        let b = t.add_node(0, turn(3.0));
        let a1 = t.add_node(a, turn(1.0));
        let a2 = t.add_node(a, turn(2.0));
        let rewards = [1.0, -1.0, 0.5];
        for scheme in AdvantageScheme::ALL {
            let mut c = propagate_values(&t, &rewards, &cfg(Aggregation::ChildWeighted, scheme)).unwrap();
            compute_advantages(&mut c, scheme);
            let v = |id| c.value(id).unwrap();
            assert_eq!(c.advantage(0), None);
            for id in [a, b, a1, a2] {
                let parent = t.node(id).parent.unwrap();
                let expected = match scheme {
                    AdvantageScheme::V => v(id),
                    AdvantageScheme::L => v(id) - v(parent),
                    AdvantageScheme::G => v(id) - v(0),
                    AdvantageScheme::LPlusG => (v(id) - v(parent)) + (v(id) - v(0)),
                };
                assert_eq!(c.advantage(id), Some(expected));
            }
            if scheme == AdvantageScheme::L {
                let path_sum = c.advantage(a).unwrap() + c.advantage(a2).unwrap();
                assert!((path_sum - (v(a2) - v(0))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn leaf_count_mismatch_is_rejected() {
        let mut t = RolloutTree::new(vec![], TreeConfig::default());
        t.add_node(0, turn(1.0));
        assert!(propagate_values(&t, &[1.0, 2.0], &CreditConfig::default()).is_err());
    }
}
