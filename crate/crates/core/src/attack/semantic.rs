//! Cluster-guided probing of the semantic cache.
//!
//! The constructor learns the shape of the query space by agglomerative
//! clustering of a training corpus, then walks a weighted binary tree whose
//! weights come from cluster cardinality. Exploitation emits untried corpus
//! members near a cluster centroid; exploration emits word-swapped variants.
//! A diversity gate keeps every probe dissimilar from all previous ones so
//! probes cannot hit the attacker's own cached entries.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::SemanticClassifier;
use crate::node::{ServingNode, SubmitError};
use crate::prefix_cache::UserId;
use crate::semantic_cache::{cosine, embed, EmbeddingVector};
use crate::time::VirtualDuration;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SemanticAttackError {
    #[error("corpus of {corpus} texts cannot form {requested} clusters")]
    CorpusTooSmall { corpus: usize, requested: usize },
    #[error("no candidate passes the diversity gate")]
    Exhausted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        id: usize,
        members: Vec<usize>,
        centroid: Vec<f64>,
        weight: usize,
    },
    Internal {
        weight: usize,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn weight(&self) -> usize {
        match self {
            TreeNode::Leaf { weight, .. } | TreeNode::Internal { weight, .. } => *weight,
        }
    }

    fn leaves<'a>(&'a self, out: &mut Vec<&'a TreeNode>) {
        match self {
            TreeNode::Leaf { .. } => out.push(self),
            TreeNode::Internal { left, right, .. } => {
                left.leaves(out);
                right.leaves(out);
            }
        }
    }
}

/// Weighted binary tree over embedded corpus clusters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterTree {
    pub format_version: u32,
    pub corpus_len: usize,
    pub root: TreeNode,
}

pub const TREE_FORMAT_VERSION: u32 = 1;

fn unit_mean(members: &[usize], embeds: &[EmbeddingVector]) -> Vec<f64> {
    let dim = embeds[0].0.len();
    let mut c = vec![0.0; dim];
    for &m in members {
        for (acc, x) in c.iter_mut().zip(&embeds[m].0) {
            *acc += x;
        }
    }
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut c {
            *x /= norm;
        }
    }
    c
}

/// Agglomerative clustering, average linkage over cosine distance, cut at
/// `target_leaves` clusters; the merge order above the cut becomes the
/// search tree. Merge ties break on the smallest member index.
pub fn build_cluster_tree(
    corpus: &[String],
    target_leaves: usize,
) -> Result<ClusterTree, SemanticAttackError> {
    if target_leaves == 0 || corpus.len() < target_leaves {
        return Err(SemanticAttackError::CorpusTooSmall {
            corpus: corpus.len(),
            requested: target_leaves,
        });
    }
    let embeds: Vec<EmbeddingVector> = corpus.iter().map(|t| embed(t)).collect();
    let m = corpus.len();

    // Active clusters with average-linkage distances (Lance-Williams).
    let mut members: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    let mut dist: Vec<Vec<f64>> = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..i {
            let d = 1.0 - cosine(&embeds[i], &embeds[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut active: Vec<usize> = (0..m).collect();
    let mut nodes: Vec<Option<TreeNode>> = (0..m).map(|_| None).collect();

    let mut next_leaf_id = 0usize;
    while active.len() > 1 {
        let cutting = active.len() > target_leaves;
        // Find the closest active pair; ties by smallest member index.
        let mut best: Option<(usize, usize, f64)> = None;
        for (ai, &a) in active.iter().enumerate() {
            for &b in active.iter().skip(ai + 1) {
                let d = dist[a][b];
                let better = match best {
                    None => true,
                    Some((ba, bb, bd)) => {
                        d < bd
                            || (d == bd
                                && (members[a][0], members[b][0]) < (members[ba][0], members[bb][0]))
                    }
                };
                if better {
                    best = Some((a, b, d));
                }
            }
        }
        let (a, b, _) = best.unwrap();
        let (wa, wb) = (members[a].len() as f64, members[b].len() as f64);

        if !cutting {
            // Above the cut: materialize children as tree nodes.
            for &c in [a, b].iter() {
                if nodes[c].is_none() {
                    nodes[c] = Some(TreeNode::Leaf {
                        id: {
                            let id = next_leaf_id;
                            next_leaf_id += 1;
                            id
                        },
                        members: members[c].clone(),
                        centroid: unit_mean(&members[c], &embeds),
                        weight: members[c].len(),
                    });
                }
            }
        }

        // Merge b into a.
        let merged_node = if !cutting {
            let left = nodes[a].take().unwrap();
            let right = nodes[b].take().unwrap();
            Some(TreeNode::Internal {
                weight: left.weight() + right.weight(),
                left: Box::new(left),
                right: Box::new(right),
            })
        } else {
            None
        };
        let taken = std::mem::take(&mut members[b]);
        members[a].extend(taken);
        members[a].sort_unstable();
        nodes[a] = merged_node;
        for &c in &active {
            if c != a && c != b {
                let d = (wa * dist[a][c] + wb * dist[b][c]) / (wa + wb);
                dist[a][c] = d;
                dist[c][a] = d;
            }
        }
        active.retain(|&c| c != b);
    }

    let last = active[0];
    let root = match nodes[last].take() {
        Some(node) => node,
        // target_leaves == corpus size or == 1: no merges above the cut.
        None => TreeNode::Leaf {
            id: 0,
            members: members[last].clone(),
            centroid: unit_mean(&members[last], &embeds),
            weight: members[last].len(),
        },
    };
    // Singleton-leaf cut: the loop above never materialized leaves.
    let root = if target_leaves == corpus.len() && corpus.len() > 1 {
        build_singleton_tree(&embeds)
    } else {
        root
    };
    Ok(ClusterTree {
        format_version: TREE_FORMAT_VERSION,
        corpus_len: m,
        root,
    })
}

fn build_singleton_tree(embeds: &[EmbeddingVector]) -> TreeNode {
    // Balanced tree over singleton leaves, in corpus order.
    fn build(range: std::ops::Range<usize>, embeds: &[EmbeddingVector]) -> TreeNode {
        if range.len() == 1 {
            let i = range.start;
            return TreeNode::Leaf {
                id: i,
                members: vec![i],
                centroid: embeds[i].0.clone(),
                weight: 1,
            };
        }
        let mid = range.start + range.len() / 2;
        let left = build(range.start..mid, embeds);
        let right = build(mid..range.end, embeds);
        TreeNode::Internal {
            weight: left.weight() + right.weight(),
            left: Box::new(left),
            right: Box::new(right),
        }
    }
    build(0..embeds.len(), embeds)
}

impl ClusterTree {
    pub fn leaves(&self) -> Vec<&TreeNode> {
        let mut out = Vec::new();
        self.root.leaves(&mut out);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serializes")
    }

    pub fn from_json(s: &str) -> Result<ClusterTree, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Search knobs. The defaults balance centroid exploitation against
/// peripheral exploration; all are sweepable.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchParams {
    pub w_rep: f64,
    pub w_hist: f64,
    pub w_clu: f64,
    /// Diversity gate: a candidate must stay below this cosine against
    /// every previous attempt.
    pub delta_div: f64,
    /// Probability of emitting a perturbed (exploration) probe.
    pub explore_p: f64,
    /// Novelty bonus weight in the tree descent.
    pub novelty_u: f64,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            w_rep: 1.0,
            w_hist: 0.5,
            w_clu: 0.5,
            delta_div: 0.95,
            explore_p: 0.2,
            novelty_u: 1.0,
        }
    }
}

/// Append-only record of a probing session.
pub struct SearchState {
    pub attempted: Vec<(String, EmbeddingVector)>,
    pub leaf_visits: Vec<u32>,
    pub hit: bool,
    tried_members: HashSet<usize>,
    pending_leaf: Option<usize>,
}

impl SearchState {
    pub fn new(tree: &ClusterTree) -> Self {
        SearchState {
            attempted: Vec::new(),
            leaf_visits: vec![0; tree.leaves().len()],
            hit: false,
            tried_members: HashSet::new(),
            pending_leaf: None,
        }
    }

    /// Rebuilds a state from an attempt log (queries with their leaf and
    /// verdict, in order).
    pub fn replay(tree: &ClusterTree, log: &[(String, usize, bool)]) -> Self {
        let mut state = SearchState::new(tree);
        for (query, leaf, hit) in log {
            state.pending_leaf = Some(*leaf);
            record_result(&mut state, query, *hit);
        }
        state
    }
}

fn subtree_visits(node: &TreeNode, visits: &[u32]) -> u32 {
    match node {
        TreeNode::Leaf { id, .. } => visits[*id],
        TreeNode::Internal { left, right, .. } => {
            subtree_visits(left, visits) + subtree_visits(right, visits)
        }
    }
}

fn descend<'a>(
    tree: &'a ClusterTree,
    state: &SearchState,
    params: &SearchParams,
    rng: &mut ChaCha12Rng,
) -> &'a TreeNode {
    let mut node = &tree.root;
    while let TreeNode::Internal { left, right, .. } = node {
        let score = |child: &TreeNode| {
            let novelty = 1.0 / (1.0 + subtree_visits(child, &state.leaf_visits) as f64);
            child.weight() as f64 * (1.0 + params.novelty_u * novelty)
        };
        let (sl, sr) = (score(left), score(right));
        let go_left = if params.explore_p == 0.0 {
            sl >= sr
        } else {
            rng.random::<f64>() * (sl + sr) < sl
        };
        node = if go_left { left } else { right };
    }
    node
}

/// Word-level swap with near neighbors from the corpus vocabulary.
struct Perturber {
    vocab: Vec<String>,
    /// Nearest vocabulary neighbors by trigram cosine, per word.
    neighbors: Vec<Vec<usize>>,
}

impl Perturber {
    fn new(texts: &[String]) -> Self {
        let mut vocab: Vec<String> = texts
            .iter()
            .flat_map(|t| t.split_whitespace().map(|w| w.to_string()))
            .collect();
        vocab.sort();
        vocab.dedup();
        let embeds: Vec<EmbeddingVector> = vocab.iter().map(|w| embed(w)).collect();
        let neighbors = (0..vocab.len())
            .map(|i| {
                let mut sims: Vec<(usize, f64)> = (0..vocab.len())
                    .filter(|&j| j != i)
                    .map(|j| (j, cosine(&embeds[i], &embeds[j])))
                    .collect();
                sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                sims.into_iter().take(8).map(|(j, _)| j).collect()
            })
            .collect();
        Perturber { vocab, neighbors }
    }

    fn perturb(&self, text: &str, rng: &mut ChaCha12Rng) -> String {
        let source = embed(text);
        let mut words: Vec<String> = text.split_whitespace().map(|w| w.to_string()).collect();
        let mut positions: Vec<usize> = (0..words.len()).collect();
        // Keep swapping distinct positions until the variant has clearly
        // left the source's similarity ball. A variant inside it would hit
        // the cached entry of its own source once that member is probed
        // (or vice versa), ending the run on the attacker's own content.
        for round in 0..6.min(words.len()) {
            let slot = rng.random_range(0..positions.len());
            let i = positions.swap_remove(slot);
            if let Ok(vi) = self.vocab.binary_search(&words[i]) {
                let nbrs = &self.neighbors[vi];
                if !nbrs.is_empty() {
                    words[i] = self.vocab[nbrs[rng.random_range(0..nbrs.len())]].clone();
                }
            }
            if round >= 2 && cosine(&embed(&words.join(" ")), &source) < 0.85 {
                break;
            }
        }
        words.join(" ")
    }
}

/// Everything the search needs to know about the training corpus.
pub struct SearchContext {
    texts: Vec<String>,
    member_embeds: Vec<EmbeddingVector>,
    perturber: Perturber,
    categories: Option<Vec<usize>>,
}

impl SearchContext {
    pub fn new(texts: Vec<String>) -> Self {
        let member_embeds = texts.iter().map(|t| embed(t)).collect();
        let perturber = Perturber::new(&texts);
        SearchContext {
            member_embeds,
            perturber,
            texts,
            categories: None,
        }
    }

    /// Labeled corpus: lets the attack name the topic of a successful hit.
    pub fn with_categories(texts: Vec<String>, categories: Vec<usize>) -> Self {
        assert_eq!(texts.len(), categories.len());
        let mut ctx = SearchContext::new(texts);
        ctx.categories = Some(categories);
        ctx
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    /// Majority training category among a leaf's members.
    fn leaf_category(&self, tree: &ClusterTree, leaf_id: usize) -> Option<usize> {
        let categories = self.categories.as_ref()?;
        let leaves = tree.leaves();
        let TreeNode::Leaf { members, .. } = leaves
            .into_iter()
            .find(|l| matches!(l, TreeNode::Leaf { id, .. } if *id == leaf_id))?
        else {
            return None;
        };
        let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
        for &m in members {
            *counts.entry(categories[m]).or_default() += 1;
        }
        counts
            .into_iter()
            .max_by_key(|(cat, count)| (*count, usize::MAX - *cat))
            .map(|(cat, _)| cat)
    }
}

/// An emitted probe plus the leaf it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticProbe {
    pub text: String,
    pub leaf: usize,
}

const POOL_EXPLOIT: usize = 6;
const POOL_EXPLORE: usize = 3;

fn passes_gate(e: &EmbeddingVector, state: &SearchState, delta: f64) -> bool {
    state.attempted.iter().all(|(_, a)| cosine(a, e) < delta)
}

/// Emits the next probe: descend by weight and novelty, gather a candidate
/// pool from the leaf (centroid-nearest untried members, plus perturbed
/// members on exploration draws), gate for diversity, then rank by
/// representativeness, history distance, and cluster mass.
pub fn next_query(
    tree: &ClusterTree,
    ctx: &SearchContext,
    state: &mut SearchState,
    params: &SearchParams,
    rng: &mut ChaCha12Rng,
) -> Result<SemanticProbe, SemanticAttackError> {
    let corpus_len = tree.corpus_len as f64;
    let mut pool: Vec<(SemanticProbe, EmbeddingVector, f64)> = Vec::new();

    let gather = |leaf: &TreeNode,
                      explore: bool,
                      pool: &mut Vec<(SemanticProbe, EmbeddingVector, f64)>,
                      state: &SearchState,
                      rng: &mut ChaCha12Rng| {
        let TreeNode::Leaf {
            id,
            members,
            centroid,
            weight,
        } = leaf
        else {
            unreachable!()
        };
        let centroid = EmbeddingVector(centroid.clone());
        let mut candidates: Vec<(String, EmbeddingVector)> = Vec::new();
        if explore {
            for _ in 0..POOL_EXPLORE {
                let m = members[rng.random_range(0..members.len())];
                let text = ctx.perturber.perturb(&ctx.texts[m], rng);
                let e = embed(&text);
                candidates.push((text, e));
            }
        } else {
            let mut untried: Vec<(usize, f64)> = members
                .iter()
                .filter(|m| !state.tried_members.contains(m))
                .map(|&m| (m, cosine(&ctx.member_embeds[m], &centroid)))
                .collect();
            untried.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (m, _) in untried.into_iter().take(POOL_EXPLOIT) {
                candidates.push((ctx.texts[m].clone(), ctx.member_embeds[m].clone()));
            }
        }
        for (text, e) in candidates {
            if !passes_gate(&e, state, params.delta_div) {
                continue;
            }
            let hist = state
                .attempted
                .iter()
                .map(|(_, a)| cosine(a, &e))
                .fold(0.0f64, f64::max);
            let score = params.w_rep * cosine(&e, &centroid) - params.w_hist * hist
                + params.w_clu * (*weight as f64 / corpus_len);
            pool.push((
                SemanticProbe {
                    text,
                    leaf: *id,
                },
                e,
                score,
            ));
        }
    };

    for _ in 0..32 {
        let leaf = descend(tree, state, params, rng);
        let explore = params.explore_p > 0.0 && rng.random::<f64>() < params.explore_p;
        gather(leaf, explore, &mut pool, state, rng);
        if !pool.is_empty() {
            break;
        }
    }
    if pool.is_empty() {
        // Global fallback: any untried member, then perturbations anywhere.
        for leaf in tree.leaves() {
            gather(leaf, false, &mut pool, state, rng);
            if pool.len() >= POOL_EXPLOIT {
                break;
            }
        }
    }
    if pool.is_empty() {
        for leaf in tree.leaves() {
            gather(leaf, true, &mut pool, state, rng);
        }
    }
    let Some((probe, embedding, _)) = pool
        .into_iter()
        .max_by(|a, b| a.2.total_cmp(&b.2).then(b.0.text.cmp(&a.0.text)))
    else {
        return Err(SemanticAttackError::Exhausted);
    };
    // Emit: mark member texts as tried so exploitation moves on.
    if let Some(idx) = ctx.texts.iter().position(|t| *t == probe.text) {
        state.tried_members.insert(idx);
    }
    state.pending_leaf = Some(probe.leaf);
    let _ = embedding;
    Ok(probe)
}

/// Appends the attempt, bumps the leaf's visit count, and latches the hit
/// flag.
pub fn record_result(state: &mut SearchState, query: &str, hit: bool) {
    let leaf = state
        .pending_leaf
        .take()
        .expect("record_result without a pending probe");
    state.attempted.push((query.to_string(), embed(query)));
    state.leaf_visits[leaf] += 1;
    if hit {
        state.hit = true;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemanticAttackOutcome {
    pub hit: bool,
    pub probes_used: usize,
    /// Response returned by the probe that hit, if any. A hit on the
    /// victim's entry leaks the victim's cached response verbatim.
    pub hit_response: Option<String>,
    pub hit_query: Option<String>,
    /// Inferred topic of the hit: the majority training category of the
    /// probe's cluster, when the corpus is labeled.
    pub category: Option<usize>,
}

/// Probes the node until the classifier reports a cache hit or the probe
/// budget is spent.
#[allow(clippy::too_many_arguments)]
pub fn run_semantic_attack(
    node: &mut ServingNode,
    attacker: UserId,
    tree: &ClusterTree,
    ctx: &SearchContext,
    params: &SearchParams,
    budget_probes: usize,
    classifier: &SemanticClassifier,
    rng: &mut ChaCha12Rng,
) -> SemanticAttackOutcome {
    let mut state = SearchState::new(tree);
    let mut probes_used = 0;
    while probes_used < budget_probes {
        let probe = match next_query(tree, ctx, &mut state, params, rng) {
            Ok(p) => p,
            Err(SemanticAttackError::Exhausted) => break,
            Err(_) => break,
        };
        let now = node.now() + VirtualDuration::from_secs_f64(crate::attack::prefix::DEFAULT_THINK_S);
        let outcome = match node.submit_text(attacker, &probe.text, 1, now, rng) {
            Ok(o) => o,
            Err(SubmitError::RateLimited) => {
                node.advance_clock(VirtualDuration::from_secs(1));
                state.pending_leaf = None;
                continue;
            }
            Err(_) => unreachable!(),
        };
        node.advance_clock(VirtualDuration::from_secs_f64(outcome.ttft_s));
        probes_used += 1;
        let hit = classifier.classify(outcome.ttft_s);
        record_result(&mut state, &probe.text, hit);
        if hit {
            return SemanticAttackOutcome {
                hit: true,
                probes_used,
                hit_response: Some(outcome.response_text),
                category: ctx.leaf_category(tree, probe.leaf),
                hit_query: Some(probe.text),
            };
        }
    }
    SemanticAttackOutcome {
        hit: false,
        probes_used,
        hit_response: None,
        hit_query: None,
        category: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::calibrate_semantic_classifier;
    use crate::harness::corpus::{generate_semantic_corpus, jitter_query, SemanticCorpusSpec};
    use crate::node::{CacheMode, NodeConfig};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn two_group_corpus() -> Vec<String> {
        let mut texts = Vec::new();
        // Heavy group: distinct trigram families.
        for i in 0..14 {
            texts.push(format!("alpha bravo charlie delta topic{i} echo"));
        }
        for i in 0..6 {
            texts.push(format!("zulu yankee xray whiskey item{i} victor"));
        }
        texts
    }

    #[test]
    fn degenerate_cuts() {
        let corpus = two_group_corpus();
        let all = build_cluster_tree(&corpus, corpus.len()).unwrap();
        assert_eq!(all.leaves().len(), corpus.len());
        assert!(all.leaves().iter().all(|l| l.weight() == 1));
        let one = build_cluster_tree(&corpus, 1).unwrap();
        assert_eq!(one.leaves().len(), 1);
        assert_eq!(one.root.weight(), corpus.len());
        assert!(matches!(
            build_cluster_tree(&corpus[..2], 5),
            Err(SemanticAttackError::CorpusTooSmall { .. })
        ));
    }

    #[test]
    fn two_separated_groups_split_cleanly() {
        let corpus = two_group_corpus();
        let tree = build_cluster_tree(&corpus, 2).unwrap();
        let leaves = tree.leaves();
        assert_eq!(leaves.len(), 2);
        let mut sizes: Vec<usize> = leaves.iter().map(|l| l.weight()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![6, 14]);
        for leaf in leaves {
            let TreeNode::Leaf { members, .. } = leaf else { unreachable!() };
            let groups: HashSet<bool> = members.iter().map(|&m| m < 14).collect();
            assert_eq!(groups.len(), 1, "leaf mixes groups: {members:?}");
        }
    }

    fn check_weights(node: &TreeNode) -> usize {
        match node {
            TreeNode::Leaf { members, weight, .. } => {
                assert_eq!(members.len(), *weight);
                *weight
            }
            TreeNode::Internal { weight, left, right } => {
                let sum = check_weights(left) + check_weights(right);
                assert_eq!(sum, *weight);
                sum
            }
        }
    }

    #[test]
    fn weights_are_conserved_and_tree_serializes() {
        let spec = SemanticCorpusSpec {
            n_categories: 4,
            records_per_category: 10,
            ..SemanticCorpusSpec::default()
        };
        let corpus: Vec<String> = generate_semantic_corpus(&spec, &mut rng(3))
            .into_iter()
            .map(|(t, _)| t)
            .collect();
        let tree = build_cluster_tree(&corpus, 4).unwrap();
        check_weights(&tree.root);
        let back = ClusterTree::from_json(&tree.to_json()).unwrap();
        check_weights(&back.root);
        assert_eq!(back.corpus_len, tree.corpus_len);
        assert_eq!(back.leaves().len(), tree.leaves().len());
    }

    #[test]
    fn first_greedy_query_is_nearest_centroid_of_heaviest_leaf() {
        let corpus = two_group_corpus();
        let tree = build_cluster_tree(&corpus, 2).unwrap();
        let ctx = SearchContext::new(corpus.clone());
        let params = SearchParams {
            explore_p: 0.0,
            ..SearchParams::default()
        };
        let mut state = SearchState::new(&tree);
        let probe = next_query(&tree, &ctx, &mut state, &params, &mut rng(4)).unwrap();
        // The heavy leaf holds the 14-member group.
        let heavy = tree
            .leaves()
            .into_iter()
            .max_by_key(|l| l.weight())
            .unwrap();
        let TreeNode::Leaf { members, centroid, .. } = heavy else { unreachable!() };
        let centroid = EmbeddingVector(centroid.clone());
        let best = members
            .iter()
            .max_by(|&&a, &&b| {
                cosine(&embed(&corpus[a]), &centroid)
                    .total_cmp(&cosine(&embed(&corpus[b]), &centroid))
            })
            .unwrap();
        assert_eq!(probe.text, corpus[*best]);
    }

    #[test]
    fn gate_rejects_repeat_probes() {
        let corpus = two_group_corpus();
        let tree = build_cluster_tree(&corpus, 2).unwrap();
        let ctx = SearchContext::new(corpus.clone());
        let params = SearchParams {
            explore_p: 0.0,
            ..SearchParams::default()
        };
        let mut state = SearchState::new(&tree);
        let mut seen = HashSet::new();
        for _ in 0..corpus.len() {
            let probe = next_query(&tree, &ctx, &mut state, &params, &mut rng(5)).unwrap();
            assert!(seen.insert(probe.text.clone()), "repeated {}", probe.text);
            record_result(&mut state, &probe.text, false);
        }
        // Every attempted pair respects the diversity gate.
        for i in 0..state.attempted.len() {
            for j in 0..i {
                assert!(
                    cosine(&state.attempted[i].1, &state.attempted[j].1) < params.delta_div
                );
            }
        }
    }

    #[test]
    fn state_replays_from_attempt_log() {
        let corpus = two_group_corpus();
        let tree = build_cluster_tree(&corpus, 2).unwrap();
        let ctx = SearchContext::new(corpus.clone());
        let params = SearchParams::default();
        let mut state = SearchState::new(&tree);
        let mut log = Vec::new();
        let mut r = rng(6);
        for i in 0..10 {
            let probe = next_query(&tree, &ctx, &mut state, &params, &mut r).unwrap();
            let hit = i == 9;
            log.push((probe.text.clone(), probe.leaf, hit));
            record_result(&mut state, &probe.text, hit);
        }
        let replayed = SearchState::replay(&tree, &log);
        assert_eq!(replayed.leaf_visits, state.leaf_visits);
        assert_eq!(replayed.hit, state.hit);
        assert_eq!(
            replayed.attempted.iter().map(|(q, _)| q).collect::<Vec<_>>(),
            state.attempted.iter().map(|(q, _)| q).collect::<Vec<_>>()
        );
    }

    #[test]
    fn probes_favour_the_heavy_cluster() {
        let corpus = two_group_corpus();
        let tree = build_cluster_tree(&corpus, 2).unwrap();
        let ctx = SearchContext::new(corpus.clone());
        let params = SearchParams::default();
        let mut state = SearchState::new(&tree);
        let mut r = rng(7);
        let mut heavy_hits = 0;
        let total = 16;
        for _ in 0..total {
            let probe = next_query(&tree, &ctx, &mut state, &params, &mut r).unwrap();
            if probe.text.contains("alpha") || probe.text.contains("topic") {
                heavy_hits += 1;
            }
            record_result(&mut state, &probe.text, false);
        }
        assert!(heavy_hits * 2 > total, "heavy cluster got {heavy_hits}/{total}");
    }

    #[test]
    fn end_to_end_attack_recovers_victim_response() {
        let spec = SemanticCorpusSpec {
            n_categories: 3,
            records_per_category: 12,
            ..SemanticCorpusSpec::default()
        };
        let corpus = generate_semantic_corpus(&spec, &mut rng(8));
        let texts: Vec<String> = corpus.iter().map(|(t, _)| t.clone()).collect();
        let categories: Vec<usize> = corpus.iter().map(|(_, c)| *c).collect();
        let tree = build_cluster_tree(&texts, 3).unwrap();
        let ctx = SearchContext::with_categories(texts.clone(), categories);

        let mut node = ServingNode::new(NodeConfig {
            cache_mode: CacheMode::Semantic,
            ..NodeConfig::default()
        });
        let mut r = rng(9);
        // Victim asks a light paraphrase of a corpus member.
        let victim_query = jitter_query(&texts[20], false, &mut r);
        let victim = node
            .submit_text(1, &victim_query, 30, node.now() + VirtualDuration::from_secs(1), &mut r)
            .unwrap();
        let classifier = calibrate_semantic_classifier(&mut node, 7, 10, &mut r).unwrap();
        let outcome = run_semantic_attack(
            &mut node,
            7,
            &tree,
            &ctx,
            &SearchParams::default(),
            texts.len() + 40,
            &classifier,
            &mut r,
        );
        assert!(outcome.hit, "attack never hit");
        assert_eq!(outcome.hit_response.unwrap(), victim.response_text);
        // The inferred topic matches the victim's true category.
        assert_eq!(outcome.category, Some(corpus[20].1));
    }
}
