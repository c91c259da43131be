//! Token sequences and the layered candidate tree grown during search.
//!
//! A search run owns one [`NodeStore`]: an append-only arena of [`TreeNode`]s
//! rooted at a shared prompt. Nodes hold only the tokens generated at that
//! node; the full sequence is reconstructed by [`NodeStore::materialize`].
//! Ids are assigned in creation order, so a run is replayable from its log
//! and all tie-breaks on id are stable.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;

/// Errors from tree construction, traversal, and export.
#[derive(Debug, thiserror::Error)]
pub enum SeqTreeError {
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("corrupt node store: cyclic parent links at node {0}")]
    CyclicParents(NodeId),
    #[error("node {0} has no score; score all nodes before export")]
    UnscoredNode(NodeId),
    #[error("prompt_len {prompt_len} exceeds token count {len}")]
    BadPromptLen { prompt_len: usize, len: usize },
    #[error("terminated sequence must end with eos id {eos}, found {found:?}")]
    BadTermination { eos: u32, found: Option<u32> },
}

/// Identifier of a node in a [`NodeStore`]; dense, assigned in creation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An immutable token sequence with a prompt/response boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    tokens: Vec<u32>,
    prompt_len: usize,
    terminated: bool,
}

impl TokenSeq {
    /// Build a sequence, checking the boundary invariant.
    pub fn new(tokens: Vec<u32>, prompt_len: usize, terminated: bool) -> Result<Self, SeqTreeError> {
        if prompt_len > tokens.len() {
            return Err(SeqTreeError::BadPromptLen { prompt_len, len: tokens.len() });
        }
        Ok(Self { tokens, prompt_len, terminated })
    }

    /// A prompt with no response tokens yet.
    pub fn prompt(tokens: Vec<u32>) -> Self {
        let prompt_len = tokens.len();
        Self { tokens, prompt_len, terminated: false }
    }

    /// Checks that a terminated sequence ends with `eos` and nothing follows it.
    pub fn check_eos(&self, eos: u32) -> Result<(), SeqTreeError> {
        if self.terminated && self.tokens.last() != Some(&eos) {
            return Err(SeqTreeError::BadTermination { eos, found: self.tokens.last().copied() });
        }
        Ok(())
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn prompt_tokens(&self) -> &[u32] {
        &self.tokens[..self.prompt_len]
    }

    pub fn response_tokens(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    pub fn response_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    /// The same prompt with the response truncated to its first `k` tokens.
    /// The prefix is never marked terminated unless it retains the final token
    /// of a terminated sequence.
    pub fn response_prefix(&self, k: usize) -> TokenSeq {
        let k = k.min(self.response_len());
        let terminated = self.terminated && k == self.response_len();
        TokenSeq {
            tokens: self.tokens[..self.prompt_len + k].to_vec(),
            prompt_len: self.prompt_len,
            terminated,
        }
    }

    /// Appends a generated segment, returning the extended sequence.
    pub fn extend(&self, segment: &[u32], terminated: bool) -> TokenSeq {
        let mut tokens = self.tokens.clone();
        tokens.extend_from_slice(segment);
        TokenSeq { tokens, prompt_len: self.prompt_len, terminated }
    }
}

/// One partial response in the search tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    /// 1-based layer index; 1 iff the node has no parent.
    pub layer: u32,
    /// Tokens generated at this node only; ancestors are not duplicated.
    pub segment: Vec<u32>,
    /// Cached score of the full materialized prefix, once computed.
    pub score: Option<f64>,
    pub terminated: bool,
}

/// Candidate set `C_i` and active (selected) set `P_i` of one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerState {
    pub layer: u32,
    pub candidates: Vec<NodeId>,
    pub selected: Vec<NodeId>,
}

/// Append-only arena of tree nodes sharing one prompt.
///
/// Single-writer while a search runs; once a layer is sealed the store can be
/// read concurrently (scoring, export) without further synchronization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeStore {
    prompt: Vec<u32>,
    nodes: Vec<TreeNode>,
}

impl NodeStore {
    pub fn new(prompt: Vec<u32>) -> Self {
        Self { prompt, nodes: Vec::new() }
    }

    pub fn prompt(&self) -> &[u32] {
        &self.prompt
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Id the next inserted node will receive.
    pub fn next_id(&self) -> NodeId {
        NodeId(self.nodes.len() as u32)
    }

    pub fn get(&self, id: NodeId) -> Result<&TreeNode, SeqTreeError> {
        self.nodes.get(id.0 as usize).ok_or(SeqTreeError::UnknownNode(id))
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Inserts a layer-1 node with no parent.
    pub fn add_root(&mut self, segment: Vec<u32>, terminated: bool) -> NodeId {
        let id = self.next_id();
        self.nodes.push(TreeNode { id, parent: None, layer: 1, segment, score: None, terminated });
        id
    }

    /// Inserts a child of `parent`, one layer below it.
    pub fn add_child(
        &mut self,
        parent: NodeId,
        segment: Vec<u32>,
        terminated: bool,
    ) -> Result<NodeId, SeqTreeError> {
        let layer = self.get(parent)?.layer + 1;
        let id = self.next_id();
        self.nodes.push(TreeNode { id, parent: Some(parent), layer, segment, score: None, terminated });
        Ok(id)
    }

    pub fn set_score(&mut self, id: NodeId, score: f64) -> Result<(), SeqTreeError> {
        let idx = id.0 as usize;
        match self.nodes.get_mut(idx) {
            Some(node) => {
                node.score = Some(score);
                Ok(())
            }
            None => Err(SeqTreeError::UnknownNode(id)),
        }
    }

    /// Reconstructs the full token sequence of a node: prompt, then ancestor
    /// segments in root-to-leaf order, then the node's own segment.
    ///
    /// Parent ids are assigned before their children, so a well-formed chain
    /// is strictly decreasing; any other shape is a corrupt store.
    pub fn materialize(&self, id: NodeId) -> Result<TokenSeq, SeqTreeError> {
        let mut chain = Vec::new();
        let mut cursor = self.get(id)?;
        loop {
            chain.push(cursor.id);
            match cursor.parent {
                None => break,
                Some(p) => {
                    if p >= cursor.id {
                        return Err(SeqTreeError::CyclicParents(cursor.id));
                    }
                    cursor = self.get(p)?;
                }
            }
        }
        let mut tokens = self.prompt.clone();
        for nid in chain.iter().rev() {
            tokens.extend_from_slice(&self.get(*nid)?.segment);
        }
        TokenSeq::new(tokens, self.prompt.len(), self.get(id)?.terminated)
    }

    /// Ids of the direct children of `id`, in creation order.
    pub fn children(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.parent == Some(id)).map(|n| n.id).collect()
    }
}

/// Export format for [`export_tree`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeFormat {
    Dot,
    Json,
}

/// Per-layer min-max normalization of node scores into [0, 1].
///
/// A layer whose scores are all equal maps to 0.5 (avoids the zero division).
/// Non-finite scores normalize to 0.
fn layer_norms(store: &NodeStore) -> Result<HashMap<NodeId, f64>, SeqTreeError> {
    let mut by_layer: HashMap<u32, Vec<(NodeId, f64)>> = HashMap::new();
    for node in store.nodes() {
        let score = node.score.ok_or(SeqTreeError::UnscoredNode(node.id))?;
        by_layer.entry(node.layer).or_default().push((node.id, score));
    }
    let mut norms = HashMap::new();
    for scored in by_layer.values() {
        let finite: Vec<f64> = scored.iter().map(|(_, s)| *s).filter(|s| s.is_finite()).collect();
        let min = finite.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (id, score) in scored {
            let norm = if !score.is_finite() {
                0.0
            } else if max > min {
                (score - min) / (max - min)
            } else {
                0.5
            };
            norms.insert(*id, norm);
        }
    }
    Ok(norms)
}

fn selected_ids(layers: &[LayerState]) -> HashMap<NodeId, bool> {
    let mut map = HashMap::new();
    for layer in layers {
        for id in &layer.candidates {
            map.entry(*id).or_insert(false);
        }
        for id in &layer.selected {
            map.insert(*id, true);
        }
    }
    map
}

fn preview(text: &str, max_chars: usize) -> String {
    if text.chars().count() <= max_chars {
        text.to_string()
    } else {
        let cut: String = text.chars().take(max_chars).collect();
        format!("{cut}…")
    }
}

/// Serializes the full scored tree as DOT or JSON.
///
/// Every node must carry a score. `layers` marks which nodes were selected
/// for expansion; `decode` renders a segment as display text.
pub fn export_tree(
    store: &NodeStore,
    layers: &[LayerState],
    format: TreeFormat,
    decode: &dyn Fn(&[u32]) -> String,
) -> Result<String, SeqTreeError> {
    let norms = layer_norms(store)?;
    let selected = selected_ids(layers);
    match format {
        TreeFormat::Json => export_json(store, &norms, &selected, decode),
        TreeFormat::Dot => export_dot(store, &norms, &selected, decode),
    }
}

fn export_json(
    store: &NodeStore,
    norms: &HashMap<NodeId, f64>,
    selected: &HashMap<NodeId, bool>,
    decode: &dyn Fn(&[u32]) -> String,
) -> Result<String, SeqTreeError> {
    let nodes: Vec<serde_json::Value> = store
        .nodes()
        .iter()
        .map(|n| {
            serde_json::json!({
                "id": n.id.0,
                "parent": n.parent.map(|p| p.0),
                "layer": n.layer,
                "score": n.score,
                "norm_score": norms[&n.id],
                "selected": selected.get(&n.id).copied().unwrap_or(false),
                "terminated": n.terminated,
                "text": preview(&decode(&n.segment), 48),
            })
        })
        .collect();
    Ok(serde_json::to_string_pretty(&serde_json::json!({ "nodes": nodes }))
        .expect("tree json serialization"))
}

fn export_dot(
    store: &NodeStore,
    norms: &HashMap<NodeId, f64>,
    selected: &HashMap<NodeId, bool>,
    decode: &dyn Fn(&[u32]) -> String,
) -> Result<String, SeqTreeError> {
    let mut out = String::new();
    out.push_str("digraph candidates {\n");
    out.push_str("  rankdir=TB;\n  node [shape=box, style=filled, fontname=\"monospace\"];\n");
    for n in store.nodes() {
        let norm = norms[&n.id];
        let is_selected = selected.get(&n.id).copied().unwrap_or(false);
        let score = n.score.unwrap_or(f64::NAN);
        // Colder blue for low layer-normalized reward, warmer for high.
        let fill = format!("{:.3} {:.3} 1.000", 0.62 - 0.62 * norm, 0.25 + 0.55 * norm);
        let style = if is_selected { "filled,bold" } else { "filled,dashed" };
        let text = preview(&decode(&n.segment), 32).replace('\\', "\\\\").replace('"', "\\\"");
        let term = if n.terminated { " [eos]" } else { "" };
        out.push_str(&format!(
            "  n{} [label=\"L{} #{}{}\\nscore {:.4}\\nnorm {:.2}\\n{}\", fillcolor=\"{}\", style=\"{}\"];\n",
            n.id.0, n.layer, n.id.0, term, score, norm, text, fill, style
        ));
    }
    for n in store.nodes() {
        if let Some(p) = n.parent {
            let style = if selected.get(&n.id).copied().unwrap_or(false) { "solid" } else { "dashed" };
            out.push_str(&format!("  n{} -> n{} [style={}];\n", p.0, n.id.0, style));
        }
    }
    out.push_str("}\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn join_ids(tokens: &[u32]) -> String {
        tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn materialize_single_root() {
        let mut store = NodeStore::new(vec![7, 8]);
        let root = store.add_root(vec![1, 2], false);
        let seq = store.materialize(root).unwrap();
        assert_eq!(seq.tokens(), &[7, 8, 1, 2]);
        assert_eq!(seq.prompt_len(), 2);
        assert!(!seq.terminated());
    }

    #[test]
    fn materialize_child_concatenates() {
        let mut store = NodeStore::new(vec![7, 8]);
        let root = store.add_root(vec![1, 2], false);
        let child = store.add_child(root, vec![3], false).unwrap();
        let seq = store.materialize(child).unwrap();
        assert_eq!(seq.tokens(), &[7, 8, 1, 2, 3]);
    }

    #[test]
    fn materialize_deep_chain_matches_concatenation_oracle() {
        // Oracle: build the expected buffer by plain concatenation, then
        // compare against the parent-walk reconstruction.
        let prompt: Vec<u32> = (0..30).collect();
        let mut store = NodeStore::new(prompt.clone());
        let mut expected = prompt;
        let mut cursor = None;
        for layer in 0..4u32 {
            let segment: Vec<u32> = (0..96).map(|i| layer * 1000 + i).collect();
            expected.extend_from_slice(&segment);
            cursor = Some(match cursor {
                None => store.add_root(segment, false),
                Some(parent) => store.add_child(parent, segment, false).unwrap(),
            });
        }
        let seq = store.materialize(cursor.unwrap()).unwrap();
        assert_eq!(seq.len(), 30 + 384);
        assert_eq!(seq.tokens(), expected.as_slice());
        assert_eq!(seq.prompt_len(), 30);
    }

    #[test]
    fn materialize_unknown_and_cyclic() {
        let mut store = NodeStore::new(vec![1]);
        let a = store.add_root(vec![2], false);
        let b = store.add_child(a, vec![3], false).unwrap();
        assert!(matches!(store.materialize(NodeId(9)), Err(SeqTreeError::UnknownNode(_))));
        // Corrupt the arena directly: point the root back at its child.
        store.nodes[a.0 as usize].parent = Some(b);
        assert!(matches!(store.materialize(b), Err(SeqTreeError::CyclicParents(_))));
    }

    #[test]
    fn export_normalizes_within_layer() {
        let mut store = NodeStore::new(vec![0]);
        let a = store.add_root(vec![1], false);
        let b = store.add_root(vec![2], false);
        store.set_score(a, 2.0).unwrap();
        store.set_score(b, 4.0).unwrap();
        let norms = layer_norms(&store).unwrap();
        assert_eq!(norms[&a], 0.0);
        assert_eq!(norms[&b], 1.0);
    }

    #[test]
    fn export_equal_scores_normalize_to_half() {
        let mut store = NodeStore::new(vec![0]);
        let ids: Vec<NodeId> = (0..3).map(|i| store.add_root(vec![i], false)).collect();
        for id in &ids {
            store.set_score(*id, 3.0).unwrap();
        }
        let norms = layer_norms(&store).unwrap();
        for id in &ids {
            assert_eq!(norms[id], 0.5);
        }
    }

    #[test]
    fn export_unscored_node_is_named() {
        let mut store = NodeStore::new(vec![0]);
        let a = store.add_root(vec![1], false);
        let err = export_tree(&store, &[], TreeFormat::Json, &|s| join_ids(s)).unwrap_err();
        match err {
            SeqTreeError::UnscoredNode(id) => assert_eq!(id, a),
            other => panic!("expected UnscoredNode, got {other}"),
        }
    }

    #[test]
    fn export_three_layer_counts() {
        // 8 roots, branching 4: selections of 2 per layer, 8 children per
        // expansion. Node count 8+8+8, edge count 16 (roots have no parent).
        let mut store = NodeStore::new(vec![0]);
        let mut layers = Vec::new();
        let roots: Vec<NodeId> = (0..8).map(|i| store.add_root(vec![i], false)).collect();
        let mut current = roots.clone();
        layers.push(LayerState { layer: 1, candidates: roots, selected: vec![] });
        for layer in 2..=3u32 {
            let parents: Vec<NodeId> = current[..2].to_vec();
            let mut next = Vec::new();
            for p in &parents {
                for c in 0..4 {
                    next.push(store.add_child(*p, vec![c], false).unwrap());
                }
            }
            layers[(layer - 2) as usize].selected = parents;
            layers.push(LayerState { layer, candidates: next.clone(), selected: vec![] });
            current = next;
        }
        for n in 0..store.len() {
            store.set_score(NodeId(n as u32), n as f64).unwrap();
        }
        assert_eq!(store.len(), 24);

        let dot = export_tree(&store, &layers, TreeFormat::Dot, &|s| join_ids(s)).unwrap();
        let node_lines = dot.lines().filter(|l| l.trim_start().starts_with('n') && l.contains("label=")).count();
        let edge_lines = dot.lines().filter(|l| l.contains("->")).count();
        assert_eq!(node_lines, 24);
        assert_eq!(edge_lines, 16);

        let json = export_tree(&store, &layers, TreeFormat::Json, &|s| join_ids(s)).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["nodes"].as_array().unwrap().len(), 24);
        let with_parent = value["nodes"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|n| !n["parent"].is_null())
            .count();
        assert_eq!(with_parent, 16);
    }

    #[test]
    fn token_seq_prefix_and_extend() {
        let seq = TokenSeq::new(vec![1, 2, 3, 4, 5], 2, true).unwrap();
        assert_eq!(seq.response_len(), 3);
        let p = seq.response_prefix(2);
        assert_eq!(p.tokens(), &[1, 2, 3, 4]);
        assert!(!p.terminated());
        let full = seq.response_prefix(3);
        assert!(full.terminated());
        let ext = TokenSeq::prompt(vec![9]).extend(&[4, 4], false);
        assert_eq!(ext.tokens(), &[9, 4, 4]);
        assert_eq!(ext.prompt_len(), 1);
    }

    #[test]
    fn token_seq_rejects_bad_prompt_len() {
        assert!(TokenSeq::new(vec![1], 2, false).is_err());
    }

    proptest! {
        // Token conservation: materialized length is prompt + sum of segment
        // lengths along the ancestry, for arbitrary chains.
        #[test]
        fn prop_token_conservation(
            prompt_len in 1usize..8,
            seg_lens in proptest::collection::vec(0usize..12, 1..6)
        ) {
            let prompt: Vec<u32> = (0..prompt_len as u32).collect();
            let mut store = NodeStore::new(prompt);
            let mut cursor = None;
            let mut total = 0usize;
            for len in &seg_lens {
                total += len;
                let segment = vec![1u32; *len];
                cursor = Some(match cursor {
                    None => store.add_root(segment, false),
                    Some(p) => store.add_child(p, segment, false).unwrap(),
                });
            }
            let seq = store.materialize(cursor.unwrap()).unwrap();
            prop_assert_eq!(seq.len(), prompt_len + total);
            prop_assert_eq!(seq.prompt_len(), prompt_len);
        }
    }
}
