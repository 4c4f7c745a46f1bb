//! Undirected labeled graphs and the operations the rest of the crate
//! builds on: validation, node permutation, padding, one-hot featurization,
//! and seeded random generation.
//!
//! Graphs are simple (no self-loops, no multi-edges) and store a symmetric
//! adjacency matrix alongside a sorted edge list. Node labels are optional
//! at the graph level; a dataset is either fully labeled or fully unlabeled.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest node index the toolkit accepts. Keeps bitset rows and brute-force
/// search honest about their intended desk scale.
pub const MAX_NODES: usize = 512;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node count {0} exceeds the supported maximum of {MAX_NODES}")]
    TooManyNodes(usize),
    #[error("edge ({0}, {1}) is out of range for {2} nodes")]
    EdgeOutOfRange(u32, u32, usize),
    #[error("edge ({0}, {1}) is a self-loop")]
    SelfLoop(u32, u32),
    #[error("edge ({0}, {1}) appears more than once")]
    DuplicateEdge(u32, u32),
    #[error("label vector has length {got}, graph has {expected} nodes")]
    LabelLength { got: usize, expected: usize },
    #[error("permutation has length {got}, graph has {expected} nodes")]
    PermutationLength { got: usize, expected: usize },
    #[error("permutation is not a bijection: index {0} appears twice")]
    NotABijection(usize),
    #[error("permutation entry {0} is out of range for {1} nodes")]
    PermutationOutOfRange(usize, usize),
    #[error("cannot pad graph with {from} nodes down to {to}")]
    PadShrink { from: usize, to: usize },
    #[error("label `{0}` does not appear in the vocabulary")]
    UnknownLabel(String),
    #[error("graph is unlabeled but the vocabulary expects labels")]
    UnlabeledGraph,
    #[error("node {0} has no usable label for featurization")]
    UnfeaturizableNode(usize),
    #[error("vocabulary tokens must be unique: `{0}` repeats")]
    DuplicateToken(String),
    #[error("invalid node count range [{0}, {1}]")]
    InvalidNodeRange(usize, usize),
    #[error("edge probability {0} is outside [0, 1]")]
    InvalidEdgeProbability(f64),
    #[error("graph {0} mixes labeled and unlabeled graphs in one dataset")]
    MixedDataset(u32),
}

/// A node label. `Token` carries a dataset label, `Unlabeled` marks nodes of
/// unlabeled datasets, and `Null` marks padding nodes so that alignment
/// against a real node always counts as a relabel.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeLabel {
    Token(String),
    Unlabeled,
    Null,
}

/// Symmetric boolean adjacency stored as one bitset row per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    n: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl AdjacencyMatrix {
    pub fn new(n: usize) -> Self {
        let words_per_row = n.div_ceil(64).max(1);
        AdjacencyMatrix {
            n,
            words_per_row,
            bits: vec![0; words_per_row * n.max(1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        let w = self.words_per_row * i + j / 64;
        (self.bits[w] >> (j % 64)) & 1 == 1
    }

    /// Sets a single directed entry. Graph constructors use the symmetric
    /// [`AdjacencyMatrix::set_edge`]; this one exists so tests can build
    /// deliberately broken matrices for the validator.
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        let w = self.words_per_row * i + j / 64;
        if value {
            self.bits[w] |= 1 << (j % 64);
        } else {
            self.bits[w] &= !(1 << (j % 64));
        }
    }

    /// Sets both (i, j) and (j, i).
    pub fn set_edge(&mut self, i: usize, j: usize, value: bool) {
        self.set(i, j, value);
        self.set(j, i, value);
    }

    /// The first 64 adjacency bits of row `i`. Only meaningful for graphs
    /// with at most 64 nodes, which covers every exact-GED code path.
    pub fn row_mask64(&self, i: usize) -> u64 {
        self.bits[self.words_per_row * i]
    }

    /// Number of entries set in row `i`.
    pub fn degree(&self, i: usize) -> usize {
        let row = &self.bits[self.words_per_row * i..self.words_per_row * (i + 1)];
        row.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// An undirected graph with optional node labels.
///
/// `labels == None` means the graph belongs to an unlabeled dataset. Padding
/// an unlabeled graph materializes explicit labels so the padding nodes stay
/// distinguishable from real ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub id: u32,
    n: usize,
    adj: AdjacencyMatrix,
    edges: Vec<(u32, u32)>,
    labels: Option<Vec<NodeLabel>>,
}

impl Graph {
    /// Builds a graph from an edge list, rejecting malformed input. Each
    /// edge is stored once with its endpoints ordered.
    pub fn new(
        id: u32,
        n: usize,
        edges: &[(u32, u32)],
        labels: Option<Vec<NodeLabel>>,
    ) -> Result<Self, GraphError> {
        if n > MAX_NODES {
            return Err(GraphError::TooManyNodes(n));
        }
        if let Some(ref l) = labels {
            if l.len() != n {
                return Err(GraphError::LabelLength {
                    got: l.len(),
                    expected: n,
                });
            }
        }
        let mut adj = AdjacencyMatrix::new(n);
        for &(u, v) in edges {
            if u as usize >= n || v as usize >= n {
                return Err(GraphError::EdgeOutOfRange(u, v, n));
            }
            if u == v {
                return Err(GraphError::SelfLoop(u, v));
            }
            if adj.get(u as usize, v as usize) {
                return Err(GraphError::DuplicateEdge(u, v));
            }
            adj.set_edge(u as usize, v as usize, true);
        }
        let edges = edges_from_upper_triangle(&adj);
        Ok(Graph {
            id,
            n,
            adj,
            edges,
            labels,
        })
    }

    /// Wraps a raw adjacency matrix without checking symmetry or loops.
    /// Intended for tests that need invalid graphs; the edge list is derived
    /// from the upper triangle.
    pub fn from_adjacency(id: u32, adj: AdjacencyMatrix, labels: Option<Vec<NodeLabel>>) -> Self {
        let edges = edges_from_upper_triangle(&adj);
        Graph {
            id,
            n: adj.n(),
            adj,
            edges,
            labels,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Edges with `u < v`, sorted ascending.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &AdjacencyMatrix {
        &self.adj
    }

    pub fn labels(&self) -> Option<&[NodeLabel]> {
        self.labels.as_deref()
    }

    /// Effective label of node `i`: graphs without a label vector read as
    /// uniformly unlabeled.
    pub fn label_of(&self, i: usize) -> NodeLabel {
        match &self.labels {
            Some(l) => l[i].clone(),
            None => NodeLabel::Unlabeled,
        }
    }

    /// True when the graph carries dataset label tokens.
    pub fn is_labeled(&self) -> bool {
        matches!(&self.labels, Some(l) if l.iter().any(|x| matches!(x, NodeLabel::Token(_))))
    }
}

fn edges_from_upper_triangle(adj: &AdjacencyMatrix) -> Vec<(u32, u32)> {
    let n = adj.n();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if adj.get(i, j) {
                edges.push((i as u32, j as u32));
            }
        }
    }
    edges
}

/// A bijection on node indices, stored as `mapping[i] = image of i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self, GraphError> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n {
                return Err(GraphError::PermutationOutOfRange(m, n));
            }
            if seen[m] {
                return Err(GraphError::NotABijection(m));
            }
            seen[m] = true;
        }
        Ok(Permutation { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            mapping: (0..n).collect(),
        }
    }

    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        // Fisher-Yates, driven explicitly so the draw sequence is pinned to
        // this crate rather than to a library shuffle's internals.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            mapping.swap(i, j);
        }
        Permutation { mapping }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn apply(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.mapping
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Permutation { mapping: inv }
    }

    pub fn compose(&self, other: &Permutation) -> Result<Self, GraphError> {
        if self.len() != other.len() {
            return Err(GraphError::PermutationLength {
                got: other.len(),
                expected: self.len(),
            });
        }
        Ok(Permutation {
            mapping: self.mapping.iter().map(|&i| other.mapping[i]).collect(),
        })
    }
}

/// Checks every structural invariant and reports all violations with their
/// locations. An empty result means the graph is well formed. This never
/// fails; it is the diagnostic counterpart to the checked constructor.
pub fn validate_graph(g: &Graph) -> Vec<String> {
    let mut violations = Vec::new();
    let n = g.n();
    for i in 0..n {
        if g.adj.get(i, i) {
            violations.push(format!("self-loop at {i}"));
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if g.adj.get(i, j) != g.adj.get(j, i) {
                violations.push(format!("asymmetric entry at ({i},{j})"));
            }
        }
    }
    if let Some(labels) = &g.labels {
        if labels.len() != n {
            violations.push(format!("label length {} != {}", labels.len(), n));
        }
        let has_token = labels.iter().any(|l| matches!(l, NodeLabel::Token(_)));
        let has_unlabeled = labels.iter().any(|l| matches!(l, NodeLabel::Unlabeled));
        if has_token && has_unlabeled {
            violations.push("mixed labeled and unlabeled nodes".to_string());
        }
    }
    violations
}

/// Relabels nodes by `perm`: node `i` of the input becomes node `perm(i)`
/// of the output. Adjacency, edge list, and labels all move together; the
/// graph id is preserved.
pub fn apply_permutation(g: &Graph, perm: &Permutation) -> Result<Graph, GraphError> {
    let n = g.n();
    if perm.len() != n {
        return Err(GraphError::PermutationLength {
            got: perm.len(),
            expected: n,
        });
    }
    let mut adj = AdjacencyMatrix::new(n);
    for i in 0..n {
        for j in 0..n {
            if g.adj.get(i, j) {
                adj.set(perm.apply(i), perm.apply(j), true);
            }
        }
    }
    let labels = g.labels.as_ref().map(|old| {
        let mut new = vec![NodeLabel::Unlabeled; n];
        for (i, l) in old.iter().enumerate() {
            new[perm.apply(i)] = l.clone();
        }
        new
    });
    let edges = edges_from_upper_triangle(&adj);
    Ok(Graph {
        id: g.id,
        n,
        adj,
        edges,
        labels,
    })
}

/// Extends a graph to `target_n` nodes by appending isolated padding nodes
/// labeled [`NodeLabel::Null`]. Padding an unlabeled graph first
/// materializes explicit `Unlabeled` labels for the real nodes.
pub fn pad_to(g: &Graph, target_n: usize) -> Result<Graph, GraphError> {
    let n = g.n();
    if target_n < n {
        return Err(GraphError::PadShrink {
            from: n,
            to: target_n,
        });
    }
    if target_n > MAX_NODES {
        return Err(GraphError::TooManyNodes(target_n));
    }
    let mut adj = AdjacencyMatrix::new(target_n);
    for &(u, v) in &g.edges {
        adj.set_edge(u as usize, v as usize, true);
    }
    let mut labels = match &g.labels {
        Some(l) => l.clone(),
        None => vec![NodeLabel::Unlabeled; n],
    };
    labels.resize(target_n, NodeLabel::Null);
    let edges = g.edges.clone();
    Ok(Graph {
        id: g.id,
        n: target_n,
        adj,
        edges,
        labels: Some(labels),
    })
}

/// The label alphabet shared by a dataset. An unlabeled vocabulary still
/// has feature size one so every node featurizes to a constant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    tokens: Vec<String>,
}

impl LabelVocabulary {
    /// Builds a labeled vocabulary. Tokens are sorted and must be unique.
    pub fn labeled(mut tokens: Vec<String>) -> Result<Self, GraphError> {
        tokens.sort();
        for w in tokens.windows(2) {
            if w[0] == w[1] {
                return Err(GraphError::DuplicateToken(w[0].clone()));
            }
        }
        Ok(LabelVocabulary { tokens })
    }

    pub fn unlabeled() -> Self {
        LabelVocabulary { tokens: Vec::new() }
    }

    pub fn is_unlabeled(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Feature dimension: one slot per token, or a single constant slot for
    /// unlabeled data.
    pub fn size(&self) -> usize {
        if self.tokens.is_empty() {
            1
        } else {
            self.tokens.len()
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.tokens.binary_search_by(|t| t.as_str().cmp(token)).ok()
    }
}

/// Row-major node feature matrix: one row per node, one column per
/// vocabulary slot.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub d: usize,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }
}

/// One-hot featurization against a vocabulary. Labeled nodes set the slot
/// of their token; unlabeled datasets use the single constant slot. Rows
/// always sum to exactly one.
pub fn featurize(g: &Graph, vocab: &LabelVocabulary) -> Result<FeatureMatrix, GraphError> {
    let n = g.n();
    let d = vocab.size();
    let mut values = vec![0.0; n * d];
    for i in 0..n {
        match g.label_of(i) {
            NodeLabel::Token(t) => {
                if vocab.is_unlabeled() {
                    return Err(GraphError::UnknownLabel(t));
                }
                let k = vocab
                    .index_of(&t)
                    .ok_or(GraphError::UnknownLabel(t))?;
                values[i * d + k] = 1.0;
            }
            NodeLabel::Unlabeled => {
                if !vocab.is_unlabeled() {
                    return Err(GraphError::UnlabeledGraph);
                }
                values[i * d] = 1.0;
            }
            NodeLabel::Null => {
                return Err(GraphError::UnfeaturizableNode(i));
            }
        }
    }
    Ok(FeatureMatrix { n, d, values })
}

/// Derives the shared vocabulary of a dataset: the sorted set of observed
/// label tokens, or the unlabeled vocabulary when no graph carries labels.
/// Labeled and unlabeled graphs may not share a dataset.
pub fn dataset_vocabulary(graphs: &[Graph]) -> Result<LabelVocabulary, GraphError> {
    let Some(first) = graphs.first() else {
        return Ok(LabelVocabulary::unlabeled());
    };
    let labeled = first.is_labeled();
    let mut tokens = std::collections::BTreeSet::new();
    for g in graphs {
        if g.is_labeled() != labeled {
            return Err(GraphError::MixedDataset(g.id));
        }
        if let Some(labels) = g.labels() {
            for l in labels {
                if let NodeLabel::Token(t) = l {
                    tokens.insert(t.clone());
                }
            }
        }
    }
    if labeled {
        LabelVocabulary::labeled(tokens.into_iter().collect())
    } else {
        Ok(LabelVocabulary::unlabeled())
    }
}

/// Samples a connected simple graph with a node count drawn uniformly from
/// `[n_min, n_max]`. Connectivity comes from a random spanning tree; every
/// remaining node pair is then added independently with `edge_prob`. When
/// the vocabulary is labeled each node draws a uniform token.
///
/// Fully deterministic in `seed`.
pub fn random_graph(
    n_min: usize,
    n_max: usize,
    edge_prob: f64,
    vocab: &LabelVocabulary,
    seed: u64,
) -> Result<Graph, GraphError> {
    if n_min == 0 || n_min > n_max {
        return Err(GraphError::InvalidNodeRange(n_min, n_max));
    }
    if n_max > MAX_NODES {
        return Err(GraphError::TooManyNodes(n_max));
    }
    if !(0.0..=1.0).contains(&edge_prob) || edge_prob.is_nan() {
        return Err(GraphError::InvalidEdgeProbability(edge_prob));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(n_min..=n_max);
    let mut edges: Vec<(u32, u32)> = Vec::new();
    let mut adj = AdjacencyMatrix::new(n);
    // Random spanning tree: attach each new node to a uniformly chosen
    // earlier one.
    for v in 1..n {
        let u = rng.random_range(0..v);
        adj.set_edge(u, v, true);
        edges.push((u as u32, v as u32));
    }
    for u in 0..n {
        for v in (u + 1)..n {
            if !adj.get(u, v) && rng.random_range(0.0..1.0) < edge_prob {
                adj.set_edge(u, v, true);
                edges.push((u as u32, v as u32));
            }
        }
    }
    edges.sort_unstable();
    let labels = if vocab.is_unlabeled() {
        None
    } else {
        let k = vocab.size();
        Some(
            (0..n)
                .map(|_| NodeLabel::Token(vocab.tokens()[rng.random_range(0..k)].clone()))
                .collect(),
        )
    };
    Graph::new(0, n, &edges, labels)
}
