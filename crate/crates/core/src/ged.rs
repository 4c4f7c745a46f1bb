//! Exact graph edit distance under the uniform cost model: node insertion,
//! node deletion, node relabel, edge insertion, and edge deletion each cost
//! one. Two solvers are provided, a factorial brute-force search for graphs
//! of at most [`BRUTE_MAX_NODES`] nodes and an A* edit-path search, plus the
//! normalized-distance similarity transform and ground-truth tables.
//!
//! Both solvers pad the smaller graph with null-labeled isolated nodes so
//! that every alignment is a total bijection; aligning a real node with a
//! padding node then prices the insertion or deletion as a relabel, and the
//! distance decomposes as `c/2 + m` where `c` counts adjacency disagreements
//! under the alignment and `m` counts label disagreements.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use thiserror::Error;

use crate::graph::{pad_to, Graph, GraphError, NodeLabel, Permutation};

/// Brute force enumerates every bijection of the padded graphs, so it is
/// capped well inside factorial blowup.
pub const BRUTE_MAX_NODES: usize = 8;

/// A* states carry one bitmask word per search node.
pub const ASTAR_MAX_NODES: usize = 64;

#[derive(Debug, Error)]
pub enum GedError {
    #[error(
        "brute-force search is capped at {BRUTE_MAX_NODES} nodes, got {0}; use astar_ged instead"
    )]
    BruteForceGuard(usize),
    #[error("A* search supports at most {ASTAR_MAX_NODES} nodes, got {0}")]
    AstarGuard(usize),
    #[error("graphs must have at least one node")]
    EmptyGraph,
    #[error(
        "A* node budget of {budget} expanded states exhausted; distance is in [{lower_bound}, {upper_bound}]"
    )]
    BudgetExhausted {
        budget: u64,
        lower_bound: u64,
        upper_bound: u64,
    },
    #[error("duplicate graph id {0} in ground-truth input")]
    DuplicateGraphId(u32),
    #[error("ground truth for pair ({i}, {j}) failed: {source}")]
    Pair {
        i: u32,
        j: u32,
        #[source]
        source: Box<GedError>,
    },
    #[error("ground-truth CSV line {line}: {message}")]
    CsvFormat { line: usize, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// How an edit distance splits into adjacency and label disagreements under
/// the winning alignment: `ged = c/2 + m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditCostBreakdown {
    /// Sum of absolute adjacency differences; always even.
    pub c: u64,
    /// Count of aligned node pairs whose labels differ.
    pub m: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GedResult {
    pub ged: u64,
    pub breakdown: Option<EditCostBreakdown>,
    pub nged: f64,
    pub similarity: f64,
    /// The winning alignment on the padded graphs: entry `k` is the node of
    /// the padded second graph matched with node `k` of the padded first.
    pub permutation: Option<Permutation>,
}

/// Which exact solver to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GedAlgo {
    Brute,
    Astar { node_budget: u64 },
}

/// Normalized distance and its exponential similarity:
/// `nged = ged / ((n1 + n2) / 2)` and `similarity = exp(-nged)`.
/// Requires `n1, n2 >= 1`.
pub fn similarity_from_ged(ged: u64, n1: usize, n2: usize) -> (f64, f64) {
    debug_assert!(n1 >= 1 && n2 >= 1);
    let nged = ged as f64 / ((n1 + n2) as f64 / 2.0);
    (nged, (-nged).exp())
}

/// Dense per-pair view of two graphs padded to a common size: single-word
/// adjacency rows, small-integer label ids, and a label-mismatch bitmask per
/// left node. Shared by both solvers.
struct PairTable {
    n: usize,
    rows1: Vec<u64>,
    rows2: Vec<u64>,
    labels1: Vec<u16>,
    labels2: Vec<u16>,
    /// Bit `v` of `mismatch[k]` is set when labels of `k` (left) and `v`
    /// (right) differ.
    mismatch: Vec<u64>,
    n_label_ids: usize,
    edges2: Vec<(u32, u32)>,
}

impl PairTable {
    fn build(g1: &Graph, g2: &Graph) -> Result<(Self, usize, usize), GedError> {
        let (orig_n1, orig_n2) = (g1.n(), g2.n());
        if orig_n1 == 0 || orig_n2 == 0 {
            return Err(GedError::EmptyGraph);
        }
        let n = orig_n1.max(orig_n2);
        let p1 = pad_to(g1, n)?;
        let p2 = pad_to(g2, n)?;
        let mut label_ids: BTreeMap<NodeLabel, u16> = BTreeMap::new();
        let id_of = |l: NodeLabel, ids: &mut BTreeMap<NodeLabel, u16>| -> u16 {
            let next = ids.len() as u16;
            *ids.entry(l).or_insert(next)
        };
        let labels1: Vec<u16> = (0..n).map(|i| id_of(p1.label_of(i), &mut label_ids)).collect();
        let labels2: Vec<u16> = (0..n).map(|i| id_of(p2.label_of(i), &mut label_ids)).collect();
        let rows1: Vec<u64> = (0..n).map(|i| p1.adjacency().row_mask64(i)).collect();
        let rows2: Vec<u64> = (0..n).map(|i| p2.adjacency().row_mask64(i)).collect();
        let mismatch: Vec<u64> = labels1
            .iter()
            .map(|&l1| {
                let mut mask = 0u64;
                for (v, &l2) in labels2.iter().enumerate() {
                    if l1 != l2 {
                        mask |= 1 << v;
                    }
                }
                mask
            })
            .collect();
        let n_label_ids = label_ids.len();
        let edges2 = p2.edges().to_vec();
        Ok((
            PairTable {
                n,
                rows1,
                rows2,
                labels1,
                labels2,
                mismatch,
                n_label_ids,
                edges2,
            },
            orig_n1,
            orig_n2,
        ))
    }
}

/// Exact GED by exhaustive search over all alignments of the padded graphs,
/// minimizing `c/2 + m` jointly. Among equal-cost alignments the
/// lexicographically smallest mapping wins, so results are reproducible.
pub fn brute_force_ged(g1: &Graph, g2: &Graph) -> Result<GedResult, GedError> {
    let n_max = g1.n().max(g2.n());
    if n_max > BRUTE_MAX_NODES {
        return Err(GedError::BruteForceGuard(n_max));
    }
    let (t, orig_n1, orig_n2) = PairTable::build(g1, g2)?;
    let n = t.n;

    let mut sigma: Vec<usize> = (0..n).collect();
    let mut best_total = u64::MAX;
    let mut best_sigma = sigma.clone();
    let mut best_c = 0u64;
    let mut best_m = 0u64;
    loop {
        let mut c = 0u64;
        let mut m = 0u64;
        for k in 0..n {
            // Rebuild row sigma(k) of the aligned right graph in the left
            // graph's node order, then compare as bitsets.
            let row2 = t.rows2[sigma[k]];
            let mut aligned = 0u64;
            for (l, &sl) in sigma.iter().enumerate() {
                aligned |= ((row2 >> sl) & 1) << l;
            }
            c += (t.rows1[k] ^ aligned).count_ones() as u64;
            m += (t.mismatch[k] >> sigma[k]) & 1;
        }
        let total = c / 2 + m;
        // Strict improvement keeps the first minimum in lexicographic
        // enumeration order, which is the smallest mapping.
        if total < best_total {
            best_total = total;
            best_c = c;
            best_m = m;
            best_sigma.copy_from_slice(&sigma);
            if total == 0 {
                break;
            }
        }
        if !next_permutation(&mut sigma) {
            break;
        }
    }

    let (nged, similarity) = similarity_from_ged(best_total, orig_n1, orig_n2);
    Ok(GedResult {
        ged: best_total,
        breakdown: Some(EditCostBreakdown {
            c: best_c,
            m: best_m,
        }),
        nged,
        similarity,
        permutation: Some(Permutation::new(best_sigma).expect("search emits bijections")),
    })
}

/// Advances `a` to its lexicographic successor in place; returns false when
/// `a` was already the last permutation.
fn next_permutation(a: &mut [usize]) -> bool {
    let n = a.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && a[i - 1] >= a[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while a[j] <= a[i - 1] {
        j -= 1;
    }
    a.swap(i - 1, j);
    a[i..].reverse();
    true
}

/// A partial alignment in the search: nodes `0..mapping.len()` of the left
/// graph are matched, in order, with the listed right nodes.
struct SearchState {
    f: u64,
    g_edge: u32,
    g_label: u32,
    used: u64,
    mapping: Vec<u8>,
}

impl SearchState {
    fn g(&self) -> u64 {
        self.g_edge as u64 + self.g_label as u64
    }
}

impl PartialEq for SearchState {
    fn eq(&self, other: &Self) -> bool {
        self.f == other.f && self.mapping == other.mapping
    }
}
impl Eq for SearchState {}

impl Ord for SearchState {
    // Reversed so the max-heap pops the smallest (f, mapping); the mapping
    // component makes ties resolve toward the lexicographically smallest
    // alignment.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .cmp(&self.f)
            .then_with(|| other.mapping.cmp(&self.mapping))
    }
}
impl PartialOrd for SearchState {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Per-pair precomputation for the A* heuristic: label counts and edge
/// counts restricted to the unmatched remainder of each graph.
struct AstarContext {
    t: PairTable,
    /// `suffix_label1[k][l]` counts left nodes with label id `l` at index
    /// `>= k`.
    suffix_label1: Vec<Vec<u32>>,
    /// Left edges with at least one endpoint at index `>= k`.
    suffix_edges1: Vec<u32>,
}

impl AstarContext {
    fn new(t: PairTable) -> Self {
        let n = t.n;
        let mut suffix_label1 = vec![vec![0u32; t.n_label_ids]; n + 1];
        for k in (0..n).rev() {
            suffix_label1[k] = suffix_label1[k + 1].clone();
            suffix_label1[k][t.labels1[k] as usize] += 1;
        }
        let total: u32 = (0..n).map(|i| t.rows1[i].count_ones()).sum::<u32>() / 2;
        let low_mask = |k: usize| {
            if k >= 64 {
                u64::MAX
            } else {
                (1u64 << k) - 1
            }
        };
        let suffix_edges1: Vec<u32> = (0..=n)
            .map(|k| {
                let within_prefix: u32 = (0..k)
                    .map(|i| (t.rows1[i] & low_mask(k)).count_ones())
                    .sum::<u32>()
                    / 2;
                total - within_prefix
            })
            .collect();
        AstarContext {
            t,
            suffix_label1,
            suffix_edges1,
        }
    }

    /// Admissible lower bound on the remaining edits: label-multiset
    /// mismatch between the unmatched node sets plus the difference in
    /// unmatched edge counts. Both are counts of forced future edits in
    /// disjoint cost categories.
    fn heuristic(&self, depth: usize, used: u64) -> u64 {
        let t = &self.t;
        let mut remaining2 = vec![0u32; t.n_label_ids];
        for v in 0..t.n {
            if used >> v & 1 == 0 {
                remaining2[t.labels2[v] as usize] += 1;
            }
        }
        let mut label_lb = 0u64;
        for (l, &c1) in self.suffix_label1[depth].iter().enumerate() {
            label_lb += c1.saturating_sub(remaining2[l]) as u64;
        }
        let e2_future = t
            .edges2
            .iter()
            .filter(|&&(u, v)| (used >> u & 1 == 0) || (used >> v & 1 == 0))
            .count() as u64;
        let e1_future = self.suffix_edges1[depth] as u64;
        label_lb + e1_future.abs_diff(e2_future)
    }

    /// Exact edit cost added by matching left node `depth` with right node
    /// `v`, given the existing prefix: a label edit plus one edge edit per
    /// adjacency disagreement against already-matched nodes.
    fn step_cost(&self, mapping: &[u8], v: usize) -> (u32, u32) {
        let t = &self.t;
        let k = mapping.len();
        let label = ((t.mismatch[k] >> v) & 1) as u32;
        let mut edge = 0u32;
        let row1 = t.rows1[k];
        let row2 = t.rows2[v];
        for (kp, &mp) in mapping.iter().enumerate() {
            let a1 = (row1 >> kp) & 1;
            let a2 = (row2 >> mp) & 1;
            edge += (a1 ^ a2) as u32;
        }
        (edge, label)
    }
}

/// Exact GED by best-first search over partial alignments of the padded
/// graphs. The heuristic is admissible and consistent, so the first goal
/// popped is optimal, and the `(f, mapping)` heap order makes that goal the
/// lexicographically smallest optimal alignment. `node_budget` bounds the
/// number of expanded states; exhausting it reports the distance bracket
/// established so far.
pub fn astar_ged(g1: &Graph, g2: &Graph, node_budget: u64) -> Result<GedResult, GedError> {
    let n_max = g1.n().max(g2.n());
    if n_max > ASTAR_MAX_NODES {
        return Err(GedError::AstarGuard(n_max));
    }
    let (t, orig_n1, orig_n2) = PairTable::build(g1, g2)?;
    let ctx = AstarContext::new(t);
    let n = ctx.t.n;

    let mut open = BinaryHeap::new();
    open.push(SearchState {
        f: ctx.heuristic(0, 0),
        g_edge: 0,
        g_label: 0,
        used: 0,
        mapping: Vec::new(),
    });
    let mut expanded: u64 = 0;
    while let Some(state) = open.pop() {
        if state.mapping.len() == n {
            let ged = state.g();
            let (nged, similarity) = similarity_from_ged(ged, orig_n1, orig_n2);
            let mapping: Vec<usize> = state.mapping.iter().map(|&v| v as usize).collect();
            return Ok(GedResult {
                ged,
                breakdown: Some(EditCostBreakdown {
                    c: 2 * state.g_edge as u64,
                    m: state.g_label as u64,
                }),
                nged,
                similarity,
                permutation: Some(Permutation::new(mapping).expect("search emits bijections")),
            });
        }
        if expanded >= node_budget {
            // Pops are nondecreasing in f, so the current f already bounds
            // the optimum from below; a greedy completion bounds it above.
            let upper = greedy_completion(&ctx, &state);
            return Err(GedError::BudgetExhausted {
                budget: node_budget,
                lower_bound: state.f,
                upper_bound: upper,
            });
        }
        expanded += 1;
        let depth = state.mapping.len();
        for v in 0..n {
            if state.used >> v & 1 == 1 {
                continue;
            }
            let (de, dl) = ctx.step_cost(&state.mapping, v);
            let mut mapping = state.mapping.clone();
            mapping.push(v as u8);
            let used = state.used | (1 << v);
            let g_edge = state.g_edge + de;
            let g_label = state.g_label + dl;
            let f = g_edge as u64 + g_label as u64 + ctx.heuristic(depth + 1, used);
            open.push(SearchState {
                f,
                g_edge,
                g_label,
                used,
                mapping,
            });
        }
    }
    unreachable!("search space contains a goal for every padded pair");
}

fn greedy_completion(ctx: &AstarContext, state: &SearchState) -> u64 {
    let n = ctx.t.n;
    let mut mapping = state.mapping.clone();
    let mut used = state.used;
    let mut g_edge = state.g_edge;
    let mut g_label = state.g_label;
    while mapping.len() < n {
        let v = (0..n).find(|&v| used >> v & 1 == 0).expect("free node exists");
        let (de, dl) = ctx.step_cost(&mapping, v);
        g_edge += de;
        g_label += dl;
        used |= 1 << v;
        mapping.push(v as u8);
    }
    g_edge as u64 + g_label as u64
}

/// One ground-truth record: an unordered graph pair with its exact distance
/// and similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct GtEntry {
    pub g1: u32,
    pub g2: u32,
    pub ged: u64,
    pub similarity: f64,
}

/// Exact distances for every unordered pair of a graph set, including each
/// graph with itself. Entries are stored once with `g1 <= g2` and sorted,
/// so serialization is canonical; lookups accept either id order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTable {
    entries: Vec<GtEntry>,
    index: HashMap<(u32, u32), usize>,
}

impl GroundTruthTable {
    pub fn from_entries(mut entries: Vec<GtEntry>) -> Result<Self, GedError> {
        for e in &mut entries {
            if e.g1 > e.g2 {
                std::mem::swap(&mut e.g1, &mut e.g2);
            }
        }
        entries.sort_by_key(|e| (e.g1, e.g2));
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert((e.g1, e.g2), i).is_some() {
                return Err(GedError::CsvFormat {
                    line: i + 2,
                    message: format!("duplicate pair ({}, {})", e.g1, e.g2),
                });
            }
        }
        Ok(GroundTruthTable { entries, index })
    }

    pub fn lookup(&self, i: u32, j: u32) -> Option<&GtEntry> {
        let key = (i.min(j), i.max(j));
        self.index.get(&key).map(|&k| &self.entries[k])
    }

    pub fn entries(&self) -> &[GtEntry] {
        &self.entries
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("g1,g2,ged,similarity\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{:.16e}\n",
                e.g1, e.g2, e.ged, e.similarity
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self, GedError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "g1,g2,ged,similarity")) => {}
            Some((_, other)) => {
                return Err(GedError::CsvFormat {
                    line: 1,
                    message: format!("expected header `g1,g2,ged,similarity`, got `{other}`"),
                })
            }
            None => {
                return Err(GedError::CsvFormat {
                    line: 1,
                    message: "empty file".to_string(),
                })
            }
        }
        let mut entries = Vec::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(GedError::CsvFormat {
                    line: lineno,
                    message: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let g1: u32 = fields[0].parse().map_err(|_| GedError::CsvFormat {
                line: lineno,
                message: format!("invalid g1 `{}`", fields[0]),
            })?;
            let g2: u32 = fields[1].parse().map_err(|_| GedError::CsvFormat {
                line: lineno,
                message: format!("invalid g2 `{}`", fields[1]),
            })?;
            let ged: u64 = fields[2].parse().map_err(|_| GedError::CsvFormat {
                line: lineno,
                message: format!("invalid ged `{}`", fields[2]),
            })?;
            let similarity: f64 = fields[3].parse().map_err(|_| GedError::CsvFormat {
                line: lineno,
                message: format!("invalid similarity `{}`", fields[3]),
            })?;
            if !similarity.is_finite() || similarity <= 0.0 || similarity > 1.0 {
                return Err(GedError::CsvFormat {
                    line: lineno,
                    message: format!("similarity {similarity} outside (0, 1]"),
                });
            }
            entries.push(GtEntry {
                g1,
                g2,
                ged,
                similarity,
            });
        }
        GroundTruthTable::from_entries(entries)
    }
}

/// Runs the chosen solver on every unordered pair, including each graph
/// paired with itself. Solver failures are reported with the offending pair.
pub fn ground_truth_table(graphs: &[Graph], algo: GedAlgo) -> Result<GroundTruthTable, GedError> {
    let mut seen = HashMap::new();
    for g in graphs {
        if seen.insert(g.id, ()).is_some() {
            return Err(GedError::DuplicateGraphId(g.id));
        }
    }
    let mut order: Vec<&Graph> = graphs.iter().collect();
    order.sort_by_key(|g| g.id);
    let mut entries = Vec::with_capacity(order.len() * (order.len() + 1) / 2);
    for (a, gi) in order.iter().enumerate() {
        for gj in &order[a..] {
            let result = match algo {
                GedAlgo::Brute => brute_force_ged(gi, gj),
                GedAlgo::Astar { node_budget } => astar_ged(gi, gj, node_budget),
            }
            .map_err(|e| GedError::Pair {
                i: gi.id,
                j: gj.id,
                source: Box::new(e),
            })?;
            entries.push(GtEntry {
                g1: gi.id,
                g2: gj.id,
                ged: result.ged,
                similarity: result.similarity,
            });
        }
    }
    GroundTruthTable::from_entries(entries)
}
