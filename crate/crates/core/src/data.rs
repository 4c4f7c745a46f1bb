//! Dataset, split, and ground-truth file formats plus synthetic dataset
//! generation labeled by the exact solvers.
//!
//! A dataset file is UTF-8 JSON of the shape
//! `{"graphs": [{"id": 0, "nodes": [{"id": 0, "label": "a"}], "edges": [[0, 1]]}]}`.
//! Node ids within a graph must be `0..n-1`; labels are either present on
//! every node of every graph or absent everywhere. The vocabulary is not
//! stored; it is derived from the observed labels at load time.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ged::{ground_truth_table, GedAlgo, GedError, GroundTruthTable};
use crate::graph::{
    dataset_vocabulary, random_graph, Graph, GraphError, LabelVocabulary, NodeLabel,
};
use crate::train::Split;

/// Node-count ceiling for brute-force-labeled generation.
pub const GEN_BRUTE_MAX: usize = 8;
/// Node-count ceiling for A*-labeled generation.
pub const GEN_ASTAR_MAX: usize = 12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("graph {graph}: {source}")]
    InvalidGraph {
        graph: u32,
        #[source]
        source: GraphError,
    },
    #[error("graph {graph}: node id {node} is outside the contiguous range 0..{n}")]
    NodeIdOutOfRange { graph: u32, node: u32, n: usize },
    #[error("graph {graph}: node id {node} appears more than once")]
    DuplicateNodeId { graph: u32, node: u32 },
    #[error("graph {0} has no nodes")]
    EmptyGraph(u32),
    #[error("graph {0} mixes labeled and unlabeled nodes")]
    MixedLabels(u32),
    #[error("duplicate graph id {0} in dataset")]
    DuplicateGraphId(u32),
    #[error("invalid generation request: {0}")]
    Gen(String),
    #[error("{algo} generation is capped at {limit} nodes, got n_max = {n_max}")]
    GenGuard {
        algo: &'static str,
        limit: usize,
        n_max: usize,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ged(#[from] GedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for DataError {
    fn from(e: serde_json::Error) -> Self {
        DataError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    graphs: Vec<GraphDto>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDto {
    id: u32,
    nodes: Vec<NodeDto>,
    edges: Vec<[u32; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDto {
    id: u32,
    label: Option<String>,
}

fn graph_from_dto(dto: &GraphDto) -> Result<Graph, DataError> {
    let n = dto.nodes.len();
    if n == 0 {
        return Err(DataError::EmptyGraph(dto.id));
    }
    let mut slots: Vec<Option<&Option<String>>> = vec![None; n];
    for node in &dto.nodes {
        let idx = node.id as usize;
        if idx >= n {
            return Err(DataError::NodeIdOutOfRange {
                graph: dto.id,
                node: node.id,
                n,
            });
        }
        if slots[idx].is_some() {
            return Err(DataError::DuplicateNodeId {
                graph: dto.id,
                node: node.id,
            });
        }
        slots[idx] = Some(&node.label);
    }
    let labelled = slots
        .iter()
        .filter(|s| matches!(s, Some(Some(_))))
        .count();
    let labels = if labelled == 0 {
        None
    } else if labelled == n {
        Some(
            slots
                .iter()
                .map(|s| NodeLabel::Token(s.unwrap().clone().unwrap()))
                .collect(),
        )
    } else {
        return Err(DataError::MixedLabels(dto.id));
    };
    let edges: Vec<(u32, u32)> = dto.edges.iter().map(|&[u, v]| (u, v)).collect();
    Graph::new(dto.id, n, &edges, labels).map_err(|source| DataError::InvalidGraph {
        graph: dto.id,
        source,
    })
}

fn graph_to_dto(g: &Graph) -> GraphDto {
    let labels = g.labels();
    GraphDto {
        id: g.id,
        nodes: (0..g.n())
            .map(|i| NodeDto {
                id: i as u32,
                label: labels.and_then(|l| match &l[i] {
                    NodeLabel::Token(t) => Some(t.clone()),
                    NodeLabel::Unlabeled | NodeLabel::Null => None,
                }),
            })
            .collect(),
        edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
    }
}

/// Parses a dataset from JSON text, validating every graph and deriving the
/// shared vocabulary from the observed labels.
pub fn parse_dataset(text: &str) -> Result<(Vec<Graph>, LabelVocabulary), DataError> {
    let file: DatasetFile = serde_json::from_str(text)?;
    let mut seen = HashSet::new();
    let mut graphs = Vec::with_capacity(file.graphs.len());
    for dto in &file.graphs {
        if !seen.insert(dto.id) {
            return Err(DataError::DuplicateGraphId(dto.id));
        }
        graphs.push(graph_from_dto(dto)?);
    }
    let vocabulary = dataset_vocabulary(&graphs)?;
    Ok((graphs, vocabulary))
}

pub fn load_dataset(path: &Path) -> Result<(Vec<Graph>, LabelVocabulary), DataError> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

/// Renders a dataset as the JSON dataset format. Graph order is preserved.
pub fn dataset_json(graphs: &[Graph]) -> String {
    let file = DatasetFile {
        graphs: graphs.iter().map(graph_to_dto).collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("dataset DTOs always serialize");
    text.push('\n');
    text
}

pub fn save_dataset(path: &Path, graphs: &[Graph]) -> Result<(), DataError> {
    std::fs::write(path, dataset_json(graphs))?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<Split, DataError> {
    let split: Split = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(split)
}

pub fn save_split(path: &Path, split: &Split) -> Result<(), DataError> {
    let mut text = serde_json::to_string(split)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruthTable, DataError> {
    Ok(GroundTruthTable::parse_csv(&std::fs::read_to_string(
        path,
    )?)?)
}

pub fn save_ground_truth(path: &Path, table: &GroundTruthTable) -> Result<(), DataError> {
    std::fs::write(path, table.to_csv())?;
    Ok(())
}

/// Parameters for synthetic dataset generation. `n_labels == 0` produces an
/// unlabeled dataset; otherwise nodes draw uniformly from `l0..l{n_labels-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_graphs: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub edge_prob: f64,
    pub n_labels: usize,
    pub seed: u64,
    pub algo: GedAlgo,
}

/// Generates a seeded random dataset of connected graphs with ids
/// `0..n_graphs` and labels every unordered pair (including each graph with
/// itself) with the exact solver. Node counts are capped well below the
/// solvers' hard limits so full-table labeling stays affordable.
pub fn gen_synthetic(config: &GenConfig) -> Result<(Vec<Graph>, GroundTruthTable), DataError> {
    if config.n_graphs == 0 {
        return Err(DataError::Gen("n_graphs must be at least 1".into()));
    }
    match config.algo {
        GedAlgo::Brute if config.n_max > GEN_BRUTE_MAX => {
            return Err(DataError::GenGuard {
                algo: "brute-force",
                limit: GEN_BRUTE_MAX,
                n_max: config.n_max,
            });
        }
        GedAlgo::Astar { .. } if config.n_max > GEN_ASTAR_MAX => {
            return Err(DataError::GenGuard {
                algo: "A*",
                limit: GEN_ASTAR_MAX,
                n_max: config.n_max,
            });
        }
        _ => {}
    }
    let vocabulary = if config.n_labels == 0 {
        LabelVocabulary::unlabeled()
    } else {
        LabelVocabulary::labeled((0..config.n_labels).map(|i| format!("l{i}")).collect())?
    };
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut graphs = Vec::with_capacity(config.n_graphs);
    for i in 0..config.n_graphs {
        let graph_seed: u64 = master.random();
        let mut g = random_graph(
            config.n_min,
            config.n_max,
            config.edge_prob,
            &vocabulary,
            graph_seed,
        )?;
        g.id = i as u32;
        graphs.push(g);
    }
    let table = ground_truth_table(&graphs, config.algo)?;
    Ok((graphs, table))
}

/// Runs [`gen_synthetic`] and writes the dataset JSON and ground-truth CSV.
pub fn gen_synthetic_files(
    config: &GenConfig,
    data_path: &Path,
    gt_path: &Path,
) -> Result<(), DataError> {
    let (graphs, table) = gen_synthetic(config)?;
    save_dataset(data_path, &graphs)?;
    save_ground_truth(gt_path, &table)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ged::brute_force_ged;

    fn small_gen_config() -> GenConfig {
        GenConfig {
            n_graphs: 12,
            n_min: 3,
            n_max: 6,
            edge_prob: 0.3,
            n_labels: 3,
            seed: 42,
            algo: GedAlgo::Brute,
        }
    }

    #[test]
    fn dataset_round_trips_structurally() {
        let (graphs, _) = gen_synthetic(&small_gen_config()).unwrap();
        let (back, vocab) = parse_dataset(&dataset_json(&graphs)).unwrap();
        assert_eq!(back, graphs);
        assert_eq!(vocab.tokens(), &["l0", "l1", "l2"]);

        let mut unlabeled_config = small_gen_config();
        unlabeled_config.n_labels = 0;
        let (graphs, _) = gen_synthetic(&unlabeled_config).unwrap();
        let (back, vocab) = parse_dataset(&dataset_json(&graphs)).unwrap();
        assert_eq!(back, graphs);
        assert!(vocab.tokens().is_empty());
    }

    #[test]
    fn dataset_files_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("d.json");
        let gt_path = dir.path().join("gt.csv");
        let config = small_gen_config();
        gen_synthetic_files(&config, &data_path, &gt_path).unwrap();

        let (graphs, _) = load_dataset(&data_path).unwrap();
        let table = load_ground_truth(&gt_path).unwrap();
        let (expected_graphs, expected_table) = gen_synthetic(&config).unwrap();
        assert_eq!(graphs, expected_graphs);
        assert_eq!(table.entries(), expected_table.entries());
    }

    #[test]
    fn duplicate_edge_error_names_graph_and_edge() {
        let text = r#"{"graphs": [{"id": 7, "nodes": [{"id": 0, "label": "a"}, {"id": 1, "label": "a"}], "edges": [[0, 1], [1, 0]]}]}"#;
        let err = parse_dataset(text).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("graph 7"), "{message}");
        assert!(matches!(
            err,
            DataError::InvalidGraph {
                graph: 7,
                source: GraphError::DuplicateEdge(1, 0)
            }
        ));
    }

    #[test]
    fn mixed_labeled_and_unlabeled_graphs_are_rejected() {
        let text = r#"{"graphs": [
            {"id": 0, "nodes": [{"id": 0, "label": "a"}], "edges": []},
            {"id": 1, "nodes": [{"id": 0, "label": null}], "edges": []}
        ]}"#;
        assert!(matches!(
            parse_dataset(text),
            Err(DataError::Graph(GraphError::MixedDataset(1)))
        ));
    }

    #[test]
    fn mixed_labels_within_one_graph_are_rejected() {
        let text = r#"{"graphs": [{"id": 3, "nodes": [{"id": 0, "label": "a"}, {"id": 1, "label": null}], "edges": []}]}"#;
        assert!(matches!(parse_dataset(text), Err(DataError::MixedLabels(3))));
    }

    #[test]
    fn node_id_violations_name_the_graph() {
        let gap = r#"{"graphs": [{"id": 5, "nodes": [{"id": 0, "label": "a"}, {"id": 2, "label": "a"}], "edges": []}]}"#;
        assert!(matches!(
            parse_dataset(gap),
            Err(DataError::NodeIdOutOfRange {
                graph: 5,
                node: 2,
                n: 2
            })
        ));

        let dup = r#"{"graphs": [{"id": 6, "nodes": [{"id": 0, "label": "a"}, {"id": 0, "label": "a"}], "edges": []}]}"#;
        assert!(matches!(
            parse_dataset(dup),
            Err(DataError::DuplicateNodeId { graph: 6, node: 0 })
        ));

        let empty = r#"{"graphs": [{"id": 9, "nodes": [], "edges": []}]}"#;
        assert!(matches!(parse_dataset(empty), Err(DataError::EmptyGraph(9))));

        let dup_graph = r#"{"graphs": [
            {"id": 1, "nodes": [{"id": 0, "label": "a"}], "edges": []},
            {"id": 1, "nodes": [{"id": 0, "label": "a"}], "edges": []}
        ]}"#;
        assert!(matches!(
            parse_dataset(dup_graph),
            Err(DataError::DuplicateGraphId(1))
        ));
    }

    #[test]
    fn parse_errors_carry_positions() {
        let err = parse_dataset("{\n  \"graphs\": [,]\n}").unwrap_err();
        match err {
            DataError::Parse { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    #[test]
    fn split_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        let split = Split {
            train_ids: vec![0, 2, 4],
            val_ids: vec![1],
            query_ids: vec![3],
        };
        save_split(&path, &split).unwrap();
        assert_eq!(load_split(&path).unwrap(), split);
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(raw.starts_with(r#"{"train":"#), "{raw}");
    }

    #[test]
    fn generation_is_deterministic_and_guarded() {
        let config = small_gen_config();
        let (g1, t1) = gen_synthetic(&config).unwrap();
        let (g2, t2) = gen_synthetic(&config).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(t1.entries(), t2.entries());

        let mut big = small_gen_config();
        big.n_max = 9;
        assert!(matches!(
            gen_synthetic(&big),
            Err(DataError::GenGuard {
                algo: "brute-force",
                limit: 8,
                n_max: 9
            })
        ));

        big.algo = GedAlgo::Astar { node_budget: 1_000_000 };
        assert!(gen_synthetic(&big).is_ok());
        big.n_max = 13;
        assert!(matches!(
            gen_synthetic(&big),
            Err(DataError::GenGuard {
                algo: "A*",
                limit: 12,
                n_max: 13
            })
        ));

        let mut none = small_gen_config();
        none.n_graphs = 0;
        assert!(matches!(gen_synthetic(&none), Err(DataError::Gen(_))));
    }

    #[test]
    fn generated_table_covers_every_pair_with_unit_self_similarity() {
        let config = GenConfig {
            n_graphs: 20,
            ..small_gen_config()
        };
        let (graphs, table) = gen_synthetic(&config).unwrap();
        assert_eq!(graphs.len(), 20);
        assert_eq!(table.entries().len(), 20 * 19 / 2 + 20);
        for i in 0..20u32 {
            let own = table.lookup(i, i).unwrap();
            assert_eq!(own.ged, 0);
            assert_eq!(own.similarity, 1.0);
            for j in i..20u32 {
                assert!(table.lookup(i, j).is_some());
                assert_eq!(table.lookup(i, j).unwrap(), table.lookup(j, i).unwrap());
            }
        }
    }

    #[test]
    fn generated_entries_match_the_brute_force_oracle() {
        let (graphs, table) = gen_synthetic(&small_gen_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let i = rng.random_range(0..graphs.len());
            let j = rng.random_range(0..graphs.len());
            let entry = table.lookup(i as u32, j as u32).unwrap();
            let oracle = brute_force_ged(&graphs[i], &graphs[j]).unwrap();
            assert_eq!(entry.ged, oracle.ged);
            assert_eq!(entry.similarity.to_bits(), oracle.similarity.to_bits());
        }
    }
}
