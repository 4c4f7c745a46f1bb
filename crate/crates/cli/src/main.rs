//! Command line interface for the graph similarity toolkit.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or contract
//! errors. Diagnostics go to stderr; results go to files or stdout.

use std::error::Error;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use gsim_core::data::{
    gen_synthetic_files, load_dataset, load_ground_truth, load_split, save_split, GenConfig,
};
use gsim_core::ged::{brute_force_ged, astar_ged, GedAlgo, GedResult, GroundTruthTable};
use gsim_core::graph::{dataset_vocabulary, Graph};
use gsim_core::metrics::{evaluate, export_embeddings, export_heatmap, embeddings_csv, heatmap_csv, query_topk};
use gsim_core::model::Model;
use gsim_core::train::{
    load_checkpoint, load_train_config, save_checkpoint, split_dataset, train, training_log_csv,
    Checkpoint, Split,
};

const DEFAULT_ASTAR_BUDGET: u64 = 10_000_000;

#[derive(Parser)]
#[command(
    name = "gsim",
    version,
    about = "Exact graph edit distance oracles and a learned similarity scorer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with exact ground-truth similarities.
    GenData(GenDataArgs),
    /// Compute the exact edit distance between two graphs of a dataset.
    Ged(GedArgs),
    /// Train a similarity model and write the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint over the query set and write a report.
    Eval(EvalArgs),
    /// Rank the database against one query graph.
    Query(QueryArgs),
    /// Export cross-graph node cosine similarities for one pair.
    ExportHeatmap(ExportHeatmapArgs),
    /// Export per-graph summary embeddings.
    ExportEmbeddings(ExportEmbeddingsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoFlag {
    Brute,
    Astar,
}

impl AlgoFlag {
    fn to_algo(self, budget: u64) -> GedAlgo {
        match self {
            AlgoFlag::Brute => GedAlgo::Brute,
            AlgoFlag::Astar => GedAlgo::Astar {
                node_budget: budget,
            },
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of graphs to generate.
    #[arg(long, default_value_t = 150)]
    n_graphs: usize,
    /// Minimum node count per graph.
    #[arg(long, default_value_t = 5)]
    n_min: usize,
    /// Maximum node count per graph.
    #[arg(long, default_value_t = 8)]
    n_max: usize,
    /// Probability of each extra edge beyond the spanning tree.
    #[arg(long, default_value_t = 0.5)]
    edge_prob: f64,
    /// Number of distinct node labels; 0 generates an unlabeled dataset.
    #[arg(long, default_value_t = 4)]
    n_labels: usize,
    #[arg(long, default_value_t = 13)]
    seed: u64,
    /// Exact solver used to label every graph pair.
    #[arg(long, value_enum, default_value_t = AlgoFlag::Brute)]
    algo: AlgoFlag,
    /// A* search budget in expanded states.
    #[arg(long, default_value_t = DEFAULT_ASTAR_BUDGET)]
    budget: u64,
    /// Output path for the dataset JSON.
    #[arg(long)]
    out_data: PathBuf,
    /// Output path for the ground-truth CSV.
    #[arg(long)]
    out_gt: PathBuf,
}

#[derive(Args)]
struct GedArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Id of the first graph.
    #[arg(long)]
    g1: u32,
    /// Id of the second graph.
    #[arg(long)]
    g2: u32,
    #[arg(long, value_enum, default_value_t = AlgoFlag::Brute)]
    algo: AlgoFlag,
    /// A* search budget in expanded states.
    #[arg(long, default_value_t = DEFAULT_ASTAR_BUDGET)]
    budget: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Dataset JSON.
    #[arg(long)]
    data: PathBuf,
    /// Ground-truth CSV.
    #[arg(long)]
    gt: PathBuf,
    /// Split JSON; created from the config seed when the file is missing.
    #[arg(long)]
    split: PathBuf,
    /// Output path for the checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Output path for the epoch log CSV; defaults to <out>.log.csv.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint path.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Output path for the report JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    /// Checkpoint path.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Id of the query graph.
    #[arg(long)]
    graph: u32,
    /// Number of database graphs to return.
    #[arg(long)]
    topk: usize,
}

#[derive(Args)]
struct ExportHeatmapArgs {
    /// Checkpoint path.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    g1: u32,
    #[arg(long)]
    g2: u32,
    /// Output path for the heatmap CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportEmbeddingsArgs {
    /// Checkpoint path.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output path for the embeddings CSV.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let mut source = e.source();
        while let Some(cause) = source {
            eprintln!("  caused by: {cause}");
            source = cause.source();
        }
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn Error>> {
    match cli.command {
        Command::GenData(args) => run_gen_data(args),
        Command::Ged(args) => run_ged(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Query(args) => run_query(args),
        Command::ExportHeatmap(args) => run_export_heatmap(args),
        Command::ExportEmbeddings(args) => run_export_embeddings(args),
    }
}

fn find_graph(graphs: &[Graph], id: u32) -> Result<&Graph, Box<dyn Error>> {
    graphs
        .iter()
        .find(|g| g.id == id)
        .ok_or_else(|| format!("graph id {id} not present in the dataset").into())
}

fn load_model(path: &Path) -> Result<(Checkpoint, Model), Box<dyn Error>> {
    let checkpoint = load_checkpoint(path)?;
    let model = checkpoint.model()?;
    Ok((checkpoint, model))
}

/// The model can only score graphs whose labels it was trained on.
fn check_vocabulary(model: &Model, graphs: &[Graph]) -> Result<(), Box<dyn Error>> {
    let dataset = dataset_vocabulary(graphs)?;
    let trained = model.vocabulary();
    if dataset.tokens().is_empty() != trained.tokens().is_empty() {
        return Err("checkpoint and dataset disagree about node labels being present".into());
    }
    for token in dataset.tokens() {
        if !trained.tokens().contains(token) {
            return Err(format!(
                "dataset label `{token}` is not in the checkpoint vocabulary"
            )
            .into());
        }
    }
    Ok(())
}

fn run_gen_data(args: GenDataArgs) -> Result<(), Box<dyn Error>> {
    let config = GenConfig {
        n_graphs: args.n_graphs,
        n_min: args.n_min,
        n_max: args.n_max,
        edge_prob: args.edge_prob,
        n_labels: args.n_labels,
        seed: args.seed,
        algo: args.algo.to_algo(args.budget),
    };
    gen_synthetic_files(&config, &args.out_data, &args.out_gt)?;
    println!(
        "wrote {} and {}",
        args.out_data.display(),
        args.out_gt.display()
    );
    Ok(())
}

fn run_ged(args: GedArgs) -> Result<(), Box<dyn Error>> {
    let (graphs, _) = load_dataset(&args.dataset)?;
    let g1 = find_graph(&graphs, args.g1)?;
    let g2 = find_graph(&graphs, args.g2)?;
    let result: GedResult = match args.algo.to_algo(args.budget) {
        GedAlgo::Brute => brute_force_ged(g1, g2)?,
        GedAlgo::Astar { node_budget } => astar_ged(g1, g2, node_budget)?,
    };
    println!(
        "ged={} nged={} sim={}",
        result.ged, result.nged, result.similarity
    );
    Ok(())
}

fn load_or_create_split(
    path: &Path,
    graphs: &[Graph],
    seed: u64,
) -> Result<Split, Box<dyn Error>> {
    if path.exists() {
        let split = load_split(path)?;
        split.validate_against(graphs)?;
        eprintln!("using existing split {}", path.display());
        Ok(split)
    } else {
        let split = split_dataset(graphs, seed)?;
        save_split(path, &split)?;
        eprintln!("wrote new split {}", path.display());
        Ok(split)
    }
}

fn run_train(args: TrainArgs) -> Result<(), Box<dyn Error>> {
    let config = load_train_config(&args.config)?;
    let (graphs, _) = load_dataset(&args.data)?;
    let gt = load_ground_truth(&args.gt)?;
    let split = load_or_create_split(&args.split, &graphs, config.seed)?;

    let outcome = train(&graphs, &gt, &split, &config)?;
    save_checkpoint(&args.out, &outcome.checkpoint)?;
    let log_path = args
        .log
        .unwrap_or_else(|| args.out.with_extension("ckpt.log.csv"));
    std::fs::write(&log_path, training_log_csv(&outcome.log))?;

    println!(
        "best_epoch={} best_val_mse={}",
        outcome.best_epoch, outcome.best_val_mse
    );
    eprintln!(
        "wrote checkpoint {} and log {}",
        args.out.display(),
        log_path.display()
    );
    Ok(())
}

fn load_eval_inputs(
    model_path: &Path,
    data_path: &Path,
) -> Result<(Model, Vec<Graph>), Box<dyn Error>> {
    let (_, model) = load_model(model_path)?;
    let (graphs, _) = load_dataset(data_path)?;
    check_vocabulary(&model, &graphs)?;
    Ok((model, graphs))
}

fn run_eval(args: EvalArgs) -> Result<(), Box<dyn Error>> {
    let (model, graphs) = load_eval_inputs(&args.model, &args.data)?;
    let gt: GroundTruthTable = load_ground_truth(&args.gt)?;
    let split = load_split(&args.split)?;

    let report = evaluate(&model, &graphs, &split, &gt)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(&args.out, json)?;

    println!(
        "mse={} rho={} tau={} p@10={} p@20={}",
        report.mse, report.rho, report.tau, report.p_at_10, report.p_at_20
    );
    eprintln!("inference_seconds={}", report.inference_seconds);
    if report.degenerate_queries > 0 {
        eprintln!(
            "warning: {} queries had degenerate (all-tied) rankings",
            report.degenerate_queries
        );
    }
    eprintln!("wrote report {}", args.out.display());
    Ok(())
}

fn run_query(args: QueryArgs) -> Result<(), Box<dyn Error>> {
    let (model, graphs) = load_eval_inputs(&args.model, &args.data)?;
    let split = load_split(&args.split)?;
    let ranked = query_topk(&model, &graphs, &split, args.graph, args.topk)?;
    let mut out = String::new();
    for (id, score) in ranked {
        writeln!(out, "{id} {score}")?;
    }
    print!("{out}");
    Ok(())
}

fn run_export_heatmap(args: ExportHeatmapArgs) -> Result<(), Box<dyn Error>> {
    let (model, graphs) = load_eval_inputs(&args.model, &args.data)?;
    let g1 = find_graph(&graphs, args.g1)?;
    let g2 = find_graph(&graphs, args.g2)?;
    let matrix = export_heatmap(&model, g1, g2)?;
    std::fs::write(&args.out, heatmap_csv(&matrix))?;
    eprintln!("wrote heatmap {}", args.out.display());
    Ok(())
}

fn run_export_embeddings(args: ExportEmbeddingsArgs) -> Result<(), Box<dyn Error>> {
    let (model, graphs) = load_eval_inputs(&args.model, &args.data)?;
    let rows = export_embeddings(&model, &graphs)?;
    std::fs::write(&args.out, embeddings_csv(&rows))?;
    eprintln!("wrote embeddings {}", args.out.display());
    Ok(())
}
