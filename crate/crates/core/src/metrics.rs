//! Ranking metrics, the full query-evaluation pass, and raw data exports
//! for downstream visualization.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::cosine_guarded;
use crate::ged::GroundTruthTable;
use crate::graph::Graph;
use crate::model::{Model, ModelError};
use crate::train::{Split, TrainError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("metric input is empty")]
    Empty,
    #[error("metric input has length {len}; need at least {need}")]
    TooShort { len: usize, need: usize },
    #[error("metric inputs have different lengths ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("k = {k} is outside 1..={n}")]
    BadK { k: usize, n: usize },
}

fn check_paired(preds: &[f64], targets: &[f64], need: usize) -> Result<(), MetricError> {
    if preds.len() != targets.len() {
        return Err(MetricError::LengthMismatch {
            left: preds.len(),
            right: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    if preds.len() < need {
        return Err(MetricError::TooShort {
            len: preds.len(),
            need,
        });
    }
    Ok(())
}

/// Mean squared difference between predictions and targets.
pub fn mse_metric(preds: &[f64], targets: &[f64]) -> Result<f64, MetricError> {
    check_paired(preds, targets, 1)?;
    let sum: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / preds.len() as f64)
}

/// A rank correlation value plus a flag marking inputs where the
/// coefficient is undefined (zero variance, all comparisons tied) and has
/// been reported as 0 by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCorrelation {
    pub value: f64,
    pub degenerate: bool,
}

/// Mid-ranks: ranks 1..=n with tied values sharing the average of the
/// positions they occupy.
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation: the Pearson correlation of mid-ranks.
/// Zero rank variance on either side yields a degenerate 0.
pub fn spearman_rho(preds: &[f64], targets: &[f64]) -> Result<RankCorrelation, MetricError> {
    check_paired(preds, targets, 2)?;
    let rp = mid_ranks(preds);
    let rt = mid_ranks(targets);
    let n = rp.len() as f64;
    let mean_p: f64 = rp.iter().sum::<f64>() / n;
    let mean_t: f64 = rt.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_t = 0.0;
    for (p, t) in rp.iter().zip(&rt) {
        let dp = p - mean_p;
        let dt = t - mean_t;
        cov += dp * dt;
        var_p += dp * dp;
        var_t += dt * dt;
    }
    if var_p == 0.0 || var_t == 0.0 {
        return Ok(RankCorrelation {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(RankCorrelation {
        value: cov / (var_p * var_t).sqrt(),
        degenerate: false,
    })
}

/// Kendall's tau-b by direct pair counting. All-tied input on either side
/// yields a degenerate 0.
pub fn kendall_tau(preds: &[f64], targets: &[f64]) -> Result<RankCorrelation, MetricError> {
    check_paired(preds, targets, 2)?;
    let n = preds.len();
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    let mut tied_p = 0u64;
    let mut tied_t = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            let dp = preds[i] - preds[j];
            let dt = targets[i] - targets[j];
            if dp == 0.0 {
                tied_p += 1;
            }
            if dt == 0.0 {
                tied_t += 1;
            }
            if dp == 0.0 || dt == 0.0 {
                continue;
            }
            if (dp > 0.0) == (dt > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    let denom = (n0 - tied_p as f64) * (n0 - tied_t as f64);
    if denom == 0.0 {
        return Ok(RankCorrelation {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(RankCorrelation {
        value: (concordant as f64 - discordant as f64) / denom.sqrt(),
        degenerate: false,
    })
}

/// Indices 0..n ordered by descending value; equal values keep ascending
/// index order. With database rows sorted by graph id, index order is id
/// order, which makes tie-breaking deterministic on both sides.
fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Fraction of the top-k sets (by prediction and by ground truth) that
/// overlap. Ties at the k-th value are resolved by ascending position on
/// both sides.
pub fn precision_at_k(preds: &[f64], targets: &[f64], k: usize) -> Result<f64, MetricError> {
    check_paired(preds, targets, 1)?;
    if k == 0 || k > preds.len() {
        return Err(MetricError::BadK {
            k,
            n: preds.len(),
        });
    }
    let top_pred = top_k_indices(preds, k);
    let top_true: std::collections::HashSet<usize> =
        top_k_indices(targets, k).into_iter().collect();
    let hits = top_pred.iter().filter(|i| top_true.contains(i)).count();
    Ok(hits as f64 / k as f64)
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Split(#[from] TrainError),
    #[error("split has an empty {0} section")]
    EmptySection(&'static str),
    #[error("database holds {got} graphs; evaluation needs at least {need}")]
    DatabaseTooSmall { got: usize, need: usize },
    #[error("missing ground truth for pair ({0}, {1})")]
    MissingGroundTruth(u32, u32),
    #[error("graph id {0} not present in the dataset")]
    UnknownGraphId(u32),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub id: u32,
    pub predicted: f64,
    pub actual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query: u32,
    pub entries: Vec<RankEntry>,
}

/// Full evaluation output: the five aggregate metrics plus, per query, the
/// whole database ordered by predicted similarity. Wall-clock time and
/// degeneracy diagnostics stay in memory and are not serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub mse: f64,
    pub rho: f64,
    pub tau: f64,
    pub p_at_10: f64,
    pub p_at_20: f64,
    pub queries: Vec<QueryRanking>,
    #[serde(skip)]
    pub inference_seconds: f64,
    #[serde(skip)]
    pub degenerate_queries: usize,
}

/// Scores one query embedding against every database embedding and returns
/// (id, score) pairs sorted by descending score, ascending id on ties.
pub fn rank_with_embeddings(
    model: &Model,
    query: &[f64],
    db: &[(u32, &[f64])],
) -> Result<Vec<(u32, f64)>, ModelError> {
    let pairs: Vec<(&[f64], &[f64])> = db.iter().map(|&(_, e)| (query, e)).collect();
    let scores = model.score_embedded_batch(&pairs)?;
    let mut ranked: Vec<(u32, f64)> = db
        .iter()
        .map(|&(id, _)| id)
        .zip(scores)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

struct ScoredQuery {
    query: u32,
    db_ids: Vec<u32>,
    preds: Vec<f64>,
    actuals: Vec<f64>,
}

fn assemble_report(scored: &[ScoredQuery]) -> Result<RankingReport, EvalError> {
    let mut sq_sum = 0.0;
    let mut pair_count = 0usize;
    let mut rho_sum = 0.0;
    let mut tau_sum = 0.0;
    let mut p10_sum = 0.0;
    let mut p20_sum = 0.0;
    let mut degenerate = 0usize;
    let mut queries = Vec::with_capacity(scored.len());

    for s in scored {
        for (p, t) in s.preds.iter().zip(&s.actuals) {
            sq_sum += (p - t) * (p - t);
        }
        pair_count += s.preds.len();

        let rho = spearman_rho(&s.preds, &s.actuals)?;
        let tau = kendall_tau(&s.preds, &s.actuals)?;
        if rho.degenerate || tau.degenerate {
            degenerate += 1;
        }
        rho_sum += rho.value;
        tau_sum += tau.value;
        p10_sum += precision_at_k(&s.preds, &s.actuals, 10)?;
        p20_sum += precision_at_k(&s.preds, &s.actuals, 20)?;

        let mut order: Vec<usize> = (0..s.preds.len()).collect();
        order.sort_by(|&a, &b| {
            s.preds[b]
                .total_cmp(&s.preds[a])
                .then(s.db_ids[a].cmp(&s.db_ids[b]))
        });
        queries.push(QueryRanking {
            query: s.query,
            entries: order
                .into_iter()
                .map(|i| RankEntry {
                    id: s.db_ids[i],
                    predicted: s.preds[i],
                    actual: s.actuals[i],
                })
                .collect(),
        });
    }

    let nq = scored.len() as f64;
    Ok(RankingReport {
        mse: sq_sum / pair_count as f64,
        rho: rho_sum / nq,
        tau: tau_sum / nq,
        p_at_10: p10_sum / nq,
        p_at_20: p20_sum / nq,
        queries,
        inference_seconds: 0.0,
        degenerate_queries: degenerate,
    })
}

/// Scores every query against the whole database and aggregates all five
/// metrics: MSE over all pairs, the rest averaged per query. Runs entirely
/// through the inference path; alignment regularization is never touched.
pub fn evaluate(
    model: &Model,
    graphs: &[Graph],
    split: &Split,
    gt: &GroundTruthTable,
) -> Result<RankingReport, EvalError> {
    split.validate_against(graphs)?;
    let db_ids = split.database_ids();
    let mut query_ids = split.query_ids.clone();
    query_ids.sort_unstable();
    if query_ids.is_empty() {
        return Err(EvalError::EmptySection("query"));
    }
    if db_ids.len() < 20 {
        return Err(EvalError::DatabaseTooSmall {
            got: db_ids.len(),
            need: 20,
        });
    }

    let by_id: HashMap<u32, &Graph> = graphs.iter().map(|g| (g.id, g)).collect();
    let started = Instant::now();

    let mut embeddings: HashMap<u32, Vec<f64>> = HashMap::new();
    for &id in db_ids.iter().chain(&query_ids) {
        embeddings.insert(id, model.embed(by_id[&id])?);
    }

    let mut scored = Vec::with_capacity(query_ids.len());
    for &q in &query_ids {
        let pairs: Vec<(&[f64], &[f64])> = db_ids
            .iter()
            .map(|id| (embeddings[&q].as_slice(), embeddings[id].as_slice()))
            .collect();
        let preds = model.score_embedded_batch(&pairs)?;
        let mut actuals = Vec::with_capacity(db_ids.len());
        for &id in &db_ids {
            let entry = gt
                .lookup(q, id)
                .ok_or(EvalError::MissingGroundTruth(q, id))?;
            actuals.push(entry.similarity);
        }
        scored.push(ScoredQuery {
            query: q,
            db_ids: db_ids.clone(),
            preds,
            actuals,
        });
    }

    let mut report = assemble_report(&scored)?;
    report.inference_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Top-k retrieval for one graph against the split's database, on the same
/// scoring path as [`evaluate`]. Returns at most k (id, score) pairs in
/// descending score order; requests beyond the database size are truncated.
pub fn query_topk(
    model: &Model,
    graphs: &[Graph],
    split: &Split,
    query_id: u32,
    k: usize,
) -> Result<Vec<(u32, f64)>, EvalError> {
    split.validate_against(graphs)?;
    let db_ids = split.database_ids();
    if k == 0 {
        return Err(EvalError::Metric(MetricError::BadK {
            k,
            n: db_ids.len(),
        }));
    }
    let by_id: HashMap<u32, &Graph> = graphs.iter().map(|g| (g.id, g)).collect();
    let query_graph = *by_id
        .get(&query_id)
        .ok_or(EvalError::UnknownGraphId(query_id))?;

    let query_emb = model.embed(query_graph)?;
    let db_embs: Vec<(u32, Vec<f64>)> = db_ids
        .iter()
        .map(|&id| model.embed(by_id[&id]).map(|e| (id, e)))
        .collect::<Result<_, _>>()?;
    let db_refs: Vec<(u32, &[f64])> = db_embs.iter().map(|(id, e)| (*id, e.as_slice())).collect();
    let mut ranked = rank_with_embeddings(model, &query_emb, &db_refs)?;
    ranked.truncate(k);
    Ok(ranked)
}

/// Cross-graph node-to-node cosine similarities of final-layer embeddings,
/// as an N_i x N_j matrix. Export only; prediction never reads this.
pub fn export_heatmap(
    model: &Model,
    g_i: &Graph,
    g_j: &Graph,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let hi = model.node_embeddings(g_i)?;
    let hj = model.node_embeddings(g_j)?;
    let d = hi.shape[1];
    let mut matrix = Vec::with_capacity(hi.shape[0]);
    for k in 0..hi.shape[0] {
        let row_i = &hi.data[k * d..(k + 1) * d];
        let mut row = Vec::with_capacity(hj.shape[0]);
        for l in 0..hj.shape[0] {
            let row_j = &hj.data[l * d..(l + 1) * d];
            row.push(cosine_guarded(row_i, row_j));
        }
        matrix.push(row);
    }
    Ok(matrix)
}

fn push_float(out: &mut String, x: f64) {
    out.push_str(&format!("{x:.16e}"));
}

/// Renders a heatmap matrix as headerless CSV, one row per line, 17
/// significant digits per entry.
pub fn heatmap_csv(matrix: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in matrix {
        for (i, &x) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            push_float(&mut out, x);
        }
        out.push('\n');
    }
    out
}

/// Whole-graph summary embeddings for every graph, ascending by id.
pub fn export_embeddings(
    model: &Model,
    graphs: &[Graph],
) -> Result<Vec<(u32, Vec<f64>)>, ModelError> {
    let mut ordered: Vec<&Graph> = graphs.iter().collect();
    ordered.sort_by_key(|g| g.id);
    ordered
        .into_iter()
        .map(|g| model.embed(g).map(|e| (g.id, e)))
        .collect()
}

/// Renders embedding rows as headerless CSV: graph id, then the embedding
/// coordinates at 17 significant digits.
pub fn embeddings_csv(rows: &[(u32, Vec<f64>)]) -> String {
    let mut out = String::new();
    for (id, emb) in rows {
        out.push_str(&id.to_string());
        for &x in emb {
            out.push(',');
            push_float(&mut out, x);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ged::{ground_truth_table, GedAlgo};
    use crate::graph::{apply_permutation, random_graph, LabelVocabulary, Permutation};
    use crate::model::ModelConfig;
    use crate::train::split_dataset;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_matches_hand_values() {
        assert_eq!(mse_metric(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(mse_metric(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(mse_metric(&[], &[]), Err(MetricError::Empty)));
        assert!(matches!(
            mse_metric(&[1.0], &[1.0, 2.0]),
            Err(MetricError::LengthMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn mse_matches_two_pass_recomputation_on_random_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..1000 {
            let n = rng.random_range(1..=30);
            let preds: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let targets: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut diffs = Vec::with_capacity(n);
            for i in 0..n {
                diffs.push(preds[i] - targets[i]);
            }
            let reference = diffs.iter().map(|d| d * d).sum::<f64>() / n as f64;
            assert_eq!(mse_metric(&preds, &targets).unwrap(), reference);
        }
    }

    #[test]
    fn spearman_hits_the_endpoints() {
        let preds = [0.1, 0.4, 0.2, 0.9];
        let fwd = spearman_rho(&preds, &preds).unwrap();
        assert_eq!(fwd.value, 1.0);
        assert!(!fwd.degenerate);
        let reversed: Vec<f64> = preds.iter().map(|x| -x).collect();
        assert_eq!(spearman_rho(&preds, &reversed).unwrap().value, -1.0);
    }

    #[test]
    fn spearman_flags_zero_variance() {
        let r = spearman_rho(&[0.5, 0.5, 0.5], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.degenerate);
        assert!(matches!(
            spearman_rho(&[1.0], &[1.0]),
            Err(MetricError::TooShort { len: 1, need: 2 })
        ));
    }

    fn reference_spearman(preds: &[f64], targets: &[f64]) -> Option<f64> {
        fn ranks(values: &[f64]) -> Vec<f64> {
            values
                .iter()
                .map(|&v| {
                    let below = values.iter().filter(|&&w| w < v).count() as f64;
                    let tied = values.iter().filter(|&&w| w == v).count() as f64;
                    below + (tied + 1.0) / 2.0
                })
                .collect()
        }
        let rp = ranks(preds);
        let rt = ranks(targets);
        let n = rp.len() as f64;
        let mp = rp.iter().sum::<f64>() / n;
        let mt = rt.iter().sum::<f64>() / n;
        let cov: f64 = rp.iter().zip(&rt).map(|(a, b)| (a - mp) * (b - mt)).sum();
        let vp: f64 = rp.iter().map(|a| (a - mp) * (a - mp)).sum();
        let vt: f64 = rt.iter().map(|b| (b - mt) * (b - mt)).sum();
        if vp == 0.0 || vt == 0.0 {
            return None;
        }
        Some(cov / (vp * vt).sqrt())
    }

    fn tie_rich_vector<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
        let levels = rng.random_range(2..=n.max(2));
        (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect()
    }

    #[test]
    fn spearman_matches_reference_on_random_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for case in 0..1000 {
            let n = rng.random_range(2..=25);
            let (preds, targets) = if case % 2 == 0 {
                (
                    (0..n).map(|_| rng.random::<f64>()).collect::<Vec<_>>(),
                    (0..n).map(|_| rng.random::<f64>()).collect::<Vec<_>>(),
                )
            } else {
                (tie_rich_vector(n, &mut rng), tie_rich_vector(n, &mut rng))
            };
            let got = spearman_rho(&preds, &targets).unwrap();
            match reference_spearman(&preds, &targets) {
                Some(expected) => {
                    assert!(!got.degenerate, "case {case}");
                    assert!((got.value - expected).abs() < 1e-12, "case {case}");
                }
                None => assert!(got.degenerate, "case {case}"),
            }
        }
    }

    #[test]
    fn kendall_matches_hand_values() {
        let base = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&base, &base).unwrap().value, 1.0);
        let swapped = [1.0, 3.0, 2.0, 4.0];
        let r = kendall_tau(&swapped, &base).unwrap();
        assert!((r.value - 2.0 / 3.0).abs() < 1e-15);
        let tied = kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(tied.value, 0.0);
        assert!(tied.degenerate);
    }

    fn reference_tau_b(preds: &[f64], targets: &[f64]) -> Option<f64> {
        fn sign(d: f64) -> i32 {
            if d > 0.0 {
                1
            } else if d < 0.0 {
                -1
            } else {
                0
            }
        }
        let n = preds.len();
        let mut c = 0.0_f64;
        let mut d = 0.0_f64;
        let mut pairs_p = 0.0_f64;
        let mut pairs_t = 0.0_f64;
        for i in 0..n {
            for j in i + 1..n {
                let sp = sign(preds[i] - preds[j]);
                let st = sign(targets[i] - targets[j]);
                if sp != 0 {
                    pairs_p += 1.0;
                }
                if st != 0 {
                    pairs_t += 1.0;
                }
                if sp * st > 0 {
                    c += 1.0;
                }
                if sp * st < 0 {
                    d += 1.0;
                }
            }
        }
        if pairs_p == 0.0 || pairs_t == 0.0 {
            return None;
        }
        Some((c - d) / (pairs_p * pairs_t).sqrt())
    }

    #[test]
    fn kendall_matches_reference_on_random_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        for case in 0..1000 {
            let n = rng.random_range(2..=25);
            let (preds, targets) = if case % 2 == 0 {
                (
                    (0..n).map(|_| rng.random::<f64>()).collect::<Vec<_>>(),
                    (0..n).map(|_| rng.random::<f64>()).collect::<Vec<_>>(),
                )
            } else {
                (tie_rich_vector(n, &mut rng), tie_rich_vector(n, &mut rng))
            };
            let got = kendall_tau(&preds, &targets).unwrap();
            match reference_tau_b(&preds, &targets) {
                Some(expected) => {
                    assert!(!got.degenerate, "case {case}");
                    assert!((got.value - expected).abs() < 1e-12, "case {case}");
                }
                None => assert!(got.degenerate, "case {case}"),
            }
        }
    }

    #[test]
    fn precision_matches_hand_values() {
        let v = [0.9, 0.8, 0.7, 0.6];
        assert_eq!(precision_at_k(&v, &v, 2).unwrap(), 1.0);
        let opposite = [0.6, 0.7, 0.8, 0.9];
        assert_eq!(precision_at_k(&v, &opposite, 2).unwrap(), 0.0);
        assert!(matches!(
            precision_at_k(&v, &v, 0),
            Err(MetricError::BadK { k: 0, n: 4 })
        ));
        assert!(matches!(
            precision_at_k(&v, &v, 5),
            Err(MetricError::BadK { k: 5, n: 4 })
        ));
    }

    #[test]
    fn precision_tie_rule_is_id_order_on_both_sides() {
        let targets = [0.9, 0.5, 0.5, 0.5, 0.5, 0.1];
        let preds = [0.2, 0.3, 0.5, 0.5, 0.1, 0.9];
        let top_true = [0usize, 1, 2];
        let top_pred = [5usize, 2, 3];
        let expected = top_pred
            .iter()
            .filter(|i| top_true.contains(i))
            .count() as f64
            / 3.0;
        assert_eq!(precision_at_k(&preds, &targets, 3).unwrap(), expected);
        assert_eq!(expected, 1.0 / 3.0);

        let all_tied = [0.5; 6];
        assert_eq!(precision_at_k(&all_tied, &all_tied, 4).unwrap(), 1.0);
        let shifted = [0.1, 0.2, 0.5, 0.5, 0.5, 0.5];
        assert_eq!(precision_at_k(&shifted, &all_tied, 4).unwrap(), 0.5);
    }

    fn reference_precision(preds: &[f64], targets: &[f64], k: usize) -> f64 {
        fn pick(values: &[f64], k: usize) -> Vec<usize> {
            let mut pool: Vec<usize> = (0..values.len()).collect();
            let mut out = Vec::new();
            for _ in 0..k {
                let best = pool
                    .iter()
                    .copied()
                    .max_by(|&a, &b| values[a].total_cmp(&values[b]).then(b.cmp(&a)))
                    .unwrap();
                pool.retain(|&x| x != best);
                out.push(best);
            }
            out
        }
        let a = pick(preds, k);
        let b = pick(targets, k);
        a.iter().filter(|x| b.contains(x)).count() as f64 / k as f64
    }

    #[test]
    fn precision_matches_reference_on_random_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        for case in 0..1000 {
            let n = rng.random_range(1..=20);
            let k = rng.random_range(1..=n);
            let preds = tie_rich_vector(n, &mut rng);
            let targets = tie_rich_vector(n, &mut rng);
            assert_eq!(
                precision_at_k(&preds, &targets, k).unwrap(),
                reference_precision(&preds, &targets, k),
                "case {case}"
            );
        }
    }

    fn eval_fixture(n: usize) -> (Vec<Graph>, GroundTruthTable, Split, Model) {
        let vocab = LabelVocabulary::labeled(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let graphs: Vec<Graph> = (0..n)
            .map(|i| {
                let mut g = random_graph(3, 5, 0.4, &vocab, 900 + i as u64).unwrap();
                g.id = i as u32;
                g
            })
            .collect();
        let gt = ground_truth_table(&graphs, GedAlgo::Brute).unwrap();
        let split = split_dataset(&graphs, 17).unwrap();
        let config = ModelConfig {
            l: 1,
            layer_dims: vec![4],
            d_prime: 2,
            t: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(config, vocab, 5).unwrap();
        (graphs, gt, split, model)
    }

    #[test]
    fn evaluate_covers_database_and_never_touches_alignment() {
        let (graphs, gt, split, model) = eval_fixture(27);
        let report = evaluate(&model, &graphs, &split, &gt).unwrap();

        let db = split.database_ids();
        assert_eq!(report.queries.len(), split.query_ids.len());
        for q in &report.queries {
            assert!(split.query_ids.contains(&q.query));
            let mut ids: Vec<u32> = q.entries.iter().map(|e| e.id).collect();
            for w in q.entries.windows(2) {
                assert!(
                    w[0].predicted > w[1].predicted
                        || (w[0].predicted == w[1].predicted && w[0].id < w[1].id)
                );
            }
            ids.sort_unstable();
            assert_eq!(ids, db);
        }
        assert!(report.mse >= 0.0 && report.mse.is_finite());
        assert!(report.rho.abs() <= 1.0 + 1e-12);
        assert!(report.tau.abs() <= 1.0 + 1e-12);
        assert!((0.0..=1.0).contains(&report.p_at_10));
        assert!((0.0..=1.0).contains(&report.p_at_20));
        assert!(report.inference_seconds > 0.0);

        let stats = model.stats();
        assert_eq!(stats.alignment_calls, 0);
        assert_eq!(stats.cross_graph_evals, 0);
    }

    #[test]
    fn report_json_holds_exactly_the_five_aggregates_and_queries() {
        let (graphs, gt, split, model) = eval_fixture(26);
        let report = evaluate(&model, &graphs, &split, &gt).unwrap();
        let value = serde_json::to_value(&report).unwrap();
        let obj = value.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(|s| s.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            vec!["mse", "p_at_10", "p_at_20", "queries", "rho", "tau"]
        );
    }

    #[test]
    fn evaluate_rejects_undersized_databases_and_bad_splits() {
        let (graphs, gt, _, model) = eval_fixture(24);
        let tiny = Split {
            train_ids: (0..15).collect(),
            val_ids: vec![15, 16],
            query_ids: (17..24).collect(),
        };
        assert!(matches!(
            evaluate(&model, &graphs, &tiny, &gt),
            Err(EvalError::DatabaseTooSmall { got: 17, need: 20 })
        ));

        let (graphs, gt, split, model) = eval_fixture(26);
        let mut broken = split.clone();
        broken.query_ids.push(99);
        assert!(matches!(
            evaluate(&model, &graphs, &broken, &gt),
            Err(EvalError::Split(TrainError::UnknownGraphId(99)))
        ));
    }

    #[test]
    fn oracle_predictor_scores_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let mut scored = Vec::new();
        for q in 0..3u32 {
            let db_ids: Vec<u32> = (0..25).collect();
            let mut actuals: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
            actuals.dedup();
            scored.push(ScoredQuery {
                query: q,
                db_ids,
                preds: actuals.clone(),
                actuals,
            });
        }
        let report = assemble_report(&scored).unwrap();
        assert_eq!(report.mse, 0.0);
        assert_eq!(report.rho, 1.0);
        assert_eq!(report.tau, 1.0);
        assert_eq!(report.p_at_10, 1.0);
        assert_eq!(report.p_at_20, 1.0);
        assert_eq!(report.degenerate_queries, 0);
    }

    #[test]
    fn constant_predictor_degenerates_with_id_order_ties() {
        let db_ids: Vec<u32> = (0..25).collect();
        let actuals: Vec<f64> = (0..25).map(|i| 1.0 - i as f64 / 25.0).collect();
        let scored = vec![ScoredQuery {
            query: 0,
            db_ids,
            preds: vec![0.5; 25],
            actuals,
        }];
        let report = assemble_report(&scored).unwrap();
        assert_eq!(report.rho, 0.0);
        assert_eq!(report.tau, 0.0);
        assert_eq!(report.degenerate_queries, 1);
        assert_eq!(report.p_at_10, 1.0);
        assert_eq!(report.p_at_20, 1.0);
    }

    #[test]
    fn query_topk_matches_the_evaluation_ranking_prefix() {
        let (graphs, gt, split, model) = eval_fixture(26);
        let report = evaluate(&model, &graphs, &split, &gt).unwrap();
        for ranking in &report.queries {
            let top = query_topk(&model, &graphs, &split, ranking.query, 5).unwrap();
            assert_eq!(top.len(), 5);
            for (got, want) in top.iter().zip(&ranking.entries) {
                assert_eq!(got.0, want.id);
                assert_eq!(got.1.to_bits(), want.predicted.to_bits());
            }
        }

        let oversized = query_topk(&model, &graphs, &split, split.query_ids[0], 1000).unwrap();
        assert_eq!(oversized.len(), split.database_ids().len());
        assert!(matches!(
            query_topk(&model, &graphs, &split, split.query_ids[0], 0),
            Err(EvalError::Metric(MetricError::BadK { k: 0, .. }))
        ));
        assert!(matches!(
            query_topk(&model, &graphs, &split, 999, 3),
            Err(EvalError::UnknownGraphId(999))
        ));
    }

    #[test]
    fn heatmap_is_cosine_valued_with_unit_self_diagonal() {
        let (graphs, _, _, model) = eval_fixture(24);
        let g = &graphs[0];
        let matrix = export_heatmap(&model, g, g).unwrap();
        assert_eq!(matrix.len(), g.n());
        for (k, row) in matrix.iter().enumerate() {
            assert_eq!(row.len(), g.n());
            assert!((row[k] - 1.0).abs() < 1e-12);
            for &x in row {
                assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&x));
            }
        }
    }

    #[test]
    fn heatmap_rows_peak_at_isomorphic_partners() {
        let (graphs, _, _, model) = eval_fixture(24);
        let g = &graphs[1];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let perm = Permutation::random(g.n(), &mut rng);
        let mut h = apply_permutation(g, &perm).unwrap();
        h.id = 1000;
        let matrix = export_heatmap(&model, g, &h).unwrap();
        for (k, row) in matrix.iter().enumerate() {
            let partner = perm.apply(k);
            assert!((row[partner] - 1.0).abs() < 1e-9, "node {k}");
            for &x in row {
                assert!(x <= row[partner] + 1e-9);
            }
        }
    }

    #[test]
    fn heatmap_csv_is_headerless_scientific_notation() {
        let csv = heatmap_csv(&[vec![1.0, -0.5], vec![0.25, 0.0]]);
        let expected = format!(
            "{:.16e},{:.16e}\n{:.16e},{:.16e}\n",
            1.0, -0.5, 0.25, 0.0
        );
        assert_eq!(csv, expected);
    }

    #[test]
    fn embedding_export_is_deterministic_and_invariant() {
        let (graphs, _, _, model) = eval_fixture(24);
        let rows = export_embeddings(&model, &graphs).unwrap();
        assert_eq!(rows.len(), graphs.len());
        let d_ms = model.config().embedding_dim();
        for w in rows.windows(2) {
            assert!(w[0].0 < w[1].0);
        }
        for (_, emb) in &rows {
            assert_eq!(emb.len(), d_ms);
        }

        let again = export_embeddings(&model, &graphs).unwrap();
        assert_eq!(embeddings_csv(&rows), embeddings_csv(&again));

        let g = &graphs[2];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let perm = Permutation::random(g.n(), &mut rng);
        let mut h = apply_permutation(g, &perm).unwrap();
        h.id = 2000;
        let iso_rows = export_embeddings(&model, &[g.clone(), h]).unwrap();
        for (a, b) in iso_rows[0].1.iter().zip(&iso_rows[1].1) {
            assert!((a - b).abs() < 1e-9);
        }

        let line = embeddings_csv(&rows[..1]);
        assert!(line.starts_with(&format!("{},", rows[0].0)));
        assert_eq!(line.matches(',').count(), d_ms);
    }
}
