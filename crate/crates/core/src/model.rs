//! Graph similarity scoring model.
//!
//! The model encodes each graph with a stack of GIN layers, summarizes every
//! layer into a graph-level vector, and concatenates those summaries into a
//! multi-scale embedding. Two discriminator heads score a pair of embeddings
//! (a tensor-product head and a Minkowski-distance head) and a learned
//! two-weight combiner mixes their outputs. An alignment regularizer
//! penalizes node embeddings whose similarity to their own graph summary
//! differs from their similarity to the other graph's summary.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape, TensorData, TensorError, TensorId};
use crate::graph::{featurize, Graph, GraphError, LabelVocabulary};

/// Hidden width of both discriminator heads.
pub const HEAD_HIDDEN: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("encodings disagree on layer count: {left} vs {right}")]
    LayerCountMismatch { left: usize, right: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistFn {
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MinkowskiVariant {
    Elementwise,
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    #[serde(rename = "L")]
    pub l: usize,
    pub layer_dims: Vec<usize>,
    pub d_prime: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub p: f64,
    pub lambda: f64,
    pub dist: DistFn,
    pub use_ntn: bool,
    pub use_minkowski: bool,
    pub use_areg: bool,
    pub minkowski_variant: MinkowskiVariant,
    pub normalize_gamma: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            l: 4,
            layer_dims: vec![64; 4],
            d_prime: 16,
            t: 16,
            p: 2.0,
            lambda: 0.1,
            dist: DistFn::Cosine,
            use_ntn: true,
            use_minkowski: true,
            use_areg: true,
            minkowski_variant: MinkowskiVariant::Elementwise,
            normalize_gamma: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.l == 0 {
            return Err(ModelError::Config("L must be at least 1".into()));
        }
        if self.layer_dims.len() != self.l {
            return Err(ModelError::Config(format!(
                "layer_dims has {} entries for L = {}",
                self.layer_dims.len(),
                self.l
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(ModelError::Config(
                "layer dimensions must be positive".into(),
            ));
        }
        if self.d_prime == 0 {
            return Err(ModelError::Config("d_prime must be positive".into()));
        }
        if self.t == 0 {
            return Err(ModelError::Config("T must be positive".into()));
        }
        if !self.p.is_finite() || self.p < 1.0 {
            return Err(ModelError::Config("p must be a finite value >= 1".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(ModelError::Config(
                "lambda must be finite and non-negative".into(),
            ));
        }
        if !self.use_ntn && !self.use_minkowski {
            return Err(ModelError::Config(
                "at least one of use_ntn and use_minkowski must be enabled".into(),
            ));
        }
        Ok(())
    }

    /// Width of the multi-scale embedding: the sum of all layer widths.
    pub fn embedding_dim(&self) -> usize {
        self.layer_dims.iter().sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct AffineIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayerIdx {
    lin1: AffineIdx,
    lin2: AffineIdx,
    xi: usize,
}

#[derive(Debug, Clone, Copy)]
struct HeadIdx {
    lin1: AffineIdx,
    lin2: AffineIdx,
}

#[derive(Debug, Clone, Copy)]
struct NtnIdx {
    w1: usize,
    w2: usize,
    w3: usize,
    b: usize,
    head: HeadIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<EncoderLayerIdx>,
    readout: Vec<AffineIdx>,
    ntn: Option<NtnIdx>,
    minkowski: Option<HeadIdx>,
    alpha: usize,
    beta: usize,
}

enum InitKind {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Const(f64),
}

type MakeFn<'a> = dyn FnMut(&str, &[usize], InitKind) -> Result<TensorData, ModelError> + 'a;

fn push_param(
    make: &mut MakeFn,
    store: &mut ParamStore,
    name: String,
    shape: Vec<usize>,
    kind: InitKind,
) -> Result<usize, ModelError> {
    let value = make(&name, &shape, kind)?;
    Ok(store.insert(&name, value)?)
}

fn push_affine(
    make: &mut MakeFn,
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
) -> Result<AffineIdx, ModelError> {
    Ok(AffineIdx {
        w: push_param(
            make,
            store,
            format!("{prefix}.weight"),
            vec![in_dim, out_dim],
            InitKind::Glorot {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        )?,
        b: push_param(
            make,
            store,
            format!("{prefix}.bias"),
            vec![out_dim],
            InitKind::Zeros,
        )?,
    })
}

fn push_head(
    make: &mut MakeFn,
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
) -> Result<HeadIdx, ModelError> {
    Ok(HeadIdx {
        lin1: push_affine(make, store, &format!("{prefix}.lin1"), in_dim, HEAD_HIDDEN)?,
        lin2: push_affine(make, store, &format!("{prefix}.lin2"), HEAD_HIDDEN, 1)?,
    })
}

/// Walks the parameter list in its canonical order, asking `make` to produce
/// each tensor. Used both for fresh initialization and for rebuilding a model
/// from stored parameters.
fn build_params(
    config: &ModelConfig,
    input_dim: usize,
    make: &mut MakeFn,
) -> Result<(ParamStore, Layout), ModelError> {
    let mut store = ParamStore::new();

    let mut encoder = Vec::with_capacity(config.l);
    let mut d_prev = input_dim;
    for (l, &d) in config.layer_dims.iter().enumerate() {
        let lin1 = push_affine(make, &mut store, &format!("encoder.{l}.lin1"), d_prev, d)?;
        let lin2 = push_affine(make, &mut store, &format!("encoder.{l}.lin2"), d, d)?;
        let xi = push_param(
            make,
            &mut store,
            format!("encoder.{l}.xi"),
            vec![1],
            InitKind::Zeros,
        )?;
        encoder.push(EncoderLayerIdx { lin1, lin2, xi });
        d_prev = d;
    }

    let mut readout = Vec::with_capacity(config.l);
    for (l, &d) in config.layer_dims.iter().enumerate() {
        readout.push(push_affine(make, &mut store, &format!("readout.{l}"), d, d)?);
    }

    let d_ms = config.embedding_dim();
    let ntn = if config.use_ntn {
        let w1 = push_param(
            make,
            &mut store,
            "ntn.w1".into(),
            vec![d_ms, config.d_prime * config.t],
            InitKind::Glorot {
                fan_in: d_ms,
                fan_out: config.d_prime,
            },
        )?;
        let w2 = push_param(
            make,
            &mut store,
            "ntn.w2".into(),
            vec![d_ms, config.d_prime * config.t],
            InitKind::Glorot {
                fan_in: d_ms,
                fan_out: config.d_prime,
            },
        )?;
        let w3 = push_param(
            make,
            &mut store,
            "ntn.w3".into(),
            vec![2 * d_ms, config.t],
            InitKind::Glorot {
                fan_in: 2 * d_ms,
                fan_out: config.t,
            },
        )?;
        let b = push_param(
            make,
            &mut store,
            "ntn.b".into(),
            vec![config.t],
            InitKind::Zeros,
        )?;
        let head = push_head(make, &mut store, "ntn.head", config.t)?;
        Some(NtnIdx {
            w1,
            w2,
            w3,
            b,
            head,
        })
    } else {
        None
    };

    let minkowski = if config.use_minkowski {
        let in_dim = match config.minkowski_variant {
            MinkowskiVariant::Elementwise => d_ms,
            MinkowskiVariant::Scalar => 1,
        };
        Some(push_head(make, &mut store, "minkowski.head", in_dim)?)
    } else {
        None
    };

    let alpha = push_param(
        make,
        &mut store,
        "combiner.alpha".into(),
        vec![1],
        InitKind::Const(0.5),
    )?;
    let beta = push_param(
        make,
        &mut store,
        "combiner.beta".into(),
        vec![1],
        InitKind::Const(0.5),
    )?;

    Ok((
        store,
        Layout {
            encoder,
            readout,
            ntn,
            minkowski,
            alpha,
            beta,
        },
    ))
}

/// One graph's forward pass on a tape: per-layer node embeddings, per-layer
/// graph summaries, and the concatenated multi-scale embedding.
pub struct Encoding {
    pub h: Vec<TensorId>,
    pub z: Vec<TensorId>,
    pub z_hat: TensorId,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatsSnapshot {
    /// Number of alignment-loss evaluations.
    pub alignment_calls: u64,
    /// Number of cross-graph node-to-summary similarity evaluations.
    pub cross_graph_evals: u64,
}

#[derive(Default)]
struct Stats {
    alignment_calls: AtomicU64,
    cross_graph_evals: AtomicU64,
}

pub struct Model {
    config: ModelConfig,
    vocab: LabelVocabulary,
    params: ParamStore,
    layout: Layout,
    stats: Stats,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        vocab: LabelVocabulary,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build_params(&config, vocab.size(), &mut |_, shape, kind| {
            let numel: usize = shape.iter().product();
            let data = match kind {
                InitKind::Glorot { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..numel)
                        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                        .collect()
                }
                InitKind::Zeros => vec![0.0; numel],
                InitKind::Const(c) => vec![c; numel],
            };
            Ok(TensorData::new(shape.to_vec(), data)?)
        })?;
        Ok(Model {
            config,
            vocab,
            params,
            layout,
            stats: Stats::default(),
        })
    }

    /// Rebuilds a model from stored parameters, checking that they carry
    /// exactly the expected names and shapes.
    pub fn from_parts(
        config: ModelConfig,
        vocab: LabelVocabulary,
        source: ParamStore,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let (params, layout) = build_params(&config, vocab.size(), &mut |name, shape, _| {
            let value = source
                .get(name)
                .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            if value.shape != shape {
                return Err(ModelError::ParamShape {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    got: value.shape.clone(),
                });
            }
            Ok(value.clone())
        })?;
        if source.len() != params.len() {
            for (name, _) in source.iter() {
                if params.index_of(name).is_none() {
                    return Err(ModelError::UnexpectedParam(name.to_string()));
                }
            }
        }
        Ok(Model {
            config,
            vocab,
            params,
            layout,
            stats: Stats::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &LabelVocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Registers every parameter on a tape, in store order.
    pub fn bind(&self, tape: &Tape) -> Vec<TensorId> {
        self.params.bind(tape)
    }

    pub fn stats(&self) -> StatsSnapshot {
        StatsSnapshot {
            alignment_calls: self.stats.alignment_calls.load(Ordering::Relaxed),
            cross_graph_evals: self.stats.cross_graph_evals.load(Ordering::Relaxed),
        }
    }

    pub fn reset_stats(&self) {
        self.stats.alignment_calls.store(0, Ordering::Relaxed);
        self.stats.cross_graph_evals.store(0, Ordering::Relaxed);
    }

    /// Runs the encoder on a tape. `ids` must come from [`Model::bind`] on
    /// the same tape.
    pub fn encode_on(
        &self,
        tape: &Tape,
        ids: &[TensorId],
        g: &Graph,
    ) -> Result<Encoding, ModelError> {
        let features = featurize(g, &self.vocab)?;
        let mut h_prev = tape.leaf(TensorData::matrix(
            features.n,
            features.d,
            features.values,
        )?);
        let one = tape.scalar(1.0);
        let mut h_layers = Vec::with_capacity(self.config.l);
        let mut z_layers = Vec::with_capacity(self.config.l);
        for (enc, rd) in self.layout.encoder.iter().zip(&self.layout.readout) {
            let one_plus_xi = tape.add(one, ids[enc.xi])?;
            let h = gin_layer(
                tape,
                h_prev,
                g.edges(),
                ids[enc.lin1.w],
                ids[enc.lin1.b],
                ids[enc.lin2.w],
                ids[enc.lin2.b],
                one_plus_xi,
            )?;
            let pooled = tape.sum_rows(h)?;
            let z = tape.relu(tape.add(tape.matmul(pooled, ids[rd.w])?, ids[rd.b])?)?;
            h_layers.push(h);
            z_layers.push(z);
            h_prev = h;
        }
        let z_hat = tape.concat(&z_layers)?;
        Ok(Encoding {
            h: h_layers,
            z: z_layers,
            z_hat,
            n: g.n(),
        })
    }

    /// Alignment regularizer between two encodings on the same tape.
    pub fn alignment_loss_on(
        &self,
        tape: &Tape,
        a: &Encoding,
        b: &Encoding,
    ) -> Result<TensorId, ModelError> {
        if a.h.len() != b.h.len() {
            return Err(ModelError::LayerCountMismatch {
                left: a.h.len(),
                right: b.h.len(),
            });
        }
        let layers = a.h.len();
        self.stats.alignment_calls.fetch_add(1, Ordering::Relaxed);
        self.stats
            .cross_graph_evals
            .fetch_add((layers * (a.n + b.n)) as u64, Ordering::Relaxed);

        let mut acc: Option<TensorId> = None;
        for l in 0..layers {
            let gi = self.gamma_on(tape, a.h[l], a.z[l], b.z[l], a.n)?;
            let gj = self.gamma_on(tape, b.h[l], b.z[l], a.z[l], b.n)?;
            let sum = tape.add(gi, gj)?;
            let gap = tape.abs(tape.sub(gi, gj)?)?;
            let term = tape.add(sum, gap)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        let total = acc.expect("validated: at least one layer");
        Ok(tape.scale_const(total, 1.0 / layers as f64)?)
    }

    /// Total shift in node-to-summary similarity when swapping a graph's own
    /// summary for the other graph's: `sum_v |cos(h_v, z_own) - cos(h_v, z_other)|`.
    fn gamma_on(
        &self,
        tape: &Tape,
        h: TensorId,
        z_own: TensorId,
        z_other: TensorId,
        n: usize,
    ) -> Result<TensorId, ModelError> {
        let own = tape.row_cosine(h, z_own)?;
        let other = tape.row_cosine(h, z_other)?;
        let gamma = tape.sum_all(tape.abs(tape.sub(own, other)?)?)?;
        if self.config.normalize_gamma {
            Ok(tape.scale_const(gamma, 1.0 / n as f64)?)
        } else {
            Ok(gamma)
        }
    }

    /// Tensor-product discriminator on two multi-scale embeddings, `-> [1]`.
    pub fn ntn_score_on(
        &self,
        tape: &Tape,
        ids: &[TensorId],
        zi: TensorId,
        zj: TensorId,
    ) -> Result<TensorId, ModelError> {
        let ntn = self
            .layout
            .ntn
            .as_ref()
            .ok_or_else(|| ModelError::Config("use_ntn is disabled".into()))?;
        let a = tape.matmul(zi, ids[ntn.w1])?;
        let b = tape.matmul(zj, ids[ntn.w2])?;
        let prod = tape.mul(a, b)?;
        let blocks = tape.reshape(prod, vec![self.config.t, self.config.d_prime])?;
        let bilinear = tape.sum_cols(blocks)?;
        let cat = tape.concat(&[zi, zj])?;
        let lin = tape.matmul(cat, ids[ntn.w3])?;
        let pre = tape.add(tape.add(bilinear, lin)?, ids[ntn.b])?;
        Ok(self.head_on(tape, ids, pre, &ntn.head)?)
    }

    /// Minkowski-distance discriminator on two multi-scale embeddings, `-> [1]`.
    pub fn minkowski_score_on(
        &self,
        tape: &Tape,
        ids: &[TensorId],
        zi: TensorId,
        zj: TensorId,
    ) -> Result<TensorId, ModelError> {
        let head = self
            .layout
            .minkowski
            .as_ref()
            .ok_or_else(|| ModelError::Config("use_minkowski is disabled".into()))?;
        let diff = tape.sub(zi, zj)?;
        let feat = match self.config.minkowski_variant {
            MinkowskiVariant::Elementwise => {
                let powed = tape.pow(tape.abs(diff)?, self.config.p)?;
                tape.exp(tape.scale_const(powed, -1.0)?)?
            }
            MinkowskiVariant::Scalar => {
                let norm = tape.pnorm(diff, self.config.p)?;
                tape.exp(tape.scale_const(norm, -1.0)?)?
            }
        };
        Ok(self.head_on(tape, ids, feat, head)?)
    }

    fn head_on(
        &self,
        tape: &Tape,
        ids: &[TensorId],
        x: TensorId,
        head: &HeadIdx,
    ) -> Result<TensorId, TensorError> {
        let hidden = tape.relu(tape.add(tape.matmul(x, ids[head.lin1.w])?, ids[head.lin1.b])?)?;
        let out = tape.add(tape.matmul(hidden, ids[head.lin2.w])?, ids[head.lin2.b])?;
        tape.sigmoid(out)
    }

    /// Scores a pair of multi-scale embeddings with every enabled
    /// discriminator and mixes the results.
    pub fn combined_score_on(
        &self,
        tape: &Tape,
        ids: &[TensorId],
        zi: TensorId,
        zj: TensorId,
    ) -> Result<TensorId, ModelError> {
        let s_ntn = if self.config.use_ntn {
            Some(self.ntn_score_on(tape, ids, zi, zj)?)
        } else {
            None
        };
        let s_p = if self.config.use_minkowski {
            Some(self.minkowski_score_on(tape, ids, zi, zj)?)
        } else {
            None
        };
        combine_scores(
            tape,
            s_ntn,
            s_p,
            ids[self.layout.alpha],
            ids[self.layout.beta],
        )
    }

    /// Full training loss for one pair on a tape: squared prediction error
    /// plus `lambda` times the alignment regularizer when enabled.
    pub fn pair_loss_on(
        &self,
        tape: &Tape,
        ids: &[TensorId],
        gi: &Graph,
        gj: &Graph,
        target: f64,
    ) -> Result<TensorId, ModelError> {
        let ei = self.encode_on(tape, ids, gi)?;
        let ej = self.encode_on(tape, ids, gj)?;
        self.pair_loss_from_encodings(tape, ids, &ei, &ej, target)
    }

    /// Same as [`Model::pair_loss_on`] but reuses already-built encodings.
    pub fn pair_loss_from_encodings(
        &self,
        tape: &Tape,
        ids: &[TensorId],
        ei: &Encoding,
        ej: &Encoding,
        target: f64,
    ) -> Result<TensorId, ModelError> {
        let pred = self.combined_score_on(tape, ids, ei.z_hat, ej.z_hat)?;
        let areg = if self.config.use_areg && self.config.lambda > 0.0 {
            Some(self.alignment_loss_on(tape, ei, ej)?)
        } else {
            None
        };
        Ok(pair_loss(tape, pred, target, areg, self.config.lambda)?)
    }

    /// Predicted similarity for a pair of graphs, in a fresh scratch tape.
    pub fn predict(&self, gi: &Graph, gj: &Graph) -> Result<f64, ModelError> {
        let tape = Tape::new();
        let ids = self.bind(&tape);
        let ei = self.encode_on(&tape, &ids, gi)?;
        let ej = self.encode_on(&tape, &ids, gj)?;
        let s = self.combined_score_on(&tape, &ids, ei.z_hat, ej.z_hat)?;
        Ok(tape.scalar_value(s))
    }

    /// Multi-scale embedding of a single graph.
    pub fn embed(&self, g: &Graph) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        let ids = self.bind(&tape);
        let enc = self.encode_on(&tape, &ids, g)?;
        Ok(tape.value(enc.z_hat).data)
    }

    /// Final-layer node embeddings of a single graph, one row per node.
    pub fn node_embeddings(&self, g: &Graph) -> Result<TensorData, ModelError> {
        let tape = Tape::new();
        let ids = self.bind(&tape);
        let enc = self.encode_on(&tape, &ids, g)?;
        Ok(tape.value(*enc.h.last().expect("validated: at least one layer")))
    }

    /// Scores many precomputed embedding pairs on one scratch tape,
    /// truncating back after each pair.
    pub fn score_embedded_batch(
        &self,
        pairs: &[(&[f64], &[f64])],
    ) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        let ids = self.bind(&tape);
        let mark = tape.len();
        let mut out = Vec::with_capacity(pairs.len());
        for (zi, zj) in pairs {
            let a = tape.leaf(TensorData::vector(zi.to_vec()));
            let b = tape.leaf(TensorData::vector(zj.to_vec()));
            let s = self.combined_score_on(&tape, &ids, a, b)?;
            out.push(tape.scalar_value(s));
            tape.truncate(mark);
        }
        Ok(out)
    }
}

/// One message-passing layer: scale each node by `1 + xi`, add the neighbor
/// sum, then apply a two-affine MLP with a ReLU between the affines only.
#[allow(clippy::too_many_arguments)]
pub fn gin_layer(
    tape: &Tape,
    h_prev: TensorId,
    edges: &[(u32, u32)],
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
    one_plus_xi: TensorId,
) -> Result<TensorId, TensorError> {
    let scaled = tape.scalar_mul(h_prev, one_plus_xi)?;
    let agg = tape.add(scaled, tape.neighbor_sum(h_prev, edges)?)?;
    let hidden = tape.relu(tape.add_row_bias(tape.matmul(agg, w1)?, b1)?)?;
    tape.add_row_bias(tape.matmul(hidden, w2)?, b2)
}

/// Mixes the discriminator scores: `alpha * s_ntn + beta * s_p`, dropping
/// whichever term is absent. Both absent is a configuration error.
pub fn combine_scores(
    tape: &Tape,
    s_ntn: Option<TensorId>,
    s_p: Option<TensorId>,
    alpha: TensorId,
    beta: TensorId,
) -> Result<TensorId, ModelError> {
    match (s_ntn, s_p) {
        (None, None) => Err(ModelError::Config(
            "at least one discriminator score is required".into(),
        )),
        (Some(sn), None) => Ok(tape.scalar_mul(sn, alpha)?),
        (None, Some(sp)) => Ok(tape.scalar_mul(sp, beta)?),
        (Some(sn), Some(sp)) => {
            let left = tape.scalar_mul(sn, alpha)?;
            let right = tape.scalar_mul(sp, beta)?;
            Ok(tape.add(left, right)?)
        }
    }
}

/// Squared prediction error plus `lambda` times the regularizer. A zero
/// `lambda` or an absent regularizer leaves the squared error alone.
pub fn pair_loss(
    tape: &Tape,
    pred: TensorId,
    target: f64,
    areg: Option<TensorId>,
    lambda: f64,
) -> Result<TensorId, TensorError> {
    let t = tape.leaf(TensorData::scalar(target));
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    match areg {
        Some(a) if lambda != 0.0 => tape.add(sq, tape.scale_const(a, lambda)?),
        _ => Ok(sq),
    }
}
