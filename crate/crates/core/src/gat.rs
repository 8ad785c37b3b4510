//! Relation-aware heterogeneous graph attention network.
//!
//! Each stored relation passes messages source → target; relations between
//! two different node types also get a reversed copy so information flows
//! both ways (e.g. label → feature). Every message-passing relation has its
//! own single-head attention layer:
//!
//! ```text
//! e_uv  = LeakyReLU(a_src · W h_u + a_dst · W h_v + b · w_uv)
//! α_uv  = softmax over the in-edges of v within the relation
//! H_v   = Σ_relations Σ_u α_uv W h_u
//! ```
//!
//! Outputs for the same target type are summed and a learned per-type bias is
//! added (the only signal a node without in-edges receives), followed by ELU
//! except after the last layer.
//! Feature scores are a linear readout of the final feature embeddings.
//!
//! Training is self-supervised: a dot-product decoder reconstructs
//! feature-label and label-label edge weights (with sampled non-edges as
//! zeros), and a regression head anchors each feature's score to its
//! rescaled total feature-label and feature-feature affinity. Gradients are
//! computed by hand and checked against central finite differences.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{HeteroGraph, NodeType, RelationKey};

/// `[sum, max, mean, degree]` per relation key.
pub const STATS_PER_RELATION: usize = 4;
pub const INPUT_DIM: usize = STATS_PER_RELATION * RelationKey::ALL.len();

#[derive(Debug, Error)]
pub enum GatError {
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("graph has no feature-label edges to supervise training")]
    NoSupervisionEdges,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gradient check failed: relative error {error:.3e} in {block}")]
    GradCheckFailure { block: String, error: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MpRelation {
    pub key: RelationKey,
    pub reversed: bool,
}

impl MpRelation {
    pub fn source_type(self) -> NodeType {
        if self.reversed {
            self.key.target_type()
        } else {
            self.key.source_type()
        }
    }

    pub fn target_type(self) -> NodeType {
        if self.reversed {
            self.key.source_type()
        } else {
            self.key.target_type()
        }
    }

    pub fn name(self) -> String {
        if self.reversed {
            format!("rev_{}", self.key)
        } else {
            self.key.to_string()
        }
    }
}

/// Forward copies of all keys, then reversed copies of the directed ones.
pub fn message_relations() -> Vec<MpRelation> {
    let mut out: Vec<MpRelation> = RelationKey::ALL
        .iter()
        .map(|&key| MpRelation { key, reversed: false })
        .collect();
    out.extend(
        RelationKey::ALL
            .iter()
            .filter(|k| !k.is_undirected())
            .map(|&key| MpRelation { key, reversed: true }),
    );
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub negatives_per_positive: usize,
    /// Weight of the score-regression term.
    pub lambda: f64,
    pub seed: u64,
    pub leaky_slope: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 2,
            epochs: 200,
            learning_rate: 0.01,
            negatives_per_positive: 1,
            lambda: 1.0,
            seed: 0,
            leaky_slope: 0.2,
            optimizer: Optimizer::Adam,
        }
    }
}

/// Initial node inputs, one matrix per node type (rows = nodes).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatureTable {
    pub tables: [Array2<f64>; 3],
}

impl NodeFeatureTable {
    pub fn get(&self, ty: NodeType) -> &Array2<f64> {
        &self.tables[ty.index()]
    }
}

/// Incident-weight statistics before standardization. A node's block for a
/// relation it sources covers its out-edges; for a relation it only receives,
/// its in-edges. Blocks for relations not touching the type stay zero.
pub fn raw_node_features(graph: &HeteroGraph) -> NodeFeatureTable {
    let mut tables = NodeType::ALL.map(|t| Array2::<f64>::zeros((graph.node_count(t), INPUT_DIM)));
    for (k, &key) in RelationKey::ALL.iter().enumerate() {
        let col = k * STATS_PER_RELATION;
        let mut accumulate = |ty: NodeType, node: usize, w: f64| {
            let mut row = tables[ty.index()].row_mut(node);
            row[col] += w;
            row[col + 1] = row[col + 1].max(w);
            row[col + 3] += 1.0;
        };
        let (src, tgt) = (key.source_type(), key.target_type());
        for e in graph.edges(key) {
            accumulate(src, e.source, e.weight);
            if src != tgt {
                accumulate(tgt, e.target, e.weight);
            }
        }
        for table in tables.iter_mut() {
            for mut row in table.rows_mut() {
                if row[col + 3] > 0.0 {
                    row[col + 2] = row[col] / row[col + 3];
                }
            }
        }
    }
    NodeFeatureTable { tables }
}

/// Raw statistics z-scored per column within each node type.
pub fn init_node_features(graph: &HeteroGraph) -> NodeFeatureTable {
    let mut table = raw_node_features(graph);
    for t in table.tables.iter_mut() {
        let n = t.nrows();
        if n == 0 {
            continue;
        }
        for mut col in t.columns_mut() {
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            col.mapv_inplace(|x| if sd > 1e-12 { (x - mean) / sd } else { 0.0 });
        }
    }
    table
}

/// Offsets of every parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    hidden: usize,
    layers: usize,
    n_rel: usize,
}

impl Layout {
    fn in_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            INPUT_DIM
        } else {
            self.hidden
        }
    }

    fn rel_block(&self, layer: usize) -> usize {
        self.in_dim(layer) * self.hidden + 2 * self.hidden + 1
    }

    fn layer_start(&self, layer: usize) -> usize {
        (0..layer)
            .map(|l| self.n_rel * self.rel_block(l) + 3 * self.hidden)
            .sum()
    }

    fn w(&self, layer: usize, rel: usize) -> std::ops::Range<usize> {
        let s = self.layer_start(layer) + rel * self.rel_block(layer);
        s..s + self.in_dim(layer) * self.hidden
    }

    fn a_src(&self, layer: usize, rel: usize) -> std::ops::Range<usize> {
        let s = self.w(layer, rel).end;
        s..s + self.hidden
    }

    fn a_dst(&self, layer: usize, rel: usize) -> std::ops::Range<usize> {
        let s = self.a_src(layer, rel).end;
        s..s + self.hidden
    }

    fn edge_coef(&self, layer: usize, rel: usize) -> usize {
        self.a_dst(layer, rel).end
    }

    fn bias(&self, layer: usize, ty: NodeType) -> std::ops::Range<usize> {
        let s = self.layer_start(layer) + self.n_rel * self.rel_block(layer) + ty.index() * self.hidden;
        s..s + self.hidden
    }

    fn readout_w(&self) -> std::ops::Range<usize> {
        let s = self.layer_start(self.layers);
        s..s + self.hidden
    }

    fn readout_b(&self) -> usize {
        self.readout_w().end
    }

    fn total(&self) -> usize {
        self.readout_b() + 1
    }

    /// Name of the block containing flat index `i`.
    fn block_name(&self, i: usize, rels: &[MpRelation]) -> String {
        if i >= self.readout_w().start {
            return "readout".into();
        }
        for l in 0..self.layers {
            for (r, rel) in rels.iter().enumerate() {
                let name = rel.name();
                if self.w(l, r).contains(&i) {
                    return format!("layer{l}.{name}.W");
                }
                if self.a_src(l, r).contains(&i) || self.a_dst(l, r).contains(&i) {
                    return format!("layer{l}.{name}.a");
                }
                if self.edge_coef(l, r) == i {
                    return format!("layer{l}.{name}.b");
                }
            }
            for ty in NodeType::ALL {
                if self.bias(l, ty).contains(&i) {
                    return format!("layer{l}.bias.{ty:?}");
                }
            }
        }
        "unknown".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatParameters {
    pub hidden: usize,
    pub layers: usize,
    pub values: Vec<f64>,
}

impl GatParameters {
    /// Glorot-uniform weights and attention vectors, small uniform type
    /// biases, zero edge coefficients and readout bias.
    pub fn init(hidden: usize, layers: usize, seed: u64) -> Self {
        let rels = message_relations();
        let layout = Layout { hidden, layers, n_rel: rels.len() };
        let mut values = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize, values: &mut [f64]| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut values[range] {
                *v = rng.random_range(-limit..limit);
            }
        };
        for l in 0..layers {
            for r in 0..rels.len() {
                fill(layout.w(l, r), layout.in_dim(l), hidden, &mut values);
                fill(layout.a_src(l, r), hidden, 1, &mut values);
                fill(layout.a_dst(l, r), hidden, 1, &mut values);
            }
            for ty in NodeType::ALL {
                // small but non-zero so isolated single nodes are not stuck at a saddle
                fill(layout.bias(l, ty), 100 * hidden, hidden, &mut values);
            }
        }
        fill(layout.readout_w(), hidden, 1, &mut values);
        Self { hidden, layers, values }
    }

    fn layout(&self) -> Layout {
        Layout {
            hidden: self.hidden,
            layers: self.layers,
            n_rel: message_relations().len(),
        }
    }

    fn check(&self) -> Result<(), GatError> {
        let expected = self.layout().total();
        if self.values.len() != expected {
            return Err(GatError::ShapeMismatch(format!(
                "{} parameters, layout expects {expected}",
                self.values.len()
            )));
        }
        Ok(())
    }

    /// Sets every attention vector to zero.
    pub fn zero_attention(&mut self) {
        let layout = self.layout();
        for l in 0..self.layers {
            for r in 0..layout.n_rel {
                self.values[layout.a_src(l, r)].fill(0.0);
                self.values[layout.a_dst(l, r)].fill(0.0);
            }
        }
    }

    fn w(&self, layout: &Layout, l: usize, r: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((layout.in_dim(l), self.hidden), &self.values[layout.w(l, r)])
            .expect("layout shape")
    }

    fn vec(&self, range: std::ops::Range<usize>) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[range])
    }
}

/// One message-passing relation with edges sorted by (target, source).
#[derive(Debug, Clone)]
struct MpEdges {
    rel: MpRelation,
    src: Vec<usize>,
    tgt: Vec<usize>,
    weight: Vec<f64>,
    /// `(target, start, end)` runs over the edge arrays.
    segments: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
struct Prepared {
    counts: [usize; 3],
    rels: Vec<MpEdges>,
}

fn prepare(graph: &HeteroGraph) -> Prepared {
    let counts = NodeType::ALL.map(|t| graph.node_count(t));
    let rels = message_relations()
        .into_iter()
        .map(|rel| {
            let mut edges: Vec<(usize, usize, f64)> = graph
                .edges(rel.key)
                .iter()
                .map(|e| {
                    if rel.reversed {
                        (e.target, e.source, e.weight)
                    } else {
                        (e.source, e.target, e.weight)
                    }
                })
                .filter(|&(s, t, _)| !(rel.source_type() == rel.target_type() && s == t))
                .collect();
            edges.sort_by_key(|a| (a.1, a.0));
            let mut segments = Vec::new();
            let mut start = 0;
            for i in 1..=edges.len() {
                if i == edges.len() || edges[i].1 != edges[start].1 {
                    segments.push((edges[start].1, start, i));
                    start = i;
                }
            }
            MpEdges {
                rel,
                src: edges.iter().map(|e| e.0).collect(),
                tgt: edges.iter().map(|e| e.1).collect(),
                weight: edges.iter().map(|e| e.2).collect(),
                segments,
            }
        })
        .collect();
    Prepared { counts, rels }
}

#[derive(Debug, Clone)]
struct RelCache {
    ps: Array2<f64>,
    pt: Array2<f64>,
    logits: Vec<f64>,
    alpha: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: [Array2<f64>; 3],
    rels: Vec<RelCache>,
    pre: [Array2<f64>; 3],
}

struct Forward {
    layers: Vec<LayerCache>,
    output: [Array2<f64>; 3],
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn forward(params: &GatParameters, prep: &Prepared, x: &NodeFeatureTable, slope: f64) -> Forward {
    let layout = params.layout();
    let h = params.hidden;
    let mut current = x.tables.clone();
    let mut caches = Vec::with_capacity(params.layers);
    for l in 0..params.layers {
        let mut out = prep.counts.map(|n| Array2::<f64>::zeros((n, h)));
        let mut rel_caches = Vec::with_capacity(prep.rels.len());
        for (r, mp) in prep.rels.iter().enumerate() {
            let (s, t) = (mp.rel.source_type().index(), mp.rel.target_type().index());
            let w = params.w(&layout, l, r);
            let ps = current[s].dot(&w);
            let pt = current[t].dot(&w);
            let el = ps.dot(&params.vec(layout.a_src(l, r)));
            let er = pt.dot(&params.vec(layout.a_dst(l, r)));
            let b = params.values[layout.edge_coef(l, r)];
            let logits: Vec<f64> = (0..mp.src.len())
                .map(|e| el[mp.src[e]] + er[mp.tgt[e]] + b * mp.weight[e])
                .collect();
            let mut alpha = vec![0.0; logits.len()];
            for &(v, start, end) in &mp.segments {
                let m = (start..end)
                    .map(|e| leaky(logits[e], slope))
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for e in start..end {
                    alpha[e] = (leaky(logits[e], slope) - m).exp();
                    z += alpha[e];
                }
                let mut row = out[t].row_mut(v);
                for e in start..end {
                    alpha[e] /= z;
                    row.scaled_add(alpha[e], &ps.row(mp.src[e]));
                }
            }
            rel_caches.push(RelCache { ps, pt, logits, alpha });
        }
        for ty in NodeType::ALL {
            out[ty.index()] += &params.vec(layout.bias(l, ty));
        }
        let last = l + 1 == params.layers;
        let next = if last {
            out.clone()
        } else {
            out.clone().map(|m| m.mapv(elu))
        };
        caches.push(LayerCache {
            input: std::mem::replace(&mut current, next),
            rels: rel_caches,
            pre: out,
        });
    }
    Forward { layers: caches, output: current }
}

/// Backpropagates `d_out` (gradient w.r.t. the final per-type outputs).
fn backward(
    params: &GatParameters,
    prep: &Prepared,
    fwd: &Forward,
    mut d_out: [Array2<f64>; 3],
    slope: f64,
    grad: &mut [f64],
) {
    let layout = params.layout();
    for l in (0..params.layers).rev() {
        let cache = &fwd.layers[l];
        let last = l + 1 == params.layers;
        let d_pre: [Array2<f64>; 3] = if last {
            d_out
        } else {
            std::array::from_fn(|t| {
                let mut d = d_out[t].clone();
                d.zip_mut_with(&cache.pre[t], |g, &p| {
                    if p <= 0.0 {
                        *g *= p.exp();
                    }
                });
                d
            })
        };
        for ty in NodeType::ALL {
            let d_bias = d_pre[ty.index()].sum_axis(Axis(0));
            for (g, d) in grad[layout.bias(l, ty)].iter_mut().zip(d_bias.iter()) {
                *g += d;
            }
        }
        let mut d_input = cache.input.clone().map(|m| Array2::<f64>::zeros(m.raw_dim()));
        for (r, mp) in prep.rels.iter().enumerate() {
            if mp.src.is_empty() {
                continue;
            }
            let rc = &cache.rels[r];
            let (s, t) = (mp.rel.source_type().index(), mp.rel.target_type().index());
            let a_src = params.vec(layout.a_src(l, r));
            let a_dst = params.vec(layout.a_dst(l, r));
            let mut d_ps = Array2::<f64>::zeros(rc.ps.raw_dim());
            let mut d_pt = Array2::<f64>::zeros(rc.pt.raw_dim());
            let mut d_a_src = Array1::<f64>::zeros(params.hidden);
            let mut d_a_dst = Array1::<f64>::zeros(params.hidden);
            let mut d_b = 0.0;
            for &(v, start, end) in &mp.segments {
                let g = d_pre[t].row(v);
                let d_alpha: Vec<f64> = (start..end).map(|e| g.dot(&rc.ps.row(mp.src[e]))).collect();
                let mean: f64 = (start..end).map(|e| rc.alpha[e] * d_alpha[e - start]).sum();
                let mut d_er = 0.0;
                for e in start..end {
                    let u = mp.src[e];
                    d_ps.row_mut(u).scaled_add(rc.alpha[e], &g);
                    let d_e = rc.alpha[e] * (d_alpha[e - start] - mean);
                    let d_x = if rc.logits[e] >= 0.0 { d_e } else { d_e * slope };
                    d_ps.row_mut(u).scaled_add(d_x, &a_src);
                    d_a_src.scaled_add(d_x, &rc.ps.row(u));
                    d_er += d_x;
                    d_b += d_x * mp.weight[e];
                }
                d_pt.row_mut(v).scaled_add(d_er, &a_dst);
                d_a_dst.scaled_add(d_er, &rc.pt.row(v));
            }
            let w = params.w(&layout, l, r);
            let d_w = cache.input[s].t().dot(&d_ps) + cache.input[t].t().dot(&d_pt);
            for (g, d) in grad[layout.w(l, r)].iter_mut().zip(d_w.iter()) {
                *g += d;
            }
            for (g, d) in grad[layout.a_src(l, r)].iter_mut().zip(d_a_src.iter()) {
                *g += d;
            }
            for (g, d) in grad[layout.a_dst(l, r)].iter_mut().zip(d_a_dst.iter()) {
                *g += d;
            }
            grad[layout.edge_coef(l, r)] += d_b;
            d_input[s] += &d_ps.dot(&w.t());
            d_input[t] += &d_pt.dot(&w.t());
        }
        d_out = d_input;
    }
}

/// Reconstruction pairs and score targets derived from the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Supervision {
    /// `(type_a, a, type_b, b, target)`
    pub pairs: Vec<(NodeType, usize, NodeType, usize, f64)>,
    /// Per feature, total incident fl/ff weight min-max rescaled to `[0, 1]`.
    pub score_targets: Vec<f64>,
}

pub fn supervision(graph: &HeteroGraph, negatives_per_positive: usize, seed: u64) -> Result<Supervision, GatError> {
    use RelationKey::*;
    let (d, c) = (graph.n_features, graph.n_labels);
    let mut pairs = Vec::new();
    let mut fl_pos = HashSet::new();
    let mut ll_pos = HashSet::new();
    for key in [FlStat, FlSem] {
        for e in graph.edges(key) {
            pairs.push((NodeType::Feature, e.source, NodeType::Label, e.target, e.weight));
            fl_pos.insert((e.source, e.target));
        }
    }
    if pairs.is_empty() {
        return Err(GatError::NoSupervisionEdges);
    }
    let n_fl = pairs.len();
    for key in [LlStat, LlSem] {
        for e in graph.edges(key).iter().filter(|e| e.source < e.target) {
            pairs.push((NodeType::Label, e.source, NodeType::Label, e.target, e.weight));
            ll_pos.insert((e.source, e.target));
        }
    }
    let n_ll = pairs.len() - n_fl;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_eed0_f6e6);
    let mut sample = |count: usize, kind_fl: bool, pairs: &mut Vec<_>| {
        let free = if kind_fl { d * c - fl_pos.len() } else { c * c.saturating_sub(1) / 2 - ll_pos.len() };
        if free == 0 {
            return;
        }
        for _ in 0..count {
            for _attempt in 0..1000 {
                if kind_fl {
                    let (f, l) = (rng.random_range(0..d), rng.random_range(0..c));
                    if !fl_pos.contains(&(f, l)) {
                        pairs.push((NodeType::Feature, f, NodeType::Label, l, 0.0));
                        break;
                    }
                } else {
                    let (i, j) = (rng.random_range(0..c), rng.random_range(0..c));
                    let (i, j) = (i.min(j), i.max(j));
                    if i != j && !ll_pos.contains(&(i, j)) {
                        pairs.push((NodeType::Label, i, NodeType::Label, j, 0.0));
                        break;
                    }
                }
            }
        }
    };
    sample(n_fl * negatives_per_positive, true, &mut pairs);
    if c > 1 {
        sample(n_ll * negatives_per_positive, false, &mut pairs);
    }

    let mut totals = vec![0.0; d];
    for key in [FlStat, FlSem, FfStat] {
        for e in graph.edges(key) {
            totals[e.source] += e.weight;
        }
    }
    let min = totals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let score_targets = totals
        .iter()
        .map(|&t| if max > min { (t - min) / (max - min) } else { 0.0 })
        .collect();
    Ok(Supervision { pairs, score_targets })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Loss components at the current parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub reconstruction: f64,
    pub score: f64,
    pub total: f64,
}

/// The training objective together with everything needed to evaluate it.
pub struct Objective {
    prep: Prepared,
    inputs: NodeFeatureTable,
    sup: Supervision,
    lambda: f64,
    slope: f64,
}

impl Objective {
    pub fn new(graph: &HeteroGraph, config: &TrainConfig) -> Result<Self, GatError> {
        Ok(Self {
            prep: prepare(graph),
            inputs: init_node_features(graph),
            sup: supervision(graph, config.negatives_per_positive, config.seed)?,
            lambda: config.lambda,
            slope: config.leaky_slope,
        })
    }

    pub fn supervision(&self) -> &Supervision {
        &self.sup
    }

    /// Loss and, when `grad` is given, its gradient (accumulated into it).
    pub fn evaluate(&self, params: &GatParameters, grad: Option<&mut [f64]>) -> LossParts {
        let layout = params.layout();
        let fwd = forward(params, &self.prep, &self.inputs, self.slope);
        let z = &fwd.output;
        let mut d_z = z.clone().map(|m| Array2::<f64>::zeros(m.raw_dim()));

        let n_pairs = self.sup.pairs.len() as f64;
        let mut rec = 0.0;
        for &(ta, a, tb, b, target) in &self.sup.pairs {
            let za = z[ta.index()].row(a);
            let zb = z[tb.index()].row(b);
            let s = sigmoid(za.dot(&zb));
            rec += (s - target).powi(2);
            if grad.is_some() {
                let g = 2.0 * (s - target) * s * (1.0 - s) / n_pairs;
                let (za, zb) = (za.to_owned(), zb.to_owned());
                d_z[ta.index()].row_mut(a).scaled_add(g, &zb);
                d_z[tb.index()].row_mut(b).scaled_add(g, &za);
            }
        }
        rec /= n_pairs;

        let zf = &z[NodeType::Feature.index()];
        let rw = params.vec(layout.readout_w());
        let rb = params.values[layout.readout_b()];
        let d = zf.nrows() as f64;
        let mut score = 0.0;
        let mut d_rw = Array1::<f64>::zeros(params.hidden);
        let mut d_rb = 0.0;
        for (f, &y) in self.sup.score_targets.iter().enumerate() {
            let pred = zf.row(f).dot(&rw) + rb;
            score += (pred - y).powi(2);
            if grad.is_some() && self.lambda != 0.0 {
                let g = self.lambda * 2.0 * (pred - y) / d;
                d_rw.scaled_add(g, &zf.row(f));
                d_rb += g;
                d_z[NodeType::Feature.index()].row_mut(f).scaled_add(g, &rw);
            }
        }
        score /= d;

        if let Some(grad) = grad {
            for (g, v) in grad[layout.readout_w()].iter_mut().zip(d_rw.iter()) {
                *g += v;
            }
            grad[layout.readout_b()] += d_rb;
            backward(params, &self.prep, &fwd, d_z, self.slope, grad);
        }
        LossParts {
            reconstruction: rec,
            score,
            total: rec + self.lambda * score,
        }
    }

    /// Pre-activation attention logits of every layer and relation.
    fn logits(&self, params: &GatParameters) -> Vec<(usize, usize, Vec<f64>)> {
        let fwd = forward(params, &self.prep, &self.inputs, self.slope);
        fwd.layers
            .into_iter()
            .enumerate()
            .flat_map(|(l, c)| c.rels.into_iter().enumerate().map(move |(r, rc)| (l, r, rc.logits)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<LossParts>,
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0].total
    }

    pub fn best_loss(&self) -> f64 {
        self.losses[self.best_epoch].total
    }
}

/// Full-batch training. Returns the parameters with the lowest loss seen,
/// so the returned loss never exceeds the initial one.
pub fn train(graph: &HeteroGraph, config: &TrainConfig) -> Result<(GatParameters, TrainReport), GatError> {
    let objective = Objective::new(graph, config)?;
    let mut params = GatParameters::init(config.hidden, config.layers, config.seed);
    let n = params.values.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut best = params.clone();
    let mut losses: Vec<LossParts> = Vec::with_capacity(config.epochs + 1);
    let mut best_epoch = 0;

    for epoch in 0..=config.epochs {
        let mut grad = vec![0.0; n];
        let want_grad = epoch < config.epochs;
        let loss = objective.evaluate(&params, want_grad.then_some(grad.as_mut_slice()));
        if !loss.total.is_finite() {
            return Err(GatError::NonFiniteLoss { epoch });
        }
        if losses.is_empty() || loss.total < losses[best_epoch].total {
            best_epoch = losses.len();
            best = params.clone();
        }
        losses.push(loss);
        log::trace!("epoch {epoch}: loss {:.6}", loss.total);
        if !want_grad {
            break;
        }
        let t = (epoch + 1) as i32;
        for i in 0..n {
            match config.optimizer {
                Optimizer::Sgd => params.values[i] -= config.learning_rate * grad[i],
                Optimizer::Adam => {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / (1.0 - beta1.powi(t));
                    let v_hat = v[i] / (1.0 - beta2.powi(t));
                    params.values[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        if params.values.iter().any(|x| !x.is_finite()) {
            return Err(GatError::NonFiniteLoss { epoch: epoch + 1 });
        }
    }
    Ok((best, TrainReport { losses, best_epoch }))
}

/// Final-layer embeddings per node type.
pub fn embeddings(params: &GatParameters, graph: &HeteroGraph, slope: f64) -> Result<[Array2<f64>; 3], GatError> {
    params.check()?;
    let prep = prepare(graph);
    Ok(forward(params, &prep, &init_node_features(graph), slope).output)
}

/// Readout of each feature's final embedding, indexed by global feature id.
pub fn feature_scores(params: &GatParameters, graph: &HeteroGraph, slope: f64) -> Result<Vec<f64>, GatError> {
    let z = embeddings(params, graph, slope)?;
    let layout = params.layout();
    let rw = params.vec(layout.readout_w());
    let rb = params.values[layout.readout_b()];
    Ok(z[NodeType::Feature.index()]
        .axis_iter(Axis(0))
        .map(|row| row.dot(&rw) + rb)
        .collect())
}

/// `(source, target, α)` triples of one relation.
pub type EdgeAttention = Vec<(usize, usize, f64)>;

/// Attention coefficients of one layer: per message-passing relation,
/// `(source, target, α)` in (target, source) order.
pub fn attention(
    params: &GatParameters,
    graph: &HeteroGraph,
    layer: usize,
    slope: f64,
) -> Result<Vec<(MpRelation, EdgeAttention)>, GatError> {
    params.check()?;
    if layer >= params.layers {
        return Err(GatError::ShapeMismatch(format!("layer {layer} of {}", params.layers)));
    }
    let prep = prepare(graph);
    let fwd = forward(params, &prep, &init_node_features(graph), slope);
    Ok(prep
        .rels
        .iter()
        .zip(&fwd.layers[layer].rels)
        .map(|(mp, rc)| {
            let coeffs = (0..mp.src.len()).map(|e| (mp.src[e], mp.tgt[e], rc.alpha[e])).collect();
            (mp.rel, coeffs)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_block: String,
    pub checked: usize,
}

/// Compares analytic gradients with central differences (step `1e-5`) over
/// every parameter. Relative error is `|a - n| / max(|a|, |n|, 1e-5)`; the
/// floor sits above the round-off of a central difference at this step, which
/// is around 1e-10 for losses of order one.
/// Logits sitting within `1e-4` of the LeakyReLU kink are first moved off it
/// by nudging the relation's edge coefficient.
pub fn gradient_check(params: &GatParameters, graph: &HeteroGraph, config: &TrainConfig) -> Result<GradCheckReport, GatError> {
    const STEP: f64 = 1e-5;
    const KINK: f64 = 1e-4;
    params.check()?;
    let objective = Objective::new(graph, config)?;
    let layout = params.layout();
    let rels = message_relations();
    let mut params = params.clone();

    for _ in 0..50 {
        let mut nudged = false;
        for (l, r, logits) in objective.logits(&params) {
            if logits.iter().any(|x| x.abs() < KINK) {
                params.values[layout.edge_coef(l, r)] += 1e-2;
                nudged = true;
            }
        }
        if !nudged {
            break;
        }
    }

    let mut analytic = vec![0.0; params.values.len()];
    objective.evaluate(&params, Some(&mut analytic));
    let mut worst = (0.0f64, String::new());
    let mut probe = params.clone();
    for i in 0..params.values.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + STEP;
        let plus = objective.evaluate(&probe, None).total;
        probe.values[i] = orig - STEP;
        let minus = objective.evaluate(&probe, None).total;
        probe.values[i] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
        if err > worst.0 {
            worst = (err, layout.block_name(i, &rels));
        }
    }
    let report = GradCheckReport {
        max_relative_error: worst.0,
        worst_block: worst.1,
        checked: params.values.len(),
    };
    if report.max_relative_error >= 1e-4 {
        return Err(GatError::GradCheckFailure {
            block: report.worst_block,
            error: report.max_relative_error,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub config_digest: String,
    pub params: GatParameters,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn new(config: TrainConfig, params: GatParameters) -> Self {
        let json = serde_json::to_string(&config).expect("config serializes");
        Self {
            version: Self::VERSION,
            config,
            config_digest: crate::semantic::digest_hex(&[&json]),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), GatError> {
        let text = serde_json::to_string(self).map_err(|e| GatError::Checkpoint(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GatError> {
        let cp: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| GatError::Checkpoint(e.to_string()))?;
        if cp.version != Self::VERSION {
            return Err(GatError::Checkpoint(format!("unsupported version {}", cp.version)));
        }
        cp.params.check()?;
        Ok(cp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FeatureIndex;
    use crate::graph::Edge;

    fn graph_with(n_features: usize, n_labels: usize, rels: &[(RelationKey, EdgeAttention)]) -> HeteroGraph {
        let idx = FeatureIndex::new(&[n_features]);
        let mut g = HeteroGraph::empty(&idx, 1, n_labels);
        let fv: Vec<Edge> = (0..n_features).map(|f| Edge { source: f, target: 0, weight: 1.0 }).collect();
        g.relations.insert(RelationKey::FvBelongs, fv);
        for (key, edges) in rels {
            let mut list: Vec<Edge> = edges
                .iter()
                .map(|&(s, t, w)| Edge { source: s, target: t, weight: w })
                .collect();
            list.sort_by_key(|a| (a.source, a.target));
            g.relations.insert(*key, list);
        }
        g
    }

    #[test]
    fn relation_schema() {
        let rels = message_relations();
        assert_eq!(rels.len(), 13);
        assert_eq!(INPUT_DIM, 32);
        let rev = rels.iter().find(|r| r.key == RelationKey::FlStat && r.reversed).unwrap();
        assert_eq!((rev.source_type(), rev.target_type()), (NodeType::Label, NodeType::Feature));
    }

    #[test]
    fn raw_features_arithmetic() {
        let g = graph_with(1, 2, &[(RelationKey::FlStat, vec![(0, 0, 0.5), (0, 1, 1.0)])]);
        let raw = raw_node_features(&g);
        let col = RelationKey::ALL.iter().position(|&k| k == RelationKey::FlStat).unwrap() * 4;
        let f = raw.get(NodeType::Feature).row(0);
        assert_eq!(f.slice(ndarray::s![col..col + 4]).to_vec(), vec![1.5, 1.0, 0.75, 2.0]);
        let isolated = graph_with(1, 3, &[]);
        let raw = raw_node_features(&isolated);
        assert!(raw.get(NodeType::Label).iter().all(|&x| x == 0.0));
        assert_eq!(init_node_features(&g), init_node_features(&g));
    }

    #[test]
    fn layout_is_contiguous() {
        let p = GatParameters::init(4, 2, 1);
        let layout = p.layout();
        assert_eq!(layout.w(0, 0).start, 0);
        assert_eq!(layout.a_src(0, 0).start, 32 * 4);
        assert_eq!(layout.bias(1, NodeType::Label).end, layout.readout_w().start);
        assert_eq!(layout.total(), p.values.len());
        assert!(p.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn singleton_and_tied_attention() {
        // label 0 has one fl_stat in-neighbor; label 1 two identical ones
        let g = graph_with(3, 2, &[(RelationKey::FlStat, vec![(0, 0, 0.7), (1, 1, 0.4), (2, 1, 0.4)])]);
        let p = GatParameters::init(8, 2, 3);
        let att = attention(&p, &g, 0, 0.2).unwrap();
        let (_, fl) = att.iter().find(|(r, _)| r.key == RelationKey::FlStat && !r.reversed).unwrap();
        assert_eq!(fl[0], (0, 0, 1.0));
        assert!((fl[1].2 - 0.5).abs() < 1e-12 && (fl[2].2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_supervision_edges() {
        let g = graph_with(2, 2, &[]);
        assert!(matches!(train(&g, &TrainConfig::default()), Err(GatError::NoSupervisionEdges)));
    }

    #[test]
    fn overfits_single_edge() {
        let g = graph_with(1, 1, &[(RelationKey::FlStat, vec![(0, 0, 1.0)])]);
        let config = TrainConfig { seed: 11, ..TrainConfig::default() };
        let (params, report) = train(&g, &config).unwrap();
        assert!(report.best_loss() <= report.initial_loss());
        let z = embeddings(&params, &g, config.leaky_slope).unwrap();
        let s = sigmoid(z[1].row(0).dot(&z[2].row(0)));
        assert!(s > 0.9, "sigmoid = {s}");
    }

    fn random_graph(seed: u64, d: usize, c: usize) -> HeteroGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rels = Vec::new();
        for key in RelationKey::ALL.into_iter().filter(|&k| k != RelationKey::FvBelongs) {
            let (ns, nt) = match (key.source_type(), key.target_type()) {
                (NodeType::Feature, NodeType::Label) => (d, c),
                (NodeType::Feature, NodeType::Feature) => (d, d),
                (NodeType::View, NodeType::Label) => (1, c),
                _ => (c, c),
            };
            let mut edges = Vec::new();
            for s in 0..ns {
                for t in 0..nt {
                    if rng.random_bool(0.4) && !(key.is_undirected() && s >= t) {
                        let w = rng.random_range(0.1..1.0);
                        edges.push((s, t, w));
                        if key.is_undirected() {
                            edges.push((t, s, w));
                        }
                    }
                }
            }
            rels.push((key, edges));
        }
        graph_with(d, c, &rels)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            let g = random_graph(seed, 6, 4);
            let config = TrainConfig { hidden: 8, seed, lambda: 0.7, ..TrainConfig::default() };
            let params = GatParameters::init(8, 2, seed);
            let report = gradient_check(&params, &g, &config).unwrap();
            assert!(report.max_relative_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn gradient_check_handles_zero_attention() {
        let g = random_graph(7, 4, 3);
        for lambda in [0.0, 1.0] {
            let config = TrainConfig { hidden: 8, lambda, ..TrainConfig::default() };
            let mut params = GatParameters::init(8, 2, 5);
            params.zero_attention();
            gradient_check(&params, &g, &config).unwrap();
        }
    }

    #[test]
    fn readout_gradient_vanishes_without_score_term() {
        let g = random_graph(4, 5, 3);
        let config = TrainConfig { hidden: 8, lambda: 0.0, ..TrainConfig::default() };
        let objective = Objective::new(&g, &config).unwrap();
        let params = GatParameters::init(8, 2, 1);
        let mut grad = vec![0.0; params.values.len()];
        objective.evaluate(&params, Some(&mut grad));
        let layout = params.layout();
        assert!(grad[layout.readout_w()].iter().all(|&x| x == 0.0));
        assert_eq!(grad[layout.readout_b()], 0.0);
        assert!(grad.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn attention_sums_to_one() {
        let g = random_graph(9, 7, 4);
        let p = GatParameters::init(8, 2, 2);
        for layer in 0..2 {
            for (rel, coeffs) in attention(&p, &g, layer, 0.2).unwrap() {
                let mut sums = std::collections::BTreeMap::<usize, f64>::new();
                for (_, t, a) in coeffs {
                    *sums.entry(t).or_default() += a;
                }
                for (t, total) in sums {
                    assert!((total - 1.0).abs() < 1e-12, "{} target {t}: {total}", rel.name());
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let g = random_graph(5, 6, 3);
        let config = TrainConfig { hidden: 8, epochs: 20, seed: 3, ..TrainConfig::default() };
        let (a, ra) = train(&g, &config).unwrap();
        let (b, rb) = train(&g, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.best_loss() <= ra.initial_loss());
    }

    #[test]
    fn feature_permutation_equivariance() {
        let (d, c) = (6, 3);
        let g = random_graph(12, d, c);
        let perm = [3, 0, 5, 1, 4, 2];
        let mut h = g.clone();
        for (key, edges) in h.relations.iter_mut() {
            for e in edges.iter_mut() {
                if key.source_type() == NodeType::Feature {
                    e.source = perm[e.source];
                }
                if key.target_type() == NodeType::Feature {
                    e.target = perm[e.target];
                }
            }
            edges.sort_by_key(|a| (a.source, a.target));
        }
        let p = GatParameters::init(8, 2, 6);
        let a = feature_scores(&p, &g, 0.2).unwrap();
        let b = feature_scores(&p, &h, 0.2).unwrap();
        for f in 0..d {
            assert!((a[f] - b[perm[f]]).abs() < 1e-9);
        }
    }

    #[test]
    fn label_label_edges_reach_labels() {
        // labels: dog, cat, eye; only dog-cat are semantically linked
        let fl = vec![(0, 0, 0.9), (1, 1, 0.8), (2, 2, 0.7)];
        let with = graph_with(3, 3, &[
            (RelationKey::FlSem, fl.clone()),
            (RelationKey::LlSem, vec![(0, 1, 0.9), (1, 0, 0.9)]),
        ]);
        let without = graph_with(3, 3, &[(RelationKey::FlSem, fl)]);
        let p = GatParameters::init(8, 2, 4);
        let za = embeddings(&p, &with, 0.2).unwrap();
        let zb = embeddings(&p, &without, 0.2).unwrap();
        let label = NodeType::Label.index();
        for l in [0, 1] {
            let diff: f64 = (&za[label].row(l) - &zb[label].row(l)).mapv(f64::abs).sum();
            assert!(diff > 1e-6, "label {l} unaffected");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cp = Checkpoint::new(TrainConfig::default(), GatParameters::init(4, 2, 0));
        let path = dir.path().join("cp.json");
        cp.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), cp);
    }
}
