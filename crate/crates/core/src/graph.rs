//! Two-level heterogeneous graph over view, feature and label nodes.
//!
//! Statistical relations are thresholded and max-normalized; semantic
//! relations are thresholded LLM scores kept at their raw value. Every
//! relation lives under its own [`RelationKey`], so a feature-label pair may
//! appear both in `fl_stat` and in `fl_sem`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::FeatureIndex;
use crate::semantic::SemanticScoreSet;
use crate::stats::MIMatrices;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node sets differ: {0:?} vs {1:?}")]
    NodeSetMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    View,
    Feature,
    Label,
}

impl NodeType {
    pub const ALL: [NodeType; 3] = [NodeType::View, NodeType::Feature, NodeType::Label];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKey {
    FvBelongs,
    FlStat,
    FfStat,
    LlStat,
    VlStat,
    FlSem,
    VlSem,
    LlSem,
}

impl RelationKey {
    pub const ALL: [RelationKey; 8] = [
        RelationKey::FvBelongs,
        RelationKey::FlStat,
        RelationKey::FfStat,
        RelationKey::LlStat,
        RelationKey::VlStat,
        RelationKey::FlSem,
        RelationKey::VlSem,
        RelationKey::LlSem,
    ];

    pub fn source_type(self) -> NodeType {
        use RelationKey::*;
        match self {
            FvBelongs | FlStat | FfStat | FlSem => NodeType::Feature,
            VlStat | VlSem => NodeType::View,
            LlStat | LlSem => NodeType::Label,
        }
    }

    pub fn target_type(self) -> NodeType {
        use RelationKey::*;
        match self {
            FvBelongs => NodeType::View,
            FfStat => NodeType::Feature,
            FlStat | LlStat | VlStat | FlSem | VlSem | LlSem => NodeType::Label,
        }
    }

    /// Undirected relations are stored in both directions.
    pub fn is_undirected(self) -> bool {
        matches!(self, RelationKey::FfStat | RelationKey::LlStat | RelationKey::LlSem)
    }

    pub fn is_semantic(self) -> bool {
        matches!(self, RelationKey::FlSem | RelationKey::VlSem | RelationKey::LlSem)
    }

    pub fn name(self) -> &'static str {
        use RelationKey::*;
        match self {
            FvBelongs => "fv_belongs",
            FlStat => "fl_stat",
            FfStat => "ff_stat",
            LlStat => "ll_stat",
            VlStat => "vl_stat",
            FlSem => "fl_sem",
            VlSem => "vl_sem",
            LlSem => "ll_sem",
        }
    }
}

impl fmt::Display for RelationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroGraph {
    pub n_views: usize,
    pub n_features: usize,
    pub n_labels: usize,
    pub view_of_feature: Vec<usize>,
    /// Edge lists sorted by `(source, target)`. Absent keys are empty.
    pub relations: BTreeMap<RelationKey, Vec<Edge>>,
}

impl HeteroGraph {
    pub fn empty(index: &FeatureIndex, n_views: usize, n_labels: usize) -> Self {
        Self {
            n_views,
            n_features: index.len(),
            n_labels,
            view_of_feature: (0..index.len()).map(|g| index.view_of(g)).collect(),
            relations: BTreeMap::new(),
        }
    }

    pub fn node_count(&self, ty: NodeType) -> usize {
        match ty {
            NodeType::View => self.n_views,
            NodeType::Feature => self.n_features,
            NodeType::Label => self.n_labels,
        }
    }

    pub fn node_counts(&self) -> (usize, usize, usize) {
        (self.n_views, self.n_features, self.n_labels)
    }

    pub fn edges(&self, key: RelationKey) -> &[Edge] {
        self.relations.get(&key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn edge_count(&self) -> usize {
        self.relations.values().map(Vec::len).sum()
    }

    fn insert(&mut self, key: RelationKey, mut edges: Vec<Edge>) {
        edges.sort_by_key(|a| (a.source, a.target));
        self.relations.insert(key, edges);
    }

    /// Drops every edge of `key`.
    pub fn without(&self, key: RelationKey) -> Self {
        let mut g = self.clone();
        g.relations.remove(&key);
        g
    }

    /// Deterministic JSON dump ordered by relation key, source, target.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Absolute(f64),
    /// Quantile in `[0, 1]` of the strictly positive raw scores.
    Quantile(f64),
}

impl Threshold {
    pub fn resolve(self, raw: impl Iterator<Item = f64>) -> Result<f64, GraphError> {
        match self {
            Threshold::Absolute(v) if v >= 0.0 && v.is_finite() => Ok(v),
            Threshold::Absolute(v) => Err(GraphError::InvalidThreshold(format!("{v}"))),
            Threshold::Quantile(q) if (0.0..=1.0).contains(&q) => {
                let mut pos: Vec<f64> = raw.filter(|&v| v > 0.0).collect();
                if pos.is_empty() {
                    return Ok(0.0);
                }
                pos.sort_by(f64::total_cmp);
                Ok(quantile_sorted(&pos, q))
            }
            Threshold::Quantile(q) => Err(GraphError::InvalidThreshold(format!("quantile {q}"))),
        }
    }
}

/// Linear interpolation between closest ranks.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub delta: f64,
    pub tau1: Threshold,
    pub tau2: Threshold,
    pub tau3: Threshold,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            delta: 0.5,
            tau1: Threshold::Quantile(0.7),
            tau2: Threshold::Quantile(0.7),
            tau3: Threshold::Quantile(0.7),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphWarning {
    EmptyRelation(RelationKey),
}

fn normalized(raw: Vec<(usize, usize, f64)>, threshold: f64, both_directions: bool) -> Vec<Edge> {
    let max = raw.iter().map(|r| r.2).fold(0.0, f64::max);
    let mut edges = Vec::new();
    for (s, t, v) in raw {
        if v > threshold && max > 0.0 {
            let weight = v / max;
            edges.push(Edge { source: s, target: t, weight });
            if both_directions {
                edges.push(Edge { source: t, target: s, weight });
            }
        }
    }
    edges
}

/// Statistical level: feature-view membership, MI-weighted feature-label,
/// feature-feature and view-label relations, and label co-occurrence.
pub fn build_statistical_graph(
    mi: &MIMatrices,
    index: &FeatureIndex,
    thresholds: &Thresholds,
) -> Result<(HeteroGraph, Vec<GraphWarning>), GraphError> {
    let (d, c) = mi.fl.dim();
    let n_views = mi.vl.nrows();
    let mut graph = HeteroGraph::empty(index, n_views, c);
    debug_assert_eq!(d, index.len());

    let fv = (0..d)
        .map(|g| Edge { source: g, target: index.view_of(g), weight: 1.0 })
        .collect();
    graph.insert(RelationKey::FvBelongs, fv);

    let fl_raw: Vec<_> = mi.fl.indexed_iter().map(|((f, l), &v)| (f, l, v)).collect();
    let tau1 = thresholds.tau1.resolve(fl_raw.iter().map(|r| r.2))?;
    graph.insert(RelationKey::FlStat, normalized(fl_raw, tau1, false));

    let ff_raw: Vec<_> = mi.ff.iter_pairs().collect();
    let tau2 = thresholds.tau2.resolve(ff_raw.iter().map(|r| r.2))?;
    graph.insert(RelationKey::FfStat, normalized(ff_raw, tau2, true));

    let vl_raw: Vec<_> = mi.vl.indexed_iter().map(|((v, l), &x)| (v, l, x)).collect();
    let tau3 = thresholds.tau3.resolve(vl_raw.iter().map(|r| r.2))?;
    graph.insert(RelationKey::VlStat, normalized(vl_raw, tau3, false));

    let ll_raw: Vec<_> = (0..c)
        .flat_map(|i| ((i + 1)..c).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, mi.cooc[[i, j]] as f64))
        .collect();
    graph.insert(RelationKey::LlStat, normalized(ll_raw, 0.0, true));

    log::debug!("statistical thresholds: tau1={tau1:.6} tau2={tau2:.6} tau3={tau3:.6}");
    let warnings = empty_relation_warnings(
        &graph,
        &[RelationKey::FlStat, RelationKey::FfStat, RelationKey::VlStat, RelationKey::LlStat],
    );
    Ok((graph, warnings))
}

fn empty_relation_warnings(graph: &HeteroGraph, keys: &[RelationKey]) -> Vec<GraphWarning> {
    keys.iter()
        .filter(|&&k| graph.edges(k).is_empty())
        .map(|&k| {
            log::warn!("relation {k} has no edges after thresholding");
            GraphWarning::EmptyRelation(k)
        })
        .collect()
}

/// Semantic level: edges for scores strictly above `delta`, weighted by the
/// raw score.
pub fn build_semantic_graph(
    scores: &SemanticScoreSet,
    index: &FeatureIndex,
    n_views: usize,
    n_labels: usize,
    delta: f64,
) -> Result<HeteroGraph, GraphError> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(GraphError::InvalidThreshold(format!("delta {delta}")));
    }
    let mut graph = HeteroGraph::empty(index, n_views, n_labels);
    let pick = |map: &BTreeMap<(usize, usize), f64>, both: bool| {
        let mut edges = Vec::new();
        for (&(s, t), &w) in map {
            if w > delta && !(both && s == t) {
                edges.push(Edge { source: s, target: t, weight: w });
                if both {
                    edges.push(Edge { source: t, target: s, weight: w });
                }
            }
        }
        edges
    };
    graph.insert(RelationKey::FlSem, pick(&scores.fl, false));
    graph.insert(RelationKey::VlSem, pick(&scores.vl, false));
    graph.insert(RelationKey::LlSem, pick(&scores.ll, true));
    Ok(graph)
}

/// Union of relations; both inputs must describe the same node sets.
pub fn merge(statistical: &HeteroGraph, semantic: &HeteroGraph) -> Result<HeteroGraph, GraphError> {
    if statistical.node_counts() != semantic.node_counts()
        || statistical.view_of_feature != semantic.view_of_feature
    {
        return Err(GraphError::NodeSetMismatch(
            statistical.node_counts(),
            semantic.node_counts(),
        ));
    }
    let mut out = statistical.clone();
    for (&key, edges) in &semantic.relations {
        if edges.is_empty() && out.relations.contains_key(&key) {
            continue;
        }
        let mut all = out.relations.remove(&key).unwrap_or_default();
        all.extend_from_slice(edges);
        out.insert(key, all);
    }
    Ok(out)
}
