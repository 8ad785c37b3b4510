//! Discretized mutual information between features and labels, label
//! co-occurrence counts and per-view average relevance.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::MultiViewDataset;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("column lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cache file: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteColumn {
    pub codes: Vec<u32>,
    pub bins: u32,
}

impl DiscreteColumn {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn from_binary(values: impl IntoIterator<Item = u8>) -> Self {
        Self {
            codes: values.into_iter().map(u32::from).collect(),
            bins: 2,
        }
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        let n = self.codes.len() as f64;
        let mut counts = vec![0u32; self.bins as usize];
        for &c in &self.codes {
            counts[c as usize] += 1;
        }
        -counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>()
    }
}

/// Equal-frequency binning by rank.
///
/// A column with at most `bins` distinct values is coded by the index of each
/// value among the sorted distinct values. Otherwise a value whose first
/// occurrence in sorted order has rank `r` gets code `floor(r * bins / n)`, so
/// tied values share the lowest bin of their run.
pub fn discretize(column: &[f64], bins: u32) -> DiscreteColumn {
    assert!(bins >= 2, "need at least two bins");
    let n = column.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| column[a].total_cmp(&column[b]).then(a.cmp(&b)));

    let mut distinct = 0usize;
    for (pos, &i) in order.iter().enumerate() {
        if pos == 0 || column[i] != column[order[pos - 1]] {
            distinct += 1;
        }
    }

    let mut codes = vec![0u32; n];
    if distinct <= bins as usize {
        let mut code = 0u32;
        for (pos, &i) in order.iter().enumerate() {
            if pos > 0 && column[i] != column[order[pos - 1]] {
                code += 1;
            }
            codes[i] = code;
        }
        return DiscreteColumn {
            codes,
            bins: distinct.max(1) as u32,
        };
    }

    let mut run_start = 0usize;
    for (pos, &i) in order.iter().enumerate() {
        if pos > 0 && column[i] != column[order[pos - 1]] {
            run_start = pos;
        }
        codes[i] = ((run_start as u64 * bins as u64) / n as u64) as u32;
    }
    DiscreteColumn { codes, bins }
}

/// Mutual information in nats from the joint histogram of two coded columns.
pub fn mutual_information(x: &DiscreteColumn, y: &DiscreteColumn) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    Ok(mi_unchecked(x, y, &mut Vec::new()))
}

// `scratch` is reused across calls in the pair scans.
fn mi_unchecked(x: &DiscreteColumn, y: &DiscreteColumn, scratch: &mut Vec<u32>) -> f64 {
    let n = x.codes.len();
    if n == 0 {
        return 0.0;
    }
    let (bx, by) = (x.bins as usize, y.bins as usize);
    scratch.clear();
    scratch.resize(bx * by, 0);
    for (&a, &b) in x.codes.iter().zip(&y.codes) {
        scratch[a as usize * by + b as usize] += 1;
    }
    let mut px = vec![0u32; bx];
    let mut py = vec![0u32; by];
    for a in 0..bx {
        for b in 0..by {
            let c = scratch[a * by + b];
            px[a] += c;
            py[b] += c;
        }
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for a in 0..bx {
        if px[a] == 0 {
            continue;
        }
        for b in 0..by {
            let c = scratch[a * by + b];
            if c == 0 {
                continue;
            }
            // p(a,b) ln(p(a,b) / (p(a) p(b))) = c/n ln(c n / (n_a n_b))
            mi += c as f64 / nf * ((c as f64 * nf) / (px[a] as f64 * py[b] as f64)).ln();
        }
    }
    mi.max(0.0)
}

/// Condensed upper triangle of a symmetric `d × d` matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMatrix {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl PairMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; dim * dim.saturating_sub(1) / 2],
        }
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.dim);
        i * (2 * self.dim - i - 1) / 2 + (j - i - 1)
    }

    /// Value for the unordered pair `{i, j}`; zero on the diagonal.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => self.values[self.offset(i, j)],
            std::cmp::Ordering::Greater => self.values[self.offset(j, i)],
            std::cmp::Ordering::Equal => 0.0,
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        let o = self.offset(a, b);
        self.values[o] = v;
    }

    /// `(i, j, value)` with `i < j`, row-major.
    pub fn iter_pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim).flat_map(move |i| ((i + 1)..self.dim).map(move |j| (i, j, self.get(i, j))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MIMatrices {
    /// d × c, MI(feature, label).
    pub fl: Array2<f64>,
    /// MI over every unordered feature pair, across views.
    pub ff: PairMatrix,
    /// V × c, mean of `fl` over the features of each view.
    pub vl: Array2<f64>,
    /// c × c co-occurrence counts; the diagonal holds label frequencies.
    pub cooc: Array2<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiOptions {
    pub bins: u32,
    /// Keep only the `m` strongest pairs of each feature in `ff`.
    pub ff_top_m: Option<usize>,
}

impl Default for MiOptions {
    fn default() -> Self {
        Self {
            bins: 10,
            ff_top_m: None,
        }
    }
}

pub fn label_cooccurrence(labels: &Array2<u8>) -> Array2<u64> {
    let c = labels.ncols();
    let mut cooc = Array2::zeros((c, c));
    for row in labels.rows() {
        for i in 0..c {
            if row[i] == 1 {
                for j in 0..c {
                    if row[j] == 1 {
                        cooc[[i, j]] += 1;
                    }
                }
            }
        }
    }
    cooc
}

pub fn compute_mi_matrices(dataset: &MultiViewDataset, opts: MiOptions) -> MIMatrices {
    let d = dataset.n_features();
    let c = dataset.n_labels();

    let features: Vec<DiscreteColumn> = (0..d)
        .into_par_iter()
        .map(|g| discretize(&dataset.feature_column(g), opts.bins))
        .collect();
    let labels: Vec<DiscreteColumn> = dataset
        .labels
        .columns()
        .into_iter()
        .map(|col| DiscreteColumn::from_binary(col.iter().copied()))
        .collect();

    let fl_rows: Vec<Vec<f64>> = features
        .par_iter()
        .map(|f| {
            let mut scratch = Vec::new();
            labels.iter().map(|l| mi_unchecked(f, l, &mut scratch)).collect()
        })
        .collect();
    let mut fl = Array2::zeros((d, c));
    for (i, row) in fl_rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            fl[[i, j]] = v;
        }
    }

    // Each row i owns the disjoint condensed slice for pairs (i, j > i).
    let mut ff = PairMatrix::zeros(d);
    let mut slices = Vec::with_capacity(d);
    let mut rest = ff.values.as_mut_slice();
    for i in 0..d {
        let (head, tail) = rest.split_at_mut(d - i - 1);
        slices.push((i, head));
        rest = tail;
    }
    slices.into_par_iter().for_each(|(i, out)| {
        let mut scratch = Vec::new();
        for (k, cell) in out.iter_mut().enumerate() {
            *cell = mi_unchecked(&features[i], &features[i + 1 + k], &mut scratch);
        }
    });
    if let Some(m) = opts.ff_top_m {
        cap_pairs_per_feature(&mut ff, m);
    }

    let mut vl = Array2::zeros((dataset.n_views(), c));
    for v in 0..dataset.n_views() {
        let range = dataset.index.view_range(v);
        let rows = fl.slice(ndarray::s![range, ..]);
        vl.row_mut(v)
            .assign(&rows.mean_axis(Axis(0)).expect("views are non-empty"));
    }

    MIMatrices {
        fl,
        ff,
        vl,
        cooc: label_cooccurrence(&dataset.labels),
    }
}

/// Zeroes every pair that is not among the `m` strongest pairs of either of
/// its endpoints. Ties are broken by the partner's id.
fn cap_pairs_per_feature(ff: &mut PairMatrix, m: usize) {
    let d = ff.dim;
    let mut keep = vec![false; ff.values.len()];
    for i in 0..d {
        let mut partners: Vec<usize> = (0..d).filter(|&j| j != i).collect();
        partners.sort_by(|&a, &b| ff.get(i, b).total_cmp(&ff.get(i, a)).then(a.cmp(&b)));
        for &j in partners.iter().take(m) {
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            keep[ff.offset(a, b)] = true;
        }
    }
    for (v, k) in ff.values.iter_mut().zip(keep) {
        if !k {
            *v = 0.0;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    dataset_digest: String,
    options: MiOptions,
    matrices: MIMatrices,
}

/// Loads cached matrices if the file exists and matches `digest` and `opts`.
pub fn load_cached(path: &Path, digest: &str, opts: MiOptions) -> Option<MIMatrices> {
    let text = fs::read_to_string(path).ok()?;
    match serde_json::from_str::<CacheFile>(&text) {
        Ok(c) if c.dataset_digest == digest && c.options == opts => Some(c.matrices),
        Ok(_) => None,
        Err(e) => {
            log::warn!("ignoring unreadable MI cache {}: {e}", path.display());
            None
        }
    }
}

pub fn store_cached(
    path: &Path,
    digest: &str,
    opts: MiOptions,
    matrices: &MIMatrices,
) -> Result<(), StatsError> {
    let file = CacheFile {
        dataset_digest: digest.to_string(),
        options: opts,
        matrices: matrices.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|e| StatsError::Cache(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(tmp, path)?;
    Ok(())
}
