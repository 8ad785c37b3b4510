//! ML-kNN, multi-label metrics and the repeated-split evaluation protocol.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, MultiViewDataset};
use crate::select::{self, SelectError};
use crate::stats::MIMatrices;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need more than k = {k} training samples, got {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no label has a positive example")]
    NoPositives,
    #[error("no label has both classes present")]
    NoValidLabels,
    #[error("metric {metric} = {value} outside [0, 1]")]
    MetricOutOfRange { metric: &'static str, value: f64 },
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Select(#[from] SelectError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlknnModel {
    pub k: usize,
    pub s: f64,
    pub priors: Vec<f64>,
    /// `c × (k+1)` raw counts: training samples with (without) label j
    /// whose neighborhood holds exactly t samples with label j.
    pub counts_pos: Array2<u64>,
    pub counts_neg: Array2<u64>,
    /// Smoothed `P(E_t | H_j)` and `P(E_t | ¬H_j)`.
    pub cond_pos: Array2<f64>,
    pub cond_neg: Array2<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
    train: Array2<f64>,
    train_labels: Array2<u8>,
}

/// Column means and standard deviations (population); constant columns get
/// scale 1 so they standardize to 0.
fn standardizer(x: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows().max(1) as f64;
    x.columns()
        .into_iter()
        .map(|col| {
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        })
        .unzip()
}

fn standardize(x: ArrayView2<f64>, means: &[f64], scales: &[f64]) -> Array2<f64> {
    let mut out = x.to_owned();
    for (j, mut col) in out.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|v| (v - means[j]) / scales[j]);
    }
    out
}

/// The `k` training rows closest to `query` by squared Euclidean distance,
/// ties by ascending row index, skipping `exclude`.
fn neighbors(train: &Array2<f64>, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = train
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|&(i, _)| Some(i) != exclude)
        .map(|(i, row)| {
            let d = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (d, i)
        })
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if cand.len() > k {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand.into_iter().map(|(_, i)| i).collect()
}

fn neighbor_label_counts(labels: &Array2<u8>, nbrs: &[usize]) -> Vec<usize> {
    let mut counts = vec![0usize; labels.ncols()];
    for &i in nbrs {
        for (j, &y) in labels.row(i).iter().enumerate() {
            counts[j] += y as usize;
        }
    }
    counts
}

pub fn mlknn_fit(x: ArrayView2<f64>, y: ArrayView2<u8>, k: usize, s: f64) -> Result<MlknnModel> {
    let (n, c) = (x.nrows(), y.ncols());
    if y.nrows() != n {
        return Err(EvalError::ShapeMismatch(format!("{n} feature rows vs {} label rows", y.nrows())));
    }
    if n <= k {
        return Err(EvalError::TooFewSamples { n, k });
    }
    let (means, scales) = standardizer(x);
    let train = standardize(x, &means, &scales);
    let train_labels = y.to_owned();

    let priors = (0..c)
        .map(|j| {
            let pos = y.column(j).iter().filter(|&&v| v == 1).count() as f64;
            (s + pos) / (2.0 * s + n as f64)
        })
        .collect();

    let per_sample: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = train.row(i).to_vec();
            neighbor_label_counts(&train_labels, &neighbors(&train, &row, k, Some(i)))
        })
        .collect();
    let mut counts_pos = Array2::<u64>::zeros((c, k + 1));
    let mut counts_neg = Array2::<u64>::zeros((c, k + 1));
    for (i, counts) in per_sample.iter().enumerate() {
        for j in 0..c {
            if train_labels[[i, j]] == 1 {
                counts_pos[[j, counts[j]]] += 1;
            } else {
                counts_neg[[j, counts[j]]] += 1;
            }
        }
    }
    let smooth = |counts: &Array2<u64>| {
        let mut out = Array2::<f64>::zeros(counts.raw_dim());
        for j in 0..c {
            let total: u64 = counts.row(j).sum();
            for t in 0..=k {
                out[[j, t]] = (s + counts[[j, t]] as f64) / (s * (k + 1) as f64 + total as f64);
            }
        }
        out
    };
    Ok(MlknnModel {
        k,
        s,
        priors,
        cond_pos: smooth(&counts_pos),
        cond_neg: smooth(&counts_neg),
        counts_pos,
        counts_neg,
        means,
        scales,
        train,
        train_labels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub confidences: Array2<f64>,
    pub decisions: Array2<u8>,
}

pub fn mlknn_predict(model: &MlknnModel, x: ArrayView2<f64>) -> Result<Prediction> {
    if x.ncols() != model.means.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} test columns vs {} trained",
            x.ncols(),
            model.means.len()
        )));
    }
    let test = standardize(x, &model.means, &model.scales);
    let c = model.priors.len();
    let rows: Vec<Vec<f64>> = (0..test.nrows())
        .into_par_iter()
        .map(|i| {
            let nbrs = neighbors(&model.train, &test.row(i).to_vec(), model.k, None);
            let counts = neighbor_label_counts(&model.train_labels, &nbrs);
            (0..c)
                .map(|j| {
                    let t = counts[j];
                    let p = model.priors[j] * model.cond_pos[[j, t]];
                    let q = (1.0 - model.priors[j]) * model.cond_neg[[j, t]];
                    p / (p + q)
                })
                .collect()
        })
        .collect();
    let mut confidences = Array2::<f64>::zeros((x.nrows(), c));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            confidences[[i, j]] = v;
        }
    }
    let decisions = confidences.mapv(|v| u8::from(v > 0.5));
    Ok(Prediction { confidences, decisions })
}

fn check_shapes<A, B>(y: &ArrayView2<A>, other: &ArrayView2<B>) -> Result<()> {
    if y.dim() != other.dim() {
        return Err(EvalError::ShapeMismatch(format!("{:?} vs {:?}", y.dim(), other.dim())));
    }
    Ok(())
}

/// Label-macro average precision. For each label with a positive, the mean
/// over its positives of precision at that positive's score, where every
/// sample scoring at least as high counts as retrieved.
pub fn metric_ap(y: ArrayView2<u8>, conf: ArrayView2<f64>) -> Result<f64> {
    check_shapes(&y, &conf)?;
    let mut per_label = Vec::new();
    for j in 0..y.ncols() {
        let (yj, cj) = (y.column(j), conf.column(j));
        let positives: Vec<f64> = (0..y.nrows()).filter(|&i| yj[i] == 1).map(|i| cj[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let precision_sum: f64 = positives
            .iter()
            .map(|&thr| {
                let retrieved = cj.iter().filter(|&&v| v >= thr).count();
                let hits = positives.iter().filter(|&&v| v >= thr).count();
                hits as f64 / retrieved as f64
            })
            .sum();
        per_label.push(precision_sum / positives.len() as f64);
    }
    if per_label.is_empty() {
        return Err(EvalError::NoPositives);
    }
    Ok(per_label.iter().sum::<f64>() / per_label.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mean per-label ROC AUC (Mann-Whitney with average ranks), skipping labels
/// that lack either class.
pub fn metric_macro_auc(y: ArrayView2<u8>, conf: ArrayView2<f64>) -> Result<f64> {
    check_shapes(&y, &conf)?;
    let mut aucs = Vec::new();
    for j in 0..y.ncols() {
        let scores = conf.column(j).to_vec();
        let ranks = average_ranks(&scores);
        let n_pos = y.column(j).iter().filter(|&&v| v == 1).count();
        let n_neg = y.nrows() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            continue;
        }
        let rank_sum: f64 = (0..y.nrows()).filter(|&i| y[[i, j]] == 1).map(|i| ranks[i]).sum();
        let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
        aucs.push(u / (n_pos * n_neg) as f64);
    }
    if aucs.is_empty() {
        return Err(EvalError::NoValidLabels);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Label ranking average precision over samples with at least one positive.
/// A label's rank counts every label scoring at least as high, so tied
/// labels all take the worst rank of their group.
pub fn metric_lrap(y: ArrayView2<u8>, conf: ArrayView2<f64>) -> Result<f64> {
    check_shapes(&y, &conf)?;
    let mut total = 0.0;
    let mut samples = 0usize;
    for (yi, ci) in y.axis_iter(Axis(0)).zip(conf.axis_iter(Axis(0))) {
        let pos: Vec<f64> = yi.iter().zip(ci.iter()).filter(|(&t, _)| t == 1).map(|(_, &c)| c).collect();
        if pos.is_empty() {
            continue;
        }
        let sum: f64 = pos
            .iter()
            .map(|&thr| {
                let rank = ci.iter().filter(|&&v| v >= thr).count();
                let hits = pos.iter().filter(|&&v| v >= thr).count();
                hits as f64 / rank as f64
            })
            .sum();
        total += sum / pos.len() as f64;
        samples += 1;
    }
    if samples == 0 {
        return Err(EvalError::NoPositives);
    }
    Ok(total / samples as f64)
}

pub fn metric_hl(y: ArrayView2<u8>, decisions: ArrayView2<u8>) -> Result<f64> {
    check_shapes(&y, &decisions)?;
    if y.is_empty() {
        return Err(EvalError::ShapeMismatch("empty label matrix".into()));
    }
    let wrong = y.iter().zip(decisions.iter()).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / y.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: f64,
    pub auc: f64,
    pub lrap: f64,
    pub hl: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["AP", "AUC", "LRAP", "HL"];

    pub fn values(&self) -> [f64; 4] {
        [self.ap, self.auc, self.lrap, self.hl]
    }

    fn from_values(v: [f64; 4]) -> Self {
        Self { ap: v[0], auc: v[1], lrap: v[2], hl: v[3] }
    }

    /// Per-metric population mean and standard deviation.
    pub fn mean_std(items: &[Metrics]) -> (Metrics, Metrics) {
        let n = items.len().max(1) as f64;
        let mut mean = [0.0; 4];
        let mut sd = [0.0; 4];
        for m in 0..4 {
            mean[m] = items.iter().map(|x| x.values()[m]).sum::<f64>() / n;
            sd[m] = (items.iter().map(|x| (x.values()[m] - mean[m]).powi(2)).sum::<f64>() / n).sqrt();
        }
        (Self::from_values(mean), Self::from_values(sd))
    }
}

pub fn evaluate(y: ArrayView2<u8>, pred: &Prediction) -> Result<Metrics> {
    let m = Metrics {
        ap: metric_ap(y, pred.confidences.view())?,
        auc: metric_macro_auc(y, pred.confidences.view())?,
        lrap: metric_lrap(y, pred.confidences.view())?,
        hl: metric_hl(y, pred.decisions.view())?,
    };
    for (name, v) in Metrics::NAMES.iter().zip(m.values()) {
        if !(0.0..=1.0).contains(&v) {
            return Err(EvalError::MetricOutOfRange { metric: name, value: v });
        }
    }
    Ok(m)
}

/// How features are ranked in each repeat.
#[derive(Debug, Clone, PartialEq)]
pub enum Ranking {
    /// One score per global feature, shared by all repeats.
    Scores(Vec<f64>),
    /// A fresh uniformly random order per repeat, seeded by `seed + repeat`.
    Random { seed: u64 },
}

/// Baseline scores: each feature's strongest MI with any label.
pub fn max_mi_scores(mi: &MIMatrices) -> Vec<f64> {
    mi.fl
        .axis_iter(Axis(0))
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub ratios: Vec<f64>,
    pub repeats: usize,
    pub base_seed: u64,
    pub train_fraction: f64,
    pub k: usize,
    pub smoothing: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            ratios: select::default_ratios(),
            repeats: 10,
            base_seed: 0,
            train_fraction: 0.7,
            k: 10,
            smoothing: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub repeat: usize,
    pub seed: u64,
    pub ratio: f64,
    pub k: usize,
    pub selected: Vec<usize>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub ratio: f64,
    pub k: usize,
    pub mean: Metrics,
    pub std: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub protocol: ProtocolConfig,
    pub trials: Vec<TrialRecord>,
    pub per_ratio: Vec<RatioSummary>,
    /// Mean over ratios; the std is across repeats of each repeat's
    /// ratio-averaged metrics.
    pub over_ratio_mean: Metrics,
    pub over_ratio_std: Metrics,
}

impl EvalReport {
    pub fn summary(&self, ratio: f64) -> Option<&RatioSummary> {
        self.per_ratio.iter().find(|s| (s.ratio - ratio).abs() < 1e-12)
    }

    /// `method,ratio,metric,mean,std,repeats,seed`, with the over-ratio
    /// aggregate on rows whose ratio is `mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,ratio,metric,mean,std,repeats,seed\n");
        let mut push = |ratio: String, mean: &Metrics, sd: &Metrics| {
            for (m, name) in Metrics::NAMES.iter().enumerate() {
                out.push_str(&format!(
                    "{},{ratio},{name},{},{},{},{}\n",
                    self.method,
                    mean.values()[m],
                    sd.values()[m],
                    self.protocol.repeats,
                    self.protocol.base_seed
                ));
            }
        };
        for s in &self.per_ratio {
            push(s.ratio.to_string(), &s.mean, &s.std);
        }
        push("mean".into(), &self.over_ratio_mean, &self.over_ratio_std);
        out
    }
}

/// For each repeat r: split with seed `base_seed + r`, then for each ratio
/// select the top-k features, fit ML-kNN on the training rows and score the
/// test rows. Trials run in parallel; results are assembled in
/// (repeat, ratio) order so the report does not depend on scheduling.
pub fn run_protocol(
    dataset: &MultiViewDataset,
    method: &str,
    ranking: &Ranking,
    config: &ProtocolConfig,
) -> Result<EvalReport> {
    if config.repeats == 0 {
        return Err(EvalError::Protocol("repeats must be at least 1".into()));
    }
    if config.ratios.is_empty() || config.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(EvalError::Protocol(format!("ratios {:?} must lie in (0, 1]", config.ratios)));
    }
    let d = dataset.n_features();
    if let Ranking::Scores(s) = ranking {
        if s.len() != d {
            return Err(EvalError::ShapeMismatch(format!("{} scores for {d} features", s.len())));
        }
    }
    let n = dataset.n_samples();
    let splits: Vec<dataset::SplitIndices> = (0..config.repeats)
        .map(|r| dataset::split(n, config.train_fraction, config.base_seed + r as u64))
        .collect::<std::result::Result<_, _>>()?;
    let orders: Vec<Vec<usize>> = (0..config.repeats)
        .map(|r| match ranking {
            Ranking::Scores(s) => select::rank(s),
            Ranking::Random { seed } => {
                let mut ids: Vec<usize> = (0..d).collect();
                ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64)));
                Ok(ids)
            }
        })
        .collect::<std::result::Result<_, _>>()?;

    let tasks: Vec<(usize, f64)> = (0..config.repeats)
        .flat_map(|r| config.ratios.iter().map(move |&ratio| (r, ratio)))
        .collect();
    let trials: Vec<TrialRecord> = tasks
        .par_iter()
        .map(|&(r, ratio)| {
            let split = &splits[r];
            let k = select::ratio_to_k(ratio, d);
            let selected = orders[r][..k].to_vec();
            let x_train = dataset.gather_columns(&selected, &split.train_ids);
            let x_test = dataset.gather_columns(&selected, &split.test_ids);
            let y_train = dataset.labels.select(Axis(0), &split.train_ids);
            let y_test = dataset.labels.select(Axis(0), &split.test_ids);
            let model = mlknn_fit(x_train.view(), y_train.view(), config.k, config.smoothing)?;
            let pred = mlknn_predict(&model, x_test.view())?;
            Ok(TrialRecord {
                repeat: r,
                seed: split.seed,
                ratio,
                k,
                selected,
                metrics: evaluate(y_test.view(), &pred)?,
            })
        })
        .collect::<Result<_>>()?;

    let per_ratio = config
        .ratios
        .iter()
        .map(|&ratio| {
            let ms: Vec<Metrics> = trials.iter().filter(|t| t.ratio == ratio).map(|t| t.metrics).collect();
            let (mean, std) = Metrics::mean_std(&ms);
            RatioSummary { ratio, k: select::ratio_to_k(ratio, d), mean, std }
        })
        .collect::<Vec<_>>();
    let per_repeat: Vec<Metrics> = (0..config.repeats)
        .map(|r| {
            let ms: Vec<Metrics> = trials.iter().filter(|t| t.repeat == r).map(|t| t.metrics).collect();
            Metrics::mean_std(&ms).0
        })
        .collect();
    let (over_ratio_mean, over_ratio_std) = Metrics::mean_std(&per_repeat);
    Ok(EvalReport {
        method: method.to_string(),
        protocol: config.clone(),
        trials,
        per_ratio,
        over_ratio_mean,
        over_ratio_std,
    })
}
