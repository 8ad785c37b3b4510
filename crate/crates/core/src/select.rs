//! Ranking feature scores into top-k selections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::FeatureIndex;

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("k = {k} exceeds the {d} available features")]
    KTooLarge { k: usize, d: usize },
    #[error("score for feature {0} is not finite")]
    NonFiniteScore(usize),
}

/// Selection ratios 2%, 4%, ..., 20%.
pub fn default_ratios() -> Vec<f64> {
    (1..=10).map(|i| i as f64 * 0.02).collect()
}

/// `max(1, round-half-up(ratio * d))`. The epsilon absorbs products such as
/// `0.3 * 5` landing just below a half.
pub fn ratio_to_k(ratio: f64, d: usize) -> usize {
    ((ratio * d as f64 + 0.5 + 1e-9).floor() as usize).clamp(1, d.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub ratio: f64,
    pub k: usize,
    /// Global feature ids, best first.
    pub selected: Vec<usize>,
    pub per_view_counts: BTreeMap<usize, usize>,
}

/// Full ranking: descending score, ties by ascending id.
pub fn rank(scores: &[f64]) -> Result<Vec<usize>, SelectError> {
    if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
        return Err(SelectError::NonFiniteScore(bad));
    }
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(ids)
}

pub fn top_k(scores: &[f64], k: usize, index: &FeatureIndex) -> Result<SelectionResult, SelectError> {
    let d = scores.len();
    if k > d {
        return Err(SelectError::KTooLarge { k, d });
    }
    let mut selected = rank(scores)?;
    selected.truncate(k);
    let mut per_view_counts: BTreeMap<usize, usize> = (0..index.n_views()).map(|v| (v, 0)).collect();
    for &f in &selected {
        *per_view_counts.entry(index.view_of(f)).or_default() += 1;
    }
    Ok(SelectionResult {
        ratio: k as f64 / d.max(1) as f64,
        k,
        selected,
        per_view_counts,
    })
}

/// One selection per ratio, all cut from a single ranking.
pub fn select_ratios(scores: &[f64], ratios: &[f64], index: &FeatureIndex) -> Result<Vec<SelectionResult>, SelectError> {
    ratios
        .iter()
        .map(|&r| {
            let mut sel = top_k(scores, ratio_to_k(r, scores.len()), index)?;
            sel.ratio = r;
            Ok(sel)
        })
        .collect()
}

/// Delimited dump: `ratio,k,rank,global_feature_id,view_id,score`.
pub fn selections_csv(selections: &[SelectionResult], scores: &[f64], index: &FeatureIndex) -> String {
    let mut out = String::from("ratio,k,rank,global_feature_id,view_id,score\n");
    for sel in selections {
        for (rank, &f) in sel.selected.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                sel.ratio,
                sel.k,
                rank + 1,
                f,
                index.view_of(f),
                scores[f]
            ));
        }
    }
    out
}
