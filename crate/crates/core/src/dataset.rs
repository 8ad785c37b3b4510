//! Multi-view multi-label datasets: manifest loading, validation, global
//! feature indexing, description texts and train/test splitting.
//!
//! A dataset is described by a JSON manifest:
//!
//! ```json
//! {
//!   "views": [{"name": "GE", "matrix": "ge.csv", "feature_texts": ["..."]}],
//!   "labels": "labels.csv",
//!   "view_texts": ["..."],
//!   "label_texts": ["..."]
//! }
//! ```
//!
//! Text lists may be given inline or as a path to a newline-delimited file.
//! Matrix files are comma-delimited, one row per sample, no header.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file {path}")]
    MissingFile { path: PathBuf },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("view `{view}` has {view_rows} rows but the label file has {label_rows}")]
    RowCountMismatch {
        view: String,
        view_rows: usize,
        label_rows: usize,
    },
    #[error("{path}:{line}: label value `{value}` is not 0 or 1")]
    NonBinaryLabel {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("degenerate split: {train} train / {test} test samples")]
    DegenerateSplit { train: usize, test: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewBlock {
    pub view_id: usize,
    pub name: String,
    /// n × d(i)
    pub matrix: Array2<f64>,
    /// Names as given in the manifest; may be empty.
    pub feature_names: Vec<String>,
}

impl ViewBlock {
    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Owner view and local column of one global feature id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureRef {
    pub view: usize,
    pub local: usize,
}

/// Bijection between `(view, local column)` and global ids in `[0, d)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureIndex {
    offsets: Vec<usize>,
    refs: Vec<FeatureRef>,
}

impl FeatureIndex {
    pub fn new(view_dims: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(view_dims.len() + 1);
        let mut refs = Vec::new();
        offsets.push(0);
        for (view, &dim) in view_dims.iter().enumerate() {
            refs.extend((0..dim).map(|local| FeatureRef { view, local }));
            offsets.push(refs.len());
        }
        Self { offsets, refs }
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn global(&self, view: usize, local: usize) -> Option<usize> {
        let start = *self.offsets.get(view)?;
        let end = self.offsets[view + 1];
        (start + local < end).then_some(start + local)
    }

    pub fn locate(&self, global: usize) -> Option<FeatureRef> {
        self.refs.get(global).copied()
    }

    pub fn n_views(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn view_of(&self, global: usize) -> usize {
        self.refs[global].view
    }

    /// Global id range owned by `view`.
    pub fn view_range(&self, view: usize) -> std::ops::Range<usize> {
        self.offsets[view]..self.offsets[view + 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub views: Vec<ViewBlock>,
    /// n × c, entries 0 or 1.
    pub labels: Array2<u8>,
    pub index: FeatureIndex,
}

impl MultiViewDataset {
    /// Validates shapes and values and builds the global feature index.
    pub fn new(views: Vec<ViewBlock>, labels: Array2<u8>) -> Result<Self> {
        if views.is_empty() {
            return Err(DatasetError::Manifest("dataset has no views".into()));
        }
        for view in &views {
            if view.matrix.nrows() != labels.nrows() {
                return Err(DatasetError::RowCountMismatch {
                    view: view.name.clone(),
                    view_rows: view.matrix.nrows(),
                    label_rows: labels.nrows(),
                });
            }
            if view.dim() == 0 {
                return Err(DatasetError::Manifest(format!(
                    "view `{}` has no features",
                    view.name
                )));
            }
            if view.matrix.iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::Manifest(format!(
                    "view `{}` contains NaN or infinite values",
                    view.name
                )));
            }
        }
        if labels.iter().any(|&v| v > 1) {
            return Err(DatasetError::Manifest("label matrix is not binary".into()));
        }
        for (j, col) in labels.columns().into_iter().enumerate() {
            if col.iter().all(|&v| v == 0) {
                log::warn!("label column {j} has no positive samples");
            }
        }
        let dims: Vec<usize> = views.iter().map(ViewBlock::dim).collect();
        Ok(Self {
            views,
            labels,
            index: FeatureIndex::new(&dims),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.nrows()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.ncols()
    }

    pub fn n_features(&self) -> usize {
        self.index.len()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    /// Column of global feature `g` as a vector over samples.
    pub fn feature_column(&self, g: usize) -> Vec<f64> {
        let r = self.index.locate(g).expect("feature id out of range");
        self.views[r.view].matrix.column(r.local).to_vec()
    }

    /// n × |ids| matrix of the requested global feature columns, in order.
    pub fn gather_columns(&self, ids: &[usize], rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), ids.len()));
        for (c, &g) in ids.iter().enumerate() {
            let r = self.index.locate(g).expect("feature id out of range");
            let m = &self.views[r.view].matrix;
            for (i, &row) in rows.iter().enumerate() {
                out[[i, c]] = m[[row, r.local]];
            }
        }
        out
    }

    /// Dataset restricted to the given sample rows (in order).
    pub fn subset_rows(&self, rows: &[usize]) -> Self {
        let views = self
            .views
            .iter()
            .map(|v| ViewBlock {
                view_id: v.view_id,
                name: v.name.clone(),
                matrix: v.matrix.select(ndarray::Axis(0), rows),
                feature_names: v.feature_names.clone(),
            })
            .collect();
        Self {
            views,
            labels: self.labels.select(ndarray::Axis(0), rows),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over shapes and the exact bit patterns of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_samples() as u64).to_le_bytes());
        for v in &self.views {
            h.update(v.name.as_bytes());
            h.update((v.dim() as u64).to_le_bytes());
            for x in v.matrix.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.update((self.n_labels() as u64).to_le_bytes());
        h.update(self.labels.iter().copied().collect::<Vec<u8>>());
        hex::encode(h.finalize())
    }
}

/// Natural-language descriptions of views, features and labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextCatalog {
    pub view_texts: Vec<String>,
    /// Per view, one text per local feature.
    pub feature_texts: Vec<Vec<String>>,
    pub label_texts: Vec<String>,
}

impl TextCatalog {
    /// Builds a catalog, substituting pseudo-names for features whose given
    /// name carries no meaning and the view name for missing view texts.
    pub fn from_names(
        dataset: &MultiViewDataset,
        view_texts: Option<Vec<String>>,
        label_texts: Vec<String>,
    ) -> Result<Self> {
        let view_texts = match view_texts {
            Some(t) if t.len() != dataset.n_views() => {
                return Err(DatasetError::Manifest(format!(
                    "{} view texts for {} views",
                    t.len(),
                    dataset.n_views()
                )))
            }
            Some(t) => t
                .into_iter()
                .zip(&dataset.views)
                .map(|(t, v)| if t.trim().is_empty() { v.name.clone() } else { t })
                .collect(),
            None => dataset.views.iter().map(|v| v.name.clone()).collect(),
        };
        if label_texts.len() != dataset.n_labels() {
            return Err(DatasetError::Manifest(format!(
                "{} label texts for {} labels",
                label_texts.len(),
                dataset.n_labels()
            )));
        }
        if let Some(j) = label_texts.iter().position(|t| t.trim().is_empty()) {
            return Err(DatasetError::Manifest(format!("label text {j} is empty")));
        }
        let feature_texts = dataset
            .views
            .iter()
            .map(|v| {
                (0..v.dim())
                    .map(|m| match v.feature_names.get(m) {
                        Some(name) if !is_bare_number(name) => name.clone(),
                        _ => pseudo_name(&v.name, m),
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            view_texts,
            feature_texts,
            label_texts,
        })
    }

    pub fn feature_text(&self, index: &FeatureIndex, global: usize) -> &str {
        let r = index.locate(global).expect("feature id out of range");
        &self.feature_texts[r.view][r.local]
    }
}

/// Surrogate description `"<view> feature <m+1>"` for a feature at local
/// index `m`.
pub fn pseudo_name(view_name: &str, local_index: usize) -> String {
    format!("{view_name} feature {}", local_index + 1)
}

/// Empty, all digits, or one alphabetic character followed by digits.
pub fn is_bare_number(name: &str) -> bool {
    let name = name.trim();
    if name.is_empty() {
        return true;
    }
    let mut chars = name.chars();
    let first = chars.next().unwrap();
    let rest = chars.as_str();
    if first.is_ascii_digit() {
        return rest.chars().all(|c| c.is_ascii_digit());
    }
    first.is_alphabetic() && !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TextSource {
    Inline(Vec<String>),
    File(PathBuf),
}

impl TextSource {
    fn resolve(&self, base: &Path) -> Result<Vec<String>> {
        match self {
            TextSource::Inline(v) => Ok(v.clone()),
            TextSource::File(p) => {
                let path = base.join(p);
                let text = read_file(&path)?;
                Ok(text.lines().map(|l| l.trim().to_string()).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub name: String,
    pub matrix: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_texts: Option<TextSource>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub views: Vec<ViewEntry>,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_texts: Option<TextSource>,
    pub label_texts: TextSource,
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::MissingFile {
            path: path.to_path_buf(),
        },
        _ => DatasetError::Io(e),
    })
}

/// Parses a comma-delimited real matrix; empty lines are skipped.
pub fn parse_matrix(text: &str, path: &Path) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let start = data.len();
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| err(format!("cannot parse `{}` as a number", cell.trim())))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value `{}`", cell.trim())));
            }
            data.push(v);
        }
        let width = data.len() - start;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(err(format!("expected {c} columns, found {width}")));
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Ok(Array2::from_shape_vec((rows, cols), data).expect("row widths checked"))
}

fn parse_labels(text: &str, path: &Path) -> Result<Array2<u8>> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let start = data.len();
        for cell in line.split(',') {
            let cell = cell.trim();
            let v = match cell.parse::<f64>() {
                Ok(0.0) => 0,
                Ok(1.0) => 1,
                Ok(_) => {
                    return Err(DatasetError::NonBinaryLabel {
                        path: path.to_path_buf(),
                        line: i + 1,
                        value: cell.to_string(),
                    })
                }
                Err(_) => {
                    return Err(DatasetError::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: format!("cannot parse `{cell}` as a label"),
                    })
                }
            };
            data.push(v);
        }
        let width = data.len() - start;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(DatasetError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected {c} columns, found {width}"),
                });
            }
            _ => {}
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, cols.unwrap_or(0)), data).expect("row widths checked"))
}

/// Loads and validates a dataset and its text catalog from a manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<(MultiViewDataset, TextCatalog)> {
    let text = read_file(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: manifest_path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let labels_path = base.join(&manifest.labels);
    let labels = parse_labels(&read_file(&labels_path)?, &labels_path)?;

    let mut views = Vec::with_capacity(manifest.views.len());
    for (view_id, entry) in manifest.views.iter().enumerate() {
        let path = base.join(&entry.matrix);
        let matrix = parse_matrix(&read_file(&path)?, &path)?;
        let feature_names = match &entry.feature_texts {
            Some(src) => {
                let names = src.resolve(base)?;
                if names.len() != matrix.ncols() {
                    return Err(DatasetError::Manifest(format!(
                        "view `{}`: {} feature texts for {} columns",
                        entry.name,
                        names.len(),
                        matrix.ncols()
                    )));
                }
                names
            }
            None => Vec::new(),
        };
        views.push(ViewBlock {
            view_id,
            name: entry.name.clone(),
            matrix,
            feature_names,
        });
    }

    let dataset = MultiViewDataset::new(views, labels)?;
    let view_texts = manifest
        .view_texts
        .as_ref()
        .map(|s| s.resolve(base))
        .transpose()?;
    let label_texts = manifest.label_texts.resolve(base)?;
    let catalog = TextCatalog::from_names(&dataset, view_texts, label_texts)?;
    Ok((dataset, catalog))
}

fn format_matrix<T: std::fmt::Display>(m: &Array2<T>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Writes `dataset` as a manifest plus per-view matrix files into `dir`.
/// Values are written in shortest round-trip form, so reloading is bit-exact.
pub fn write_dataset(
    dataset: &MultiViewDataset,
    catalog: &TextCatalog,
    dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for v in &dataset.views {
        let file = format!("view{}.csv", v.view_id);
        fs::write(dir.join(&file), format_matrix(&v.matrix))?;
        entries.push(ViewEntry {
            name: v.name.clone(),
            matrix: PathBuf::from(file),
            feature_texts: (!v.feature_names.is_empty())
                .then(|| TextSource::Inline(v.feature_names.clone())),
        });
    }
    fs::write(dir.join("labels.csv"), format_matrix(&dataset.labels))?;
    let manifest = Manifest {
        views: entries,
        labels: PathBuf::from("labels.csv"),
        view_texts: Some(TextSource::Inline(catalog.view_texts.clone())),
        label_texts: TextSource::Inline(catalog.label_texts.clone()),
    };
    let path = dir.join("manifest.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub seed: u64,
}

/// Seeded uniform shuffle of `0..n` followed by a prefix split with
/// `round(train_fraction * n)` training samples.
pub fn split(n: usize, train_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::Manifest(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(DatasetError::DegenerateSplit {
            train: n_train,
            test: n.saturating_sub(n_train),
        });
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test_ids = ids.split_off(n_train);
    Ok(SplitIndices {
        train_ids: ids,
        test_ids,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_dir(labels: &str, view: &str) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("v.csv"), view).unwrap();
        fs::write(dir.path().join("l.csv"), labels).unwrap();
        fs::write(
            dir.path().join("manifest.json"),
            r#"{"views":[{"name":"V","matrix":"v.csv"}],"labels":"l.csv","label_texts":["lab"]}"#,
        )
        .unwrap();
        dir
    }

    #[test]
    fn minimal_manifest_loads() {
        let dir = toy_dir("0\n1\n", "0.5\n1.5\n");
        let (ds, cat) = load_dataset(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(ds.n_features(), 1);
        assert_eq!(ds.n_samples(), 2);
        assert_eq!(ds.index.global(0, 0), Some(0));
        assert_eq!(cat.feature_texts[0][0], "V feature 1");
        assert_eq!(cat.view_texts, vec!["V".to_string()]);
    }

    #[test]
    fn short_label_file_names_view() {
        let dir = toy_dir("0\n", "0.5\n1.5\n");
        match load_dataset(&dir.path().join("manifest.json")) {
            Err(DatasetError::RowCountMismatch { view, view_rows, label_rows }) => {
                assert_eq!(view, "V");
                assert_eq!((view_rows, label_rows), (2, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_binary_label_rejected() {
        let dir = toy_dir("0\n2\n", "0.5\n1.5\n");
        assert!(matches!(
            load_dataset(&dir.path().join("manifest.json")),
            Err(DatasetError::NonBinaryLabel { line: 2, .. })
        ));
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = toy_dir("0\n1\n", "0.5\nabc\n");
        assert!(matches!(
            load_dataset(&dir.path().join("manifest.json")),
            Err(DatasetError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn nan_rejected() {
        let dir = toy_dir("0\n1\n", "0.5\nNaN\n");
        assert!(load_dataset(&dir.path().join("manifest.json")).is_err());
    }

    #[test]
    fn missing_matrix_file() {
        let dir = toy_dir("0\n1\n", "0.5\n1.5\n");
        fs::remove_file(dir.path().join("v.csv")).unwrap();
        assert!(matches!(
            load_dataset(&dir.path().join("manifest.json")),
            Err(DatasetError::MissingFile { .. })
        ));
    }

    #[test]
    fn pseudo_names() {
        assert_eq!(pseudo_name("GE", 0), "GE feature 1");
        assert_eq!(pseudo_name("Color Histogram", 63), "Color Histogram feature 64");
    }

    #[test]
    fn bare_number_pattern() {
        for s in ["", "  ", "17", "f17", "a3"] {
            assert!(is_bare_number(s), "{s:?}");
        }
        for s in ["puppy", "Att1", "f", "f1a", "ff17"] {
            assert!(!is_bare_number(s), "{s:?}");
        }
    }

    #[test]
    fn pseudo_naming_uses_local_index_not_digits() {
        let view = ViewBlock {
            view_id: 0,
            name: "PP".into(),
            matrix: Array2::zeros((2, 3)),
            feature_names: vec!["f17".into(), "eye".into(), "".into()],
        };
        let ds = MultiViewDataset::new(vec![view], array![[0u8], [1]]).unwrap();
        let cat = TextCatalog::from_names(&ds, None, vec!["dog".into()]).unwrap();
        assert_eq!(cat.feature_texts[0], vec!["PP feature 1", "eye", "PP feature 3"]);
    }

    #[test]
    fn feature_index_bijection() {
        let idx = FeatureIndex::new(&[3, 1, 4]);
        assert_eq!(idx.len(), 8);
        for g in 0..idx.len() {
            let r = idx.locate(g).unwrap();
            assert_eq!(idx.global(r.view, r.local), Some(g));
        }
        assert_eq!(idx.global(1, 1), None);
        assert_eq!(idx.view_range(2), 4..8);
    }

    #[test]
    fn split_cardinalities() {
        let s = split(10, 0.7, 42).unwrap();
        assert_eq!((s.train_ids.len(), s.test_ids.len()), (7, 3));
        let mut all: Vec<usize> = s.train_ids.iter().chain(&s.test_ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // round(0.7 * 2417) = round(1691.9)
        assert_eq!(split(2417, 0.7, 3).unwrap().train_ids.len(), 1692);
        assert_eq!(split(10, 0.7, 42).unwrap(), s);
    }

    #[test]
    fn split_degenerate() {
        assert!(matches!(split(1, 0.7, 0), Err(DatasetError::DegenerateSplit { .. })));
        assert!(split(10, 1.0, 0).is_err());
    }
}
