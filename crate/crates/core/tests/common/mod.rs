//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use hetsel::dataset::{MultiViewDataset, ViewBlock};
use hetsel::graph::{Edge, HeteroGraph, RelationKey};
use hetsel::dataset::FeatureIndex;
use hetsel::pipeline::{Mode, RunConfig};
use hetsel::semantic::{mock_score, ChatRequest, ChatTransport, TransportError};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn workspace_dir() -> PathBuf {
    crate_dir().join("../..")
}

pub fn toy_dir() -> PathBuf {
    crate_dir().join("tests/data/toy")
}

pub fn golden_dir() -> PathBuf {
    crate_dir().join("tests/golden")
}

pub fn yeast_manifest() -> PathBuf {
    workspace_dir().join("data/yeast/manifest.json")
}

/// Toy run configuration (see `tests/data/toy/run.json`) writing to `out`.
pub fn toy_config(mode: Mode, out: &Path) -> RunConfig {
    let mut c = RunConfig::from_file(&toy_dir().join("run.json")).expect("toy config");
    c.manifest = toy_dir().join("manifest.json");
    c.mode = mode;
    c.output_dir = out.to_path_buf();
    c
}

/// Compares `actual` with a committed golden file, or rewrites the file
/// when `HETSEL_BLESS` is set.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_dir().join(name);
    if std::env::var_os("HETSEL_BLESS").is_some() {
        std::fs::create_dir_all(golden_dir()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return Ok(());
    }
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!("{} differs from the committed golden file", path.display()))
    }
}

/// Random dataset with Gaussian features and Bernoulli labels; some
/// features are shifted by a label so MI is not uniformly tiny.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, dims: &[usize], c: usize) -> MultiViewDataset {
    let labels = Array2::from_shape_fn((n, c), |_| u8::from(rng.random_bool(0.4)));
    let views = dims
        .iter()
        .enumerate()
        .map(|(v, &d)| {
            let shifts: Vec<(usize, f64)> = (0..d).map(|_| (rng.random_range(0..c), rng.random_range(0.0..2.0))).collect();
            let matrix = Array2::from_shape_fn((n, d), |(i, j)| {
                let (l, s) = shifts[j];
                let noise: f64 = rng.random_range(-1.0..1.0);
                noise + s * labels[[i, l]] as f64
            });
            ViewBlock { view_id: v, name: format!("V{v}"), matrix, feature_names: Vec::new() }
        })
        .collect();
    MultiViewDataset::new(views, labels).expect("valid random dataset")
}

fn sorted(mut edges: Vec<Edge>) -> Vec<Edge> {
    edges.sort_by_key(|a| (a.source, a.target));
    edges
}

/// Graph over `dims` features and `c` labels with every relation type
/// populated at random (undirected relations stored both ways).
pub fn random_full_graph(seed: u64, dims: &[usize], c: usize) -> HeteroGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = FeatureIndex::new(dims);
    let (d, nv) = (index.len(), dims.len());
    let mut g = HeteroGraph::empty(&index, nv, c);
    g.relations.insert(
        RelationKey::FvBelongs,
        (0..d).map(|f| Edge { source: f, target: index.view_of(f), weight: 1.0 }).collect(),
    );
    for key in RelationKey::ALL.into_iter().filter(|&k| k != RelationKey::FvBelongs) {
        let (ns, nt) = match key {
            RelationKey::FlStat | RelationKey::FlSem => (d, c),
            RelationKey::FfStat => (d, d),
            RelationKey::VlStat | RelationKey::VlSem => (nv, c),
            _ => (c, c),
        };
        loop {
            let mut edges = Vec::new();
            for s in 0..ns {
                for t in 0..nt {
                    if key.is_undirected() && s >= t {
                        continue;
                    }
                    if rng.random_bool(0.5) {
                        let w = rng.random_range(0.05..1.0);
                        edges.push(Edge { source: s, target: t, weight: w });
                        if key.is_undirected() {
                            edges.push(Edge { source: t, target: s, weight: w });
                        }
                    }
                }
            }
            if !edges.is_empty() {
                g.relations.insert(key, sorted(edges));
                break;
            }
        }
    }
    g
}

/// One view, features `eye` (0) and `whisker` (1), labels `dog` (0) and
/// `cat` (1). `eye` links only to dog, `whisker` only to cat; dog and cat
/// share a strong ll_sem edge when `with_ll` is set.
pub fn dog_cat_eye_graph(with_ll: bool) -> HeteroGraph {
    let index = FeatureIndex::new(&[2]);
    let mut g = HeteroGraph::empty(&index, 1, 2);
    let e = |s, t, w| Edge { source: s, target: t, weight: w };
    g.relations.insert(RelationKey::FvBelongs, vec![e(0, 0, 1.0), e(1, 0, 1.0)]);
    g.relations.insert(RelationKey::FlSem, vec![e(0, 0, 0.9), e(1, 1, 0.6)]);
    if with_ll {
        g.relations.insert(RelationKey::LlSem, vec![e(0, 1, 0.95), e(1, 0, 0.95)]);
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Fl,
    Vl,
    Ll,
}

/// What the fake model was asked: pair kind plus `(id, text)` objects.
pub struct ParsedPrompt {
    pub kind: Kind,
    pub views: Vec<(usize, String)>,
    pub features: Vec<(usize, String)>,
    pub labels: Vec<(usize, String)>,
}

pub fn parse_prompt(prompt: &str) -> ParsedPrompt {
    let kind = if prompt.contains("\"other_label\"") {
        Kind::Ll
    } else if prompt.contains("{\"view\"") {
        Kind::Vl
    } else {
        Kind::Fl
    };
    let mut out = ParsedPrompt { kind, views: Vec::new(), features: Vec::new(), labels: Vec::new() };
    for line in prompt.lines() {
        let Some(rest) = line.strip_prefix('[') else { continue };
        let Some((tag, text)) = rest.split_once("] ") else { continue };
        let id: usize = tag[1..].parse().unwrap();
        match &tag[..1] {
            "v" => out.views.push((id, text.to_string())),
            "f" => {
                let text = text.rsplit_once(" (view ").map(|(t, _)| t).unwrap_or(text);
                out.features.push((id, text.to_string()));
            }
            "l" => out.labels.push((id, text.to_string())),
            _ => {}
        }
    }
    out
}

/// Scripted stand-in for a chat model: answers every prompt with the
/// Jaccard mock score of each requested pair (ids and texts parsed from the
/// prompt). Failure injection knobs exercise the agent's recovery paths.
#[derive(Default)]
pub struct FakeLlm {
    pub calls: AtomicUsize,
    /// The first `fail_first` calls return a transport error.
    pub fail_first: usize,
    /// The first `malformed_first` successful calls return prose.
    pub malformed_first: usize,
    /// Pairs `(a, b)` dropped from multi-pair replies.
    pub omit: Vec<(usize, usize)>,
    pub prompts: Mutex<Vec<String>>,
    /// Calls that got past the injected transport failures.
    pub answered: AtomicUsize,
}

impl FakeLlm {
    pub fn reply_for(&self, prompt: &str) -> String {
        let p = parse_prompt(prompt);
        let mut items = Vec::new();
        let single = match p.kind {
            Kind::Fl => p.features.len() * p.labels.len() == 1,
            Kind::Vl => p.views.len() * p.labels.len() == 1,
            Kind::Ll => p.labels.len() == 2,
        };
        let mut push = |a: usize, b: usize, ta: &str, tb: &str, ka: &str, pa: char, kb: &str, pb: char| {
            if !single && self.omit.contains(&(a, b)) {
                return;
            }
            items.push(format!(
                "{{\"{ka}\": \"{pa}{a}\", \"{kb}\": \"{pb}{b}\", \"score\": {}}}",
                mock_score(ta, tb)
            ));
        };
        match p.kind {
            Kind::Fl => {
                for (f, ft) in &p.features {
                    for (l, lt) in &p.labels {
                        push(*f, *l, ft, lt, "feature", 'f', "label", 'l');
                    }
                }
            }
            Kind::Vl => {
                for (v, vt) in &p.views {
                    for (l, lt) in &p.labels {
                        push(*v, *l, vt, lt, "view", 'v', "label", 'l');
                    }
                }
            }
            Kind::Ll => {
                for (i, (a, at)) in p.labels.iter().enumerate() {
                    for (b, bt) in &p.labels[i + 1..] {
                        push(*a, *b, at, bt, "label", 'l', "other_label", 'l');
                    }
                }
            }
        }
        format!("[{}]", items.join(", "))
    }
}

impl ChatTransport for FakeLlm {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts.lock().unwrap().push(request.user_prompt().to_string());
        if n < self.fail_first {
            return Err(TransportError(format!("injected failure {n}")));
        }
        if self.answered.fetch_add(1, Ordering::SeqCst) < self.malformed_first {
            return Ok("Sure! Here are the scores you asked for.".into());
        }
        Ok(self.reply_for(request.user_prompt()))
    }
}

/// Transport that fails the test if it is ever used.
pub struct Tripwire;

impl ChatTransport for Tripwire {
    fn complete(&self, _request: &ChatRequest) -> Result<String, TransportError> {
        panic!("network transport used in an offline mode");
    }
}
