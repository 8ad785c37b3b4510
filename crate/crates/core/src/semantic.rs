//! LLM scoring agent for semantic relevance between feature, view and label
//! descriptions.
//!
//! Prompts are assembled from five parts (role, views, features, labels,
//! task) plus an output-format instruction asking for a JSON list of scored
//! pairs. Replies are parsed, clamped to `[0, 1]` and written through an
//! append-only score cache. [`MockScorer`] is a deterministic offline
//! stand-in based on token-set Jaccard similarity.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{FeatureIndex, TextCatalog};

pub const ROLE_TEXT: &str = "You are a data scientist working on multi-view multi-label feature selection. Your goal is dedicated to exploring the impact of semantic relationships among features, labels, and views on feature selection results.";

pub const DEFAULT_BATCH_SIZE: usize = 20;

const STRICT_REMINDER: &str = "Your previous reply could not be parsed. Reply with ONLY the JSON array described above: no prose, no explanations, no code fences.";

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("batch of {size} objects exceeds the maximum of {max}")]
    BatchTooLarge { size: usize, max: usize },
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("response is missing {} pair(s), first {:?}", .0.len(), .0.first())]
    MissingPairInResponse(Vec<PairId>),
    #[error("semantic scoring requires an LLM endpoint: {0}")]
    NotConfigured(String),
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairKind {
    FeatureLabel,
    ViewLabel,
    LabelLabel,
}

/// One scored pair. Label-label pairs are stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairId {
    pub kind: PairKind,
    pub a: usize,
    pub b: usize,
}

impl PairId {
    pub fn new(kind: PairKind, a: usize, b: usize) -> Self {
        match kind {
            PairKind::LabelLabel if a > b => Self { kind, a: b, b: a },
            _ => Self { kind, a, b },
        }
    }

    fn tag(&self) -> String {
        let (p, q) = match self.kind {
            PairKind::FeatureLabel => ('f', 'l'),
            PairKind::ViewLabel => ('v', 'l'),
            PairKind::LabelLabel => ('l', 'l'),
        };
        format!("{p}{}-{q}{}", self.a, self.b)
    }
}

/// A described object in a prompt: its numeric id and text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Described {
    pub id: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFeature {
    pub id: usize,
    pub view: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub role_text: String,
    pub views: Vec<Described>,
    pub features: Vec<PromptFeature>,
    pub labels: Vec<Described>,
    pub task_text: String,
    pub pair_kind: PairKind,
}

impl PromptSpec {
    pub fn new(
        pair_kind: PairKind,
        views: Vec<Described>,
        features: Vec<PromptFeature>,
        labels: Vec<Described>,
    ) -> Self {
        Self {
            role_text: ROLE_TEXT.to_string(),
            views,
            features,
            labels,
            task_text: default_task(pair_kind).to_string(),
            pair_kind,
        }
    }

    /// Every pair this prompt asks to be scored, in prompt order.
    pub fn pairs(&self) -> Vec<PairId> {
        match self.pair_kind {
            PairKind::FeatureLabel => self
                .features
                .iter()
                .flat_map(|f| self.labels.iter().map(move |l| PairId::new(PairKind::FeatureLabel, f.id, l.id)))
                .collect(),
            PairKind::ViewLabel => self
                .views
                .iter()
                .flat_map(|v| self.labels.iter().map(move |l| PairId::new(PairKind::ViewLabel, v.id, l.id)))
                .collect(),
            PairKind::LabelLabel => {
                let mut out = Vec::new();
                for (i, a) in self.labels.iter().enumerate() {
                    for b in &self.labels[i + 1..] {
                        out.push(PairId::new(PairKind::LabelLabel, a.id, b.id));
                    }
                }
                out
            }
        }
    }

    /// Number of objects whose pairs are scored, bounded by the batch limit.
    fn batch_size(&self) -> usize {
        match self.pair_kind {
            PairKind::FeatureLabel => self.features.len(),
            PairKind::ViewLabel => self.views.len(),
            PairKind::LabelLabel => self.labels.len(),
        }
    }

    fn text_of(&self, kind: char, id: usize) -> Option<&str> {
        match kind {
            'f' => self.features.iter().find(|f| f.id == id).map(|f| f.text.as_str()),
            'v' => self.views.iter().find(|v| v.id == id).map(|v| v.text.as_str()),
            _ => self.labels.iter().find(|l| l.id == id).map(|l| l.text.as_str()),
        }
    }

    /// Spec asking for a single pair, with the same role and task.
    fn single(&self, pair: PairId) -> PromptSpec {
        let mut spec = self.clone();
        match pair.kind {
            PairKind::FeatureLabel => {
                spec.features.retain(|f| f.id == pair.a);
                let view = spec.features.first().map(|f| f.view);
                spec.views.retain(|v| Some(v.id) == view);
                spec.labels.retain(|l| l.id == pair.b);
            }
            PairKind::ViewLabel => {
                spec.views.retain(|v| v.id == pair.a);
                spec.labels.retain(|l| l.id == pair.b);
            }
            PairKind::LabelLabel => spec.labels.retain(|l| l.id == pair.a || l.id == pair.b),
        }
        spec
    }
}

pub fn default_task(kind: PairKind) -> &'static str {
    match kind {
        PairKind::FeatureLabel => "Identify which features are semantically relevant to, or redundant with respect to, each label. For every (feature, label) pair listed above, assign a semantic relevance score in the range [0, 1], where 0 means unrelated and 1 means the feature directly expresses the meaning of the label.",
        PairKind::ViewLabel => "Assess how semantically relevant each view, as a whole, is to each label. For every (view, label) pair listed above, assign a semantic relevance score in the range [0, 1], where 0 means unrelated and 1 means the view directly captures the meaning of the label.",
        PairKind::LabelLabel => "Assess the semantic similarity between labels. For every unordered pair of distinct labels listed above, assign a semantic relevance score in the range [0, 1], where 0 means unrelated and 1 means the labels have essentially the same meaning.",
    }
}

fn output_format(kind: PairKind) -> &'static str {
    match kind {
        PairKind::FeatureLabel => "Output format: reply with only a JSON array containing exactly one object per (feature, label) pair, of the form {\"feature\": \"f<id>\", \"label\": \"l<id>\", \"score\": <number in [0, 1]>}. Use the bracketed ids given above. Do not add any other text.",
        PairKind::ViewLabel => "Output format: reply with only a JSON array containing exactly one object per (view, label) pair, of the form {\"view\": \"v<id>\", \"label\": \"l<id>\", \"score\": <number in [0, 1]>}. Use the bracketed ids given above. Do not add any other text.",
        PairKind::LabelLabel => "Output format: reply with only a JSON array containing exactly one object per unordered pair of distinct labels, of the form {\"label\": \"l<id>\", \"other_label\": \"l<id>\", \"score\": <number in [0, 1]>}. Use the bracketed ids given above. Do not add any other text.",
    }
}

/// Renders the prompt. Identical specs give identical bytes.
pub fn build_prompt(spec: &PromptSpec, max_batch: usize) -> Result<String, SemanticError> {
    if spec.batch_size() > max_batch {
        return Err(SemanticError::BatchTooLarge {
            size: spec.batch_size(),
            max: max_batch,
        });
    }
    let mut p = String::new();
    p.push_str("Role:\n");
    p.push_str(&spec.role_text);
    p.push_str("\n\nViews:\n");
    for v in &spec.views {
        p.push_str(&format!("[v{}] {}\n", v.id, v.text));
    }
    if spec.views.is_empty() {
        p.push_str("(none)\n");
    }
    p.push_str("\nFeatures:\n");
    for f in &spec.features {
        p.push_str(&format!("[f{}] {} (view v{})\n", f.id, f.text, f.view));
    }
    if spec.features.is_empty() {
        p.push_str("(none)\n");
    }
    p.push_str("\nLabels:\n");
    for l in &spec.labels {
        p.push_str(&format!("[l{}] {}\n", l.id, l.text));
    }
    p.push_str("\nTask:\n");
    p.push_str(&spec.task_text);
    p.push_str("\n\n");
    p.push_str(output_format(spec.pair_kind));
    p.push('\n');
    Ok(p)
}

pub fn digest_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for part in parts {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub prompt_digest: String,
}

/// LLM scores in `[0, 1]`. Label-label entries are stored once per unordered
/// pair with the smaller id first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<ScoreRecord>", from = "Vec<ScoreRecord>")]
pub struct SemanticScoreSet {
    /// (global feature id, label id)
    pub fl: BTreeMap<(usize, usize), f64>,
    /// (view id, label id)
    pub vl: BTreeMap<(usize, usize), f64>,
    /// (label i, label j), i < j
    pub ll: BTreeMap<(usize, usize), f64>,
    pub provenance: BTreeMap<PairId, Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub kind: PairKind,
    pub a: usize,
    pub b: usize,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl From<SemanticScoreSet> for Vec<ScoreRecord> {
    fn from(s: SemanticScoreSet) -> Self {
        s.iter()
            .map(|(pair, score)| ScoreRecord {
                kind: pair.kind,
                a: pair.a,
                b: pair.b,
                score,
                provenance: s.provenance.get(&pair).cloned(),
            })
            .collect()
    }
}

impl From<Vec<ScoreRecord>> for SemanticScoreSet {
    fn from(records: Vec<ScoreRecord>) -> Self {
        let mut s = SemanticScoreSet::default();
        for r in records {
            let pair = PairId::new(r.kind, r.a, r.b);
            s.insert(pair, r.score, r.provenance);
        }
        s
    }
}

impl SemanticScoreSet {
    pub fn get(&self, pair: PairId) -> Option<f64> {
        self.map(pair.kind).get(&(pair.a, pair.b)).copied()
    }

    fn map(&self, kind: PairKind) -> &BTreeMap<(usize, usize), f64> {
        match kind {
            PairKind::FeatureLabel => &self.fl,
            PairKind::ViewLabel => &self.vl,
            PairKind::LabelLabel => &self.ll,
        }
    }

    pub fn insert(&mut self, pair: PairId, score: f64, provenance: Option<Provenance>) {
        let map = match pair.kind {
            PairKind::FeatureLabel => &mut self.fl,
            PairKind::ViewLabel => &mut self.vl,
            PairKind::LabelLabel => &mut self.ll,
        };
        map.insert((pair.a, pair.b), score);
        if let Some(p) = provenance {
            self.provenance.insert(pair, p);
        }
    }

    pub fn extend(&mut self, other: SemanticScoreSet) {
        self.fl.extend(other.fl);
        self.vl.extend(other.vl);
        self.ll.extend(other.ll);
        self.provenance.extend(other.provenance);
    }

    pub fn len(&self) -> usize {
        self.fl.len() + self.vl.len() + self.ll.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All scores in kind order, then pair order.
    pub fn iter(&self) -> impl Iterator<Item = (PairId, f64)> + '_ {
        let fl = self.fl.iter().map(|(&(a, b), &s)| (PairId::new(PairKind::FeatureLabel, a, b), s));
        let vl = self.vl.iter().map(|(&(a, b), &s)| (PairId::new(PairKind::ViewLabel, a, b), s));
        let ll = self.ll.iter().map(|(&(a, b), &s)| (PairId::new(PairKind::LabelLabel, a, b), s));
        fl.chain(vl).chain(ll)
    }
}

fn tokens(text: &str, synonyms: &HashMap<String, String>) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| synonyms.get(t).cloned().unwrap_or_else(|| t.to_string()))
        .collect()
}

/// Token-set Jaccard similarity with optional synonym canonicalization.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScorer {
    /// token → canonical token
    pub synonyms: HashMap<String, String>,
}

impl MockScorer {
    pub const MODEL: &'static str = "mock-jaccard";

    pub fn with_synonyms<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        Self {
            synonyms: pairs
                .into_iter()
                .map(|(a, b)| (a.into().to_lowercase(), b.into().to_lowercase()))
                .collect(),
        }
    }

    pub fn score(&self, text_a: &str, text_b: &str) -> f64 {
        let a = tokens(text_a, &self.synonyms);
        let b = tokens(text_b, &self.synonyms);
        let union = a.union(&b).count();
        if union == 0 {
            return 0.0;
        }
        a.intersection(&b).count() as f64 / union as f64
    }

    fn score_spec(&self, spec: &PromptSpec, prompt_digest: &str) -> SemanticScoreSet {
        let mut out = SemanticScoreSet::default();
        for pair in spec.pairs() {
            let (ka, kb) = match pair.kind {
                PairKind::FeatureLabel => ('f', 'l'),
                PairKind::ViewLabel => ('v', 'l'),
                PairKind::LabelLabel => ('l', 'l'),
            };
            let a = spec.text_of(ka, pair.a).unwrap_or_default();
            let b = spec.text_of(kb, pair.b).unwrap_or_default();
            let provenance = Provenance {
                model: Self::MODEL.to_string(),
                prompt_digest: prompt_digest.to_string(),
            };
            out.insert(pair, self.score(a, b), Some(provenance));
        }
        out
    }
}

/// Free-function form of [`MockScorer::score`] without synonyms.
pub fn mock_score(text_a: &str, text_b: &str) -> f64 {
    MockScorer::default().score(text_a, text_b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

impl ChatRequest {
    pub fn user_prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Something that answers chat-completion requests with the reply text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

/// OpenAI-compatible `/chat/completions` endpoint over HTTPS.
pub struct HttpTransport {
    url: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            api_key: api_key.into(),
            client,
        })
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(request)
            .send()
            .map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status();
        let body: serde_json::Value = resp.json().map_err(|e| TransportError(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError(format!("HTTP {status}: {body}")));
        }
        body.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| TransportError(format!("no message content in reply: {body}")))
    }
}

/// One recorded request/reply exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request: ChatRequest,
    pub response: String,
}

/// Answers from recorded transcripts, keyed by the user prompt text.
pub struct ReplayTransport {
    replies: HashMap<String, String>,
}

impl ReplayTransport {
    pub fn new(entries: Vec<TranscriptEntry>) -> Self {
        Self {
            replies: entries
                .into_iter()
                .map(|e| (e.request.user_prompt().to_string(), e.response))
                .collect(),
        }
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let entries: Vec<TranscriptEntry> = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self::new(entries))
    }
}

impl ChatTransport for ReplayTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        self.replies
            .get(request.user_prompt())
            .cloned()
            .ok_or_else(|| TransportError("no recorded reply for this prompt".into()))
    }
}

/// Wraps a transport and keeps every exchange for later replay.
pub struct RecordingTransport<T> {
    inner: T,
    log: Mutex<Vec<TranscriptEntry>>,
}

impl<T: ChatTransport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.log.lock().unwrap().clone()
    }
}

impl<T: ChatTransport> ChatTransport for RecordingTransport<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let response = self.inner.complete(request)?;
        self.log.lock().unwrap().push(TranscriptEntry {
            request: request.clone(),
            response: response.clone(),
        });
        Ok(response)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub score: f64,
    pub model: String,
    pub timestamp: u64,
}

/// Persistent append-only score cache, one JSON record per line.
///
/// Each record is written with a single `write` on a file opened in append
/// mode, so concurrent writers never interleave partial lines.
pub struct ScoreCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, f64>>,
    file: Mutex<File>,
    corrupt: usize,
}

impl ScoreCache {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).read(true).open(path)?;
        let mut entries = HashMap::new();
        let mut corrupt = 0;
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CacheRecord>(&line) {
                Ok(r) if r.score.is_finite() => {
                    entries.insert(r.key, r.score);
                }
                _ => {
                    corrupt += 1;
                    log::warn!("{}:{}: skipping corrupt cache entry", path.display(), i + 1);
                }
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
            file: Mutex::new(file),
            corrupt,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Number of unreadable lines skipped at open.
    pub fn corrupt_entries(&self) -> usize {
        self.corrupt
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.lock().unwrap().get(key).copied()
    }

    pub fn put(&self, key: &str, score: f64, model: &str) -> std::io::Result<()> {
        let record = CacheRecord {
            key: key.to_string(),
            score,
            model: model.to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        {
            let mut f = self.file.lock().unwrap();
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        self.entries.lock().unwrap().insert(record.key, score);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn cache_key(model: &str, prompt_digest: &str, pair: PairId) -> String {
    digest_hex(&[model, prompt_digest, &pair.tag()])
}

/// Token bucket: `capacity` burst, refilled at `per_second`.
pub struct RateLimiter {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(per_second: f64, capacity: f64) -> Self {
        Self {
            capacity,
            per_second,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap();
                let now = Instant::now();
                let refill = now.duration_since(s.1).as_secs_f64() * self.per_second;
                s.0 = (s.0 + refill).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.per_second
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub max_attempts: usize,
    pub backoff_ms: u64,
    pub concurrency: usize,
    pub requests_per_second: Option<f64>,
    pub batch_size: usize,
    pub temperature: Option<f64>,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "HETSEL_LLM_API_KEY".into(),
            max_attempts: 3,
            backoff_ms: 500,
            concurrency: 4,
            requests_per_second: Some(2.0),
            batch_size: DEFAULT_BATCH_SIZE,
            temperature: Some(0.0),
            timeout_secs: 120,
        }
    }
}

impl LlmConfig {
    /// HTTP transport using the key from `api_key_env`.
    pub fn http_transport(&self) -> Result<HttpTransport, SemanticError> {
        let key = std::env::var(&self.api_key_env).map_err(|_| {
            SemanticError::NotConfigured(format!("environment variable {} is not set", self.api_key_env))
        })?;
        HttpTransport::new(&self.endpoint, key, Duration::from_secs(self.timeout_secs))
            .map_err(|e| SemanticError::NotConfigured(e.0))
    }
}

pub struct LlmAgent {
    transport: Arc<dyn ChatTransport>,
    config: LlmConfig,
    cache: Option<Arc<ScoreCache>>,
    limiter: Option<RateLimiter>,
}

impl LlmAgent {
    pub fn new(transport: Arc<dyn ChatTransport>, config: LlmConfig, cache: Option<Arc<ScoreCache>>) -> Self {
        let limiter = config
            .requests_per_second
            .map(|r| RateLimiter::new(r, config.concurrency.max(1) as f64));
        Self {
            transport,
            config,
            cache,
            limiter,
        }
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    fn request(&self, prompt: &str) -> ChatRequest {
        ChatRequest {
            model: self.config.model.clone(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: "You answer with machine-readable JSON only.".into(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: prompt.to_string(),
                },
            ],
            temperature: self.config.temperature,
        }
    }

    /// Sends one prompt, retrying transport failures with exponential backoff.
    fn query(&self, prompt: &str) -> Result<String, SemanticError> {
        let request = self.request(prompt);
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            match self.transport.complete(&request) {
                Ok(reply) => return Ok(reply),
                Err(e) => {
                    log::warn!("LLM request failed (attempt {}/{attempts}): {e}", attempt + 1);
                    last = e.0;
                    if attempt + 1 < attempts && self.config.backoff_ms > 0 {
                        std::thread::sleep(Duration::from_millis(self.config.backoff_ms << attempt));
                    }
                }
            }
        }
        Err(SemanticError::Transport {
            attempts,
            message: last,
        })
    }

    /// Queries and parses; a malformed reply is re-prompted once with a
    /// stricter format reminder.
    fn query_parsed(&self, spec: &PromptSpec, prompt: &str) -> Result<BTreeMap<PairId, f64>, SemanticError> {
        let reply = self.query(prompt)?;
        match parse_response(&reply, spec.pair_kind) {
            Ok(scores) => Ok(scores),
            Err(e) => {
                log::warn!("malformed LLM reply ({e}); re-prompting");
                let strict = format!("{prompt}\n{STRICT_REMINDER}\n");
                parse_response(&self.query(&strict)?, spec.pair_kind)
            }
        }
    }

    pub fn score_pairs(&self, spec: &PromptSpec) -> Result<SemanticScoreSet, SemanticError> {
        let prompt = build_prompt(spec, self.config.batch_size)?;
        let digest = digest_hex(&[&prompt]);
        let model = self.config.model.as_str();
        let pairs = spec.pairs();
        let provenance = Provenance {
            model: model.to_string(),
            prompt_digest: digest.clone(),
        };

        let mut found: BTreeMap<PairId, f64> = BTreeMap::new();
        if let Some(cache) = &self.cache {
            for &p in &pairs {
                if let Some(s) = cache.get(&cache_key(model, &digest, p)) {
                    found.insert(p, s);
                }
            }
        }

        if found.len() < pairs.len() {
            let mut reply = self.query_parsed(spec, &prompt)?;
            let missing: Vec<PairId> = pairs
                .iter()
                .copied()
                .filter(|p| !found.contains_key(p) && !reply.contains_key(p))
                .collect();
            for &p in &missing {
                log::warn!("pair {} missing from reply; querying it alone", p.tag());
                let single = spec.single(p);
                let single_prompt = build_prompt(&single, self.config.batch_size)?;
                let again = self.query_parsed(&single, &single_prompt)?;
                match again.get(&p) {
                    Some(&s) => {
                        reply.insert(p, s);
                    }
                    None => return Err(SemanticError::MissingPairInResponse(vec![p])),
                }
            }
            for &p in &pairs {
                if found.contains_key(&p) {
                    continue;
                }
                let raw = reply[&p];
                let score = clamp_score(raw, p);
                if let Some(cache) = &self.cache {
                    cache.put(&cache_key(model, &digest, p), score, model)?;
                }
                found.insert(p, score);
            }
        }

        let mut out = SemanticScoreSet::default();
        for p in pairs {
            out.insert(p, found[&p], Some(provenance.clone()));
        }
        Ok(out)
    }
}

fn clamp_score(raw: f64, pair: PairId) -> f64 {
    if (0.0..=1.0).contains(&raw) {
        return raw;
    }
    log::warn!("score {raw} for {} outside [0, 1]; clamping", pair.tag());
    if raw.is_nan() {
        0.0
    } else {
        raw.clamp(0.0, 1.0)
    }
}

fn parse_id(v: &serde_json::Value, prefix: char) -> Option<usize> {
    match v {
        serde_json::Value::Number(n) => n.as_u64().map(|x| x as usize),
        serde_json::Value::String(s) => {
            let s = s.trim().trim_start_matches('[').trim_end_matches(']');
            let s = s.strip_prefix(prefix).or_else(|| s.strip_prefix(prefix.to_ascii_uppercase())).unwrap_or(s);
            s.parse().ok()
        }
        _ => None,
    }
}

fn parse_score(v: &serde_json::Value) -> Option<f64> {
    match v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Extracts scored pairs from a reply. Code fences and text around the JSON
/// array are tolerated; anything else that is not a list of well-formed
/// objects is a [`SemanticError::MalformedResponse`].
pub fn parse_response(reply: &str, kind: PairKind) -> Result<BTreeMap<PairId, f64>, SemanticError> {
    let start = reply.find('[');
    let end = reply.rfind(']');
    let body = match (start, end) {
        (Some(s), Some(e)) if s < e => &reply[s..=e],
        _ => return Err(SemanticError::MalformedResponse("no JSON array in reply".into())),
    };
    let items: Vec<serde_json::Value> =
        serde_json::from_str(body).map_err(|e| SemanticError::MalformedResponse(e.to_string()))?;
    let (ka, pa, kb, pb) = match kind {
        PairKind::FeatureLabel => ("feature", 'f', "label", 'l'),
        PairKind::ViewLabel => ("view", 'v', "label", 'l'),
        PairKind::LabelLabel => ("label", 'l', "other_label", 'l'),
    };
    let mut out = BTreeMap::new();
    for item in &items {
        let bad = || SemanticError::MalformedResponse(format!("bad entry {item}"));
        let a = item.get(ka).and_then(|v| parse_id(v, pa)).ok_or_else(bad)?;
        let b = item.get(kb).and_then(|v| parse_id(v, pb)).ok_or_else(bad)?;
        let score = item.get("score").and_then(parse_score).ok_or_else(bad)?;
        if kind == PairKind::LabelLabel && a == b {
            continue;
        }
        out.insert(PairId::new(kind, a, b), score);
    }
    Ok(out)
}

/// Scoring back end: the LLM agent or the offline mock.
pub enum ScorerHandle {
    Mock(MockScorer),
    Llm(LlmAgent),
}

impl ScorerHandle {
    pub fn model(&self) -> &str {
        match self {
            ScorerHandle::Mock(_) => MockScorer::MODEL,
            ScorerHandle::Llm(a) => &a.config.model,
        }
    }

    fn batch_size(&self) -> usize {
        match self {
            ScorerHandle::Mock(_) => DEFAULT_BATCH_SIZE,
            ScorerHandle::Llm(a) => a.config.batch_size,
        }
    }

    fn concurrency(&self) -> usize {
        match self {
            ScorerHandle::Mock(_) => 1,
            ScorerHandle::Llm(a) => a.config.concurrency.max(1),
        }
    }
}

/// Scores every pair requested by `spec`.
pub fn score_pairs(agent: &ScorerHandle, spec: &PromptSpec) -> Result<SemanticScoreSet, SemanticError> {
    match agent {
        ScorerHandle::Mock(m) => {
            let prompt = build_prompt(spec, agent.batch_size())?;
            Ok(m.score_spec(spec, &digest_hex(&[&prompt])))
        }
        ScorerHandle::Llm(a) => a.score_pairs(spec),
    }
}

/// Prompt specs covering a whole dataset: feature batches against all
/// labels, one view-label prompt and one label-label prompt.
pub fn catalog_specs(
    index: &FeatureIndex,
    catalog: &TextCatalog,
    batch_size: usize,
    features: Option<&[usize]>,
) -> Vec<PromptSpec> {
    let views: Vec<Described> = catalog
        .view_texts
        .iter()
        .enumerate()
        .map(|(id, t)| Described { id, text: t.clone() })
        .collect();
    let labels: Vec<Described> = catalog
        .label_texts
        .iter()
        .enumerate()
        .map(|(id, t)| Described { id, text: t.clone() })
        .collect();
    let all: Vec<usize> = (0..index.len()).collect();
    let ids = features.unwrap_or(&all);

    let mut specs = Vec::new();
    for chunk in ids.chunks(batch_size.max(1)) {
        let feats: Vec<PromptFeature> = chunk
            .iter()
            .map(|&g| PromptFeature {
                id: g,
                view: index.view_of(g),
                text: catalog.feature_text(index, g).to_string(),
            })
            .collect();
        let used: BTreeSet<usize> = feats.iter().map(|f| f.view).collect();
        let batch_views = views.iter().filter(|v| used.contains(&v.id)).cloned().collect();
        specs.push(PromptSpec::new(PairKind::FeatureLabel, batch_views, feats, labels.clone()));
    }
    specs.push(PromptSpec::new(PairKind::ViewLabel, views, Vec::new(), labels.clone()));
    if labels.len() > 1 {
        specs.push(PromptSpec::new(PairKind::LabelLabel, Vec::new(), Vec::new(), labels));
    }
    specs
}

/// Scores all specs with up to the agent's concurrency in flight; the result
/// does not depend on completion order.
pub fn score_all(agent: &ScorerHandle, specs: &[PromptSpec]) -> Result<SemanticScoreSet, SemanticError> {
    let workers = agent.concurrency().min(specs.len()).max(1);
    let results: Vec<Mutex<Option<Result<SemanticScoreSet, SemanticError>>>> =
        specs.iter().map(|_| Mutex::new(None)).collect();
    if workers == 1 {
        for (spec, slot) in specs.iter().zip(&results) {
            *slot.lock().unwrap() = Some(score_pairs(agent, spec));
        }
    } else {
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= specs.len() {
                        break;
                    }
                    *results[i].lock().unwrap() = Some(score_pairs(agent, &specs[i]));
                });
            }
        });
    }
    let mut out = SemanticScoreSet::default();
    for slot in results {
        out.extend(slot.into_inner().unwrap().expect("every spec scored")?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fl_spec(n_features: usize, n_labels: usize) -> PromptSpec {
        let views = vec![Described { id: 0, text: "TextView".into() }];
        let features = (0..n_features)
            .map(|i| PromptFeature { id: i, view: 0, text: format!("word{i}") })
            .collect();
        let labels = (0..n_labels).map(|j| Described { id: j, text: format!("label{j}") }).collect();
        PromptSpec::new(PairKind::FeatureLabel, views, features, labels)
    }

    #[test]
    fn mock_scores() {
        assert_eq!(mock_score("dog", "dog"), 1.0);
        assert_eq!(mock_score("dog", "histogram"), 0.0);
        assert!((mock_score("red color histogram", "color of sky") - 0.2).abs() < 1e-15);
        assert_eq!(
            mock_score("color histogram of the image", "color histogram of the image"),
            1.0
        );
        let m = MockScorer::with_synonyms([("puppy", "dog")]);
        assert_eq!(m.score("puppy playing", "dog"), 0.5);
        assert_eq!(m.score("Puppy", "DOG"), 1.0);
    }

    #[test]
    fn prompt_layout() {
        let mut spec = fl_spec(1, 1);
        spec.features[0].text = "puppy".into();
        spec.labels[0].text = "dog".into();
        let p = build_prompt(&spec, 20).unwrap();
        assert!(p.starts_with("Role:\nYou are a data scientist working on multi-view multi-label feature selection."));
        let order = ["Role:", "Views:", "Features:", "Labels:", "Task:", "Output format:"];
        let pos: Vec<usize> = order.iter().map(|s| p.find(s).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(p.contains("[f0] puppy (view v0)"));
        assert!(p.contains("[l0] dog"));
        assert!(p.contains("[0, 1]"));
        assert_eq!(p, build_prompt(&spec.clone(), 20).unwrap());
    }

    #[test]
    fn batch_limit() {
        assert!(matches!(
            build_prompt(&fl_spec(21, 2), 20),
            Err(SemanticError::BatchTooLarge { size: 21, max: 20 })
        ));
    }

    #[test]
    fn pairs_enumeration() {
        assert_eq!(fl_spec(3, 2).pairs().len(), 6);
        let mut s = fl_spec(0, 4);
        s.pair_kind = PairKind::LabelLabel;
        assert_eq!(s.pairs().len(), 6);
        assert!(s.pairs().iter().all(|p| p.a < p.b));
    }

    #[test]
    fn parse_tolerates_fences_and_string_ids() {
        let reply = "```json\n[{\"feature\": \"f3\", \"label\": \"l1\", \"score\": 0.7},\n {\"feature\": 4, \"label\": \"[l0]\", \"score\": \"0.25\"}]\n```";
        let m = parse_response(reply, PairKind::FeatureLabel).unwrap();
        assert_eq!(m[&PairId::new(PairKind::FeatureLabel, 3, 1)], 0.7);
        assert_eq!(m[&PairId::new(PairKind::FeatureLabel, 4, 0)], 0.25);
    }

    #[test]
    fn parse_rejects_prose() {
        assert!(matches!(
            parse_response("The puppy feature is relevant to dog.", PairKind::FeatureLabel),
            Err(SemanticError::MalformedResponse(_))
        ));
        assert!(parse_response("[{\"feature\": \"f1\"}]", PairKind::FeatureLabel).is_err());
    }

    #[test]
    fn label_pairs_normalized() {
        let m = parse_response(
            "[{\"label\": \"l2\", \"other_label\": \"l0\", \"score\": 0.8}]",
            PairKind::LabelLabel,
        )
        .unwrap();
        assert_eq!(m[&PairId::new(PairKind::LabelLabel, 0, 2)], 0.8);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = ScoreCache::open(&path).unwrap();
        assert_eq!(cache.get("k1"), None);
        cache.put("k1", 0.25, "m").unwrap();
        assert_eq!(cache.get("k1"), Some(0.25));
        drop(cache);
        let reopened = ScoreCache::open(&path).unwrap();
        assert_eq!(reopened.get("k1"), Some(0.25));
    }

    #[test]
    fn corrupt_cache_lines_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        fs::write(
            &path,
            "{\"key\":\"a\",\"score\":0.5,\"model\":\"m\",\"timestamp\":1}\nnot json\n{\"key\":\"b\"}\n",
        )
        .unwrap();
        let cache = ScoreCache::open(&path).unwrap();
        assert_eq!(cache.corrupt_entries(), 2);
        assert_eq!(cache.get("a"), Some(0.5));
        assert_eq!(cache.get("b"), None);
    }

    #[test]
    fn score_set_serializes_as_records() {
        let mut s = SemanticScoreSet::default();
        s.insert(PairId::new(PairKind::LabelLabel, 3, 1), 0.4, None);
        s.insert(PairId::new(PairKind::FeatureLabel, 0, 1), 0.9, None);
        let json = serde_json::to_string(&s).unwrap();
        let back: SemanticScoreSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert_eq!(s.ll.keys().next(), Some(&(1, 3)));
    }

    #[test]
    fn clamping() {
        let p = PairId::new(PairKind::FeatureLabel, 0, 0);
        assert_eq!(clamp_score(1.5, p), 1.0);
        assert_eq!(clamp_score(-0.2, p), 0.0);
        assert_eq!(clamp_score(0.3, p), 0.3);
    }
}
