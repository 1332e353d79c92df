//! Question templatization: mask identifying values, retrieve the nearest
//! masked templates by embedding distance, and rewrite the question into the
//! training-template style via the gateway.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::model::QuestionRecord;
use crate::prompts::{fill, PromptSet};

#[derive(Debug, Error)]
pub enum TemplatizeError {
    #[error("embedding dimension mismatch: query has {query}, index has {index}")]
    DimMismatch { query: usize, index: usize },
    #[error("template index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    BadK,
    #[error("invalid patient-number pattern: {0}")]
    BadPattern(#[from] regex::Error),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed lexicon or index: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("remote embedding failed: {0}")]
    Remote(String),
}

/// A fixed-length embedding with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Value-masking configuration: the patient-number pattern plus term lists
/// per placeholder type, harvested from training values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexiconConfig {
    /// Regex whose first capture group is the patient number.
    pub patient_number_pattern: String,
    /// Placeholder type -> literal terms, e.g. "procedure" -> [...].
    #[serde(default)]
    pub terms: BTreeMap<String, Vec<String>>,
}

impl Default for LexiconConfig {
    fn default() -> Self {
        Self {
            patient_number_pattern: r"\bpatient\s+(\d+)".to_string(),
            terms: BTreeMap::new(),
        }
    }
}

impl LexiconConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TemplatizeError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TemplatizeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn compile(&self) -> Result<ValueLexicons, TemplatizeError> {
        let patient_number = Regex::new(&self.patient_number_pattern)?;
        let mut terms: Vec<(String, Vec<String>)> = self
            .terms
            .iter()
            .map(|(ptype, list)| {
                let mut list = list.clone();
                // longest first, so a term never shadows its own prefix
                list.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
                (ptype.clone(), list)
            })
            .collect();
        terms.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(ValueLexicons { patient_number, terms })
    }
}

/// Compiled lexicons ready for matching.
#[derive(Debug, Clone)]
pub struct ValueLexicons {
    patient_number: Regex,
    terms: Vec<(String, Vec<String>)>,
}

impl Default for ValueLexicons {
    fn default() -> Self {
        LexiconConfig::default().compile().expect("default pattern compiles")
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Spans of existing `<placeholder>` markers; matches inside them are
/// skipped so masking is idempotent.
fn placeholder_spans(text: &str) -> Vec<(usize, usize)> {
    let re = Regex::new(r"<[a-z][a-z0-9 ]*>").expect("static pattern");
    re.find_iter(text).map(|m| (m.start(), m.end())).collect()
}

fn overlaps(spans: &[(usize, usize)], start: usize, end: usize) -> bool {
    spans.iter().any(|(s, e)| start < *e && *s < end)
}

/// Replaces identifying values with placeholders and records the bindings.
///
/// Distinct values of the same type get numbered placeholders
/// (`<procedure>`, `<procedure 2>`, ...) so substituting the bindings back
/// reproduces the original text. Questions with no matches pass through
/// unchanged with empty bindings; masking an already-masked text is a no-op.
pub fn mask_values(raw_text: &str, lexicons: &ValueLexicons) -> (String, BTreeMap<String, String>) {
    let protected = placeholder_spans(raw_text);
    // (start, end, placeholder type)
    let mut matches: Vec<(usize, usize, &str)> = Vec::new();

    for caps in lexicons.patient_number.captures_iter(raw_text) {
        if let Some(group) = caps.get(1) {
            if !overlaps(&protected, group.start(), group.end()) {
                matches.push((group.start(), group.end(), "patient number"));
            }
        }
    }

    let lower = raw_text.to_lowercase();
    for (ptype, terms) in &lexicons.terms {
        for term in terms {
            let needle = term.to_lowercase();
            if needle.is_empty() {
                continue;
            }
            let mut from = 0;
            while let Some(pos) = lower[from..].find(&needle) {
                let start = from + pos;
                let end = start + needle.len();
                from = start + 1;
                let boundary_ok = raw_text[..start].chars().next_back().is_none_or(|c| !is_word_char(c))
                    && raw_text[end..].chars().next().is_none_or(|c| !is_word_char(c));
                if boundary_ok && !overlaps(&protected, start, end) {
                    matches.push((start, end, ptype.as_str()));
                }
            }
        }
    }

    // earliest first; on equal starts prefer the longer match, then drop
    // anything overlapping an already-kept span
    matches.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| b.1.cmp(&a.1)));
    let mut kept: Vec<(usize, usize, &str)> = Vec::new();
    for (start, end, ptype) in matches {
        if !kept.iter().any(|(s, e, _)| start < *e && *s < end) {
            kept.push((start, end, ptype));
        }
    }

    if kept.is_empty() {
        return (raw_text.to_string(), BTreeMap::new());
    }

    // assign placeholder labels: first distinct value of a type keeps the
    // bare label, later distinct values get a numeric suffix
    let mut bindings: BTreeMap<String, String> = BTreeMap::new();
    let mut label_of: BTreeMap<(String, String), String> = BTreeMap::new();
    let mut seen_per_type: BTreeMap<String, usize> = BTreeMap::new();
    let mut replacements: Vec<(usize, usize, String)> = Vec::new();
    for (start, end, ptype) in &kept {
        let original = raw_text[*start..*end].to_string();
        let key = (ptype.to_string(), original.clone());
        let label = label_of.entry(key).or_insert_with(|| {
            let n = seen_per_type.entry(ptype.to_string()).or_insert(0);
            *n += 1;
            if *n == 1 {
                format!("<{ptype}>")
            } else {
                format!("<{ptype} {n}>")
            }
        });
        bindings.insert(label.clone(), original);
        replacements.push((*start, *end, label.clone()));
    }

    let mut masked = raw_text.to_string();
    for (start, end, label) in replacements.into_iter().rev() {
        masked.replace_range(start..end, &label);
    }
    (masked, bindings)
}

/// Embedding provider: a remote endpoint or the deterministic offline
/// fallback.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, TemplatizeError>;
    fn dim(&self) -> usize;
}

/// Deterministic fallback embedder: lowercase, split on whitespace, hash
/// each token into one of `dim` buckets, count, L2-normalize. A pure
/// function of the text.
#[derive(Debug, Clone)]
pub struct HashedBagEmbedder {
    dim: usize,
}

impl HashedBagEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim }
    }
}

impl Default for HashedBagEmbedder {
    fn default() -> Self {
        Self::new(512)
    }
}

/// FNV-1a, fixed here so bucket assignment never varies across platforms or
/// std versions.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl Embedder for HashedBagEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, TemplatizeError> {
        let mut values = vec![0.0f64; self.dim];
        for token in text.to_lowercase().split_whitespace() {
            let bucket = (fnv1a64(token.as_bytes()) % self.dim as u64) as usize;
            values[bucket] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        Ok(EmbeddingVector { values })
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Serialize)]
struct EmbedWireRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbedWireItem {
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct EmbedWireResponse {
    data: Vec<EmbedWireItem>,
}

/// Remote embedding endpoint with the usual `{model, input}` JSON shape.
pub struct RemoteEmbedder {
    pub endpoint: String,
    pub credential_env: String,
    pub model: String,
    pub dim: usize,
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, TemplatizeError> {
        let api_key = std::env::var(&self.credential_env)
            .map_err(|_| TemplatizeError::Remote(format!("credential {} not set", self.credential_env)))?;
        let mut response = ureq::post(&self.endpoint)
            .header("authorization", &format!("Bearer {api_key}"))
            .send_json(&EmbedWireRequest {
                model: &self.model,
                input: text,
            })
            .map_err(|e| TemplatizeError::Remote(e.to_string()))?;
        let parsed: EmbedWireResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| TemplatizeError::Remote(e.to_string()))?;
        let vector = parsed
            .data
            .into_iter()
            .next()
            .map(|i| EmbeddingVector { values: i.embedding })
            .ok_or_else(|| TemplatizeError::Remote("response carried no embedding".to_string()))?;
        if vector.dim() != self.dim {
            return Err(TemplatizeError::Remote(format!(
                "expected dim {}, got {}",
                self.dim,
                vector.dim()
            )));
        }
        Ok(vector)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub template: String,
    pub vector: EmbeddingVector,
    pub source_id: String,
}

/// Masked templates with their embeddings, deduplicated by template text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateIndex {
    entries: Vec<IndexEntry>,
}

impl TemplateIndex {
    /// Embeds and indexes `(template, source id)` pairs, keeping the first
    /// occurrence of each template text.
    pub fn build<'a>(
        items: impl IntoIterator<Item = (&'a str, &'a str)>,
        embedder: &dyn Embedder,
    ) -> Result<Self, TemplatizeError> {
        let mut index = Self::default();
        for (template, source_id) in items {
            if index.entries.iter().any(|e| e.template == template) {
                continue;
            }
            index.entries.push(IndexEntry {
                template: template.to_string(),
                vector: embedder.embed(template)?,
                source_id: source_id.to_string(),
            });
        }
        Ok(index)
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.vector.dim())
    }

    /// Persists the index as JSON lines of `(template, vector, source id)`.
    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<(), TemplatizeError> {
        let path = path.as_ref();
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| TemplatizeError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self, TemplatizeError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TemplatizeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut index = Self::default();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: IndexEntry = serde_json::from_str(line)?;
            if !index.entries.iter().any(|e| e.template == entry.template) {
                index.entries.push(entry);
            }
        }
        Ok(index)
    }
}

/// The `k` index entries nearest to `query` by Euclidean distance,
/// ascending, ties broken by template text. `k` larger than the index
/// returns the whole index sorted.
pub fn nearest_templates(
    query: &EmbeddingVector,
    index: &TemplateIndex,
    k: usize,
) -> Result<Vec<(String, f64)>, TemplatizeError> {
    if k == 0 {
        return Err(TemplatizeError::BadK);
    }
    if index.is_empty() {
        return Err(TemplatizeError::EmptyIndex);
    }
    let dim = index.dim().expect("non-empty index has a dim");
    if query.dim() != dim {
        return Err(TemplatizeError::DimMismatch {
            query: query.dim(),
            index: dim,
        });
    }
    let mut scored: Vec<(String, f64)> = index
        .entries
        .iter()
        .map(|e| (e.template.clone(), query.distance(&e.vector)))
        .collect();
    scored.sort_by(|(ta, da), (tb, db)| da.total_cmp(db).then_with(|| ta.cmp(tb)));
    scored.truncate(k);
    Ok(scored)
}

/// Settings for the rewrite call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewriteSettings {
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_tag: String,
}

impl Default for RewriteSettings {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 256,
            model_tag: "rewrite".to_string(),
        }
    }
}

/// Builds the rewrite request for a record and its neighbor templates.
/// Deterministic, so replay fixtures can be constructed from the same
/// inputs.
pub fn build_rewrite_request(
    record: &QuestionRecord,
    neighbors: &[String],
    prompts: &PromptSet,
    settings: &RewriteSettings,
) -> ChatRequest {
    let masked = record.masked_text.as_deref().unwrap_or(&record.raw_text);
    let templates = neighbors.iter().map(|t| format!("- {t}")).collect::<Vec<_>>().join("\n");
    let user_text = fill(&prompts.rewrite, &[("templates", &templates), ("question", masked)]);
    ChatRequest {
        system_text: String::new(),
        user_text,
        temperature: settings.temperature,
        max_output_tokens: settings.max_output_tokens,
        model_tag: settings.model_tag.clone(),
    }
}

/// Rewrites a question into template style and restores its bound values.
///
/// Falls back to the raw text when the rewrite comes back empty or drops a
/// bound value, so templatization can only rephrase, never lose content.
pub fn templatize(
    record: &QuestionRecord,
    neighbors: &[String],
    gateway: &Gateway,
    prompts: &PromptSet,
    settings: &RewriteSettings,
) -> Result<String, TemplatizeError> {
    let request = build_rewrite_request(record, neighbors, prompts, settings);
    let response = gateway.complete(&request)?;
    let rewrite = response.text.trim();
    if rewrite.is_empty() {
        return Ok(record.raw_text.clone());
    }
    let mut restored = rewrite.to_string();
    for (placeholder, original) in &record.bindings {
        restored = restored.replace(placeholder.as_str(), original);
    }
    let lost = record.bindings.values().any(|original| !restored.contains(original.as_str()));
    if lost {
        Ok(record.raw_text.clone())
    } else {
        Ok(restored)
    }
}
