//! Benchmark file I/O in the EHRSQL layout plus stratified cross-validation
//! folds.
//!
//! Questions files are JSON arrays of `{"id", "question"}` objects, either
//! bare or wrapped as `{"data": [...]}`. Labels and predictions files are
//! JSON objects mapping id to SQL text, with the literal string `"null"`
//! marking abstentions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GoldLabel, QuestionRecord, SqlOrNull};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path} at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        path: String,
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate question id {0}")]
    DuplicateId(String),
    #[error("label id {0} does not match any question")]
    UnknownLabelId(String),
    #[error("empty prediction id")]
    EmptyId,
    #[error("invalid fold request: {0}")]
    BadFold(String),
    #[error("dataset has no labels")]
    MissingLabels,
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, text: &str, err: &serde_json::Error) -> DatasetError {
    let (line, column) = (err.line(), err.column());
    let offset = text
        .lines()
        .take(line.saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum::<usize>()
        + column.saturating_sub(1);
    DatasetError::Parse {
        path: path.display().to_string(),
        offset,
        line,
        column,
        message: err.to_string(),
    }
}

/// One benchmark split with optional gold labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub split_name: String,
    pub questions: Vec<QuestionRecord>,
    pub labels: Option<BTreeMap<String, GoldLabel>>,
}

impl Dataset {
    pub fn question(&self, id: &str) -> Option<&QuestionRecord> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// Ids whose gold label is the abstention marker.
    pub fn unanswerable_ids(&self) -> Vec<&str> {
        match &self.labels {
            Some(labels) => labels
                .values()
                .filter(|l| !l.is_answerable())
                .map(|l| l.id.as_str())
                .collect(),
            None => Vec::new(),
        }
    }
}

#[derive(Deserialize)]
struct RawQuestion {
    id: String,
    question: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum QuestionsFile {
    Bare(Vec<RawQuestion>),
    Wrapped { data: Vec<RawQuestion> },
}

/// Derives a split name from the questions path. EHRSQL releases name every
/// split file `data.json` inside a split directory, so the directory name is
/// used in that case.
fn infer_split_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    if stem.eq_ignore_ascii_case("data") {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            return parent.to_string();
        }
    }
    stem.to_string()
}

/// Loads a questions file and, optionally, its labels file.
pub fn load_dataset(
    questions_path: impl AsRef<Path>,
    labels_path: Option<&Path>,
) -> Result<Dataset, DatasetError> {
    let questions_path = questions_path.as_ref();
    let text = fs::read_to_string(questions_path).map_err(|e| io_err(questions_path, e))?;
    let parsed: QuestionsFile =
        serde_json::from_str(&text).map_err(|e| parse_err(questions_path, &text, &e))?;
    let raw = match parsed {
        QuestionsFile::Bare(v) => v,
        QuestionsFile::Wrapped { data } => data,
    };

    let mut seen = BTreeSet::new();
    let mut questions = Vec::with_capacity(raw.len());
    for rq in raw {
        if rq.id.is_empty() {
            return Err(DatasetError::EmptyId);
        }
        if !seen.insert(rq.id.clone()) {
            return Err(DatasetError::DuplicateId(rq.id));
        }
        questions.push(QuestionRecord::new(rq.id, rq.question));
    }

    let labels = match labels_path {
        Some(path) => {
            let labels = load_labels(path)?;
            for id in labels.keys() {
                if !seen.contains(id) {
                    return Err(DatasetError::UnknownLabelId(id.clone()));
                }
            }
            Some(labels)
        }
        None => None,
    };

    Ok(Dataset {
        split_name: infer_split_name(questions_path),
        questions,
        labels,
    })
}

/// Loads a labels file: a JSON object mapping id to SQL text or `"null"`.
pub fn load_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, GoldLabel>, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let raw: BTreeMap<String, SqlOrNull> =
        serde_json::from_str(&text).map_err(|e| parse_err(path, &text, &e))?;
    Ok(raw
        .into_iter()
        .map(|(id, answer)| (id.clone(), GoldLabel { id, answer }))
        .collect())
}

/// Loads a predictions file (same format as labels).
pub fn load_predictions(path: impl AsRef<Path>) -> Result<BTreeMap<String, SqlOrNull>, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, &text, &e))
}

/// Writes predictions as a JSON object with lexicographic key order;
/// abstentions serialize as the string `"null"`. Round-trips through
/// [`load_predictions`].
pub fn write_predictions(
    path: impl AsRef<Path>,
    predictions: &BTreeMap<String, SqlOrNull>,
) -> Result<(), DatasetError> {
    let path = path.as_ref();
    if predictions.keys().any(|id| id.is_empty()) {
        return Err(DatasetError::EmptyId);
    }
    let json = serde_json::to_string(predictions).expect("map of strings serializes");
    fs::write(path, json).map_err(|e| io_err(path, e))
}

/// A k-fold assignment: fold sizes differ by at most one overall and within
/// every stratum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_ids(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for fold in self.assignment.values() {
            sizes[*fold] += 1;
        }
        sizes
    }
}

/// Splits a labeled dataset into `k` folds, stratified by the given
/// categorizer.
///
/// Ids are sorted, shuffled per stratum with a seeded generator, and dealt
/// round-robin with a fold cursor that persists across strata, which keeps
/// both per-stratum and overall fold sizes within one of each other.
pub fn stratified_kfold(
    dataset: &Dataset,
    k: usize,
    categorizer: impl Fn(&str) -> String,
    seed: u64,
) -> Result<FoldAssignment, DatasetError> {
    if dataset.labels.is_none() {
        return Err(DatasetError::MissingLabels);
    }
    if k < 2 {
        return Err(DatasetError::BadFold(format!("k must be at least 2, got {k}")));
    }
    if k > dataset.len() {
        return Err(DatasetError::BadFold(format!(
            "k = {k} exceeds dataset size {}",
            dataset.len()
        )));
    }

    let mut strata: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for q in &dataset.questions {
        strata.entry(categorizer(&q.id)).or_default().push(q.id.clone());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    let mut cursor = 0usize;
    for ids in strata.values_mut() {
        ids.sort();
        ids.shuffle(&mut rng);
        for id in ids.drain(..) {
            assignment.insert(id, cursor);
            cursor = (cursor + 1) % k;
        }
    }

    Ok(FoldAssignment { k, assignment })
}
