//! Question-distribution analysis: preprocessing, 1-3 gram frequency tables,
//! unanswerable-question categorization, and vocabulary extraction for the
//! vocabulary gate.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::QuestionRecord;
use crate::verify::patient_id_gate;

/// Stop words dropped during preprocessing. Only these three; general stop
/// lists would change the frequency tables.
const STOP_WORDS: [&str; 3] = ["the", "a", "an"];

/// Punctuation removed during preprocessing. Apostrophes, hyphens, and
/// everything else are retained.
const STRIPPED_CHARS: [char; 3] = ['.', ',', '?'];

/// Tokenizes a question: strip `.`/`,`/`?`, lowercase, split on whitespace,
/// drop "the"/"a"/"an". Idempotent.
pub fn preprocess(text: &str) -> Vec<String> {
    let stripped: String = text.chars().filter(|c| !STRIPPED_CHARS.contains(c)).collect();
    stripped
        .to_lowercase()
        .split_whitespace()
        .filter(|tok| !STOP_WORDS.contains(tok))
        .map(str::to_string)
        .collect()
}

/// An n-gram frequency table, sorted by count non-increasing with ties broken
/// by tuple lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NGramTable {
    pub n: usize,
    pub counts: Vec<(Vec<String>, u64)>,
}

impl NGramTable {
    /// The `k` most frequent grams.
    pub fn top(&self, k: usize) -> &[(Vec<String>, u64)] {
        &self.counts[..k.min(self.counts.len())]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|(_, c)| c).sum()
    }
}

/// Counts sliding-window n-grams within each question; grams never cross
/// question boundaries.
pub fn ngram_counts(corpus: &[Vec<String>], n: usize) -> NGramTable {
    assert!((1..=3).contains(&n), "n must be 1, 2, or 3");
    let mut counts: HashMap<Vec<String>, u64> = HashMap::new();
    for tokens in corpus {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    let mut counts: Vec<(Vec<String>, u64)> = counts.into_iter().collect();
    counts.sort_by(|(ga, ca), (gb, cb)| cb.cmp(ca).then_with(|| ga.cmp(gb)));
    NGramTable { n, counts }
}

/// Why a question is unanswerable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnansCategory {
    IncorrectPatientNumber,
    RequireExternalKnowledge,
    OutOfEhrKnowledgeBase,
    Uncategorized,
}

impl UnansCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            UnansCategory::IncorrectPatientNumber => "incorrect_patient_number",
            UnansCategory::RequireExternalKnowledge => "require_external_knowledge",
            UnansCategory::OutOfEhrKnowledgeBase => "out_of_ehr_knowledge_base",
            UnansCategory::Uncategorized => "uncategorized",
        }
    }
}

/// Cue list for the Require-External-Knowledge category. Single-word cues
/// match any token; multi-word cues match a contiguous token run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategorizerConfig {
    pub external_knowledge_cues: Vec<String>,
}

impl Default for CategorizerConfig {
    fn default() -> Self {
        Self {
            external_knowledge_cues: ["protocol", "protocols", "checklist", "what to do before"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl CategorizerConfig {
    fn cue_matches(&self, tokens: &[String]) -> bool {
        self.external_knowledge_cues.iter().any(|cue| {
            let cue_tokens = preprocess(cue);
            match cue_tokens.len() {
                0 => false,
                1 => tokens.contains(&cue_tokens[0]),
                len => tokens.windows(len).any(|w| w == cue_tokens.as_slice()),
            }
        })
    }
}

/// Assigns an unanswerable question to one of the three categories.
///
/// The patient-number rule is mechanical; the external-knowledge cue list is
/// a heuristic stand-in for manual review, and everything else falls into
/// the out-of-EHR bucket.
pub fn categorize_unanswerable(record: &QuestionRecord, config: &CategorizerConfig) -> UnansCategory {
    if patient_id_gate(&record.raw_text) {
        return UnansCategory::IncorrectPatientNumber;
    }
    let tokens = preprocess(&record.raw_text);
    if config.cue_matches(&tokens) {
        UnansCategory::RequireExternalKnowledge
    } else {
        UnansCategory::OutOfEhrKnowledgeBase
    }
}

/// Union of all tokens across a preprocessed corpus.
pub fn unanswerable_vocab(corpus: &[Vec<String>]) -> BTreeSet<String> {
    corpus.iter().flatten().cloned().collect()
}

/// Formats a gram the way the frequency tables print it: `('patient',)` for
/// singletons, `('since', '1', 'year')` for longer tuples.
pub fn format_gram(gram: &[String]) -> String {
    let inner = gram.iter().map(|t| format!("'{t}'")).collect::<Vec<_>>().join(", ");
    if gram.len() == 1 {
        format!("({inner},)")
    } else {
        format!("({inner})")
    }
}

/// Renders the top-`k` rows of each table as an aligned text block, one
/// section per n.
pub fn render_frequency_tables(split_name: &str, tables: &[NGramTable], k: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "== {split_name} ==");
    for table in tables {
        let _ = writeln!(out, "{}-gram:", table.n);
        for (gram, count) in table.top(k) {
            let _ = writeln!(out, "  {}: {}", format_gram(gram), count);
        }
    }
    out
}
