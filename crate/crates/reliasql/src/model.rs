//! Shared domain vocabulary: questions, predictions, gold labels, and the
//! per-question reliability reward `phi`.
//!
//! Everything here is an immutable value with no I/O; policy lives in the
//! stage modules.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::Deserializer;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

/// The exact serialized marker for an abstention in every file format.
pub const NULL_MARKER: &str = "null";

/// One benchmark item, possibly carrying masked and templated forms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templated_text: Option<String>,
    /// Placeholder -> original substring, e.g. `"<patient number>" -> "10004457"`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bindings: BTreeMap<String, String>,
}

impl QuestionRecord {
    pub fn new(id: impl Into<String>, raw_text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            raw_text: raw_text.into(),
            masked_text: None,
            templated_text: None,
            bindings: BTreeMap::new(),
        }
    }

    /// The text later stages should consume: templated if present, else raw.
    pub fn effective_text(&self) -> &str {
        self.templated_text.as_deref().unwrap_or(&self.raw_text)
    }

    /// Checks that substituting `bindings` back into `masked_text` reproduces
    /// `raw_text` up to whitespace normalization. Vacuously true when no
    /// masked form is present.
    pub fn mask_round_trips(&self) -> bool {
        let Some(masked) = &self.masked_text else {
            return true;
        };
        let mut restored = masked.clone();
        for (placeholder, original) in &self.bindings {
            restored = restored.replace(placeholder.as_str(), original);
        }
        normalize_ws(&restored) == normalize_ws(&self.raw_text)
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A SQL prediction or an explicit abstention.
///
/// Serializes as the bare SQL string; the abstention serializes as the
/// literal string `"null"` and parses back from it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SqlOrNull {
    Query(String),
    Null,
}

impl SqlOrNull {
    /// Parses serialized text: trimmed `"null"` means abstention, anything
    /// else (non-empty after trimming) is a query. Empty text is treated as
    /// an abstention as well, since an empty query violates the type
    /// invariant and cannot execute.
    pub fn from_text(text: &str) -> Self {
        let trimmed = text.trim();
        if trimmed.is_empty() || trimmed == NULL_MARKER {
            SqlOrNull::Null
        } else {
            SqlOrNull::Query(trimmed.to_string())
        }
    }

    pub fn as_text(&self) -> &str {
        match self {
            SqlOrNull::Query(sql) => sql,
            SqlOrNull::Null => NULL_MARKER,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, SqlOrNull::Null)
    }

    pub fn is_query(&self) -> bool {
        matches!(self, SqlOrNull::Query(_))
    }

    pub fn query_text(&self) -> Option<&str> {
        match self {
            SqlOrNull::Query(sql) => Some(sql),
            SqlOrNull::Null => None,
        }
    }
}

impl fmt::Display for SqlOrNull {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_text())
    }
}

impl Serialize for SqlOrNull {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_text())
    }
}

impl<'de> Deserialize<'de> for SqlOrNull {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Ok(SqlOrNull::from_text(&text))
    }
}

/// Provenance of a candidate within the pipeline. Transitions only move
/// forward in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Reflected,
    Repaired,
    Gated,
}

/// One generated SQL string (or abstention) with stage provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub prediction: SqlOrNull,
    pub stage: Stage,
    pub member_index: usize,
    #[serde(default)]
    pub notes: String,
}

impl Candidate {
    pub fn new(prediction: SqlOrNull, stage: Stage, member_index: usize) -> Self {
        Self {
            prediction,
            stage,
            member_index,
            notes: String::new(),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes = note.into();
        self
    }

    /// Moves the candidate to a later stage with a new prediction. Panics in
    /// debug builds if the transition would go backwards.
    pub fn advanced(&self, stage: Stage, prediction: SqlOrNull) -> Self {
        debug_assert!(stage >= self.stage, "stage transitions only move forward");
        Self {
            prediction,
            stage,
            member_index: self.member_index,
            notes: self.notes.clone(),
        }
    }
}

/// Gold label for one question. A `Null` answer marks the question
/// unanswerable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub id: String,
    pub answer: SqlOrNull,
}

impl GoldLabel {
    pub fn is_answerable(&self) -> bool {
        self.answer.is_query()
    }
}

/// Per-question evaluation outcome feeding `phi`.
///
/// `correct` is present iff the question is answerable and was attempted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeLedger {
    pub id: String,
    pub answerable: bool,
    pub attempted: bool,
    pub correct: Option<bool>,
}

impl OutcomeLedger {
    /// Builds a ledger entry, normalizing `correct` so the type invariant
    /// holds: it is kept only when `answerable && attempted`.
    pub fn new(id: impl Into<String>, answerable: bool, attempted: bool, correct: Option<bool>) -> Self {
        Self {
            id: id.into(),
            answerable,
            attempted,
            correct: if answerable && attempted { correct } else { None },
        }
    }

    pub fn is_valid(&self) -> bool {
        self.correct.is_some() == (self.answerable && self.attempted)
    }
}

/// The per-question reliability reward with penalty `c`.
///
/// Five cases:
/// - answerable, attempted, correct -> 1
/// - answerable, abstained -> 0
/// - answerable, attempted, wrong -> -c
/// - unanswerable, attempted -> -c
/// - unanswerable, abstained -> 1
pub fn phi(outcome: &OutcomeLedger, c: f64) -> f64 {
    match (outcome.answerable, outcome.attempted) {
        (true, true) => {
            if outcome.correct.unwrap_or(false) {
                1.0
            } else {
                -c
            }
        }
        (true, false) => 0.0,
        (false, true) => -c,
        (false, false) => 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcome(answerable: bool, attempted: bool, correct: Option<bool>) -> OutcomeLedger {
        OutcomeLedger::new("x", answerable, attempted, correct)
    }

    #[test]
    fn phi_five_cases() {
        assert_eq!(phi(&outcome(true, true, Some(true)), 10.0), 1.0);
        assert_eq!(phi(&outcome(true, false, None), 10.0), 0.0);
        assert_eq!(phi(&outcome(true, true, Some(false)), 10.0), -10.0);
        assert_eq!(phi(&outcome(false, true, None), 10.0), -10.0);
        assert_eq!(phi(&outcome(false, false, None), 0.0), 1.0);
    }

    #[test]
    fn ledger_invariant_normalized() {
        let o = OutcomeLedger::new("q", false, true, Some(true));
        assert_eq!(o.correct, None);
        assert!(o.is_valid());
        let o = OutcomeLedger::new("q", true, true, Some(false));
        assert_eq!(o.correct, Some(false));
        assert!(o.is_valid());
    }

    #[test]
    fn null_marker_round_trips_through_json() {
        let null: SqlOrNull = serde_json::from_str("\"null\"").unwrap();
        assert_eq!(null, SqlOrNull::Null);
        assert_eq!(serde_json::to_string(&SqlOrNull::Null).unwrap(), "\"null\"");
        let q: SqlOrNull = serde_json::from_str("\"SELECT 1\"").unwrap();
        assert_eq!(q, SqlOrNull::Query("SELECT 1".into()));
    }

    #[test]
    fn from_text_trims_and_rejects_empty() {
        assert_eq!(SqlOrNull::from_text("  SELECT 1  "), SqlOrNull::Query("SELECT 1".into()));
        assert_eq!(SqlOrNull::from_text("   "), SqlOrNull::Null);
        assert_eq!(SqlOrNull::from_text(" null "), SqlOrNull::Null);
    }

    #[test]
    fn stage_order_is_forward() {
        assert!(Stage::Stage1 < Stage::Reflected);
        assert!(Stage::Reflected < Stage::Repaired);
        assert!(Stage::Repaired < Stage::Gated);
    }

    #[test]
    fn mask_round_trip_check() {
        let mut rec = QuestionRecord::new("q1", "Count patient 10004457 visits.");
        rec.masked_text = Some("Count patient <patient number> visits.".into());
        rec.bindings.insert("<patient number>".into(), "10004457".into());
        assert!(rec.mask_round_trips());
        rec.bindings.insert("<patient number>".into(), "999".into());
        assert!(!rec.mask_round_trips());
    }

    proptest! {
        // phi is affine in c with slope in {0, -1}: phi(c) = phi(0) - slope * c.
        #[test]
        fn phi_affine_in_c(answerable: bool, attempted: bool, correct: bool, c1 in 0.0..1e6f64, c2 in 0.0..1e6f64) {
            let o = outcome(answerable, attempted, if answerable && attempted { Some(correct) } else { None });
            let at0 = phi(&o, 0.0);
            prop_assert!(at0 == 0.0 || at0 == 1.0);
            let slope = phi(&o, 1.0) - at0;
            prop_assert!(slope == 0.0 || slope == -1.0);
            prop_assert_eq!(phi(&o, c1), at0 + slope * c1);
            // monotone: larger penalty never increases the reward
            if c1 <= c2 {
                prop_assert!(phi(&o, c1) >= phi(&o, c2));
            }
        }
    }
}
