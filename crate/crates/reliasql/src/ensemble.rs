//! Candidate reduction: an intent-alignment check that demotes misaligned
//! candidates to abstentions, then majority voting over query text or
//! execution results.

use rusqlite::Connection;
use serde::{Deserialize, Serialize};

use crate::gateway::{ChatRequest, Gateway};
use crate::model::SqlOrNull;
use crate::prompts::{fill, PromptSet};
use crate::verify::{execute_check, ExecutionOutcome, ScalarValue};

/// What groups votes: normalized query text, or the canonicalized result of
/// executing each candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    ByQueryText,
    ByExecutionResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentSettings {
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_tag: String,
}

impl Default for AlignmentSettings {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 8,
            model_tag: "alignment".to_string(),
        }
    }
}

/// Asks the gateway whether the SQL captures the question's intent and
/// parses the first yes/no token of the reply. Unparseable replies and
/// gateway failures fail open (aligned), so the check can only ever demote
/// with an explicit "no".
pub fn alignment_check(
    question: &str,
    sql: &str,
    gateway: &Gateway,
    prompts: &PromptSet,
    settings: &AlignmentSettings,
) -> bool {
    let request = ChatRequest {
        system_text: String::new(),
        user_text: fill(&prompts.alignment, &[("question", question), ("sql", sql)]),
        temperature: settings.temperature,
        max_output_tokens: settings.max_output_tokens,
        model_tag: settings.model_tag.clone(),
    };
    let reply = match gateway.complete(&request) {
        Ok(response) => response.text,
        Err(e) => {
            log::warn!("alignment check failed open: {e}");
            return true;
        }
    };
    for token in reply.split_whitespace() {
        let word: String = token.chars().filter(|c| c.is_alphanumeric()).collect();
        match word.to_lowercase().as_str() {
            "yes" => return true,
            "no" => return false,
            _ => {}
        }
    }
    true
}

/// Runs the alignment check over every non-null candidate, demoting failing
/// ones to abstentions in place. Positions are preserved so voting
/// tie-breaks stay stable.
pub fn apply_alignment(
    candidates: &[SqlOrNull],
    question: &str,
    gateway: &Gateway,
    prompts: &PromptSet,
    settings: &AlignmentSettings,
) -> Vec<SqlOrNull> {
    candidates
        .iter()
        .map(|candidate| match candidate {
            SqlOrNull::Query(sql) if !alignment_check(question, sql, gateway, prompts, settings) => {
                SqlOrNull::Null
            }
            other => other.clone(),
        })
        .collect()
}

fn normalize_text(sql: &str) -> String {
    sql.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn scalar_rank(v: &ScalarValue) -> u8 {
    match v {
        ScalarValue::Null => 0,
        ScalarValue::Integer(_) => 1,
        ScalarValue::Real(_) => 2,
        ScalarValue::Text(_) => 3,
        ScalarValue::Blob(_) => 4,
    }
}

fn cmp_scalar(a: &ScalarValue, b: &ScalarValue) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    match (a, b) {
        (ScalarValue::Integer(x), ScalarValue::Integer(y)) => x.cmp(y),
        (ScalarValue::Real(x), ScalarValue::Real(y)) => x.total_cmp(y),
        (ScalarValue::Text(x), ScalarValue::Text(y)) => x.cmp(y),
        (ScalarValue::Blob(x), ScalarValue::Blob(y)) => x.cmp(y),
        _ => scalar_rank(a).cmp(&scalar_rank(b)).then(Ordering::Equal),
    }
}

pub(crate) fn cmp_row(a: &[ScalarValue], b: &[ScalarValue]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        let ord = cmp_scalar(x, y);
        if ord != std::cmp::Ordering::Equal {
            return ord;
        }
    }
    a.len().cmp(&b.len())
}

/// Canonical encoding of a result set as a sorted row multiset. Two queries
/// land in the same vote group exactly when the engine returned the same
/// rows, in any order.
fn canonical_result(mut rows: Vec<Vec<ScalarValue>>) -> String {
    rows.sort_by(|a, b| cmp_row(a, b));
    let mut out = String::new();
    for row in rows {
        for cell in row {
            match cell {
                ScalarValue::Null => out.push_str("N|"),
                ScalarValue::Integer(i) => out.push_str(&format!("I{i}|")),
                ScalarValue::Real(r) => out.push_str(&format!("R{}|", r.to_bits())),
                ScalarValue::Text(t) => out.push_str(&format!("T{}:{t}|", t.len())),
                ScalarValue::Blob(b) => {
                    out.push('B');
                    for byte in b {
                        out.push_str(&format!("{byte:02x}"));
                    }
                    out.push('|');
                }
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, PartialEq, Eq, Hash, Clone)]
enum GroupKey {
    Null,
    Text(String),
    Result(String),
}

/// Reduces candidates to one prediction by majority vote.
///
/// The winner is the largest group; ties prefer a non-null group, then the
/// group whose first member appeared earliest. The returned prediction is
/// the earliest member of the winning group, never a synthesized query.
pub fn majority_vote(
    candidates: &[SqlOrNull],
    mode: VoteMode,
    db: Option<&Connection>,
    timeout_ms: u64,
) -> SqlOrNull {
    assert!(!candidates.is_empty(), "majority_vote needs at least one candidate");
    if mode == VoteMode::ByExecutionResult {
        assert!(db.is_some(), "ByExecutionResult voting needs a database");
    }

    // groups in first-appearance order: (key, first index, member count)
    let mut groups: Vec<(GroupKey, usize, usize)> = Vec::new();
    for (index, candidate) in candidates.iter().enumerate() {
        let key = match (mode, candidate) {
            (_, SqlOrNull::Null) => GroupKey::Null,
            (VoteMode::ByQueryText, SqlOrNull::Query(sql)) => GroupKey::Text(normalize_text(sql)),
            (VoteMode::ByExecutionResult, SqlOrNull::Query(sql)) => {
                match execute_check(sql, db.expect("checked above"), timeout_ms) {
                    ExecutionOutcome::Rows(rows) => GroupKey::Result(canonical_result(rows)),
                    // verifier normally prevents this; count failures with
                    // the abstentions
                    ExecutionOutcome::Failure { .. } => GroupKey::Null,
                }
            }
        };
        match groups.iter_mut().find(|(k, _, _)| *k == key) {
            Some((_, _, count)) => *count += 1,
            None => groups.push((key, index, 1)),
        }
    }

    let mut best: Option<&(GroupKey, usize, usize)> = None;
    for group in &groups {
        let better = match best {
            None => true,
            Some(current) => {
                let size = group.2.cmp(&current.2);
                let nullness = (current.0 == GroupKey::Null).cmp(&(group.0 == GroupKey::Null));
                // earlier groups win full ties because iteration is in
                // first-appearance order
                size.then(nullness).is_gt()
            }
        };
        if better {
            best = Some(group);
        }
    }

    let (key, first_index, _) = best.expect("non-empty candidates produce groups");
    match key {
        GroupKey::Null => SqlOrNull::Null,
        _ => candidates[*first_index].clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::StubRule;

    fn q(sql: &str) -> SqlOrNull {
        SqlOrNull::Query(sql.to_string())
    }

    #[test]
    fn alignment_parses_yes_no_and_fails_open() {
        let prompts = PromptSet::default();
        let settings = AlignmentSettings::default();
        let yes = Gateway::stub(vec![StubRule::new("*", "yes")]);
        assert!(alignment_check("q", "SELECT 1", &yes, &prompts, &settings));
        let no = Gateway::stub(vec![StubRule::new("*", "No.")]);
        assert!(!alignment_check("q", "SELECT 1", &no, &prompts, &settings));
        let maybe = Gateway::stub(vec![StubRule::new("*", "maybe")]);
        assert!(alignment_check("q", "SELECT 1", &maybe, &prompts, &settings));
    }

    #[test]
    fn alignment_fails_open_on_gateway_error() {
        let gw = Gateway::replay_from_cache(crate::gateway::ReplayCache::new(), crate::gateway::MissPolicy::Strict);
        assert!(alignment_check("q", "SELECT 1", &gw, &PromptSet::default(), &AlignmentSettings::default()));
    }

    #[test]
    fn apply_alignment_demotes_in_place() {
        let gw = Gateway::stub(vec![
            StubRule::new("SELECT 2", "no"),
            StubRule::new("*", "yes"),
        ]);
        let out = apply_alignment(
            &[q("SELECT 1"), q("SELECT 2"), SqlOrNull::Null],
            "q",
            &gw,
            &PromptSet::default(),
            &AlignmentSettings::default(),
        );
        assert_eq!(out, vec![q("SELECT 1"), SqlOrNull::Null, SqlOrNull::Null]);
    }

    #[test]
    fn plain_majority_wins() {
        let vote = majority_vote(&[q("A"), q("A"), q("B")], VoteMode::ByQueryText, None, 1000);
        assert_eq!(vote, q("A"));
    }

    #[test]
    fn null_group_can_win_by_count() {
        let vote = majority_vote(
            &[SqlOrNull::Null, SqlOrNull::Null, q("A")],
            VoteMode::ByQueryText,
            None,
            1000,
        );
        assert_eq!(vote, SqlOrNull::Null);
    }

    #[test]
    fn tie_prefers_non_null_then_earliest() {
        assert_eq!(
            majority_vote(&[q("A"), q("B")], VoteMode::ByQueryText, None, 1000),
            q("A")
        );
        assert_eq!(
            majority_vote(&[SqlOrNull::Null, q("B")], VoteMode::ByQueryText, None, 1000),
            q("B")
        );
        assert_eq!(
            majority_vote(&[q("B"), SqlOrNull::Null, q("A")], VoteMode::ByQueryText, None, 1000),
            q("B")
        );
    }

    #[test]
    fn whitespace_differences_share_a_group() {
        let vote = majority_vote(
            &[q("SELECT  1"), q("SELECT 1"), q("SELECT 2"), q("SELECT 2")],
            VoteMode::ByQueryText,
            None,
            1000,
        );
        // both groups have two members; the first group appeared earlier and
        // its representative is its earliest member, original spelling intact
        assert_eq!(vote, q("SELECT  1"));
    }

    #[test]
    fn winner_is_always_an_input_or_null() {
        let inputs = [q("X"), q("Y"), SqlOrNull::Null];
        let vote = majority_vote(&inputs, VoteMode::ByQueryText, None, 1000);
        assert!(inputs.contains(&vote) || vote.is_null());
    }

    fn toy_db() -> Connection {
        let conn = Connection::open_in_memory().unwrap();
        conn.execute_batch(
            "CREATE TABLE t (id INTEGER, name TEXT);
             INSERT INTO t VALUES (1, 'a'), (2, 'b');",
        )
        .unwrap();
        conn
    }

    #[test]
    fn execution_voting_groups_equivalent_queries() {
        let conn = toy_db();
        let vote = majority_vote(
            &[q("SELECT 1+1"), SqlOrNull::Null, q("SELECT 2")],
            VoteMode::ByExecutionResult,
            Some(&conn),
            1000,
        );
        // the two queries both produce [[2]]: a group of two beats one Null
        assert_eq!(vote, q("SELECT 1+1"));
    }

    #[test]
    fn execution_voting_ignores_row_order() {
        let conn = toy_db();
        let vote = majority_vote(
            &[
                q("SELECT id FROM t ORDER BY id"),
                q("SELECT id FROM t ORDER BY id DESC"),
                SqlOrNull::Null,
            ],
            VoteMode::ByExecutionResult,
            Some(&conn),
            1000,
        );
        assert_eq!(vote, q("SELECT id FROM t ORDER BY id"));
    }

    #[test]
    fn failing_candidates_count_as_abstentions() {
        let conn = toy_db();
        let vote = majority_vote(
            &[q("SELEC nонsense"), SqlOrNull::Null, q("SELECT 1")],
            VoteMode::ByExecutionResult,
            Some(&conn),
            1000,
        );
        assert_eq!(vote, SqlOrNull::Null);
    }
}
