//! Scoring: execution accuracy, the Reliability Score family RS(c), and the
//! table-selection metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rusqlite::Connection;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::cmp_row;
use crate::model::{phi, GoldLabel, OutcomeLedger, SqlOrNull};
use crate::verify::{execute_check, ExecutionOutcome, ScalarValue};

/// Relative tolerance for numeric result comparison.
const NUMERIC_RTOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("gold query for {id} does not execute: {message}")]
    BadGold { id: String, message: String },
    #[error("prediction id {0} has no gold label")]
    UnknownPredictionId(String),
    #[error("no questions to score")]
    EmptyDataset,
    #[error("penalty must be non-negative, got {0}")]
    NegativePenalty(f64),
    #[error("cannot parse penalty {0:?}")]
    BadPenalty(String),
}

/// A penalty level: a fixed c, or `N`, which resolves to the dataset size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Fixed(f64),
    DatasetSize,
}

impl Penalty {
    pub fn parse(text: &str) -> Result<Self, EvaluateError> {
        let trimmed = text.trim();
        if trimmed.eq_ignore_ascii_case("n") {
            return Ok(Penalty::DatasetSize);
        }
        let value: f64 = trimmed
            .parse()
            .map_err(|_| EvaluateError::BadPenalty(text.to_string()))?;
        if value < 0.0 || !value.is_finite() {
            return Err(EvaluateError::NegativePenalty(value));
        }
        Ok(Penalty::Fixed(value))
    }

    pub fn label(&self) -> String {
        match self {
            Penalty::DatasetSize => "N".to_string(),
            Penalty::Fixed(c) if c.fract() == 0.0 && c.abs() < 1e15 => format!("{}", *c as i64),
            Penalty::Fixed(c) => format!("{c}"),
        }
    }

    pub fn resolve(&self, n_total: usize) -> f64 {
        match self {
            Penalty::Fixed(c) => *c,
            Penalty::DatasetSize => n_total as f64,
        }
    }

    /// The standard report levels: 0, 5, 10, and N.
    pub fn standard() -> Vec<Penalty> {
        vec![
            Penalty::Fixed(0.0),
            Penalty::Fixed(5.0),
            Penalty::Fixed(10.0),
            Penalty::DatasetSize,
        ]
    }
}

/// Reliability Score report: the five case counts partitioning the dataset
/// plus RS values per requested penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RSReport {
    pub n_total: usize,
    pub n_ans: usize,
    pub n_una: usize,
    pub n_correct: usize,
    pub n_abstain_ans: usize,
    pub n_wrong: usize,
    pub n_attempt_una: usize,
    pub n_abstain_una: usize,
    pub rs: BTreeMap<String, f64>,
}

impl RSReport {
    /// Count of penalized outcomes: wrong attempts plus attempts on
    /// unanswerable questions.
    pub fn n_penalized(&self) -> usize {
        self.n_wrong + self.n_attempt_una
    }

    /// Copy with RS values rounded to two decimals, for file output.
    /// Internal math stays full precision.
    pub fn rounded(&self) -> RSReport {
        let mut out = self.clone();
        for value in out.rs.values_mut() {
            *value = (*value * 100.0).round() / 100.0;
        }
        out
    }

    /// Human-readable table for standard output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "questions: {} ({} answerable, {} unanswerable)", self.n_total, self.n_ans, self.n_una);
        let _ = writeln!(
            out,
            "outcomes: {} correct, {} wrong, {} abstained (answerable), {} attempted (unanswerable), {} abstained (unanswerable)",
            self.n_correct, self.n_wrong, self.n_abstain_ans, self.n_attempt_una, self.n_abstain_una
        );
        for (label, value) in &self.rs {
            let _ = writeln!(out, "RS({label}) = {value:.2}");
        }
        out
    }
}

/// Aggregates per-question outcomes into RS values: 100 times the mean of
/// `phi_c` over the dataset, for each requested penalty.
pub fn score_outcomes(outcomes: &[OutcomeLedger], penalties: &[Penalty]) -> Result<RSReport, EvaluateError> {
    if outcomes.is_empty() {
        return Err(EvaluateError::EmptyDataset);
    }
    let n_total = outcomes.len();
    let mut report = RSReport {
        n_total,
        n_ans: 0,
        n_una: 0,
        n_correct: 0,
        n_abstain_ans: 0,
        n_wrong: 0,
        n_attempt_una: 0,
        n_abstain_una: 0,
        rs: BTreeMap::new(),
    };
    for outcome in outcomes {
        match (outcome.answerable, outcome.attempted) {
            (true, true) => {
                report.n_ans += 1;
                if outcome.correct.unwrap_or(false) {
                    report.n_correct += 1;
                } else {
                    report.n_wrong += 1;
                }
            }
            (true, false) => {
                report.n_ans += 1;
                report.n_abstain_ans += 1;
            }
            (false, true) => {
                report.n_una += 1;
                report.n_attempt_una += 1;
            }
            (false, false) => {
                report.n_una += 1;
                report.n_abstain_una += 1;
            }
        }
    }
    let rewarded = (report.n_correct + report.n_abstain_una) as f64;
    let penalized = report.n_penalized() as f64;
    for penalty in penalties {
        let c = penalty.resolve(n_total);
        if c < 0.0 {
            return Err(EvaluateError::NegativePenalty(c));
        }
        let value = 100.0 * (rewarded - c * penalized) / n_total as f64;
        report.rs.insert(penalty.label(), value);
    }
    Ok(report)
}

fn numeric(v: &ScalarValue) -> Option<f64> {
    match v {
        ScalarValue::Integer(i) => Some(*i as f64),
        ScalarValue::Real(r) => Some(*r),
        _ => None,
    }
}

fn scalar_eq(a: &ScalarValue, b: &ScalarValue) -> bool {
    match (a, b) {
        (ScalarValue::Null, ScalarValue::Null) => true,
        (ScalarValue::Text(x), ScalarValue::Text(y)) => x == y,
        (ScalarValue::Blob(x), ScalarValue::Blob(y)) => x == y,
        _ => match (numeric(a), numeric(b)) {
            (Some(x), Some(y)) => x == y || (x - y).abs() <= NUMERIC_RTOL * x.abs().max(y.abs()),
            _ => false,
        },
    }
}

fn rows_eq(a: &[Vec<ScalarValue>], b: &[Vec<ScalarValue>]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b.iter())
            .all(|(ra, rb)| ra.len() == rb.len() && ra.iter().zip(rb.iter()).all(|(x, y)| scalar_eq(x, y)))
}

/// Whether the top-level statement carries an ORDER BY (subquery ORDER BYs
/// do not count). Falls back to a paren-depth token scan when the statement
/// does not parse.
fn has_toplevel_order_by(sql: &str) -> bool {
    use sqlparser::dialect::SQLiteDialect;
    if let Ok(statements) = sqlparser::parser::Parser::parse_sql(&SQLiteDialect {}, sql) {
        if let Some(sqlparser::ast::Statement::Query(query)) = statements.first() {
            return query.order_by.is_some();
        }
    }
    let mut depth = 0i32;
    let mut saw_order = false;
    let Ok(tokens) = sqlparser::tokenizer::Tokenizer::new(&SQLiteDialect {}, sql).tokenize() else {
        return false;
    };
    for token in tokens {
        use sqlparser::tokenizer::Token;
        match token {
            Token::LParen => depth += 1,
            Token::RParen => depth -= 1,
            Token::Word(w) if depth == 0 => {
                let upper = w.value.to_uppercase();
                if upper == "ORDER" {
                    saw_order = true;
                } else {
                    if saw_order && upper == "BY" {
                        return true;
                    }
                    saw_order = false;
                }
            }
            Token::Whitespace(_) => {}
            _ => saw_order = false,
        }
    }
    false
}

/// Execution accuracy for one prediction against a trusted gold query.
///
/// Both queries run; results are compared as a multiset unless the gold
/// query orders its output, in which case row order matters. Numerics match
/// within a 1e-9 relative tolerance, text and blobs must be exact, and
/// engine NULL equals engine NULL.
pub fn exec_accuracy(
    pred_sql: &str,
    gold_sql: &str,
    conn: &Connection,
    timeout_ms: u64,
) -> Result<bool, EvaluateError> {
    let gold_rows = match execute_check(gold_sql, conn, timeout_ms) {
        ExecutionOutcome::Rows(rows) => rows,
        ExecutionOutcome::Failure { message, .. } => {
            return Err(EvaluateError::BadGold {
                id: String::new(),
                message,
            })
        }
    };
    let pred_rows = match execute_check(pred_sql, conn, timeout_ms) {
        ExecutionOutcome::Rows(rows) => rows,
        ExecutionOutcome::Failure { .. } => return Ok(false),
    };
    if has_toplevel_order_by(gold_sql) {
        Ok(rows_eq(&pred_rows, &gold_rows))
    } else {
        let mut pred_sorted = pred_rows;
        let mut gold_sorted = gold_rows;
        pred_sorted.sort_by(|a, b| cmp_row(a, b));
        gold_sorted.sort_by(|a, b| cmp_row(a, b));
        Ok(rows_eq(&pred_sorted, &gold_sorted))
    }
}

/// Scores a prediction set against gold labels.
///
/// Missing predictions count as abstentions (with a warning); predictions
/// for unknown ids are an error. `correct` is decided by [`exec_accuracy`].
pub fn score(
    predictions: &BTreeMap<String, SqlOrNull>,
    golds: &BTreeMap<String, GoldLabel>,
    conn: &Connection,
    timeout_ms: u64,
    penalties: &[Penalty],
) -> Result<RSReport, EvaluateError> {
    if golds.is_empty() {
        return Err(EvaluateError::EmptyDataset);
    }
    for id in predictions.keys() {
        if !golds.contains_key(id) {
            return Err(EvaluateError::UnknownPredictionId(id.clone()));
        }
    }
    let mut outcomes = Vec::with_capacity(golds.len());
    for (id, gold) in golds {
        let prediction = match predictions.get(id) {
            Some(p) => p.clone(),
            None => {
                log::warn!("no prediction for {id}; scoring as abstention");
                SqlOrNull::Null
            }
        };
        let answerable = gold.is_answerable();
        let attempted = prediction.is_query();
        let correct = match (&gold.answer, &prediction) {
            (SqlOrNull::Query(gold_sql), SqlOrNull::Query(pred_sql)) => {
                Some(exec_accuracy(pred_sql, gold_sql, conn, timeout_ms).map_err(|e| match e {
                    EvaluateError::BadGold { message, .. } => EvaluateError::BadGold {
                        id: id.clone(),
                        message,
                    },
                    other => other,
                })?)
            }
            _ => None,
        };
        outcomes.push(OutcomeLedger::new(id.clone(), answerable, attempted, correct));
    }
    score_outcomes(&outcomes, penalties)
}

/// Mean table-selection metrics over instance pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableSetMetrics {
    pub inclusion: f64,
    pub jaccard: f64,
    pub exact: f64,
}

/// Per-instance metrics: inclusion is 1 iff every gold table is present,
/// Jaccard is intersection over union (1 when both sets are empty), exact
/// is set equality.
pub fn instance_table_metrics(gold: &BTreeSet<String>, pred: &BTreeSet<String>) -> (f64, f64, f64) {
    let inclusion = if gold.is_subset(pred) { 1.0 } else { 0.0 };
    let union = gold.union(pred).count();
    let jaccard = if union == 0 {
        1.0
    } else {
        gold.intersection(pred).count() as f64 / union as f64
    };
    let exact = if gold == pred { 1.0 } else { 0.0 };
    (inclusion, jaccard, exact)
}

/// Means over `(gold, pred)` pairs. An empty input reports zeros.
pub fn table_metrics(pairs: &[(BTreeSet<String>, BTreeSet<String>)]) -> TableSetMetrics {
    if pairs.is_empty() {
        return TableSetMetrics {
            inclusion: 0.0,
            jaccard: 0.0,
            exact: 0.0,
        };
    }
    let mut sums = (0.0, 0.0, 0.0);
    for (gold, pred) in pairs {
        let (inclusion, jaccard, exact) = instance_table_metrics(gold, pred);
        sums.0 += inclusion;
        sums.1 += jaccard;
        sums.2 += exact;
    }
    let n = pairs.len() as f64;
    TableSetMetrics {
        inclusion: sums.0 / n,
        jaccard: sums.1 / n,
        exact: sums.2 / n,
    }
}
