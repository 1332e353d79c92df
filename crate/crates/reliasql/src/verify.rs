//! Query verification: every prediction that leaves this module either
//! executes cleanly against the database or is an abstention.
//!
//! Verification runs the unanswerability gates, executes the candidate
//! read-only with a timeout, and on failure tries one round of table/column
//! name repair (edit distance first, then locating string literals in the
//! database's value index) before giving up and abstaining.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::ControlFlow;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use regex::Regex;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use sqlparser::ast::{
    Expr, ObjectName, Select, SelectItem, TableFactor, Value as AstValue, Visit, Visitor,
};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;
use thiserror::Error;

use crate::analyze::preprocess;
use crate::catalog::SchemaCatalog;
use crate::model::{QuestionRecord, SqlOrNull};

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

/// Longest literal value kept in the value index.
const VALUE_INDEX_MAX_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("SQL does not parse: {0}")]
    Parse(String),
    #[error("database error: {0}")]
    Db(#[from] rusqlite::Error),
}

/// Opens a SQLite database file read-only.
pub fn open_readonly(path: impl AsRef<Path>) -> Result<Connection, rusqlite::Error> {
    Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_URI | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
}

/// One scalar cell of a result set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScalarValue {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl From<rusqlite::types::ValueRef<'_>> for ScalarValue {
    fn from(v: rusqlite::types::ValueRef<'_>) -> Self {
        use rusqlite::types::ValueRef;
        match v {
            ValueRef::Null => ScalarValue::Null,
            ValueRef::Integer(i) => ScalarValue::Integer(i),
            ValueRef::Real(r) => ScalarValue::Real(r),
            ValueRef::Text(t) => ScalarValue::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => ScalarValue::Blob(b.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Syntax,
    MissingObject,
    Runtime,
    Timeout,
}

/// Result of executing one candidate: rows in engine order, or a classified
/// failure.
#[derive(Debug, Clone, PartialEq)]
pub enum ExecutionOutcome {
    Rows(Vec<Vec<ScalarValue>>),
    Failure { kind: FailureKind, message: String },
}

impl ExecutionOutcome {
    pub fn is_rows(&self) -> bool {
        matches!(self, ExecutionOutcome::Rows(_))
    }

    fn failure(kind: FailureKind, message: impl Into<String>) -> Self {
        ExecutionOutcome::Failure {
            kind,
            message: message.into(),
        }
    }
}

/// The first keyword of a statement, skipping whitespace, comments, and
/// opening parentheses.
fn leading_keyword(sql: &str) -> Option<String> {
    let bytes = sql.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let rest = &sql[i..];
        if bytes[i].is_ascii_whitespace() || bytes[i] == b'(' {
            i += 1;
        } else if rest.starts_with("--") {
            i += rest.find('\n').map_or(rest.len(), |p| p + 1);
        } else if rest.starts_with("/*") {
            i += rest.find("*/").map_or(rest.len(), |p| p + 2);
        } else {
            break;
        }
    }
    let start = i;
    while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
        i += 1;
    }
    if i > start {
        Some(sql[start..i].to_ascii_lowercase())
    } else {
        None
    }
}

fn classify_sqlite_error(err: &rusqlite::Error) -> FailureKind {
    if let rusqlite::Error::SqliteFailure(code, _) = err {
        if code.code == rusqlite::ErrorCode::OperationInterrupted {
            return FailureKind::Timeout;
        }
    }
    let message = err.to_string().to_lowercase();
    if message.contains("interrupted") {
        FailureKind::Timeout
    } else if message.contains("syntax error") || message.contains("unrecognized token") {
        FailureKind::Syntax
    } else if message.contains("no such table") || message.contains("no such column") {
        FailureKind::MissingObject
    } else {
        FailureKind::Runtime
    }
}

/// Executes a read-only statement with a wall-clock timeout. Total over all
/// inputs: every problem maps to a `Failure` variant. Only SELECT-shaped
/// statements are permitted; writes are rejected as `Runtime` failures.
pub fn execute_check(sql: &str, conn: &Connection, timeout_ms: u64) -> ExecutionOutcome {
    let deadline = Instant::now() + Duration::from_millis(timeout_ms);
    if conn
        .progress_handler(100, Some(move || Instant::now() >= deadline))
        .is_err()
    {
        return ExecutionOutcome::failure(FailureKind::Runtime, "cannot install progress handler");
    }
    let outcome = execute_inner(sql, conn);
    let _ = conn.progress_handler(0, None::<fn() -> bool>);
    outcome
}

fn execute_inner(sql: &str, conn: &Connection) -> ExecutionOutcome {
    let mut stmt = match conn.prepare(sql) {
        Ok(stmt) => stmt,
        Err(e) => return ExecutionOutcome::failure(classify_sqlite_error(&e), e.to_string()),
    };
    // the statement parses; now reject anything that is not a plain read
    match leading_keyword(sql).as_deref() {
        Some("select") | Some("with") | Some("values") => {}
        _ => {
            return ExecutionOutcome::failure(
                FailureKind::Runtime,
                "only SELECT statements are permitted",
            )
        }
    }
    let ncols = stmt.column_count();
    let mut rows = match stmt.query([]) {
        Ok(rows) => rows,
        Err(e) => return ExecutionOutcome::failure(classify_sqlite_error(&e), e.to_string()),
    };
    let mut out = Vec::new();
    loop {
        match rows.next() {
            Ok(Some(row)) => {
                let mut cells = Vec::with_capacity(ncols);
                for i in 0..ncols {
                    match row.get_ref(i) {
                        Ok(v) => cells.push(ScalarValue::from(v)),
                        Err(e) => {
                            return ExecutionOutcome::failure(classify_sqlite_error(&e), e.to_string())
                        }
                    }
                }
                out.push(cells);
            }
            Ok(None) => break,
            Err(e) => return ExecutionOutcome::failure(classify_sqlite_error(&e), e.to_string()),
        }
    }
    ExecutionOutcome::Rows(out)
}

/// Literal value -> locations where it occurs in the database. Built once
/// per database snapshot over text-affinity columns, values at most 64
/// characters.
#[derive(Debug, Clone, Default)]
pub struct ValueIndex {
    exact: HashMap<String, BTreeSet<(String, String)>>,
    lowered: HashMap<String, BTreeSet<(String, String)>>,
}

impl ValueIndex {
    pub fn build(conn: &Connection, catalog: &SchemaCatalog) -> Result<Self, VerifyError> {
        let mut index = Self::default();
        for table in &catalog.tables {
            for column in &table.columns {
                let ty = column.sql_type.to_lowercase();
                if !(ty.contains("text") || ty.contains("char") || ty.contains("clob")) {
                    continue;
                }
                let sql = format!(
                    "SELECT DISTINCT \"{}\" FROM \"{}\" WHERE \"{}\" IS NOT NULL",
                    column.name, table.name, column.name
                );
                let mut stmt = match conn.prepare(&sql) {
                    Ok(stmt) => stmt,
                    Err(_) => continue, // table absent from this snapshot
                };
                let mut rows = stmt.query([])?;
                while let Some(row) = rows.next()? {
                    let value = match row.get_ref(0)? {
                        rusqlite::types::ValueRef::Text(t) => String::from_utf8_lossy(t).into_owned(),
                        _ => continue,
                    };
                    if value.is_empty() || value.len() > VALUE_INDEX_MAX_LEN {
                        continue;
                    }
                    let location = (table.name.clone(), column.name.clone());
                    index
                        .lowered
                        .entry(value.to_lowercase())
                        .or_default()
                        .insert(location.clone());
                    index.exact.entry(value).or_default().insert(location);
                }
            }
        }
        Ok(index)
    }

    /// Locations holding the literal, preferring the exact spelling and
    /// falling back to a case-insensitive match.
    pub fn locations(&self, value: &str) -> Option<&BTreeSet<(String, String)>> {
        self.exact
            .get(value)
            .or_else(|| self.lowered.get(&value.to_lowercase()))
    }

    pub fn len(&self) -> usize {
        self.exact.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exact.is_empty()
    }
}

/// What static analysis of one statement found: relations, aliases, column
/// references, and `column (cmp) 'literal'` pairs.
#[derive(Default)]
struct SqlAnalysis {
    relations: Vec<String>,
    cte_names: BTreeSet<String>,
    table_aliases: BTreeMap<String, String>,
    item_aliases: BTreeSet<String>,
    columns: Vec<(Option<String>, String)>,
    comparisons: Vec<(Option<String>, String, String)>,
}

impl SqlAnalysis {
    /// Resolves the relation a column reference belongs to, when decidable.
    fn resolve_qualifier(&self, qualifier: &Option<String>) -> Option<String> {
        match qualifier {
            Some(q) => Some(self.table_aliases.get(q).cloned().unwrap_or_else(|| q.clone())),
            None => {
                let distinct: BTreeSet<&String> = self.relations.iter().collect();
                if distinct.len() == 1 {
                    distinct.into_iter().next().cloned()
                } else {
                    None
                }
            }
        }
    }
}

fn object_tail(name: &ObjectName) -> Option<String> {
    name.0.last().and_then(|p| p.as_ident()).map(|i| i.value.to_lowercase())
}

fn column_parts(expr: &Expr) -> Option<(Option<String>, String)> {
    match expr {
        Expr::Identifier(ident) => Some((None, ident.value.to_lowercase())),
        Expr::CompoundIdentifier(parts) if parts.len() >= 2 => {
            let column = parts.last()?.value.to_lowercase();
            let qualifier = parts[parts.len() - 2].value.to_lowercase();
            Some((Some(qualifier), column))
        }
        _ => None,
    }
}

fn literal_string(expr: &Expr) -> Option<String> {
    match expr {
        Expr::Value(v) => match &v.value {
            AstValue::SingleQuotedString(s) => Some(s.clone()),
            _ => None,
        },
        _ => None,
    }
}

impl Visitor for SqlAnalysis {
    type Break = ();

    fn pre_visit_query(&mut self, query: &sqlparser::ast::Query) -> ControlFlow<()> {
        if let Some(with) = &query.with {
            for cte in &with.cte_tables {
                self.cte_names.insert(cte.alias.name.value.to_lowercase());
            }
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_relation(&mut self, relation: &ObjectName) -> ControlFlow<()> {
        if let Some(name) = object_tail(relation) {
            self.relations.push(name);
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_table_factor(&mut self, factor: &TableFactor) -> ControlFlow<()> {
        if let TableFactor::Table { name, alias: Some(alias), .. } = factor {
            if let Some(table) = object_tail(name) {
                self.table_aliases.insert(alias.name.value.to_lowercase(), table);
            }
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_select(&mut self, select: &Select) -> ControlFlow<()> {
        for item in &select.projection {
            if let SelectItem::ExprWithAlias { alias, .. } = item {
                self.item_aliases.insert(alias.value.to_lowercase());
            }
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_expr(&mut self, expr: &Expr) -> ControlFlow<()> {
        if let Some(parts) = column_parts(expr) {
            self.columns.push(parts);
        }
        match expr {
            Expr::BinaryOp { left, right, .. } => {
                let pairs = [(left, right), (right, left)];
                for (a, b) in pairs {
                    if let (Some((qualifier, column)), Some(literal)) = (column_parts(a), literal_string(b)) {
                        self.comparisons.push((qualifier, column, literal));
                    }
                }
            }
            Expr::InList { expr: lhs, list, .. } => {
                if let Some((qualifier, column)) = column_parts(lhs) {
                    for item in list {
                        if let Some(literal) = literal_string(item) {
                            self.comparisons.push((qualifier.clone(), column.clone(), literal));
                        }
                    }
                }
            }
            Expr::Like { expr: lhs, pattern, .. } => {
                if let (Some((qualifier, column)), Some(literal)) = (column_parts(lhs), literal_string(pattern)) {
                    self.comparisons.push((qualifier, column, literal));
                }
            }
            _ => {}
        }
        ControlFlow::Continue(())
    }
}

fn analyze_sql(sql: &str) -> Result<SqlAnalysis, VerifyError> {
    let statements =
        Parser::parse_sql(&SQLiteDialect {}, sql).map_err(|e| VerifyError::Parse(e.to_string()))?;
    let mut analysis = SqlAnalysis::default();
    let _ = statements.visit(&mut analysis);
    Ok(analysis)
}

/// Case-insensitive whole-word replacement that never touches the inside of
/// single-quoted string literals.
fn replace_identifiers(sql: &str, renames: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(sql.len());
    let chars: Vec<char> = sql.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '\'' {
            // copy the string literal verbatim, honoring '' escapes
            out.push(c);
            i += 1;
            while i < chars.len() {
                out.push(chars[i]);
                if chars[i] == '\'' {
                    if i + 1 < chars.len() && chars[i + 1] == '\'' {
                        out.push(chars[i + 1]);
                        i += 2;
                        continue;
                    }
                    i += 1;
                    break;
                }
                i += 1;
            }
        } else if c.is_alphanumeric() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            match renames.get(&word.to_lowercase()) {
                Some(replacement) => out.push_str(replacement),
                None => out.push_str(&word),
            }
        } else {
            out.push(c);
            i += 1;
        }
    }
    out
}

fn within_edit_distance(a: &str, b: &str, max: usize) -> bool {
    strsim::levenshtein(a, b) <= max
}

/// Repairs table/column identifiers that are absent from the catalog.
///
/// Each unknown identifier is replaced by (a) the unique catalog name within
/// edit distance 2, else (b) the table/column where a string literal from
/// the same comparison expression is located in the value index, when that
/// location is unique. Identifiers already in the catalog are never
/// altered.
pub fn repair_names(
    sql: &str,
    catalog: &SchemaCatalog,
    value_index: &ValueIndex,
) -> Result<(String, bool), VerifyError> {
    let analysis = analyze_sql(sql)?;
    let mut renames: BTreeMap<String, String> = BTreeMap::new();

    let catalog_tables: BTreeMap<String, String> = catalog
        .tables
        .iter()
        .map(|t| (t.name.to_lowercase(), t.name.clone()))
        .collect();

    // unknown tables first: column candidates depend on which tables the
    // query ends up referencing
    let mut referenced_tables: BTreeSet<String> = BTreeSet::new();
    for relation in &analysis.relations {
        if let Some(canonical) = catalog_tables.get(relation) {
            referenced_tables.insert(canonical.clone());
            continue;
        }
        if analysis.cte_names.contains(relation) {
            continue;
        }
        if let Some(target) = repair_table(relation, &analysis, catalog, value_index) {
            referenced_tables.insert(target.clone());
            renames.insert(relation.clone(), target);
        }
    }

    // candidate columns come from the tables the query references; fall back
    // to the whole catalog when nothing resolved
    let mut candidate_columns: BTreeMap<String, String> = BTreeMap::new();
    if referenced_tables.is_empty() {
        for table in &catalog.tables {
            for col in &table.columns {
                candidate_columns.insert(col.name.to_lowercase(), col.name.clone());
            }
        }
    } else {
        for name in &referenced_tables {
            if let Some(table) = catalog.table(name) {
                for col in &table.columns {
                    candidate_columns.insert(col.name.to_lowercase(), col.name.clone());
                }
            }
        }
    }
    let all_columns = catalog.all_column_names();

    for (qualifier, column) in &analysis.columns {
        if all_columns.contains(column)
            || analysis.item_aliases.contains(column)
            || analysis.cte_names.contains(column)
            || renames.contains_key(column)
        {
            continue;
        }
        // skip words that are really table names used as qualifiers
        if catalog_tables.contains_key(column) {
            continue;
        }
        let distance_matches: BTreeSet<&String> = candidate_columns
            .iter()
            .filter(|(lower, _)| within_edit_distance(column, lower, 2))
            .map(|(_, canonical)| canonical)
            .collect();
        if distance_matches.len() == 1 {
            renames.insert(column.clone(), (*distance_matches.iter().next().unwrap()).clone());
            continue;
        }
        // value-based: a literal compared against this column names its home
        let mut located: BTreeSet<(String, String)> = BTreeSet::new();
        for (cmp_qualifier, cmp_column, literal) in &analysis.comparisons {
            if cmp_column != column || cmp_qualifier != qualifier {
                continue;
            }
            if let Some(locations) = value_index.locations(literal) {
                located.extend(locations.iter().cloned());
            }
        }
        if located.len() == 1 {
            let (_, target_column) = located.into_iter().next().unwrap();
            renames.insert(column.clone(), target_column);
        }
    }

    if renames.is_empty() {
        return Ok((sql.to_string(), false));
    }
    Ok((replace_identifiers(sql, &renames), true))
}

/// Finds the repair target for one unknown table name.
fn repair_table(
    relation: &str,
    analysis: &SqlAnalysis,
    catalog: &SchemaCatalog,
    value_index: &ValueIndex,
) -> Option<String> {
    let distance_matches: Vec<&str> = catalog
        .tables
        .iter()
        .map(|t| t.name.as_str())
        .filter(|name| within_edit_distance(relation, &name.to_lowercase(), 2))
        .collect();
    if distance_matches.len() == 1 {
        return Some(distance_matches[0].to_string());
    }

    // literals compared against this table's columns vote for its identity
    let mut tables: BTreeSet<String> = BTreeSet::new();
    for (qualifier, column, literal) in &analysis.comparisons {
        let owner = analysis.resolve_qualifier(qualifier);
        if owner.as_deref() != Some(relation) {
            continue;
        }
        let Some(locations) = value_index.locations(literal) else {
            continue;
        };
        let column_scoped: BTreeSet<&(String, String)> = locations
            .iter()
            .filter(|(_, c)| c.eq_ignore_ascii_case(column))
            .collect();
        if column_scoped.len() == 1 {
            tables.insert(column_scoped.into_iter().next().unwrap().0.clone());
        } else if column_scoped.is_empty() && locations.len() == 1 {
            tables.insert(locations.iter().next().unwrap().0.clone());
        }
    }
    if tables.len() == 1 {
        return tables.into_iter().next();
    }
    None
}

static PATIENT_REF: OnceLock<Regex> = OnceLock::new();

/// Flags questions whose "patient NNN" reference does not have the 8 digits
/// a legitimate patient number carries.
pub fn patient_id_gate(raw_text: &str) -> bool {
    let re = PATIENT_REF.get_or_init(|| Regex::new(r"(?i)\bpatient\s+(\d+)").expect("static pattern"));
    re.captures_iter(raw_text)
        .any(|caps| caps.get(1).is_some_and(|m| m.as_str().len() != 8))
}

/// True when the question consists entirely of vocabulary seen in training
/// unanswerable questions. Empty token lists never fire.
pub fn vocab_gate(tokens: &[String], unanswerable_vocab: &BTreeSet<String>) -> bool {
    !tokens.is_empty() && tokens.iter().all(|t| unanswerable_vocab.contains(t))
}

/// Which abstention gates run inside [`verify`].
#[derive(Debug, Clone, Default)]
pub struct GateConfig {
    pub patient_id: bool,
    /// Present means the vocabulary gate is enabled with this vocabulary.
    pub vocab: Option<BTreeSet<String>>,
}

impl GateConfig {
    /// Default gate posture: patient-number gate on, vocabulary gate off.
    pub fn standard() -> Self {
        Self {
            patient_id: true,
            vocab: None,
        }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    /// Whether any enabled gate flags this question as unanswerable.
    pub fn fires(&self, question: &QuestionRecord) -> bool {
        if self.patient_id && patient_id_gate(&question.raw_text) {
            return true;
        }
        if let Some(vocab) = &self.vocab {
            if vocab_gate(&preprocess(&question.raw_text), vocab) {
                return true;
            }
        }
        false
    }
}

/// Verifies one candidate. The returned value is either `Null` or a query
/// that executes to rows; idempotent by construction.
pub fn verify(
    candidate: &SqlOrNull,
    question: &QuestionRecord,
    conn: &Connection,
    catalog: &SchemaCatalog,
    value_index: &ValueIndex,
    gates: &GateConfig,
    timeout_ms: u64,
) -> SqlOrNull {
    let SqlOrNull::Query(sql) = candidate else {
        return SqlOrNull::Null;
    };
    if gates.fires(question) {
        return SqlOrNull::Null;
    }
    if execute_check(sql, conn, timeout_ms).is_rows() {
        return SqlOrNull::Query(sql.clone());
    }
    match repair_names(sql, catalog, value_index) {
        Ok((repaired, true)) if execute_check(&repaired, conn, timeout_ms).is_rows() => {
            SqlOrNull::Query(repaired)
        }
        _ => SqlOrNull::Null,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_catalog() -> SchemaCatalog {
        SchemaCatalog::from_json(
            r#"{
                "tables": [
                    {"name": "admissions", "description": "hospital admissions", "columns": [
                        {"name": "id", "sql_type": "integer"},
                        {"name": "kind", "sql_type": "text"}
                    ]},
                    {"name": "prescriptions", "description": "drug orders", "columns": [
                        {"name": "id", "sql_type": "integer"},
                        {"name": "drug", "sql_type": "text"},
                        {"name": "route", "sql_type": "text"}
                    ]},
                    {"name": "diagnoses_icd", "description": "coded diagnoses", "columns": [
                        {"name": "id", "sql_type": "integer"},
                        {"name": "code", "sql_type": "text"}
                    ]}
                ]
            }"#,
        )
        .unwrap()
    }

    fn toy_db() -> Connection {
        let conn = Connection::open_in_memory().unwrap();
        conn.execute_batch(
            "CREATE TABLE admissions (id INTEGER, kind TEXT);
             CREATE TABLE prescriptions (id INTEGER, drug TEXT, route TEXT);
             CREATE TABLE diagnoses_icd (id INTEGER, code TEXT);
             INSERT INTO admissions VALUES (1, 'urgent'), (2, 'elective');
             INSERT INTO prescriptions VALUES (1, 'aspirin', 'po'), (2, 'heparin', 'iv');
             INSERT INTO diagnoses_icd VALUES (1, 'i10');",
        )
        .unwrap();
        conn
    }

    #[test]
    fn execute_check_returns_rows() {
        let conn = toy_db();
        match execute_check("SELECT 1", &conn, 1000) {
            ExecutionOutcome::Rows(rows) => assert_eq!(rows, vec![vec![ScalarValue::Integer(1)]]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn execute_check_classifies_failures() {
        let conn = toy_db();
        let kind = |sql: &str| match execute_check(sql, &conn, 1000) {
            ExecutionOutcome::Failure { kind, .. } => kind,
            other => panic!("expected failure for {sql}: {other:?}"),
        };
        assert_eq!(kind("SELEC 1"), FailureKind::Syntax);
        assert_eq!(kind("SELECT * FROM no_such_table"), FailureKind::MissingObject);
        assert_eq!(kind("SELECT missing_col FROM admissions"), FailureKind::MissingObject);
        assert_eq!(kind("SELECT 1 +"), FailureKind::Syntax);
        assert_eq!(kind("INSERT INTO admissions VALUES (3, 'x')"), FailureKind::Runtime);
        assert_eq!(kind("DROP TABLE admissions"), FailureKind::Runtime);
    }

    #[test]
    fn execute_check_times_out() {
        let conn = toy_db();
        let slow = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x+1 FROM c) SELECT count(*) FROM c";
        match execute_check(slow, &conn, 100) {
            ExecutionOutcome::Failure { kind, .. } => assert_eq!(kind, FailureKind::Timeout),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn value_index_covers_text_columns_only() {
        let conn = toy_db();
        let index = ValueIndex::build(&conn, &toy_catalog()).unwrap();
        let locations = index.locations("aspirin").unwrap();
        assert_eq!(
            locations.iter().cloned().collect::<Vec<_>>(),
            vec![("prescriptions".to_string(), "drug".to_string())]
        );
        assert!(index.locations("1").is_none(), "integer values are not indexed");
        assert!(index.locations("ASPIRIN").is_some(), "case-insensitive fallback");
    }

    #[test]
    fn repair_fixes_table_typo_by_edit_distance() {
        let conn = toy_db();
        let index = ValueIndex::build(&conn, &toy_catalog()).unwrap();
        let (repaired, changed) = repair_names("SELECT * FROM admission", &toy_catalog(), &index).unwrap();
        assert!(changed);
        assert_eq!(repaired, "SELECT * FROM admissions");
        assert!(execute_check(&repaired, &conn, 1000).is_rows());
    }

    #[test]
    fn repair_leaves_valid_sql_untouched() {
        let conn = toy_db();
        let index = ValueIndex::build(&conn, &toy_catalog()).unwrap();
        let sql = "SELECT a.id, p.drug FROM admissions a JOIN prescriptions p ON a.id = p.id WHERE p.route = 'po'";
        let (repaired, changed) = repair_names(sql, &toy_catalog(), &index).unwrap();
        assert!(!changed);
        assert_eq!(repaired, sql);
    }

    #[test]
    fn repair_locates_table_through_value_index() {
        let conn = toy_db();
        let index = ValueIndex::build(&conn, &toy_catalog()).unwrap();
        let (repaired, changed) =
            repair_names("SELECT * FROM meds WHERE drug = 'aspirin'", &toy_catalog(), &index).unwrap();
        assert!(changed);
        assert_eq!(repaired, "SELECT * FROM prescriptions WHERE drug = 'aspirin'");
        assert!(execute_check(&repaired, &conn, 1000).is_rows());
    }

    #[test]
    fn repair_fixes_column_through_value_index() {
        let conn = toy_db();
        let index = ValueIndex::build(&conn, &toy_catalog()).unwrap();
        let (repaired, changed) = repair_names(
            "SELECT id FROM prescriptions WHERE medication = 'aspirin'",
            &toy_catalog(),
            &index,
        )
        .unwrap();
        assert!(changed, "{repaired}");
        assert_eq!(repaired, "SELECT id FROM prescriptions WHERE drug = 'aspirin'");
    }

    #[test]
    fn repair_never_touches_string_literals() {
        let conn = toy_db();
        let index = ValueIndex::build(&conn, &toy_catalog()).unwrap();
        let (repaired, changed) = repair_names(
            "SELECT * FROM admission WHERE kind = 'admission'",
            &toy_catalog(),
            &index,
        )
        .unwrap();
        assert!(changed);
        assert_eq!(repaired, "SELECT * FROM admissions WHERE kind = 'admission'");
    }

    #[test]
    fn repair_requires_unique_match() {
        // "id" exists in several tables; an ambiguous unknown stays put
        let conn = toy_db();
        let index = ValueIndex::build(&conn, &toy_catalog()).unwrap();
        let catalog = toy_catalog();
        // "xz" is within distance 2 of nothing; no comparison literal either
        let (repaired, changed) = repair_names("SELECT * FROM xz", &catalog, &index).unwrap();
        assert!(!changed);
        assert_eq!(repaired, "SELECT * FROM xz");
    }

    #[test]
    fn unparseable_sql_is_a_parse_error() {
        let conn = toy_db();
        let index = ValueIndex::build(&conn, &toy_catalog()).unwrap();
        assert!(matches!(
            repair_names("SELECT FROM WHERE", &toy_catalog(), &index),
            Err(VerifyError::Parse(_))
        ));
    }

    #[test]
    fn patient_gate_examples() {
        assert!(!patient_id_gate(
            "Count how many times in the first hospital visit patient 10004457 had coronary arteriography using two catheters."
        ));
        assert!(patient_id_gate("Do you know what type of blood patient 1903 has?"));
        assert!(patient_id_gate("Will they have any urine test done for patient 24628?"));
        assert!(patient_id_gate("Is patient 21074 subject to tests involving covid-19?"));
        assert!(!patient_id_gate("List the single rooms that are available now?"));
    }

    #[test]
    fn vocab_gate_rules() {
        let vocab: BTreeSet<String> = ["rooms", "available"].iter().map(|s| s.to_string()).collect();
        let tokens = |s: &str| preprocess(s);
        assert!(vocab_gate(&tokens("rooms available"), &vocab));
        assert!(!vocab_gate(&tokens("rooms available today"), &vocab));
        assert!(!vocab_gate(&[], &vocab));
    }

    fn verify_ctx() -> (Connection, SchemaCatalog, ValueIndex) {
        let conn = toy_db();
        let catalog = toy_catalog();
        let index = ValueIndex::build(&conn, &catalog).unwrap();
        (conn, catalog, index)
    }

    #[test]
    fn verify_nulls_out_broken_sql() {
        let (conn, catalog, index) = verify_ctx();
        let q = QuestionRecord::new("q", "anything");
        let out = verify(
            &SqlOrNull::Query("SELEC 1".into()),
            &q,
            &conn,
            &catalog,
            &index,
            &GateConfig::disabled(),
            1000,
        );
        assert_eq!(out, SqlOrNull::Null);
    }

    #[test]
    fn verify_repairs_fixable_typo() {
        let (conn, catalog, index) = verify_ctx();
        let q = QuestionRecord::new("q", "how many admissions");
        let out = verify(
            &SqlOrNull::Query("SELECT count(*) FROM admission".into()),
            &q,
            &conn,
            &catalog,
            &index,
            &GateConfig::disabled(),
            1000,
        );
        assert_eq!(out, SqlOrNull::Query("SELECT count(*) FROM admissions".into()));
    }

    #[test]
    fn verify_applies_patient_gate() {
        let (conn, catalog, index) = verify_ctx();
        let q = QuestionRecord::new("q", "Do you know what type of blood patient 1903 has?");
        let out = verify(
            &SqlOrNull::Query("SELECT 1".into()),
            &q,
            &conn,
            &catalog,
            &index,
            &GateConfig::standard(),
            1000,
        );
        assert_eq!(out, SqlOrNull::Null);
    }

    #[test]
    fn verify_is_idempotent_and_outputs_execute() {
        let (conn, catalog, index) = verify_ctx();
        let gates = GateConfig::standard();
        let q = QuestionRecord::new("q", "plain question");
        let candidates = [
            SqlOrNull::Query("SELECT * FROM admission".into()),
            SqlOrNull::Query("SELECT * FROM admissions".into()),
            SqlOrNull::Query("garbage".into()),
            SqlOrNull::Null,
        ];
        for candidate in candidates {
            let once = verify(&candidate, &q, &conn, &catalog, &index, &gates, 1000);
            let twice = verify(&once, &q, &conn, &catalog, &index, &gates, 1000);
            assert_eq!(once, twice);
            if let SqlOrNull::Query(sql) = &once {
                assert!(execute_check(sql, &conn, 1000).is_rows());
            }
        }
    }
}
