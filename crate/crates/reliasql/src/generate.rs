//! Two-stage SQL generation: an initial query prompted with the brief
//! catalog, then a self-reflection pass whose prompt carries detailed column
//! information for exactly the tables the initial query referenced.

use std::collections::BTreeSet;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use sqlparser::ast::{ObjectName, Visit, Visitor};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;
use thiserror::Error;

use crate::catalog::{render_brief, render_detailed, CatalogError, RenderFormat, SchemaCatalog};
use crate::gateway::{ChatRequest, Gateway};
use crate::model::{Candidate, SqlOrNull, Stage};
use crate::prompts::{fill, PromptSet};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("SQL does not parse: {0}")]
    Parse(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

/// Settings for one generation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub format: RenderFormat,
    pub few_shot_k: usize,
    /// Sampling temperature; when unset, 0.7 for ensembles (members must
    /// differ for voting to mean anything) and 0 for single runs.
    #[serde(default)]
    pub temperature: Option<f64>,
    pub ensemble_size: usize,
    pub dialect_note: String,
    pub max_output_tokens: u32,
    pub model_tag: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            format: RenderFormat::NaturalLanguage,
            few_shot_k: 0,
            temperature: None,
            ensemble_size: 1,
            dialect_note: "The database uses SQLite, so follow SQLite syntax and functions rather than \
                           other SQL dialects."
                .to_string(),
            max_output_tokens: 512,
            model_tag: "sql-generator".to_string(),
        }
    }
}

impl GenerationConfig {
    pub fn effective_temperature(&self) -> f64 {
        self.temperature
            .unwrap_or(if self.ensemble_size > 1 { 0.7 } else { 0.0 })
    }
}

fn render_examples(few_shot: &[(String, String)]) -> String {
    let mut out = String::new();
    for (question, sql) in few_shot {
        out.push_str(&format!("Question: {question}\nSQL: {sql}\n\n"));
    }
    out
}

fn stage_request(
    tables_section: &str,
    question: &str,
    config: &GenerationConfig,
    few_shot: &[(String, String)],
    prompts: &PromptSet,
) -> ChatRequest {
    let system_text = fill(&prompts.task_outline, &[("dialect_note", &config.dialect_note)]);
    let user_text = fill(
        &prompts.stage_user,
        &[
            ("tables", tables_section),
            ("examples", &render_examples(few_shot)),
            ("question", question),
        ],
    );
    ChatRequest {
        system_text,
        user_text,
        temperature: config.effective_temperature(),
        max_output_tokens: config.max_output_tokens,
        model_tag: config.model_tag.clone(),
    }
}

/// Builds the stage-1 prompt: task outline with the dialect note, the brief
/// catalog in the configured format, the few-shot pairs in the given order,
/// and the question. Deterministic for fixed inputs.
pub fn build_stage1_prompt(
    question: &str,
    catalog: &SchemaCatalog,
    config: &GenerationConfig,
    few_shot: &[(String, String)],
    prompts: &PromptSet,
) -> ChatRequest {
    debug_assert_eq!(few_shot.len(), config.few_shot_k, "few-shot list must match k");
    stage_request(&render_brief(catalog, config.format), question, config, few_shot, prompts)
}

/// Builds the stage-2 prompt: identical to stage 1 except the table section
/// is the detailed rendering of exactly the given tables.
pub fn build_stage2_prompt(
    question: &str,
    catalog: &SchemaCatalog,
    config: &GenerationConfig,
    few_shot: &[(String, String)],
    tables: &BTreeSet<String>,
    prompts: &PromptSet,
) -> Result<ChatRequest, GenerateError> {
    let detailed = render_detailed(catalog, tables)?;
    Ok(stage_request(&detailed, question, config, few_shot, prompts))
}

/// Table references found in a query, split into catalog tables (canonical
/// casing) and identifiers the catalog does not know.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TableExtraction {
    pub known: BTreeSet<String>,
    pub unknown: BTreeSet<String>,
}

#[derive(Default)]
struct RelationCollector {
    relations: BTreeSet<String>,
    cte_names: BTreeSet<String>,
}

impl Visitor for RelationCollector {
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
        if let Some(part) = relation.0.last().and_then(|p| p.as_ident()) {
            self.relations.insert(part.value.to_lowercase());
        }
        ControlFlow::Continue(())
    }
}

/// Collects the catalog tables referenced in FROM/JOIN clauses at any
/// nesting depth, case-insensitive, with aliases resolved away. Identifiers
/// that name no catalog table are reported separately; names defined by the
/// query itself (CTEs) are neither.
pub fn extract_tables(sql: &str, catalog: &SchemaCatalog) -> Result<TableExtraction, GenerateError> {
    let statements =
        Parser::parse_sql(&SQLiteDialect {}, sql).map_err(|e| GenerateError::Parse(e.to_string()))?;
    let mut collector = RelationCollector::default();
    let _ = statements.visit(&mut collector);

    let mut extraction = TableExtraction::default();
    for relation in collector.relations {
        if let Some(table) = catalog.table(&relation) {
            extraction.known.insert(table.name.clone());
        } else if !collector.cte_names.contains(&relation) {
            extraction.unknown.insert(relation);
        }
    }
    Ok(extraction)
}

/// Strips code fences, keeps the first statement, trims the trailing
/// semicolon, and maps the `null` marker (or emptiness) to an abstention.
pub fn postprocess_completion(text: &str) -> SqlOrNull {
    let mut body = text.trim();
    if let Some(open) = body.find("```") {
        let after = &body[open + 3..];
        // skip an optional language tag on the fence line
        let content_start = after.find('\n').map(|p| p + 1).unwrap_or(0);
        let content = &after[content_start..];
        body = match content.find("```") {
            Some(close) => &content[..close],
            None => content,
        };
    }
    let first = first_statement(body);
    SqlOrNull::from_text(first.trim().trim_end_matches(';').trim())
}

/// The first `;`-terminated statement, ignoring semicolons inside
/// single-quoted strings.
fn first_statement(text: &str) -> &str {
    let bytes = text.as_bytes();
    let mut in_string = false;
    for (i, b) in bytes.iter().enumerate() {
        match b {
            b'\'' => in_string = !in_string,
            b';' if !in_string => return &text[..i + 1],
            _ => {}
        }
    }
    text
}

/// Runs two-stage generation for every ensemble member. Always yields the
/// stage-1 candidate; with `reflect` it also yields the regenerated one. A
/// gateway failure turns that member's candidate into an abstention with a
/// note, without stopping the other members.
pub fn generate_stages(
    question: &str,
    catalog: &SchemaCatalog,
    config: &GenerationConfig,
    gateway: &Gateway,
    few_shot: &[(String, String)],
    prompts: &PromptSet,
    reflect: bool,
) -> Vec<Candidate> {
    let mut candidates = Vec::new();
    for member in 0..config.ensemble_size.max(1) {
        let stage1_request = build_stage1_prompt(question, catalog, config, few_shot, prompts);
        let stage1 = match gateway.complete(&stage1_request) {
            Ok(response) => {
                let prediction = postprocess_completion(&response.text);
                candidates.push(Candidate::new(prediction.clone(), Stage::Stage1, member));
                prediction
            }
            Err(e) => {
                candidates.push(
                    Candidate::new(SqlOrNull::Null, Stage::Stage1, member)
                        .with_note(format!("stage-1 gateway failure: {e}")),
                );
                continue;
            }
        };
        if !reflect {
            continue;
        }

        let (tables, extraction_note) = match &stage1 {
            SqlOrNull::Query(sql) => match extract_tables(sql, catalog) {
                Ok(extraction) => (extraction.known, String::new()),
                Err(e) => (BTreeSet::new(), format!("table extraction failed: {e}")),
            },
            SqlOrNull::Null => (BTreeSet::new(), String::new()),
        };
        let stage2_request = match build_stage2_prompt(question, catalog, config, few_shot, &tables, prompts) {
            Ok(request) => request,
            Err(e) => {
                candidates.push(
                    Candidate::new(SqlOrNull::Null, Stage::Reflected, member)
                        .with_note(format!("stage-2 prompt failure: {e}")),
                );
                continue;
            }
        };
        match gateway.complete(&stage2_request) {
            Ok(response) => {
                let candidate = Candidate::new(postprocess_completion(&response.text), Stage::Reflected, member);
                candidates.push(if extraction_note.is_empty() {
                    candidate
                } else {
                    candidate.with_note(extraction_note)
                });
            }
            Err(e) => {
                candidates.push(
                    Candidate::new(SqlOrNull::Null, Stage::Reflected, member)
                        .with_note(format!("stage-2 gateway failure: {e}")),
                );
            }
        }
    }
    candidates
}

/// Full two-stage generation: stage 1 plus self-reflection per member.
pub fn generate(
    question: &str,
    catalog: &SchemaCatalog,
    config: &GenerationConfig,
    gateway: &Gateway,
    few_shot: &[(String, String)],
    prompts: &PromptSet,
) -> Vec<Candidate> {
    generate_stages(question, catalog, config, gateway, few_shot, prompts, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::StubRule;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    fn toy_catalog() -> SchemaCatalog {
        SchemaCatalog::from_json(
            r#"{
                "tables": [
                    {"name": "admissions", "description": "hospital admissions", "columns": [
                        {"name": "row_id", "sql_type": "integer"},
                        {"name": "id", "sql_type": "integer"},
                        {"name": "kind", "sql_type": "text"}
                    ], "primary_key": "row_id"},
                    {"name": "prescriptions", "description": "drug orders", "columns": [
                        {"name": "row_id", "sql_type": "integer"},
                        {"name": "id", "sql_type": "integer"},
                        {"name": "drug", "sql_type": "text"}
                    ], "primary_key": "row_id"},
                    {"name": "diagnoses_icd", "description": "coded diagnoses", "columns": [
                        {"name": "row_id", "sql_type": "integer"},
                        {"name": "id", "sql_type": "integer"},
                        {"name": "code", "sql_type": "text"}
                    ], "primary_key": "row_id"}
                ]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn zero_shot_prompt_has_no_example_block() {
        let config = GenerationConfig::default();
        let request = build_stage1_prompt("How many admissions?", &toy_catalog(), &config, &[], &PromptSet::default());
        assert!(request.system_text.contains("SQLite"));
        assert!(request.user_text.contains("admissions: hospital admissions"));
        assert!(request.user_text.contains("Question: How many admissions?"));
        assert_eq!(request.user_text.matches("Question:").count(), 1);
    }

    #[test]
    fn ddl_format_renders_create_table() {
        let config = GenerationConfig {
            format: RenderFormat::Ddl,
            ..Default::default()
        };
        let request = build_stage1_prompt("q", &toy_catalog(), &config, &[], &PromptSet::default());
        assert!(request.user_text.contains("CREATE TABLE admissions"));
    }

    #[test]
    fn few_shot_pairs_appear_in_given_order() {
        let config = GenerationConfig {
            few_shot_k: 3,
            ..Default::default()
        };
        let few_shot = vec![
            ("nearest one".to_string(), "SELECT 1".to_string()),
            ("nearest two".to_string(), "SELECT 2".to_string()),
            ("nearest three".to_string(), "SELECT 3".to_string()),
        ];
        let request = build_stage1_prompt("the question", &toy_catalog(), &config, &few_shot, &PromptSet::default());
        let p1 = request.user_text.find("nearest one").unwrap();
        let p2 = request.user_text.find("nearest two").unwrap();
        let p3 = request.user_text.find("nearest three").unwrap();
        let pq = request.user_text.find("the question").unwrap();
        assert!(p1 < p2 && p2 < p3 && p3 < pq);
        assert_eq!(request.user_text.matches("Question:").count(), 4);
    }

    #[test]
    fn extracts_single_table() {
        let extraction = extract_tables("SELECT id FROM admissions", &toy_catalog()).unwrap();
        assert_eq!(extraction.known, BTreeSet::from(["admissions".to_string()]));
        assert!(extraction.unknown.is_empty());
    }

    #[test]
    fn extracts_joins_and_subqueries_with_aliases() {
        let sql = "SELECT x FROM admissions a JOIN prescriptions p ON a.id = p.id \
                   WHERE a.id IN (SELECT id FROM diagnoses_icd)";
        let extraction = extract_tables(sql, &toy_catalog()).unwrap();
        assert_eq!(
            extraction.known,
            BTreeSet::from(["admissions".to_string(), "prescriptions".to_string(), "diagnoses_icd".to_string()])
        );
    }

    #[test]
    fn select_one_references_nothing() {
        let extraction = extract_tables("SELECT 1", &toy_catalog()).unwrap();
        assert!(extraction.known.is_empty());
        assert!(extraction.unknown.is_empty());
    }

    #[test]
    fn unknown_tables_are_reported_separately() {
        let extraction = extract_tables("SELECT * FROM meds JOIN admissions ON 1=1", &toy_catalog()).unwrap();
        assert_eq!(extraction.known, BTreeSet::from(["admissions".to_string()]));
        assert_eq!(extraction.unknown, BTreeSet::from(["meds".to_string()]));
    }

    #[test]
    fn cte_names_are_not_unknown_tables() {
        let sql = "WITH recent AS (SELECT id FROM admissions) SELECT * FROM recent";
        let extraction = extract_tables(sql, &toy_catalog()).unwrap();
        assert_eq!(extraction.known, BTreeSet::from(["admissions".to_string()]));
        assert!(extraction.unknown.is_empty());
    }

    #[test]
    fn case_is_resolved_to_catalog_names() {
        let extraction = extract_tables("SELECT * FROM ADMISSIONS", &toy_catalog()).unwrap();
        assert_eq!(extraction.known, BTreeSet::from(["admissions".to_string()]));
    }

    #[test]
    fn unparseable_sql_is_a_parse_error() {
        assert!(matches!(
            extract_tables("SELECT FROM WHERE", &toy_catalog()),
            Err(GenerateError::Parse(_))
        ));
    }

    /// EXPLAIN-based oracle: tables whose b-trees the engine opens when
    /// planning the query against a scratch database built from the catalog.
    fn explain_oracle(sql: &str, conn: &rusqlite::Connection) -> BTreeSet<String> {
        let mut by_root: BTreeMap<i64, String> = BTreeMap::new();
        let mut stmt = conn.prepare("SELECT tbl_name, rootpage FROM sqlite_master").unwrap();
        let mut rows = stmt.query([]).unwrap();
        while let Some(row) = rows.next().unwrap() {
            let name: String = row.get(0).unwrap();
            let root: i64 = row.get(1).unwrap();
            by_root.insert(root, name);
        }
        let mut stmt = conn.prepare(&format!("EXPLAIN {sql}")).unwrap();
        let mut rows = stmt.query([]).unwrap();
        let mut tables = BTreeSet::new();
        while let Some(row) = rows.next().unwrap() {
            let opcode: String = row.get(1).unwrap();
            if opcode == "OpenRead" {
                let p2: i64 = row.get(3).unwrap();
                if let Some(name) = by_root.get(&p2) {
                    tables.insert(name.clone());
                }
            }
        }
        tables
    }

    fn scratch_db(catalog: &SchemaCatalog) -> rusqlite::Connection {
        let conn = rusqlite::Connection::open_in_memory().unwrap();
        conn.execute_batch(&render_brief(catalog, RenderFormat::Ddl)).unwrap();
        conn
    }

    #[test]
    fn join_subquery_example_matches_explain_oracle() {
        let catalog = toy_catalog();
        let conn = scratch_db(&catalog);
        let sql = "SELECT a.id FROM admissions a JOIN prescriptions p ON a.id = p.id \
                   WHERE a.id IN (SELECT id FROM diagnoses_icd)";
        let extraction = extract_tables(sql, &catalog).unwrap();
        assert_eq!(extraction.known, explain_oracle(sql, &conn));
    }

    #[test]
    fn agrees_with_explain_oracle_on_randomized_queries() {
        let catalog = toy_catalog();
        let conn = scratch_db(&catalog);
        let tables = ["admissions", "prescriptions", "diagnoses_icd"];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..200 {
            let t1 = tables[rng.random_range(0..3)];
            let mut sql = format!("SELECT {t1}.id FROM {t1}");
            if rng.random_bool(0.5) {
                let t2 = tables[rng.random_range(0..3)];
                if t2 != t1 {
                    sql.push_str(&format!(" JOIN {t2} ON {t1}.id = {t2}.id"));
                }
            }
            if rng.random_bool(0.4) {
                let t3 = tables[rng.random_range(0..3)];
                sql.push_str(&format!(" WHERE {t1}.id IN (SELECT id FROM {t3})"));
            }
            let extraction = extract_tables(&sql, &catalog).unwrap();
            assert_eq!(extraction.known, explain_oracle(&sql, &conn), "query: {sql}");
            assert!(extraction.unknown.is_empty());
        }
    }

    #[test]
    fn fenced_completion_is_unwrapped() {
        assert_eq!(postprocess_completion("```sql\nSELECT 1;\n```"), SqlOrNull::Query("SELECT 1".into()));
        assert_eq!(postprocess_completion("```\nSELECT 2\n```"), SqlOrNull::Query("SELECT 2".into()));
        assert_eq!(postprocess_completion("SELECT 3;"), SqlOrNull::Query("SELECT 3".into()));
        assert_eq!(postprocess_completion("SELECT 4; SELECT 5"), SqlOrNull::Query("SELECT 4".into()));
        assert_eq!(
            postprocess_completion("SELECT ';' ; SELECT 6"),
            SqlOrNull::Query("SELECT ';'".into())
        );
        assert_eq!(postprocess_completion("null"), SqlOrNull::Null);
        assert_eq!(postprocess_completion("  "), SqlOrNull::Null);
    }

    #[test]
    fn stub_everywhere_yields_stage1_and_reflected() {
        let gw = Gateway::stub(vec![StubRule::new("*", "SELECT 1")]);
        let config = GenerationConfig::default();
        let candidates = generate("q", &toy_catalog(), &config, &gw, &[], &PromptSet::default());
        assert_eq!(candidates.len(), 2);
        assert_eq!(candidates[0].stage, Stage::Stage1);
        assert_eq!(candidates[0].prediction, SqlOrNull::Query("SELECT 1".into()));
        assert_eq!(candidates[1].stage, Stage::Reflected);
        assert_eq!(candidates[1].prediction, SqlOrNull::Query("SELECT 1".into()));
    }

    #[test]
    fn stage2_prompt_details_only_extracted_tables() {
        let catalog = toy_catalog();
        let config = GenerationConfig::default();
        let request = build_stage2_prompt(
            "q",
            &catalog,
            &config,
            &[],
            &BTreeSet::from(["admissions".to_string()]),
            &PromptSet::default(),
        )
        .unwrap();
        assert!(request.user_text.contains("table: admissions"));
        assert!(!request.user_text.contains("table: prescriptions"));
        assert!(!request.user_text.contains("table: diagnoses_icd"));
    }

    #[test]
    fn reflection_sees_detailed_block_for_stage1_tables() {
        // stage 1 answers from the brief prompt; stage 2 must be asked with
        // the detailed admissions block, which the second rule keys on
        let gw = Gateway::stub(vec![
            StubRule::new("table: admissions", "SELECT kind FROM admissions"),
            StubRule::new("*", "SELECT id FROM admissions"),
        ]);
        let config = GenerationConfig::default();
        let candidates = generate("q", &toy_catalog(), &config, &gw, &[], &PromptSet::default());
        assert_eq!(candidates[0].prediction, SqlOrNull::Query("SELECT id FROM admissions".into()));
        assert_eq!(candidates[1].prediction, SqlOrNull::Query("SELECT kind FROM admissions".into()));
    }

    #[test]
    fn ensemble_size_doubles_candidate_count() {
        let gw = Gateway::stub(vec![StubRule::new("*", "SELECT 1")]);
        let config = GenerationConfig {
            ensemble_size: 3,
            ..Default::default()
        };
        let candidates = generate("q", &toy_catalog(), &config, &gw, &[], &PromptSet::default());
        assert_eq!(candidates.len(), 6);
        let members: Vec<usize> = candidates.iter().map(|c| c.member_index).collect();
        assert_eq!(members, vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn temperature_rule_follows_ensemble_size() {
        let single = GenerationConfig::default();
        assert_eq!(single.effective_temperature(), 0.0);
        let ensemble = GenerationConfig {
            ensemble_size: 4,
            ..Default::default()
        };
        assert_eq!(ensemble.effective_temperature(), 0.7);
        let pinned = GenerationConfig {
            ensemble_size: 4,
            temperature: Some(0.2),
            ..Default::default()
        };
        assert_eq!(pinned.effective_temperature(), 0.2);
    }
}
