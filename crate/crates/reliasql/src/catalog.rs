//! Database schema with human-written table and column descriptions,
//! renderable as a brief listing (natural language or DDL) for first-pass
//! prompts and as detailed per-table blocks for the reflection pass.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The descriptor for the 17-table EHR schema shipped with the crate.
const EHRSQL_DESCRIPTOR: &str = include_str!("../assets/catalog.ehrsql.json");

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read catalog {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed catalog descriptor: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid catalog: {0}")]
    Validation(String),
    #[error("unknown tables: {}", .0.join(", "))]
    UnknownTables(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    /// SQLite type-affinity name (integer, text, real, numeric, blob).
    pub sql_type: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub example_values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub column: String,
    pub references_table: String,
    pub references_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableInfo {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub columns: Vec<ColumnInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_key: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub foreign_keys: Vec<ForeignKey>,
}

impl TableInfo {
    pub fn column(&self, name: &str) -> Option<&ColumnInfo> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }
}

/// How table information is presented in a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderFormat {
    NaturalLanguage,
    Ddl,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaCatalog {
    pub tables: Vec<TableInfo>,
    #[serde(default = "default_dialect")]
    pub dialect: String,
}

fn default_dialect() -> String {
    "sqlite".to_string()
}

impl SchemaCatalog {
    /// Loads and validates a descriptor from a JSON file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CatalogError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CatalogError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        let catalog: SchemaCatalog = serde_json::from_str(text)?;
        catalog.validate()?;
        Ok(catalog)
    }

    /// The EHR schema descriptor shipped with the crate (17 tables).
    pub fn ehrsql() -> Self {
        Self::from_json(EHRSQL_DESCRIPTOR).expect("shipped descriptor is valid")
    }

    /// Case-insensitive table lookup.
    pub fn table(&self, name: &str) -> Option<&TableInfo> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn has_table(&self, name: &str) -> bool {
        self.table(name).is_some()
    }

    pub fn table_names(&self) -> Vec<&str> {
        self.tables.iter().map(|t| t.name.as_str()).collect()
    }

    /// All column names across the catalog, lowercased and deduplicated.
    pub fn all_column_names(&self) -> BTreeSet<String> {
        self.tables
            .iter()
            .flat_map(|t| t.columns.iter())
            .map(|c| c.name.to_lowercase())
            .collect()
    }

    fn validate(&self) -> Result<(), CatalogError> {
        let mut seen = BTreeSet::new();
        for table in &self.tables {
            if table.name.is_empty() {
                return Err(CatalogError::Validation("empty table name".into()));
            }
            if !seen.insert(table.name.to_lowercase()) {
                return Err(CatalogError::Validation(format!("duplicate table name {}", table.name)));
            }
            let mut cols = BTreeSet::new();
            for col in &table.columns {
                if col.name.is_empty() {
                    return Err(CatalogError::Validation(format!("empty column name in {}", table.name)));
                }
                if !cols.insert(col.name.to_lowercase()) {
                    return Err(CatalogError::Validation(format!(
                        "duplicate column {} in {}",
                        col.name, table.name
                    )));
                }
            }
            if let Some(pk) = &table.primary_key {
                if table.column(pk).is_none() {
                    return Err(CatalogError::Validation(format!(
                        "primary key {pk} not a column of {}",
                        table.name
                    )));
                }
            }
        }
        for table in &self.tables {
            for fk in &table.foreign_keys {
                if table.column(&fk.column).is_none() {
                    return Err(CatalogError::Validation(format!(
                        "foreign key column {}.{} does not exist",
                        table.name, fk.column
                    )));
                }
                let Some(target) = self.table(&fk.references_table) else {
                    return Err(CatalogError::Validation(format!(
                        "foreign key {}.{} references missing table {}",
                        table.name, fk.column, fk.references_table
                    )));
                };
                if target.column(&fk.references_column).is_none() {
                    return Err(CatalogError::Validation(format!(
                        "foreign key {}.{} references missing column {}.{}",
                        table.name, fk.column, fk.references_table, fk.references_column
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Renders every table briefly, in catalog order.
///
/// Natural-language mode emits `<table>: <description>` plus a column list;
/// DDL mode emits one `CREATE TABLE` statement per table.
pub fn render_brief(catalog: &SchemaCatalog, format: RenderFormat) -> String {
    match format {
        RenderFormat::NaturalLanguage => {
            let mut out = String::new();
            for table in &catalog.tables {
                let _ = writeln!(out, "{}: {}", table.name, table.description);
                let _ = writeln!(out, "columns: {}", table.column_names().join(", "));
            }
            out
        }
        RenderFormat::Ddl => {
            let mut out = String::new();
            for table in &catalog.tables {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&render_ddl(table));
                out.push('\n');
            }
            out
        }
    }
}

/// One `CREATE TABLE` statement, including primary-key and foreign-key
/// clauses. Executes as-is against SQLite.
pub fn render_ddl(table: &TableInfo) -> String {
    let mut parts: Vec<String> = table
        .columns
        .iter()
        .map(|c| format!("    {} {}", c.name, c.sql_type.to_uppercase()))
        .collect();
    if let Some(pk) = &table.primary_key {
        parts.push(format!("    PRIMARY KEY ({pk})"));
    }
    for fk in &table.foreign_keys {
        parts.push(format!(
            "    FOREIGN KEY ({}) REFERENCES {}({})",
            fk.column, fk.references_table, fk.references_column
        ));
    }
    format!("CREATE TABLE {} (\n{}\n);", table.name, parts.join(",\n"))
}

/// Renders detailed blocks for the requested tables only: table description
/// plus per-column type, description, and example values.
pub fn render_detailed(catalog: &SchemaCatalog, tables: &BTreeSet<String>) -> Result<String, CatalogError> {
    let unknown: Vec<String> = tables.iter().filter(|t| !catalog.has_table(t)).cloned().collect();
    if !unknown.is_empty() {
        return Err(CatalogError::UnknownTables(unknown));
    }
    let mut out = String::new();
    for table in &catalog.tables {
        if !tables.iter().any(|t| t.eq_ignore_ascii_case(&table.name)) {
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "table: {}", table.name);
        let _ = writeln!(out, "description: {}", table.description);
        for col in &table.columns {
            let mut line = format!("  {} ({}): {}", col.name, col.sql_type, col.description);
            if !col.example_values.is_empty() {
                let _ = write!(line, "; e.g. {}", col.example_values.join(", "));
            }
            let _ = writeln!(out, "{line}");
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_catalog() -> SchemaCatalog {
        SchemaCatalog::from_json(
            r#"{
                "tables": [
                    {
                        "name": "patients",
                        "description": "one row per registered patient",
                        "columns": [
                            {"name": "id", "sql_type": "integer", "description": "patient key"},
                            {"name": "name", "sql_type": "text", "description": "display name", "example_values": ["ada", "grace"]}
                        ],
                        "primary_key": "id"
                    }
                ]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn loads_single_table_descriptor() {
        let catalog = tiny_catalog();
        assert_eq!(catalog.tables.len(), 1);
        assert_eq!(catalog.dialect, "sqlite");
        assert!(catalog.has_table("PATIENTS"));
    }

    #[test]
    fn dangling_foreign_key_rejected() {
        let err = SchemaCatalog::from_json(
            r#"{
                "tables": [
                    {
                        "name": "a",
                        "columns": [{"name": "x", "sql_type": "integer"}],
                        "foreign_keys": [{"column": "x", "references_table": "missing", "references_column": "y"}]
                    }
                ]
            }"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("missing"), "{err}");
    }

    #[test]
    fn duplicate_table_name_rejected_case_insensitively() {
        let err = SchemaCatalog::from_json(
            r#"{"tables": [
                {"name": "t", "columns": [{"name": "x", "sql_type": "integer"}]},
                {"name": "T", "columns": [{"name": "x", "sql_type": "integer"}]}
            ]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn shipped_descriptor_has_17_tables() {
        let catalog = SchemaCatalog::ehrsql();
        assert_eq!(catalog.tables.len(), 17);
    }

    #[test]
    fn brief_natural_language_lists_columns() {
        let text = render_brief(&tiny_catalog(), RenderFormat::NaturalLanguage);
        assert!(text.contains("patients: one row per registered patient"));
        assert!(text.contains("columns: id, name"));
    }

    #[test]
    fn brief_ddl_mode_emits_create_table() {
        let text = render_brief(&tiny_catalog(), RenderFormat::Ddl);
        assert!(text.starts_with("CREATE TABLE patients"));
        assert!(text.contains("PRIMARY KEY (id)"));
    }

    #[test]
    fn shipped_ddl_executes_in_sqlite() {
        let catalog = SchemaCatalog::ehrsql();
        let conn = rusqlite::Connection::open_in_memory().unwrap();
        conn.execute_batch(&render_brief(&catalog, RenderFormat::Ddl)).unwrap();
        let n: i64 = conn
            .query_row("SELECT count(*) FROM sqlite_master WHERE type='table'", [], |r| r.get(0))
            .unwrap();
        assert_eq!(n, 17);
    }

    #[test]
    fn detailed_renders_requested_tables_only() {
        let catalog = SchemaCatalog::ehrsql();
        let text = render_detailed(&catalog, &BTreeSet::from(["patients".to_string()])).unwrap();
        assert!(text.contains("table: patients"));
        assert!(!text.contains("table: admissions"));
    }

    #[test]
    fn detailed_empty_request_is_empty() {
        let catalog = tiny_catalog();
        assert_eq!(render_detailed(&catalog, &BTreeSet::new()).unwrap(), "");
    }

    #[test]
    fn detailed_unknown_table_is_error() {
        let catalog = tiny_catalog();
        let err = render_detailed(&catalog, &BTreeSet::from(["ghost".to_string()])).unwrap_err();
        assert!(matches!(err, CatalogError::UnknownTables(ref names) if names == &["ghost"]));
    }

    #[test]
    fn detailed_includes_example_values() {
        let catalog = tiny_catalog();
        let text = render_detailed(&catalog, &BTreeSet::from(["patients".to_string()])).unwrap();
        assert!(text.contains("name (text): display name; e.g. ada, grace"));
    }
}
