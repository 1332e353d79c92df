//! Prompt wording as configuration: the shipped template files can be
//! replaced per run without touching code. Templates use `{name}`
//! placeholders filled by the stage that owns them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    /// Section (1) of generation prompts: the task outline. Placeholder:
    /// `{dialect_note}`.
    pub task_outline: String,
    /// User-message layout for both generation stages. Placeholders:
    /// `{tables}`, `{examples}`, `{question}`.
    pub stage_user: String,
    /// Question-rewrite prompt. Placeholders: `{templates}`, `{question}`.
    pub rewrite: String,
    /// Yes/no intent-alignment prompt. Placeholders: `{question}`, `{sql}`.
    pub alignment: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            task_outline: include_str!("../assets/prompts/task_outline.txt").to_string(),
            stage_user: include_str!("../assets/prompts/stage_user.txt").to_string(),
            rewrite: include_str!("../assets/prompts/rewrite.txt").to_string(),
            alignment: include_str!("../assets/prompts/alignment.txt").to_string(),
        }
    }
}

/// Optional per-template file overrides, as they appear in a pipeline
/// config.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_outline: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_user: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<String>,
}

impl PromptSet {
    /// Default wording with any overriding files applied. Paths are read as
    /// UTF-8 text.
    pub fn with_overrides(overrides: &PromptOverrides) -> std::io::Result<Self> {
        let mut set = Self::default();
        if let Some(path) = &overrides.task_outline {
            set.task_outline = read(path)?;
        }
        if let Some(path) = &overrides.stage_user {
            set.stage_user = read(path)?;
        }
        if let Some(path) = &overrides.rewrite {
            set.rewrite = read(path)?;
        }
        if let Some(path) = &overrides.alignment {
            set.alignment = read(path)?;
        }
        Ok(set)
    }
}

fn read(path: impl AsRef<Path>) -> std::io::Result<String> {
    fs::read_to_string(path)
}

/// Fills `{name}` placeholders in a template. Unknown placeholders are left
/// as-is so a template typo is visible in the rendered prompt rather than
/// silently dropped.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in values {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_expected_placeholders() {
        let set = PromptSet::default();
        assert!(set.task_outline.contains("{dialect_note}"));
        for name in ["{tables}", "{examples}", "{question}"] {
            assert!(set.stage_user.contains(name), "stage_user missing {name}");
        }
        assert!(set.rewrite.contains("{templates}"));
        assert!(set.alignment.contains("{sql}"));
    }

    #[test]
    fn fill_replaces_all_occurrences() {
        assert_eq!(fill("{a} and {a} or {b}", &[("a", "x"), ("b", "y")]), "x and x or y");
    }

    #[test]
    fn file_override_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.txt");
        fs::write(&path, "custom {dialect_note}").unwrap();
        let set = PromptSet::with_overrides(&PromptOverrides {
            task_outline: Some(path.display().to_string()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(set.task_outline, "custom {dialect_note}");
        assert_eq!(set.stage_user, PromptSet::default().stage_user);
    }
}
