//! Reliability-first text-to-SQL for EHR-style SQLite databases.
//!
//! The pipeline turns a natural-language question into either a SQLite query
//! or an explicit abstention (`null`), preferring abstention over wrong or
//! unexecutable SQL. The stages are:
//!
//! 1. [`templatize`] — mask identifying values, retrieve the nearest masked
//!    templates by embedding distance, and rewrite the question into the
//!    training-template style.
//! 2. [`generate`] — two-stage SQL generation: an initial query from a brief
//!    schema rendering, then a reflection pass that regenerates with detailed
//!    column information for exactly the tables the first pass referenced.
//! 3. [`verify`] — execute every candidate against the database, repair
//!    misreferenced table/column names, and apply unanswerability gates;
//!    anything that still fails becomes an abstention.
//! 4. [`ensemble`] — intent-alignment filtering plus majority voting across
//!    candidates.
//!
//! Scoring lives in [`evaluate`]: execution accuracy plus the penalty-weighted
//! Reliability Score family RS(c), where wrong attempts and attempts on
//! unanswerable questions cost `-c`.
//!
//! All model access goes through [`gateway`], which supports live HTTP,
//! record/replay, and deterministic stub modes so the whole pipeline runs
//! offline and reproducibly.

pub mod analyze;
pub mod catalog;
pub mod dataset;
pub mod ensemble;
pub mod evaluate;
pub mod gateway;
pub mod generate;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod templatize;
pub mod verify;

pub use model::{Candidate, GoldLabel, OutcomeLedger, QuestionRecord, SqlOrNull, Stage};
