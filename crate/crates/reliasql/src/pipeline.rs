//! Pipeline orchestration: wiring templatization, generation, verification,
//! and ensembling over benchmark files, plus the per-stage entry points the
//! CLI subcommands expose.
//!
//! `run` and the piped subcommands share the same stage functions, so
//! running the whole pipeline is equivalent to piping the stage outputs
//! through the subcommands in order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyze::{categorize_unanswerable, ngram_counts, preprocess, unanswerable_vocab, CategorizerConfig, NGramTable};
use crate::catalog::SchemaCatalog;
use crate::dataset::{
    load_dataset, load_labels, load_predictions, stratified_kfold, write_predictions, Dataset, DatasetError,
    FoldAssignment,
};
use crate::ensemble::{apply_alignment, majority_vote, AlignmentSettings, VoteMode};
use crate::evaluate::{score, EvaluateError, Penalty, RSReport};
use crate::gateway::{Gateway, GatewayError, LiveOptions, MissPolicy, StubRule};
use crate::generate::{generate_stages, GenerationConfig};
use crate::model::{Candidate, QuestionRecord, SqlOrNull};
use crate::prompts::{PromptOverrides, PromptSet};
use crate::templatize::{
    mask_values, nearest_templates, templatize, Embedder, HashedBagEmbedder, LexiconConfig, RewriteSettings,
    TemplateIndex, TemplatizeError, ValueLexicons,
};
use crate::verify::{execute_check, open_readonly, verify, GateConfig, ValueIndex, VerifyError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Catalog(#[from] crate::catalog::CatalogError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Templatize(#[from] TemplatizeError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Evaluate(#[from] EvaluateError),
    #[error("database error: {0}")]
    Db(#[from] rusqlite::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelinePaths {
    pub questions: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub database: Option<PathBuf>,
    /// Catalog descriptor; the shipped EHR catalog is used when absent.
    pub catalog: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Training split used for template retrieval and few-shot pairs.
    pub train_questions: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    /// Prebuilt template index (JSON lines); built from the training split
    /// when absent.
    pub template_index: Option<PathBuf>,
    pub lexicons: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub templatize: bool,
    pub reflect: bool,
    /// Name repair on execution failure. The execution check itself always
    /// runs; a disabled verifier only skips repair.
    pub verify: bool,
    pub ensemble: bool,
    pub patient_gate: bool,
    pub vocab_gate: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            templatize: false,
            reflect: true,
            verify: true,
            ensemble: true,
            patient_gate: true,
            vocab_gate: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    Stub,
    Replay,
    Live,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub mode: GatewayMode,
    pub endpoint: String,
    pub credential_env: String,
    pub miss_policy: MissPolicy,
    pub stub_rules: Vec<StubRule>,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub min_interval_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        let live = LiveOptions::default();
        Self {
            mode: GatewayMode::Stub,
            endpoint: String::new(),
            credential_env: live.credential_env,
            miss_policy: MissPolicy::Strict,
            stub_rules: Vec::new(),
            max_retries: live.max_retries,
            initial_backoff_ms: live.initial_backoff_ms,
            min_interval_ms: live.min_interval_ms,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplatizeConfig {
    /// Neighbor templates shown to the rewrite prompt.
    pub k: usize,
    /// Embed the raw question instead of the masked form.
    pub embed_raw_text: bool,
    pub rewrite: RewriteSettings,
}

impl Default for TemplatizeConfig {
    fn default() -> Self {
        Self {
            k: 3,
            embed_raw_text: false,
            rewrite: RewriteSettings::default(),
        }
    }
}

/// Everything a pipeline run needs; JSON-loadable, with flags overriding
/// file values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PipelinePaths,
    pub toggles: StageToggles,
    pub generation: GenerationConfig,
    pub vote_mode: VoteMode,
    pub penalties: Vec<String>,
    pub seed: u64,
    /// Worker threads; 0 means the processor count (capped at 8 for live
    /// gateway runs).
    pub jobs: usize,
    pub gateway: GatewayConfig,
    pub prompts: PromptOverrides,
    pub templatize: TemplatizeConfig,
    pub alignment: AlignmentSettings,
    pub timeout_ms: u64,
    pub categorizer: CategorizerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PipelinePaths::default(),
            toggles: StageToggles::default(),
            generation: GenerationConfig::default(),
            vote_mode: VoteMode::ByQueryText,
            penalties: vec!["0".into(), "5".into(), "10".into(), "N".into()],
            seed: 0,
            jobs: 0,
            gateway: GatewayConfig::default(),
            prompts: PromptOverrides::default(),
            templatize: TemplatizeConfig::default(),
            alignment: AlignmentSettings::default(),
            timeout_ms: crate::verify::DEFAULT_TIMEOUT_MS,
            categorizer: CategorizerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|source| PipelineError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn parsed_penalties(&self) -> Result<Vec<Penalty>, EvaluateError> {
        self.penalties.iter().map(|p| Penalty::parse(p)).collect()
    }

    fn effective_jobs(&self, question_count: usize) -> usize {
        let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        let mut jobs = if self.jobs > 0 { self.jobs } else { available };
        if matches!(self.gateway.mode, GatewayMode::Live) {
            jobs = jobs.min(8);
        }
        jobs.clamp(1, question_count.max(1))
    }

    fn build_gateway(&self) -> Result<Gateway, PipelineError> {
        match self.gateway.mode {
            GatewayMode::Stub => Ok(Gateway::stub(self.gateway.stub_rules.clone())),
            GatewayMode::Replay => {
                let cache = self
                    .paths
                    .cache
                    .as_ref()
                    .ok_or_else(|| PipelineError::Config("replay mode needs paths.cache".into()))?;
                Ok(Gateway::replay(cache, self.gateway.miss_policy)?)
            }
            GatewayMode::Live => {
                if self.gateway.endpoint.is_empty() {
                    return Err(PipelineError::Config("live mode needs gateway.endpoint".into()));
                }
                let options = LiveOptions {
                    endpoint: self.gateway.endpoint.clone(),
                    credential_env: self.gateway.credential_env.clone(),
                    max_retries: self.gateway.max_retries,
                    initial_backoff_ms: self.gateway.initial_backoff_ms,
                    min_interval_ms: self.gateway.min_interval_ms,
                };
                Ok(Gateway::live(options, self.paths.cache.clone())?)
            }
        }
    }

    fn load_catalog(&self) -> Result<SchemaCatalog, PipelineError> {
        match &self.paths.catalog {
            Some(path) => Ok(SchemaCatalog::load(path)?),
            None => Ok(SchemaCatalog::ehrsql()),
        }
    }

    fn load_lexicons(&self) -> Result<ValueLexicons, PipelineError> {
        let config = match &self.paths.lexicons {
            Some(path) => LexiconConfig::load(path)?,
            None => LexiconConfig::default(),
        };
        Ok(config.compile()?)
    }
}

/// Retrieval material harvested from the training split: the masked
/// template index plus template -> (question, sql) pairs for few-shot
/// prompts.
struct RetrievalPool {
    index: TemplateIndex,
    pairs_by_template: BTreeMap<String, (String, String)>,
}

/// Shared, read-only state for one run.
struct RunContext {
    config: PipelineConfig,
    catalog: SchemaCatalog,
    prompts: PromptSet,
    lexicons: ValueLexicons,
    gateway: Gateway,
    embedder: HashedBagEmbedder,
    retrieval: Option<RetrievalPool>,
    value_index: ValueIndex,
    gates: GateConfig,
}

impl RunContext {
    fn build(config: &PipelineConfig, database: &Path) -> Result<Self, PipelineError> {
        let catalog = config.load_catalog()?;
        let prompts = PromptSet::with_overrides(&config.prompts)
            .map_err(|e| PipelineError::Config(format!("cannot read prompt override: {e}")))?;
        let lexicons = config.load_lexicons()?;
        let gateway = config.build_gateway()?;
        let embedder = HashedBagEmbedder::default();

        let needs_retrieval = config.toggles.templatize || config.generation.few_shot_k > 0;
        let train = match (&config.paths.train_questions, &config.paths.train_labels) {
            (Some(q), Some(l)) => Some(load_dataset(q, Some(l.as_path()))?),
            (Some(q), None) => Some(load_dataset(q, None)?),
            _ => None,
        };
        let retrieval = if needs_retrieval {
            Some(build_retrieval_pool(config, train.as_ref(), &lexicons, &embedder)?)
        } else {
            None
        };

        let mut gates = GateConfig {
            patient_id: config.toggles.patient_gate,
            vocab: None,
        };
        if config.toggles.vocab_gate {
            let train = train.as_ref().ok_or_else(|| {
                PipelineError::Config("vocab gate needs paths.train_questions and paths.train_labels".into())
            })?;
            let labels = train
                .labels
                .as_ref()
                .ok_or_else(|| PipelineError::Config("vocab gate needs labeled training data".into()))?;
            let corpus: Vec<Vec<String>> = train
                .questions
                .iter()
                .filter(|q| labels.get(&q.id).is_some_and(|l| !l.is_answerable()))
                .map(|q| preprocess(&q.raw_text))
                .collect();
            gates.vocab = Some(unanswerable_vocab(&corpus));
        }

        let conn = open_readonly(database)?;
        let value_index = ValueIndex::build(&conn, &catalog)?;

        Ok(Self {
            config: config.clone(),
            catalog,
            prompts,
            lexicons,
            gateway,
            embedder,
            retrieval,
            value_index,
            gates,
        })
    }

    /// Few-shot pairs for a question, nearest templates first.
    fn few_shot_for(&self, text: &str) -> Vec<(String, String)> {
        let k = self.config.generation.few_shot_k;
        if k == 0 {
            return Vec::new();
        }
        let Some(pool) = &self.retrieval else {
            return Vec::new();
        };
        let (masked, _) = mask_values(text, &self.lexicons);
        let query = match self.embedder.embed(&masked) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("few-shot embedding failed: {e}");
                return Vec::new();
            }
        };
        match nearest_templates(&query, &pool.index, k) {
            Ok(neighbors) => neighbors
                .into_iter()
                .filter_map(|(template, _)| pool.pairs_by_template.get(&template).cloned())
                .collect(),
            Err(e) => {
                log::warn!("few-shot retrieval failed: {e}");
                Vec::new()
            }
        }
    }

    /// Templatizes one record in place, leaving it untouched on any error.
    fn templatize_record(&self, record: &mut QuestionRecord) {
        let Some(pool) = &self.retrieval else {
            return;
        };
        let embed_text = if self.config.templatize.embed_raw_text {
            record.raw_text.clone()
        } else {
            record.masked_text.clone().unwrap_or_else(|| record.raw_text.clone())
        };
        let neighbors = match self
            .embedder
            .embed(&embed_text)
            .and_then(|query| nearest_templates(&query, &pool.index, self.config.templatize.k))
        {
            Ok(neighbors) => neighbors.into_iter().map(|(template, _)| template).collect::<Vec<_>>(),
            Err(e) => {
                log::warn!("template retrieval failed for {}: {e}", record.id);
                return;
            }
        };
        if neighbors.is_empty() {
            return;
        }
        match templatize(record, &neighbors, &self.gateway, &self.prompts, &self.config.templatize.rewrite) {
            Ok(rewritten) => record.templated_text = Some(rewritten),
            Err(e) => log::warn!("templatization failed for {}: {e}", record.id),
        }
    }
}

fn build_retrieval_pool(
    config: &PipelineConfig,
    train: Option<&Dataset>,
    lexicons: &ValueLexicons,
    embedder: &HashedBagEmbedder,
) -> Result<RetrievalPool, PipelineError> {
    // template -> (question, sql) pairs come from answerable training items
    let mut pairs_by_template = BTreeMap::new();
    let mut templates: Vec<(String, String)> = Vec::new();
    if let Some(train) = train {
        let labels = train.labels.as_ref();
        for question in &train.questions {
            let (masked, _) = mask_values(&question.raw_text, lexicons);
            let sql = labels
                .and_then(|l| l.get(&question.id))
                .and_then(|label| label.answer.query_text().map(str::to_string));
            if let Some(sql) = sql {
                pairs_by_template
                    .entry(masked.clone())
                    .or_insert_with(|| (question.raw_text.clone(), sql));
            }
            templates.push((masked, question.id.clone()));
        }
    }

    let index = match &config.paths.template_index {
        Some(path) => TemplateIndex::load_jsonl(path)?,
        None => {
            if templates.is_empty() {
                return Err(PipelineError::Config(
                    "templatization or few-shot prompting needs paths.template_index or a training split".into(),
                ));
            }
            TemplateIndex::build(templates.iter().map(|(t, id)| (t.as_str(), id.as_str())), embedder)?
        }
    };
    Ok(RetrievalPool {
        index,
        pairs_by_template,
    })
}

/// Applies the unconditional execution check (plus enabled gates and, when
/// the verifier is on, name repair) to one candidate, tracking the stage it
/// ends up in.
fn finalize_candidate(
    candidate: &Candidate,
    question: &QuestionRecord,
    ctx: &RunContext,
    conn: &rusqlite::Connection,
) -> Candidate {
    use crate::model::Stage;
    let timeout = ctx.config.timeout_ms;
    if ctx.config.toggles.verify {
        let verified = verify(
            &candidate.prediction,
            question,
            conn,
            &ctx.catalog,
            &ctx.value_index,
            &ctx.gates,
            timeout,
        );
        let stage = match (&candidate.prediction, &verified) {
            (SqlOrNull::Query(_), SqlOrNull::Null) if ctx.gates.fires(question) => Stage::Gated,
            (SqlOrNull::Query(before), SqlOrNull::Query(after)) if before != after => Stage::Repaired,
            _ => candidate.stage,
        };
        return candidate.advanced(stage.max(candidate.stage), verified);
    }

    // repair disabled: gates plus the bare execution check
    let SqlOrNull::Query(sql) = &candidate.prediction else {
        return candidate.clone();
    };
    if ctx.gates.fires(question) {
        return candidate.advanced(Stage::Gated, SqlOrNull::Null);
    }
    if execute_check(sql, conn, timeout).is_rows() {
        candidate.clone()
    } else {
        candidate
            .advanced(candidate.stage, SqlOrNull::Null)
            .with_note("execution check failed")
    }
}

/// The voting member per ensemble index: the last candidate generated for
/// it.
fn member_finals(candidates: &[Candidate]) -> Vec<Candidate> {
    let mut finals: BTreeMap<usize, Candidate> = BTreeMap::new();
    for candidate in candidates {
        finals.insert(candidate.member_index, candidate.clone());
    }
    finals.into_values().collect()
}

fn reduce_members(
    finals: &[SqlOrNull],
    question_text: &str,
    ctx: &RunContext,
    conn: &rusqlite::Connection,
) -> SqlOrNull {
    if finals.is_empty() {
        return SqlOrNull::Null;
    }
    if !ctx.config.toggles.ensemble {
        return finals[0].clone();
    }
    let aligned = apply_alignment(finals, question_text, &ctx.gateway, &ctx.prompts, &ctx.config.alignment);
    majority_vote(&aligned, ctx.config.vote_mode, Some(conn), ctx.config.timeout_ms)
}

/// Runs every stage for one question. Never fails: any module error logs a
/// diagnostic and falls back toward abstention.
fn process_question(
    record: &QuestionRecord,
    ctx: &RunContext,
    conn: &rusqlite::Connection,
) -> (SqlOrNull, Vec<Candidate>) {
    let mut record = record.clone();
    let (masked, bindings) = mask_values(&record.raw_text, &ctx.lexicons);
    record.masked_text = Some(masked);
    record.bindings = bindings;
    if ctx.config.toggles.templatize {
        ctx.templatize_record(&mut record);
    }
    let question_text = record.effective_text().to_string();

    // downstream stages see the (possibly templated) text exactly as the
    // staged subcommands would read it from a file
    let stage_view = QuestionRecord::new(record.id.clone(), question_text.clone());

    let few_shot = ctx.few_shot_for(&question_text);
    let candidates = generate_stages(
        &question_text,
        &ctx.catalog,
        &ctx.config.generation,
        &ctx.gateway,
        &few_shot,
        &ctx.prompts,
        ctx.config.toggles.reflect,
    );

    let verified: Vec<Candidate> = member_finals(&candidates)
        .iter()
        .map(|c| finalize_candidate(c, &stage_view, ctx, conn))
        .collect();
    let finals: Vec<SqlOrNull> = verified.iter().map(|c| c.prediction.clone()).collect();
    let prediction = reduce_members(&finals, &question_text, ctx, conn);
    (prediction, candidates)
}

fn parallel_predictions(
    questions: &[QuestionRecord],
    ctx: &RunContext,
    database: &Path,
) -> Result<BTreeMap<String, SqlOrNull>, PipelineError> {
    if questions.is_empty() {
        return Ok(BTreeMap::new());
    }
    let jobs = ctx.config.effective_jobs(questions.len());
    let results: Mutex<BTreeMap<String, SqlOrNull>> = Mutex::new(BTreeMap::new());
    let errors: Mutex<Vec<PipelineError>> = Mutex::new(Vec::new());
    let (results_ref, errors_ref) = (&results, &errors);

    std::thread::scope(|scope| {
        for chunk in questions.chunks(questions.len().div_ceil(jobs)) {
            scope.spawn(move || {
                let conn = match open_readonly(database) {
                    Ok(conn) => conn,
                    Err(e) => {
                        errors_ref.lock().unwrap().push(PipelineError::Db(e));
                        return;
                    }
                };
                for record in chunk {
                    let (prediction, _) = process_question(record, ctx, &conn);
                    results_ref.lock().unwrap().insert(record.id.clone(), prediction);
                }
            });
        }
    });

    if let Some(error) = errors.into_inner().unwrap().into_iter().next() {
        return Err(error);
    }
    Ok(results.into_inner().unwrap())
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    config: &'a PipelineConfig,
    cache: crate::gateway::CacheStats,
    versions: BTreeMap<&'static str, String>,
}

/// Output of a full pipeline run.
pub struct RunSummary {
    pub predictions: BTreeMap<String, SqlOrNull>,
    pub report: Option<RSReport>,
    pub predictions_path: PathBuf,
    pub report_path: Option<PathBuf>,
    pub manifest_path: PathBuf,
}

/// Executes templatize -> generate -> verify -> ensemble over the
/// configured dataset, writes the predictions file, scores it when labels
/// are present, and drops a run manifest beside the outputs.
pub fn run(config: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    let questions_path = config
        .paths
        .questions
        .as_ref()
        .ok_or_else(|| PipelineError::Config("paths.questions is required".into()))?;
    let database = config
        .paths
        .database
        .as_ref()
        .ok_or_else(|| PipelineError::Config("paths.database is required".into()))?;
    if !database.exists() {
        return Err(PipelineError::Config(format!(
            "database {} does not exist",
            database.display()
        )));
    }
    let output_dir = config.paths.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&output_dir).map_err(|e| io_err(&output_dir, e))?;

    let dataset = load_dataset(questions_path, config.paths.labels.as_deref())?;
    let ctx = RunContext::build(config, database)?;
    let penalties = config.parsed_penalties()?;

    let predictions = parallel_predictions(&dataset.questions, &ctx, database)?;

    let predictions_path = output_dir.join("predictions.json");
    write_predictions(&predictions_path, &predictions)?;

    let (report, report_path) = match &dataset.labels {
        Some(labels) => {
            let conn = open_readonly(database)?;
            let report = score(&predictions, labels, &conn, config.timeout_ms, &penalties)?;
            let path = output_dir.join("report.json");
            let json = serde_json::to_string_pretty(&report.rounded()).expect("report serializes");
            fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
            (Some(report), Some(path))
        }
        None => (None, None),
    };

    let manifest = RunManifest {
        config,
        cache: ctx.gateway.stats(),
        versions: BTreeMap::from([
            ("reliasql", env!("CARGO_PKG_VERSION").to_string()),
            ("sqlite", rusqlite::version().to_string()),
        ]),
    };
    let manifest_path = output_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(|e| io_err(&manifest_path, e))?;

    Ok(RunSummary {
        predictions,
        report,
        predictions_path,
        report_path,
        manifest_path,
    })
}

#[derive(Serialize, Deserialize)]
struct StagedQuestion {
    id: String,
    question: String,
}

fn write_questions_file(path: &Path, questions: &[StagedQuestion]) -> Result<(), PipelineError> {
    let json = serde_json::to_string_pretty(questions).expect("questions serialize");
    fs::write(path, json + "\n").map_err(|e| io_err(path, e))
}

/// Candidates files map question id -> candidate list, preserving
/// generation order.
pub type CandidateFile = BTreeMap<String, Vec<Candidate>>;

fn write_candidates(path: &Path, candidates: &CandidateFile) -> Result<(), PipelineError> {
    let json = serde_json::to_string_pretty(candidates).expect("candidates serialize");
    fs::write(path, json + "\n").map_err(|e| io_err(path, e))
}

fn read_candidates(path: &Path) -> Result<CandidateFile, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// `templatize` subcommand: rewrites every question and writes a questions
/// file the next stage can read.
pub fn stage_templatize(config: &PipelineConfig, questions: &Path, out: &Path) -> Result<(), PipelineError> {
    let database = config
        .paths
        .database
        .as_ref()
        .ok_or_else(|| PipelineError::Config("paths.database is required".into()))?;
    let dataset = load_dataset(questions, None)?;
    let mut ctx = RunContext::build(config, database)?;
    ctx.config.toggles.templatize = true;
    let staged: Vec<StagedQuestion> = dataset
        .questions
        .iter()
        .map(|record| {
            let mut record = record.clone();
            let (masked, bindings) = mask_values(&record.raw_text, &ctx.lexicons);
            record.masked_text = Some(masked);
            record.bindings = bindings;
            ctx.templatize_record(&mut record);
            StagedQuestion {
                id: record.id.clone(),
                question: record.effective_text().to_string(),
            }
        })
        .collect();
    write_questions_file(out, &staged)
}

/// `generate` subcommand: produces the full candidate file for a questions
/// file.
pub fn stage_generate(config: &PipelineConfig, questions: &Path, out: &Path) -> Result<(), PipelineError> {
    let database = config
        .paths
        .database
        .as_ref()
        .ok_or_else(|| PipelineError::Config("paths.database is required".into()))?;
    let dataset = load_dataset(questions, None)?;
    let ctx = RunContext::build(config, database)?;
    let mut file = CandidateFile::new();
    for record in &dataset.questions {
        let few_shot = ctx.few_shot_for(&record.raw_text);
        let candidates = generate_stages(
            &record.raw_text,
            &ctx.catalog,
            &ctx.config.generation,
            &ctx.gateway,
            &few_shot,
            &ctx.prompts,
            ctx.config.toggles.reflect,
        );
        file.insert(record.id.clone(), candidates);
    }
    write_candidates(out, &file)
}

/// `verify` subcommand: verifies every candidate in a candidate file
/// against the database, in place.
pub fn stage_verify(
    config: &PipelineConfig,
    questions: &Path,
    candidates: &Path,
    out: &Path,
) -> Result<(), PipelineError> {
    let database = config
        .paths
        .database
        .as_ref()
        .ok_or_else(|| PipelineError::Config("paths.database is required".into()))?;
    let dataset = load_dataset(questions, None)?;
    let ctx = RunContext::build(config, database)?;
    let conn = open_readonly(database)?;
    let file = read_candidates(candidates)?;
    let mut verified = CandidateFile::new();
    for (id, entries) in file {
        let question = dataset
            .question(&id)
            .cloned()
            .unwrap_or_else(|| QuestionRecord::new(id.clone(), ""));
        let entries = entries
            .iter()
            .map(|c| finalize_candidate(c, &question, &ctx, &conn))
            .collect();
        verified.insert(id, entries);
    }
    write_candidates(out, &verified)
}

/// `ensemble` subcommand: reduces a (verified) candidate file to a
/// predictions file.
pub fn stage_ensemble(
    config: &PipelineConfig,
    questions: &Path,
    candidates: &Path,
    out: &Path,
) -> Result<(), PipelineError> {
    let database = config
        .paths
        .database
        .as_ref()
        .ok_or_else(|| PipelineError::Config("paths.database is required".into()))?;
    let dataset = load_dataset(questions, None)?;
    let ctx = RunContext::build(config, database)?;
    let conn = open_readonly(database)?;
    let file = read_candidates(candidates)?;
    let mut predictions = BTreeMap::new();
    for (id, entries) in file {
        let question_text = dataset.question(&id).map(|q| q.raw_text.clone()).unwrap_or_default();
        let finals: Vec<SqlOrNull> = member_finals(&entries).iter().map(|c| c.prediction.clone()).collect();
        predictions.insert(id, reduce_members(&finals, &question_text, &ctx, &conn));
    }
    write_predictions(out, &predictions)?;
    Ok(())
}

/// `score` subcommand: scores a predictions file against gold labels.
pub fn stage_score(
    predictions_path: &Path,
    golds_path: &Path,
    database: &Path,
    penalties: &[Penalty],
    timeout_ms: u64,
) -> Result<RSReport, PipelineError> {
    let predictions = load_predictions(predictions_path)?;
    let golds = load_labels(golds_path)?;
    let conn = open_readonly(database)?;
    Ok(score(&predictions, &golds, &conn, timeout_ms, penalties)?)
}

/// N-gram analysis report for one split.
#[derive(Debug, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub split: String,
    pub question_count: usize,
    pub tables: Vec<NGramTable>,
}

/// `analyze` subcommand: preprocesses a split and builds its 1..=`max_n`
/// gram tables, truncated to `top` entries each. With labels and
/// `unanswerable_only`, restricts to questions whose gold label is null.
pub fn stage_analyze(
    questions: &Path,
    labels: Option<&Path>,
    unanswerable_only: bool,
    max_n: usize,
    top: usize,
    split_name: Option<&str>,
) -> Result<AnalysisReport, PipelineError> {
    let dataset = load_dataset(questions, labels)?;
    let corpus: Vec<Vec<String>> = dataset
        .questions
        .iter()
        .filter(|q| {
            if !unanswerable_only {
                return true;
            }
            dataset
                .labels
                .as_ref()
                .and_then(|l| l.get(&q.id))
                .is_some_and(|label| !label.is_answerable())
        })
        .map(|q| preprocess(&q.raw_text))
        .collect();
    let tables: Vec<NGramTable> = (1..=max_n.clamp(1, 3))
        .map(|n| {
            let mut table = ngram_counts(&corpus, n);
            table.counts.truncate(top);
            table
        })
        .collect();
    Ok(AnalysisReport {
        split: split_name.map(str::to_string).unwrap_or_else(|| {
            if unanswerable_only {
                format!("{} (unanswerable)", dataset.split_name)
            } else {
                dataset.split_name.clone()
            }
        }),
        question_count: corpus.len(),
        tables,
    })
}

/// `split` subcommand: stratified k-fold assignment over the labeled
/// questions, with unanswerable questions stratified by category.
pub fn stage_split(
    questions: &Path,
    labels: &Path,
    k: usize,
    seed: u64,
    categorizer: &CategorizerConfig,
) -> Result<FoldAssignment, PipelineError> {
    let dataset = load_dataset(questions, Some(labels))?;
    Ok(fold_dataset(&dataset, k, seed, categorizer)?)
}

/// Stratifies a labeled dataset: answerable questions form one stratum,
/// unanswerable ones are stratified by their category.
pub fn fold_dataset(
    dataset: &Dataset,
    k: usize,
    seed: u64,
    categorizer: &CategorizerConfig,
) -> Result<FoldAssignment, DatasetError> {
    let labels = dataset.labels.clone().unwrap_or_default();
    let by_id: BTreeMap<String, String> = dataset
        .questions
        .iter()
        .map(|q| {
            let stratum = match labels.get(&q.id) {
                Some(label) if !label.is_answerable() => {
                    categorize_unanswerable(q, categorizer).as_str().to_string()
                }
                _ => "answerable".to_string(),
            };
            (q.id.clone(), stratum)
        })
        .collect();
    stratified_kfold(dataset, k, |id| by_id[id].clone(), seed)
}
