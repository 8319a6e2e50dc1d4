//! Two-round annotation sessions backed by a directory.
//!
//! A session walks through `marking -> static_trained -> reviewing ->
//! corrected -> final`. Marks and review verdicts are stored in the session
//! whether they come from a person (through the service) or from the
//! oracle, so both modes share one code path.
//!
//! Directory layout:
//!
//! ```text
//! config.json   state.json   metrics.json
//! datasets/*.jsonl           models/*.bin
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::active::uncertainty_sample;
use crate::augment::{duplicate_baseline, expand_dataset, random_replacement_baseline, DEFAULT_RATE};
use crate::corpus::{load_corpus, save_corpus, validate_spans, Dataset, Document, RationaleSpan, SplitTag};
use crate::correction::{dynamic_augment_reviewed, oracle_verdicts, write_reviews, DocReview, DynamicConfig};
use crate::error::{Error, Result};
use crate::model::{evaluate_accuracy, train, LinearTextModel, ModelConfig, TrainReport};
use crate::report::{ArmReport, Cell, Report, SensitivityCell};
use crate::rng::TracedRng;
use crate::saliency::{extract_model_rationales, sensitivity_report, ModelRationaleSet, ScoredSpan};
use crate::synonyms::{load_lexicon, HttpSynonymProvider, SynonymProvider};
use crate::synth::{synth_spurious_corpus, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSources {
    /// Unlabelled-for-rationales pool the gold set and batch are drawn from.
    pub pool: PathBuf,
    pub val: PathBuf,
    /// Evaluation sets, reported in this order.
    pub tests: Vec<TestSet>,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    /// Base URL of a synonym service, used instead of a lexicon.
    #[serde(default)]
    pub synonym_service: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthConfig),
    Files(FileSources),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    /// Semi-factual variants that keep rationales intact.
    #[default]
    Static,
    /// Each gold document repeated `per_doc + 1` times.
    Duplicate,
    /// Synonym replacement that may hit rationales too.
    RandomReplacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Round2Kind {
    /// Review model rationales and generate corrective examples.
    #[default]
    Dynamic,
    /// Only add the uncertainty-sampled batch.
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Round2Config {
    pub kind: Round2Kind,
    pub k_new: usize,
    pub balance: bool,
    pub correction: DynamicConfig,
}

impl Default for Round2Config {
    fn default() -> Self {
        Round2Config {
            kind: Round2Kind::Dynamic,
            k_new: 50,
            balance: true,
            correction: DynamicConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityOptions {
    /// Evaluation set to measure on; the first one carrying gold rationales
    /// when unset.
    pub dataset: Option<String>,
    pub samples: usize,
    pub p_drop: f64,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        SensitivityOptions {
            dataset: None,
            samples: 0,
            p_drop: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub data: DataSource,
    pub n_gold: usize,
    pub per_doc: usize,
    pub rate: f64,
    pub seed: u64,
    pub augmentation: Augmentation,
    pub model: ModelConfig,
    /// Use only the first `val_size` validation documents.
    pub val_size: Option<usize>,
    /// `None` stops after the static round.
    pub round2: Option<Round2Config>,
    pub sensitivity: SensitivityOptions,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            data: DataSource::Synthetic(SynthConfig::default()),
            n_gold: 50,
            per_doc: 7,
            rate: DEFAULT_RATE,
            seed: 0,
            augmentation: Augmentation::Static,
            model: ModelConfig::default(),
            val_size: None,
            round2: Some(Round2Config::default()),
            sensitivity: SensitivityOptions::default(),
        }
    }
}

impl LoopConfig {
    /// Read a config file; relative data paths are taken relative to it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: LoopConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let DataSource::Files(files) = &mut self.data {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut files.pool);
            fix(&mut files.val);
            for t in &mut files.tests {
                fix(&mut t.path);
            }
            if let Some(l) = &mut files.lexicon {
                fix(l);
            }
        }
    }

    /// Every problem with the config, each prefixed by its field.
    pub fn field_errors(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.n_gold == 0 || self.n_gold % 2 != 0 {
            errors.push(format!("n_gold: must be a positive even number, got {}", self.n_gold));
        }
        if !(self.rate.is_finite() && self.rate > 0.0 && self.rate <= 1.0) {
            errors.push(format!("rate: must be in (0, 1], got {}", self.rate));
        }
        if self.augmentation == Augmentation::Duplicate && self.per_doc == 0 {
            errors.push("per_doc: duplication needs at least one extra copy".into());
        }
        if let Err(e) = self.model.validate() {
            errors.push(format!("model: {e}"));
        }
        if self.val_size == Some(0) {
            errors.push("val_size: must be positive".into());
        }
        if let Some(r2) = &self.round2 {
            if r2.k_new == 0 {
                errors.push("round2.k_new: must be positive".into());
            }
            if r2.balance && r2.k_new % 2 != 0 {
                errors.push(format!(
                    "round2.k_new: balanced selection needs an even number, got {}",
                    r2.k_new
                ));
            }
            let c = &r2.correction;
            if !(c.rate.is_finite() && c.rate > 0.0 && c.rate <= 1.0) {
                errors.push(format!("round2.correction.rate: must be in (0, 1], got {}", c.rate));
            }
            if c.saliency.k == 0 {
                errors.push("round2.correction.saliency.k: must be positive".into());
            }
        }
        match &self.data {
            DataSource::Files(f) => {
                if f.tests.is_empty() {
                    errors.push("data.files.tests: at least one evaluation set is required".into());
                }
                if f.lexicon.is_some() == f.synonym_service.is_some() {
                    errors.push("data.files: give exactly one of lexicon and synonym_service".into());
                }
            }
            DataSource::Synthetic(s) => {
                if s.n < self.n_gold {
                    errors.push("data.synthetic.n: pool smaller than n_gold".into());
                }
            }
        }
        errors
    }

    pub fn validate(&self) -> Result<()> {
        let errors = self.field_errors();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors.join("; ")))
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Corpora and synonym source a session works on.
pub struct Workspace {
    pub pool: Dataset,
    pub val: Dataset,
    pub tests: Vec<(String, Dataset)>,
    pub provider: Arc<dyn SynonymProvider>,
}

impl fmt::Debug for Workspace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Workspace")
            .field("pool", &self.pool.len())
            .field("val", &self.val.len())
            .field(
                "tests",
                &self.tests.iter().map(|(n, d)| (n, d.len())).collect::<Vec<_>>(),
            )
            .finish()
    }
}

impl Workspace {
    pub fn load(config: &LoopConfig) -> Result<Self> {
        let mut ws = match &config.data {
            DataSource::Synthetic(s) => {
                let c = synth_spurious_corpus(s)?;
                Workspace {
                    pool: c.train_pool,
                    val: c.val,
                    tests: vec![("in_dist".into(), c.test_in), ("ood".into(), c.test_ood)],
                    provider: Arc::new(c.lexicon),
                }
            }
            DataSource::Files(f) => {
                let provider: Arc<dyn SynonymProvider> = match (&f.lexicon, &f.synonym_service) {
                    (Some(path), _) => Arc::new(load_lexicon(path)?),
                    (None, Some(url)) => Arc::new(HttpSynonymProvider::new(url, true)),
                    (None, None) => return Err(Error::Validation("no synonym source configured".into())),
                };
                let mut tests = Vec::with_capacity(f.tests.len());
                for t in &f.tests {
                    tests.push((t.name.clone(), load_corpus(&t.path, SplitTag::Test)?));
                }
                Workspace {
                    pool: load_corpus(&f.pool, SplitTag::Train)?,
                    val: load_corpus(&f.val, SplitTag::Validation)?,
                    tests,
                    provider,
                }
            }
        };
        if let Some(n) = config.val_size {
            if n < ws.val.len() {
                ws.val.documents.truncate(n);
            }
        }
        Ok(ws)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Marking,
    StaticTrained,
    Reviewing,
    Corrected,
    Final,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Marking => "marking",
            Phase::StaticTrained => "static_trained",
            Phase::Reviewing => "reviewing",
            Phase::Corrected => "corrected",
            Phase::Final => "final",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Oracle,
    Human,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Mode::Oracle),
            "human" => Ok(Mode::Human),
            other => Err(Error::Validation(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub phase: Phase,
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub config: LoopConfig,
    /// Round-one gold documents.
    pub gold_ids: Vec<String>,
    /// Round-two documents chosen by uncertainty sampling.
    pub batch_ids: Vec<String>,
    /// Pool documents not yet used.
    pub pool_ids: Vec<String>,
    pub marks: BTreeMap<String, Vec<RationaleSpan>>,
    pub surfaced: BTreeMap<String, ModelRationaleSet>,
    pub reviews: BTreeMap<String, DocReview>,
    /// Dataset file stem to example counts by provenance.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    /// Round name to model path inside the session directory.
    pub models: BTreeMap<String, String>,
    pub train_reports: BTreeMap<String, TrainReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Mark,
    Review,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDoc {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: crate::corpus::Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskContext {
    pub phase: Phase,
    pub remaining: usize,
    /// Spans marked so far (the gold rationales once reviewing).
    pub marks: Vec<RationaleSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_rationales: Option<Vec<ScoredSpan>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_type: TaskType,
    pub doc: TaskDoc,
    pub context: TaskContext,
}

pub const STATE_FILE: &str = "state.json";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";

fn provenance_key(doc: &Document) -> &'static str {
    doc.augmented
        .as_ref()
        .map(|a| a.provenance.as_str())
        .unwrap_or("original")
}

fn count_provenance(ds: &Dataset) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for d in &ds.documents {
        *counts.entry(provenance_key(d).to_string()).or_insert(0) += 1;
    }
    counts
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// A live session: persisted state plus the loaded corpora.
#[derive(Debug, Clone)]
pub struct Session {
    dir: PathBuf,
    state: SessionState,
    data: Arc<Workspace>,
}

impl Session {
    pub fn create(dir: impl Into<PathBuf>, session_id: &str, config: LoopConfig, mode: Mode) -> Result<Self> {
        config.validate()?;
        let data = Arc::new(Workspace::load(&config)?);
        Self::create_with(dir, session_id, config, mode, data)
    }

    /// Create a session over an already loaded workspace.
    pub fn create_with(
        dir: impl Into<PathBuf>,
        session_id: &str,
        config: LoopConfig,
        mode: Mode,
        data: Arc<Workspace>,
    ) -> Result<Self> {
        config.validate()?;
        let dir = dir.into();
        let (gold_ids, pool_ids) = sample_gold(&data.pool, config.n_gold, config.seed)?;
        for sub in ["datasets", "models"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        write_json(&dir.join(CONFIG_FILE), &config)?;
        let state = SessionState {
            session_id: session_id.to_string(),
            phase: Phase::Marking,
            mode,
            seed: config.seed,
            config_hash: config.hash(),
            config,
            gold_ids,
            batch_ids: Vec::new(),
            pool_ids,
            marks: BTreeMap::new(),
            surfaced: BTreeMap::new(),
            reviews: BTreeMap::new(),
            counts: BTreeMap::new(),
            models: BTreeMap::new(),
            train_reports: BTreeMap::new(),
            warnings: Vec::new(),
        };
        let session = Session { dir, state, data };
        session.save_state()?;
        Ok(session)
    }

    /// Reopen a session directory.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let state: SessionState = read_json(&dir.join(STATE_FILE))?;
        let data = Arc::new(Workspace::load(&state.config)?);
        Ok(Session { dir, state, data })
    }

    pub fn open_with(dir: impl Into<PathBuf>, data: Arc<Workspace>) -> Result<Self> {
        let dir = dir.into();
        let state: SessionState = read_json(&dir.join(STATE_FILE))?;
        Ok(Session { dir, state, data })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn workspace(&self) -> &Arc<Workspace> {
        &self.data
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    fn save_state(&self) -> Result<()> {
        write_json(&self.dir.join(STATE_FILE), &self.state)
    }

    fn round2(&self) -> Option<Round2Config> {
        self.state.config.round2
    }

    fn phase_error(&self, action: &str) -> Error {
        Error::Phase {
            session_id: self.state.session_id.clone(),
            phase: self.state.phase.to_string(),
            action: action.to_string(),
        }
    }

    fn pool_doc(&self, id: &str) -> Result<&Document> {
        self.data
            .pool
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("document {id}")))
    }

    /// Pool document carrying the session's marks as its rationales.
    pub fn marked_doc(&self, id: &str) -> Result<Document> {
        let mut doc = self.pool_doc(id)?.clone();
        if let Some(spans) = self.state.marks.get(id) {
            doc.set_rationales(spans)?;
        }
        Ok(doc)
    }

    fn marked_dataset(&self, ids: &[String]) -> Result<Dataset> {
        let docs = ids.iter().map(|id| self.marked_doc(id)).collect::<Result<Vec<_>>>()?;
        Dataset::new(docs, SplitTag::Train)
    }

    /// Documents that must be marked in the current phase.
    fn markable(&self) -> &[String] {
        match self.state.phase {
            Phase::Marking => &self.state.gold_ids,
            Phase::StaticTrained if matches!(self.round2(), Some(r) if r.kind == Round2Kind::Dynamic) => {
                &self.state.batch_ids
            }
            _ => &[],
        }
    }

    fn reviewed_ids(&self) -> Vec<String> {
        self.state
            .gold_ids
            .iter()
            .chain(&self.state.batch_ids)
            .cloned()
            .collect()
    }

    /// Work left before the current phase can advance.
    pub fn pending(&self) -> Vec<String> {
        match self.state.phase {
            Phase::Marking | Phase::StaticTrained => self
                .markable()
                .iter()
                .filter(|id| !self.state.marks.contains_key(*id))
                .cloned()
                .collect(),
            Phase::Reviewing => self
                .reviewed_ids()
                .into_iter()
                .filter(|id| !self.state.reviews.contains_key(id))
                .collect(),
            Phase::Corrected | Phase::Final => Vec::new(),
        }
    }

    /// Record (or replace) the rationale marks for one document.
    pub fn mark(&mut self, doc_id: &str, spans: &[RationaleSpan]) -> Result<()> {
        if !self.markable().iter().any(|id| id == doc_id) {
            if self.pool_doc(doc_id).is_err() {
                return Err(Error::NotFound(format!("document {doc_id}")));
            }
            return Err(self.phase_error(&format!("marking {doc_id}")));
        }
        let doc = self.pool_doc(doc_id)?;
        let spans = validate_spans(doc_id, doc.len(), spans)?;
        self.state.marks.insert(doc_id.to_string(), spans);
        self.save_state()
    }

    /// Record (or replace) the review of one document's model rationales.
    pub fn review(&mut self, doc_id: &str, review: DocReview) -> Result<()> {
        if self.state.phase != Phase::Reviewing {
            return Err(self.phase_error(&format!("reviewing {doc_id}")));
        }
        let surfaced = self
            .state
            .surfaced
            .get(doc_id)
            .ok_or_else(|| Error::NotFound(format!("document {doc_id} is not under review")))?;
        let doc = self.marked_doc(doc_id)?;
        review.validate(&doc, surfaced)?;
        let mut review = review;
        review.verdicts.sort_by_key(|v| v.span);
        review.missing.sort_by_key(|m| m.span);
        review.missing.dedup();
        self.state.reviews.insert(doc_id.to_string(), review);
        self.save_state()
    }

    /// Complete the current phase's pending work from stored gold
    /// annotations.
    pub fn fill_from_oracle(&mut self) -> Result<()> {
        match self.state.phase {
            Phase::Marking | Phase::StaticTrained => {
                let pending = self.pending();
                let unannotated: Vec<String> = pending
                    .iter()
                    .filter(|id| self.pool_doc(id).map(|d| d.rationales().is_empty()).unwrap_or(true))
                    .cloned()
                    .collect();
                if !unannotated.is_empty() {
                    return Err(Error::Validation(format!(
                        "gold documents without rationales: {}",
                        unannotated.join(", ")
                    )));
                }
                for id in pending {
                    let spans = self.pool_doc(&id)?.rationales().to_vec();
                    self.state.marks.insert(id, spans);
                }
            }
            Phase::Reviewing => {
                for id in self.pending() {
                    let doc = self.marked_doc(&id)?;
                    let review = oracle_verdicts(&doc, &self.state.surfaced[&id]);
                    self.state.reviews.insert(id, review);
                }
            }
            Phase::Corrected | Phase::Final => {}
        }
        self.save_state()
    }

    /// The next unfinished unit of human work, if any.
    pub fn next_task(&self) -> Result<Option<Task>> {
        let pending = self.pending();
        let Some(id) = pending.first() else {
            return Ok(None);
        };
        let doc = self.marked_doc(id)?;
        let (task_type, model_rationales) = match self.state.phase {
            Phase::Reviewing => (TaskType::Review, Some(self.state.surfaced[id].spans.clone())),
            _ => (TaskType::Mark, None),
        };
        Ok(Some(Task {
            task_type,
            doc: TaskDoc {
                id: doc.id.clone(),
                tokens: doc.surfaces().iter().map(|s| s.to_string()).collect(),
                label: doc.label,
            },
            context: TaskContext {
                phase: self.state.phase,
                remaining: pending.len(),
                marks: self.state.marks.get(id).cloned().unwrap_or_default(),
                model_rationales,
            },
        }))
    }

    /// Run the step that closes the current phase.
    pub fn advance(&mut self) -> Result<Phase> {
        let pending = self.pending();
        if !pending.is_empty() {
            return Err(Error::Pending(pending));
        }
        match self.state.phase {
            Phase::Marking => self.static_step()?,
            Phase::StaticTrained => match self.round2() {
                None => self.state.phase = Phase::Final,
                Some(r) if r.kind == Round2Kind::Active => self.active_step()?,
                Some(r) => self.surface_step(&r)?,
            },
            Phase::Reviewing => self.correction_step()?,
            Phase::Corrected => self.retrain_step()?,
            Phase::Final => return Err(self.phase_error("advance")),
        }
        self.save_state()?;
        Ok(self.state.phase)
    }

    /// Marks the gold set (from the oracle in oracle mode), expands, trains
    /// and evaluates.
    pub fn run_static_round(&mut self) -> Result<Phase> {
        if self.state.phase != Phase::Marking {
            return Err(self.phase_error("the static round"));
        }
        if self.state.mode == Mode::Oracle {
            self.fill_from_oracle()?;
        }
        self.advance()
    }

    /// Runs every remaining round-two step, taking marks and verdicts from
    /// the oracle in oracle mode.
    pub fn run_dynamic_round(&mut self) -> Result<Phase> {
        if self.state.phase < Phase::StaticTrained {
            return Err(self.phase_error("the dynamic round"));
        }
        while self.state.phase != Phase::Final {
            if self.state.mode == Mode::Oracle {
                self.fill_from_oracle()?;
            }
            self.advance()?;
        }
        Ok(self.state.phase)
    }

    pub fn run_to_end(&mut self) -> Result<Phase> {
        if self.state.phase == Phase::Marking {
            self.run_static_round()?;
        }
        self.run_dynamic_round()
    }

    pub fn metrics(&self) -> Result<Report> {
        let path = self.dir.join(METRICS_FILE);
        if !path.exists() {
            return Ok(Report {
                datasets: self.data.tests.iter().map(|(n, _)| n.clone()).collect(),
                arms: Vec::new(),
            });
        }
        read_json(&path)
    }

    pub fn dataset_path(&self, stem: &str) -> PathBuf {
        self.dir.join("datasets").join(format!("{stem}.jsonl"))
    }

    pub fn model_path(&self, round: &str) -> PathBuf {
        self.dir.join("models").join(format!("{round}.bin"))
    }

    pub fn load_model(&self, round: &str) -> Result<LinearTextModel> {
        LinearTextModel::load(self.model_path(round))
    }

    /// Check the recorded provenance counts against the datasets on disk.
    pub fn audit(&self) -> Result<()> {
        for (stem, expected) in &self.state.counts {
            let ds = load_corpus(self.dataset_path(stem), SplitTag::Train)?;
            let actual = count_provenance(&ds);
            if &actual != expected {
                return Err(Error::Validation(format!(
                    "{stem}: recorded counts {expected:?} but found {actual:?}"
                )));
            }
        }
        Ok(())
    }

    fn save_dataset(&mut self, stem: &str, ds: &Dataset) -> Result<()> {
        save_corpus(ds, self.dataset_path(stem))?;
        self.state.counts.insert(stem.to_string(), count_provenance(ds));
        Ok(())
    }

    fn train_round(&mut self, round: &str, train_set: &Dataset) -> Result<LinearTextModel> {
        let config = self.state.config.clone();
        let (model, report) = train(train_set, &self.data.val, &config.model, config.seed)?;
        let path = self.model_path(round);
        model.save(&path)?;
        self.state
            .models
            .insert(round.to_string(), format!("models/{round}.bin"));
        self.state.train_reports.insert(round.to_string(), report);

        let arm = self.evaluate(round, &model, train_set.len())?;
        let mut metrics = self.metrics()?;
        metrics.arms.retain(|a| a.name != round);
        metrics.arms.push(arm);
        write_json(&self.dir.join(METRICS_FILE), &metrics)?;
        Ok(model)
    }

    fn evaluate(&mut self, round: &str, model: &LinearTextModel, train_size: usize) -> Result<ArmReport> {
        let mut cells = Vec::with_capacity(self.data.tests.len());
        for (name, ds) in &self.data.tests {
            cells.push(Cell::from_fractions(name, &[evaluate_accuracy(model, ds)?]));
        }
        let opts = &self.state.config.sensitivity;
        let target = match &opts.dataset {
            Some(name) => Some(
                self.data
                    .tests
                    .iter()
                    .find(|(n, _)| n == name)
                    .ok_or_else(|| Error::Validation(format!("sensitivity.dataset: no evaluation set {name:?}")))?,
            ),
            None => self
                .data
                .tests
                .iter()
                .find(|(_, d)| d.documents.iter().any(|doc| !doc.rationales().is_empty())),
        };
        let sensitivity = match target {
            None => None,
            Some((name, ds)) => match sensitivity_report(model, ds, opts.samples, opts.p_drop, self.state.seed) {
                Ok(rep) => Some(SensitivityCell::from_reports(name, vec![rep])),
                Err(e) => {
                    self.state
                        .warnings
                        .push(format!("{round}: sensitivity unavailable: {e}"));
                    None
                }
            },
        };
        Ok(ArmReport {
            name: round.to_string(),
            train_size: Some(train_size),
            seeds: vec![self.state.seed],
            cells,
            sensitivity,
            failed: None,
        })
    }

    fn static_step(&mut self) -> Result<()> {
        let config = self.state.config.clone();
        let gold = self.marked_dataset(&self.state.gold_ids.clone())?;
        self.save_dataset("gold", &gold)?;
        let provider = self.data.provider.clone();
        let train_set = match config.augmentation {
            Augmentation::Static => {
                let exp = expand_dataset(&gold, provider.as_ref(), config.per_doc, config.rate, config.seed)?;
                self.record_shortfalls("static", &exp.shortfalls);
                exp.dataset
            }
            Augmentation::RandomReplacement => {
                let exp =
                    random_replacement_baseline(&gold, provider.as_ref(), config.per_doc, config.rate, config.seed)?;
                self.record_shortfalls("random", &exp.shortfalls);
                exp.dataset
            }
            Augmentation::Duplicate => duplicate_baseline(&gold, config.per_doc + 1)?,
        };
        self.save_dataset("static_train", &train_set)?;
        let model = self.train_round("static", &train_set)?;

        if let Some(r2) = config.round2 {
            let rest: Vec<Document> = self
                .state
                .pool_ids
                .iter()
                .map(|id| self.pool_doc(id).cloned())
                .collect::<Result<_>>()?;
            let rest = Dataset::new(rest, SplitTag::Train)?;
            let batch = uncertainty_sample(&model, &rest, r2.k_new, r2.balance)?;
            let chosen: HashSet<&String> = batch.iter().collect();
            self.state.pool_ids.retain(|id| !chosen.contains(id));
            self.state.batch_ids = batch;
        }
        self.state.phase = Phase::StaticTrained;
        Ok(())
    }

    fn record_shortfalls(&mut self, what: &str, shortfalls: &[(String, String)]) {
        for (id, reason) in shortfalls {
            self.state.warnings.push(format!("{what} {id}: {reason}"));
        }
    }

    fn active_step(&mut self) -> Result<()> {
        let ids = self.reviewed_ids();
        let train_set = self.marked_dataset(&ids)?;
        self.save_dataset("final_train", &train_set)?;
        self.train_round("active", &train_set)?;
        self.state.phase = Phase::Final;
        Ok(())
    }

    fn surface_step(&mut self, r2: &Round2Config) -> Result<()> {
        let model = self.load_model("static")?;
        let docs = self.marked_dataset(&self.reviewed_ids())?;
        self.save_dataset("round2_gold", &docs)?;
        let seed = self.state.seed;
        let sets: Vec<ModelRationaleSet> = docs
            .documents
            .par_iter()
            .map(|d| extract_model_rationales(&model, d, &r2.correction.saliency, seed))
            .collect::<Result<_>>()?;
        let mut lines = Vec::new();
        for set in &sets {
            serde_json::to_writer(&mut lines, set)?;
            lines.push(b'\n');
        }
        write_atomic(&self.dataset_path("surfaced"), &lines)?;
        self.state.surfaced = sets.into_iter().map(|s| (s.doc_id.clone(), s)).collect();
        self.state.phase = Phase::Reviewing;
        Ok(())
    }

    fn correction_step(&mut self) -> Result<()> {
        let r2 = self.round2().ok_or_else(|| self.phase_error("correction"))?;
        let docs = self.marked_dataset(&self.reviewed_ids())?;
        let seed = self.state.seed;
        let provider = self.data.provider.clone();
        let reviews = &self.state.reviews;
        let outcomes: Vec<_> = docs
            .documents
            .par_iter()
            .map(|d| dynamic_augment_reviewed(d, &reviews[&d.id], provider.as_ref(), &r2.correction, seed))
            .collect::<Result<_>>()?;
        let mut generated = Vec::new();
        let mut warnings = Vec::new();
        for (doc, outcome) in docs.documents.iter().zip(outcomes) {
            warnings.extend(outcome.warnings.iter().cloned());
            if outcome.shortfall {
                warnings.push(format!(
                    "{}: {} of {} corrective examples",
                    doc.id,
                    outcome.len(),
                    r2.correction.mr_count + r2.correction.fr_count
                ));
            }
            generated.extend(outcome.into_documents()?);
        }
        self.state.warnings.extend(warnings);
        let generated = Dataset::new(generated, SplitTag::Train)?;
        self.save_dataset("generated", &generated)?;
        let mut verdicts = Vec::new();
        write_reviews(&self.state.reviews, &mut verdicts).map_err(|e| Error::io(self.dataset_path("verdicts"), e))?;
        write_atomic(&self.dataset_path("verdicts"), &verdicts)?;
        self.state.phase = Phase::Corrected;
        Ok(())
    }

    fn retrain_step(&mut self) -> Result<()> {
        let mut docs = self.marked_dataset(&self.reviewed_ids())?.documents;
        let generated = load_corpus(self.dataset_path("generated"), SplitTag::Train)?;
        docs.extend(generated.documents);
        let train_set = Dataset::new(docs, SplitTag::Train)?;
        self.save_dataset("final_train", &train_set)?;
        self.train_round("dynamic", &train_set)?;
        self.state.phase = Phase::Final;
        Ok(())
    }
}

/// Balanced gold sample: `n_gold / 2` per class, in pool order; the rest of
/// the pool in pool order.
fn sample_gold(pool: &Dataset, n_gold: usize, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let half = n_gold / 2;
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, d) in pool.documents.iter().enumerate() {
        if d.label.is_positive() {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    if pos.len() < half || neg.len() < half {
        return Err(Error::Validation(format!(
            "pool has {} positive / {} negative documents, {half} of each needed",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = TracedRng::derived(seed, &[b"gold"]);
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let mut chosen: Vec<usize> = pos[..half].iter().chain(&neg[..half]).copied().collect();
    chosen.sort_unstable();
    let chosen_set: HashSet<usize> = chosen.iter().copied().collect();
    let ids = |idx: &mut dyn Iterator<Item = usize>| idx.map(|i| pool.documents[i].id.clone()).collect::<Vec<_>>();
    let gold = ids(&mut chosen.iter().copied());
    let rest = ids(&mut (0..pool.len()).filter(|i| !chosen_set.contains(i)));
    Ok((gold, rest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> LoopConfig {
        LoopConfig {
            data: DataSource::Synthetic(SynthConfig {
                n: 120,
                n_val: 40,
                n_test: 60,
                ..SynthConfig::default()
            }),
            n_gold: 10,
            per_doc: 3,
            round2: Some(Round2Config {
                k_new: 10,
                ..Round2Config::default()
            }),
            ..LoopConfig::default()
        }
    }

    #[test]
    fn gold_sample_is_balanced_and_disjoint() {
        let ws = Workspace::load(&small_config()).unwrap();
        let (gold, rest) = sample_gold(&ws.pool, 10, 3).unwrap();
        assert_eq!(gold.len(), 10);
        assert_eq!(rest.len(), 110);
        let pos = gold
            .iter()
            .filter(|id| ws.pool.get(id).unwrap().label.is_positive())
            .count();
        assert_eq!(pos, 5);
        assert!(gold.iter().all(|g| !rest.contains(g)));
    }

    #[test]
    fn oracle_run_reaches_final_with_expected_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Session::create(dir.path(), "t", small_config(), Mode::Oracle).unwrap();
        assert_eq!(s.run_static_round().unwrap(), Phase::StaticTrained);
        assert_eq!(s.state().counts["static_train"].values().sum::<usize>(), 40);
        assert_eq!(s.state().batch_ids.len(), 10);
        assert_eq!(s.run_dynamic_round().unwrap(), Phase::Final);
        assert_eq!(s.state().counts["final_train"].values().sum::<usize>(), 20 + 20 * 7);
        s.audit().unwrap();
        let reopened = Session::open(dir.path()).unwrap();
        assert_eq!(reopened.state(), s.state());
        let metrics = s.metrics().unwrap();
        assert_eq!(metrics.arms.len(), 2);
    }

    #[test]
    fn human_mode_blocks_on_pending_work() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Session::create(dir.path(), "h", small_config(), Mode::Human).unwrap();
        match s.advance() {
            Err(Error::Pending(ids)) => assert_eq!(ids.len(), 10),
            other => panic!("expected pending, got {other:?}"),
        }
        let first = s.next_task().unwrap().unwrap();
        assert_eq!(first.task_type, TaskType::Mark);
        let bad = [RationaleSpan::new(0, 4)];
        assert!(s.mark(&first.doc.id, &bad).is_err());
        s.mark(&first.doc.id, &[RationaleSpan::new(0, 1)]).unwrap();
        assert_eq!(s.pending().len(), 9);
        assert!(s.review(&first.doc.id, DocReview::default()).is_err());
    }

    #[test]
    fn field_errors_name_fields() {
        let cfg = LoopConfig {
            n_gold: 3,
            rate: 0.0,
            ..LoopConfig::default()
        };
        let errors = cfg.field_errors();
        assert!(errors.iter().any(|e| e.starts_with("n_gold")));
        assert!(errors.iter().any(|e| e.starts_with("rate")));
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let cfg = small_config();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<LoopConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<LoopConfig>(r#"{"per_dok": 3}"#).is_err());
        let partial: LoopConfig = serde_json::from_str(r#"{"per_doc": 3, "round2": null}"#).unwrap();
        assert_eq!(partial.per_doc, 3);
        assert!(partial.round2.is_none());
    }
}
