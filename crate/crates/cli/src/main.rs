use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rationale_core::augment::{duplicate_baseline, expand_dataset, random_replacement_baseline, DEFAULT_RATE};
use rationale_core::corpus::{load_corpus_with, save_corpus, Dataset, LoadOptions, SplitTag};
use rationale_core::correction::{dynamic_augment_reviewed, load_reviews, oracle_verdicts, DynamicConfig};
use rationale_core::eval::{run_experiment, Experiment};
use rationale_core::model::train;
use rationale_core::report::Report;
use rationale_core::saliency::{extract_model_rationales, SaliencyConfig};
use rationale_core::session::{LoopConfig, Mode, Phase, Session, METRICS_FILE, STATE_FILE};
use rationale_core::synonyms::{load_lexicon, HttpSynonymProvider, SynonymProvider};
use rationale_core::synth::{synth_spurious_corpus, SynthConfig};
use rationale_core::{Error, LinearTextModel, ModelConfig};

/// Rationale-centric semi-factual augmentation workbench.
#[derive(Parser)]
#[command(name = "rationale", version, arg_required_else_help = true)]
struct Cli {
    /// Worker threads for parallel steps (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus file and write it back in canonical form.
    Ingest(IngestArgs),
    /// Append semi-factual variants of every document.
    AugmentStatic(AugmentArgs),
    /// Train the linear classifier.
    Train(TrainArgs),
    /// Surface the top-k model rationales of each document.
    Saliency(SaliencyArgs),
    /// Pick the least certain pool documents.
    Select(SelectArgs),
    /// Generate corrective examples from reviewed model rationales.
    Correct(CorrectArgs),
    /// Two-round annotation sessions.
    #[command(subcommand, name = "loop")]
    Loop(LoopCommand),
    /// Multi-seed experiments.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Serve annotation sessions over HTTP.
    Serve(ServeArgs),
    /// Render an experiment report or session metrics.
    Report(ReportArgs),
    /// Write a synthetic corpus with a planted spurious token.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum LoopCommand {
    /// Create (or resume) a session and run it as far as possible.
    Run(LoopArgs),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Run every arm for every seed.
    Run(EvalArgs),
}

#[derive(Args)]
struct SynonymArgs {
    /// Tab-separated synonym lexicon.
    #[arg(long, conflicts_with = "synonym_service")]
    lexicon: Option<PathBuf>,
    /// Base URL of a synonym service.
    #[arg(long)]
    synonym_service: Option<String>,
}

impl SynonymArgs {
    fn provider(&self) -> anyhow::Result<Box<dyn SynonymProvider>> {
        match (&self.lexicon, &self.synonym_service) {
            (Some(p), _) => Ok(Box::new(load_lexicon(p)?)),
            (None, Some(url)) => Ok(Box::new(HttpSynonymProvider::new(url, true))),
            (None, None) => Err(Error::Validation("give --lexicon or --synonym-service".into()).into()),
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reject class imbalance.
    #[arg(long)]
    balanced: bool,
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Static,
    Random,
    Duplicate,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    synonyms: SynonymArgs,
    #[arg(long, default_value_t = 7)]
    per_doc: usize,
    #[arg(long, default_value_t = DEFAULT_RATE)]
    rate: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value = "static")]
    method: Baseline,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Model settings as JSON; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    bigrams: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Write the training report here as well as to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Context samples per span; 0 for plain occlusion.
    #[arg(long = "R", default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 0.1)]
    p_drop: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value_t = 50)]
    k: usize,
    /// Take k/2 from each class.
    #[arg(long)]
    balance: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Documents with their gold rationales.
    #[arg(long = "in")]
    input: PathBuf,
    /// Reviewed verdicts; the oracle judges when omitted.
    #[arg(long)]
    verdicts: Option<PathBuf>,
    #[command(flatten)]
    synonyms: SynonymArgs,
    #[arg(long, default_value_t = 4)]
    mr: usize,
    #[arg(long, default_value_t = 3)]
    fr: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long = "R", default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 0.1)]
    p_drop: f64,
    #[arg(long, default_value_t = DEFAULT_RATE)]
    rate: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Oracle,
    Human,
}

#[derive(Args)]
struct LoopArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "oracle")]
    mode: ModeArg,
    /// Directory holding session directories.
    #[arg(long, default_value = "sessions")]
    root: PathBuf,
    /// Resume this session instead of creating one.
    #[arg(long)]
    session: Option<String>,
    /// Required unless the config file sets a seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    per_doc: Option<usize>,
    #[arg(long)]
    n_gold: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    /// Corpus file whose rationales are taken as marks (human mode).
    #[arg(long)]
    marks: Option<PathBuf>,
    /// Verdict file to apply (human mode).
    #[arg(long)]
    verdicts: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Md,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Inferred from the --out extension when omitted.
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long)]
    n_seeds: Option<usize>,
    /// Where per-run session directories go.
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "sessions")]
    root: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 4)]
    threads: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON or a session directory.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    spurious_token: Option<String>,
    /// Keep the spurious correlation in the OOD split (control corpus).
    #[arg(long)]
    no_flip: bool,
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl(path: &Path, rows: &[serde_json::Value]) -> anyhow::Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row)?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn load(path: &Path) -> anyhow::Result<Dataset> {
    Ok(load_corpus_with(path, SplitTag::Train, LoadOptions::default())?)
}

fn ingest(a: IngestArgs) -> anyhow::Result<()> {
    let split: SplitTag = a.split.parse()?;
    let ds = load_corpus_with(&a.input, split, LoadOptions { balanced: a.balanced })?;
    save_corpus(&ds, &a.out)?;
    let (pos, neg) = ds.label_counts();
    let spans: usize = ds.documents.iter().map(|d| d.rationales().len()).sum();
    println!(
        "{} documents ({pos} pos / {neg} neg), {spans} rationale spans",
        ds.len()
    );
    Ok(())
}

fn augment_static(a: AugmentArgs) -> anyhow::Result<()> {
    let ds = load(&a.input)?;
    let provider = a.synonyms.provider()?;
    let (out, shortfalls) = match a.method {
        Baseline::Static => {
            let e = expand_dataset(&ds, provider.as_ref(), a.per_doc, a.rate, a.seed)?;
            (e.dataset, e.shortfalls)
        }
        Baseline::Random => {
            let e = random_replacement_baseline(&ds, provider.as_ref(), a.per_doc, a.rate, a.seed)?;
            (e.dataset, e.shortfalls)
        }
        Baseline::Duplicate => (duplicate_baseline(&ds, a.per_doc + 1)?, Vec::new()),
    };
    for (id, reason) in &shortfalls {
        eprintln!("warning: {id}: {reason}");
    }
    save_corpus(&out, &a.out)?;
    println!("{} examples ({} generated)", out.len(), out.len() - ds.len());
    Ok(())
}

fn model_config(a: &TrainArgs) -> anyhow::Result<ModelConfig> {
    let mut c = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .map_err(Error::from)?,
        None => ModelConfig::default(),
    };
    if a.bigrams {
        c.use_bigrams = true;
    }
    c.lr = a.lr.unwrap_or(c.lr);
    c.l2 = a.l2.unwrap_or(c.l2);
    c.max_epochs = a.max_epochs.unwrap_or(c.max_epochs);
    c.patience = a.patience.unwrap_or(c.patience);
    Ok(c)
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let config = model_config(&a)?;
    let train_set = load(&a.train)?;
    let mut val = load(&a.val)?;
    if let Some(n) = a.val_size {
        val.documents.truncate(n);
    }
    let (model, report) = train(&train_set, &val, &config, a.seed)?;
    model.save(&a.out)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &a.report {
        write_text(p, &(json.clone() + "\n"))?;
    }
    println!("{json}");
    Ok(())
}

fn saliency_cmd(a: SaliencyArgs) -> anyhow::Result<()> {
    let model = LinearTextModel::load(&a.model)?;
    let ds = load(&a.input)?;
    let config = SaliencyConfig {
        k: a.k,
        samples: a.samples,
        p_drop: a.p_drop,
    };
    let mut rows = Vec::with_capacity(ds.len());
    for doc in &ds.documents {
        let set = extract_model_rationales(&model, doc, &config, a.seed)?;
        rows.push(serde_json::json!({ "id": doc.id, "model_rationales": set.spans }));
    }
    write_jsonl(&a.out, &rows)
}

fn select_cmd(a: SelectArgs) -> anyhow::Result<()> {
    let model = LinearTextModel::load(&a.model)?;
    let pool = load(&a.pool)?;
    let ids = rationale_core::active::uncertainty_sample(&model, &pool, a.k, a.balance)?;
    let mut text = ids.join("\n");
    text.push('\n');
    write_text(&a.out, &text)
}

fn correct_cmd(a: CorrectArgs) -> anyhow::Result<()> {
    let model = LinearTextModel::load(&a.model)?;
    let ds = load(&a.input)?;
    let provider = a.synonyms.provider()?;
    let reviews = a.verdicts.as_ref().map(load_reviews).transpose()?;
    let config = DynamicConfig {
        mr_count: a.mr,
        fr_count: a.fr,
        saliency: SaliencyConfig {
            k: a.k,
            samples: a.samples,
            p_drop: a.p_drop,
        },
        rate: a.rate,
    };
    let mut out = Vec::new();
    for doc in &ds.documents {
        let surfaced = extract_model_rationales(&model, doc, &config.saliency, a.seed)?;
        let review = match &reviews {
            Some(r) => {
                let review = r.get(&doc.id).cloned().unwrap_or_default();
                review.validate(doc, &surfaced)?;
                review
            }
            None => oracle_verdicts(doc, &surfaced),
        };
        let outcome = dynamic_augment_reviewed(doc, &review, provider.as_ref(), &config, a.seed)?;
        for w in &outcome.warnings {
            eprintln!("warning: {w}");
        }
        out.extend(outcome.into_documents()?);
    }
    let out = Dataset::new(out, SplitTag::Train)?;
    save_corpus(&out, &a.out)?;
    println!("{} corrective examples from {} documents", out.len(), ds.len());
    Ok(())
}

fn loop_config(a: &LoopArgs) -> anyhow::Result<LoopConfig> {
    let (mut config, seed_in_file) = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let raw: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
            (LoopConfig::load(p)?, raw.get("seed").is_some())
        }
        None => (LoopConfig::default(), false),
    };
    match (a.seed, seed_in_file) {
        (Some(s), _) => config.seed = s,
        (None, true) => {}
        (None, false) => return Err(Error::Validation("--seed is required when the config sets none".into()).into()),
    }
    config.per_doc = a.per_doc.unwrap_or(config.per_doc);
    config.n_gold = a.n_gold.unwrap_or(config.n_gold);
    if a.val_size.is_some() {
        config.val_size = a.val_size;
    }
    config.validate()?;
    Ok(config)
}

fn import_human_work(session: &mut Session, marks: Option<&Path>, verdicts: Option<&Path>) -> anyhow::Result<()> {
    let marking = matches!(session.phase(), Phase::Marking | Phase::StaticTrained);
    if let (Some(p), true) = (marks, marking) {
        let ds = load(p)?;
        let wanted = session.pending();
        for doc in ds.documents.iter().filter(|d| wanted.contains(&d.id)) {
            session.mark(&doc.id, doc.rationales())?;
        }
    }
    if let (Some(p), Phase::Reviewing) = (verdicts, session.phase()) {
        for (id, review) in load_reviews(p)? {
            if session.pending().contains(&id) {
                session.review(&id, review)?;
            }
        }
    }
    Ok(())
}

fn loop_run(a: LoopArgs) -> anyhow::Result<()> {
    let mut session = match &a.session {
        Some(id) => Session::open(a.root.join(id))?,
        None => {
            let config = loop_config(&a)?;
            let mode = match a.mode {
                ModeArg::Oracle => Mode::Oracle,
                ModeArg::Human => Mode::Human,
            };
            let id = format!("run-{}", &config.hash()[..12]);
            let dir = a.root.join(&id);
            if dir.join(STATE_FILE).exists() {
                Session::open(dir)?
            } else {
                Session::create(dir, &id, config, mode)?
            }
        }
    };
    loop {
        if session.phase() == Phase::Final {
            break;
        }
        if session.state().mode == Mode::Oracle {
            session.fill_from_oracle()?;
        } else {
            import_human_work(&mut session, a.marks.as_deref(), a.verdicts.as_deref())?;
        }
        let pending = session.pending();
        if !pending.is_empty() {
            println!(
                "session {} waiting in phase {} for {} documents: {}",
                session.state().session_id,
                session.phase(),
                pending.len(),
                pending.join(", ")
            );
            return Ok(());
        }
        let phase = session.advance()?;
        eprintln!("{}: {phase}", session.state().session_id);
    }
    session.audit()?;
    println!("{}", session.dir().display());
    print!("{}", session.metrics()?.to_markdown());
    Ok(())
}

fn render(report: &Report, format: Format) -> anyhow::Result<String> {
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(report)? + "\n",
        Format::Md => report.to_markdown(),
    })
}

fn eval_run(a: EvalArgs) -> anyhow::Result<()> {
    let mut exp = Experiment::load(&a.config)?;
    if let Some(n) = a.n_seeds {
        exp.n_seeds = n;
        exp.seeds = None;
    }
    let format = a.format.unwrap_or(match a.out.extension().and_then(|e| e.to_str()) {
        Some("md") => Format::Md,
        _ => Format::Json,
    });
    let work = a.work_dir.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".sessions");
        PathBuf::from(p)
    });
    let report = run_experiment(&exp, &work)?;
    write_text(&a.out, &render(&report, format)?)?;
    print!("{}", report.to_markdown());
    if report.arms.iter().any(|arm| arm.failed.is_some()) {
        eprintln!("warning: some arms failed; see the report");
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> anyhow::Result<()> {
    let addr = format!("{}:{}", a.host, a.port);
    let handle = rationale_core::service::spawn(&a.root, &addr, a.threads)?;
    eprintln!("serving {} on {}", a.root.display(), handle.url());
    handle.join();
    Ok(())
}

fn report_cmd(a: ReportArgs) -> anyhow::Result<()> {
    let path = if a.input.is_dir() {
        a.input.join(METRICS_FILE)
    } else {
        a.input.clone()
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: Report = serde_json::from_str(&text).map_err(Error::from)?;
    let out = render(&report, a.format)?;
    match &a.out {
        Some(p) => write_text(p, &out),
        None => {
            std::io::stdout().write_all(out.as_bytes())?;
            Ok(())
        }
    }
}

fn synth_cmd(a: SynthArgs) -> anyhow::Result<()> {
    let mut config = SynthConfig {
        seed: a.seed,
        flip_in_ood: !a.no_flip,
        ..SynthConfig::default()
    };
    config.n = a.n.unwrap_or(config.n);
    if let Some(t) = a.spurious_token {
        config.spurious_token = t;
    }
    let c = synth_spurious_corpus(&config)?;
    let dir = &a.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    save_corpus(&c.train_pool, dir.join("pool.jsonl"))?;
    save_corpus(&c.val, dir.join("val.jsonl"))?;
    save_corpus(&c.test_in, dir.join("test_in.jsonl"))?;
    save_corpus(&c.test_ood, dir.join("test_ood.jsonl"))?;
    write_text(&dir.join("lexicon.tsv"), &c.lexicon.to_tsv())?;
    let loop_config = serde_json::json!({
        "data": { "files": {
            "pool": "pool.jsonl",
            "val": "val.jsonl",
            "tests": [
                { "name": "in_dist", "path": "test_in.jsonl" },
                { "name": "ood", "path": "test_ood.jsonl" }
            ],
            "lexicon": "lexicon.tsv"
        } },
        "seed": a.seed
    });
    write_text(
        &dir.join("loop.json"),
        &(serde_json::to_string_pretty(&loop_config)? + "\n"),
    )?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| anyhow!("configuring {jobs} worker threads: {e}"))?;
    }
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::AugmentStatic(a) => augment_static(a),
        Command::Train(a) => train_cmd(a),
        Command::Saliency(a) => saliency_cmd(a),
        Command::Select(a) => select_cmd(a),
        Command::Correct(a) => correct_cmd(a),
        Command::Loop(LoopCommand::Run(a)) => loop_run(a),
        Command::Eval(EvalCommand::Run(a)) => eval_run(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

/// 1 for bad input, 2 for anything that went wrong while running.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn validation_errors_exit_one() {
        let e: anyhow::Error = Error::Validation("x".into()).into();
        assert_eq!(exit_code(&e), 1);
        assert_eq!(exit_code(&anyhow!("boom")), 2);
    }
}
