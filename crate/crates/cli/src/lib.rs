//! Command-line driver: training, evaluation, tree induction, analyses and
//! the verification suite.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use arbolatent::config::Config;
use arbolatent::data::{self, EmbeddingTable, Instance, Lexicon, Polarity};
use arbolatent::inducer::MttVariant;
use arbolatent::model::training_table;
use arbolatent::train::{self, predict_all, report_for, EvalReport};
use arbolatent::trees::{self, cle_extract, distance_report, root_consistency, Arborescence, TreeSource};
use arbolatent::{snapshot, synthetic, verify, Error, Model};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const THREADS_ENV: &str = "ARBOLATENT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "arbolatent", version, about = "Aspect-centric latent tree induction for aspect sentiment")]
pub struct Cli {
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write its snapshot and per-epoch log.
    Train(TrainArgs),
    /// Accuracy, macro-F1 and confusion matrix of a model on a dataset.
    Eval(EvalArgs),
    /// Decode one tree per instance and write the tree dump.
    Induce(InduceArgs),
    /// Opinion-to-aspect hop distances per tree source.
    AnalyzeDistance(DistanceArgs),
    /// How often the tree root falls inside the aspect span.
    AnalyzeRoots(RootsArgs),
    /// Evaluate with and without order-k adjacency pruning.
    PruneEval(PruneArgs),
    /// Run the numerical property suite.
    Verify(VerifyArgs),
    /// Label and length statistics of datasets.
    Stats(StatsArgs),
    /// Write a synthetic corpus and its opinion lexicon.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training instances (JSONL).
    #[arg(long)]
    train: PathBuf,
    /// Dev set; when absent, dev is carved from the training file.
    #[arg(long, conflicts_with = "split_seed")]
    dev: Option<PathBuf>,
    /// Seed for carving dev from train (defaults to the training seed).
    #[arg(long)]
    split_seed: Option<u64>,
    /// Word vectors, one `word v1 … vd` per line.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Flat JSON configuration with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set encoder.dim=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shortcut for `--set train.alpha=…`.
    #[arg(long)]
    alpha: Option<f64>,
    /// Shortcut for `--set train.seed=…`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shortcut for `--set train.max_epochs=…`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Drop the root-refinement loss (plain Matrix-Tree baseline).
    #[arg(long)]
    no_root_refinement: bool,
    /// Snapshot output path.
    #[arg(long)]
    model_out: PathBuf,
    /// Per-epoch JSONL log path.
    #[arg(long)]
    log: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InduceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Tree dump path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DistanceArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON object `{"positive": [...], "negative": [...]}`.
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "parser,mtt,aclt")]
    sources: Vec<Source>,
    /// Model trained with root refinement.
    #[arg(long)]
    aclt_model: Option<PathBuf>,
    /// Model trained without root refinement.
    #[arg(long)]
    mtt_model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RootsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Required unless the source is `parser`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "aclt")]
    source: Source,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Largest size for the exhaustive checks.
    #[arg(long, default_value_t = 5)]
    max_n: usize,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<Fault>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lexicon_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Source {
    Parser,
    Mtt,
    Aclt,
}

impl From<Source> for TreeSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Parser => TreeSource::Parser,
            Source::Mtt => TreeSource::Mtt,
            Source::Aclt => TreeSource::Aclt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Fault {
    EdgeSign,
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_INVALID },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_INVALID, message: message.into() }
}

type CmdResult = Result<(), Failure>;

/// Parse `args` (program name first) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        return f.code;
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Induce(a) => cmd_induce(a),
        Command::AnalyzeDistance(a) => cmd_analyze_distance(a),
        Command::AnalyzeRoots(a) => cmd_analyze_roots(a),
        Command::PruneEval(a) => cmd_prune_eval(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn configure_threads() -> CmdResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A pool may already exist when running in-process more than once.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// `KEY=VALUE` where VALUE is JSON when it parses as JSON, else a string.
fn parse_override(raw: &str) -> Result<(String, Value), Failure> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| invalid(format!("override `{raw}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

fn resolve_config(a: &TrainArgs) -> Result<Config, Failure> {
    let mut config = match &a.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for raw in &a.overrides {
        let (key, value) = parse_override(raw)?;
        config.set(&key, value)?;
    }
    if let Some(alpha) = a.alpha {
        config.train.alpha = alpha;
    }
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        config.train.max_epochs = epochs;
    }
    if a.no_root_refinement {
        config.train.root_refinement = false;
    }
    config.validate()?;
    Ok(config)
}

fn config_value(config: &Config) -> Value {
    Value::Object(config.to_flat())
}

fn write_json(path: &Path, value: &Value) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    snapshot::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path) -> Result<Vec<Instance>, Failure> {
    let data = data::load_jsonl(path)?;
    if data.is_empty() {
        return Err(invalid(format!("{}: no instances", path.display())));
    }
    Ok(data)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let config = resolve_config(&a)?;
    let all = load_data(&a.train)?;
    let (train_set, dev_set) = match &a.dev {
        Some(dev) => (all, load_data(dev)?),
        None => data::split(&all, config.data.dev_fraction, a.split_seed.unwrap_or(config.train.seed))?,
    };
    let table = match &a.embeddings {
        Some(p) => EmbeddingTable::load(p, config.encoder.embed_dim, config.train.seed)?,
        None => training_table(&train_set, &config),
    };

    let mut log = BufWriter::new(fs::File::create(&a.log)?);
    let flat = config_value(&config);
    let mut write_error = None;
    let outcome = train::train_with(&train_set, &dev_set, &table, &config, |entry| {
        let mut line = serde_json::to_value(entry).expect("log entries serialize");
        line["config"] = flat.clone();
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    snapshot::save(&outcome.model, &a.model_out)?;
    let best = &outcome.log[outcome.best_epoch - 1];
    println!(
        "best epoch {} of {}: dev accuracy {:.4}, dev macro-F1 {:.4}, aspect root mass {:.4}",
        outcome.best_epoch,
        outcome.log.len(),
        best.dev_acc,
        best.dev_macro_f1,
        best.aspect_root_mass
    );
    Ok(())
}

fn format_report(r: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "instances        {}", r.total);
    let _ = writeln!(out, "accuracy         {:.4}", r.accuracy);
    let _ = writeln!(out, "macro_f1         {:.4}", r.macro_f1);
    let _ = writeln!(out, "aspect_root_mass {:.4}", r.aspect_root_mass);
    let _ = writeln!(out, "{:<10}{:>10}{:>10}{:>10}{:>8}{:>8}", "label", "precision", "recall", "f1", "gold", "pred");
    for m in &r.per_class {
        let _ = writeln!(
            out,
            "{:<10}{:>10.4}{:>10.4}{:>10.4}{:>8}{:>8}",
            m.label.as_str(),
            m.precision,
            m.recall,
            m.f1,
            m.gold,
            m.predicted
        );
    }
    let _ = writeln!(out, "confusion (rows gold, columns predicted)");
    for (g, row) in r.confusion.iter().enumerate() {
        let label = Polarity::from_index(g).expect("three classes");
        let _ = writeln!(out, "{:<10}{:>8}{:>8}{:>8}", label.as_str(), row[0], row[1], row[2]);
    }
    out
}

fn report_value(r: &EvalReport) -> Value {
    serde_json::to_value(r).expect("reports serialize")
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let report = train::evaluate(&model, &data)?;
    print!("{}", format_report(&report));
    if let Some(out) = &a.out {
        write_json(out, &json!({ "config": config_value(&model.config), "report": report_value(&report) }))?;
    }
    Ok(())
}

fn cmd_induce(a: InduceArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let predictions = predict_all(&model, &data)?;
    let mut text = format!("# config = {}\n", config_value(&model.config));
    for (inst, p) in data.iter().zip(&predictions) {
        let tree = cle_extract(&p.marginals)?;
        text.push_str(&trees::format_tree_block(inst, &tree, &p.marginals));
    }
    match &a.out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn model_trees(model: &Model, data: &[Instance]) -> Result<Vec<Arborescence>, Failure> {
    predict_all(model, data)?
        .iter()
        .map(|p| cle_extract(&p.marginals).map_err(Failure::from))
        .collect()
}

fn parser_trees(data: &[Instance]) -> Result<Vec<Option<Arborescence>>, Failure> {
    data.iter()
        .map(|inst| match &inst.parse_heads {
            Some(h) => Arborescence::from_parse_heads(h).map(Some).map_err(Failure::from),
            None => Ok(None),
        })
        .collect()
}

fn cmd_analyze_distance(a: DistanceArgs) -> CmdResult {
    let data = load_data(&a.data)?;
    let lexicon = Lexicon::load(&a.lexicon)?;
    let mut sources = Vec::new();
    let mut configs = Map::new();
    for &source in &a.sources {
        let trees = match source {
            Source::Parser => parser_trees(&data)?,
            Source::Mtt | Source::Aclt => {
                let (path, flag) = if source == Source::Mtt {
                    (&a.mtt_model, "--mtt-model")
                } else {
                    (&a.aclt_model, "--aclt-model")
                };
                let path = path
                    .as_ref()
                    .ok_or_else(|| invalid(format!("source `{}` needs {flag}", TreeSource::from(source).as_str())))?;
                let model = load_model(path)?;
                configs.insert(TreeSource::from(source).as_str().to_string(), config_value(&model.config));
                model_trees(&model, &data)?.into_iter().map(Some).collect()
            }
        };
        sources.push((source.into(), trees));
    }
    let report = distance_report(&data, &sources, &lexicon)?;
    print!("{}", report.to_text());
    for s in &report.sources {
        if s.skipped > 0 {
            eprintln!("warning: {} instances without a {} tree were skipped", s.skipped, s.source.as_str());
        }
    }
    if let Some(out) = &a.out {
        let report = serde_json::to_value(&report).map_err(Error::from)?;
        write_json(out, &json!({ "config": configs, "report": report }))?;
    }
    Ok(())
}

fn cmd_analyze_roots(a: RootsArgs) -> CmdResult {
    let data = load_data(&a.data)?;
    let source = TreeSource::from(a.source);
    let (trees, config, used) = match a.source {
        Source::Parser => {
            let (kept, trees): (Vec<Instance>, Vec<Arborescence>) = data
                .iter()
                .zip(parser_trees(&data)?)
                .filter_map(|(inst, t)| t.map(|t| (inst.clone(), t)))
                .unzip();
            if kept.len() < data.len() {
                eprintln!("warning: {} instances without parse heads were skipped", data.len() - kept.len());
            }
            (trees, Value::Null, kept)
        }
        Source::Mtt | Source::Aclt => {
            let path = a.model.as_ref().ok_or_else(|| invalid("--model is required for model trees"))?;
            let model = load_model(path)?;
            (model_trees(&model, &data)?, config_value(&model.config), data)
        }
    };
    let rc = root_consistency(&used, &trees, source)?;
    println!(
        "{}: root inside aspect for {}/{} ({:.1}%)",
        source.as_str(),
        rc.consistent,
        rc.total,
        rc.percent
    );
    if let Some(out) = &a.out {
        let rc = serde_json::to_value(rc).map_err(Error::from)?;
        write_json(out, &json!({ "config": config, "source": source.as_str(), "roots": rc }))?;
    }
    Ok(())
}

fn cmd_prune_eval(a: PruneArgs) -> CmdResult {
    if a.k == 0 {
        return Err(invalid("--k must be at least 1"));
    }
    let mut model = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    model.config.prune.k = None;
    let full = report_for(&data, &predict_all(&model, &data)?);
    model.config.prune.k = Some(a.k);
    let pruned = report_for(&data, &predict_all(&model, &data)?);
    println!("== unpruned");
    print!("{}", format_report(&full));
    println!("== pruned, k = {}", a.k);
    print!("{}", format_report(&pruned));
    if let Some(out) = &a.out {
        model.config.prune.k = None;
        write_json(
            out,
            &json!({
                "config": config_value(&model.config),
                "k": a.k,
                "unpruned": report_value(&full),
                "pruned": report_value(&pruned),
            }),
        )?;
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let variant = match a.inject_fault {
        Some(Fault::EdgeSign) => MttVariant::FlippedSecondTerm,
        None => MttVariant::Standard,
    };
    let checks = verify::run_suite(a.max_n, variant)?;
    for c in &checks {
        println!("{c}");
    }
    if let Some(out) = &a.out {
        let checks = serde_json::to_value(&checks).map_err(Error::from)?;
        write_json(out, &json!({ "max_n": a.max_n, "checks": checks }))?;
    }
    match checks.iter().find(|c| !c.passed) {
        Some(c) => Err(Failure { code: EXIT_VERIFY, message: format!("property `{}` failed", c.name) }),
        None => Ok(()),
    }
}

fn cmd_stats(a: StatsArgs) -> CmdResult {
    let mut files = Vec::new();
    for path in &a.data {
        let data = load_data(path)?;
        let counts = data::stats(&data);
        let lengths: Vec<usize> = data.iter().map(Instance::len).collect();
        let mean_len = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        let multi = data.iter().filter(|i| i.aspect_span.1 - i.aspect_span.0 > 1).count();
        let parsed = data.iter().filter(|i| i.parse_heads.is_some()).count();
        println!(
            "{}: {} instances (positive {}, neutral {}, negative {}), mean length {:.2}, max length {}, multi-word aspects {}, with parse {}",
            path.display(),
            counts.total(),
            counts.positive,
            counts.neutral,
            counts.negative,
            mean_len,
            max_len,
            multi,
            parsed
        );
        files.push(json!({
            "path": path.display().to_string(),
            "labels": serde_json::to_value(counts).map_err(Error::from)?,
            "mean_length": mean_len,
            "max_length": max_len,
            "multi_word_aspects": multi,
            "with_parse": parsed,
        }));
    }
    if let Some(out) = &a.out {
        write_json(out, &json!({ "files": files }))?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    if a.n == 0 {
        return Err(invalid("--n must be positive"));
    }
    data::write_jsonl(&a.out, &synthetic::generate(a.n, a.seed))?;
    if let Some(path) = &a.lexicon_out {
        write_json(path, &synthetic::lexicon().to_json())?;
    }
    Ok(())
}
