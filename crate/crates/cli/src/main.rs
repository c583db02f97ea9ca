use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use finetype_core::checks::{CheckTarget, TOLERANCE};
use finetype_core::config::{self, TrainConfig, SEED_ENV};
use finetype_core::dataset::{corpus_stats, load_corpus, make_modified_split, ontonotes_like_sizes, write_corpus, Document};
use finetype_core::embed::EmbeddingSpec;
use finetype_core::mention::AttentionKind;
use finetype_core::train::{evaluate_predictions, train, EvalMode, PredictionSet, Trained};
use finetype_core::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "finetype", version, about = "Fine-grained entity typing: train, evaluate and inspect models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a mention-level or end-to-end model.
    Train(TrainArgs),
    /// Score a checkpoint (or a prediction file) against a gold corpus.
    Evaluate(EvaluateArgs),
    /// Write per-mention or per-token predictions as JSON lines.
    Predict(PredictArgs),
    /// Compare tape gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Rebuild train/dev/test files from a clean corpus.
    Split(SplitArgs),
    /// Print corpus statistics.
    Report(ReportArgs),
    /// Dataset utilities (`dataset report`, `dataset split`).
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    Report(ReportArgs),
    Split(SplitArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus (JSON lines).
    #[arg(long)]
    corpus: PathBuf,
    /// Dev corpus; defaults to the last tenth or so of --corpus.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    attention: Option<String>,
    /// uniform:<dim>[:<vocab>], word_vectors:<path>, glove:<path>, word2vec:<path> or contextual:<path>
    #[arg(long)]
    embedding: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any other config key, e.g. `--set hidden=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Where the best checkpoint is written.
    #[arg(long, alias = "checkpoint")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// entity_level, all_token or e2e_as_mention; defaults to the model's own.
    #[arg(long)]
    mode: Option<String>,
    /// Overrides the embedding recorded in the checkpoint.
    #[arg(long)]
    embedding: Option<String>,
    /// Score this prediction file instead of running the model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    embedding: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// mention, e2e, layers or all.
    #[arg(long, default_value = "all")]
    model: String,
    /// Attention variant for the mention model; every variant when omitted.
    #[arg(long)]
    attention: Option<String>,
    /// Number of random instances per target.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// m_ontonotes_like or m_wiki_like.
    #[arg(long)]
    kind: String,
    /// Original training corpus (m_wiki_like only).
    #[arg(long)]
    aux: Option<PathBuf>,
    /// Output directory for train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    corpus: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        _ => 2,
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Split(a) | Command::Dataset { command: DatasetCommand::Split(a) } => cmd_split(a),
        Command::Report(a) | Command::Dataset { command: DatasetCommand::Report(a) } => cmd_report(a),
    }
}

fn load(path: &Path) -> Result<Vec<Document>> {
    let (docs, report) = load_corpus(path)?;
    log::info!("{}: {} documents, {} mentions", path.display(), report.documents, report.mentions);
    Ok(docs)
}

fn print_config(cfg: &TrainConfig) {
    println!("# resolved config");
    print!("{cfg}");
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let file = match &a.config {
        Some(p) => config::read_config_file(p)?,
        None => Vec::new(),
    };
    let mut cli = Vec::new();
    for (key, value) in [("model", &a.model), ("attention", &a.attention), ("embedding", &a.embedding)] {
        if let Some(v) = value {
            cli.push((key.to_string(), v.clone()));
        }
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cli.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = a.seed {
        cli.push(("seed".into(), s.to_string()));
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    config::resolve(&file, env_seed.as_deref(), &cli)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = resolve_config(&a)?;
    print_config(&cfg);
    let corpus = load(&a.corpus)?;
    let (train_docs, dev_docs) = match &a.dev {
        Some(p) => (corpus, load(p)?),
        None => {
            let (tr, dv, te) = ontonotes_like_sizes(corpus.len())?;
            let cut = tr + te;
            log::info!("no --dev given; holding out the last {dv} documents");
            let mut train = corpus;
            let dev = train.split_off(cut);
            (train, dev)
        }
    };
    let provider = cfg.embedding.load(cfg.seed)?;
    let run = train(&cfg, &train_docs, &dev_docs, &provider, Some(&a.out))?;
    for e in &run.epochs {
        println!(
            "epoch {:>3}  loss {:.5}  dev Acc {:.3}  Ma-F1 {:.3}  Mi-F1 {:.3}",
            e.epoch, e.mean_train_loss, e.dev.strict_acc, e.dev.macro_f1, e.dev.micro_f1
        );
    }
    let summary = json!({
        "best_epoch": run.best_epoch,
        "checkpoint": a.out.display().to_string(),
        "seed": run.seed,
        "dropped_mentions": run.dropped_mentions,
        "epochs": run.epochs,
    });
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn provider_for(model: &Trained, embedding: &Option<String>) -> Result<finetype_core::embed::EmbeddingProvider> {
    let spec: EmbeddingSpec = match embedding {
        Some(s) => s.parse()?,
        None => model.config.embedding.clone(),
    };
    spec.load(model.config.seed)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let model = Trained::load(&a.checkpoint)?;
    print_config(&model.config);
    let docs = load(&a.corpus)?;
    let mode = match &a.mode {
        Some(m) => m.parse()?,
        None => EvalMode::default_for(model.kind()),
    };
    let preds = match &a.predictions {
        Some(p) => PredictionSet::read_jsonl(p, &docs, &model.labels)?,
        None => model.predict(&docs, &provider_for(&model, &a.embedding)?, model.config.exec)?,
    };
    let report = evaluate_predictions(&preds, &docs, &model.labels, mode)?;
    println!("mode: {mode}");
    println!("{report}");
    let mut record = json!({ "mode": mode.to_string(), "report": report });
    if mode == EvalMode::E2eAsMention {
        // Per-token scores alongside the mention-level view.
        let tokens = evaluate_predictions(&preds, &docs, &model.labels, EvalMode::AllToken)?;
        println!("all-token breakdown:\n{tokens}");
        record["all_token"] = json!(tokens);
    }
    println!("{record}");
    if let Some(out) = &a.out {
        std::fs::write(out, record.to_string()).map_err(|e| Error::io(out, e))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(a: PredictArgs) -> Result<ExitCode> {
    let model = Trained::load(&a.checkpoint)?;
    print_config(&model.config);
    let docs = load(&a.corpus)?;
    let preds = model.predict(&docs, &provider_for(&model, &a.embedding)?, model.config.exec)?;
    preds.write_jsonl(&a.out, &docs, &model.labels)?;
    let units: usize = preds.labels.iter().map(Vec::len).sum();
    println!("wrote {units} predictions to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let attentions = match &a.attention {
        Some(s) => vec![s.parse::<AttentionKind>()?],
        None => vec![AttentionKind::None, AttentionKind::Scalar, AttentionKind::Dynamic],
    };
    let mention: Vec<CheckTarget> = attentions.into_iter().map(CheckTarget::Mention).collect();
    let targets: Vec<CheckTarget> = match a.model.as_str() {
        "mention" => mention,
        "e2e" => vec![CheckTarget::E2e],
        "layers" => CheckTarget::all()
            .into_iter()
            .filter(|t| !matches!(t, CheckTarget::Mention(_) | CheckTarget::E2e))
            .collect(),
        "all" => CheckTarget::all(),
        other => return Err(Error::Usage(format!("unknown gradcheck model {other:?}"))),
    };
    if a.seeds == 0 {
        return Err(Error::Usage("--seeds must be positive".into()));
    }
    let mut all_ok = true;
    for t in &targets {
        // Worst relative error per parameter over all seeds.
        let mut worst: BTreeMap<String, f64> = BTreeMap::new();
        let mut order = Vec::new();
        for seed in a.seed..a.seed + a.seeds {
            let report = t.run(seed)?;
            for p in &report.params {
                if !worst.contains_key(&p.name) {
                    order.push(p.name.clone());
                }
                let w = worst.entry(p.name.clone()).or_insert(0.0);
                if p.max_rel_error > *w || p.max_rel_error.is_nan() {
                    *w = p.max_rel_error;
                }
            }
        }
        println!("{} ({} seeds)", t.name(), a.seeds);
        for name in &order {
            let e = worst[name];
            let ok = e < TOLERANCE;
            all_ok &= ok;
            println!("  {name:<20} max_rel_err={e:.3e} {}", if ok { "ok" } else { "FAIL" });
        }
    }
    println!("overall {} (tolerance {TOLERANCE:e})", if all_ok { "PASS" } else { "FAIL" });
    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_split(a: SplitArgs) -> Result<ExitCode> {
    let kind = a.kind.parse()?;
    let test = load(&a.corpus)?;
    let aux = a.aux.as_deref().map(load).transpose()?;
    let split = make_modified_split(&test, kind, aux.as_deref())?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (name, docs) in [("train", &split.train), ("dev", &split.dev), ("test", &split.test)] {
        let path = a.out.join(format!("{name}.jsonl"));
        write_corpus(&path, docs)?;
        println!("{name}: {} documents -> {}", docs.len(), path.display());
    }
    let (tr, dv, te) = split.sizes();
    println!("{}", json!({ "train": tr, "dev": dv, "test": te }));
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(a: ReportArgs) -> Result<ExitCode> {
    let (docs, load_report) = load_corpus(&a.corpus)?;
    let stats = corpus_stats(&docs);
    let share = if stats.tokens == 0 {
        0.0
    } else {
        stats.entity_tokens as f64 / stats.tokens as f64
    };
    println!(
        "{}",
        json!({
            "corpus": a.corpus.display().to_string(),
            "stats": stats,
            "entity_token_share": share,
            "overlapping_mention_pairs": load_report.overlapping.len(),
        })
    );
    Ok(ExitCode::SUCCESS)
}
