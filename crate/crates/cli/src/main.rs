mod providers;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mpminer_core::agent::run_many;
use mpminer_core::cache::{DirStore, KvStore, MemoryStore};
use mpminer_core::config::AppConfig;
use mpminer_core::curation::{
    attach_negatives, import_negative_table, import_source_table, stratified_split, write_finetune_jsonl,
    BalanceReport, ImportOptions, ImportReport, LabeledExample, Partition,
};
use mpminer_core::document::PaperDocument;
use mpminer_core::eval::{
    aggregate, compare_variants, score_pairs, temperature_sweep, EmbeddingProvider, VariantReport,
    DEFAULT_EMBED_IN_FLIGHT, DEFAULT_PROVIDER_IDS, SWEEP_TEMPERATURES,
};
use mpminer_core::search::run_search;
use mpminer_core::service::{http, AnalysisService, JobStore, ServiceSettings};
use mpminer_core::tox::screen;
use mpminer_core::{AgentVariant, Strategy, StrainQuery};
use serde::Serialize;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "mpminer", version, about = "Literature mining for microbial-protein production")]
struct Cli {
    /// TOML configuration file; environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replay bibliographic search from a fixture file.
    #[arg(long, global = true)]
    search_fixtures: Option<PathBuf>,
    /// Replay chat completions from a fixture file.
    #[arg(long, global = true)]
    chat_fixtures: Option<PathBuf>,
    /// Replay pathway-database lookups from a fixture file.
    #[arg(long, global = true)]
    pathway_fixtures: Option<PathBuf>,
    /// Persist article, embedding and compound caches under this directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Expand, run and rank literature queries for a strain.
    Search {
        species: String,
        #[arg(long, default_value_t = 10)]
        max_papers: u32,
        /// Rank only; skip fetching article text.
        #[arg(long)]
        no_fulltext: bool,
    },
    /// Extract the four fields from local paper texts.
    Extract {
        species: String,
        /// ARTICLE_ID=PATH of a plain-text paper; repeatable.
        #[arg(long = "paper", value_parser = parse_paper, required = true)]
        papers: Vec<(String, PathBuf)>,
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Build fine-tuning datasets.
    #[command(subcommand)]
    Curate(CurateCommand),
    /// Score and compare extraction outputs.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Mutagenicity screening.
    #[command(subcommand)]
    Tox(ToxCommand),
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Debug, Args)]
struct VariantArgs {
    /// single_stage_base, two_stage_prompted or fine_tuned_checkpoint.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    checkpoint_epoch: Option<u32>,
}

#[derive(Debug, Subcommand)]
enum CurateCommand {
    /// Import labelled tables, check balance, split by strain and write JSONL.
    Split {
        /// Positive source table (CSV or TSV).
        #[arg(long)]
        positives: PathBuf,
        /// Negative table; when given, balance is enforced.
        #[arg(long)]
        negatives: Option<PathBuf>,
        /// Directory that paper_text_path values are relative to.
        #[arg(long)]
        base_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-emit chat JSONL from an examples file written by `curate split`.
    Jsonl {
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Cosine scores for (obtained, ideal) pairs from a CSV table.
    Score {
        #[arg(long)]
        pairs: PathBuf,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Scores each model at each temperature on an examples file.
    Sweep {
        #[arg(long)]
        examples: PathBuf,
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long = "temperature")]
        temperatures: Vec<f64>,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Compares variant reports against a base variant.
    Compare {
        /// JSON array of variant reports.
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        base: String,
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Debug, Args)]
struct EmbedArgs {
    /// Embedding provider id; repeatable. Defaults to the three standard ids.
    #[arg(long = "provider")]
    providers: Vec<String>,
    /// Use the deterministic hashing embedder instead of the HTTP adapter.
    #[arg(long)]
    fake_embeddings: bool,
}

#[derive(Debug, Subcommand)]
enum ToxCommand {
    /// Screens an organism's compounds against a mutagenicity table.
    Screen {
        organism: String,
        /// cas,mutagenic table; defaults to tox.dataset_path.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn parse_paper(s: &str) -> Result<(String, PathBuf), String> {
    let (id, path) = s.split_once('=').ok_or_else(|| format!("expected ID=PATH, got '{s}'"))?;
    if id.trim().is_empty() || path.trim().is_empty() {
        return Err(format!("expected ID=PATH, got '{s}'"));
    }
    Ok((id.trim().to_string(), PathBuf::from(path.trim())))
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    serde_json::from_value(json!(s.replace('-', "_")))
        .with_context(|| format!("unknown strategy '{s}'"))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = AppConfig::load(cli.config.as_deref())?;
    if let Some(p) = &cli.search_fixtures {
        cfg.mock.search_fixtures = Some(p.clone());
    }
    if let Some(p) = &cli.chat_fixtures {
        cfg.mock.chat_fixtures = Some(p.clone());
    }
    if let Some(p) = &cli.pathway_fixtures {
        cfg.mock.pathway_fixtures = Some(p.clone());
    }
    Ok(cfg)
}

fn cache(dir: Option<&Path>) -> Result<Box<dyn KvStore>> {
    Ok(match dir {
        Some(d) => Box::new(DirStore::new(d).with_context(|| format!("opening cache {}", d.display()))?),
        None => Box::new(MemoryStore::new()),
    })
}

fn variant(cfg: &AppConfig, args: &VariantArgs) -> Result<AgentVariant> {
    let strategy = match &args.strategy {
        Some(s) => parse_strategy(s)?,
        None => cfg.agent.strategy,
    };
    let epoch = args.checkpoint_epoch.or(cfg.agent.checkpoint_epoch);
    let epoch = if strategy == Strategy::FineTunedCheckpoint { epoch } else { None };
    Ok(AgentVariant::new(
        args.model.clone().unwrap_or_else(|| cfg.agent.model.clone()),
        strategy,
        args.temperature.unwrap_or(cfg.agent.temperature),
        epoch,
    )?)
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("MPMINER_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    if let Err(e) = rt.block_on(run(cli)) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

async fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let cache = cache(cli.cache_dir.as_deref())?;
    match cli.command {
        Command::Search { species, max_papers, no_fulltext } => {
            let q = StrainQuery::parse(&species, max_papers)?;
            let mut search_cfg = cfg.search.clone();
            search_cfg.fetch_fulltext = !no_fulltext;
            let client = providers::bibliographic(&cfg)?;
            let ranked = run_search(&q, &search_cfg, client.as_ref(), cache.as_ref()).await?;
            print_json(&ranked)
        }
        Command::Extract { species, papers, variant: args } => {
            let q = StrainQuery::parse(&species, papers.len().max(1) as u32)?;
            let variant = variant(&cfg, &args)?;
            let budget = cfg.agent.budget_for(&variant.model_id);
            let docs = papers
                .iter()
                .map(|(id, path)| {
                    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    Ok(PaperDocument::curate(id.clone(), raw, budget))
                })
                .collect::<Result<Vec<_>>>()?;
            let backend = providers::chat(&cfg)?;
            let runs = run_many(&q, &docs, backend.as_ref(), &variant, &cfg.agent.agent_config()).await;
            let out: Vec<_> = docs
                .iter()
                .zip(runs)
                .map(|(doc, run)| match run {
                    Ok(r) => json!({
                        "article_id": doc.article_id,
                        "parts": doc.parts.len(),
                        "output": r.outcome.render(),
                        "record": r.outcome.record(),
                        "backend_calls": r.backend_calls,
                        "gate": r.gate,
                    }),
                    Err(e) => json!({ "article_id": doc.article_id, "parts": doc.parts.len(), "error": e.to_string() }),
                })
                .collect();
            print_json(&json!({ "variant": variant, "papers": out }))
        }
        Command::Curate(cmd) => curate(cmd),
        Command::Eval(cmd) => eval(&cfg, cmd, cache.as_ref()).await,
        Command::Tox(ToxCommand::Screen { organism, dataset }) => {
            let path = dataset
                .or_else(|| cfg.tox.dataset_path.clone())
                .context("no toxicity dataset given (pass --dataset or set tox.dataset_path)")?;
            let tox = providers::tox_dataset(&path)?;
            let client = providers::pathway(&cfg)?;
            let report = screen(&organism, client.as_ref(), cache.as_ref(), &tox).await?;
            print_json(&report)
        }
        Command::Serve { port, host } => {
            let store = JobStore::open(&cfg.server.db_path)
                .with_context(|| format!("opening {}", cfg.server.db_path.display()))?;
            let svc = AnalysisService::new(Arc::new(store), providers::service_providers(&cfg)?, ServiceSettings::from(&cfg))?;
            let port = port.unwrap_or(cfg.server.port);
            let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
            eprintln!("listening on http://{}", listener.local_addr()?);
            http::serve(svc, listener).await?;
            Ok(())
        }
    }
}

fn report_warnings(name: &Path, report: &ImportReport) {
    for w in &report.warnings {
        eprintln!("warning: {} row {}: {}", name.display(), w.row, w.message);
    }
}

fn curate(cmd: CurateCommand) -> Result<()> {
    match cmd {
        CurateCommand::Split { positives, negatives, base_dir, seed, out } => {
            let base_dir = base_dir
                .or_else(|| positives.parent().map(Path::to_path_buf))
                .unwrap_or_default();
            let cfg = mpminer_core::config::AgentSettings::default();
            let opts = ImportOptions { base_dir, budget: cfg.budget_for(&cfg.model) };
            let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
            let pos = import_source_table(&read(&positives)?, &opts)?;
            report_warnings(&positives, &pos);
            let examples = match &negatives {
                Some(path) => {
                    let neg = import_negative_table(&read(path)?, &opts)?;
                    report_warnings(path, &neg);
                    attach_negatives(pos.examples, neg.examples)?.examples
                }
                None => pos.examples,
            };
            let split = stratified_split(&examples, seed)?;
            std::fs::create_dir_all(&out)?;
            let mut sizes = BTreeMap::new();
            for p in Partition::ALL {
                let name = serde_json::to_value(p)?.as_str().unwrap_or_default().to_string();
                let part = split.part(p);
                write_finetune_jsonl(&out.join(format!("{name}.jsonl")), part)?;
                std::fs::write(out.join(format!("{name}.examples.json")), serde_json::to_vec_pretty(part)?)?;
                sizes.insert(name, part.len());
            }
            let summary = json!({
                "seed": seed,
                "sizes": sizes,
                "assignment": split.assignment,
                "balance": BalanceReport::compute(&examples),
            });
            std::fs::write(out.join("split.json"), serde_json::to_vec_pretty(&summary)?)?;
            print_json(&summary)
        }
        CurateCommand::Jsonl { examples, out } => {
            let list = read_examples(&examples)?;
            write_finetune_jsonl(&out, &list)?;
            print_json(&json!({ "lines": list.len(), "out": out }))
        }
    }
}

fn read_examples(path: &Path) -> Result<Vec<LabeledExample>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn provider_ids(args: &EmbedArgs) -> Vec<String> {
    if args.providers.is_empty() {
        DEFAULT_PROVIDER_IDS.iter().map(|s| s.to_string()).collect()
    } else {
        args.providers.clone()
    }
}

async fn eval(cfg: &AppConfig, cmd: EvalCommand, cache: &dyn KvStore) -> Result<()> {
    match cmd {
        EvalCommand::Score { pairs, embed } => {
            let mut reader = csv::Reader::from_path(&pairs).with_context(|| format!("reading {}", pairs.display()))?;
            let headers = reader.headers()?.clone();
            let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
            let (Some(oi), Some(ii)) = (col("obtained"), col("ideal")) else {
                bail!("{} needs 'obtained' and 'ideal' columns", pairs.display());
            };
            let mut rows = Vec::new();
            for rec in reader.records() {
                let rec = rec?;
                rows.push((rec.get(oi).unwrap_or("").to_string(), rec.get(ii).unwrap_or("").to_string()));
            }
            let embedders = providers::embedders(cfg, &provider_ids(&embed), embed.fake_embeddings)?;
            let mut out = Vec::new();
            for e in &embedders {
                let scored = score_pairs(&rows, e.as_ref(), cache, DEFAULT_EMBED_IN_FLIGHT).await?;
                let (ok, failed): (Vec<_>, Vec<_>) = scored.into_iter().partition(Result::is_ok);
                let ok: Vec<_> = ok.into_iter().map(Result::unwrap).collect();
                let scores: Vec<f64> = ok.iter().map(|s| s.score).collect();
                out.push(json!({
                    "provider_id": e.provider_id(),
                    "aggregate": aggregate(e.provider_id(), &scores).ok(),
                    "pairs": ok,
                    "failures": failed.into_iter().map(|f| f.unwrap_err().to_string()).collect::<Vec<_>>(),
                }));
            }
            print_json(&out)
        }
        EvalCommand::Sweep { examples, models, temperatures, embed } => {
            let dataset = read_examples(&examples)?;
            let temperatures = if temperatures.is_empty() { SWEEP_TEMPERATURES.to_vec() } else { temperatures };
            let backend = providers::chat(cfg)?;
            let embedders = providers::embedders(cfg, &provider_ids(&embed), embed.fake_embeddings)?;
            let refs: Vec<&dyn EmbeddingProvider> = embedders.iter().map(|e| e.as_ref()).collect();
            let grid = temperature_sweep(&models, &temperatures, &dataset, backend.as_ref(), &refs, cache).await;
            print_json(&grid)
        }
        EvalCommand::Compare { reports, base, csv } => {
            let text = std::fs::read_to_string(&reports).with_context(|| format!("reading {}", reports.display()))?;
            let list: Vec<VariantReport> = serde_json::from_str(&text)?;
            let table = compare_variants(&list, &base)?;
            if csv {
                print!("{}", table.to_csv());
            } else {
                print!("{}", table.render_text());
            }
            Ok(())
        }
    }
}
