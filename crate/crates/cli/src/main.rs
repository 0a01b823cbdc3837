use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tracing_subscriber::EnvFilter;
use tutor_core::chunker::{chunk_document, Chunk, ChunkPolicy};
use tutor_core::embed::{build_embedder, EmbedderConfig, LOCAL_MODEL_ID};
use tutor_core::eval::{parse_suite, run_filter_experiment, run_retrieval_bench, shipped_suite, BenchQuery};
use tutor_core::guardrail::{Guardrail, GuardrailConfig};
use tutor_core::index::{AnnParams, IndexEntry, SearchMode, VectorIndex};
use tutor_core::ingest::{merge_documents, parse_extraction, DifficultyTier, Document, DocumentMeta};
use tutor_service::ServiceConfig;

/// Local embedding width used when no embedder config is given.
const DEFAULT_LOCAL_DIM: usize = 256;

#[derive(Parser)]
#[command(name = "tutor", version, about = "Course-bounded teaching assistant tools")]
struct Cli {
    /// Emit logs as JSON lines.
    #[arg(long, global = true)]
    log_json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Merge extractor payloads into one document.
    Ingest(IngestArgs),
    /// Split a merged document into chunks.
    Chunk(ChunkArgs),
    #[command(subcommand)]
    Index(IndexCmd),
    #[command(subcommand)]
    Guardrail(GuardrailCmd),
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    doc_id: String,
    #[arg(long)]
    title: String,
    #[arg(long)]
    pages: u32,
    #[arg(long, default_value = "")]
    source_path: String,
    #[arg(long, value_enum)]
    tier: Option<Tier>,
    #[arg(long = "prerequisite")]
    prerequisites: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(required = true)]
    payloads: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tier {
    Foundational,
    Intermediate,
    Advanced,
}

impl From<Tier> for DifficultyTier {
    fn from(t: Tier) -> Self {
        match t {
            Tier::Foundational => Self::Foundational,
            Tier::Intermediate => Self::Intermediate,
            Tier::Advanced => Self::Advanced,
        }
    }
}

#[derive(Args)]
struct ChunkArgs {
    #[arg(long, default_value_t = 400)]
    max_tokens: usize,
    #[arg(long, default_value_t = 50)]
    overlap: usize,
    /// Let windows cut through formulas and diagrams.
    #[arg(long)]
    ignore_boundaries: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Merged document JSON files.
    #[arg(required = true)]
    documents: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Embed chunks and write an index file.
    Build {
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Embedder config TOML; defaults to the local embedder.
        #[arg(long)]
        embedder: Option<PathBuf>,
        /// Build the graph for approximate search.
        #[arg(long)]
        approximate: bool,
    },
    /// Search an index.
    Query {
        #[arg(long)]
        idx: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        embedder: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        question: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Approximate,
}

#[derive(Subcommand)]
enum GuardrailCmd {
    /// Print the verdict for one question.
    Classify {
        #[arg(long)]
        config: Option<PathBuf>,
        question: String,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Run the relevance filter over a labeled suite.
    Filter {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Labeled suite JSON; defaults to the shipped 80 questions.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare embedding backends on a retrieval benchmark.
    Bench {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        backends: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `--backends` file: `[[backends]]` tables in embedder config form.
#[derive(Deserialize)]
struct Backends {
    backends: Vec<EmbedderConfig>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
            Ok(())
        }
    }
}

fn embedder_config(path: Option<&Path>) -> Result<EmbedderConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Ok(EmbedderConfig::local(DEFAULT_LOCAL_DIM)),
    }
}

fn guardrail_config(path: Option<&Path>) -> Result<GuardrailConfig> {
    Ok(match path {
        Some(p) => GuardrailConfig::load(p)?,
        None => GuardrailConfig::default(),
    })
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut extractions = Vec::new();
    for p in &a.payloads {
        let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        let ex = parse_extraction(&bytes).with_context(|| format!("payload {}", p.display()))?;
        if ex.doc_id != a.doc_id {
            tracing::warn!(payload = %p.display(), payload_doc = %ex.doc_id, "doc_id differs from --doc-id");
        }
        extractions.push((ex.origin, ex.blocks));
    }
    let meta = DocumentMeta {
        doc_id: a.doc_id,
        title: a.title,
        source_path: a.source_path,
        pages: a.pages,
        difficulty_tier: a.tier.map(Into::into),
        prerequisites: a.prerequisites,
    };
    let doc = merge_documents(&extractions, &meta)?;
    tracing::info!(blocks = doc.blocks.len(), chars = doc.total_chars(), "merged");
    write_json(&doc, a.out.as_deref())
}

fn chunk(a: ChunkArgs) -> Result<()> {
    let policy = ChunkPolicy {
        max_chunk_tokens: a.max_tokens,
        overlap_tokens: a.overlap,
        respect_boundaries: !a.ignore_boundaries,
    };
    let mut all = Vec::new();
    for p in &a.documents {
        let doc: Document = read_json(p)?;
        doc.validate().with_context(|| format!("document {}", p.display()))?;
        all.extend(chunk_document(&doc, &policy)?);
    }
    write_json(&all, a.out.as_deref())
}

async fn index(cmd: IndexCmd) -> Result<()> {
    match cmd {
        IndexCmd::Build {
            chunks,
            out,
            embedder,
            approximate,
        } => {
            let chunks: Vec<Chunk> = read_json(&chunks)?;
            if chunks.is_empty() {
                bail!("no chunks to index");
            }
            let e = build_embedder(&embedder_config(embedder.as_deref())?)?;
            let bodies: Vec<String> = chunks.iter().map(|c| c.body.clone()).collect();
            let vectors = e.embed(&bodies).await?;
            let entries: Vec<IndexEntry> = chunks
                .iter()
                .zip(vectors)
                .map(|(c, v)| IndexEntry::from_chunk(c, v))
                .collect();
            let params = if approximate {
                AnnParams::approximate()
            } else {
                AnnParams::default()
            };
            let idx = VectorIndex::build(entries, params)?;
            fs::write(&out, idx.save()).with_context(|| format!("writing {}", out.display()))?;
            tracing::info!(entries = idx.len(), dim = idx.dim(), path = %out.display(), "index written");
            Ok(())
        }
        IndexCmd::Query {
            idx,
            k,
            embedder,
            mode,
            question,
        } => {
            let bytes = fs::read(&idx).with_context(|| format!("reading {}", idx.display()))?;
            let index = VectorIndex::load(&bytes)?;
            let cfg = match embedder {
                Some(p) => embedder_config(Some(&p))?,
                None if index.model_id() == LOCAL_MODEL_ID => EmbedderConfig::local(index.dim()),
                None => bail!(
                    "index was built with {}; pass --embedder with a matching config",
                    index.model_id()
                ),
            };
            let e = build_embedder(&cfg)?;
            if e.dim() != index.dim() || e.model_id() != index.model_id() {
                bail!(
                    "embedder produces {}-dim {} vectors, index holds {}-dim {}",
                    e.dim(),
                    e.model_id(),
                    index.dim(),
                    index.model_id()
                );
            }
            let q = e.embed(&[question]).await?.remove(0);
            let mode = match mode {
                Some(Mode::Exact) => SearchMode::Exact,
                Some(Mode::Approximate) => SearchMode::Approximate,
                None => index.params().mode,
            };
            write_json(&index.search_with_mode(&q, k, mode)?, None)
        }
    }
}

async fn eval(cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Filter { config, suite, out } => {
            let cfg = guardrail_config(config.as_deref())?;
            let suite = match suite {
                Some(p) => parse_suite(&fs::read(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => shipped_suite(),
            };
            let report = run_filter_experiment(&cfg, &suite)?;
            tracing::info!(
                tp = report.confusion.tp,
                fp = report.confusion.fp,
                r#fn = report.confusion.fn_,
                tn = report.confusion.tn,
                "filter experiment"
            );
            write_json(&report, out.as_deref())
        }
        EvalCmd::Bench {
            corpus,
            queries,
            backends,
            k,
            out,
        } => {
            let chunks: Vec<Chunk> = read_json(&corpus)?;
            let queries: Vec<BenchQuery> = read_json(&queries)?;
            let text = fs::read_to_string(&backends).with_context(|| format!("reading {}", backends.display()))?;
            let backends: Backends = toml::from_str(&text).with_context(|| format!("parsing {}", backends.display()))?;
            let report = run_retrieval_bench(&chunks, &queries, &backends.backends, k).await?;
            write_json(&report, out.as_deref())
        }
    }
}

fn init_logging(json: bool) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    if json {
        builder.json().init();
    } else {
        builder.init();
    }
}

#[tokio::main]
async fn main() -> Result<()> {
    let cli = Cli::parse();
    init_logging(cli.log_json);
    match cli.cmd {
        Cmd::Ingest(a) => ingest(a),
        Cmd::Chunk(a) => chunk(a),
        Cmd::Index(c) => index(c).await,
        Cmd::Guardrail(GuardrailCmd::Classify { config, question }) => {
            let g = Guardrail::new(guardrail_config(config.as_deref())?)?;
            write_json(&g.classify(&question)?, None)
        }
        Cmd::Eval(c) => eval(c).await,
        Cmd::Serve { config } => {
            let cfg = ServiceConfig::load(&config)?;
            tutor_service::run(cfg).await?;
            Ok(())
        }
    }
}
