use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use perspectra_core::clustering::ClusterConfig;
use perspectra_core::corpus::{ingest_jsonl, Corpus, FieldMapping};
use perspectra_core::evalharness::{parse_modes, parse_switches, write_csv, EvalConfig, ExperimentGrid};
use perspectra_core::geometry::ReductionConfig;
use perspectra_core::pipeline::TextMode;
use perspectra_core::providers::{EmbeddingCache, ProviderConfig, Providers};
use perspectra_service::app::{CreatePerspective, EvalRequest, TemplateRef};
use perspectra_service::jobs::JobStatus;
use perspectra_service::Service;

#[derive(Parser, Debug)]
#[command(name = "perspectra", version, about = "Aspect-focused document clustering")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Project directory.
    #[arg(long, global = true, env = "PERSPECTRA_ROOT", default_value = "perspectra-data")]
    root: PathBuf,
    /// Use the deterministic offline providers instead of HTTP endpoints.
    #[arg(long, global = true, env = "PERSPECTRA_MOCK_PROVIDERS")]
    mock_providers: bool,
    /// Dimension of mock embeddings.
    #[arg(long, global = true, env = "PERSPECTRA_MOCK_DIM", default_value_t = 64)]
    mock_dim: usize,
    #[arg(long, global = true, env = "PROVIDER_BASE_URL")]
    provider_base_url: Option<String>,
    #[arg(long, global = true, env = "PROVIDER_API_KEY", hide_env_values = true)]
    provider_api_key: Option<String>,
    #[arg(long, global = true, env = "PROVIDER_EMBEDDING_MODEL")]
    embedding_model: Option<String>,
    #[arg(long, global = true, env = "PROVIDER_GENERATION_MODEL")]
    generation_model: Option<String>,
    #[arg(long, global = true, env = "PROVIDER_BATCH_SIZE")]
    batch_size: Option<usize>,
    /// Embedding cache file, loaded at start and saved after each command.
    #[arg(long, global = true, env = "PERSPECTRA_EMBEDDING_CACHE")]
    embedding_cache: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a JSONL file as a corpus.
    Ingest(IngestArgs),
    /// Build (or rebuild) a perspective, creating it if needed.
    Build(BuildArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Run a KNN evaluation grid over a labeled corpus.
    Eval(EvalArgs),
    /// Write cluster names as document tags.
    ExportTags(ExportArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// JSONL file with one document per line.
    #[arg(long, env = "PERSPECTRA_FILE")]
    file: PathBuf,
    /// Corpus id; defaults to the file stem.
    #[arg(long = "corpus", env = "PERSPECTRA_CORPUS")]
    corpus_id: Option<String>,
    #[arg(long, env = "PERSPECTRA_NAME")]
    name: Option<String>,
    #[arg(long, env = "PERSPECTRA_TEXT_FIELD", default_value = "text")]
    text_field: String,
    #[arg(long, env = "PERSPECTRA_ID_FIELD", default_value = "id")]
    id_field: String,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long, env = "PERSPECTRA_PERSPECTIVE")]
    perspective: String,
    /// Corpus id, needed when the perspective does not exist yet.
    #[arg(long, env = "PERSPECTRA_CORPUS")]
    corpus: Option<String>,
    #[arg(long, env = "PERSPECTRA_INSTRUCTION")]
    instruction: Option<String>,
    #[arg(long, env = "PERSPECTRA_REWRITE_PROMPT")]
    rewrite_prompt: Option<String>,
    /// Bundled template task, e.g. topic or sentiment.
    #[arg(long, env = "PERSPECTRA_TEMPLATE")]
    template: Option<String>,
    #[arg(long, env = "PERSPECTRA_MODE", default_value = "text")]
    mode: TextMode,
    #[arg(long, env = "PERSPECTRA_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "PERSPECTRA_MIN_SAMPLES")]
    min_samples: Option<usize>,
    #[arg(long, env = "PERSPECTRA_MIN_CLUSTER_SIZE")]
    min_cluster_size: Option<usize>,
    #[arg(long, env = "PERSPECTRA_N_NEIGHBORS")]
    n_neighbors: Option<usize>,
    #[arg(long, env = "PERSPECTRA_CLUSTER_DIMS")]
    cluster_dims: Option<usize>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, env = "PERSPECTRA_HOST", default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "PERSPECTRA_PORT", default_value_t = 8080)]
    port: u16,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Stored corpus id or a JSONL file with a `label` field.
    #[arg(long, env = "PERSPECTRA_CORPUS")]
    corpus: String,
    #[arg(long, env = "PERSPECTRA_TASK", default_value = "topic")]
    task: String,
    /// Text modes: text, summary, keyphrases.
    #[arg(long, env = "PERSPECTRA_GRID", default_value = "text")]
    grid: String,
    #[arg(long, env = "PERSPECTRA_INSTRUCTION_SWITCH", default_value = "on")]
    instruction: String,
    #[arg(long, env = "PERSPECTRA_SHOTS", default_value = "0")]
    shots: String,
    #[arg(long, env = "PERSPECTRA_REPEATS", default_value_t = 10)]
    repeats: usize,
    #[arg(long, env = "PERSPECTRA_K", default_value_t = 5)]
    k: usize,
    #[arg(long, env = "PERSPECTRA_FOLDS", default_value_t = 5)]
    folds: usize,
    #[arg(long, env = "PERSPECTRA_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "PERSPECTRA_OUT", default_value = "results.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long, env = "PERSPECTRA_PERSPECTIVE")]
    perspective: String,
    #[arg(long, env = "PERSPECTRA_VERSION")]
    version: Option<u64>,
    /// Write the tag map here instead of stdout.
    #[arg(long, env = "PERSPECTRA_OUT")]
    out: Option<PathBuf>,
}

fn providers(g: &Global) -> Result<Providers> {
    let mut p = if g.mock_providers {
        Providers::mock(g.mock_dim)
    } else {
        let mut cfg = ProviderConfig::default();
        if let Some(u) = &g.provider_base_url {
            cfg.base_url = u.clone();
        }
        cfg.api_key = g.provider_api_key.clone();
        if let Some(m) = &g.embedding_model {
            cfg.embedding_model = m.clone();
        }
        if let Some(m) = &g.generation_model {
            cfg.generation_model = m.clone();
        }
        if let Some(b) = g.batch_size {
            cfg.batch_size = b;
        }
        Providers::http(cfg)?
    };
    if let Some(path) = &g.embedding_cache {
        let cache = if path.exists() {
            EmbeddingCache::load(path).with_context(|| format!("reading {}", path.display()))?
        } else {
            EmbeddingCache::default()
        };
        p = p.with_cache(cache);
    }
    Ok(p)
}

fn save_cache(g: &Global, p: &Providers) -> Result<()> {
    if let (Some(path), Some(cache)) = (&g.embedding_cache, &p.cache) {
        cache
            .lock()
            .map_err(|_| anyhow!("embedding cache lock poisoned"))?
            .save(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn read_jsonl(path: &Path, mapping: &FieldMapping) -> Result<(Vec<perspectra_core::corpus::Document>, Vec<usize>)> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (docs, report) = ingest_jsonl(BufReader::new(f), mapping)?;
    Ok((docs, report.empty_text_lines))
}

fn ingest(svc: &Service, a: &IngestArgs) -> Result<()> {
    let id = match &a.corpus_id {
        Some(id) => id.clone(),
        None => a
            .file
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .ok_or_else(|| anyhow!("cannot derive a corpus id from {}", a.file.display()))?,
    };
    let bytes = std::fs::read(&a.file).with_context(|| format!("reading {}", a.file.display()))?;
    let mapping = FieldMapping {
        text: a.text_field.clone(),
        id: a.id_field.clone(),
        metadata: None,
    };
    let s = svc.create_corpus(Some(&id), a.name.as_deref(), &bytes, &mapping)?;
    if !s.rejected_lines.is_empty() {
        eprintln!("skipped {} lines with empty text: {:?}", s.rejected_lines.len(), s.rejected_lines);
    }
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}

fn build(svc: &Arc<Service>, a: &BuildArgs) -> Result<()> {
    let store = svc.store();
    if store.perspective_exists(&a.perspective) {
        let mut p = store.load_perspective(&a.perspective)?;
        let mut changed = false;
        if let Some(s) = a.seed.filter(|&s| s != p.seed) {
            p.seed = s;
            changed = true;
        }
        if changed {
            p.validate()?;
            store.save_perspective(&p)?;
        }
    } else {
        let corpus_id = a
            .corpus
            .clone()
            .ok_or_else(|| anyhow!("perspective {:?} does not exist; pass --corpus to create it", a.perspective))?;
        let mut cluster = ClusterConfig::default();
        if let Some(m) = a.min_samples {
            cluster.min_samples = m;
        }
        cluster.min_cluster_size = a.min_cluster_size;
        let reduction = a.n_neighbors.map(|n| ReductionConfig {
            n_neighbors: n,
            ..Default::default()
        });
        svc.create_perspective(CreatePerspective {
            id: Some(a.perspective.clone()),
            corpus_id,
            instruction: a.instruction.clone(),
            rewrite_prompt: a.rewrite_prompt.clone(),
            template: a.template.clone().map(|task| TemplateRef { task, mode: a.mode }),
            seed: a.seed,
            reduction,
            cluster: Some(cluster),
            cluster_dims: a.cluster_dims,
            ..Default::default()
        })?;
    }
    let job = svc.submit_build(&a.perspective)?;
    let rec = svc.jobs().wait(&job.id).ok_or_else(|| anyhow!("job vanished"))?;
    if rec.status != JobStatus::Done {
        bail!("build failed: {}", rec.error.unwrap_or_default());
    }
    println!("{}", serde_json::to_string_pretty(&rec.result)?);
    eprintln!("wrote {}", store.clusters_path(&a.perspective).display());
    Ok(())
}

fn load_eval_corpus(svc: &Service, spec: &str) -> Result<Corpus> {
    let path = Path::new(spec);
    if path.is_file() {
        let (docs, _) = read_jsonl(path, &FieldMapping::default())?;
        let id = path.file_stem().map_or("eval".into(), |s| s.to_string_lossy().to_string());
        return Ok(Corpus::new(id.clone(), id, docs)?);
    }
    Ok(svc.store().load_corpus(spec)?)
}

fn eval(svc: &Service, a: &EvalArgs) -> Result<()> {
    let corpus = load_eval_corpus(svc, &a.corpus)?;
    let shots = a
        .shots
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad shot count {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    let grid = ExperimentGrid {
        task: a.task.clone(),
        modes: parse_modes(&a.grid)?,
        instruction: parse_switches(&a.instruction)?,
        shots,
    };
    let cfg = EvalConfig {
        k: a.k,
        folds: a.folds,
        seed: a.seed,
        repeats: a.repeats,
    };
    let req = EvalRequest {
        corpus_id: corpus.id.clone(),
        task: grid.task.clone(),
        modes: grid.modes.clone(),
        instruction: grid.instruction.clone(),
        shots: grid.shots.clone(),
        eval: Some(cfg.clone()),
        reduction: None,
        adapter: None,
    };
    let results = svc.run_eval(&corpus, &grid, &req, &cfg)?;
    let out = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_csv(&results, &cfg, out)?;
    for r in &results {
        println!("{:<28} {:.4} ± {:.4} (n={})", r.cell, r.mean_acc, r.std, r.n);
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn export_tags(svc: &Service, a: &ExportArgs) -> Result<()> {
    let tags: BTreeMap<String, Vec<String>> = svc.export_tags(&a.perspective, a.version)?;
    let json = serde_json::to_string_pretty(&tags)?;
    match &a.out {
        Some(p) => std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn serve(svc: Arc<Service>, a: &ServeArgs) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        perspectra_service::api::serve(svc, listener).await?;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    let providers = providers(&cli.global)?;
    let svc = Service::open(&cli.global.root, providers.clone())?;
    match &cli.cmd {
        Command::Ingest(a) => ingest(&svc, a)?,
        Command::Build(a) => build(&svc, a)?,
        Command::Serve(a) => serve(Arc::clone(&svc), a)?,
        Command::Eval(a) => eval(&svc, a)?,
        Command::ExportTags(a) => export_tags(&svc, a)?,
    }
    save_cache(&cli.global, &providers)
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
