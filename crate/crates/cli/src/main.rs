//! `lranker` command line.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lranker_core::clustering::KMeansConfig;
use lranker_core::harness::{
    build_model, gen_planted_linear, gen_pool_dependent, ingest_tsv_pairs, per_query_lines,
    ranking_context, read_dataset, resolve_dataset, run_experiment, split_8_1_1, write_dataset,
    DatasetRecord, EncoderMode, ExperimentConfig, PlantedLinearConfig, PoolDependentConfig,
};
use lranker_core::metrics::{aggregate_metrics, ndcg_ids, reciprocal_rank, report_csv};
use lranker_core::remote::{Client, ClientConfig, StubConfig, StubMode, StubServer};
use lranker_core::scorer::write_rankings_jsonl;
use lranker_core::trainer::{load_checkpoint, loss_log_csv, save_checkpoint, Model, Trainer};
use lranker_core::tts::{
    evaluate_setting, initial_embeddings, tts_sweep, Conditioner, EvalQuery, TtsConfig,
};
use lranker_core::{read_store, write_store, EmbeddingMatrix, Error, Result};

#[derive(Parser)]
#[command(
    name = "lranker",
    version,
    about = "Embedding ranking over massive candidate pools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic store and dataset.
    GenData(GenDataArgs),
    /// Convert `id<TAB>text` TSV files into a dataset and a featurized store.
    Ingest(IngestArgs),
    /// Train the projector and reference encoder on every record of a dataset.
    Train(TrainArgs),
    /// Rank every query of a dataset at one width and depth.
    Rank(RankArgs),
    /// Evaluate a width x depth grid and write `width,depth,mrr,ndcg10` CSV.
    TtsSweep(SweepArgs),
    /// Score a rankings file against a dataset.
    Eval(EvalArgs),
    /// Full pipeline: train, sweep on validation, evaluate the best cell on test.
    Run(RunArgs),
    /// Serve a local stand-in for the remote query encoder.
    ServeStub(StubArgs),
}

/// Experiment configuration shared by the pipeline verbs. Every config key
/// can be set with `--set section.key=value`; the named flags are shortcuts
/// for the common ones. Flags override the file.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed (`seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Candidate store (`paths.store`).
    #[arg(long)]
    store: Option<PathBuf>,
    /// Dataset JSONL (`paths.dataset`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint directory to start from (`paths.checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (`paths.output`).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Number of clusters K (`model.clusters`).
    #[arg(long)]
    clusters: Option<usize>,
    /// Training epochs (`train.epochs`).
    #[arg(long)]
    epochs: Option<usize>,
    /// Query encoder (`encoder.mode`).
    #[arg(long, value_enum)]
    encoder: Option<EncoderArg>,
    /// Remote encoder base URL (`encoder.remote.base_url`).
    #[arg(long)]
    remote_url: Option<String>,
    /// Remote encoder hidden size (`encoder.remote.out_dim`).
    #[arg(long)]
    remote_dim: Option<usize>,
    /// Ranking entries persisted per query (`top_k`).
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Reference,
    Remote,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut o = Vec::new();
        let mut push = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{key}={v}"));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| toml_str(&p.to_string_lossy()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("paths.store", path(&self.store));
        push("paths.dataset", path(&self.dataset));
        push("paths.checkpoint", path(&self.checkpoint));
        push("paths.output", path(&self.output));
        push("model.clusters", self.clusters.map(|v| v.to_string()));
        push("train.epochs", self.epochs.map(|v| v.to_string()));
        push(
            "encoder.mode",
            self.encoder.map(|e| {
                match e {
                    EncoderArg::Reference => "\"reference\"",
                    EncoderArg::Remote => "\"remote\"",
                }
                .to_string()
            }),
        );
        push(
            "encoder.remote.base_url",
            self.remote_url.as_deref().map(toml_str),
        );
        push(
            "encoder.remote.out_dim",
            self.remote_dim.map(|v| v.to_string()),
        );
        push("top_k", self.top_k.map(|v| v.to_string()));
        o.extend(self.overrides.iter().cloned());
        let cfg = ExperimentConfig::load(self.config.as_deref(), &o)?;
        cfg.check_paths()?;
        Ok(cfg)
    }
}

fn toml_str(s: &str) -> String {
    let escaped = s.replace('\\', "\\\\").replace('"', "\\\"");
    format!("\"{escaped}\"")
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(value_enum)]
    kind: GenKind,
    /// Store file to write.
    #[arg(long)]
    store: PathBuf,
    /// Dataset JSONL to write.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_candidates: usize,
    #[arg(long, default_value_t = 250)]
    n_queries: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Per-coordinate query noise (planted).
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Negatives per query (planted).
    #[arg(long, default_value_t = 100)]
    negatives: usize,
    /// Candidates per query pool (pool-dependent).
    #[arg(long, default_value_t = 50)]
    pool_size: usize,
    /// Candidate groups (pool-dependent).
    #[arg(long, default_value_t = 20)]
    groups: usize,
    /// Candidate spread around its group center (pool-dependent).
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    /// Queries are noisy copies of their positive's embedding.
    Planted,
    /// The positive depends on statistics of the query's own pool.
    PoolDependent,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    /// `query_id<TAB>candidate_id` relevance pairs.
    #[arg(long)]
    qrels: PathBuf,
    /// Dataset JSONL to write.
    #[arg(long)]
    dataset: PathBuf,
    /// Store to write. Rows come from the text featurizer, or from the
    /// remote service when `--remote-url` is given.
    #[arg(long)]
    store: PathBuf,
    /// Featurizer width.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Embed candidates through the remote service at this URL.
    #[arg(long)]
    remote_url: Option<String>,
    /// Also write `<dataset>.{train,val,test}.jsonl` from a seeded 8:1:1 split.
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Continue training from this checkpoint (same data required).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many more optimizer steps.
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    depth: usize,
    /// Rankings JSONL to write (default `<output>/rankings.jsonl`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write each query's search trace as JSONL.
    #[arg(long)]
    dump_trace: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated widths (`tts.widths`).
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Comma-separated depths (`tts.depths`).
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    /// CSV to write (default `<output>/sweep.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Rankings JSONL as written by `rank`.
    #[arg(long)]
    rankings: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    store: PathBuf,
    /// Metrics CSV to write (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated widths (`tts.widths`).
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Comma-separated depths (`tts.depths`).
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
}

#[derive(Args)]
struct StubArgs {
    /// Model id reported by `/health`.
    #[arg(long, default_value = "stub-featurizer")]
    model: String,
    #[arg(long, default_value_t = 8077)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Hidden size; conditioning vectors of any other length are rejected.
    #[arg(
        long = "hidden-size-check",
        alias = "hidden-size",
        default_value_t = 32
    )]
    hidden_size: usize,
    /// Enable `/debug_states`.
    #[arg(long)]
    debug: bool,
    /// Answer the first N embedding requests with HTTP 503.
    #[arg(long, default_value_t = 0)]
    fail_first: usize,
    /// Delay every embedding response by this many milliseconds.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    lranker_core::init_threads_from_env();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Rank(a) => rank(a),
        Command::TtsSweep(a) => sweep(a),
        Command::Eval(a) => eval(a),
        Command::Run(a) => run(a),
        Command::ServeStub(a) => serve_stub(a),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_data(
    store: &EmbeddingMatrix,
    records: &[DatasetRecord],
    store_path: &Path,
    dataset: &Path,
) -> Result<()> {
    create_parent(store_path)?;
    create_parent(dataset)?;
    write_store(store, store_path)?;
    write_dataset(dataset, records)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let (store, records) = match a.kind {
        GenKind::Planted => gen_planted_linear(&PlantedLinearConfig {
            n_candidates: a.n_candidates,
            n_queries: a.n_queries,
            dim: a.dim,
            noise: a.noise,
            negatives: a.negatives,
            seed: a.seed,
        })?,
        GenKind::PoolDependent => {
            let (s, r, _) = gen_pool_dependent(&PoolDependentConfig {
                n_candidates: a.n_candidates,
                n_queries: a.n_queries,
                dim: a.dim,
                pool_size: a.pool_size,
                groups: a.groups,
                spread: a.spread,
                seed: a.seed,
            })?;
            (s, r)
        }
    };
    save_data(&store, &records, &a.store, &a.dataset)?;
    log::info!(
        "wrote {} candidates x {} to {} and {} queries to {}",
        store.count(),
        store.dim(),
        a.store.display(),
        records.len(),
        a.dataset.display()
    );
    Ok(())
}

fn split_path(dataset: &Path, part: &str) -> PathBuf {
    let stem = dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    dataset.with_file_name(format!("{stem}.{part}.jsonl"))
}

fn ingest(a: IngestArgs) -> Result<()> {
    let ing = ingest_tsv_pairs(&a.queries, &a.candidates, &a.qrels)?;
    let store = match &a.remote_url {
        None => ing.featurized_store(a.dim)?,
        Some(url) => {
            let client = Client::new(ClientConfig {
                base_url: url.clone(),
                out_dim: a.dim,
                ..ClientConfig::default()
            })?;
            client.check_dims()?;
            let rows = ing
                .candidate_texts
                .iter()
                .map(|t| client.embed_candidate(t))
                .collect::<Result<Vec<_>>>()?;
            EmbeddingMatrix::from_f64_rows(&rows)?.with_ids(ing.candidate_ids.clone())?
        }
    };
    save_data(&store, &ing.records, &a.store, &a.dataset)?;
    if let Some(seed) = a.split_seed {
        let splits = split_8_1_1(ing.records.len(), seed);
        for (part, idx) in [
            ("train", &splits.train),
            ("val", &splits.val),
            ("test", &splits.test),
        ] {
            let recs: Vec<DatasetRecord> = idx.iter().map(|&i| ing.records[i].clone()).collect();
            write_dataset(split_path(&a.dataset, part), &recs)?;
        }
    }
    log::info!(
        "ingested {} queries and {} candidates",
        ing.records.len(),
        store.count()
    );
    Ok(())
}

fn load_eval_data(cfg: &ExperimentConfig) -> Result<(EmbeddingMatrix, Vec<EvalQuery>)> {
    let store = read_store(&cfg.paths.store)?;
    let records = read_dataset(&cfg.paths.dataset)?;
    let remote = cfg.encoder.mode == EncoderMode::Remote;
    let queries = resolve_dataset(&records, &store, remote)?;
    Ok((store, queries.iter().map(|q| q.to_eval_query()).collect()))
}

/// Model plus the k-means settings it was trained with.
fn load_model(cfg: &ExperimentConfig, store: &EmbeddingMatrix) -> Result<(Model, KMeansConfig)> {
    let model = build_model(cfg, store)?;
    let kmeans = match &cfg.paths.checkpoint {
        Some(p) => load_checkpoint(p)?.kmeans,
        None => cfg.kmeans_config(),
    };
    Ok((model, kmeans))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let store = read_store(&cfg.paths.store)?;
    let records = read_dataset(&cfg.paths.dataset)?;
    let queries = resolve_dataset(&records, &store, false)?;
    let ck = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let fresh = match ck {
        Some(_) => None,
        None => Some(build_model(&cfg, &store)?),
    };
    let base = match (&ck, &fresh) {
        (Some(c), _) => c.model.encoder.base_dim,
        (None, Some(m)) => m.encoder.base_dim,
        (None, None) => unreachable!("a model is either resumed or built"),
    };
    let examples = queries
        .iter()
        .map(|q| q.to_train_example(base))
        .collect::<Result<Vec<_>>>()?;
    let mut t = match (ck, fresh) {
        (Some(c), _) => Trainer::resume(c, &store, &examples)?,
        (None, Some(m)) => Trainer::new(
            m,
            &store,
            &examples,
            cfg.train_config(),
            cfg.kmeans_config(),
        )?,
        (None, None) => unreachable!("a model is either resumed or built"),
    };
    t.run(a.max_steps)?;
    let (ck, done) = (t.checkpoint(), t.is_done());
    let out = &cfg.paths.output;
    save_checkpoint(&ck, out.join("checkpoint"))?;
    write_file(&out.join("loss.csv"), &loss_log_csv(&ck.log))?;
    log::info!(
        "step {} ({}); checkpoint in {}",
        ck.step,
        if done { "finished" } else { "paused" },
        out.join("checkpoint").display()
    );
    Ok(())
}

fn rank(a: RankArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let (store, queries) = load_eval_data(&cfg)?;
    let (model, kmeans) = load_model(&cfg, &store)?;
    let ctx = ranking_context(
        &model,
        &store,
        kmeans.clone(),
        cfg.encoder.mode,
        &cfg.encoder.remote,
    )?;
    let tts = TtsConfig {
        width: a.width,
        depth: a.depth,
        kmeans,
        ..cfg.tts_base()
    };
    tts.validate()?;
    let cond = &ctx.conditioner as &dyn Conditioner;
    let e0 = initial_embeddings(&queries, ctx.encoder.as_ref(), cond)?;
    let outcomes = evaluate_setting(
        &queries,
        &e0,
        ctx.candidates.as_ref(),
        ctx.encoder.as_ref(),
        cond,
        &tts,
    )?;

    let out = a
        .out
        .unwrap_or_else(|| cfg.paths.output.join("rankings.jsonl"));
    create_parent(&out)?;
    let f = fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
    let rankings: Vec<_> = outcomes.iter().map(|o| o.ranking.clone()).collect();
    write_rankings_jsonl(BufWriter::new(f), &rankings, Some(cfg.top_k))?;
    write_file(
        &out.with_file_name("per_query.jsonl"),
        &per_query_lines(&outcomes, &queries)?,
    )?;
    if let Some(p) = &a.dump_trace {
        let mut s = String::new();
        for o in &outcomes {
            s.push_str(&serde_json::to_string(&o.trace)?);
            s.push('\n');
        }
        write_file(p, &s)?;
    }
    let rr: Vec<f64> = outcomes.iter().map(|o| o.reciprocal_rank).collect();
    let calls: usize = outcomes.iter().map(|o| o.trace.encoder_calls).sum();
    println!(
        "ranked {} queries at width {} depth {}: mrr {:.4}, encoder calls {calls}",
        outcomes.len(),
        a.width,
        a.depth,
        aggregate_metrics(&rr)?.mean
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    if let Some(w) = a.widths {
        cfg.tts.widths = w;
    }
    if let Some(d) = a.depths {
        cfg.tts.depths = d;
    }
    cfg.validate()?;
    let (store, queries) = load_eval_data(&cfg)?;
    let (model, kmeans) = load_model(&cfg, &store)?;
    let ctx = ranking_context(
        &model,
        &store,
        kmeans.clone(),
        cfg.encoder.mode,
        &cfg.encoder.remote,
    )?;
    let base = TtsConfig {
        kmeans,
        ..cfg.tts_base()
    };
    let res = tts_sweep(
        &queries,
        ctx.candidates.as_ref(),
        ctx.encoder.as_ref(),
        &ctx.conditioner as &dyn Conditioner,
        &cfg.tts.widths,
        &cfg.tts.depths,
        &base,
    )?;
    let out = a.out.unwrap_or_else(|| cfg.paths.output.join("sweep.csv"));
    write_file(&out, &res.to_csv())?;
    println!(
        "best width {} depth {}: mrr {:.4}, ndcg@10 {:.4}",
        res.best.width, res.best.depth, res.best.mrr, res.best.ndcg10
    );
    Ok(())
}

#[derive(serde::Deserialize)]
struct RankingLine {
    query_id: String,
    ranking: Vec<u64>,
}

fn eval(a: EvalArgs) -> Result<()> {
    let store = read_store(&a.store)?;
    let records = read_dataset(&a.dataset)?;
    let queries = resolve_dataset(&records, &store, false)?;
    let eval_queries: Vec<EvalQuery> = queries.iter().map(|q| q.to_eval_query()).collect();
    let judged: HashMap<&str, &EvalQuery> = eval_queries
        .iter()
        .map(|q| (q.input.id.as_str(), q))
        .collect();
    let f = fs::File::open(&a.rankings).map_err(|e| Error::io(&a.rankings, e))?;
    let (mut rr, mut nd) = (Vec::new(), Vec::new());
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&a.rankings, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RankingLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", a.rankings.display(), n + 1)))?;
        let q = judged
            .get(r.query_id.as_str())
            .ok_or_else(|| Error::Data(format!("ranking for unknown query {:?}", r.query_id)))?;
        rr.push(reciprocal_rank(&r.ranking, &q.judgment));
        nd.push(ndcg_ids(&r.ranking, &q.judgment, 10));
    }
    let csv = report_csv(&[
        ("mrr", aggregate_metrics(&rr)?),
        ("ndcg@10", aggregate_metrics(&nd)?),
    ]);
    match &a.out {
        Some(p) => write_file(p, &csv)?,
        None => {
            std::io::stdout()
                .write_all(csv.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    if let Some(w) = a.widths {
        cfg.tts.widths = w;
    }
    if let Some(d) = a.depths {
        cfg.tts.depths = d;
    }
    let report = run_experiment(&cfg)?;
    println!(
        "test mrr {:.4} (se {:.4}), ndcg@10 {:.4}; best width {} depth {}; report in {}",
        report.mrr.mean,
        report.mrr.se,
        report.ndcg10.mean,
        report.best.width,
        report.best.depth,
        report.output.display()
    );
    Ok(())
}

fn serve_stub(a: StubArgs) -> Result<()> {
    let server = StubServer::start(
        StubConfig {
            hidden_size: a.hidden_size,
            model_id: a.model,
            mode: StubMode::Featurize,
            debug: a.debug,
            fail_first: a.fail_first,
            delay_ms: a.delay_ms,
        },
        &format!("{}:{}", a.host, a.port),
    )?;
    println!("serving on {}", server.url());
    std::io::stdout()
        .flush()
        .map_err(|e| Error::io("<stdout>", e))?;
    server.join();
    Ok(())
}
