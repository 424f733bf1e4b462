//! Experiment configuration and the end-to-end pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{read_dataset, resolve_dataset, split_8_1_1, ResolvedQuery, Splits};
use crate::aggregator::Aggregator;
use crate::clustering::KMeansConfig;
use crate::encoder::{encode_candidates_ref, QueryEncoder, RefEncoderShape, ReferenceEncoder};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_metrics, report_csv, MetricSummary};
use crate::remote::{ClientConfig, RemoteEncoder};
use crate::scorer::{write_rankings_jsonl, DEFAULT_PERSIST_TOP_K};
use crate::seed;
use crate::store::{read_store, EmbeddingMatrix};
use crate::trainer::{
    load_checkpoint, loss_log_csv, save_checkpoint, EncoderInit, Model, ModelShape, TrainConfig,
    TrainExample, Trainer,
};
use crate::tts::{
    evaluate_setting, initial_embeddings, tts_sweep, Conditioner, EvalQuery, QueryOutcome,
    SweepCell, SweepResult, TtsConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub store: PathBuf,
    pub dataset: PathBuf,
    /// Start from this checkpoint instead of a fresh init.
    pub checkpoint: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            store: "store.lrke".into(),
            dataset: "dataset.jsonl".into(),
            checkpoint: None,
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Clusters per aggregated subset.
    pub clusters: usize,
    pub projector_hidden: usize,
    /// Query feature width; defaults to the store dimension.
    pub base_dim: Option<usize>,
    /// Conditioning width; defaults to the encoder output width.
    pub cond_dim: Option<usize>,
    /// Encoder output width; a candidate map is added when it differs from
    /// the store dimension.
    pub out_dim: Option<usize>,
    /// Hidden ReLU width of the encoder; 0 for a single linear layer.
    /// Defaults to twice the base width.
    pub hidden_dim: Option<usize>,
    pub init: EncoderInit,
    pub init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            clusters: 4,
            projector_hidden: 32,
            base_dim: None,
            cond_dim: None,
            out_dim: None,
            hidden_dim: None,
            init: EncoderInit::Identity,
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansSection {
    pub max_iters: usize,
    pub batch_size: usize,
    pub assignment_dim: Option<usize>,
    pub tol: f64,
}

impl Default for KMeansSection {
    fn default() -> Self {
        let d = KMeansConfig::default();
        Self {
            max_iters: d.max_iters,
            batch_size: d.batch_size,
            assignment_dim: d.assignment_dim,
            tol: d.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtsSection {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub retention_ratio: f64,
}

impl Default for TtsSection {
    fn default() -> Self {
        Self {
            widths: vec![0],
            depths: vec![0],
            retention_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Reference,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub mode: EncoderMode,
    pub remote: ClientConfig,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Reference,
            remote: ClientConfig::default(),
        }
    }
}

/// Full experiment description. Every stochastic component draws its seed
/// from `seed` through a named sub-stream, so per-section `seed` fields are
/// overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Rankings keep this many entries per query.
    pub top_k: usize,
    pub paths: PathsSection,
    pub model: ModelSection,
    pub kmeans: KMeansSection,
    pub train: TrainConfig,
    pub tts: TtsSection,
    pub encoder: EncoderSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            top_k: DEFAULT_PERSIST_TOP_K,
            paths: PathsSection::default(),
            model: ModelSection::default(),
            kmeans: KMeansSection::default(),
            train: TrainConfig::default(),
            tts: TtsSection::default(),
            encoder: EncoderSection::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `section.key=value` overrides to a TOML document. Values are parsed
/// as TOML literals and fall back to plain strings.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut table = &mut *doc;
        for p in &parts[..parts.len() - 1] {
            let entry = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
        }
        table.insert(
            parts[parts.len() - 1].to_string(),
            parse_override_value(raw.trim()),
        );
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parse TOML text and apply overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        apply_overrides(&mut doc, overrides)?;
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file (or the defaults when `path` is `None`) and apply
    /// overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.kmeans_config().validate()?;
        self.train.validate()?;
        if self.tts.widths.is_empty() || self.tts.depths.is_empty() {
            return Err(Error::Config(
                "tts.widths and tts.depths must be non-empty".into(),
            ));
        }
        if self.model.projector_hidden == 0 {
            return Err(Error::Config(
                "model.projector_hidden must be positive".into(),
            ));
        }
        TtsConfig {
            width: 1,
            depth: 1,
            retention_ratio: self.tts.retention_ratio,
            ..TtsConfig::default()
        }
        .validate()
    }

    /// Every input path the config names must exist.
    pub fn check_paths(&self) -> Result<()> {
        let p = &self.paths;
        let inputs = [
            Some(("paths.store", &p.store)),
            Some(("paths.dataset", &p.dataset)),
        ];
        let ck = p.checkpoint.as_ref().map(|c| ("paths.checkpoint", c));
        for (key, path) in inputs.into_iter().chain([ck]).flatten() {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "{key} {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.model.clusters,
            max_iters: self.kmeans.max_iters,
            batch_size: self.kmeans.batch_size,
            assignment_dim: self.kmeans.assignment_dim,
            seed: seed::derive(self.seed, "kmeans", &[]),
            tol: self.kmeans.tol,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: seed::derive(self.seed, "train", &[]),
            ..self.train.clone()
        }
    }

    pub fn tts_base(&self) -> TtsConfig {
        TtsConfig {
            width: 0,
            depth: 0,
            retention_ratio: self.tts.retention_ratio,
            seed: seed::derive(self.seed, "tts", &[]),
            kmeans: self.kmeans_config(),
        }
    }

    /// Shape of a fresh model for a store of width `store_dim`.
    pub fn model_shape(&self, store_dim: usize) -> ModelShape {
        let m = &self.model;
        let base = m.base_dim.unwrap_or(store_dim);
        let out = m.out_dim.unwrap_or(store_dim);
        let hidden = match m.hidden_dim {
            Some(0) => None,
            Some(h) => Some(h),
            None => Some(2 * base),
        };
        ModelShape {
            clusters: m.clusters,
            store_dim,
            projector_hidden: m.projector_hidden,
            encoder: RefEncoderShape {
                base_dim: base,
                cond_dim: m.cond_dim.unwrap_or(out),
                out_dim: out,
                hidden_dim: hidden,
                candidate_dim: (out != store_dim).then_some(store_dim),
                init_scale: m.init_scale,
            },
            init: m.init,
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fresh model from the config, or the checkpoint it names.
pub fn build_model(cfg: &ExperimentConfig, store: &EmbeddingMatrix) -> Result<Model> {
    match &cfg.paths.checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            ck.model.encoder.check_store_dim(store.dim())?;
            Ok(ck.model)
        }
        None => Model::init(
            &cfg.model_shape(store.dim()),
            seed::derive(cfg.seed, "init", &[]),
        ),
    }
}

/// Train `model` on `train`; returns the trainer's final state.
pub fn train_model<'a>(
    model: Model,
    store: &'a EmbeddingMatrix,
    examples: &'a [TrainExample],
    train: TrainConfig,
    kmeans: KMeansConfig,
) -> Result<Trainer<'a>> {
    let mut t = Trainer::new(model, store, examples, train, kmeans)?;
    t.run(None)?;
    Ok(t)
}

/// Encoder, conditioner and candidate embeddings for ranking.
pub struct RankingContext<'a> {
    pub encoder: Box<dyn QueryEncoder + 'a>,
    pub conditioner: Aggregator<'a>,
    pub candidates: std::borrow::Cow<'a, EmbeddingMatrix>,
}

pub fn ranking_context<'a>(
    model: &'a Model,
    store: &'a EmbeddingMatrix,
    kmeans: KMeansConfig,
    mode: EncoderMode,
    remote: &ClientConfig,
) -> Result<RankingContext<'a>> {
    let conditioner = Aggregator {
        store,
        kmeans,
        projector: &model.projector,
    };
    match mode {
        EncoderMode::Reference => Ok(RankingContext {
            encoder: Box::new(ReferenceEncoder::new(&model.encoder)),
            conditioner,
            candidates: encode_candidates_ref(store, &model.encoder)?,
        }),
        EncoderMode::Remote => {
            let enc = RemoteEncoder::new(remote.clone())?;
            enc.client.check_dims()?;
            if model.projector.out_dim != remote.out_dim {
                return Err(Error::Config(format!(
                    "projector out_dim {} != remote hidden size {}",
                    model.projector.out_dim, remote.out_dim
                )));
            }
            if store.dim() != remote.out_dim {
                return Err(Error::DimMismatch {
                    expected: remote.out_dim,
                    actual: store.dim(),
                });
            }
            Ok(RankingContext {
                encoder: Box::new(enc),
                conditioner,
                candidates: std::borrow::Cow::Borrowed(store),
            })
        }
    }
}

/// Per-query evaluation line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerQuery {
    pub query_id: String,
    pub positive_id: u64,
    pub rank: Option<usize>,
    pub reciprocal_rank: f64,
    pub ndcg10: f64,
    pub encoder_calls: usize,
}

pub fn per_query_lines(outcomes: &[QueryOutcome], queries: &[EvalQuery]) -> Result<String> {
    let mut s = String::new();
    for (o, q) in outcomes.iter().zip(queries) {
        let pos = q.judgment.positive_ids.iter().next().copied().unwrap_or(0);
        let line = PerQuery {
            query_id: q.input.id.clone(),
            positive_id: pos,
            rank: o.ranking.rank_of(pos),
            reciprocal_rank: o.reciprocal_rank,
            ndcg10: o.ndcg10,
            encoder_calls: o.trace.encoder_calls,
        };
        s.push_str(&serde_json::to_string(&line)?);
        s.push('\n');
    }
    Ok(s)
}

/// Metric CSV with `mrr` and `ndcg@10` rows.
pub fn metrics_csv(outcomes: &[QueryOutcome]) -> Result<(String, MetricSummary, MetricSummary)> {
    let rr: Vec<f64> = outcomes.iter().map(|o| o.reciprocal_rank).collect();
    let nd: Vec<f64> = outcomes.iter().map(|o| o.ndcg10).collect();
    let mrr = aggregate_metrics(&rr)?;
    let ndcg = aggregate_metrics(&nd)?;
    Ok((report_csv(&[("mrr", mrr), ("ndcg@10", ndcg)]), mrr, ndcg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub splits: BTreeMap<String, usize>,
    /// Wall-clock seconds per phase.
    pub phase_seconds: BTreeMap<String, f64>,
    pub encoder_calls: BTreeMap<String, usize>,
    pub best_width: usize,
    pub best_depth: usize,
    /// SHA-256 of each deterministic output file.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub output: PathBuf,
    pub mrr: MetricSummary,
    pub ndcg10: MetricSummary,
    pub best: SweepCell,
    pub manifest: Manifest,
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn select(all: &[ResolvedQuery], idx: &[usize]) -> Vec<ResolvedQuery> {
    idx.iter().map(|&i| all[i].clone()).collect()
}

/// Move everything in `dir` except `failed/` into `dir/failed/`.
fn quarantine(dir: &Path) {
    let failed = dir.join("failed");
    if fs::create_dir_all(&failed).is_err() {
        return;
    }
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            if e.file_name() != "failed" {
                let _ = fs::rename(e.path(), failed.join(e.file_name()));
            }
        }
    }
}

struct Phases {
    times: BTreeMap<String, f64>,
}

impl Phases {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        log::info!("phase {name}");
        let out = f().map_err(|e| Error::Phase {
            phase: name.to_string(),
            source: Box::new(e),
        });
        self.times
            .insert(name.to_string(), start.elapsed().as_secs_f64());
        out
    }
}

/// Train (when `train.epochs > 0`), sweep width and depth on the validation
/// split, rank the test split with the best cell and write the report.
///
/// Outputs in `paths.output`: `metrics.csv`, `rankings.jsonl`,
/// `per_query.jsonl`, `sweep.csv`, `manifest.json`, plus `loss.csv` and
/// `checkpoint/` when training ran. On failure the partial outputs are moved
/// to `failed/` and the error names the phase.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    cfg.check_paths()?;
    let out = cfg.paths.output.clone();
    if out.join("failed").exists() {
        let _ = fs::remove_dir_all(out.join("failed"));
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let result = run_inner(cfg, &out);
    if result.is_err() {
        quarantine(&out);
    }
    result
}

fn run_inner(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let mut phases = Phases {
        times: BTreeMap::new(),
    };
    let remote = cfg.encoder.mode == EncoderMode::Remote;

    let (store, queries, splits) = phases.run("load", || {
        let store = read_store(&cfg.paths.store)?;
        let records = read_dataset(&cfg.paths.dataset)?;
        let queries = resolve_dataset(&records, &store, remote)?;
        let splits: Splits = split_8_1_1(queries.len(), seed::derive(cfg.seed, "split", &[]));
        if splits.val.is_empty() || splits.test.is_empty() {
            return Err(Error::Data(format!(
                "{} queries are too few for a train/validation/test split",
                queries.len()
            )));
        }
        Ok((store, queries, splits))
    })?;

    let mut model = phases.run("init", || build_model(cfg, &store))?;
    let kmeans = cfg.kmeans_config();

    if cfg.train.epochs > 0 {
        model = phases.run("train", || {
            if remote {
                return Err(Error::Config("training needs the reference encoder".into()));
            }
            let base = model.encoder.base_dim;
            let examples = select(&queries, &splits.train)
                .iter()
                .map(|q| q.to_train_example(base))
                .collect::<Result<Vec<_>>>()?;
            let t = train_model(
                model.clone(),
                &store,
                &examples,
                cfg.train_config(),
                kmeans.clone(),
            )?;
            save_checkpoint(&t.checkpoint(), out.join("checkpoint"))?;
            write(out, "loss.csv", &loss_log_csv(&t.log))?;
            Ok(t.model)
        })?;
    }

    let ctx = ranking_context(
        &model,
        &store,
        kmeans,
        cfg.encoder.mode,
        &cfg.encoder.remote,
    )?;
    let val: Vec<EvalQuery> = select(&queries, &splits.val)
        .iter()
        .map(|q| q.to_eval_query())
        .collect();
    let test: Vec<EvalQuery> = select(&queries, &splits.test)
        .iter()
        .map(|q| q.to_eval_query())
        .collect();
    let base = cfg.tts_base();

    let sweep: SweepResult = phases.run("sweep", || {
        tts_sweep(
            &val,
            ctx.candidates.as_ref(),
            ctx.encoder.as_ref(),
            &ctx.conditioner as &dyn Conditioner,
            &cfg.tts.widths,
            &cfg.tts.depths,
            &base,
        )
    })?;
    write(out, "sweep.csv", &sweep.to_csv())?;

    let best_cfg = TtsConfig {
        width: sweep.best.width,
        depth: sweep.best.depth,
        ..base
    };
    let outcomes = phases.run("test", || {
        let e0 = initial_embeddings(
            &test,
            ctx.encoder.as_ref(),
            &ctx.conditioner as &dyn Conditioner,
        )?;
        evaluate_setting(
            &test,
            &e0,
            ctx.candidates.as_ref(),
            ctx.encoder.as_ref(),
            &ctx.conditioner as &dyn Conditioner,
            &best_cfg,
        )
    })?;

    let (mrr, ndcg10) = phases.run("report", || {
        let (csv, mrr, ndcg) = metrics_csv(&outcomes)?;
        write(out, "metrics.csv", &csv)?;
        let rankings: Vec<_> = outcomes.iter().map(|o| o.ranking.clone()).collect();
        let p = out.join("rankings.jsonl");
        let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        write_rankings_jsonl(std::io::BufWriter::new(f), &rankings, Some(cfg.top_k))?;
        write(out, "per_query.jsonl", &per_query_lines(&outcomes, &test)?)?;
        write(out, "config.toml", &cfg.to_toml_string()?)?;
        Ok((mrr, ndcg))
    })?;

    let mut outputs = BTreeMap::new();
    for name in [
        "metrics.csv",
        "rankings.jsonl",
        "per_query.jsonl",
        "sweep.csv",
        "loss.csv",
    ] {
        let p = out.join(name);
        if let Ok(bytes) = fs::read(&p) {
            outputs.insert(name.to_string(), hex(&Sha256::digest(bytes)));
        }
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        versions: BTreeMap::from([
            (
                "lranker-core".to_string(),
                env!("CARGO_PKG_VERSION").to_string(),
            ),
            (
                "store_format".to_string(),
                crate::store::VERSION.to_string(),
            ),
        ]),
        splits: BTreeMap::from([
            ("train".to_string(), splits.train.len()),
            ("val".to_string(), splits.val.len()),
            ("test".to_string(), splits.test.len()),
        ]),
        phase_seconds: phases.times,
        encoder_calls: BTreeMap::from([
            (
                "sweep".to_string(),
                sweep.cells.iter().map(|c| c.encoder_calls).sum::<usize>(),
            ),
            (
                "test".to_string(),
                outcomes
                    .iter()
                    .map(|o| o.trace.encoder_calls)
                    .sum::<usize>(),
            ),
        ]),
        best_width: sweep.best.width,
        best_depth: sweep.best.depth,
        outputs,
    };
    write(
        out,
        "manifest.json",
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(RunReport {
        output: out.to_path_buf(),
        mrr,
        ndcg10,
        best: sweep.best,
        manifest,
    })
}
