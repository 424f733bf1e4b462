//! Dataset records, synthetic generators, TSV ingestion and query splits.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{featurize_text, QueryInput};
use crate::error::{Error, Result};
use crate::metrics::RelevanceJudgment;
use crate::seed;
use crate::store::EmbeddingMatrix;
use crate::trainer::TrainExample;
use crate::tts::EvalQuery;

/// A candidate reference: a row index, or a text id looked up in the
/// store's id sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CandidateRef {
    Index(u64),
    Name(String),
}

impl From<usize> for CandidateRef {
    fn from(i: usize) -> Self {
        CandidateRef::Index(i as u64)
    }
}

impl std::fmt::Display for CandidateRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CandidateRef::Index(i) => write!(f, "{i}"),
            CandidateRef::Name(s) => write!(f, "{s:?}"),
        }
    }
}

/// One line of a dataset JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    pub positive_id: CandidateRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_ids: Option<Vec<CandidateRef>>,
    /// This query's candidate universe; the whole store when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_ids: Option<Vec<CandidateRef>>,
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Maps [`CandidateRef`]s onto store rows.
pub struct IdResolver<'a> {
    count: usize,
    names: Option<HashMap<&'a str, usize>>,
}

impl<'a> IdResolver<'a> {
    pub fn new(store: &'a EmbeddingMatrix) -> Self {
        Self {
            count: store.count(),
            names: store.ids().map(|ids| {
                ids.iter()
                    .enumerate()
                    .map(|(i, s)| (s.as_str(), i))
                    .collect()
            }),
        }
    }

    pub fn resolve(&self, r: &CandidateRef) -> Result<usize> {
        match r {
            CandidateRef::Index(i) if (*i as usize) < self.count => Ok(*i as usize),
            CandidateRef::Name(s) => self
                .names
                .as_ref()
                .and_then(|m| m.get(s.as_str()).copied())
                .ok_or_else(|| Error::Data(format!("candidate id {s:?} not found in store"))),
            _ => Err(Error::Data(format!(
                "candidate {r} not found in store (count {})",
                self.count
            ))),
        }
    }
}

/// A dataset record with candidates resolved to store rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedQuery {
    pub input: QueryInput,
    pub positive: usize,
    pub negatives: Vec<usize>,
    pub pool: Vec<usize>,
}

impl ResolvedQuery {
    /// Base features: explicit features, else the featurized text.
    pub fn features(&self, base_dim: usize) -> Result<Vec<f64>> {
        crate::encoder::query_features(&self.input, base_dim).map(|f| f.0)
    }

    pub fn to_train_example(&self, base_dim: usize) -> Result<TrainExample> {
        Ok(TrainExample {
            id: self.input.id.clone(),
            features: self.features(base_dim)?,
            positive: self.positive,
            negatives: self.negatives.clone(),
            pool: self.pool.clone(),
        })
    }

    pub fn to_eval_query(&self) -> EvalQuery {
        EvalQuery {
            input: self.input.clone(),
            pool: self.pool.clone(),
            judgment: RelevanceJudgment::single(self.input.id.clone(), self.positive as u64),
        }
    }
}

/// Resolve ids and check record invariants. `text_required` is set in
/// remote mode, where the service needs query text.
pub fn resolve_dataset(
    records: &[DatasetRecord],
    store: &EmbeddingMatrix,
    text_required: bool,
) -> Result<Vec<ResolvedQuery>> {
    let resolver = IdResolver::new(store);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let qid = &rec.query_id;
        if !seen.insert(qid.as_str()) {
            return Err(Error::Data(format!("duplicate query id {qid:?}")));
        }
        if text_required {
            if rec.text.is_none() {
                return Err(Error::Data(format!(
                    "query {qid:?}: remote mode needs text"
                )));
            }
        } else if rec.text.is_some() == rec.features.is_some() {
            return Err(Error::Data(format!(
                "query {qid:?}: exactly one of text and features must be present"
            )));
        }
        if let Some(f) = &rec.features {
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("query {qid:?}: non-finite feature")));
            }
        }
        let positive = resolver.resolve(&rec.positive_id)?;
        let pool: Vec<usize> = match &rec.pool_ids {
            Some(p) => {
                let mut v = p
                    .iter()
                    .map(|r| resolver.resolve(r))
                    .collect::<Result<Vec<_>>>()?;
                v.sort_unstable();
                v.dedup();
                if v.binary_search(&positive).is_err() {
                    return Err(Error::Data(format!(
                        "query {qid:?}: positive is not in its pool"
                    )));
                }
                v
            }
            None => (0..store.count()).collect(),
        };
        let negatives: Vec<usize> = match &rec.negative_ids {
            Some(n) => {
                let set: BTreeSet<usize> = n
                    .iter()
                    .map(|r| resolver.resolve(r))
                    .collect::<Result<_>>()?;
                set.into_iter().filter(|&c| c != positive).collect()
            }
            None => pool.iter().copied().filter(|&c| c != positive).collect(),
        };
        if negatives.is_empty() {
            return Err(Error::Data(format!("query {qid:?} has no negatives")));
        }
        out.push(ResolvedQuery {
            input: QueryInput {
                id: qid.clone(),
                text: rec.text.clone(),
                features: rec.features.clone(),
            },
            positive,
            negatives,
            pool,
        });
    }
    Ok(out)
}

fn gaussian(rng: &mut impl Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Rows drawn uniformly from the unit sphere.
pub fn sphere_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::derived_rng(seed, "sphere", &[]);
    (0..n).map(|_| unit(gaussian(&mut rng, dim, 1.0))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedLinearConfig {
    pub n_candidates: usize,
    pub n_queries: usize,
    pub dim: usize,
    /// Standard deviation of the per-coordinate Gaussian noise.
    pub noise: f64,
    /// Negatives listed per record (all other candidates when larger).
    pub negatives: usize,
    pub seed: u64,
}

impl Default for PlantedLinearConfig {
    fn default() -> Self {
        Self {
            n_candidates: 1000,
            n_queries: 250,
            dim: 64,
            noise: 0.3,
            negatives: 100,
            seed: 0,
        }
    }
}

/// Unit-sphere candidates; each query is its positive's embedding plus
/// independent `N(0, noise^2)` noise per coordinate.
pub fn gen_planted_linear(
    cfg: &PlantedLinearConfig,
) -> Result<(EmbeddingMatrix, Vec<DatasetRecord>)> {
    if cfg.n_candidates < 2 || cfg.dim == 0 {
        return Err(Error::InvalidArgument(
            "planted-linear needs >= 2 candidates and dim >= 1".into(),
        ));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::InvalidArgument("noise must be >= 0".into()));
    }
    let rows = sphere_rows(
        cfg.n_candidates,
        cfg.dim,
        seed::derive(cfg.seed, "candidates", &[]),
    );
    let store = EmbeddingMatrix::from_f64_rows(&rows)?;
    let n_neg = cfg.negatives.min(cfg.n_candidates - 1).max(1);
    let records = (0..cfg.n_queries)
        .map(|q| {
            let mut rng = seed::derived_rng(cfg.seed, "query", &[q as u64]);
            let pos = rng.random_range(0..cfg.n_candidates);
            // positives are stored as f32, so perturb the stored value
            let base = store.row_f64(pos);
            let noise = gaussian(&mut rng, cfg.dim, cfg.noise);
            let features: Vec<f64> = base.iter().zip(&noise).map(|(a, b)| a + b).collect();
            let mut negs: Vec<usize> = index::sample(&mut rng, cfg.n_candidates - 1, n_neg)
                .into_iter()
                .map(|i| if i >= pos { i + 1 } else { i })
                .collect();
            negs.sort_unstable();
            DatasetRecord {
                query_id: format!("q{q}"),
                text: None,
                features: Some(features),
                positive_id: pos.into(),
                negative_ids: Some(negs.into_iter().map(CandidateRef::from).collect()),
                pool_ids: None,
            }
        })
        .collect();
    Ok((store, records))
}

/// Append `extra` unit-sphere distractor rows to `store`.
pub fn add_distractors(
    store: &EmbeddingMatrix,
    extra: usize,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    let mut data = store.as_slice().to_vec();
    for r in sphere_rows(extra, store.dim(), seed::derive(seed, "distractors", &[])) {
        data.extend(r.iter().map(|&v| v as f32));
    }
    EmbeddingMatrix::new(store.count() + extra, store.dim(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolDependentConfig {
    pub n_candidates: usize,
    pub n_queries: usize,
    pub dim: usize,
    /// Candidates per query pool.
    pub pool_size: usize,
    /// Number of candidate groups (rounded up to even). Each pool is drawn
    /// from a single group, so pool means differ strongly between queries.
    /// Group centers come in antipodal pairs, so the pool mean averages to
    /// zero over groups and carries no information without conditioning.
    pub groups: usize,
    /// Within-group standard deviation (total, spread over coordinates).
    pub spread: f64,
    pub seed: u64,
}

impl Default for PoolDependentConfig {
    fn default() -> Self {
        Self {
            n_candidates: 2000,
            n_queries: 500,
            dim: 8,
            pool_size: 50,
            groups: 20,
            spread: 0.5,
            seed: 0,
        }
    }
}

/// The hidden rule of the pool-dependent task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRule {
    pub dim: usize,
    /// `dim x dim` mixing matrix, row-major.
    pub mixing: Vec<f64>,
}

impl PoolRule {
    /// `R (e_q ⊙ mean_pool)`.
    pub fn target(&self, e_q: &[f64], store: &EmbeddingMatrix, pool: &[usize]) -> Vec<f64> {
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for &c in pool {
            for (m, &v) in mean.iter_mut().zip(store.row(c)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= pool.len() as f64);
        let had: Vec<f64> = e_q.iter().zip(&mean).map(|(a, b)| a * b).collect();
        (0..d)
            .map(|i| {
                self.mixing[i * d..(i + 1) * d]
                    .iter()
                    .zip(&had)
                    .map(|(r, h)| r * h)
                    .sum()
            })
            .collect()
    }

    /// Pool member with the largest `<e(c), target>`; ties to the smaller row.
    pub fn positive(&self, e_q: &[f64], store: &EmbeddingMatrix, pool: &[usize]) -> usize {
        let t = self.target(e_q, store, pool);
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for &c in pool {
            let s: f64 = store
                .row(c)
                .iter()
                .zip(&t)
                .map(|(&e, w)| e as f64 * w)
                .sum();
            if s > best.0 || (s == best.0 && c < best.1) {
                best = (s, c);
            }
        }
        best.1
    }
}

/// Candidates are grouped around random centers; each query draws its pool
/// from one group and its positive is the pool member maximizing
/// `<e(c), R (e_q ⊙ mean_pool)>` for a fixed random `R`.
pub fn gen_pool_dependent(
    cfg: &PoolDependentConfig,
) -> Result<(EmbeddingMatrix, Vec<DatasetRecord>, PoolRule)> {
    if cfg.dim == 0 || cfg.groups == 0 || cfg.pool_size < 2 {
        return Err(Error::InvalidArgument(
            "pool-dependent needs dim, groups >= 1 and pool_size >= 2".into(),
        ));
    }
    if cfg.n_candidates < cfg.groups * cfg.pool_size {
        return Err(Error::InvalidArgument(format!(
            "need at least groups x pool_size = {} candidates",
            cfg.groups * cfg.pool_size
        )));
    }
    let d = cfg.dim;
    let half = sphere_rows(
        cfg.groups.div_ceil(2),
        d,
        seed::derive(cfg.seed, "centers", &[]),
    );
    let centers: Vec<Vec<f64>> = half
        .iter()
        .cloned()
        .chain(half.iter().map(|c| c.iter().map(|v| -v).collect()))
        .collect();
    let groups = centers.len();
    if cfg.n_candidates < groups * cfg.pool_size {
        return Err(Error::InvalidArgument(format!(
            "need at least groups x pool_size = {} candidates",
            groups * cfg.pool_size
        )));
    }
    let mut rng = seed::derived_rng(cfg.seed, "candidates", &[]);
    let rows: Vec<Vec<f64>> = (0..cfg.n_candidates)
        .map(|i| {
            let noise = gaussian(&mut rng, d, cfg.spread / (d as f64).sqrt());
            centers[i % groups]
                .iter()
                .zip(&noise)
                .map(|(c, n)| c + n)
                .collect()
        })
        .collect();
    let store = EmbeddingMatrix::from_f64_rows(&rows)?;
    let mut rng = seed::derived_rng(cfg.seed, "mixing", &[]);
    let rule = PoolRule {
        dim: d,
        mixing: gaussian(&mut rng, d * d, 1.0 / (d as f64).sqrt()),
    };
    let members: Vec<Vec<usize>> = (0..groups)
        .map(|g| (g..cfg.n_candidates).step_by(groups).collect())
        .collect();
    let records = (0..cfg.n_queries)
        .map(|q| {
            let mut rng = seed::derived_rng(cfg.seed, "query", &[q as u64]);
            let g = rng.random_range(0..groups);
            let mut pool: Vec<usize> = members[g]
                .choose_multiple(&mut rng, cfg.pool_size)
                .copied()
                .collect();
            pool.sort_unstable();
            let e_q = unit(gaussian(&mut rng, d, 1.0));
            let pos = rule.positive(&e_q, &store, &pool);
            DatasetRecord {
                query_id: format!("q{q}"),
                text: None,
                features: Some(e_q),
                positive_id: pos.into(),
                negative_ids: None,
                pool_ids: Some(pool.into_iter().map(CandidateRef::from).collect()),
            }
        })
        .collect();
    Ok((store, records, rule))
}

/// Output of [`ingest_tsv_pairs`].
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub records: Vec<DatasetRecord>,
    pub candidate_ids: Vec<String>,
    pub candidate_texts: Vec<String>,
}

impl Ingested {
    /// Store of featurized candidate texts with the id sidecar attached.
    pub fn featurized_store(&self, dim: usize) -> Result<EmbeddingMatrix> {
        let rows: Vec<Vec<f64>> = self
            .candidate_texts
            .iter()
            .map(|t| featurize_text(t, dim).0)
            .collect();
        if rows.is_empty() {
            return Err(Error::Data("no candidates".into()));
        }
        EmbeddingMatrix::from_f64_rows(&rows)?.with_ids(self.candidate_ids.clone())
    }
}

fn read_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: expected two tab-separated fields",
                path.display(),
                n + 1
            ))
        })?;
        let b = b.split('\t').next().unwrap_or("");
        out.push((a.trim().to_string(), b.to_string()));
    }
    Ok(out)
}

fn check_unique(items: &[(String, String)], what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for (id, _) in items {
        if !seen.insert(id.as_str()) {
            return Err(Error::Data(format!("duplicate {what} id {id:?}")));
        }
    }
    Ok(())
}

/// Read `id<TAB>text` query and candidate files and `query_id<TAB>candidate_id`
/// relevance pairs. Each query keeps its first relevant candidate as the
/// positive; its negatives are the positives of all other queries. Queries
/// without a relevance pair are skipped.
pub fn ingest_tsv_pairs(queries: &Path, candidates: &Path, qrels: &Path) -> Result<Ingested> {
    let qs = read_tsv(queries)?;
    let cs = read_tsv(candidates)?;
    let rels = read_tsv(qrels)?;
    check_unique(&qs, "query")?;
    check_unique(&cs, "candidate")?;
    let qset: HashSet<&str> = qs.iter().map(|(id, _)| id.as_str()).collect();
    let cset: HashSet<&str> = cs.iter().map(|(id, _)| id.as_str()).collect();
    let mut positive: HashMap<&str, &str> = HashMap::new();
    for (q, c) in &rels {
        let c = c.trim();
        if !qset.contains(q.as_str()) {
            return Err(Error::Data(format!(
                "relevance pair references unknown query {q:?}"
            )));
        }
        if !cset.contains(c) {
            return Err(Error::Data(format!(
                "relevance pair references unknown candidate {c:?}"
            )));
        }
        positive.entry(q.as_str()).or_insert(c);
    }
    let kept: Vec<&(String, String)> = qs
        .iter()
        .filter(|(id, _)| positive.contains_key(id.as_str()))
        .collect();
    if kept.len() < qs.len() {
        log::warn!(
            "{} queries have no relevance pair and were skipped",
            qs.len() - kept.len()
        );
    }
    let mut all_pos: Vec<&str> = kept.iter().map(|(id, _)| positive[id.as_str()]).collect();
    all_pos.sort_unstable();
    all_pos.dedup();
    let records = kept
        .iter()
        .map(|(id, text)| {
            let pos = positive[id.as_str()];
            DatasetRecord {
                query_id: id.clone(),
                text: Some(text.clone()),
                features: None,
                positive_id: CandidateRef::Name(pos.to_string()),
                negative_ids: Some(
                    all_pos
                        .iter()
                        .filter(|&&c| c != pos)
                        .map(|c| CandidateRef::Name(c.to_string()))
                        .collect(),
                ),
                pool_ids: None,
            }
        })
        .collect();
    Ok(Ingested {
        records,
        candidate_ids: cs.iter().map(|(id, _)| id.clone()).collect(),
        candidate_texts: cs.into_iter().map(|(_, t)| t).collect(),
    })
}

/// Disjoint train / validation / test index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 8:1:1 split of `n` items. Sizes are `round(0.8 n)`, `round(0.1 n)`
/// and the remainder; each part is sorted.
pub fn split_8_1_1(n: usize, seed: u64) -> Splits {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::derived_rng(seed, "split", &[]));
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
    let part = |r: std::ops::Range<usize>| {
        let mut v = idx[r].to_vec();
        v.sort_unstable();
        v
    };
    Splits {
        train: part(0..n_train),
        val: part(n_train..n_train + n_val),
        test: part(n_train + n_val..n),
    }
}
