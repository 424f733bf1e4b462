//! Graph-based test-time scaling.
//!
//! Starting from the query embedding conditioned on the full pool, each round
//! partitions the surviving pool, keeps the top of every subset under the
//! current embedding, re-encodes the query once per subset with conditioning
//! built from the survivors, and averages those embeddings with the current
//! one. The final ranking averages scores from every round's embedding over
//! the original pool.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::{random_partition, subset_seed, Aggregator, ConditioningVector};
use crate::clustering::KMeansConfig;
use crate::encoder::{QueryEmbedding, QueryEncoder, QueryInput};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_metrics, ndcg_at_k, reciprocal_rank, RelevanceJudgment};
use crate::scorer::{ensemble_score, order, rank, score_subset, RankingResult};
use crate::seed;
use crate::store::Rows;

/// Builds the conditioning vector for a candidate subset.
pub trait Conditioner: Sync {
    fn condition(&self, subset: &[usize]) -> Result<ConditioningVector>;
}

impl Conditioner for Aggregator<'_> {
    fn condition(&self, subset: &[usize]) -> Result<ConditioningVector> {
        Aggregator::condition(self, subset)
    }
}

/// Zero conditioning of a fixed width that still records its subset.
#[derive(Debug, Clone, Copy)]
pub struct ZeroConditioner(pub usize);

impl Conditioner for ZeroConditioner {
    fn condition(&self, subset: &[usize]) -> Result<ConditioningVector> {
        let mut src = subset.to_vec();
        src.sort_unstable();
        src.dedup();
        Ok(ConditioningVector {
            values: vec![0.0; self.0],
            source_subset: src,
            k_used: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtsConfig {
    pub width: usize,
    pub depth: usize,
    pub retention_ratio: f64,
    pub seed: u64,
    pub kmeans: KMeansConfig,
}

impl Default for TtsConfig {
    fn default() -> Self {
        Self {
            width: 0,
            depth: 0,
            retention_ratio: 0.5,
            seed: 0,
            kmeans: KMeansConfig::default(),
        }
    }
}

impl TtsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.retention_ratio > 0.0 && self.retention_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "retention_ratio must be in (0, 1], got {}",
                self.retention_ratio
            )));
        }
        if (self.width == 0) != (self.depth == 0) {
            return Err(Error::Config(format!(
                "width and depth must be both zero or both positive (width {}, depth {})",
                self.width, self.depth
            )));
        }
        Ok(())
    }
}

/// Number of subset members kept: `ceil(ratio * len)`, at least one.
pub fn retained_count(len: usize, ratio: f64) -> usize {
    ((ratio * len as f64).ceil() as usize).clamp(1.min(len), len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsRound {
    pub round: usize,
    pub partition: Vec<Vec<usize>>,
    pub retained: Vec<Vec<usize>>,
    pub subset_embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsTrace {
    pub query_id: String,
    /// `E^(0) ..= E^(d)`.
    pub embeddings: Vec<Vec<f64>>,
    pub rounds: Vec<TtsRound>,
    /// Pool size entering each round, then the final survivor count.
    pub pool_sizes: Vec<usize>,
    pub encoder_calls: usize,
}

impl TtsTrace {
    /// Check call accounting, round averaging and pool shrinkage.
    pub fn validate(&self) -> Result<()> {
        let d = self.rounds.len();
        let bad = |m: String| Err(Error::Data(m));
        if self.embeddings.len() != d + 1 {
            return bad(format!(
                "{} embeddings for {d} rounds",
                self.embeddings.len()
            ));
        }
        let calls = 1 + self.rounds.iter().map(|r| r.partition.len()).sum::<usize>();
        if calls != self.encoder_calls {
            return bad(format!(
                "encoder_calls {} but trace implies {calls}",
                self.encoder_calls
            ));
        }
        for (t, r) in self.rounds.iter().enumerate() {
            let prev = &self.embeddings[t];
            let n = (r.subset_embeddings.len() + 1) as f64;
            for (i, &v) in self.embeddings[t + 1].iter().enumerate() {
                let mean = (prev[i] + r.subset_embeddings.iter().map(|e| e[i]).sum::<f64>()) / n;
                if (mean - v).abs() > 1e-12 * mean.abs().max(1.0) {
                    return bad(format!(
                        "round {} embedding is not the mean of its inputs",
                        r.round
                    ));
                }
            }
            for (sub, kept) in r.partition.iter().zip(&r.retained) {
                if !kept.iter().all(|c| sub.contains(c)) {
                    return bad(format!(
                        "round {} retained a candidate outside its subset",
                        r.round
                    ));
                }
            }
            let survivors: usize = r.retained.iter().map(Vec::len).sum();
            if self.pool_sizes[t + 1] != survivors || survivors > self.pool_sizes[t] {
                return bad(format!("round {} pool sizes inconsistent", r.round));
            }
        }
        Ok(())
    }
}

/// `E^(0)`: the query encoded with conditioning over the full pool.
pub fn initial_embedding<E: QueryEncoder + ?Sized, C: Conditioner + ?Sized>(
    query: &QueryInput,
    pool: &[usize],
    encoder: &E,
    conditioner: &C,
) -> Result<QueryEmbedding> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "query {}: empty candidate pool",
            query.id
        )));
    }
    let cond = conditioner.condition(pool)?;
    encoder.encode(query, &cond)
}

/// Full test-time scaling for one query. `candidates` holds candidate-side
/// embeddings indexed like the store; `pool` lists this query's rows.
pub fn tts_rank<E, C, R>(
    query: &QueryInput,
    pool: &[usize],
    candidates: &R,
    encoder: &E,
    conditioner: &C,
    cfg: &TtsConfig,
) -> Result<(RankingResult, TtsTrace)>
where
    E: QueryEncoder + ?Sized,
    C: Conditioner + ?Sized,
    R: Rows + ?Sized,
{
    let e0 = initial_embedding(query, pool, encoder, conditioner).map_err(|e| Error::InRound {
        round: 0,
        source: Box::new(e),
    })?;
    tts_rank_from(
        query,
        pool,
        e0.values,
        candidates,
        encoder,
        conditioner,
        cfg,
    )
}

/// [`tts_rank`] with `E^(0)` already computed (it does not depend on width
/// or depth, so sweeps compute it once).
pub fn tts_rank_from<E, C, R>(
    query: &QueryInput,
    pool: &[usize],
    e0: Vec<f64>,
    candidates: &R,
    encoder: &E,
    conditioner: &C,
    cfg: &TtsConfig,
) -> Result<(RankingResult, TtsTrace)>
where
    E: QueryEncoder + ?Sized,
    C: Conditioner + ?Sized,
    R: Rows + ?Sized,
{
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "query {}: empty candidate pool",
            query.id
        )));
    }
    if let Some(&bad) = pool.iter().find(|&&c| c >= candidates.len()) {
        return Err(Error::Data(format!(
            "query {}: pool id {bad} out of range",
            query.id
        )));
    }
    let mut trace = TtsTrace {
        query_id: query.id.clone(),
        embeddings: vec![e0],
        rounds: Vec::with_capacity(cfg.depth),
        pool_sizes: vec![pool.len()],
        encoder_calls: 1,
    };
    let mut current: Vec<usize> = pool.to_vec();

    for t in 1..=cfg.depth {
        let in_round = |e: Error| Error::InRound {
            round: t,
            source: Box::new(e),
        };
        let prev = trace.embeddings.last().expect("E^(0) present").clone();
        let part = random_partition(
            current.len(),
            cfg.width,
            seed::derive(cfg.seed, "tts-round", &[t as u64]),
        )
        .map_err(in_round)?;
        let subsets = part.map_onto(&current);
        let results: Vec<(Vec<usize>, Vec<f64>)> = subsets
            .par_iter()
            .map(|sub| {
                let scores = score_subset(&prev, candidates, sub)?;
                let ids: Vec<u64> = sub.iter().map(|&c| c as u64).collect();
                let keep = retained_count(sub.len(), cfg.retention_ratio);
                let kept: Vec<usize> = order(&scores, &ids)
                    .into_iter()
                    .take(keep)
                    .map(|i| sub[i])
                    .collect();
                let cond = conditioner.condition(&kept)?;
                let emb = encoder.encode(query, &cond)?;
                if emb.values.len() != prev.len() {
                    return Err(Error::DimMismatch {
                        expected: prev.len(),
                        actual: emb.values.len(),
                    });
                }
                Ok((kept, emb.values))
            })
            .collect::<Result<_>>()
            .map_err(in_round)?;

        let n = (results.len() + 1) as f64;
        let mut next = prev.clone();
        for (_, e) in &results {
            for (a, v) in next.iter_mut().zip(e) {
                *a += v;
            }
        }
        next.iter_mut().for_each(|a| *a /= n);

        let (retained, subset_embeddings): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        current = retained.concat();
        current.sort_unstable();
        trace.encoder_calls += subsets.len();
        trace.pool_sizes.push(current.len());
        trace.embeddings.push(next);
        trace.rounds.push(TtsRound {
            round: t,
            partition: subsets,
            retained,
            subset_embeddings,
        });
    }

    let view = PoolView {
        rows: candidates,
        ids: pool,
    };
    let scores = ensemble_score(&trace.embeddings, &view)?;
    let ids: Vec<u64> = pool.iter().map(|&c| c as u64).collect();
    Ok((rank(&query.id, &scores, &ids)?, trace))
}

/// Rows of `rows` restricted to `ids`, in that order.
struct PoolView<'a, R: ?Sized> {
    rows: &'a R,
    ids: &'a [usize],
}

impl<R: Rows + ?Sized> Rows for PoolView<'_, R> {
    fn len(&self) -> usize {
        self.ids.len()
    }
    fn dim(&self) -> usize {
        self.rows.dim()
    }
    fn row(&self, i: usize) -> &[f32] {
        self.rows.row(self.ids[i])
    }
}

/// One evaluation query for sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub input: QueryInput,
    pub pool: Vec<usize>,
    pub judgment: RelevanceJudgment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub width: usize,
    pub depth: usize,
    pub mrr: f64,
    pub ndcg10: f64,
    pub encoder_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub best: SweepCell,
}

impl SweepResult {
    /// CSV `width,depth,mrr,ndcg10`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("width,depth,mrr,ndcg10\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{:.10},{:.10}\n",
                c.width, c.depth, c.mrr, c.ndcg10
            ));
        }
        s
    }
}

/// Highest MRR; ties go to the smallest width, then the smallest depth.
pub fn select_best(cells: &[SweepCell]) -> Option<&SweepCell> {
    cells.iter().reduce(|best, c| {
        let better = c.mrr > best.mrr
            || (c.mrr == best.mrr && (c.width, c.depth) < (best.width, best.depth));
        if better {
            c
        } else {
            best
        }
    })
}

/// Per-query outputs of one (width, depth) setting.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub ranking: RankingResult,
    pub trace: TtsTrace,
    pub reciprocal_rank: f64,
    pub ndcg10: f64,
}

/// Run TTS for every query at one setting, reusing precomputed `E^(0)`.
pub fn evaluate_setting<E, C, R>(
    queries: &[EvalQuery],
    e0: &[Vec<f64>],
    candidates: &R,
    encoder: &E,
    conditioner: &C,
    cfg: &TtsConfig,
) -> Result<Vec<QueryOutcome>>
where
    E: QueryEncoder + ?Sized,
    C: Conditioner + ?Sized,
    R: Rows + ?Sized,
{
    queries
        .par_iter()
        .zip(e0)
        .map(|(q, e)| {
            let (ranking, trace) = tts_rank_from(
                &q.input,
                &q.pool,
                e.clone(),
                candidates,
                encoder,
                conditioner,
                cfg,
            )?;
            let rr = reciprocal_rank(&ranking.ordered_ids, &q.judgment);
            let nd = ndcg_at_k(&ranking, &q.judgment, 10);
            Ok(QueryOutcome {
                ranking,
                trace,
                reciprocal_rank: rr,
                ndcg10: nd,
            })
        })
        .collect()
}

/// `E^(0)` for every query.
pub fn initial_embeddings<E, C>(
    queries: &[EvalQuery],
    encoder: &E,
    conditioner: &C,
) -> Result<Vec<Vec<f64>>>
where
    E: QueryEncoder + ?Sized,
    C: Conditioner + ?Sized,
{
    queries
        .par_iter()
        .map(|q| initial_embedding(&q.input, &q.pool, encoder, conditioner).map(|e| e.values))
        .collect()
}

/// Evaluate every (width, depth) cell with MRR and NDCG@10. Cells where
/// exactly one of width and depth is zero are skipped.
pub fn tts_sweep<E, C, R>(
    queries: &[EvalQuery],
    candidates: &R,
    encoder: &E,
    conditioner: &C,
    widths: &[usize],
    depths: &[usize],
    base: &TtsConfig,
) -> Result<SweepResult>
where
    E: QueryEncoder + ?Sized,
    C: Conditioner + ?Sized,
    R: Rows + ?Sized,
{
    if widths.is_empty() || depths.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    if queries.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep needs at least one query".into(),
        ));
    }
    let e0 = initial_embeddings(queries, encoder, conditioner)?;
    let mut cells = Vec::new();
    for &width in widths {
        for &depth in depths {
            if (width == 0) != (depth == 0) {
                continue;
            }
            let cfg = TtsConfig {
                width,
                depth,
                ..base.clone()
            };
            let out = evaluate_setting(queries, &e0, candidates, encoder, conditioner, &cfg)?;
            let rr: Vec<f64> = out.iter().map(|o| o.reciprocal_rank).collect();
            let nd: Vec<f64> = out.iter().map(|o| o.ndcg10).collect();
            cells.push(SweepCell {
                width,
                depth,
                mrr: aggregate_metrics(&rr)?.mean,
                ndcg10: aggregate_metrics(&nd)?.mean,
                encoder_calls: out.iter().map(|o| o.trace.encoder_calls).sum(),
            });
        }
    }
    let best = select_best(&cells)
        .cloned()
        .ok_or_else(|| Error::Config("sweep grid has no valid (width, depth) cell".into()))?;
    Ok(SweepResult { cells, best })
}

/// Test double: returns a fixed true embedding plus independent Gaussian
/// noise per call. The noise stream is keyed by the conditioning subset, so
/// calls are reproducible and safe to run in parallel.
#[derive(Debug, Clone)]
pub struct NoisyMockEncoder {
    pub truth: Vec<f64>,
    pub sigma: f64,
    pub seed: u64,
}

impl QueryEncoder for NoisyMockEncoder {
    fn out_dim(&self) -> usize {
        self.truth.len()
    }

    fn encode(&self, query: &QueryInput, cond: &ConditioningVector) -> Result<QueryEmbedding> {
        use rand_distr::{Distribution, Normal};
        let key = subset_seed(seed::derive(self.seed, &query.id, &[]), &cond.source_subset);
        let mut rng = seed::rng(key);
        let normal =
            Normal::new(0.0, self.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(QueryEmbedding {
            values: self
                .truth
                .iter()
                .map(|t| t + normal.sample(&mut rng))
                .collect(),
            provenance: crate::encoder::Provenance::Mock,
            subset_tag: None,
        })
    }
}
