//! Ranking metrics: MRR and NDCG@K, plus mean / standard-error summaries.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::RankingResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceJudgment {
    pub query_id: String,
    pub positive_ids: BTreeSet<u64>,
    /// Optional graded relevance; ids without an entry use binary gain.
    pub graded: Option<BTreeMap<u64, f64>>,
}

impl RelevanceJudgment {
    pub fn single(query_id: impl Into<String>, positive: u64) -> Self {
        Self {
            query_id: query_id.into(),
            positive_ids: BTreeSet::from([positive]),
            graded: None,
        }
    }

    /// Linear gain of a candidate.
    pub fn gain(&self, id: u64) -> f64 {
        if let Some(g) = self.graded.as_ref().and_then(|m| m.get(&id)) {
            return *g;
        }
        if self.positive_ids.contains(&id) {
            1.0
        } else {
            0.0
        }
    }

    fn all_gains(&self) -> Vec<f64> {
        let mut ids: BTreeSet<u64> = self.positive_ids.clone();
        if let Some(g) = &self.graded {
            ids.extend(g.keys().copied());
        }
        ids.into_iter()
            .map(|i| self.gain(i))
            .filter(|&g| g > 0.0)
            .collect()
    }
}

/// Reciprocal rank of the first positive. Zero (with a warning) when no
/// positive appears in the ranking.
pub fn mrr(ranking: &RankingResult, judgment: &RelevanceJudgment) -> f64 {
    reciprocal_rank(&ranking.ordered_ids, judgment)
}

pub fn reciprocal_rank(ordered_ids: &[u64], judgment: &RelevanceJudgment) -> f64 {
    match ordered_ids
        .iter()
        .position(|id| judgment.positive_ids.contains(id))
    {
        Some(p) => 1.0 / (p + 1) as f64,
        None => {
            log::warn!("query {}: no positive in ranking", judgment.query_id);
            0.0
        }
    }
}

/// `DCG@K / IDCG@K` with linear gains and `log2(i + 1)` discounts.
pub fn ndcg_at_k(ranking: &RankingResult, judgment: &RelevanceJudgment, k: usize) -> f64 {
    ndcg_ids(&ranking.ordered_ids, judgment, k)
}

pub fn ndcg_ids(ordered_ids: &[u64], judgment: &RelevanceJudgment, k: usize) -> f64 {
    let dcg: f64 = ordered_ids
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &id)| judgment.gain(id) / ((i + 2) as f64).log2())
        .sum();
    let mut ideal = judgment.all_gains();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum();
    if idcg <= 0.0 {
        log::warn!(
            "query {}: no positive gains, NDCG defined as 0",
            judgment.query_id
        );
        return 0.0;
    }
    dcg / idcg
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub count: usize,
    /// Sample standard deviation over `sqrt(n)`; zero for a single value.
    pub se: f64,
}

pub fn aggregate_metrics(values: &[f64]) -> Result<MetricSummary> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no values to aggregate".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(MetricSummary { mean, count: n, se })
}

/// Harmonic number `H_n`.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum()
}

/// Expected MRR of a uniformly random ranking of `n` candidates with one positive.
pub fn random_mrr_baseline(n: usize) -> f64 {
    harmonic(n) / n as f64
}

/// CSV report `metric,mean,se,n`.
pub fn report_csv(rows: &[(&str, MetricSummary)]) -> String {
    let mut s = String::from("metric,mean,se,n\n");
    for (name, m) in rows {
        s.push_str(&format!("{name},{:.10},{:.10},{}\n", m.mean, m.se, m.count));
    }
    s
}
