//! Exact inner-product scoring, ranking and score ensembling.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::Rows;

/// Ranked candidates for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query_id: String,
    pub ordered_ids: Vec<u64>,
    pub scores: Vec<f64>,
}

impl RankingResult {
    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: u64) -> Option<usize> {
        self.ordered_ids
            .iter()
            .position(|&x| x == id)
            .map(|p| p + 1)
    }

    /// Check ordering invariants: non-increasing scores, ascending ids on ties.
    pub fn validate(&self) -> Result<()> {
        if self.ordered_ids.len() != self.scores.len() {
            return Err(Error::Data(
                "ranking ids and scores differ in length".into(),
            ));
        }
        for i in 1..self.scores.len() {
            let (a, b) = (self.scores[i - 1], self.scores[i]);
            if b > a || (a == b && self.ordered_ids[i] <= self.ordered_ids[i - 1]) {
                return Err(Error::Data(format!("ranking out of order at position {i}")));
            }
        }
        Ok(())
    }

    /// One JSON line, keeping at most `top_k` entries.
    pub fn to_json_line(&self, top_k: Option<usize>) -> Result<String> {
        let n = top_k
            .unwrap_or(self.ordered_ids.len())
            .min(self.ordered_ids.len());
        let v = serde_json::json!({
            "query_id": self.query_id,
            "ranking": &self.ordered_ids[..n],
            "scores": &self.scores[..n],
        });
        Ok(serde_json::to_string(&v)?)
    }
}

/// Default number of entries persisted per ranking.
pub const DEFAULT_PERSIST_TOP_K: usize = 100;

/// Write rankings as JSONL.
pub fn write_rankings_jsonl<W: Write>(
    mut w: W,
    rankings: &[RankingResult],
    top_k: Option<usize>,
) -> Result<()> {
    for r in rankings {
        let line = r.to_json_line(top_k)?;
        writeln!(w, "{line}").map_err(|e| Error::io("<rankings>", e))?;
    }
    Ok(())
}

fn row_dot(q: &[f64], row: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (a, &b) in q.iter().zip(row) {
        s += a * b as f64;
    }
    s
}

/// `s_i = <h_q, c_i>` for every candidate row, accumulated in f64 in
/// ascending coordinate order.
pub fn score_all<R: Rows + ?Sized>(h_q: &[f64], candidates: &R) -> Result<Vec<f64>> {
    if h_q.len() != candidates.dim() {
        return Err(Error::DimMismatch {
            expected: candidates.dim(),
            actual: h_q.len(),
        });
    }
    Ok((0..candidates.len())
        .into_par_iter()
        .with_min_len(1024)
        .map(|i| row_dot(h_q, candidates.row(i)))
        .collect())
}

/// Scores for a subset of rows, in the order given.
pub fn score_subset<R: Rows + ?Sized>(
    h_q: &[f64],
    candidates: &R,
    ids: &[usize],
) -> Result<Vec<f64>> {
    if h_q.len() != candidates.dim() {
        return Err(Error::DimMismatch {
            expected: candidates.dim(),
            actual: h_q.len(),
        });
    }
    ids.iter()
        .map(|&i| {
            if i >= candidates.len() {
                Err(Error::Data(format!("candidate {i} not in store")))
            } else {
                Ok(row_dot(h_q, candidates.row(i)))
            }
        })
        .collect()
}

/// Order of `(score, id)` pairs: higher score first, lower id on ties.
pub fn order(scores: &[f64], ids: &[u64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    idx
}

/// Sort candidates by descending score, ascending id on ties.
pub fn rank(query_id: &str, scores: &[f64], ids: &[u64]) -> Result<RankingResult> {
    if scores.len() != ids.len() {
        return Err(Error::DimMismatch {
            expected: scores.len(),
            actual: ids.len(),
        });
    }
    let idx = order(scores, ids);
    Ok(RankingResult {
        query_id: query_id.to_string(),
        ordered_ids: idx.iter().map(|&i| ids[i]).collect(),
        scores: idx.iter().map(|&i| scores[i]).collect(),
    })
}

/// Average of the per-embedding score vectors.
///
/// Cross-checked against scoring with the mean embedding (equal by
/// bilinearity); a disagreement beyond `1e-9` is reported as an error.
pub fn ensemble_score<R: Rows + ?Sized>(
    embeddings: &[Vec<f64>],
    candidates: &R,
) -> Result<Vec<f64>> {
    let first = embeddings.first().ok_or_else(|| {
        Error::InvalidArgument("ensemble_score needs at least one embedding".into())
    })?;
    let dim = first.len();
    for e in embeddings {
        if e.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: e.len(),
            });
        }
    }
    let n = embeddings.len() as f64;
    let mut acc = vec![0.0f64; candidates.len()];
    for e in embeddings {
        for (a, s) in acc.iter_mut().zip(score_all(e, candidates)?) {
            *a += s;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);

    let mut mean = vec![0.0f64; dim];
    for e in embeddings {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let via_mean = score_all(&mean, candidates)?;
    for (i, (a, b)) in acc.iter().zip(&via_mean).enumerate() {
        if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
            return Err(Error::Data(format!(
                "ensemble cross-check failed at candidate {i}: {a} vs {b}"
            )));
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::store::EmbeddingMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(n: usize, d: usize, s: u64) -> EmbeddingMatrix {
        let mut rng = seed::rng(s);
        let data = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        EmbeddingMatrix::new(n, d, data).unwrap()
    }

    #[test]
    fn basis_query() {
        let c = EmbeddingMatrix::from_rows(&[vec![3.0f32, 0.0], vec![0.0, 5.0]]).unwrap();
        assert_eq!(score_all(&[1.0, 0.0], &c).unwrap(), vec![3.0, 0.0]);
        assert_eq!(score_all(&[0.0, 0.0], &c).unwrap(), vec![0.0, 0.0]);
        assert!(score_all(&[1.0], &c).is_err());
    }

    #[test]
    fn matches_naive_double_loop() {
        let c = random_matrix(50, 16, 1);
        let mut rng = seed::rng(2);
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = score_all(&q, &c).unwrap();
        for i in 0..50 {
            let mut s = 0.0;
            for j in 0..16 {
                s += q[j] * c.row(i)[j] as f64;
            }
            assert!((got[i] - s).abs() <= 1e-6 * s.abs().max(1e-12));
        }
    }

    #[test]
    fn rank_examples() {
        let r = rank("q", &[0.1, 0.9, 0.5], &[0, 1, 2]).unwrap();
        assert_eq!(r.ordered_ids, vec![1, 2, 0]);
        let r = rank("q", &[1.0, 1.0, 1.0], &[2, 0, 1]).unwrap();
        assert_eq!(r.ordered_ids, vec![0, 1, 2]);
        r.validate().unwrap();
        assert!(rank("q", &[1.0], &[1, 2]).is_err());
    }

    #[test]
    fn rank_matches_repeated_max_extraction() {
        let mut rng = seed::rng(3);
        for _ in 0..20 {
            // coarse scores to force ties
            let scores: Vec<f64> = (0..6).map(|_| rng.random_range(0..3) as f64).collect();
            let ids: Vec<u64> = vec![5, 3, 0, 4, 1, 2];
            let r = rank("q", &scores, &ids).unwrap();
            let mut left: Vec<usize> = (0..6).collect();
            let mut oracle = vec![];
            while !left.is_empty() {
                let mut best = 0;
                for p in 1..left.len() {
                    let (a, b) = (left[p], left[best]);
                    if scores[a] > scores[b] || (scores[a] == scores[b] && ids[a] < ids[b]) {
                        best = p;
                    }
                }
                oracle.push(ids[left.remove(best)]);
            }
            assert_eq!(r.ordered_ids, oracle);
        }
    }

    #[test]
    fn ensemble_examples() {
        let c = random_matrix(7, 3, 4);
        let e = vec![0.2, -0.4, 0.9];
        assert_eq!(
            ensemble_score(std::slice::from_ref(&e), &c).unwrap(),
            score_all(&e, &c).unwrap()
        );

        let one = EmbeddingMatrix::from_rows(&[vec![1.0f32]]).unwrap();
        let s = ensemble_score(&[vec![0.2], vec![0.4]], &one).unwrap();
        assert!((s[0] - 0.3).abs() < 1e-15);
        assert!(ensemble_score::<EmbeddingMatrix>(&[], &one).is_err());
        assert!(ensemble_score(&[vec![0.2], vec![0.4, 1.0]], &one).is_err());
    }

    #[test]
    fn ensemble_matches_per_embedding_average() {
        let c = random_matrix(20, 5, 5);
        let mut rng = seed::rng(6);
        let es: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let got = ensemble_score(&es, &c).unwrap();
        for i in 0..20 {
            let mut s = 0.0;
            for e in &es {
                let mut d = 0.0;
                for j in 0..5 {
                    d += e[j] * c.row(i)[j] as f64;
                }
                s += d;
            }
            assert!((got[i] - s / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn json_line_truncates() {
        let r = rank("q7", &[0.5, 0.1, 0.9], &[0, 1, 2]).unwrap();
        let line = r.to_json_line(Some(2)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["query_id"], "q7");
        assert_eq!(v["ranking"], serde_json::json!([2, 0]));
        assert_eq!(v["scores"].as_array().unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn ensemble_equals_mean_embedding_scoring(s in any::<u64>(), m in 1usize..6) {
            let c = random_matrix(15, 4, s);
            let mut rng = seed::rng(s ^ 1);
            let es: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let a = ensemble_score(&es, &c).unwrap();
            let mean: Vec<f64> = (0..4).map(|j| es.iter().map(|e| e[j]).sum::<f64>() / m as f64).collect();
            let b = score_all(&mean, &c).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn rank_invariant_under_positive_scaling(
            scores in proptest::collection::vec(-100.0f64..100.0, 1..20),
            alpha in 0.001f64..1000.0,
        ) {
            let ids: Vec<u64> = (0..scores.len() as u64).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| s * alpha).collect();
            // scaling can create ties through rounding only for nearly-equal scores
            let distinct = {
                let mut v = scores.clone();
                v.sort_by(f64::total_cmp);
                v.windows(2).all(|w| (w[1] - w[0]).abs() > 1e-9)
            };
            prop_assume!(distinct);
            prop_assert_eq!(
                rank("q", &scores, &ids).unwrap().ordered_ids,
                rank("q", &scaled, &ids).unwrap().ordered_ids
            );
        }
    }
}
