//! Candidate aggregation: random partitions of a candidate pool, K-means
//! centroid extraction, and the projector that maps concatenated centroids
//! to a conditioning vector.
//!
//! The projector is `Linear -> BatchNorm -> ReLU -> Linear`. In training
//! mode the normalization uses statistics of the current batch and updates
//! running estimates; in evaluation mode (and for single-sample batches) it
//! uses the running estimates and is a pure function.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_fit, KMeansConfig};
use crate::error::{Error, Result};
use crate::linalg::{add_assign, add_outer, affine, matvec_t, uniform};
use crate::seed;
use crate::store::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Disjoint cover of `0..universe_size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub subsets: Vec<Vec<usize>>,
    pub universe_size: usize,
}

impl Partition {
    /// Check disjointness, coverage and non-emptiness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.universe_size];
        for s in &self.subsets {
            if s.is_empty() && self.universe_size >= self.subsets.len() {
                return Err(Error::Data("empty subset in partition".into()));
            }
            for &i in s {
                if i >= self.universe_size {
                    return Err(Error::Data(format!("index {i} outside universe")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Data(format!("index {i} appears twice")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(Error::Data(format!("index {i} not covered")));
        }
        Ok(())
    }

    /// Translate subset positions into elements of `items` (`items.len()`
    /// must equal `universe_size`).
    pub fn map_onto(&self, items: &[usize]) -> Vec<Vec<usize>> {
        self.subsets
            .iter()
            .map(|s| s.iter().map(|&i| items[i]).collect())
            .collect()
    }
}

/// Shuffle `0..n` with a seeded generator and deal the indices round-robin
/// into `min(m, n)` subsets.
pub fn random_partition(n: usize, m: usize, seed: u64) -> Result<Partition> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument(format!(
            "random_partition needs n >= 1 and m >= 1 (n={n}, m={m})"
        )));
    }
    let m = m.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    let mut subsets = vec![Vec::with_capacity(n.div_ceil(m)); m];
    for (pos, i) in idx.into_iter().enumerate() {
        subsets[pos % m].push(i);
    }
    Ok(Partition {
        subsets,
        universe_size: n,
    })
}

/// Seed for clustering a subset: depends on the global seed and the set of
/// ids, never on their order.
pub fn subset_seed(global: u64, sorted_ids: &[usize]) -> u64 {
    let mut s = seed::derive(global, "aggregate", &[sorted_ids.len() as u64]);
    for &i in sorted_ids {
        s = seed::combine(s, i as u64);
    }
    s
}

fn sorted_unique(subset: &[usize], count: usize) -> Result<Vec<usize>> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot aggregate an empty subset".into(),
        ));
    }
    let mut ids = subset.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if let Some(&bad) = ids.iter().find(|&&i| i >= count) {
        return Err(Error::Data(format!(
            "candidate {bad} not in store (count {count})"
        )));
    }
    Ok(ids)
}

/// Cluster the subset and concatenate its centroids.
///
/// Centroids are ordered by descending cluster size, ties by lexicographic
/// order of their values. With fewer than `k` members the missing slots are
/// zero, so the output length is always `k * store.dim()`. Returns the vector
/// and the number of clusters actually used.
pub fn aggregate_with_k(
    subset: &[usize],
    store: &EmbeddingMatrix,
    kcfg: &KMeansConfig,
) -> Result<(Vec<f64>, usize)> {
    kcfg.validate()?;
    let ids = sorted_unique(subset, store.count())?;
    let rows = store.select(&ids)?;
    let k_eff = kcfg.k.min(ids.len());
    let cfg = KMeansConfig {
        k: k_eff,
        seed: subset_seed(kcfg.seed, &ids),
        ..kcfg.clone()
    };
    let set = kmeans_fit(&rows, &cfg)?;

    let mut order: Vec<usize> = (0..k_eff).collect();
    order.sort_by(|&a, &b| {
        set.sizes[b].cmp(&set.sizes[a]).then_with(|| {
            set.centroid(a)
                .iter()
                .zip(set.centroid(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });

    let dim = store.dim();
    let mut g = Vec::with_capacity(kcfg.k * dim);
    for j in order {
        g.extend_from_slice(set.centroid(j));
    }
    g.resize(kcfg.k * dim, 0.0);
    Ok((g, k_eff))
}

/// Concatenated, zero-padded centroid vector of a candidate subset.
pub fn aggregate(
    subset: &[usize],
    store: &EmbeddingMatrix,
    kcfg: &KMeansConfig,
) -> Result<Vec<f64>> {
    aggregate_with_k(subset, store, kcfg).map(|(g, _)| g)
}

/// Projected aggregate injected into the query encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningVector {
    pub values: Vec<f64>,
    pub source_subset: Vec<usize>,
    pub k_used: usize,
}

impl ConditioningVector {
    /// All-zero conditioning of the given width (used for ablations).
    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            source_subset: Vec::new(),
            k_used: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorParams {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    /// `hidden_dim x in_dim`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub norm_gain: Vec<f64>,
    pub norm_bias: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// `out_dim x hidden_dim`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl ProjectorParams {
    /// Uniform `±1/sqrt(fan_in)` weights and biases, unit gain, zero shift,
    /// running statistics `(0, 1)`.
    pub fn init(in_dim: usize, hidden_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = seed::derived_rng(seed, "projector-init", &[]);
        let s1 = 1.0 / (in_dim as f64).sqrt();
        let s2 = 1.0 / (hidden_dim as f64).sqrt();
        Self {
            in_dim,
            hidden_dim,
            out_dim,
            w1: uniform(&mut rng, hidden_dim * in_dim, s1),
            b1: uniform(&mut rng, hidden_dim, s1),
            norm_gain: vec![1.0; hidden_dim],
            norm_bias: vec![0.0; hidden_dim],
            running_mean: vec![0.0; hidden_dim],
            running_var: vec![1.0; hidden_dim],
            w2: uniform(&mut rng, out_dim * hidden_dim, s2),
            b2: uniform(&mut rng, out_dim, s2),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (i, h, o) = (self.in_dim, self.hidden_dim, self.out_dim);
        let shapes = [
            ("w1", self.w1.len(), h * i),
            ("b1", self.b1.len(), h),
            ("norm_gain", self.norm_gain.len(), h),
            ("norm_bias", self.norm_bias.len(), h),
            ("running_mean", self.running_mean.len(), h),
            ("running_var", self.running_var.len(), h),
            ("w2", self.w2.len(), o * h),
            ("b2", self.b2.len(), o),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Config(format!(
                    "projector {name}: length {got}, expected {want}"
                )));
            }
        }
        if self.running_var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config(
                "projector running_var must be positive".into(),
            ));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Config("projector momentum must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Forward a batch of raw centroid vectors.
    ///
    /// Batch statistics are used only in training mode with at least two
    /// samples. Running statistics are not touched here; see
    /// [`ProjectorParams::update_running`].
    pub fn forward_batch(
        &self,
        gs: &[Vec<f64>],
        mode: Mode,
    ) -> Result<(Vec<Vec<f64>>, ProjectorTape)> {
        for g in gs {
            if g.len() != self.in_dim {
                return Err(Error::DimMismatch {
                    expected: self.in_dim,
                    actual: g.len(),
                });
            }
        }
        let b = gs.len();
        let h = self.hidden_dim;
        let pre: Vec<Vec<f64>> = gs.iter().map(|g| affine(&self.w1, &self.b1, g)).collect();
        let batch_stats = mode == Mode::Train && b >= 2;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; h];
            for p in &pre {
                add_assign(&mut mean, p);
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            let mut var = vec![0.0; h];
            for p in &pre {
                for ((v, &x), &m) in var.iter_mut().zip(p).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= b as f64);
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let std: Vec<f64> = var.iter().map(|v| (v + self.eps).sqrt()).collect();

        let mut xhat = Vec::with_capacity(b);
        let mut act = Vec::with_capacity(b);
        let mut out = Vec::with_capacity(b);
        for p in &pre {
            let xh: Vec<f64> = p
                .iter()
                .zip(&mean)
                .zip(&std)
                .map(|((x, m), s)| (x - m) / s)
                .collect();
            let a: Vec<f64> = xh
                .iter()
                .zip(&self.norm_gain)
                .zip(&self.norm_bias)
                .map(|((x, g), bb)| (g * x + bb).max(0.0))
                .collect();
            out.push(affine(&self.w2, &self.b2, &a));
            xhat.push(xh);
            act.push(a);
        }
        Ok((
            out,
            ProjectorTape {
                inputs: gs.to_vec(),
                xhat,
                act,
                std,
                batch_stats,
                mean,
                var,
            },
        ))
    }

    /// Single-sample projection (pure).
    pub fn forward(&self, g: &[f64], mode: Mode) -> Result<Vec<f64>> {
        let (mut out, _) = self.forward_batch(std::slice::from_ref(&g.to_vec()), mode)?;
        Ok(out.pop().unwrap())
    }

    /// Fold a training batch's statistics into the running estimates.
    /// No-op when the batch did not use batch statistics.
    pub fn update_running(&mut self, tape: &ProjectorTape) {
        if !tape.batch_stats {
            return;
        }
        let b = tape.inputs.len() as f64;
        let m = self.momentum;
        for j in 0..self.hidden_dim {
            let unbiased = tape.var[j] * b / (b - 1.0);
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * tape.mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * unbiased;
        }
    }

    /// Backpropagate output gradients of a batch through the projector.
    pub fn backward(&self, tape: &ProjectorTape, d_out: &[Vec<f64>]) -> ProjectorGrads {
        let h = self.hidden_dim;
        let mut g = ProjectorGrads::zeros(self);
        let b = tape.inputs.len();
        let mut d_xhat = Vec::with_capacity(b);
        for s in 0..b {
            let d = &d_out[s];
            add_assign(&mut g.b2, d);
            add_outer(&mut g.w2, d, &tape.act[s]);
            let d_act = matvec_t(&self.w2, h, d);
            let mut dx = vec![0.0; h];
            for j in 0..h {
                if tape.act[s][j] <= 0.0 {
                    continue;
                }
                let dy = d_act[j];
                g.norm_gain[j] += dy * tape.xhat[s][j];
                g.norm_bias[j] += dy;
                dx[j] = dy * self.norm_gain[j];
            }
            d_xhat.push(dx);
        }

        let d_pre: Vec<Vec<f64>> = if tape.batch_stats {
            let bf = b as f64;
            let mut sum_d = vec![0.0; h];
            let mut sum_dx = vec![0.0; h];
            for s in 0..b {
                for j in 0..h {
                    sum_d[j] += d_xhat[s][j];
                    sum_dx[j] += d_xhat[s][j] * tape.xhat[s][j];
                }
            }
            (0..b)
                .map(|s| {
                    (0..h)
                        .map(|j| {
                            (bf * d_xhat[s][j] - sum_d[j] - tape.xhat[s][j] * sum_dx[j])
                                / (bf * tape.std[j])
                        })
                        .collect()
                })
                .collect()
        } else {
            d_xhat
                .iter()
                .map(|dx| dx.iter().zip(&tape.std).map(|(d, s)| d / s).collect())
                .collect()
        };

        for s in 0..b {
            add_assign(&mut g.b1, &d_pre[s]);
            add_outer(&mut g.w1, &d_pre[s], &tape.inputs[s]);
        }
        g
    }
}

/// Intermediate values of a projector forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ProjectorTape {
    inputs: Vec<Vec<f64>>,
    xhat: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    std: Vec<f64>,
    batch_stats: bool,
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch, or the running variance.
    pub var: Vec<f64>,
}

impl ProjectorTape {
    pub fn used_batch_stats(&self) -> bool {
        self.batch_stats
    }
}

/// Gradients for the trainable projector tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub norm_gain: Vec<f64>,
    pub norm_bias: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ProjectorGrads {
    pub fn zeros(p: &ProjectorParams) -> Self {
        Self {
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; p.b1.len()],
            norm_gain: vec![0.0; p.norm_gain.len()],
            norm_bias: vec![0.0; p.norm_bias.len()],
            w2: vec![0.0; p.w2.len()],
            b2: vec![0.0; p.b2.len()],
        }
    }
}

/// Project a raw centroid vector.
pub fn project(g: &[f64], params: &ProjectorParams, mode: Mode) -> Result<ConditioningVector> {
    let values = params.forward(g, mode)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("projector produced a non-finite value".into()));
    }
    Ok(ConditioningVector {
        values,
        source_subset: Vec::new(),
        k_used: 0,
    })
}

/// `project(aggregate(subset))`, recording the subset and clusters used.
pub fn build_conditioning(
    subset: &[usize],
    store: &EmbeddingMatrix,
    kcfg: &KMeansConfig,
    params: &ProjectorParams,
    mode: Mode,
) -> Result<ConditioningVector> {
    let (g, k_used) = aggregate_with_k(subset, store, kcfg)?;
    let mut cond = project(&g, params, mode)?;
    let mut src = subset.to_vec();
    src.sort_unstable();
    src.dedup();
    cond.source_subset = src;
    cond.k_used = k_used;
    Ok(cond)
}

/// Evaluation-mode aggregation pipeline bound to one store and projector.
#[derive(Debug, Clone)]
pub struct Aggregator<'a> {
    pub store: &'a EmbeddingMatrix,
    pub kmeans: KMeansConfig,
    pub projector: &'a ProjectorParams,
}

impl Aggregator<'_> {
    pub fn condition(&self, subset: &[usize]) -> Result<ConditioningVector> {
        build_conditioning(subset, self.store, &self.kmeans, self.projector, Mode::Eval)
    }

    pub fn out_dim(&self) -> usize {
        self.projector.out_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::identity;
    use rand::Rng;
    use std::collections::HashSet;

    #[test]
    fn partition_of_four_into_two() {
        let p = random_partition(4, 2, 1).unwrap();
        p.validate().unwrap();
        assert_eq!(p.subsets.len(), 2);
        assert!(p.subsets.iter().all(|s| s.len() == 2));
    }

    #[test]
    fn partition_clamps_m() {
        let p = random_partition(3, 5, 1).unwrap();
        p.validate().unwrap();
        assert_eq!(p.subsets.len(), 3);
        assert!(p.subsets.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn partition_varies_with_seed() {
        let distinct: HashSet<Vec<Vec<usize>>> = (0..100)
            .map(|s| random_partition(10, 3, s).unwrap().subsets)
            .collect();
        assert!(distinct.len() >= 95, "{}", distinct.len());
    }

    #[test]
    fn partition_rejects_zero() {
        assert!(random_partition(0, 2, 0).is_err());
        assert!(random_partition(2, 0, 0).is_err());
    }

    #[test]
    fn partition_validate_catches_overlap() {
        let p = Partition {
            subsets: vec![vec![0, 1], vec![1, 2]],
            universe_size: 3,
        };
        assert!(p.validate().is_err());
        let p = Partition {
            subsets: vec![vec![0], vec![2]],
            universe_size: 3,
        };
        assert!(p.validate().is_err());
    }

    fn store(rows: &[Vec<f32>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn aggregate_single_candidate() {
        let s = store(&[vec![0.5, -1.0, 2.0], vec![9.0, 9.0, 9.0]]);
        let g = aggregate(&[0], &s, &KMeansConfig::new(1)).unwrap();
        assert_eq!(g, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn aggregate_antipodal_is_zero() {
        let s = store(&[vec![0.6, 0.8], vec![-0.6, -0.8]]);
        let g = aggregate(&[0, 1], &s, &KMeansConfig::new(1)).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn aggregate_pads_small_subsets() {
        let s = store(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let (g, k) = aggregate_with_k(&[2], &s, &KMeansConfig::new(3)).unwrap();
        assert_eq!(k, 1);
        assert_eq!(g, vec![5.0, 6.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(aggregate(&[], &s, &KMeansConfig::new(1)).is_err());
        assert!(aggregate(&[7], &s, &KMeansConfig::new(1)).is_err());
    }

    #[test]
    fn aggregate_planted_clusters_in_order() {
        // 5 points near (1,1), 3 near (-1,-1): larger cluster first.
        let rows = vec![
            vec![1.0f32, 1.1],
            vec![0.9, 1.0],
            vec![1.1, 0.9],
            vec![1.0, 1.0],
            vec![1.05, 0.95],
            vec![-1.0, -1.0],
            vec![-1.1, -0.9],
            vec![-0.9, -1.1],
        ];
        let s = store(&rows);
        let g = aggregate(&(0..8).collect::<Vec<_>>(), &s, &KMeansConfig::new(2)).unwrap();
        let mean = |range: std::ops::Range<usize>| -> Vec<f64> {
            let n = range.len() as f64;
            (0..2)
                .map(|d| range.clone().map(|i| rows[i][d] as f64).sum::<f64>() / n)
                .collect()
        };
        let expect: Vec<f64> = [mean(0..5), mean(5..8)].concat();
        for (a, b) in g.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_sizes_order_lexicographically() {
        let s = store(&[vec![5.0, 0.0], vec![-5.0, 0.0]]);
        let g = aggregate(&[0, 1], &s, &KMeansConfig::new(2)).unwrap();
        assert_eq!(g, vec![-5.0, 0.0, 5.0, 0.0]);
    }

    fn identity_projector(d: usize) -> ProjectorParams {
        ProjectorParams {
            in_dim: d,
            hidden_dim: d,
            out_dim: d,
            w1: identity(d),
            b1: vec![0.0; d],
            norm_gain: vec![1.0; d],
            norm_bias: vec![0.0; d],
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
            w2: identity(d),
            b2: vec![0.0; d],
            momentum: 0.1,
            eps: 0.0,
        }
    }

    #[test]
    fn identity_pipeline_applies_relu() {
        let p = identity_projector(2);
        assert_eq!(
            project(&[1.0, -2.0], &p, Mode::Eval).unwrap().values,
            vec![1.0, 0.0]
        );
        assert_eq!(
            project(&[0.0, 0.0], &p, Mode::Eval).unwrap().values,
            vec![0.0, 0.0]
        );
        // with the default eps the result is within eps of the exact value
        let p = ProjectorParams { eps: 1e-5, ..p };
        let v = project(&[1.0, -2.0], &p, Mode::Eval).unwrap().values;
        assert!((v[0] - 1.0).abs() < 1e-5 && v[1] == 0.0);
    }

    #[test]
    fn eval_projection_matches_straight_line_formula() {
        let mut p = ProjectorParams::init(6, 4, 3, 17);
        let mut rng = seed::rng(2);
        p.running_mean = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        p.running_var = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
        p.norm_gain = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
        p.norm_bias = (0..4).map(|_| rng.random_range(-0.2..0.2)).collect();
        let g: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = project(&g, &p, Mode::Eval).unwrap().values;

        let mut a = [0.0f64; 4];
        for j in 0..4 {
            let mut h = p.b1[j];
            for i in 0..6 {
                h += p.w1[j * 6 + i] * g[i];
            }
            let n = (h - p.running_mean[j]) / (p.running_var[j] + p.eps).sqrt();
            a[j] = (p.norm_gain[j] * n + p.norm_bias[j]).max(0.0);
        }
        for o in 0..3 {
            let mut y = p.b2[o];
            for j in 0..4 {
                y += p.w2[o * 4 + j] * a[j];
            }
            assert!((got[o] - y).abs() < 1e-12);
        }
        assert!(project(&[0.0; 5], &p, Mode::Eval).is_err());
    }

    #[test]
    fn single_sample_train_uses_running_stats() {
        let p = ProjectorParams::init(4, 3, 2, 1);
        let g = vec![0.3, -0.1, 0.7, 0.2];
        assert_eq!(
            p.forward(&g, Mode::Train).unwrap(),
            p.forward(&g, Mode::Eval).unwrap()
        );
        let (_, tape) = p.forward_batch(&[g], Mode::Train).unwrap();
        assert!(!tape.used_batch_stats());
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let mut p = identity_projector(1);
        let (_, tape) = p
            .forward_batch(&[vec![1.0], vec![3.0]], Mode::Train)
            .unwrap();
        assert!(tape.used_batch_stats());
        p.update_running(&tape);
        // batch mean 2, unbiased var 2
        assert!((p.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((p.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn build_conditioning_composes() {
        let s = store(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.5, 0.5],
            vec![-1.0, 0.2],
        ]);
        let k = KMeansConfig::new(2);
        let p = ProjectorParams::init(4, 3, 3, 5);
        let c = build_conditioning(&[3, 0, 2], &s, &k, &p, Mode::Eval).unwrap();
        let direct = project(&aggregate(&[3, 0, 2], &s, &k).unwrap(), &p, Mode::Eval).unwrap();
        assert_eq!(c.values, direct.values);
        assert_eq!(c.source_subset, vec![0, 2, 3]);
        assert_eq!(c.k_used, 2);
        let again = build_conditioning(&[3, 0, 2], &s, &k, &p, Mode::Eval).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn conditioning_is_permutation_invariant() {
        let mut rng = seed::rng(8);
        let rows: Vec<Vec<f32>> = (0..40)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let s = store(&rows);
        let k = KMeansConfig {
            batch_size: 4,
            ..KMeansConfig::new(3)
        };
        let p = ProjectorParams::init(9, 5, 4, 2);
        let mut subset: Vec<usize> = (0..40).step_by(2).collect();
        let a = build_conditioning(&subset, &s, &k, &p, Mode::Eval).unwrap();
        for _ in 0..5 {
            subset.shuffle(&mut rng);
            let b = build_conditioning(&subset, &s, &k, &p, Mode::Eval).unwrap();
            assert_eq!(a.values, b.values);
        }
    }
}
