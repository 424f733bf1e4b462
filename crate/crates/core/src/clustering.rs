//! Mini-batch K-means with k-means++ seeding, plus a full-batch Lloyd
//! reference used as a test oracle.
//!
//! Assignment distances may be computed on a leading prefix of each row
//! (`assignment_dim`), while the final centroids are always exact means of
//! the assigned rows in the full dimension.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::store::{read_store, write_store, EmbeddingMatrix, Rows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub batch_size: usize,
    /// Prefix dimension used for assignments; `None` means the full dimension.
    pub assignment_dim: Option<usize>,
    pub seed: u64,
    /// Relative WCSS improvement below which iteration stops.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 8,
            max_iters: 100,
            batch_size: 1024,
            assignment_dim: None,
            seed: 0,
            tol: 1e-4,
        }
    }
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidArgument("tol must be >= 0".into()));
        }
        if self.assignment_dim == Some(0) {
            return Err(Error::InvalidArgument(
                "assignment_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// K centroids in the full dimension with per-row assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<u32>,
    pub sizes: Vec<usize>,
}

impl CentroidSet {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }
}

fn sq_dist(x: &[f32], c: &[f64]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(&a, &b)| {
            let d = a as f64 - b;
            d * d
        })
        .sum()
}

/// Nearest center by squared distance; ties go to the lowest index.
fn nearest(x: &[f32], centers: &[f64], dim: usize) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (j, c) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j as u32, d);
        }
    }
    best
}

fn assign_all<R: Rows>(data: &R, centers: &[f64]) -> Vec<(u32, f64)> {
    let dim = data.dim();
    (0..data.len())
        .into_par_iter()
        .map(|i| nearest(data.row(i), centers, dim))
        .collect()
}

/// k-means++ seeding. Returns `k x data.dim()` centers.
fn kmeans_pp<R: Rows>(data: &R, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len();
    let dim = data.dim();
    let mut centers = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centers.extend(data.row(first).iter().map(|&v| v as f64));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row(i), &centers[0..dim]))
        .collect();

    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            // Rounding can leave target marginally past the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // All remaining points coincide with a center; take any unused row.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let start = centers.len();
        centers.extend(data.row(pick).iter().map(|&v| v as f64));
        let c = &centers[start..];
        for (i, w) in d2.iter_mut().enumerate() {
            let d = sq_dist(data.row(i), c);
            if d < *w {
                *w = d;
            }
        }
    }
    centers
}

fn sizes_of(assignments: &[u32], k: usize) -> Vec<usize> {
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a as usize] += 1;
    }
    sizes
}

/// Re-seed every empty cluster with the row farthest from its own center,
/// taken from a cluster that can spare it.
fn repair_empty<R: Rows>(data: &R, centers: &mut [f64], assign: &mut [(u32, f64)], k: usize) {
    let dim = data.dim();
    let mut sizes = vec![0usize; k];
    for a in assign.iter() {
        sizes[a.0 as usize] += 1;
    }
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, a) in assign.iter().enumerate() {
            if sizes[a.0 as usize] < 2 {
                continue;
            }
            if best.is_none_or(|(_, d)| a.1 > d) {
                best = Some((i, a.1));
            }
        }
        let Some((i, _)) = best else { break };
        sizes[assign[i].0 as usize] -= 1;
        sizes[j] += 1;
        assign[i] = (j as u32, 0.0);
        for (c, &x) in centers[j * dim..(j + 1) * dim].iter_mut().zip(data.row(i)) {
            *c = x as f64;
        }
    }
}

/// Exact full-dimension means, summed in ascending row order.
fn full_means(data: &EmbeddingMatrix, assignments: &[u32], k: usize) -> (Vec<f64>, Vec<usize>) {
    let dim = data.dim();
    let mut sums = vec![0.0f64; k * dim];
    let mut sizes = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        let a = a as usize;
        sizes[a] += 1;
        for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(data.row(i)) {
            *s += x as f64;
        }
    }
    for (j, &n) in sizes.iter().enumerate() {
        if n > 0 {
            for s in &mut sums[j * dim..(j + 1) * dim] {
                *s /= n as f64;
            }
        }
    }
    (sums, sizes)
}

fn check_inputs(count: usize, k: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "cannot cluster an empty matrix".into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if k > count {
        return Err(Error::KExceedsCount { k, count });
    }
    Ok(())
}

/// Mini-batch K-means.
///
/// Deterministic for a given `(data, cfg)`. Each iteration samples a batch,
/// assigns it, and moves every assigned center toward its points with a
/// per-center rate `1/n_j`. After the last iteration one full pass assigns
/// every row and recomputes exact full-dimension means.
pub fn kmeans_fit(data: &EmbeddingMatrix, cfg: &KMeansConfig) -> Result<CentroidSet> {
    cfg.validate()?;
    check_inputs(data.count(), cfg.k)?;
    let adim = cfg.assignment_dim.unwrap_or(data.dim());
    let view = data.truncate_view(adim)?;
    let n = data.count();
    let k = cfg.k;
    let mut rng = seed::rng(cfg.seed);

    let mut centers = kmeans_pp(&view, k, &mut rng);
    let mut counts = vec![0u64; k];
    let full_batch = cfg.batch_size >= n;
    let eval_every = n.div_ceil(cfg.batch_size).max(1);
    let mut prev_wcss: Option<f64> = None;

    for it in 0..cfg.max_iters {
        let batch: Vec<usize> = if full_batch {
            (0..n).collect()
        } else {
            let mut b = index::sample(&mut rng, n, cfg.batch_size).into_vec();
            b.sort_unstable();
            b
        };
        let nearest_idx: Vec<u32> = batch
            .par_iter()
            .map(|&i| nearest(view.row(i), &centers, adim).0)
            .collect();
        for (&i, &j) in batch.iter().zip(&nearest_idx) {
            let j = j as usize;
            counts[j] += 1;
            let eta = 1.0 / counts[j] as f64;
            for (c, &x) in centers[j * adim..(j + 1) * adim]
                .iter_mut()
                .zip(view.row(i))
            {
                *c += eta * (x as f64 - *c);
            }
        }

        if (it + 1) % eval_every == 0 {
            let w: f64 = assign_all(&view, &centers).iter().map(|a| a.1).sum();
            if let Some(p) = prev_wcss {
                if p <= 0.0 || (p - w) / p < cfg.tol {
                    break;
                }
            }
            prev_wcss = Some(w);
        }
    }

    let mut assign = assign_all(&view, &centers);
    repair_empty(&view, &mut centers, &mut assign, k);
    let assignments: Vec<u32> = assign.iter().map(|a| a.0).collect();
    let (centroids, sizes) = full_means(data, &assignments, k);
    Ok(CentroidSet {
        k,
        dim: data.dim(),
        centroids,
        assignments,
        sizes,
    })
}

/// Result of a full-batch Lloyd run.
#[derive(Debug, Clone)]
pub struct LloydRun {
    pub set: CentroidSet,
    /// WCSS after each assign + update iteration.
    pub wcss_history: Vec<f64>,
    /// True when the run stopped at a fixed point (no assignment changed).
    pub converged: bool,
}

/// Classic Lloyd iterations over all rows in the full dimension.
pub fn lloyd_full(
    data: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<LloydRun> {
    check_inputs(data.count(), k)?;
    let dim = data.dim();
    let mut rng = seed::rng(seed);
    let mut centers = kmeans_pp(data, k, &mut rng);
    let mut prev: Option<Vec<u32>> = None;
    let mut history = Vec::new();
    let mut converged = false;

    for _ in 0..max_iters.max(1) {
        let mut assign = assign_all(data, &centers);
        let ids: Vec<u32> = assign.iter().map(|a| a.0).collect();
        if prev.as_ref() == Some(&ids) {
            converged = true;
            break;
        }
        repair_empty(data, &mut centers, &mut assign, k);
        let ids: Vec<u32> = assign.iter().map(|a| a.0).collect();
        let (means, sizes) = full_means(data, &ids, k);
        for j in 0..k {
            if sizes[j] > 0 {
                centers[j * dim..(j + 1) * dim].copy_from_slice(&means[j * dim..(j + 1) * dim]);
            }
        }
        history.push(wcss(data, &centers, &ids)?);
        prev = Some(ids);
    }

    let assignments = prev.unwrap_or_default();
    let sizes = sizes_of(&assignments, k);
    Ok(LloydRun {
        set: CentroidSet {
            k,
            dim,
            centroids: centers,
            assignments,
            sizes,
        },
        wcss_history: history,
        converged,
    })
}

/// Within-cluster sum of squares over whatever dimension `data` exposes.
pub fn wcss<R: Rows>(data: &R, centroids: &[f64], assignments: &[u32]) -> Result<f64> {
    let dim = data.dim();
    if assignments.len() != data.len() {
        return Err(Error::DimMismatch {
            expected: data.len(),
            actual: assignments.len(),
        });
    }
    if !centroids.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument(format!(
            "centroid buffer length {} is not a multiple of dim {dim}",
            centroids.len()
        )));
    }
    let k = centroids.len() / dim;
    let mut total = 0.0;
    for (i, &a) in assignments.iter().enumerate() {
        let a = a as usize;
        if a >= k {
            return Err(Error::InvalidArgument(format!("assignment {a} >= k {k}")));
        }
        total += sq_dist(data.row(i), &centroids[a * dim..(a + 1) * dim]);
    }
    Ok(total)
}

/// Path of the assignments sidecar for a centroid store.
pub fn assign_path(store: &Path) -> PathBuf {
    let mut s = store.as_os_str().to_owned();
    s.push(".assign");
    PathBuf::from(s)
}

/// Centroids as an f32 store file, assignments as `u32` LE in `<store>.assign`.
pub fn write_centroids(set: &CentroidSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let data: Vec<f32> = set.centroids.iter().map(|&v| v as f32).collect();
    write_store(&EmbeddingMatrix::new(set.k, set.dim, data)?, path)?;
    let bytes: Vec<u8> = set
        .assignments
        .iter()
        .flat_map(|a| a.to_le_bytes())
        .collect();
    let ap = assign_path(path);
    std::fs::write(&ap, bytes).map_err(|e| Error::io(&ap, e))
}

pub fn read_centroids(path: impl AsRef<Path>) -> Result<CentroidSet> {
    let path = path.as_ref();
    let m = read_store(path)?;
    let ap = assign_path(path);
    let bytes = std::fs::read(&ap).map_err(|e| Error::io(&ap, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!(
            "{}: length not a multiple of 4",
            ap.display()
        )));
    }
    let assignments: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(&bad) = assignments.iter().find(|&&a| a as usize >= m.count()) {
        return Err(Error::Data(format!("assignment {bad} >= k {}", m.count())));
    }
    let k = m.count();
    Ok(CentroidSet {
        k,
        dim: m.dim(),
        centroids: m.as_slice().iter().map(|&v| v as f64).collect(),
        sizes: sizes_of(&assignments, k),
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn mat(rows: &[&[f32]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    fn check_invariants(data: &EmbeddingMatrix, set: &CentroidSet) {
        assert_eq!(set.assignments.len(), data.count());
        assert_eq!(set.sizes.iter().sum::<usize>(), data.count());
        assert!(set.assignments.iter().all(|&a| (a as usize) < set.k));
        assert_eq!(set.sizes, sizes_of(&set.assignments, set.k));
        // centroid == mean of members (brute force)
        for j in 0..set.k {
            if set.sizes[j] == 0 {
                continue;
            }
            for d in 0..data.dim() {
                let (mut s, mut n) = (0.0f64, 0usize);
                for i in 0..data.count() {
                    if set.assignments[i] as usize == j {
                        s += data.row(i)[d] as f64;
                        n += 1;
                    }
                }
                let mean = s / n as f64;
                let c = set.centroid(j)[d];
                assert!((c - mean).abs() <= 1e-6 * mean.abs().max(1.0));
            }
        }
    }

    #[test]
    fn two_separated_pairs() {
        let data = mat(&[&[0.0, 0.0], &[0.1, 0.0], &[10.0, 10.0], &[10.1, 10.0]]);
        let set = kmeans_fit(&data, &KMeansConfig::new(2)).unwrap();
        check_invariants(&data, &set);
        let mut cs: Vec<Vec<f64>> = (0..2).map(|j| set.centroid(j).to_vec()).collect();
        cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        let lo = [(0.0 + 0.1f32 as f64) / 2.0, 0.0];
        let hi = [(10.0 + 10.1f32 as f64) / 2.0, 10.0];
        for d in 0..2 {
            assert!((cs[0][d] - lo[d]).abs() < 1e-9);
            assert!((cs[1][d] - hi[d]).abs() < 1e-9);
        }
    }

    #[test]
    fn k_equals_count_gives_singletons() {
        let data = mat(&[
            &[0.0, 1.0],
            &[3.0, -1.0],
            &[2.0, 2.0],
            &[-4.0, 0.5],
            &[1.0, 1.0],
        ]);
        let set = kmeans_fit(&data, &KMeansConfig::new(5)).unwrap();
        assert!(set.sizes.iter().all(|&s| s == 1));
        let mut seen = [false; 5];
        for j in 0..5 {
            let i = (0..5)
                .find(|&i| data.row_f64(i) == set.centroid(j))
                .expect("centroid equals an input row");
            assert!(!seen[i]);
            seen[i] = true;
        }
    }

    #[test]
    fn duplicates_still_fill_every_cluster() {
        let data = mat(&[&[1.0], &[1.0], &[1.0], &[2.0]]);
        let set = kmeans_fit(&data, &KMeansConfig::new(3)).unwrap();
        check_invariants(&data, &set);
        assert!(set.sizes.iter().all(|&s| s > 0));
    }

    #[test]
    fn errors() {
        let data = mat(&[&[1.0], &[2.0]]);
        assert!(matches!(
            kmeans_fit(&data, &KMeansConfig::new(3)).unwrap_err(),
            Error::KExceedsCount { k: 3, count: 2 }
        ));
        let err = kmeans_fit(&data, &KMeansConfig::new(3)).unwrap_err();
        assert!(err.to_string().starts_with("k exceeds candidate count"));
        let empty = EmbeddingMatrix::empty(2).unwrap();
        assert!(kmeans_fit(&empty, &KMeansConfig::new(1)).is_err());
        assert!(lloyd_full(&empty, 1, 0, 10).is_err());
    }

    #[test]
    fn lloyd_single_and_pair() {
        let one = mat(&[&[3.0, -2.0]]);
        let run = lloyd_full(&one, 1, 0, 10).unwrap();
        assert_eq!(run.set.centroid(0), &[3.0, -2.0]);
        assert_eq!(*run.wcss_history.last().unwrap(), 0.0);

        let two = mat(&[&[0.0, 0.0], &[2.0, 4.0]]);
        let run = lloyd_full(&two, 1, 0, 10).unwrap();
        assert_eq!(run.set.centroid(0), &[1.0, 2.0]);
        assert!(run.converged);
    }

    #[test]
    fn wcss_basics() {
        let data = mat(&[&[1.0, 1.0], &[5.0, 5.0]]);
        assert_eq!(wcss(&data, &[1.0, 1.0, 5.0, 5.0], &[0, 1]).unwrap(), 0.0);
        let data = mat(&[&[2.0, 0.0]]);
        assert_eq!(wcss(&data, &[0.0, 0.0], &[0]).unwrap(), 4.0);
        assert!(wcss(&data, &[0.0, 0.0], &[0, 0]).is_err());
    }

    #[test]
    fn wcss_matches_independent_sum() {
        let mut rng = seed::rng(11);
        let rows: Vec<Vec<f32>> = (0..10)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let data = EmbeddingMatrix::from_rows(&rows).unwrap();
        let set = kmeans_fit(&data, &KMeansConfig::new(2)).unwrap();
        let mut oracle = 0.0f64;
        for i in 0..10 {
            let c = set.centroid(set.assignments[i] as usize);
            let mut d = 0.0;
            for t in 0..3 {
                d += (rows[i][t] as f64 - c[t]).powi(2);
            }
            oracle += d;
        }
        let got = wcss(&data, &set.centroids, &set.assignments).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn truncated_assignment_gives_full_dim_means() {
        // Clusters separated in the first coordinate only; the rest is noise.
        let mut rng = seed::rng(3);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<Vec<f32>> = (0..60)
            .map(|i| {
                let mut r: Vec<f32> = (0..6).map(|_| noise.sample(&mut rng) as f32).collect();
                r[0] = if i % 2 == 0 { 20.0 } else { -20.0 };
                r
            })
            .collect();
        let data = EmbeddingMatrix::from_rows(&rows).unwrap();
        let cfg = KMeansConfig {
            assignment_dim: Some(1),
            batch_size: 16,
            ..KMeansConfig::new(2)
        };
        let set = kmeans_fit(&data, &cfg).unwrap();
        check_invariants(&data, &set);
        assert_eq!(set.dim, 6);
        let a0 = set.assignments[0];
        for i in 0..60 {
            assert_eq!(set.assignments[i] == a0, i % 2 == 0);
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = seed::rng(5);
        let rows: Vec<Vec<f32>> = (0..200)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let data = EmbeddingMatrix::from_rows(&rows).unwrap();
        let cfg = KMeansConfig {
            batch_size: 32,
            seed: 9,
            ..KMeansConfig::new(5)
        };
        assert_eq!(
            kmeans_fit(&data, &cfg).unwrap(),
            kmeans_fit(&data, &cfg).unwrap()
        );
    }

    #[test]
    fn lloyd_fixed_point_and_monotone() {
        let mut rng = seed::rng(21);
        let rows: Vec<Vec<f32>> = (0..150)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let data = EmbeddingMatrix::from_rows(&rows).unwrap();
        let run = lloyd_full(&data, 6, 4, 500).unwrap();
        assert!(run.converged);
        for w in run.wcss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        let re: Vec<u32> = assign_all(&data, &run.set.centroids)
            .iter()
            .map(|a| a.0)
            .collect();
        assert_eq!(re, run.set.assignments);
    }

    #[test]
    fn centroid_files_round_trip() {
        let data = mat(&[&[0.0, 0.0], &[0.5, 0.0], &[10.0, 10.0]]);
        let set = kmeans_fit(&data, &KMeansConfig::new(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.lrke");
        write_centroids(&set, &p).unwrap();
        assert_eq!(std::fs::metadata(assign_path(&p)).unwrap().len(), 12);
        let back = read_centroids(&p).unwrap();
        assert_eq!(back.assignments, set.assignments);
        assert_eq!(back.sizes, set.sizes);
        for (a, b) in back.centroids.iter().zip(&set.centroids) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
