//! Dense f64 helpers shared by the projector, encoder and trainer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `y = W x + b` for a row-major `rows x cols` matrix.
pub fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    w.chunks_exact(cols)
        .zip(b)
        .map(|(row, &bi)| bi + dot(row, x))
        .collect()
}

/// `Wᵀ d` for a row-major `rows x cols` matrix and `d` of length `rows`.
pub fn matvec_t(w: &[f64], cols: usize, d: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (row, &di) in w.chunks_exact(cols).zip(d) {
        if di == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += di * wij;
        }
    }
    out
}

/// `G += d xᵀ`.
pub fn add_outer(g: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    for (row, &di) in g.chunks_exact_mut(cols).zip(d) {
        if di == 0.0 {
            continue;
        }
        for (gij, &xj) in row.iter_mut().zip(x) {
            *gij += di * xj;
        }
    }
}

pub fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Uniform in `[-bound, bound)`.
pub fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}
