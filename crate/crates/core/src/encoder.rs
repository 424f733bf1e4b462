//! Query encoders.
//!
//! The reference encoder is a small MLP over `[query features ; conditioning]`
//! with an optional linear map on the candidate side. It is pure and has
//! explicit gradients, which the trainer relies on. A remote encoder that
//! talks to an embedding service lives in [`crate::remote`]; both implement
//! [`QueryEncoder`].

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregator::ConditioningVector;
use crate::error::{Error, Result};
use crate::linalg::{add_assign, add_outer, affine, identity, matvec_t, uniform};
use crate::seed::{self, fnv1a64};
use crate::store::EmbeddingMatrix;

/// Base representation of a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFeatures(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Reference,
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEmbedding {
    pub values: Vec<f64>,
    pub provenance: Provenance,
    pub subset_tag: Option<String>,
}

/// Everything an encoder may need to know about a query.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryInput {
    pub id: String,
    pub text: Option<String>,
    pub features: Option<Vec<f64>>,
}

/// Produces a query embedding conditioned on a candidate summary.
pub trait QueryEncoder: Sync {
    fn out_dim(&self) -> usize;
    fn encode(&self, query: &QueryInput, cond: &ConditioningVector) -> Result<QueryEmbedding>;
}

/// Second-hash prefix byte for the trigram sign.
pub const SIGN_HASH_PREFIX: u8 = 0x01;

/// Hashed bag of character trigrams.
///
/// Each window of three consecutive `char`s is UTF-8 encoded and hashed with
/// FNV-1a 64 (offset `0xcbf29ce484222325`, prime `0x100000001b3`); the
/// bucket is `hash % base_dim`. The sign is `+1` when the lowest bit of
/// FNV-1a 64 over `[0x01] ++ trigram` is zero, else `-1`. Counts are
/// accumulated and the vector is L2-normalized. Texts with fewer than three
/// characters map to the zero vector.
pub fn featurize_text(text: &str, base_dim: usize) -> QueryFeatures {
    let mut v = vec![0.0f64; base_dim.max(1)];
    let chars: Vec<char> = text.chars().collect();
    let mut buf = Vec::with_capacity(13);
    for w in chars.windows(3) {
        buf.clear();
        buf.push(SIGN_HASH_PREFIX);
        let mut tmp = [0u8; 4];
        for c in w {
            buf.extend_from_slice(c.encode_utf8(&mut tmp).as_bytes());
        }
        let bucket = (fnv1a64(&buf[1..]) % v.len() as u64) as usize;
        let sign = if fnv1a64(&buf) & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    QueryFeatures(v)
}

/// Fully connected layer, `w` is `rows x cols` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn new(rows: usize, cols: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if w.len() != rows * cols || b.len() != rows {
            return Err(Error::Config(format!(
                "dense layer {rows}x{cols}: got {} weights and {} biases",
                w.len(),
                b.len()
            )));
        }
        Ok(Self { rows, cols, w, b })
    }

    fn random(rows: usize, cols: usize, scale: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let bound = scale / (cols as f64).sqrt();
        Self {
            rows,
            cols,
            w: uniform(rng, rows * cols, bound),
            b: uniform(rng, rows, bound),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        affine(&self.w, &self.b, x)
    }
}

/// Shape of a reference encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefEncoderShape {
    pub base_dim: usize,
    pub cond_dim: usize,
    pub out_dim: usize,
    /// Width of the hidden ReLU layer; `None` for a single linear layer.
    pub hidden_dim: Option<usize>,
    /// Candidate-side input dimension when a candidate map is used.
    pub candidate_dim: Option<usize>,
    /// Multiplier on the default `1/sqrt(fan_in)` init range.
    pub init_scale: f64,
}

impl Default for RefEncoderShape {
    fn default() -> Self {
        Self {
            base_dim: 32,
            cond_dim: 32,
            out_dim: 32,
            hidden_dim: Some(32),
            candidate_dim: None,
            init_scale: 1.0,
        }
    }
}

/// Parameters of the reference encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefEncoderParams {
    pub base_dim: usize,
    pub cond_dim: usize,
    pub out_dim: usize,
    pub hidden: Option<Dense>,
    /// Output layer (`Wq`, `bq`).
    pub output: Dense,
    /// Candidate map `Wc` (`out_dim x store_dim`); its bias is unused and zero.
    pub candidate: Option<Dense>,
}

impl RefEncoderParams {
    pub fn init(shape: &RefEncoderShape, seed: u64) -> Self {
        let mut rng = seed::derived_rng(seed, "encoder-init", &[]);
        let input = shape.base_dim + shape.cond_dim;
        let hidden = shape
            .hidden_dim
            .map(|h| Dense::random(h, input, shape.init_scale, &mut rng));
        let out_in = shape.hidden_dim.unwrap_or(input);
        let output = Dense::random(shape.out_dim, out_in, shape.init_scale, &mut rng);
        let candidate = shape.candidate_dim.map(|c| {
            let mut d = Dense::random(shape.out_dim, c, shape.init_scale, &mut rng);
            d.b.iter_mut().for_each(|b| *b = 0.0);
            d
        });
        Self {
            base_dim: shape.base_dim,
            cond_dim: shape.cond_dim,
            out_dim: shape.out_dim,
            hidden,
            output,
            candidate,
        }
    }

    /// Random init whose base-feature path is exactly the identity.
    ///
    /// Without a hidden layer the output layer's base block is `I`. With a
    /// hidden layer of width at least `2 * base_dim`, the first layer maps the
    /// features to `[x; -x]` and the output layer to `[I -I]`, so the ReLU
    /// pair reconstructs `x`. The remaining hidden units read only the
    /// conditioning and start with zero bias, so the identity is exact when
    /// the conditioning is zero. Other weights keep their random init.
    pub fn identity_init(shape: &RefEncoderShape, seed: u64) -> Result<Self> {
        let (b, c) = (shape.base_dim, shape.cond_dim);
        if shape.out_dim != b {
            return Err(Error::Config(format!(
                "identity init needs out_dim == base_dim ({} vs {b})",
                shape.out_dim
            )));
        }
        let mut p = Self::init(shape, seed);
        let input = b + c;
        match p.hidden.as_mut() {
            None => {
                for i in 0..b {
                    let row = &mut p.output.w[i * input..(i + 1) * input];
                    row[..b].iter_mut().for_each(|w| *w = 0.0);
                    row[i] = 1.0;
                }
                p.output.b.iter_mut().for_each(|x| *x = 0.0);
            }
            Some(h) => {
                if h.rows < 2 * b {
                    return Err(Error::Config(format!(
                        "identity init needs hidden width >= {} (got {})",
                        2 * b,
                        h.rows
                    )));
                }
                for r in 0..h.rows {
                    let row = &mut h.w[r * input..(r + 1) * input];
                    if r < 2 * b {
                        row.iter_mut().for_each(|w| *w = 0.0);
                        row[r % b] = if r < b { 1.0 } else { -1.0 };
                        h.b[r] = 0.0;
                    } else {
                        row[..b].iter_mut().for_each(|w| *w = 0.0);
                        h.b[r] = 0.0;
                    }
                }
                let hw = h.rows;
                for i in 0..b {
                    let row = &mut p.output.w[i * hw..(i + 1) * hw];
                    row[..2 * b].iter_mut().for_each(|w| *w = 0.0);
                    row[i] = 1.0;
                    row[b + i] = -1.0;
                }
                p.output.b.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Ok(p)
    }

    /// Single linear layer `[I 0]`: returns the query features unchanged.
    pub fn passthrough(base_dim: usize, cond_dim: usize) -> Self {
        let input = base_dim + cond_dim;
        let mut w = vec![0.0; base_dim * input];
        for i in 0..base_dim {
            w[i * input + i] = 1.0;
        }
        Self {
            base_dim,
            cond_dim,
            out_dim: base_dim,
            hidden: None,
            output: Dense {
                rows: base_dim,
                cols: input,
                w,
                b: vec![0.0; base_dim],
            },
            candidate: None,
        }
    }

    pub fn shape(&self) -> RefEncoderShape {
        RefEncoderShape {
            base_dim: self.base_dim,
            cond_dim: self.cond_dim,
            out_dim: self.out_dim,
            hidden_dim: self.hidden.as_ref().map(|h| h.rows),
            candidate_dim: self.candidate.as_ref().map(|c| c.cols),
            init_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let input = self.base_dim + self.cond_dim;
        let check = |d: &Dense, rows: usize, cols: usize, name: &str| -> Result<()> {
            if d.rows != rows || d.cols != cols || d.w.len() != rows * cols || d.b.len() != rows {
                return Err(Error::Config(format!(
                    "encoder {name}: expected {rows}x{cols}, found {}x{} ({} weights)",
                    d.rows,
                    d.cols,
                    d.w.len()
                )));
            }
            Ok(())
        };
        let out_in = match &self.hidden {
            Some(h) => {
                check(h, h.rows, input, "hidden")?;
                h.rows
            }
            None => input,
        };
        check(&self.output, self.out_dim, out_in, "output")?;
        if let Some(c) = &self.candidate {
            check(c, self.out_dim, c.cols, "candidate")?;
        }
        Ok(())
    }

    /// Check the candidate side against a store dimension: a candidate map
    /// is required when the dimensions differ.
    pub fn check_store_dim(&self, store_dim: usize) -> Result<()> {
        match &self.candidate {
            Some(c) if c.cols != store_dim => Err(Error::DimMismatch {
                expected: c.cols,
                actual: store_dim,
            }),
            None if store_dim != self.out_dim => Err(Error::DimMismatch {
                expected: self.out_dim,
                actual: store_dim,
            }),
            _ => Ok(()),
        }
    }

    /// Forward `x = [q ; cond]`, keeping activations for backprop.
    pub fn forward_tape(&self, x: Vec<f64>) -> (Vec<f64>, EncoderTape) {
        match &self.hidden {
            Some(h) => {
                let act: Vec<f64> = h.apply(&x).into_iter().map(|v| v.max(0.0)).collect();
                let out = self.output.apply(&act);
                (out, EncoderTape { x, act: Some(act) })
            }
            None => {
                let out = self.output.apply(&x);
                (out, EncoderTape { x, act: None })
            }
        }
    }

    /// Gradients of all encoder tensors (excluding the candidate map) and of
    /// the input vector, given `d_out`.
    pub fn backward(
        &self,
        tape: &EncoderTape,
        d_out: &[f64],
        grads: &mut EncoderGrads,
    ) -> Vec<f64> {
        add_assign(&mut grads.output_b, d_out);
        match (&self.hidden, &tape.act) {
            (Some(h), Some(act)) => {
                add_outer(&mut grads.output_w, d_out, act);
                let mut d_act = matvec_t(&self.output.w, h.rows, d_out);
                for (d, &a) in d_act.iter_mut().zip(act) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
                let gh = grads.hidden.as_mut().expect("hidden grads");
                add_assign(&mut gh.1, &d_act);
                add_outer(&mut gh.0, &d_act, &tape.x);
                matvec_t(&h.w, h.cols, &d_act)
            }
            _ => {
                add_outer(&mut grads.output_w, d_out, &tape.x);
                matvec_t(&self.output.w, self.output.cols, d_out)
            }
        }
    }

    /// `h_c = Wc e` in f64 (or `e` itself without a candidate map).
    pub fn encode_candidate_row(&self, row: &[f32]) -> Vec<f64> {
        let e: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        match &self.candidate {
            Some(c) => {
                c.w.chunks_exact(c.cols)
                    .map(|r| crate::linalg::dot(r, &e))
                    .collect()
            }
            None => e,
        }
    }

    /// SHA-256 over the candidate map, used to key cached candidate encodings.
    pub fn candidate_hash(&self) -> String {
        let mut h = Sha256::new();
        match &self.candidate {
            Some(c) => {
                h.update((c.rows as u64).to_le_bytes());
                h.update((c.cols as u64).to_le_bytes());
                for v in &c.w {
                    h.update(v.to_le_bytes());
                }
            }
            None => h.update(b"identity"),
        }
        format!("{:x}", h.finalize())
    }
}

/// Activations of one reference-encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTape {
    x: Vec<f64>,
    act: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    /// `(w, b)` of the hidden layer.
    pub hidden: Option<(Vec<f64>, Vec<f64>)>,
    pub output_w: Vec<f64>,
    pub output_b: Vec<f64>,
    pub candidate_w: Option<Vec<f64>>,
}

impl EncoderGrads {
    pub fn zeros(p: &RefEncoderParams) -> Self {
        Self {
            hidden: p
                .hidden
                .as_ref()
                .map(|h| (vec![0.0; h.w.len()], vec![0.0; h.b.len()])),
            output_w: vec![0.0; p.output.w.len()],
            output_b: vec![0.0; p.output.b.len()],
            candidate_w: p.candidate.as_ref().map(|c| vec![0.0; c.w.len()]),
        }
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("encoder produced a non-finite value".into()));
    }
    Ok(())
}

/// `h_q = MLP([q ; cond])`.
pub fn encode_query_ref(
    q: &QueryFeatures,
    cond: &ConditioningVector,
    params: &RefEncoderParams,
) -> Result<QueryEmbedding> {
    if q.0.len() != params.base_dim {
        return Err(Error::DimMismatch {
            expected: params.base_dim,
            actual: q.0.len(),
        });
    }
    if cond.values.len() != params.cond_dim {
        return Err(Error::DimMismatch {
            expected: params.cond_dim,
            actual: cond.values.len(),
        });
    }
    check_finite(&q.0)?;
    let mut x = Vec::with_capacity(params.base_dim + params.cond_dim);
    x.extend_from_slice(&q.0);
    x.extend_from_slice(&cond.values);
    let (values, _) = params.forward_tape(x);
    check_finite(&values)?;
    Ok(QueryEmbedding {
        values,
        provenance: Provenance::Reference,
        subset_tag: None,
    })
}

/// Candidate-side encodings. Borrows the store when there is no candidate map.
pub fn encode_candidates_ref<'a>(
    store: &'a EmbeddingMatrix,
    params: &RefEncoderParams,
) -> Result<Cow<'a, EmbeddingMatrix>> {
    params.check_store_dim(store.dim())?;
    match &params.candidate {
        None => Ok(Cow::Borrowed(store)),
        Some(c) => {
            let mut data = Vec::with_capacity(store.count() * c.rows);
            for row in store.rows() {
                data.extend(
                    params
                        .encode_candidate_row(row)
                        .into_iter()
                        .map(|v| v as f32),
                );
            }
            let mut m = EmbeddingMatrix::new(store.count(), c.rows, data)?;
            if let Some(ids) = store.ids() {
                m = m.with_ids(ids.to_vec())?;
            }
            Ok(Cow::Owned(m))
        }
    }
}

/// Cached candidate encodings keyed by the candidate-map hash.
#[derive(Debug, Default)]
pub struct CandidateCache {
    key: Option<String>,
    matrix: Option<EmbeddingMatrix>,
}

impl CandidateCache {
    /// Returns cached encodings, recomputing only when the candidate map changed.
    pub fn get<'a>(
        &'a mut self,
        store: &'a EmbeddingMatrix,
        params: &RefEncoderParams,
    ) -> Result<&'a EmbeddingMatrix> {
        if params.candidate.is_none() {
            params.check_store_dim(store.dim())?;
            return Ok(store);
        }
        let key = params.candidate_hash();
        if self.key.as_deref() != Some(key.as_str()) {
            self.matrix = Some(encode_candidates_ref(store, params)?.into_owned());
            self.key = Some(key);
        }
        Ok(self.matrix.as_ref().unwrap())
    }

    pub fn is_valid_for(&self, params: &RefEncoderParams) -> bool {
        self.key.as_deref() == Some(params.candidate_hash().as_str())
    }
}

/// Resolve a query's base features: explicit features, else hashed text.
pub fn query_features(query: &QueryInput, base_dim: usize) -> Result<QueryFeatures> {
    match (&query.features, &query.text) {
        (Some(f), _) => Ok(QueryFeatures(f.clone())),
        (None, Some(t)) => Ok(featurize_text(t, base_dim)),
        (None, None) => Err(Error::Data(format!(
            "query {} has neither features nor text",
            query.id
        ))),
    }
}

/// [`QueryEncoder`] backed by reference parameters.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder<'a> {
    pub params: &'a RefEncoderParams,
    /// Replace the conditioning vector by zeros (global-information ablation).
    pub zero_conditioning: bool,
}

impl<'a> ReferenceEncoder<'a> {
    pub fn new(params: &'a RefEncoderParams) -> Self {
        Self {
            params,
            zero_conditioning: false,
        }
    }
}

impl QueryEncoder for ReferenceEncoder<'_> {
    fn out_dim(&self) -> usize {
        self.params.out_dim
    }

    fn encode(&self, query: &QueryInput, cond: &ConditioningVector) -> Result<QueryEmbedding> {
        let q = query_features(query, self.params.base_dim)?;
        if self.zero_conditioning {
            encode_query_ref(
                &q,
                &ConditioningVector::zeros(self.params.cond_dim),
                self.params,
            )
        } else {
            encode_query_ref(&q, cond, self.params)
        }
    }
}

/// Identity matrix scaled by `s`, handy for building fixtures.
pub fn scaled_identity(n: usize, s: f64) -> Vec<f64> {
    identity(n).into_iter().map(|v| v * s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cond(v: Vec<f64>) -> ConditioningVector {
        ConditioningVector {
            values: v,
            source_subset: vec![],
            k_used: 0,
        }
    }

    #[test]
    fn featurize_empty_and_short() {
        assert_eq!(featurize_text("", 8).0, vec![0.0; 8]);
        assert_eq!(featurize_text("ab", 8).0, vec![0.0; 8]);
    }

    #[test]
    fn featurize_is_deterministic() {
        assert_eq!(
            featurize_text("hello world", 16),
            featurize_text("hello world", 16)
        );
    }

    /// Byte-at-a-time FNV-1a written out independently of `seed::fnv1a64`.
    fn fnv_oracle(bytes: &[u8]) -> u64 {
        let mut h: u64 = 14695981039346656037;
        for b in bytes {
            h = (h ^ u64::from(*b)).wrapping_mul(1099511628211);
        }
        h
    }

    #[test]
    fn featurize_single_trigram() {
        let bucket = (fnv_oracle(b"abc") % 8) as usize;
        let sign = if fnv_oracle(b"\x01abc") & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        let mut expect = vec![0.0; 8];
        expect[bucket] = sign;
        assert_eq!(featurize_text("abc", 8).0, expect);
    }

    #[test]
    fn featurize_is_unit_norm() {
        let v = featurize_text("the quick brown fox jumps", 32).0;
        let n: f64 = v.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_inputs_give_zero_embedding() {
        let mut p = RefEncoderParams::init(
            &RefEncoderShape {
                base_dim: 3,
                cond_dim: 2,
                out_dim: 4,
                hidden_dim: None,
                ..Default::default()
            },
            1,
        );
        p.output.b.iter_mut().for_each(|b| *b = 0.0);
        let h = encode_query_ref(&QueryFeatures(vec![0.0; 3]), &cond(vec![0.0; 2]), &p).unwrap();
        assert_eq!(h.values, vec![0.0; 4]);
    }

    #[test]
    fn passthrough_is_identity() {
        let p = RefEncoderParams::passthrough(3, 0);
        let q = QueryFeatures(vec![0.1, -2.0, 3.5]);
        let h = encode_query_ref(&q, &cond(vec![]), &p).unwrap();
        assert_eq!(h.values, q.0);
    }

    #[test]
    fn conditioning_is_live() {
        let p = RefEncoderParams::init(
            &RefEncoderShape {
                base_dim: 4,
                cond_dim: 3,
                out_dim: 4,
                hidden_dim: Some(6),
                ..Default::default()
            },
            3,
        );
        let q = QueryFeatures(vec![0.3, -0.2, 0.5, 0.1]);
        let a = encode_query_ref(&q, &cond(vec![0.1, 0.2, 0.3]), &p).unwrap();
        let b = encode_query_ref(&q, &cond(vec![0.1, 0.2 + 0.5, 0.3]), &p).unwrap();
        let delta: f64 = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        assert!(delta > 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let p = RefEncoderParams::passthrough(3, 2);
        assert!(encode_query_ref(&QueryFeatures(vec![0.0; 2]), &cond(vec![0.0; 2]), &p).is_err());
        assert!(encode_query_ref(&QueryFeatures(vec![0.0; 3]), &cond(vec![0.0; 1]), &p).is_err());
    }

    #[test]
    fn candidate_identity_and_doubling() {
        let store = EmbeddingMatrix::from_rows(&[vec![1.0f32, 2.0], vec![-3.0, 0.5]]).unwrap();
        let p = RefEncoderParams::passthrough(2, 0);
        let out = encode_candidates_ref(&store, &p).unwrap();
        assert!(matches!(out, Cow::Borrowed(_)));
        assert_eq!(*out, store);

        let mut p2 = p.clone();
        p2.candidate = Some(Dense::new(2, 2, scaled_identity(2, 2.0), vec![0.0; 2]).unwrap());
        let out = encode_candidates_ref(&store, &p2).unwrap();
        assert_eq!(out.row(0), &[2.0, 4.0]);
        assert_eq!(out.row(1), &[-6.0, 1.0]);
    }

    #[test]
    fn candidate_map_matches_matvec() {
        let mut rng = seed::rng(4);
        let rows: Vec<Vec<f32>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let store = EmbeddingMatrix::from_rows(&rows).unwrap();
        let p = RefEncoderParams::init(
            &RefEncoderShape {
                base_dim: 2,
                cond_dim: 0,
                out_dim: 2,
                hidden_dim: None,
                candidate_dim: Some(3),
                init_scale: 1.0,
            },
            6,
        );
        let wc = &p.candidate.as_ref().unwrap().w;
        for (i, row) in rows.iter().enumerate() {
            let h = p.encode_candidate_row(row);
            for o in 0..2 {
                let mut s = 0.0;
                for t in 0..3 {
                    s += wc[o * 3 + t] * row[t] as f64;
                }
                assert!((h[o] - s).abs() < 1e-12);
            }
            let cached = encode_candidates_ref(&store, &p).unwrap();
            for o in 0..2 {
                assert_eq!(cached.row(i)[o], h[o] as f32);
            }
        }
        assert!(
            encode_candidates_ref(&EmbeddingMatrix::from_rows(&[vec![1.0f32]]).unwrap(), &p)
                .is_err()
        );
    }

    #[test]
    fn candidate_cache_invalidates_on_change() {
        let store = EmbeddingMatrix::from_rows(&[vec![1.0f32, 2.0]]).unwrap();
        let mut p = RefEncoderParams::passthrough(2, 0);
        p.candidate = Some(Dense::new(2, 2, scaled_identity(2, 1.0), vec![0.0; 2]).unwrap());
        let mut cache = CandidateCache::default();
        assert_eq!(cache.get(&store, &p).unwrap().row(0), &[1.0, 2.0]);
        assert!(cache.is_valid_for(&p));
        p.candidate.as_mut().unwrap().w[0] = 3.0;
        assert!(!cache.is_valid_for(&p));
        assert_eq!(cache.get(&store, &p).unwrap().row(0), &[3.0, 2.0]);
    }

    #[test]
    fn zeroed_conditioning_ignores_cond() {
        let p = RefEncoderParams::init(
            &RefEncoderShape {
                base_dim: 2,
                cond_dim: 2,
                out_dim: 2,
                hidden_dim: Some(3),
                ..Default::default()
            },
            9,
        );
        let enc = ReferenceEncoder {
            params: &p,
            zero_conditioning: true,
        };
        let q = QueryInput {
            id: "q".into(),
            features: Some(vec![0.5, 0.5]),
            text: None,
        };
        let a = enc.encode(&q, &cond(vec![1.0, 2.0])).unwrap();
        let b = enc.encode(&q, &cond(vec![-4.0, 0.0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_init_reproduces_features() {
        for hidden in [None, Some(10)] {
            let shape = RefEncoderShape {
                base_dim: 4,
                cond_dim: 3,
                out_dim: 4,
                hidden_dim: hidden,
                candidate_dim: None,
                init_scale: 1.0,
            };
            let p = RefEncoderParams::identity_init(&shape, 5).unwrap();
            let x = [0.3, -1.2, 0.0, 2.5];
            let (out, _) = p.forward_tape([x.as_slice(), &[0.0; 3]].concat());
            for i in 0..4 {
                assert!((out[i] - x[i]).abs() < 1e-15);
            }
            // conditioning stays live
            let live = [[1.0, -1.0, 0.5], [-1.0, 1.0, -0.5]].iter().any(|c| {
                let (moved, _) = p.forward_tape([x.as_slice(), c].concat());
                moved.iter().zip(&out).any(|(a, b)| (a - b).abs() > 1e-6)
            });
            assert!(live);
        }
        let narrow = RefEncoderShape {
            base_dim: 4,
            cond_dim: 1,
            out_dim: 4,
            hidden_dim: Some(6),
            ..RefEncoderShape::default()
        };
        assert!(RefEncoderParams::identity_init(&narrow, 1).is_err());
    }
}
