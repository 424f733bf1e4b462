//! Binary embedding store.
//!
//! Layout (little-endian):
//!
//! ```text
//! 0..4    magic "LRKE"
//! 4       version = 1
//! 5       dtype: 1 = f32, 2 = f64
//! 6..8    reserved, zero
//! 8..16   count (u64)
//! 16..24  dim (u64)
//! 24..    count * dim values, row-major
//! ```
//!
//! Candidate embeddings are always f32 (dtype 1). The f64 variant is used for
//! checkpoint tensors, which must round-trip training state exactly.
//!
//! External ids live in an optional sidecar `<store>.ids`: UTF-8 text, one id
//! per line, line `i` naming row `i`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use memmap2::Mmap;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LRKE";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;
pub const HEADER_LEN: usize = 24;

/// Row-addressable source of f32 vectors.
pub trait Rows: Sync {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn row(&self, i: usize) -> &[f32];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

enum Payload {
    Owned(Vec<f32>),
    Mapped(Mmap),
}

impl Payload {
    fn as_slice(&self) -> &[f32] {
        match self {
            Payload::Owned(v) => v,
            Payload::Mapped(m) => bytemuck::cast_slice(&m[HEADER_LEN..]),
        }
    }
}

/// Dense row-major matrix of candidate embeddings.
///
/// Either owned in memory or backed by a read-only memory map of a store
/// file; in both cases rows are addressed in O(1).
pub struct EmbeddingMatrix {
    count: usize,
    dim: usize,
    data: Payload,
    ids: Option<Vec<String>>,
}

impl std::fmt::Debug for EmbeddingMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingMatrix")
            .field("count", &self.count)
            .field("dim", &self.dim)
            .field("mapped", &matches!(self.data, Payload::Mapped(_)))
            .field("has_ids", &self.ids.is_some())
            .finish()
    }
}

impl Clone for EmbeddingMatrix {
    fn clone(&self) -> Self {
        Self {
            count: self.count,
            dim: self.dim,
            data: Payload::Owned(self.as_slice().to_vec()),
            ids: self.ids.clone(),
        }
    }
}

/// Bitwise equality of shape, payload and ids.
impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.count == other.count
            && self.dim == other.dim
            && self.ids == other.ids
            && self
                .as_slice()
                .iter()
                .zip(other.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn first_non_finite_row(data: &[f32], dim: usize) -> Option<usize> {
    data.iter().position(|v| !v.is_finite()).map(|p| p / dim)
}

impl EmbeddingMatrix {
    pub fn new(count: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dim must be positive".into()));
        }
        if data.len() != count * dim {
            return Err(Error::InvalidArgument(format!(
                "data length {} != count {count} x dim {dim}",
                data.len()
            )));
        }
        if let Some(row) = first_non_finite_row(&data, dim) {
            return Err(Error::NonFinite { row });
        }
        Ok(Self {
            count,
            dim,
            data: Payload::Owned(data),
            ids: None,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::InvalidArgument("from_rows needs at least one row".into()))?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn from_f64_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let rows: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| r.as_ref().iter().map(|&v| v as f32).collect())
            .collect();
        Self::from_rows(&rows)
    }

    /// An empty `0 x dim` matrix.
    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(0, dim, Vec::new())
    }

    /// Attach external ids. They must be unique and one per row.
    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.count {
            return Err(Error::InvalidArgument(format!(
                "{} ids for {} rows",
                ids.len(),
                self.count
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if id.contains('\n') || id.contains('\r') {
                return Err(Error::InvalidArgument(format!(
                    "id {id:?} contains a newline"
                )));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate id {id}")));
            }
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    /// External id of row `i`; the row index itself when no id map is attached.
    pub fn external_id(&self, i: usize) -> String {
        match &self.ids {
            Some(ids) => ids[i].clone(),
            None => i.to_string(),
        }
    }

    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice()
    }

    pub fn is_mapped(&self) -> bool {
        matches!(self.data, Payload::Mapped(_))
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.as_slice()[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.as_slice().chunks_exact(self.dim)
    }

    /// Owned copy of the selected rows, in the given order. Ids are not carried.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.count {
                return Err(Error::Data(format!(
                    "row {i} out of range (count {})",
                    self.count
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            count: indices.len(),
            dim: self.dim,
            data: Payload::Owned(data),
            ids: None,
        })
    }

    pub fn truncate_view(&self, prefix_dim: usize) -> Result<TruncatedView<'_>> {
        truncate_view(self, prefix_dim)
    }
}

impl Rows for EmbeddingMatrix {
    fn len(&self) -> usize {
        self.count
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn row(&self, i: usize) -> &[f32] {
        EmbeddingMatrix::row(self, i)
    }
}

/// Leading-prefix view of every row of a matrix. Borrows; never copies.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedView<'a> {
    source: &'a EmbeddingMatrix,
    prefix_dim: usize,
}

impl<'a> TruncatedView<'a> {
    pub fn source(&self) -> &'a EmbeddingMatrix {
        self.source
    }
    pub fn prefix_dim(&self) -> usize {
        self.prefix_dim
    }
}

impl Rows for TruncatedView<'_> {
    fn len(&self) -> usize {
        self.source.count
    }
    fn dim(&self) -> usize {
        self.prefix_dim
    }
    fn row(&self, i: usize) -> &[f32] {
        &self.source.row(i)[..self.prefix_dim]
    }
}

pub fn truncate_view(matrix: &EmbeddingMatrix, prefix_dim: usize) -> Result<TruncatedView<'_>> {
    if prefix_dim == 0 {
        return Err(Error::InvalidArgument("prefix_dim must be positive".into()));
    }
    if prefix_dim > matrix.dim {
        return Err(Error::InvalidArgument(format!(
            "prefix_dim {prefix_dim} exceeds dim {}",
            matrix.dim
        )));
    }
    Ok(TruncatedView {
        source: matrix,
        prefix_dim,
    })
}

/// Path of the id-map sidecar for a store file.
pub fn ids_path(store: &Path) -> PathBuf {
    let mut s = store.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

fn header(dtype: u8, count: usize, dim: usize) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(MAGIC);
    h[4] = VERSION;
    h[5] = dtype;
    h[8..16].copy_from_slice(&(count as u64).to_le_bytes());
    h[16..24].copy_from_slice(&(dim as u64).to_le_bytes());
    h
}

struct Header {
    dtype: u8,
    count: usize,
    dim: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN || &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes[4] != VERSION {
        return Err(Error::VersionMismatch {
            found: bytes[4],
            expected: VERSION,
        });
    }
    let dtype = bytes[5];
    if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if dim == 0 {
        return Err(Error::Data(format!("{}: dim is zero", path.display())));
    }
    let width = if dtype == DTYPE_F32 { 4 } else { 8 };
    let declared = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::Data("header size overflow".into()))?;
    let actual = (bytes.len() - HEADER_LEN) as u64;
    if declared > actual {
        return Err(Error::TruncatedPayload { declared, actual });
    }
    if declared < actual {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            actual - declared
        )));
    }
    Ok(Header {
        dtype,
        count: count as usize,
        dim: dim as usize,
    })
}

/// Write `matrix` in the store format, plus the `.ids` sidecar when the
/// matrix carries external ids.
pub fn write_store(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(row) = first_non_finite_row(matrix.as_slice(), matrix.dim) {
        return Err(Error::NonFinite { row });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&header(DTYPE_F32, matrix.count, matrix.dim))
        .map_err(io)?;
    for v in matrix.as_slice() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let sidecar = ids_path(path);
    match &matrix.ids {
        Some(ids) => {
            let f = File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            let mut w = BufWriter::new(f);
            for id in ids {
                writeln!(w, "{id}").map_err(|e| Error::io(&sidecar, e))?;
            }
            w.flush().map_err(|e| Error::io(&sidecar, e))?;
        }
        None => {
            if sidecar.exists() {
                std::fs::remove_file(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            }
        }
    }
    Ok(())
}

/// Open a store file. The payload is memory-mapped, so rows are read on
/// demand rather than loaded up front.
pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    // SAFETY: the store is treated as immutable after it is written; callers
    // must not modify the file while it is mapped.
    let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
    let h = parse_header(path, &map)?;
    if h.dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(h.dtype));
    }

    let data = if cfg!(target_endian = "little") {
        Payload::Mapped(map)
    } else {
        let vals = map[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Payload::Owned(vals)
    };
    if let Some(row) = first_non_finite_row(data.as_slice(), h.dim) {
        return Err(Error::NonFinite { row });
    }
    let mut m = EmbeddingMatrix {
        count: h.count,
        dim: h.dim,
        data,
        ids: None,
    };

    let sidecar = ids_path(path);
    if sidecar.exists() {
        let f = File::open(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let ids = BufReader::new(f)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(&sidecar, e))?;
        m = m.with_ids(ids)?;
    }
    Ok(m)
}

/// Write an f64 tensor (`rows x cols`) in the store format with dtype 2.
pub fn write_tensor_f64(
    path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    data: &[f64],
) -> Result<()> {
    let path = path.as_ref();
    if data.len() != rows * cols {
        return Err(Error::InvalidArgument(format!(
            "tensor length {} != {rows} x {cols}",
            data.len()
        )));
    }
    let mut bytes = Vec::with_capacity(HEADER_LEN + data.len() * 8);
    bytes.extend_from_slice(&header(DTYPE_F64, rows, cols));
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read an f64 tensor written by [`write_tensor_f64`]. Returns `(rows, cols, data)`.
pub fn read_tensor_f64(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(path, &bytes)?;
    if h.dtype != DTYPE_F64 {
        return Err(Error::UnsupportedDtype(h.dtype));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h.count, h.dim, data))
}
