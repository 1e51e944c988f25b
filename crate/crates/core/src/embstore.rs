//! Embedding sets and the GLRE binary container.
//!
//! Layout (version 1, every integer little-endian):
//!
//! ```text
//! 0..4    magic "GLRE"
//! 4..8    version        u32 = 1
//! 8..16   record count   u64
//! 16..20  dim            u32
//! 20..24  flags          u32   bit 0 = rows are unit-norm
//! id table               per record: u16 byte length + UTF-8 bytes
//! payload                count * dim f32, row-major
//! ```

use std::collections::{HashMap, HashSet};
use std::io::{self, Read, Write};

use thiserror::Error;

pub const GLRE_MAGIC: [u8; 4] = *b"GLRE";
pub const GLRE_VERSION: u32 = 1;
pub const GLRE_HEADER_LEN: usize = 24;
pub const FLAG_NORMALIZED: u32 = 1;
pub const MAX_ID_LEN: usize = u16::MAX as usize;

/// Payload read size; a multiple of 4.
const PAYLOAD_CHUNK: usize = 1 << 16;

/// Maximum deviation of a row norm from 1.0 for a set flagged as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("expected {expected} values for {rows} rows, got {actual}")]
    RowCountMismatch {
        rows: usize,
        expected: usize,
        actual: usize,
    },
    #[error("empty id at row {row}")]
    EmptyId { row: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("non-finite value in row {id:?}")]
    NonFinite { id: String },
    #[error("row {id:?} has norm {norm}, expected unit norm")]
    NotUnitNorm { id: String, norm: f64 },
    #[error("row {id:?} has zero norm")]
    ZeroRow { id: String },
    #[error("id {0:?} is not present in every set")]
    MissingId(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown flag bits {0:#x}")]
    UnknownFlags(u32),
    #[error("truncated input")]
    Truncated,
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("id of {0} bytes exceeds the 65535-byte limit")]
    IdTooLong(usize),
    #[error("id at row {row} is not valid UTF-8")]
    InvalidUtf8 { row: usize },
    #[error("record count {count} x dim {dim} overflows")]
    SizeOverflow { count: u64, dim: u32 },
    #[error(transparent)]
    Invalid(#[from] EmbedError),
}

/// Named collection of fixed-dimension f32 vectors, immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingSet {
    /// Builds an unnormalized set after validating ids, shape and finiteness.
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self, EmbedError> {
        Self::with_flag(ids, dim, data, false)
    }

    /// Builds a set with an explicit `normalized` flag; when set, every row
    /// must have unit norm.
    pub fn with_flag(
        ids: Vec<String>,
        dim: usize,
        data: Vec<f32>,
        normalized: bool,
    ) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        let expected = ids
            .len()
            .checked_mul(dim)
            .ok_or(EmbedError::RowCountMismatch {
                rows: ids.len(),
                expected: usize::MAX,
                actual: data.len(),
            })?;
        if expected != data.len() {
            return Err(EmbedError::RowCountMismatch {
                rows: ids.len(),
                expected,
                actual: data.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if id.is_empty() {
                return Err(EmbedError::EmptyId { row });
            }
            if !seen.insert(id.as_str()) {
                return Err(EmbedError::DuplicateId(id.clone()));
            }
        }
        for (id, row) in ids.iter().zip(data.chunks_exact(dim)) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EmbedError::NonFinite { id: id.clone() });
            }
            if normalized {
                let norm = row_norm(row);
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(EmbedError::NotUnitNorm {
                        id: id.clone(),
                        norm,
                    });
                }
            }
        }
        Ok(Self {
            ids,
            dim,
            data,
            normalized,
        })
    }

    /// An empty set of the given dimension.
    pub fn empty(dim: usize, normalized: bool) -> Result<Self, EmbedError> {
        Self::with_flag(Vec::new(), dim, Vec::new(), normalized)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Row-major values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn into_parts(self) -> (Vec<String>, usize, Vec<f32>, bool) {
        (self.ids, self.dim, self.data, self.normalized)
    }

    /// Map from id to row index.
    pub fn index_of_ids(&self) -> HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Rows for `ids`, in the order given.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self, EmbedError> {
        let lookup = self.index_of_ids();
        let mut out_ids = Vec::with_capacity(ids.len());
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            let id = id.as_ref();
            let &row = lookup
                .get(id)
                .ok_or_else(|| EmbedError::MissingId(id.to_owned()))?;
            out_ids.push(id.to_owned());
            data.extend_from_slice(self.row(row));
        }
        Self::with_flag(out_ids, self.dim, data, self.normalized)
    }

    /// Size in bytes of the GLRE encoding of this set.
    pub fn encoded_len(&self) -> usize {
        GLRE_HEADER_LEN
            + self.ids.iter().map(|id| 2 + id.len()).sum::<usize>()
            + self.data.len() * 4
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        save_embeddings(self, &mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        load_embeddings(bytes)
    }
}

/// L2 norm of an f32 row, accumulated in f64.
pub fn row_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Writes `set` in GLRE format and returns the number of bytes written.
pub fn save_embeddings<W: Write>(set: &EmbeddingSet, mut sink: W) -> Result<usize, FormatError> {
    if let Some(id) = set.ids.iter().find(|id| id.len() > MAX_ID_LEN) {
        return Err(FormatError::IdTooLong(id.len()));
    }
    let dim = u32::try_from(set.dim).map_err(|_| FormatError::SizeOverflow {
        count: set.len() as u64,
        dim: u32::MAX,
    })?;
    let flags = if set.normalized { FLAG_NORMALIZED } else { 0 };

    let mut header = [0u8; GLRE_HEADER_LEN];
    header[0..4].copy_from_slice(&GLRE_MAGIC);
    header[4..8].copy_from_slice(&GLRE_VERSION.to_le_bytes());
    header[8..16].copy_from_slice(&(set.len() as u64).to_le_bytes());
    header[16..20].copy_from_slice(&dim.to_le_bytes());
    header[20..24].copy_from_slice(&flags.to_le_bytes());
    sink.write_all(&header)?;

    for id in &set.ids {
        sink.write_all(&(id.len() as u16).to_le_bytes())?;
        sink.write_all(id.as_bytes())?;
    }
    let mut payload = Vec::with_capacity((set.data.len() * 4).min(PAYLOAD_CHUNK));
    for values in set.data.chunks(PAYLOAD_CHUNK / 4) {
        payload.clear();
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&payload)?;
    }
    sink.flush()?;
    Ok(set.encoded_len())
}

fn read_exact_or_truncated<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<(), FormatError> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FormatError::Truncated,
        _ => FormatError::Io(e),
    })
}

/// Reads a GLRE stream. The whole stream must be consumed: trailing bytes
/// are an error, as is any short read.
pub fn load_embeddings<R: Read>(mut source: R) -> Result<EmbeddingSet, FormatError> {
    let mut header = [0u8; GLRE_HEADER_LEN];
    read_exact_or_truncated(&mut source, &mut header)?;
    let magic: [u8; 4] = header[0..4].try_into().unwrap();
    if magic != GLRE_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != GLRE_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let dim_raw = u32::from_le_bytes(header[16..20].try_into().unwrap());
    let flags = u32::from_le_bytes(header[20..24].try_into().unwrap());
    if flags & !FLAG_NORMALIZED != 0 {
        return Err(FormatError::UnknownFlags(flags));
    }
    if dim_raw == 0 {
        return Err(EmbedError::ZeroDim.into());
    }
    let overflow = FormatError::SizeOverflow {
        count,
        dim: dim_raw,
    };
    let rows = usize::try_from(count).map_err(|_| FormatError::SizeOverflow {
        count,
        dim: dim_raw,
    })?;
    let dim = dim_raw as usize;
    let total = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or(overflow)?;

    // Capacities are capped so a lying header cannot force a huge allocation
    // before the stream runs dry.
    let mut ids = Vec::with_capacity(rows.min(1 << 16));
    let mut len_buf = [0u8; 2];
    let mut id_buf = Vec::new();
    for row in 0..rows {
        read_exact_or_truncated(&mut source, &mut len_buf)?;
        id_buf.resize(u16::from_le_bytes(len_buf) as usize, 0);
        read_exact_or_truncated(&mut source, &mut id_buf)?;
        let id = std::str::from_utf8(&id_buf).map_err(|_| FormatError::InvalidUtf8 { row })?;
        ids.push(id.to_owned());
    }

    let mut data = Vec::with_capacity((total / 4).min(1 << 20));
    let mut chunk = vec![0u8; total.min(PAYLOAD_CHUNK)];
    let mut left = total;
    while left > 0 {
        let bytes = &mut chunk[..left.min(PAYLOAD_CHUNK)];
        read_exact_or_truncated(&mut source, bytes)?;
        data.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
        left -= bytes.len();
    }

    let mut probe = [0u8; 1];
    loop {
        match source.read(&mut probe) {
            Ok(0) => break,
            Ok(_) => return Err(FormatError::TrailingBytes),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(FormatError::Io(e)),
        }
    }

    Ok(EmbeddingSet::with_flag(
        ids,
        dim,
        data,
        flags & FLAG_NORMALIZED != 0,
    )?)
}

/// Scales every row to unit L2 norm. Fails on the first zero row.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet, EmbedError> {
    let mut data = Vec::with_capacity(set.data.len());
    for (id, row) in set.ids.iter().zip(set.rows()) {
        let norm = row_norm(row);
        if norm == 0.0 {
            return Err(EmbedError::ZeroRow { id: id.clone() });
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    EmbeddingSet::with_flag(set.ids.clone(), set.dim, data, true)
}

/// Reorders every set to the id order of the first one.
///
/// All sets must hold exactly the same ids; the id-to-vector mapping of each
/// set is preserved.
pub fn align_by_ids(sets: &[EmbeddingSet]) -> Result<Vec<EmbeddingSet>, EmbedError> {
    let Some(first) = sets.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::with_capacity(sets.len());
    out.push(first.clone());
    for set in &sets[1..] {
        if set.len() != first.len() {
            let reference = first.index_of_ids();
            let extra = set
                .ids
                .iter()
                .find(|id| !reference.contains_key(id.as_str()));
            if let Some(id) = extra {
                return Err(EmbedError::MissingId(id.clone()));
            }
        }
        out.push(set.subset(&first.ids)?);
    }
    Ok(out)
}
