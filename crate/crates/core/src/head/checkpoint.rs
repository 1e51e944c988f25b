//! GLRH head checkpoints.
//!
//! ```text
//! 0..4    magic "GLRH"
//! 4..8    version  u32 = 1
//! 8..12   d_in     u32
//! 12..16  d_emb    u32
//! 16..20  classes  u32
//! 20..28  scale    f64
//! proj        d_in * d_emb f32
//! prototypes  classes * d_emb f32
//! ```
//!
//! Little-endian throughout; optimizer state is not stored.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{CosineHead, HeadError};

pub const GLRH_MAGIC: [u8; 4] = *b"GLRH";
pub const GLRH_VERSION: u32 = 1;
pub const GLRH_HEADER_LEN: usize = 28;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("trailing bytes after checkpoint")]
    TrailingBytes,
    #[error("parameter count overflows")]
    SizeOverflow,
    #[error(transparent)]
    Invalid(#[from] HeadError),
}

pub fn save_head<W: Write>(head: &CosineHead<f32>, mut sink: W) -> Result<usize, CheckpointError> {
    let as_u32 = |v: usize| u32::try_from(v).map_err(|_| CheckpointError::SizeOverflow);
    let mut buf =
        Vec::with_capacity(GLRH_HEADER_LEN + 4 * (head.proj().len() + head.prototypes().len()));
    buf.extend_from_slice(&GLRH_MAGIC);
    buf.extend_from_slice(&GLRH_VERSION.to_le_bytes());
    buf.extend_from_slice(&as_u32(head.d_in())?.to_le_bytes());
    buf.extend_from_slice(&as_u32(head.d_emb())?.to_le_bytes());
    buf.extend_from_slice(&as_u32(head.num_classes())?.to_le_bytes());
    buf.extend_from_slice(&head.scale().to_le_bytes());
    for v in head.proj().iter().chain(head.prototypes()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(buf.len())
}

fn read_f32s<R: Read>(source: &mut R, count: usize) -> Result<Vec<f32>, CheckpointError> {
    let mut out = Vec::with_capacity(count.min(1 << 20));
    let mut chunk = vec![0u8; 4 * count.min(4096)];
    let mut left = count;
    while left > 0 {
        let take = left.min(4096);
        let bytes = &mut chunk[..4 * take];
        source.read_exact(bytes).map_err(eof_as_truncated)?;
        out.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
        left -= take;
    }
    Ok(out)
}

fn eof_as_truncated(e: io::Error) -> CheckpointError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        CheckpointError::Truncated
    } else {
        CheckpointError::Io(e)
    }
}

pub fn load_head<R: Read>(mut source: R) -> Result<CosineHead<f32>, CheckpointError> {
    let mut header = [0u8; GLRH_HEADER_LEN];
    source.read_exact(&mut header).map_err(eof_as_truncated)?;
    let magic: [u8; 4] = header[0..4].try_into().unwrap();
    if magic != GLRH_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let u32_at = |at: usize| u32::from_le_bytes(header[at..at + 4].try_into().unwrap()) as usize;
    let version = u32_at(4) as u32;
    if version != GLRH_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let (d_in, d_emb, classes) = (u32_at(8), u32_at(12), u32_at(16));
    let scale = f64::from_le_bytes(header[20..28].try_into().unwrap());
    if d_in == 0 || d_emb == 0 {
        return Err(HeadError::InvalidConfig("dimensions must be positive".into()).into());
    }
    if classes < 3 {
        return Err(HeadError::TooFewClasses(classes).into());
    }
    let proj_len = d_in
        .checked_mul(d_emb)
        .ok_or(CheckpointError::SizeOverflow)?;
    let proto_len = classes
        .checked_mul(d_emb)
        .ok_or(CheckpointError::SizeOverflow)?;
    let proj = read_f32s(&mut source, proj_len)?;
    let prototypes = read_f32s(&mut source, proto_len)?;
    let mut probe = [0u8; 1];
    loop {
        match source.read(&mut probe) {
            Ok(0) => break,
            Ok(_) => return Err(CheckpointError::TrailingBytes),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(CosineHead::from_parts(
        d_in, d_emb, proj, prototypes, scale,
    )?)
}

impl CosineHead<f32> {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        save_head(self, &mut out)?;
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        load_head(bytes)
    }
}
