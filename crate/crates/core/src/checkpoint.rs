//! Versioned little-endian binary checkpoints.
//!
//! Expert blob:
//!
//! ```text
//! b"MOEXPRT1"  u32 version  u32 scalar width in bytes
//! u64 window  u64 emb_dim  u64 hidden_dim  u64 vocab_size  u64 tag_count  u64 seed
//! embedding, hidden_w, hidden_b, output_w, output_b   (row-major scalars)
//! ```
//!
//! Pool file (manifest followed by the expert blobs):
//!
//! ```text
//! b"MOEPOOL1"  u32 version  u32 scalar width  u64 K
//! u64 n_types   then n_types length-prefixed UTF-8 strings
//! u64 n_vocab   then n_vocab length-prefixed UTF-8 strings (reserved entries excluded)
//! K times: u64 blob length, expert blob
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::corpus::LabelSet;
use crate::error::{Error, Result};
use crate::moe::ExpertPool;
use crate::scalar::Scalar;
use crate::tagger::{Dims, ExpertParams, Vocabulary};

pub const EXPERT_MAGIC: &[u8; 8] = b"MOEXPRT1";
pub const POOL_MAGIC: &[u8; 8] = b"MOEPOOL1";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn scalars<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(
            n.checked_mul(T::BYTES)
                .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?,
        )?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    fn header(&mut self, magic: &[u8; 8], what: &str, width: usize) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::Checkpoint(format!("not a {what} checkpoint")));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported {what} checkpoint version {version}"
            )));
        }
        let found = self.u32()? as usize;
        if found != width {
            return Err(Error::Checkpoint(format!(
                "{what} checkpoint stores {found}-byte scalars, expected {width}"
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )))
        }
    }
}

pub fn expert_to_bytes<T: Scalar>(expert: &ExpertParams<T>) -> Vec<u8> {
    let d = expert.dims();
    let mut out = Vec::with_capacity(64 + expert.num_params() * T::BYTES);
    out.extend_from_slice(EXPERT_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, T::BYTES as u32);
    for x in [
        d.window,
        d.emb_dim,
        d.hidden_dim,
        expert.vocab_size(),
        expert.tag_count(),
    ] {
        put_u64(&mut out, x as u64);
    }
    put_u64(&mut out, expert.seed());
    for tensor in expert.tensors() {
        for &x in tensor {
            x.write_le(&mut out);
        }
    }
    out
}

fn read_expert<T: Scalar>(r: &mut Reader<'_>) -> Result<ExpertParams<T>> {
    r.header(EXPERT_MAGIC, "expert", T::BYTES)?;
    let dims = Dims {
        window: r.usize()?,
        emb_dim: r.usize()?,
        hidden_dim: r.usize()?,
    };
    let vocab = r.usize()?;
    let tags = r.usize()?;
    let seed = r.u64()?;
    let input = dims.input_dim();
    let shape_err = |e: ndarray::ShapeError| Error::Checkpoint(e.to_string());
    let embedding =
        Array2::from_shape_vec((vocab, dims.emb_dim), r.scalars(vocab * dims.emb_dim)?).map_err(shape_err)?;
    let hidden_w =
        Array2::from_shape_vec((dims.hidden_dim, input), r.scalars(dims.hidden_dim * input)?).map_err(shape_err)?;
    let hidden_b = Array1::from_vec(r.scalars(dims.hidden_dim)?);
    let output_w =
        Array2::from_shape_vec((tags, dims.hidden_dim), r.scalars(tags * dims.hidden_dim)?).map_err(shape_err)?;
    let output_b = Array1::from_vec(r.scalars(tags)?);
    ExpertParams::from_parts(dims, seed, embedding, hidden_w, hidden_b, output_w, output_b)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn expert_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ExpertParams<T>> {
    let mut r = Reader::new(bytes);
    let expert = read_expert(&mut r)?;
    r.finish()?;
    Ok(expert)
}

pub fn pool_to_bytes<T: Scalar>(pool: &ExpertPool<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(POOL_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, T::BYTES as u32);
    put_u64(&mut out, pool.k() as u64);
    let types = pool.labels().entity_types();
    put_u64(&mut out, types.len() as u64);
    for t in types {
        put_str(&mut out, t);
    }
    let entries = pool.vocab().entries();
    put_u64(&mut out, entries.len() as u64);
    for t in entries {
        put_str(&mut out, t);
    }
    for expert in pool.experts() {
        let blob = expert_to_bytes(expert);
        put_u64(&mut out, blob.len() as u64);
        out.extend_from_slice(&blob);
    }
    out
}

pub fn pool_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ExpertPool<T>> {
    let mut r = Reader::new(bytes);
    r.header(POOL_MAGIC, "pool", T::BYTES)?;
    let k = r.usize()?;
    let n_types = r.usize()?;
    let types = (0..n_types).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let labels = LabelSet::new(types).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n_vocab = r.usize()?;
    let entries = (0..n_vocab).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_tokens(entries).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut experts = Vec::with_capacity(k.min(1024));
    for _ in 0..k {
        let len = r.usize()?;
        experts.push(expert_from_bytes(r.take(len)?)?);
    }
    r.finish()?;
    ExpertPool::new(experts, Arc::new(vocab), Arc::new(labels)).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Scalar width in bytes recorded in a pool checkpoint header.
pub fn pool_scalar_width(bytes: &[u8]) -> Result<usize> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != POOL_MAGIC {
        return Err(Error::Checkpoint("not a pool checkpoint".into()));
    }
    r.u32()?;
    Ok(r.u32()? as usize)
}

pub fn save_pool<T: Scalar>(pool: &ExpertPool<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, pool_to_bytes(pool))?;
    Ok(())
}

pub fn load_pool<T: Scalar>(path: impl AsRef<Path>) -> Result<ExpertPool<T>> {
    pool_from_bytes(&fs::read(path)?)
}

pub fn save_expert<T: Scalar>(expert: &ExpertParams<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, expert_to_bytes(expert))?;
    Ok(())
}

pub fn load_expert<T: Scalar>(path: impl AsRef<Path>) -> Result<ExpertParams<T>> {
    expert_from_bytes(&fs::read(path)?)
}
