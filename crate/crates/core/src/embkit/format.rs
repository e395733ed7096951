//! V2CE: little-endian binary container for embedding matrices.
//!
//! ```text
//! magic    4 bytes   "V2CE"
//! version  u32       1
//! dtype    u32       0 = float32
//! rows     u64
//! dim      u64
//! meta_len u64
//! meta     meta_len bytes of UTF-8 JSON {"ids":[..],"labels":[..]|null,"groups":[..]|null}
//! payload  rows * dim float32 values, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbError, EmbeddingMatrix, Result};

pub const MAGIC: &[u8; 4] = b"V2CE";
pub const VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8 + 8;

#[derive(Serialize, Deserialize)]
struct Meta {
    ids: Vec<String>,
    labels: Option<Vec<u32>>,
    groups: Option<Vec<u64>>,
}

pub fn write_v2ce<W: Write>(m: &EmbeddingMatrix, mut w: W) -> Result<()> {
    let meta = serde_json::to_vec(&Meta {
        ids: m.ids.clone(),
        labels: m.labels.clone(),
        groups: m.groups.clone(),
    })?;
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&DTYPE_F32.to_le_bytes());
    header.extend_from_slice(&(m.rows as u64).to_le_bytes());
    header.extend_from_slice(&(m.dim as u64).to_le_bytes());
    header.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    w.write_all(&header)?;
    w.write_all(&meta)?;
    let mut payload = Vec::with_capacity(m.data.len() * 4);
    for x in &m.data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_v2ce<R: Read>(mut r: R) -> Result<EmbeddingMatrix> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save_v2ce(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let f = fs::File::create(path)?;
    write_v2ce(m, std::io::BufWriter::new(f))
}

pub fn load_v2ce(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    decode(&fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64, section: &'static str) -> Result<&'a [u8]> {
        let available = (self.bytes.len() - self.pos) as u64;
        if n > available {
            return Err(EmbError::TruncatedFile {
                section,
                needed: n,
                available,
            });
        }
        let n = n as usize;
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64> {
        let b = self.take(8, section)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn decode(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(EmbError::BadMagic(magic));
    }
    let version = cur.u32("header")?;
    if version != VERSION {
        return Err(EmbError::UnsupportedVersion(version));
    }
    let dtype = cur.u32("header")?;
    if dtype != DTYPE_F32 {
        return Err(EmbError::UnsupportedDtype(dtype));
    }
    let rows = cur.u64("header")?;
    let dim = cur.u64("header")?;
    let meta_len = cur.u64("header")?;
    let meta: Meta = serde_json::from_slice(cur.take(meta_len, "metadata")?)?;

    let payload_len =
        rows.checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or(EmbError::TruncatedFile {
                section: "payload",
                needed: u64::MAX,
                available: (bytes.len() - cur.pos) as u64,
            })?;
    let payload = cur.take(payload_len, "payload")?;
    if cur.pos != bytes.len() {
        return Err(EmbError::DimMismatch {
            context: "payload length vs rows x dim",
            expected: payload_len as usize,
            found: bytes.len() - cur.pos + payload_len as usize,
        });
    }
    let (rows, dim) = (rows as usize, dim as usize);
    if meta.ids.len() != rows {
        return Err(EmbError::DimMismatch {
            context: "metadata ids vs rows",
            expected: rows,
            found: meta.ids.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let mut m = EmbeddingMatrix::new(dim, data, meta.ids)?;
    if let Some(l) = meta.labels {
        m = m.with_labels(l)?;
    }
    if let Some(g) = meta.groups {
        m = m.with_groups(g)?;
    }
    Ok(m)
}
