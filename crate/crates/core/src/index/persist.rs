//! Binary index file.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        "RCGX"
//! version      u32
//! kind         u8     0 = flat, 1 = hnsw, 2 = reserved (ivfpq)
//! dim          u32
//! count        u64
//! params       m u32, m0 u32, ef_construction u32, seed u64,
//!              entry_point u64 (u64::MAX = none), max_level u32
//! model_name   u32 length + UTF-8 bytes
//! matrix       count * dim f32
//! hnsw only:   node levels, count * u32
//!              for level in 0..=max_level, for each node present on it:
//!                u64 length + length * u64 neighbor ids
//! ```
//!
//! Rows map to the passage store by position.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{FlatIndex, HnswIndex, HnswParams, IndexError, IndexKind, VectorIndex};
use crate::embed::EmbeddingMatrix;

pub const MAGIC: &[u8; 4] = b"RCGX";
pub const FORMAT_VERSION: u32 = 1;
const KIND_IVFPQ_RESERVED: u8 = 2;
const NO_ENTRY: u64 = u64::MAX;

pub fn save_index(index: &VectorIndex, path: &Path, model_name: &str) -> Result<(), IndexError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let res = (|| -> Result<(), IndexError> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_index(&mut w, index, model_name)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        Ok(())
    })();
    match res {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn write_index<W: Write>(w: &mut W, index: &VectorIndex, model_name: &str) -> Result<(), IndexError> {
    let m = index.matrix();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[index.kind().tag()])?;
    w.write_all(&(m.dim() as u32).to_le_bytes())?;
    w.write_all(&(m.count() as u64).to_le_bytes())?;

    let (params, entry, max_level) = match index {
        VectorIndex::Flat(_) => (HnswParams { m: 0, m0: 0, ef_construction: 0, seed: 0 }, NO_ENTRY, 0),
        VectorIndex::Hnsw(h) => (
            *h.params(),
            h.entry_point().map_or(NO_ENTRY, |e| e as u64),
            h.max_level() as u32,
        ),
    };
    w.write_all(&(params.m as u32).to_le_bytes())?;
    w.write_all(&(params.m0 as u32).to_le_bytes())?;
    w.write_all(&(params.ef_construction as u32).to_le_bytes())?;
    w.write_all(&params.seed.to_le_bytes())?;
    w.write_all(&entry.to_le_bytes())?;
    w.write_all(&max_level.to_le_bytes())?;

    w.write_all(&(model_name.len() as u32).to_le_bytes())?;
    w.write_all(model_name.as_bytes())?;

    for x in m.as_flat() {
        w.write_all(&x.to_le_bytes())?;
    }

    if let VectorIndex::Hnsw(h) = index {
        let links = h.links();
        for node in links {
            w.write_all(&((node.len() - 1) as u32).to_le_bytes())?;
        }
        for level in 0..=max_level as usize {
            for node in links.iter().filter(|n| n.len() > level) {
                let nbs = &node[level];
                w.write_all(&(nbs.len() as u64).to_le_bytes())?;
                for id in nbs {
                    w.write_all(&(*id as u64).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).ok_or(IndexError::Truncated)?;
        if end > self.buf.len() {
            return Err(IndexError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Model name recorded in an index file, read from the header only.
pub fn read_model_name(path: &Path) -> Result<String, IndexError> {
    let mut head = Vec::new();
    File::open(path)?.take(4096).read_to_end(&mut head)?;
    let header = parse_header(&mut Cursor { buf: &head, pos: 0 })?;
    Ok(header.model_name)
}

struct Header {
    kind: u8,
    dim: usize,
    count: usize,
    params: HnswParams,
    entry: u64,
    max_level: usize,
    model_name: String,
}

fn parse_header(c: &mut Cursor<'_>) -> Result<Header, IndexError> {
    let magic = c.take(4).map_err(|_| IndexError::Format("file too short for magic".into()))?;
    if magic != MAGIC {
        return Err(IndexError::Format(format!("bad magic bytes {magic:02x?}")));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(IndexError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = c.u8()?;
    let dim = c.u32()? as usize;
    let count = c.u64()? as usize;
    let params = HnswParams {
        m: c.u32()? as usize,
        m0: c.u32()? as usize,
        ef_construction: c.u32()? as usize,
        seed: c.u64()?,
    };
    let entry = c.u64()?;
    let max_level = c.u32()? as usize;
    let name_len = c.u32()? as usize;
    let model_name = std::str::from_utf8(c.take(name_len)?)
        .map_err(|_| IndexError::Format("model name is not UTF-8".into()))?
        .to_string();
    Ok(Header {
        kind,
        dim,
        count,
        params,
        entry,
        max_level,
        model_name,
    })
}

/// Load an index file. When `expected_model` is given, the embedder model
/// name recorded in the file must match it.
pub fn load_index(path: &Path, expected_model: Option<&str>) -> Result<VectorIndex, IndexError> {
    let buf = fs::read(path)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let h = parse_header(&mut c)?;
    if let Some(expected) = expected_model {
        if expected != h.model_name {
            return Err(IndexError::Fingerprint {
                expected: expected.to_string(),
                found: h.model_name,
            });
        }
    }
    if h.dim == 0 {
        return Err(IndexError::Format("zero dimension".into()));
    }
    let floats = h.count.checked_mul(h.dim).ok_or(IndexError::Truncated)?;
    let raw = c.take(floats.checked_mul(4).ok_or(IndexError::Truncated)?)?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let matrix = EmbeddingMatrix::from_flat(h.dim, data).map_err(|e| IndexError::Format(e.to_string()))?;

    let index = match h.kind {
        k if k == IndexKind::Flat.tag() => VectorIndex::Flat(FlatIndex::build(matrix)),
        k if k == IndexKind::Hnsw.tag() => {
            let mut levels = Vec::with_capacity(h.count);
            for _ in 0..h.count {
                let l = c.u32()? as usize;
                if l > h.max_level {
                    return Err(IndexError::Format("node level above max level".into()));
                }
                levels.push(l);
            }
            let mut links: Vec<Vec<Vec<u32>>> = levels.iter().map(|l| vec![Vec::new(); l + 1]).collect();
            // Level-major order matches the writer.
            #[allow(clippy::needless_range_loop)]
            for level in 0..=h.max_level {
                for (node, l) in levels.iter().enumerate() {
                    if *l < level {
                        continue;
                    }
                    let len = c.u64()? as usize;
                    if len > h.count {
                        return Err(IndexError::Format("adjacency list longer than node count".into()));
                    }
                    let mut nbs = Vec::with_capacity(len);
                    for _ in 0..len {
                        nbs.push(c.u64()? as u32);
                    }
                    links[node][level] = nbs;
                }
            }
            let entry = (h.entry != NO_ENTRY).then_some(h.entry as u32);
            VectorIndex::Hnsw(HnswIndex::from_parts(matrix, h.params, links, entry)?)
        }
        KIND_IVFPQ_RESERVED => {
            return Err(IndexError::Format("IVFPQ indexes are not supported".into()));
        }
        other => return Err(IndexError::Format(format!("unknown index kind {other}"))),
    };
    if c.pos != buf.len() {
        return Err(IndexError::Format("trailing bytes after index data".into()));
    }
    Ok(index)
}
