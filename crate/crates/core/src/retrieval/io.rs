//! Datastore and index files. All integers and floats little-endian.
//!
//! Datastore (`FMEM`): magic, `u16` version, `u32` dim, `u64` N, then the
//! `N × dim` keys as `f32`, then N values as `u32`.
//!
//! Index (`FIVF`): magic, `u16` version, `u32` dim, `u32` ncluster, `u32` m
//! (0 = unquantized), `u32` ksub (0 when m = 0), `u64` N; the
//! `ncluster × dim` centroids as `f32`; the `m × ksub × (dim/m)` codebooks
//! as `f32`; then per cluster a `u32` count followed by that many `u32` rows,
//! that many `u32` values, and either `count × m` code bytes or
//! `count × dim` raw `f32` vectors.

use super::ivfpq::{InvertedList, IvfPqIndex, ProductQuantizer};
use super::Datastore;
use crate::error::{Error, Result};

pub const DATASTORE_MAGIC: &[u8; 4] = b"FMEM";
pub const INDEX_MAGIC: &[u8; 4] = b"FIVF";
const VERSION: u16 = 1;

struct Cursor<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let chunk = self
            .pos
            .checked_add(n)
            .and_then(|end| self.bytes.get(self.pos..end))
            .ok_or_else(|| Error::format(self.what, "truncated"))?;
        self.pos += n;
        Ok(chunk)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::format(self.what, "overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::format(self.what, "overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::format(self.what, "bad magic"));
        }
        let v = self.u16()?;
        if v != VERSION {
            return Err(Error::format(self.what, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::format(self.what, "trailing bytes"))
        }
    }
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_u32s(out: &mut Vec<u8>, xs: &[u32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn write_datastore(store: &Datastore) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + store.keys().len() * 4 + store.len() * 4);
    out.extend_from_slice(DATASTORE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    put_f32s(&mut out, store.keys());
    put_u32s(&mut out, store.values());
    out
}

pub fn read_datastore(bytes: &[u8]) -> Result<Datastore> {
    let mut c = Cursor {
        what: "datastore file",
        bytes,
        pos: 0,
    };
    c.header(DATASTORE_MAGIC)?;
    let dim = c.u32()? as usize;
    let n = usize::try_from(c.u64()?).map_err(|_| Error::format("datastore file", "N too large"))?;
    let keys = c.f32s(n.checked_mul(dim).ok_or_else(|| Error::format("datastore file", "overflow"))?)?;
    let values = c.u32s(n)?;
    c.finish()?;
    Datastore::new(dim, keys, values)
}

pub fn write_index(index: &IvfPqIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let (m, ksub) = index.pq.as_ref().map_or((0, 0), |pq| (pq.m(), pq.ksub()));
    for v in [index.dim, index.ncluster(), m, ksub] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    put_f32s(&mut out, &index.centroids);
    if let Some(pq) = &index.pq {
        put_f32s(&mut out, pq.codebooks());
    }
    for list in &index.lists {
        out.extend_from_slice(&(list.rows.len() as u32).to_le_bytes());
        put_u32s(&mut out, &list.rows);
        put_u32s(&mut out, &list.values);
        if index.pq.is_some() {
            out.extend_from_slice(&list.codes);
        } else {
            put_f32s(&mut out, &list.raw);
        }
    }
    out
}

pub fn read_index(bytes: &[u8]) -> Result<IvfPqIndex> {
    let what = "index file";
    let mut c = Cursor { what, bytes, pos: 0 };
    c.header(INDEX_MAGIC)?;
    let dim = c.u32()? as usize;
    let ncluster = c.u32()? as usize;
    let m = c.u32()? as usize;
    let ksub = c.u32()? as usize;
    let n = c.u64()? as usize;
    if dim == 0 || ncluster == 0 {
        return Err(Error::format(what, "zero dimension or cluster count"));
    }
    let centroids = c.f32s(ncluster * dim)?;
    let pq = if m > 0 {
        Some(ProductQuantizer::new(dim, m, ksub, c.f32s(dim * ksub)?)?)
    } else {
        None
    };
    let mut lists = Vec::with_capacity(ncluster);
    for _ in 0..ncluster {
        let count = c.u32()? as usize;
        let rows = c.u32s(count)?;
        let values = c.u32s(count)?;
        let mut list = InvertedList {
            rows,
            values,
            ..InvertedList::default()
        };
        if let Some(pq) = &pq {
            if let Some(&bad) = c.take(count * m)?.iter().find(|&&b| b as usize >= pq.ksub()) {
                return Err(Error::format(what, format!("code {bad} out of range")));
            }
            list.codes = bytes[c.pos - count * m..c.pos].to_vec();
        } else {
            list.raw = c.f32s(count * dim)?;
        }
        lists.push(list);
    }
    c.finish()?;
    let index = IvfPqIndex {
        dim,
        centroids,
        lists,
        pq,
    };
    if index.len() != n {
        return Err(Error::format(what, "row count mismatch"));
    }
    let mut seen = vec![false; n];
    for r in index.lists.iter().flat_map(|l| &l.rows) {
        match seen.get_mut(*r as usize) {
            Some(s) if !*s => *s = true,
            _ => return Err(Error::format(what, "rows are not a permutation")),
        }
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::build_ivfpq;

    fn store() -> Datastore {
        let keys: Vec<f32> = (0..40 * 4).map(|i| ((i * 37 % 23) as f32 - 11.0) / 3.0).collect();
        let values = (0..40).map(|i| 3 + i % 4).collect();
        Datastore::new(4, keys, values).unwrap()
    }

    #[test]
    fn datastore_layout_and_roundtrip() {
        let s = store();
        let bytes = write_datastore(&s);
        assert_eq!(&bytes[..4], b"FMEM");
        assert_eq!(&bytes[6..10], &4u32.to_le_bytes());
        assert_eq!(&bytes[10..18], &40u64.to_le_bytes());
        assert_eq!(bytes.len(), 18 + 40 * 4 * 4 + 40 * 4);
        assert_eq!(read_datastore(&bytes).unwrap(), s);
        assert!(read_datastore(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn index_roundtrip() {
        let s = store();
        for m in [0, 2] {
            let index = build_ivfpq(&s, 4, m, 4, 7).unwrap();
            let bytes = write_index(&index);
            assert_eq!(&bytes[..4], b"FIVF");
            assert_eq!(read_index(&bytes).unwrap(), index);
        }
    }
}
