//! Binary feature stores.
//!
//! ```text
//! magic "OFV1" | "OFM1", version u32, count u32, dim u32   (little-endian)
//! OFV1: count × dim f32 rows; record ids in a `<path>.json` sidecar
//! OFM1: per record H, W, C (u32) then H·W·C f32; dim holds the channel count
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Reader;
use crate::error::{Error, Result};
use crate::geometry::FeatureMap;
use crate::harness::io::write_atomic;

pub const VECTOR_MAGIC: &[u8; 4] = b"OFV1";
pub const MAP_MAGIC: &[u8; 4] = b"OFM1";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureStoreHeader {
    pub magic: [u8; 4],
    pub version: u32,
    pub count: u32,
    pub dim: u32,
}

impl FeatureStoreHeader {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.magic);
        for v in [self.version, self.count, self.dim] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read(r: &mut Reader<'_>, expected: &[u8; 4]) -> Result<Self> {
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(expected)
            )));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        Ok(Self { magic, version, count: r.u32()?, dim: r.u32()? })
    }
}

/// Identifies the object behind one stored vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordId {
    pub image_id: u64,
    pub annotation_id: u64,
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

pub fn encode_vectors(vectors: &[Vec<f32>], dim: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + vectors.len() * dim * 4);
    FeatureStoreHeader { magic: *VECTOR_MAGIC, version: STORE_VERSION, count: to_u32(vectors.len(), "count")?, dim: to_u32(dim, "dim")? }
        .write(&mut out);
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
        }
        v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    }
    Ok(out)
}

pub fn decode_vectors(bytes: &[u8]) -> Result<(usize, Vec<Vec<f32>>)> {
    let mut r = Reader { bytes, pos: 0 };
    let h = FeatureStoreHeader::read(&mut r, VECTOR_MAGIC)?;
    let dim = h.dim as usize;
    let mut rows = Vec::with_capacity(h.count as usize);
    for _ in 0..h.count {
        rows.push((0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after vector store".into()));
    }
    Ok((dim, rows))
}

/// Writes an `OFV1` store and its id sidecar.
pub fn write_vectors(path: &Path, vectors: &[Vec<f32>], dim: usize, ids: &[RecordId]) -> Result<()> {
    if ids.len() != vectors.len() {
        return Err(Error::DimensionMismatch { expected: vectors.len(), got: ids.len() });
    }
    let bytes = encode_vectors(vectors, dim)?;
    write_atomic(&index_path(path), &serde_json::to_vec(ids)?)?;
    write_atomic(path, &bytes)
}

/// Reads an `OFV1` store; the id sidecar is optional.
pub fn read_vectors(path: &Path) -> Result<(usize, Vec<Vec<f32>>, Option<Vec<RecordId>>)> {
    let (dim, rows) = decode_vectors(&std::fs::read(path)?)?;
    let idx = index_path(path);
    let ids = if idx.exists() {
        let ids: Vec<RecordId> = serde_json::from_slice(&std::fs::read(idx)?)?;
        if ids.len() != rows.len() {
            return Err(Error::Format(format!("index has {} entries for {} vectors", ids.len(), rows.len())));
        }
        Some(ids)
    } else {
        None
    };
    Ok((dim, rows, ids))
}

pub fn encode_maps(maps: &[FeatureMap]) -> Result<Vec<u8>> {
    let channels = maps.first().map_or(0, FeatureMap::channels);
    let mut out = Vec::new();
    FeatureStoreHeader { magic: *MAP_MAGIC, version: STORE_VERSION, count: to_u32(maps.len(), "count")?, dim: to_u32(channels, "dim")? }
        .write(&mut out);
    for m in maps {
        if m.channels() != channels {
            return Err(Error::DimensionMismatch { expected: channels, got: m.channels() });
        }
        for d in [m.height(), m.width(), m.channels()] {
            out.extend_from_slice(&to_u32(d, "map dimension")?.to_le_bytes());
        }
        m.data().iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes()));
    }
    Ok(out)
}

pub fn decode_maps(bytes: &[u8]) -> Result<Vec<FeatureMap>> {
    let mut r = Reader { bytes, pos: 0 };
    let h = FeatureStoreHeader::read(&mut r, MAP_MAGIC)?;
    let mut maps = Vec::with_capacity(h.count as usize);
    for _ in 0..h.count {
        let (hh, ww, cc) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if cc != h.dim as usize {
            return Err(Error::Format(format!("map has {cc} channels, header says {}", h.dim)));
        }
        let n = hh.checked_mul(ww).and_then(|x| x.checked_mul(cc)).ok_or_else(|| Error::Format("map size overflow".into()))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("map size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        maps.push(FeatureMap::new(hh, ww, cc, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after map store".into()));
    }
    Ok(maps)
}

pub fn write_maps(path: &Path, maps: &[FeatureMap]) -> Result<()> {
    write_atomic(path, &encode_maps(maps)?)
}

pub fn read_maps(path: &Path) -> Result<Vec<FeatureMap>> {
    decode_maps(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn vector_round_trip_is_bit_exact() {
        let mut rng = crate::rng::seeded(3);
        let rows: Vec<Vec<f32>> = (0..7).map(|_| (0..5).map(|_| rng.random::<f32>() * 100.0 - 50.0).collect()).collect();
        let (dim, back) = decode_vectors(&encode_vectors(&rows, 5).unwrap()).unwrap();
        assert_eq!(dim, 5);
        let bits = |r: &[Vec<f32>]| r.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&rows));
    }

    #[test]
    fn empty_store() {
        let (dim, rows) = decode_vectors(&encode_vectors(&[], 3).unwrap()).unwrap();
        assert_eq!((dim, rows.len()), (3, 0));
        assert!(decode_maps(&encode_maps(&[]).unwrap()).unwrap().is_empty());
    }

    #[test]
    fn corrupted_magic_and_truncation() {
        let mut bytes = encode_vectors(&[vec![1.0, 2.0]], 2).unwrap();
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_vectors(truncated), Err(Error::Format(m)) if m.contains("truncated")));
        bytes[0] = b'X';
        assert!(matches!(decode_vectors(&bytes), Err(Error::Format(m)) if m.contains("magic")));
        let maps = encode_maps(&[FeatureMap::filled(2, 2, 1, 1.0).unwrap()]).unwrap();
        assert!(decode_vectors(&maps).is_err());
        let mut v2 = encode_vectors(&[], 1).unwrap();
        v2[4] = 2;
        assert!(matches!(decode_vectors(&v2), Err(Error::Format(m)) if m.contains("version")));
    }

    #[test]
    fn map_round_trip() {
        let data: Vec<f64> = (0..24).map(|i| (i as f32 * 0.37) as f64).collect();
        let m = FeatureMap::new(2, 3, 4, data).unwrap();
        let back = decode_maps(&encode_maps(std::slice::from_ref(&m)).unwrap()).unwrap();
        assert_eq!(back, vec![m]);
    }

    #[test]
    fn sidecar_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ofv");
        let ids = [RecordId { image_id: 4, annotation_id: 9 }];
        write_vectors(&p, &[vec![0.5]], 1, &ids).unwrap();
        let (_, rows, back) = read_vectors(&p).unwrap();
        assert_eq!(rows, vec![vec![0.5]]);
        assert_eq!(back.unwrap(), ids);
    }
}
