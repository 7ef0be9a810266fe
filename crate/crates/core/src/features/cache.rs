//! Pooled-representation cache files.
//!
//! Layout, little-endian:
//!
//! | field       | type                       |
//! |-------------|----------------------------|
//! | magic       | `b"JMPR"`                  |
//! | version     | u32 (currently 1)          |
//! | family id   | u32 byte length + UTF-8    |
//! | dims        | u32                        |
//! | dtype       | u32 (0 = f32)              |
//! | payload     | f32 × dims × windows       |
//!
//! The payload holds one vector per analysis window, in window order; the
//! window count follows from the payload length.

use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::Family;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"JMPR";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct CachedFeatures {
    pub family: Family,
    pub dims: usize,
    /// One vector per window, each `dims` long.
    pub windows: Vec<Vec<f32>>,
}

impl CachedFeatures {
    pub fn new(family: Family, windows: Vec<Vec<f64>>) -> Result<Self> {
        let dims = windows.first().map(Vec::len).unwrap_or(0);
        if dims == 0 || windows.iter().any(|w| w.len() != dims) {
            return Err(Error::invalid("cache needs one or more equal-length, non-empty vectors"));
        }
        Ok(Self {
            family,
            dims,
            windows: windows
                .into_iter()
                .map(|w| w.into_iter().map(|v| v as f32).collect())
                .collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id = self.family.to_string();
        let mut out = Vec::with_capacity(24 + id.len() + 4 * self.dims * self.windows.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for w in &self.windows {
            for v in w {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("feature cache", d.to_string());
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let id_len = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let id = r.take(id_len).ok_or_else(|| bad("truncated family id"))?;
        let id = std::str::from_utf8(id).map_err(|_| bad("family id is not UTF-8"))?;
        let family: Family = id.parse()?;
        let dims = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let dtype = r.u32().ok_or_else(|| bad("truncated header"))?;
        if dtype != DTYPE_F32 {
            return Err(bad(&format!("unsupported dtype code {dtype}")));
        }
        let payload = &bytes[r.pos..];
        if dims == 0 || payload.is_empty() || payload.len() % (4 * dims) != 0 {
            return Err(bad("payload length is not a whole number of vectors"));
        }
        let windows = payload
            .chunks_exact(4 * dims)
            .map(|w| {
                w.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect()
            })
            .collect();
        Ok(Self {
            family,
            dims,
            windows,
        })
    }

    pub fn window(&self, i: usize) -> Option<Vec<f64>> {
        self.windows
            .get(i)
            .map(|w| w.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn all_windows(&self) -> Vec<Vec<f64>> {
        (0..self.windows.len()).filter_map(|i| self.window(i)).collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Write via a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_cache(path: &Path, features: &CachedFeatures) -> Result<()> {
    write_atomic(path, &features.to_bytes())
}

pub fn read_cache(path: &Path) -> Result<CachedFeatures> {
    CachedFeatures::from_bytes(&std::fs::read(path)?)
}

/// Short stable hash of any serializable config.
pub fn config_hash<T: serde::Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).unwrap_or_default();
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Cache location keyed by (clip id, family, config hash).
pub fn cache_path(root: &Path, clip_id: &str, family: &Family, config_hash: &str) -> PathBuf {
    root.join(family.to_string())
        .join(config_hash)
        .join(format!("{}.jmpr", sanitize(clip_id)))
}

/// Clip ids become file names; keep them to a portable character set.
pub fn sanitize(clip_id: &str) -> String {
    clip_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let c = CachedFeatures::new(Family::Chroma, vec![vec![1.0; 72]]).unwrap();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"JMPR");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 6);
        assert_eq!(&b[12..18], b"chroma");
        assert_eq!(u32::from_le_bytes(b[18..22].try_into().unwrap()), 72);
        assert_eq!(u32::from_le_bytes(b[22..26].try_into().unwrap()), 0);
        assert_eq!(b.len(), 26 + 72 * 4);
        assert_eq!(f32::from_le_bytes(b[26..30].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_corruption() {
        let c = CachedFeatures::new(Family::Mfcc, vec![vec![0.5; 120]]).unwrap();
        let mut b = c.to_bytes();
        assert!(CachedFeatures::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(CachedFeatures::from_bytes(&b).is_err());
    }

    #[test]
    fn atomic_write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let fam = Family::Calm(vec![2]);
        let p = cache_path(dir.path(), "clip/01", &fam, &config_hash(&("x", 1)));
        assert!(p.ends_with("calm-layer-2/".to_string() + &config_hash(&("x", 1)) + "/clip_01.jmpr"));
        let c = CachedFeatures::new(fam, vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        write_cache(&p, &c).unwrap();
        let back = read_cache(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.window(1), Some(vec![3.0, 4.0]));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            dims in 1usize..16,
            windows in 1usize..4,
            seed in any::<u32>(),
        ) {
            let data: Vec<Vec<f64>> = (0..windows)
                .map(|w| (0..dims).map(|d| ((seed as usize + 31 * w + d) % 97) as f64 * 0.25 - 3.0).collect())
                .collect();
            let c = CachedFeatures::new(Family::Calm(vec![1, 3]), data.clone()).unwrap();
            let back = CachedFeatures::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back.all_windows(), data);
        }
    }
}
