//! Cached embedding matrix: a little-endian `f32` blob, row-major
//! `[count x d]`, plus a JSON sidecar manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("embedding cache blob has {got} bytes, manifest implies {want}")]
    Truncated { got: usize, want: usize },
    #[error("embedding cache manifest mismatch: {0}")]
    Mismatch(String),
    #[error("embedding cache manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub encoder_seed: u64,
    #[serde(rename = "V")]
    pub vocab_size: usize,
    pub n: usize,
    pub d: usize,
    pub count: usize,
    pub corpus_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub manifest: CacheManifest,
    values: Vec<f32>,
}

impl EmbeddingCache {
    pub fn new(manifest: CacheManifest, values: Vec<f32>) -> Result<Self, CacheError> {
        let want = manifest.count * manifest.d;
        if values.len() != want {
            return Err(CacheError::Truncated {
                got: values.len() * 4,
                want: want * 4,
            });
        }
        Ok(Self { manifest, values })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.manifest.d;
        &self.values[i * d..(i + 1) * d]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn blob_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, blob: &Path, manifest: &Path) -> Result<(), CacheError> {
        std::fs::write(blob, self.blob_bytes())?;
        std::fs::write(manifest, serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(blob: &Path, manifest: &Path) -> Result<Self, CacheError> {
        let manifest: CacheManifest = serde_json::from_slice(&std::fs::read(manifest)?)?;
        let bytes = std::fs::read(blob)?;
        let want = manifest.count * manifest.d * 4;
        if bytes.len() != want {
            return Err(CacheError::Truncated {
                got: bytes.len(),
                want,
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(manifest, values)
    }

    /// Refuses caches built from a different corpus file.
    pub fn check_corpus(&self, corpus_hash: &str, count: usize) -> Result<(), CacheError> {
        if self.manifest.corpus_hash != corpus_hash {
            return Err(CacheError::Mismatch(format!(
                "cache built for corpus {} but corpus hashes to {}",
                self.manifest.corpus_hash, corpus_hash
            )));
        }
        if self.manifest.count != count {
            return Err(CacheError::Mismatch(format!(
                "cache has {} rows, corpus has {count} sequences",
                self.manifest.count
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> CacheManifest {
        CacheManifest {
            encoder_seed: 9,
            vocab_size: 64,
            n: 8,
            d: 2,
            count: 3,
            corpus_hash: "abc".into(),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(manifest(), vec![1.0, -2.0, 0.5, 0.25, 3.0, 4.0]).unwrap();
        let (b, m) = (dir.path().join("e.bin"), dir.path().join("e.json"));
        cache.save(&b, &m).unwrap();
        assert_eq!(EmbeddingCache::load(&b, &m).unwrap(), cache);
        let json = std::fs::read_to_string(&m).unwrap();
        assert!(json.contains("\"V\": 64"));
        assert_eq!(std::fs::read(&b).unwrap().len(), 24);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(manifest(), vec![0.0; 6]).unwrap();
        let (b, m) = (dir.path().join("e.bin"), dir.path().join("e.json"));
        cache.save(&b, &m).unwrap();
        std::fs::write(&b, [0u8; 20]).unwrap();
        assert!(matches!(EmbeddingCache::load(&b, &m), Err(CacheError::Truncated { got: 20, .. })));
    }

    #[test]
    fn corpus_hash_checked() {
        let cache = EmbeddingCache::new(manifest(), vec![0.0; 6]).unwrap();
        assert!(cache.check_corpus("abc", 3).is_ok());
        assert!(cache.check_corpus("abd", 3).is_err());
        assert!(cache.check_corpus("abc", 4).is_err());
    }
}
