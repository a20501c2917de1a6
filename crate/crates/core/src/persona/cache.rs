//! Content-addressed on-disk cache. Entries live at
//! `<root>/<namespace>/<key[..2]>/<key>.<ext>` and are written atomically.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::diffkit::checkpoint::write_atomic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Cache {
    root: PathBuf,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// SHA-256 over the parts, each prefixed by its byte length.
    pub fn key(parts: &[&str]) -> String {
        let mut h = Sha256::new();
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn path(&self, namespace: &str, key: &str, ext: &str) -> PathBuf {
        self.root.join(namespace).join(&key[..2]).join(format!("{key}.{ext}"))
    }

    pub fn get_text(&self, namespace: &str, key: &str) -> Result<Option<String>> {
        match std::fs::read_to_string(self.path(namespace, key, "json")) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn put_text(&self, namespace: &str, key: &str, text: &str) -> Result<()> {
        write_atomic(&self.path(namespace, key, "json"), text.as_bytes())
    }

    /// Vectors are stored as raw little-endian `f64`.
    pub fn get_vector(&self, namespace: &str, key: &str) -> Result<Option<Vec<f64>>> {
        let bytes = match std::fs::read(self.path(namespace, key, "f64")) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint(format!("cache entry {key} is truncated")));
        }
        Ok(Some(
            bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        ))
    }

    pub fn put_vector(&self, namespace: &str, key: &str, v: &[f64]) -> Result<()> {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        write_atomic(&self.path(namespace, key, "f64"), &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_separate_part_boundaries() {
        assert_ne!(Cache::key(&["ab", "c"]), Cache::key(&["a", "bc"]));
        assert_eq!(Cache::key(&["x"]).len(), 64);
    }

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = Cache::new(dir.path());
        let k = Cache::key(&["v"]);
        assert_eq!(c.get_vector("emb", &k).unwrap(), None);
        let v = vec![0.1, -2.5e-300, 3.0];
        c.put_vector("emb", &k, &v).unwrap();
        assert_eq!(c.get_vector("emb", &k).unwrap().unwrap(), v);
        c.put_text("txt", &k, "{}").unwrap();
        assert_eq!(c.get_text("txt", &k).unwrap().as_deref(), Some("{}"));
    }
}
