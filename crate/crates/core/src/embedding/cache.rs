use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use crate::digest::sha256_fields;

/// Pooled-vector cache keyed by `(provider_id, text digest)`.
///
/// With a directory attached every entry is also written to its own file via
/// write-then-rename, so concurrent writers of the same key are harmless.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, Vec<f32>>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: Some(dir.as_ref().to_path_buf()),
            memory: RwLock::default(),
        })
    }

    pub fn key(provider_id: &str, text: &str) -> String {
        sha256_fields([provider_id.as_bytes(), text.as_bytes()])
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&key[..2]).join(format!("{key}.f32")))
    }

    pub fn get(&self, provider_id: &str, text: &str) -> Option<Vec<f32>> {
        let key = Self::key(provider_id, text);
        if let Some(v) = self.memory.read().expect("poisoned").get(&key) {
            return Some(v.clone());
        }
        let bytes = std::fs::read(self.path_for(&key)?).ok()?;
        if bytes.len() % 4 != 0 {
            return None;
        }
        let v: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.memory.write().expect("poisoned").insert(key, v.clone());
        Some(v)
    }

    pub fn put(&self, provider_id: &str, text: &str, values: &[f32]) {
        let key = Self::key(provider_id, text);
        if let Some(path) = self.path_for(&key) {
            if let Err(e) = write_atomically(&path, values) {
                log::warn!("embedding cache write {} failed: {e}", path.display());
            }
        }
        self.memory.write().expect("poisoned").insert(key, values.to_vec());
    }

    pub fn len(&self) -> usize {
        self.memory.read().expect("poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn write_atomically(path: &Path, values: &[f32]) -> std::io::Result<()> {
    let parent = path.parent().expect("cache paths have a parent");
    std::fs::create_dir_all(parent)?;
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let tmp = parent.join(format!(".{}.{:?}.tmp", std::process::id(), std::thread::current().id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}
