use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::Arc;

use ctxkmp::TrainedModel;
use lru::LruCache;
use sha2::{Digest, Sha256};

/// A trained model with its serialized form's content hash.
#[derive(Debug)]
pub struct StoredModel {
    pub id: String,
    pub hash: String,
    pub model: TrainedModel,
}

impl StoredModel {
    pub fn new(id: String, model: TrainedModel) -> Self {
        let hash = content_hash(&model.to_json());
        StoredModel { id, hash, model }
    }
}

pub fn content_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// In-memory LRU of models, optionally backed by a directory of model files.
pub struct ModelStore {
    cache: LruCache<String, Arc<StoredModel>>,
    dir: Option<PathBuf>,
}

impl ModelStore {
    pub fn new(capacity: NonZeroUsize, dir: Option<PathBuf>) -> Self {
        ModelStore { cache: LruCache::new(capacity), dir }
    }

    pub fn insert(&mut self, stored: StoredModel) -> ctxkmp::Result<Arc<StoredModel>> {
        if let Some(dir) = &self.dir {
            std::fs::create_dir_all(dir).map_err(|e| ctxkmp::Error::Io { path: dir.display().to_string(), source: e })?;
            stored.model.save(dir.join(format!("{}.json", stored.id)))?;
        }
        let stored = Arc::new(stored);
        if let Some((evicted, _)) = self.cache.push(stored.id.clone(), stored.clone()) {
            if evicted != stored.id {
                log::info!("evicted model {evicted}");
            }
        }
        Ok(stored)
    }

    /// Looks the id up in memory, then on disk.
    pub fn get(&mut self, id: &str) -> Option<Arc<StoredModel>> {
        if let Some(m) = self.cache.get(id) {
            return Some(m.clone());
        }
        if !valid_id(id) {
            return None;
        }
        let path = self.dir.as_ref()?.join(format!("{id}.json"));
        if !path.exists() {
            return None;
        }
        match TrainedModel::load(&path) {
            Ok(model) => {
                let stored = Arc::new(StoredModel::new(id.to_string(), model));
                self.cache.push(id.to_string(), stored.clone());
                Some(stored)
            }
            Err(e) => {
                log::warn!("cannot reload {}: {e}", path.display());
                None
            }
        }
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}
