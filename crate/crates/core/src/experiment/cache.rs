//! On-disk cache of prepared descriptors, keyed by a hash of everything that
//! determines them plus the image id.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::store::{self, Tensor};

pub const CACHE_ENV: &str = "TEXFISHER_CACHE";

/// `TEXFISHER_CACHE` wins over the configured directory.
pub fn resolve_cache_dir(configured: Option<&Path>) -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or_else(|| configured.map(Path::to_path_buf))
}

pub fn hash_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug)]
pub struct DescriptorCache {
    dir: PathBuf,
}

impl DescriptorCache {
    pub fn new(root: &Path, key: &str) -> std::io::Result<Self> {
        let dir = root.join(key);
        std::fs::create_dir_all(&dir)?;
        Ok(DescriptorCache { dir })
    }

    fn path(&self, image_id: &str) -> PathBuf {
        let name = hash_hex(&[image_id.as_bytes()]);
        self.dir.join(format!("{}.mlfv", &name[..32]))
    }

    /// Returns `None` on a miss or on an unreadable entry.
    pub fn get(&self, image_id: &str, expected_len: Option<usize>) -> Option<Vec<f64>> {
        let path = self.path(image_id);
        if !path.is_file() {
            return None;
        }
        match store::read_tensor_file(&path) {
            Ok(t) if t.shape().len() == 1 && expected_len.is_none_or(|n| n == t.data().len()) => {
                Some(t.data().iter().map(|&v| v as f64).collect())
            }
            Ok(_) => {
                log::warn!(
                    "ignoring cache entry {} with unexpected shape",
                    path.display()
                );
                None
            }
            Err(e) => {
                log::warn!("ignoring unreadable cache entry: {e}");
                None
            }
        }
    }

    pub fn put(&self, image_id: &str, values: &[f64]) {
        let res = Tensor::from_vector(values)
            .and_then(|t| store::write_tensor_file(&t, &self.path(image_id)));
        if let Err(e) = res {
            log::warn!("failed to write cache entry for {image_id}: {e}");
        }
    }
}
