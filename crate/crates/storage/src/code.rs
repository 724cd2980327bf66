//! Content-addressed store for uploaded code archives.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use acm_core::CodeDigest;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::StorageError;

/// Default upload cap: 256 MiB.
pub const DEFAULT_MAX_ARCHIVE_BYTES: u64 = 256 << 20;

/// Handle to a stored archive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeRef {
    pub digest: CodeDigest,
    #[serde(rename = "size")]
    pub size_bytes: u64,
}

/// SHA-256 over exactly the bytes that are stored, compressed or not.
pub fn digest_of(bytes: &[u8]) -> CodeDigest {
    hex::encode(Sha256::digest(bytes))
        .parse()
        .expect("sha256 hex is a valid digest")
}

enum Backing {
    Memory(RwLock<HashMap<CodeDigest, Vec<u8>>>),
    Dir(PathBuf),
}

pub struct CodeStore {
    backing: Backing,
    max_bytes: u64,
}

impl CodeStore {
    pub fn in_memory(max_bytes: u64) -> Self {
        Self {
            backing: Backing::Memory(RwLock::new(HashMap::new())),
            max_bytes,
        }
    }

    /// A store rooted at `dir`, one file per archive under `objects/`.
    pub fn open(dir: impl AsRef<Path>, max_bytes: u64) -> Result<Self, StorageError> {
        let root = dir.as_ref().join("objects");
        fs::create_dir_all(&root)?;
        Ok(Self {
            backing: Backing::Dir(root),
            max_bytes,
        })
    }

    pub fn max_bytes(&self) -> u64 {
        self.max_bytes
    }

    /// Stores `archive` under its digest. Storing the same bytes twice keeps
    /// one copy and returns the same ref.
    pub fn put_code(&self, archive: &[u8]) -> Result<CodeRef, StorageError> {
        if archive.is_empty() {
            return Err(StorageError::EmptyArchive);
        }
        let size_bytes = archive.len() as u64;
        if size_bytes > self.max_bytes {
            return Err(StorageError::TooLarge {
                size: size_bytes,
                limit: self.max_bytes,
            });
        }
        let digest = digest_of(archive);
        match &self.backing {
            Backing::Memory(map) => {
                map.write().entry(digest.clone()).or_insert_with(|| archive.to_vec());
            }
            Backing::Dir(root) => {
                let path = root.join(digest.as_str());
                if !path.exists() {
                    // Write to a unique temp name, then rename into place.
                    let mut tmp = tempfile_in(root)?;
                    tmp.1.write_all(archive)?;
                    tmp.1.sync_all()?;
                    drop(tmp.1);
                    fs::rename(&tmp.0, &path)?;
                }
            }
        }
        Ok(CodeRef { digest, size_bytes })
    }

    /// Returns the archive, verified against its digest.
    pub fn get_code(&self, digest: &CodeDigest) -> Result<Vec<u8>, StorageError> {
        let bytes = match &self.backing {
            Backing::Memory(map) => map
                .read()
                .get(digest)
                .cloned()
                .ok_or_else(|| StorageError::NotFound(digest.to_string()))?,
            Backing::Dir(root) => match fs::read(root.join(digest.as_str())) {
                Ok(bytes) => bytes,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Err(StorageError::NotFound(digest.to_string()))
                }
                Err(e) => return Err(e.into()),
            },
        };
        if digest_of(&bytes) != *digest {
            return Err(StorageError::Integrity(digest.to_string()));
        }
        Ok(bytes)
    }

    pub fn contains(&self, digest: &CodeDigest) -> bool {
        match &self.backing {
            Backing::Memory(map) => map.read().contains_key(digest),
            Backing::Dir(root) => root.join(digest.as_str()).is_file(),
        }
    }

    /// Number of stored archives.
    pub fn len(&self) -> usize {
        match &self.backing {
            Backing::Memory(map) => map.read().len(),
            Backing::Dir(root) => fs::read_dir(root)
                .map(|entries| {
                    entries
                        .filter_map(Result::ok)
                        .filter(|e| !e.file_name().to_string_lossy().starts_with('.'))
                        .count()
                })
                .unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Path of the stored object, for stores backed by a directory.
    pub fn object_path(&self, digest: &CodeDigest) -> Option<PathBuf> {
        match &self.backing {
            Backing::Memory(_) => None,
            Backing::Dir(root) => Some(root.join(digest.as_str())),
        }
    }

    /// Test hook: replace the stored bytes without updating the digest.
    #[doc(hidden)]
    pub fn corrupt_for_test(&self, digest: &CodeDigest, bytes: Vec<u8>) -> Result<(), StorageError> {
        match &self.backing {
            Backing::Memory(map) => {
                map.write().insert(digest.clone(), bytes);
            }
            Backing::Dir(root) => fs::write(root.join(digest.as_str()), bytes)?,
        }
        Ok(())
    }
}

fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, fs::File)> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    loop {
        let n = COUNTER.fetch_add(1, Ordering::Relaxed);
        let path = dir.join(format!(".tmp-{}-{n}", std::process::id()));
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => return Ok((path, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
}
