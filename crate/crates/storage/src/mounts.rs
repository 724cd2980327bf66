//! Dataset and workspace mounts.
//!
//! A mount URI is either `local://<name>[/<sub>]`, resolved under the
//! store's mount root, or `file:///<absolute path>`.

use std::fs;
use std::path::{Component, Path, PathBuf};
use std::time::UNIX_EPOCH;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::StorageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MountMode {
    ReadOnly,
    ReadWrite,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MountRef {
    pub uri: String,
    pub mode: MountMode,
}

impl MountRef {
    /// Datasets are always mounted read-only.
    pub fn dataset(uri: impl Into<String>) -> Self {
        Self {
            uri: uri.into(),
            mode: MountMode::ReadOnly,
        }
    }

    /// Workspaces are read-write and shared by every task of a job.
    pub fn workspace(uri: impl Into<String>) -> Self {
        Self {
            uri: uri.into(),
            mode: MountMode::ReadWrite,
        }
    }
}

/// One file in a workspace listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkspaceEntry {
    /// Path relative to the mount root, `/`-separated.
    pub name: String,
    pub size: u64,
    /// Seconds since the Unix epoch.
    pub mtime: u64,
}

/// Resolves mount URIs to local directories.
#[derive(Debug, Clone)]
pub struct MountTable {
    root: PathBuf,
}

fn safe_relative(rel: &str) -> Result<PathBuf, StorageError> {
    let path = Path::new(rel);
    if path.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(StorageError::InvalidPath(rel.to_string()));
    }
    Ok(path.to_path_buf())
}

impl MountTable {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, uri: &str) -> Result<PathBuf, StorageError> {
        if let Some(rest) = uri.strip_prefix("local://") {
            let rest = rest.trim_matches('/');
            if rest.is_empty() {
                return Err(StorageError::InvalidUri(uri.to_string()));
            }
            return Ok(self.root.join(safe_relative(rest)?));
        }
        if let Some(path) = uri.strip_prefix("file://") {
            let path = Path::new(path);
            if !path.is_absolute() {
                return Err(StorageError::InvalidUri(uri.to_string()));
            }
            return Ok(path.to_path_buf());
        }
        Err(StorageError::InvalidUri(uri.to_string()))
    }

    /// Opens a mount. Workspaces under `local://` are created on first use;
    /// everything else must already exist.
    pub fn open(&self, mount: &MountRef) -> Result<Mount, StorageError> {
        let path = self.resolve(&mount.uri)?;
        if !path.is_dir() {
            if mount.mode == MountMode::ReadWrite && mount.uri.starts_with("local://") {
                fs::create_dir_all(&path)?;
            } else {
                return Err(StorageError::NotFound(mount.uri.clone()));
            }
        }
        Ok(Mount {
            uri: mount.uri.clone(),
            path,
            mode: mount.mode,
        })
    }

    /// Sorted listing of the files under a workspace, optionally filtered
    /// by a path prefix.
    pub fn list_workspace(&self, uri: &str, prefix: &str) -> Result<Vec<WorkspaceEntry>, StorageError> {
        let path = self.resolve(uri)?;
        if !path.is_dir() {
            return Err(StorageError::NotFound(uri.to_string()));
        }
        list_dir(&path, prefix)
    }
}

fn list_dir(root: &Path, prefix: &str) -> Result<Vec<WorkspaceEntry>, StorageError> {
    let mut entries = Vec::new();
    for entry in WalkDir::new(root).min_depth(1) {
        let entry = entry.map_err(|e| StorageError::Io(e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let name = entry
            .path()
            .strip_prefix(root)
            .expect("walk stays under root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        if !name.starts_with(prefix) {
            continue;
        }
        let meta = entry.metadata().map_err(|e| StorageError::Io(e.into()))?;
        let mtime = meta
            .modified()
            .ok()
            .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
            .map_or(0, |d| d.as_secs());
        entries.push(WorkspaceEntry {
            name,
            size: meta.len(),
            mtime,
        });
    }
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(entries)
}

/// An opened mount. All writes go through [`Mount::write_file`], which
/// refuses read-only mounts.
#[derive(Debug, Clone)]
pub struct Mount {
    uri: String,
    path: PathBuf,
    mode: MountMode,
}

impl Mount {
    pub fn uri(&self) -> &str {
        &self.uri
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn mode(&self) -> MountMode {
        self.mode
    }

    pub fn write_file(&self, rel: &str, bytes: &[u8]) -> Result<(), StorageError> {
        if self.mode == MountMode::ReadOnly {
            return Err(StorageError::ReadOnlyMount(self.uri.clone()));
        }
        let path = self.path.join(safe_relative(rel)?);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read_file(&self, rel: &str) -> Result<Vec<u8>, StorageError> {
        Ok(fs::read(self.path.join(safe_relative(rel)?))?)
    }

    pub fn list(&self, prefix: &str) -> Result<Vec<WorkspaceEntry>, StorageError> {
        list_dir(&self.path, prefix)
    }

    /// Probes that the mount accepts writes by creating and removing a
    /// scratch file.
    pub fn check_writable(&self) -> Result<(), StorageError> {
        if self.mode == MountMode::ReadOnly {
            return Err(StorageError::ReadOnlyMount(self.uri.clone()));
        }
        let probe = self.path.join(format!(".acm-probe-{}", std::process::id()));
        fs::write(&probe, b"")?;
        fs::remove_file(&probe)?;
        Ok(())
    }

    pub fn check_readable(&self) -> Result<(), StorageError> {
        fs::read_dir(&self.path)?;
        Ok(())
    }

    /// Copies the mount's contents to `dest` and marks the copy read-only.
    /// Used to hand datasets to local processes without exposing the source.
    pub fn materialize_read_only(&self, dest: &Path) -> Result<(), StorageError> {
        for entry in WalkDir::new(&self.path).min_depth(1) {
            let entry = entry.map_err(|e| StorageError::Io(e.into()))?;
            let rel = entry.path().strip_prefix(&self.path).expect("under root");
            let target = dest.join(rel);
            if entry.file_type().is_dir() {
                fs::create_dir_all(&target)?;
            } else if entry.file_type().is_file() {
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::copy(entry.path(), &target)?;
                set_read_only(&target)?;
            }
        }
        fs::create_dir_all(dest)?;
        Ok(())
    }
}

fn set_read_only(path: &Path) -> std::io::Result<()> {
    let mut perms = fs::metadata(path)?.permissions();
    perms.set_readonly(true);
    fs::set_permissions(path, perms)
}
