//! Storage for the control plane: uploaded code, dataset/workspace mounts,
//! per-task logs and the structured event log.
//!
//! One local-filesystem store stands in for both object storage (code) and
//! a shared filesystem (mounts); the two stay behind separate types so either
//! can be swapped for a real backend.

pub mod archive;
pub mod code;
pub mod logs;
pub mod mounts;

use thiserror::Error;

pub use archive::{archive_dir, archive_path, extract_archive};
pub use code::{digest_of, CodeRef, CodeStore, DEFAULT_MAX_ARCHIVE_BYTES};
pub use logs::{LogCursor, LogStore, RecordLog};
pub use mounts::{Mount, MountMode, MountRef, MountTable, WorkspaceEntry};

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("archive is empty")]
    EmptyArchive,
    #[error("archive is {size} bytes, over the {limit} byte limit")]
    TooLarge { size: u64, limit: u64 },
    #[error("{0} not found")]
    NotFound(String),
    #[error("stored object {0} does not match its digest")]
    Integrity(String),
    #[error("mount {0} is read-only")]
    ReadOnlyMount(String),
    #[error("unsupported mount uri {0:?}")]
    InvalidUri(String),
    #[error("invalid path {0:?}")]
    InvalidPath(String),
    #[error("unknown log stream {0}")]
    UnknownStream(String),
    #[error("encoding failed: {0}")]
    Encode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
