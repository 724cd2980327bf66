//! Deterministic code archives.
//!
//! Archives are gzip-compressed tar. Entries are sorted by path and carry
//! normalized metadata (mtime 0, uid/gid 0, mode 0644 or 0755), so the same
//! directory content yields the same bytes, and therefore the same digest,
//! on any machine.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::{Compression, GzBuilder};
use walkdir::WalkDir;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

fn header(path: &str, size: u64, mode: u32, kind: tar::EntryType) -> io::Result<tar::Header> {
    let mut h = tar::Header::new_ustar();
    h.set_path(path)?;
    h.set_size(size);
    h.set_mode(mode);
    h.set_mtime(0);
    h.set_uid(0);
    h.set_gid(0);
    h.set_entry_type(kind);
    h.set_cksum();
    Ok(h)
}

#[cfg(unix)]
fn is_executable(meta: &fs::Metadata) -> bool {
    use std::os::unix::fs::PermissionsExt;
    meta.permissions().mode() & 0o111 != 0
}

#[cfg(not(unix))]
fn is_executable(_meta: &fs::Metadata) -> bool {
    false
}

/// Builds a deterministic gzip'd tar of everything under `dir`.
pub fn archive_dir(dir: &Path) -> io::Result<Vec<u8>> {
    let gz = GzBuilder::new()
        .mtime(0)
        .operating_system(255)
        .write(Vec::new(), Compression::new(6));
    let mut builder = tar::Builder::new(gz);
    for entry in WalkDir::new(dir).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(io::Error::other)?;
        let rel = entry
            .path()
            .strip_prefix(dir)
            .map_err(io::Error::other)?
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        let meta = fs::symlink_metadata(entry.path())?;
        let ft = meta.file_type();
        if ft.is_dir() {
            let h = header(&format!("{rel}/"), 0, 0o755, tar::EntryType::Directory)?;
            builder.append(&h, io::empty())?;
        } else if ft.is_file() {
            let mode = if is_executable(&meta) { 0o755 } else { 0o644 };
            let h = header(&rel, meta.len(), mode, tar::EntryType::Regular)?;
            builder.append(&h, fs::File::open(entry.path())?)?;
        } else if ft.is_symlink() {
            let target = fs::read_link(entry.path())?;
            let mut h = header(&rel, 0, 0o777, tar::EntryType::Symlink)?;
            h.set_link_name(&target)?;
            h.set_cksum();
            builder.append(&h, io::empty())?;
        }
    }
    let gz: GzEncoder<Vec<u8>> = builder.into_inner()?;
    gz.finish()
}

/// Archive bytes for `path`: a directory is archived, a file is read as-is
/// (it is expected to already be a tar or tar.gz).
pub fn archive_path(path: &Path) -> io::Result<Vec<u8>> {
    if path.is_dir() {
        archive_dir(path)
    } else {
        fs::read(path)
    }
}

pub fn is_gzip(bytes: &[u8]) -> bool {
    bytes.starts_with(&GZIP_MAGIC)
}

/// Unpacks a tar or tar.gz archive into `dest`. Entries that would escape
/// `dest` are rejected by the tar reader.
pub fn extract_archive(bytes: &[u8], dest: &Path) -> io::Result<()> {
    fs::create_dir_all(dest)?;
    let reader: Box<dyn Read + '_> = if is_gzip(bytes) {
        Box::new(GzDecoder::new(bytes))
    } else {
        Box::new(bytes)
    };
    let mut archive = tar::Archive::new(reader);
    archive.set_preserve_mtime(false);
    archive.unpack(dest)
}

/// Writes `files` (path, contents) into a fresh deterministic archive,
/// without touching the filesystem.
pub fn archive_files<'a>(files: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> io::Result<Vec<u8>> {
    let mut files: Vec<_> = files.into_iter().collect();
    files.sort_by(|a, b| a.0.cmp(b.0));
    let gz = GzBuilder::new()
        .mtime(0)
        .operating_system(255)
        .write(Vec::new(), Compression::new(6));
    let mut builder = tar::Builder::new(gz);
    for (path, contents) in files {
        let h = header(path, contents.len() as u64, 0o644, tar::EntryType::Regular)?;
        builder.append(&h, contents)?;
    }
    builder.into_inner()?.finish()
}
