use std::fs;
use std::io::{self, Write};
use std::path::{Component, Path};

use tempfile::NamedTempFile;

/// Writes `bytes` to `path` through a sibling temp file and a rename, so
/// readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent)?;
    let mut tmp = NamedTempFile::new_in(parent)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Removes empty directories from `start` upwards, stopping at `root`.
pub fn prune_empty_dirs(root: &Path, start: &Path) {
    let mut dir = start.to_path_buf();
    while dir != root && dir.starts_with(root) {
        if fs::remove_dir(&dir).is_err() {
            break;
        }
        if !dir.pop() {
            break;
        }
    }
}

/// Converts a slash-separated relative path into a filesystem path below
/// `root`, refusing anything that would escape it.
pub fn join_relative(root: &Path, rel: &str) -> Option<std::path::PathBuf> {
    let candidate = Path::new(rel);
    if !candidate.components().all(|c| matches!(c, Component::Normal(_))) {
        return None;
    }
    Some(root.join(candidate))
}
