//! File-tree helpers: filtered copies and content hashes.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{Error, Result};

/// Directory names never copied or hashed.
pub const IGNORED_DIRS: &[&str] = &[".git", "__pycache__", ".pytest_cache", ".flycatcher"];

fn ignored(entry: &walkdir::DirEntry) -> bool {
    entry.depth() > 0
        && entry.file_type().is_dir()
        && IGNORED_DIRS.iter().any(|d| entry.file_name() == *d)
}

/// Relative paths of all files under `root`, sorted, ignored dirs skipped.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).into_iter().filter_entry(|e| !ignored(e)) {
        let entry = entry.map_err(|e| Error::Internal(format!("walking {}: {e}", root.display())))?;
        if entry.file_type().is_file() {
            files.push(entry.path().strip_prefix(root).unwrap_or(entry.path()).to_path_buf());
        }
    }
    files.sort();
    Ok(files)
}

/// Copies `src` into `dst` (created if needed), skipping ignored dirs and
/// any top-level entry named in `skip`.
pub fn copy_tree(src: &Path, dst: &Path, skip: &[&Path]) -> Result<()> {
    std::fs::create_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    for rel in list_files(src)? {
        if skip.iter().any(|s| rel.starts_with(s)) {
            continue;
        }
        let to = dst.join(&rel);
        if let Some(parent) = to.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::copy(src.join(&rel), &to).map_err(|e| Error::io(&to, e))?;
    }
    Ok(())
}

/// SHA-256 over sorted relative paths and file contents.
pub fn tree_hash(root: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for rel in list_files(root)? {
        let bytes = std::fs::read(root.join(&rel)).map_err(|e| Error::io(root.join(&rel), e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// True when `dir` is missing or an empty directory.
pub fn is_empty_dir(dir: &Path) -> bool {
    match std::fs::read_dir(dir) {
        Ok(mut entries) => entries.next().is_none(),
        Err(_) => !dir.exists(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_preserves_hash_and_skips_caches() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        crate::error::write(&a.path().join("src/m.py"), "x = 1\n").unwrap();
        crate::error::write(&a.path().join("src/__pycache__/m.pyc"), "junk").unwrap();
        crate::error::write(&a.path().join("out/skip.py"), "y").unwrap();
        copy_tree(a.path(), b.path(), &[Path::new("out")]).unwrap();
        assert!(b.path().join("src/m.py").is_file());
        assert!(!b.path().join("src/__pycache__").exists());
        assert!(!b.path().join("out").exists());
        std::fs::remove_dir_all(a.path().join("out")).unwrap();
        assert_eq!(tree_hash(a.path()).unwrap(), tree_hash(b.path()).unwrap());
        std::fs::write(b.path().join("src/m.py"), "x = 2\n").unwrap();
        assert_ne!(tree_hash(a.path()).unwrap(), tree_hash(b.path()).unwrap());
    }
}
