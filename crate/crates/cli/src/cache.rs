//! Content-addressed stage cache.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

/// Hex SHA-256 over length-prefixed parts, so part boundaries matter.
pub fn stage_key(stage: &str, parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    h.update((stage.len() as u64).to_le_bytes());
    h.update(stage.as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stage outputs stored under `root/<stage>/<key>/`.
#[derive(Debug, Clone)]
pub struct StageCache {
    root: PathBuf,
}

impl StageCache {
    pub fn new(root: impl Into<PathBuf>) -> StageCache {
        StageCache { root: root.into() }
    }

    fn entry(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(stage).join(key)
    }

    /// Copies a complete cached entry into `dest`; `false` on a miss.
    pub fn fetch(&self, stage: &str, key: &str, dest: &Path, files: &[&str]) -> io::Result<bool> {
        let entry = self.entry(stage, key);
        if !files.iter().all(|f| entry.join(f).is_file()) {
            return Ok(false);
        }
        fs::create_dir_all(dest)?;
        for f in files {
            fs::copy(entry.join(f), dest.join(f))?;
        }
        Ok(true)
    }

    /// Stores `files` from `src`. The entry is assembled in a scratch
    /// directory and renamed into place so readers never see half of it.
    pub fn store(&self, stage: &str, key: &str, src: &Path, files: &[&str]) -> io::Result<()> {
        let entry = self.entry(stage, key);
        if entry.is_dir() {
            return Ok(());
        }
        let scratch = self.root.join(stage).join(format!(".{key}.partial"));
        if scratch.exists() {
            fs::remove_dir_all(&scratch)?;
        }
        fs::create_dir_all(&scratch)?;
        for f in files {
            fs::copy(src.join(f), scratch.join(f))?;
        }
        match fs::rename(&scratch, &entry) {
            Ok(()) => Ok(()),
            // another writer got there first with identical content
            Err(_) if entry.is_dir() => fs::remove_dir_all(&scratch),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_depend_on_part_boundaries() {
        assert_ne!(stage_key("s", &[b"ab", b"c"]), stage_key("s", &[b"a", b"bc"]));
        assert_eq!(stage_key("s", &[b"x"]), stage_key("s", &[b"x"]));
        assert_eq!(stage_key("s", &[b"x"]).len(), 64);
    }

    #[test]
    fn store_then_fetch() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        fs::create_dir_all(&src).unwrap();
        fs::write(src.join("a.txt"), b"hello").unwrap();
        let cache = StageCache::new(tmp.path().join("cache"));
        let dest = tmp.path().join("dest");
        assert!(!cache.fetch("st", "k", &dest, &["a.txt"]).unwrap());
        cache.store("st", "k", &src, &["a.txt"]).unwrap();
        assert!(cache.fetch("st", "k", &dest, &["a.txt"]).unwrap());
        assert_eq!(fs::read(dest.join("a.txt")).unwrap(), b"hello");
    }
}
