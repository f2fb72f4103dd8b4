//! Byte-valued key/value caches shared by the search, evaluation and service
//! layers. Keys are namespaced so one store can back several caches.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

pub trait KvStore: Send + Sync {
    fn get(&self, namespace: &str, key: &str) -> io::Result<Option<Vec<u8>>>;
    fn put(&self, namespace: &str, key: &str, value: &[u8]) -> io::Result<()>;
}

#[derive(Default)]
pub struct MemoryStore {
    inner: Mutex<HashMap<(String, String), Vec<u8>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl KvStore for MemoryStore {
    fn get(&self, namespace: &str, key: &str) -> io::Result<Option<Vec<u8>>> {
        let map = self.inner.lock().unwrap();
        Ok(map.get(&(namespace.to_string(), key.to_string())).cloned())
    }

    fn put(&self, namespace: &str, key: &str, value: &[u8]) -> io::Result<()> {
        let mut map = self.inner.lock().unwrap();
        map.insert((namespace.to_string(), key.to_string()), value.to_vec());
        Ok(())
    }
}

/// One file per entry under `<root>/<namespace>/`. File names are the SHA-256
/// of the key, so arbitrary identifiers are safe on any filesystem.
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, namespace: &str, key: &str) -> PathBuf {
        self.root.join(namespace).join(sha256_hex(key.as_bytes()))
    }
}

impl KvStore for DirStore {
    fn get(&self, namespace: &str, key: &str) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.path_for(namespace, key)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn put(&self, namespace: &str, key: &str, value: &[u8]) -> io::Result<()> {
        let path = self.path_for(namespace, key);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        // Write-then-rename so concurrent readers never see a torn file.
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, value)?;
        fs::rename(tmp, path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
