//! Content-addressed image directory: every file is named by the SHA-256 of
//! its bytes, so writes are idempotent and references are self-verifying.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::trajectory::{ContentHash, ImageRef};

#[derive(Debug, Clone)]
pub struct ImageStore {
    root: PathBuf,
}

impl ImageStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, hash: &ContentHash) -> PathBuf {
        self.root.join(hash.as_str())
    }

    pub fn put(&self, bytes: &[u8]) -> io::Result<ImageRef> {
        let hash = ContentHash::of(bytes);
        let path = self.path_for(&hash);
        if !path.exists() {
            let tmp = self.root.join(format!(".{}.tmp-{}", hash, std::process::id()));
            {
                let mut f = fs::File::create(&tmp)?;
                f.write_all(bytes)?;
                f.sync_all()?;
            }
            fs::rename(&tmp, &path)?;
        }
        Ok(ImageRef { uri: path.to_string_lossy().into_owned(), content_hash: hash })
    }

    /// Reads the bytes for `hash`, refusing content whose digest differs.
    pub fn get(&self, hash: &ContentHash) -> io::Result<Vec<u8>> {
        let bytes = fs::read(self.path_for(hash))?;
        if ContentHash::of(&bytes) != *hash {
            return Err(io::Error::new(io::ErrorKind::InvalidData, format!("content of {hash} does not match its name")));
        }
        Ok(bytes)
    }

    pub fn contains(&self, hash: &ContentHash) -> bool {
        self.path_for(hash).is_file()
    }
}

/// MIME type from magic bytes.
pub fn sniff_mime(bytes: &[u8]) -> &'static str {
    match bytes {
        [0x89, b'P', b'N', b'G', ..] => "image/png",
        [0xFF, 0xD8, 0xFF, ..] => "image/jpeg",
        [b'R', b'I', b'F', b'F', _, _, _, _, b'W', b'E', b'B', b'P', ..] => "image/webp",
        [b'G', b'I', b'F', b'8', ..] => "image/gif",
        [b'P', b'6', ..] => "image/x-portable-pixmap",
        _ => "application/octet-stream",
    }
}
