//! Line-atomic JSONL reading and appending with torn-tail recovery.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use tracing::warn;

use super::StoreError;

pub(crate) struct Loaded<T> {
    pub records: Vec<T>,
    /// Where an unterminated, unparseable final line was moved, if any.
    pub quarantined: Option<PathBuf>,
}

pub fn quarantine_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".quarantine");
    path.with_file_name(name)
}

/// Reads every line of `path`. A missing file reads as empty.
///
/// A final line without a trailing newline that fails to parse is the
/// signature of an interrupted append: its bytes go to `<path>.quarantine`
/// and the file is truncated to the last complete record. Any other bad
/// line is corruption and fails the load.
pub(crate) fn load<T: DeserializeOwned>(path: &Path) -> Result<Loaded<T>, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Loaded { records: Vec::new(), quarantined: None }),
        Err(e) => return Err(StoreError::io(path, e)),
    };

    let mut records = Vec::new();
    let mut start = 0usize;
    let mut line_no = 0usize;
    while start < bytes.len() {
        line_no += 1;
        let (end, terminated) = match bytes[start..].iter().position(|&b| b == b'\n') {
            Some(off) => (start + off, true),
            None => (bytes.len(), false),
        };
        let line = &bytes[start..end];
        if line.iter().all(u8::is_ascii_whitespace) {
            start = end + 1;
            continue;
        }
        match serde_json::from_slice::<T>(line) {
            Ok(rec) => {
                records.push(rec);
                if !terminated {
                    // Complete record missing only its newline.
                    append_raw(path, b"\n")?;
                }
            }
            Err(e) if !terminated => {
                let q = quarantine_path(path);
                warn!(path = %path.display(), line = line_no, error = %e, "quarantining torn final line");
                append_raw(&q, line)?;
                append_raw(&q, b"\n")?;
                let f = OpenOptions::new().write(true).open(path).map_err(|e| StoreError::io(path, e))?;
                f.set_len(start as u64).map_err(|e| StoreError::io(path, e))?;
                f.sync_all().map_err(|e| StoreError::io(path, e))?;
                return Ok(Loaded { records, quarantined: Some(q) });
            }
            Err(e) => {
                return Err(StoreError::Corrupt { path: path.to_path_buf(), line: line_no, message: e.to_string() })
            }
        }
        start = end + 1;
    }
    Ok(Loaded { records, quarantined: None })
}

/// Appends one record as a single write of `json + "\n"`.
pub(crate) fn append<T: Serialize>(path: &Path, record: &T) -> Result<(), StoreError> {
    let mut line = serde_json::to_vec(record).map_err(|e| StoreError::Serialize(e.to_string()))?;
    line.push(b'\n');
    append_raw(path, &line)
}

fn append_raw(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| StoreError::io(path, e))?;
    f.write_all(bytes).map_err(|e| StoreError::io(path, e))?;
    f.sync_data().map_err(|e| StoreError::io(path, e))
}

/// Writes all records to `path` through a temporary file and a rename.
pub(crate) fn write_all<T: Serialize>(path: &Path, records: &[T]) -> Result<(), StoreError> {
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).map_err(|e| StoreError::Serialize(e.to_string()))?;
            buf.push(b'\n');
        }
        f.write_all(&buf).map_err(|e| StoreError::io(&tmp, e))?;
        f.sync_all().map_err(|e| StoreError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
}
