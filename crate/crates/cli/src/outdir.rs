//! Output directories: exclusive locking and atomic file writes.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::failure::{CmdResult, Context, Failure, Status};

pub const LOCK_NAME: &str = ".voxseg.lock";

/// Exclusive hold on an output directory, released on drop.
#[derive(Debug)]
pub struct OutDir {
    root: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    pub fn lock(root: &Path) -> CmdResult<Self> {
        fs::create_dir_all(root).context(format!("cannot create {}", root.display()))?;
        let lock = root.join(LOCK_NAME);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| {
                Failure::new(
                    Status::Other,
                    format!(
                        "{} is in use by another run ({e}); remove {} if no run is active",
                        root.display(),
                        lock.display()
                    ),
                )
            })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Write through a temporary file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).context(format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).context(format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn to_json_pretty(value: &impl Serialize) -> CmdResult<Vec<u8>> {
    let mut out =
        serde_json::to_vec_pretty(value).map_err(|e| Failure::new(Status::Other, e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    write_atomic(path, &to_json_pretty(value)?)
}

/// One compact JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> CmdResult {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, &row)
            .map_err(|e| Failure::new(Status::Other, e.to_string()))?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}
