//! Run directories: new runs are built in a hidden staging directory and
//! renamed into place on success; a lock file keeps concurrent processes
//! apart.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use tham_core::{Error, Result};

const LOCK: &str = ".lock";

pub struct RunGuard {
    final_dir: PathBuf,
    work: PathBuf,
    in_place: bool,
    committed: bool,
}

fn lock(dir: &Path) -> Result<()> {
    let path = dir.join(LOCK);
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&path)
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Integrity(format!("{} is locked by another run", dir.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
    writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))
}

impl RunGuard {
    /// Without `resume` the run directory must not exist yet; with it, an
    /// existing directory is continued in place.
    pub fn open(root: &Path, run_id: &str, resume: bool) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let final_dir = root.join(run_id);
        if resume && final_dir.is_dir() {
            lock(&final_dir)?;
            return Ok(Self {
                work: final_dir.clone(),
                final_dir,
                in_place: true,
                committed: false,
            });
        }
        if final_dir.exists() {
            return Err(Error::arg(format!(
                "{} already exists; choose another --run-id or pass --resume",
                final_dir.display()
            )));
        }
        let work = root.join(format!(".{run_id}.partial"));
        fs::create_dir(&work).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Integrity(format!("run `{run_id}` is in progress elsewhere ({})", work.display()))
            } else {
                Error::io(&work, e)
            }
        })?;
        lock(&work)?;
        Ok(Self {
            final_dir,
            work,
            in_place: false,
            committed: false,
        })
    }

    pub fn work_dir(&self) -> &Path {
        &self.work
    }

    /// Where `path` inside the work directory will live once committed.
    pub fn published(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.work).map_or_else(|_| path.to_path_buf(), |rel| self.final_dir.join(rel))
    }

    /// Publishes the run and returns its directory.
    pub fn commit(mut self) -> Result<PathBuf> {
        let lock = self.work.join(LOCK);
        fs::remove_file(&lock).map_err(|e| Error::io(&lock, e))?;
        if !self.in_place {
            fs::rename(&self.work, &self.final_dir).map_err(|e| Error::io(&self.final_dir, e))?;
        }
        self.committed = true;
        Ok(self.final_dir.clone())
    }
}

impl Drop for RunGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        if self.in_place {
            let _ = fs::remove_file(self.work.join(LOCK));
            return;
        }
        // keep divergence dumps beside the would-be run directory
        if let Ok(entries) = fs::read_dir(&self.work) {
            for e in entries.flatten() {
                let name = e.file_name().to_string_lossy().into_owned();
                if name.starts_with("divergence_") {
                    let id = self.final_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    let _ = fs::rename(e.path(), self.final_dir.with_file_name(format!("{id}.{name}")));
                }
            }
        }
        let _ = fs::remove_dir_all(&self.work);
    }
}
