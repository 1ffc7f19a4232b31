use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trial::{CheckpointRef, Trial, TrialId};

pub const DEFAULT_KEEP_LAST: usize = 2;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint file {0} is missing")]
    MissingFile(PathBuf),
    #[error("checkpoint file {path} does not match its recorded digest")]
    DigestMismatch { path: PathBuf },
    #[error("checkpoint save for trial {0} timed out")]
    SaveTimeout(TrialId),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String, CheckpointError> {
    match fs::read(path) {
        Ok(bytes) => Ok(digest_bytes(&bytes)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            Err(CheckpointError::MissingFile(path.to_path_buf()))
        }
        Err(e) => Err(e.into()),
    }
}

/// Lays out checkpoint files under `<root>/<trial>/` and enforces retention.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    root: PathBuf,
    keep_last: usize,
}

impl CheckpointStore {
    pub fn new(root: impl Into<PathBuf>, keep_last: usize) -> Self {
        Self {
            root: root.into(),
            keep_last: keep_last.max(1),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn keep_last(&self) -> usize {
        self.keep_last
    }

    /// Absolute path the worker should write the next checkpoint of `trial` to.
    pub fn path_for(&self, trial: &TrialId, step: u64) -> Result<PathBuf, CheckpointError> {
        let dir = self.root.join(trial.as_str());
        fs::create_dir_all(&dir)?;
        let dir = dir.canonicalize()?;
        Ok(dir.join(format!("step_{step:06}.ckpt")))
    }

    /// Records a file the worker reported as saved and drops references beyond
    /// `keep_last`. The dropped files are returned rather than deleted so the
    /// caller can keep them until no snapshot refers to them; see [`Self::discard`].
    pub fn register(
        &self,
        trial: &mut Trial,
        step: u64,
        worker_step: u64,
        path: PathBuf,
    ) -> Result<(CheckpointRef, Vec<PathBuf>), CheckpointError> {
        let digest = digest_file(&path)?;
        let ckpt = CheckpointRef {
            trial: trial.id.clone(),
            step,
            worker_step,
            path,
            digest,
        };
        trial.checkpoints.retain(|c| c.path != ckpt.path);
        trial.checkpoints.push(ckpt.clone());
        let excess = trial.checkpoints.len().saturating_sub(self.keep_last);
        let evicted = trial.checkpoints.drain(..excess).map(|c| c.path).collect();
        Ok((ckpt, evicted))
    }

    /// Deletes checkpoint files, ignoring ones already gone.
    pub fn discard(&self, paths: impl IntoIterator<Item = PathBuf>) -> Result<(), CheckpointError> {
        for path in paths {
            if let Err(e) = fs::remove_file(&path) {
                if e.kind() != io::ErrorKind::NotFound {
                    return Err(e.into());
                }
            }
        }
        Ok(())
    }

    /// Checks that the file exists and still matches its digest.
    pub fn verify(&self, ckpt: &CheckpointRef) -> Result<(), CheckpointError> {
        if digest_file(&ckpt.path)? != ckpt.digest {
            return Err(CheckpointError::DigestMismatch {
                path: ckpt.path.clone(),
            });
        }
        Ok(())
    }

    /// Verifies `ckpt` and copies it into `into`'s directory, so a clone survives
    /// the source trial's retention.
    pub fn stage_clone(&self, ckpt: &CheckpointRef, into: &TrialId) -> Result<PathBuf, CheckpointError> {
        self.verify(ckpt)?;
        let dir = self.root.join(into.as_str());
        fs::create_dir_all(&dir)?;
        let dest = dir
            .canonicalize()?
            .join(format!("clone_{}_step_{:06}.ckpt", ckpt.trial, ckpt.step));
        fs::copy(&ckpt.path, &dest)?;
        Ok(dest)
    }
}
