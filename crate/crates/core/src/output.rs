//! An output directory that refuses to overwrite unless told to.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct OutputDir {
    dir: PathBuf,
    force: bool,
}

impl OutputDir {
    pub fn new(dir: impl Into<PathBuf>, force: bool) -> Self {
        OutputDir { dir: dir.into(), force }
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Fail before any work if one of `names` already exists and `force` is off.
    pub fn claim(&self, names: &[&str]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        let taken: Vec<String> =
            names.iter().filter(|n| self.file(n).exists()).map(|n| self.file(n).display().to_string()).collect();
        if taken.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("refusing to overwrite {} (pass --force)", taken.join(", "))))
        }
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        self.claim(&[name])?;
        fs::create_dir_all(&self.dir)?;
        let path = self.file(name);
        fs::write(&path, contents)?;
        Ok(path)
    }
}
