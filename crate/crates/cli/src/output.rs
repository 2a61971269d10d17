use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Tracks the files a command writes and deletes them again unless the
/// command finishes and calls [`Outputs::commit`].
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    /// Creates `dir` (and parents); directories that did not exist before are
    /// removed on failure if they end up empty.
    pub fn dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        self.dirs.extend(missing);
        Ok(())
    }

    pub fn track(&mut self, path: impl Into<PathBuf>) {
        self.files.push(path.into());
    }

    pub fn write(&mut self, path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
        self.track(path);
        std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.files)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        // Innermost first.
        for d in &self.dirs {
            let _ = std::fs::remove_dir(d);
        }
        if !self.files.is_empty() {
            log::warn!("removed {} partial output file(s)", self.files.len());
        }
    }
}
