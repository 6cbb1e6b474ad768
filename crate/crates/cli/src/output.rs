//! Output directory bookkeeping: the run manifest and rollback of partial
//! outputs when a command fails.

use std::fs;
use std::path::{Path, PathBuf};

use dasconv_core::Result;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// Fully resolved settings the outputs depend on.
    pub config: serde_json::Value,
    pub seed: u64,
    pub tool_version: &'static str,
    pub output_dir: PathBuf,
    pub args: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";

/// Everything a command created under its output directory.
pub struct Outputs {
    root: PathBuf,
    created_root: bool,
    dirs: Vec<PathBuf>,
    files: Vec<PathBuf>,
}

impl Outputs {
    pub fn create(root: &Path) -> Result<Self> {
        let created_root = !root.exists();
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            created_root,
            dirs: Vec::new(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Registers a subdirectory; it is deleted on rollback only if this run
    /// created it.
    pub fn dir(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if !p.exists() {
            let top = self.root.join(Path::new(rel).components().next().expect("non-empty path"));
            if !top.exists() {
                self.dirs.push(top);
            }
            fs::create_dir_all(&p)?;
        }
        Ok(p)
    }

    pub fn file(&mut self, rel: &str) -> PathBuf {
        let p = self.root.join(rel);
        self.files.push(p.clone());
        p
    }

    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(rel);
        fs::write(&p, contents)?;
        Ok(p)
    }

    pub fn write_manifest(&mut self, m: &RunManifest) -> Result<()> {
        self.write(MANIFEST, serde_json::to_string_pretty(m)? + "\n")?;
        Ok(())
    }

    /// Best-effort removal of everything this run produced.
    pub fn rollback(self) {
        for f in self.files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
        if self.created_root {
            let _ = fs::remove_dir_all(&self.root);
        }
    }
}
