//! The single writer for all artifacts.

use std::path::{Path, PathBuf};

use serde::Serialize;

use ltlab::table::Table;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    /// Creates `root`. An existing non-empty directory is only reused with `force`,
    /// in which case files are overwritten in place.
    pub fn prepare(root: &Path, force: bool) -> CliResult<Self> {
        if root.exists() {
            if !root.is_dir() {
                return Err(CliError::usage(format!("{} exists and is not a directory", root.display())));
            }
            let occupied = std::fs::read_dir(root).map_err(|e| CliError::io(root, e))?.next().is_some();
            if occupied && !force {
                return Err(CliError::usage(format!(
                    "{} already contains files; pass --force to overwrite",
                    root.display()
                )));
            }
        }
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn subdir(&self, name: &str) -> CliResult<OutputDir> {
        let root = self.root.join(name);
        std::fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn bytes(&self, name: &str, data: &[u8]) -> CliResult<()> {
        let p = self.root.join(name);
        std::fs::write(&p, data).map_err(|e| CliError::io(&p, e))
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(ltlab::Error::from)?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    pub fn table(&self, name: &str, table: &Table) -> CliResult<()> {
        self.bytes(name, table.to_csv().as_bytes())
    }
}
