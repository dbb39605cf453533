//! Atomic artifact writing: every file is written to a temporary sibling
//! and renamed into place, so readers never see a partial file.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use tempfile::NamedTempFile;

use crate::CliError;

pub struct OutputDir {
    dir: PathBuf,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_with(
        &self,
        name: &str,
        fill: impl FnOnce(&mut dyn Write) -> Result<(), CliError>,
    ) -> Result<PathBuf, CliError> {
        let target = self.path(name);
        let io_err = |e: std::io::Error| CliError::Runtime(format!("writing {}: {e}", target.display()));
        let tmp = NamedTempFile::new_in(&self.dir).map_err(io_err)?;
        let mut writer = BufWriter::new(tmp);
        fill(&mut writer)?;
        writer.flush().map_err(io_err)?;
        let tmp = writer.into_inner().map_err(|e| io_err(e.into_error()))?;
        tmp.persist(&target).map_err(|e| io_err(e.error))?;
        Ok(target)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| CliError::Runtime(e.to_string()))?;
            writeln!(w).map_err(|e| CliError::Runtime(e.to_string()))
        })
    }
}
