//! Artifacts are staged in a temporary directory next to the target and
//! renamed into place only when everything has been written.

use std::fs;
use std::path::{Path, PathBuf};

use tempfile::TempDir;

use crate::CliError;

pub struct Staging {
    dir: TempDir,
    target: PathBuf,
    force: bool,
    files: Vec<String>,
}

fn is_non_empty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

impl Staging {
    pub fn new(target: &Path, force: bool) -> Result<Self, CliError> {
        if target.exists() && !target.is_dir() {
            return Err(CliError::Input(format!("{} exists and is not a directory", target.display())));
        }
        if is_non_empty_dir(target) && !force {
            return Err(CliError::OutputExists(target.display().to_string()));
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| CliError::io(&parent, e))?;
        let dir = tempfile::Builder::new()
            .prefix(".pcml-staging-")
            .tempdir_in(&parent)
            .map_err(|e| CliError::io(&parent, e))?;
        Ok(Self {
            dir,
            target: target.to_path_buf(),
            force,
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    /// Moves the staged directory to the target.
    pub fn commit(self) -> Result<PathBuf, CliError> {
        if self.target.exists() {
            if is_non_empty_dir(&self.target) && !self.force {
                return Err(CliError::OutputExists(self.target.display().to_string()));
            }
            fs::remove_dir_all(&self.target).map_err(|e| CliError::io(&self.target, e))?;
        }
        let staged = self.dir.keep();
        fs::rename(&staged, &self.target).map_err(|e| CliError::io(&self.target, e))?;
        Ok(self.target)
    }
}

/// Display form of a float; shortest representation that round-trips.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// CSV bytes from a header and rows of fields.
pub fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| CliError::Csv(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::Csv(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Csv(e.to_string()))
}

pub fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}
