//! Output sinks, schema checks and run manifests.
//!
//! Every primary output is serialized into memory, parsed back into its typed
//! form and compared with the value that produced it before a single byte is
//! written. A file that fails this check is never emitted.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
        }
    }
}

/// Config echo written beside the primary outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub cli_version: String,
    pub library_version: String,
    pub model_format_version: u32,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: u64,
    /// Worker threads; 0 means the runtime default.
    pub threads: usize,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    /// Excluded from reproducibility comparisons.
    pub created_unix_s: u64,
}

/// Where primary outputs go: a directory, or stdout when no directory is set.
pub struct Sink {
    dir: Option<PathBuf>,
    written: Vec<String>,
}

impl Sink {
    pub fn new(dir: Option<PathBuf>) -> Result<Self, CliError> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| CliError::Failed(format!("cannot create {}: {e}", d.display())))?;
        }
        Ok(Self { dir, written: Vec::new() })
    }

    pub fn json<T: Serialize + DeserializeOwned + PartialEq>(&mut self, stem: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(format!("{stem}: {e}")))?;
        text.push('\n');
        check_json(stem, &text, value)?;
        self.put(&format!("{stem}.{}", Format::Json.extension()), text.as_bytes())
    }

    /// Writes rows under a fixed header; the read-back must reproduce both.
    pub fn csv<R: Serialize + DeserializeOwned + PartialEq>(
        &mut self,
        stem: &str,
        header: &[&str],
        rows: &[R],
    ) -> Result<(), CliError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        let fail = |e: csv::Error| CliError::Failed(format!("{stem}: {e}"));
        w.write_record(header).map_err(fail)?;
        for r in rows {
            w.serialize(r).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Failed(format!("{stem}: {e}")))?;
        check_csv(stem, &bytes, header, rows)?;
        self.put(&format!("{stem}.{}", Format::Csv.extension()), &bytes)
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        match &self.dir {
            Some(d) => {
                let path = d.join(name);
                std::fs::write(&path, bytes).map_err(|e| CliError::Failed(format!("cannot write {}: {e}", path.display())))?;
                self.written.push(name.to_string());
            }
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(bytes)
                    .and_then(|_| out.flush())
                    .map_err(|e| CliError::Failed(format!("stdout: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Writes `<stem>.manifest.json`, appending the files written so far to `outputs`.
    pub fn finish(self, stem: &str, mut manifest: Manifest) -> Result<(), CliError> {
        let Some(dir) = self.dir else { return Ok(()) };
        manifest.outputs.extend(self.written);
        manifest.created_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Failed(e.to_string()))?;
        text.push('\n');
        check_json("manifest", &text, &manifest)?;
        let path = dir.join(format!("{stem}.manifest.json"));
        std::fs::write(&path, text).map_err(|e| CliError::Failed(format!("cannot write {}: {e}", path.display())))
    }
}

fn check_json<T: DeserializeOwned + PartialEq>(stem: &str, text: &str, value: &T) -> Result<(), CliError> {
    let back: T = serde_json::from_str(text).map_err(|e| CliError::Failed(format!("{stem}: output fails its schema: {e}")))?;
    if &back != value {
        return Err(CliError::Failed(format!("{stem}: output does not read back to the same value")));
    }
    Ok(())
}

fn check_csv<R: DeserializeOwned + PartialEq>(stem: &str, bytes: &[u8], header: &[&str], rows: &[R]) -> Result<(), CliError> {
    let bad = |why: String| CliError::Failed(format!("{stem}: output fails its schema: {why}"));
    let mut r = csv::Reader::from_reader(bytes);
    let found = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(bad(format!("header {found:?}")));
    }
    let back = r.deserialize().collect::<Result<Vec<R>, _>>().map_err(|e| bad(e.to_string()))?;
    if back.as_slice() != rows {
        return Err(bad("rows do not read back to the same values".into()));
    }
    Ok(())
}
