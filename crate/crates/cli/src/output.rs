//! Report writing. Every JSON report carries `schema_version` and the relative
//! path of the run manifest; the manifest lists every file the run wrote
//! with its SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Component, Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use robokit_core::model::{write_call_records, Feed};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, Vec<PathBuf>>,
    pub outputs: Vec<OutputFile>,
    pub wall_time_s: f64,
}

#[derive(Debug, Serialize)]
pub struct OutputFile {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    report: &'a str,
    manifest: String,
    #[serde(flatten)]
    body: &'a T,
}

/// An output directory plus the list of files written into it.
pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
    started: Instant,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Resolves `rel` under the root, creating parent directories.
    fn target(&mut self, rel: &str) -> Result<PathBuf> {
        let rel_path = Path::new(rel);
        if rel_path
            .components()
            .any(|c| !matches!(c, Component::Normal(_)))
        {
            bail!("output path `{rel}` must stay inside the output directory");
        }
        let path = self.root.join(rel_path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        self.written.push(rel.to_string());
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, report: &str, body: &T) -> Result<()> {
        let depth = Path::new(rel).components().count() - 1;
        let envelope = Envelope {
            schema_version: SCHEMA_VERSION,
            report,
            manifest: "../".repeat(depth) + MANIFEST_FILE,
            body,
        };
        let path = self.target(rel)?;
        let text = serde_json::to_string_pretty(&envelope).context("serializing report")?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn jsonl<T: Serialize>(
        &mut self,
        rel: &str,
        rows: impl IntoIterator<Item = T>,
    ) -> Result<()> {
        let path = self.target(rel)?;
        let ctx = || format!("writing {}", path.display());
        let mut w = BufWriter::new(fs::File::create(&path).with_context(ctx)?);
        for row in rows {
            serde_json::to_writer(&mut w, &row).with_context(ctx)?;
            w.write_all(b"\n").with_context(ctx)?;
        }
        w.flush().with_context(ctx)
    }

    pub fn csv<T: Serialize>(
        &mut self,
        rel: &str,
        rows: impl IntoIterator<Item = T>,
    ) -> Result<()> {
        let path = self.target(rel)?;
        let ctx = || format!("writing {}", path.display());
        let mut w = csv::Writer::from_path(&path).with_context(ctx)?;
        for row in rows {
            w.serialize(row).with_context(ctx)?;
        }
        w.flush().with_context(ctx)
    }

    pub fn feed(&mut self, rel: &str, feed: &Feed) -> Result<()> {
        let path = self.target(rel)?;
        write_call_records(feed, &path)?;
        Ok(())
    }

    /// Records files written by other code (e.g. the corpus generator).
    pub fn note_written(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        self.written.push(rel.display().to_string());
    }

    pub fn finish(
        self,
        subcommand: &str,
        config: serde_json::Value,
        inputs: BTreeMap<String, Vec<PathBuf>>,
    ) -> Result<()> {
        let outputs = self
            .written
            .iter()
            .map(|rel| {
                Ok(OutputFile {
                    path: rel.clone(),
                    sha256: sha256_file(&self.root.join(rel))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            schema_version: SCHEMA_VERSION,
            tool: "robokit",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            config,
            inputs,
            outputs,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).context("serializing manifest")?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
