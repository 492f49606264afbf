//! Artifact output with overwrite protection and a manifest.
//!
//! Every command writes through this; the manifest lists exactly the
//! files that were written, with the config hash and seed for
//! reproducibility checks.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub struct ArtifactWriter {
    out_dir: PathBuf,
    force: bool,
    files: Vec<String>,
}

impl ArtifactWriter {
    pub fn new(out_dir: &Path, force: bool) -> anyhow::Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        ArtifactWriter { out_dir: out_dir.to_path_buf(), force, files: Vec::new() }
            .guard_manifest()
    }

    fn guard_manifest(self) -> anyhow::Result<Self> {
        let manifest = self.out_dir.join("manifest.json");
        if manifest.exists() && !self.force {
            anyhow::bail!(
                "{} already contains a manifest; pass --force to overwrite",
                self.out_dir.display()
            );
        }
        Ok(self)
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.out_dir.join(name);
        if path.exists() && !self.force {
            anyhow::bail!("{} already exists; pass --force to overwrite", path.display());
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents)?;
        self.files.push(name.to_string());
        Ok(path)
    }

    /// Writes the manifest and consumes the writer. Listed files all
    /// exist: they were just written.
    pub fn finish(
        mut self,
        command: &str,
        seed: Option<u64>,
        config_bytes: Option<&[u8]>,
    ) -> anyhow::Result<PathBuf> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            schema: u32,
            command: &'a str,
            seed: Option<u64>,
            config_hash: Option<String>,
            files: &'a [String],
        }
        self.files.sort();
        let manifest = Manifest {
            schema: 1,
            command,
            seed,
            config_hash: config_bytes.map(|b| {
                let digest = Sha256::digest(b);
                digest.iter().map(|x| format!("{x:02x}")).collect()
            }),
            files: &self.files,
        };
        let path = self.out_dir.join("manifest.json");
        let mut body = serde_json::to_string_pretty(&manifest)?;
        body.push('\n');
        std::fs::write(&path, body)?;
        Ok(path)
    }
}
