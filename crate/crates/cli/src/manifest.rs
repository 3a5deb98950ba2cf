//! Per-stage run manifests.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Component, Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_at: String,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Stage arguments with paths relative to the manifest directory where
    /// possible.
    pub args: BTreeMap<String, String>,
    pub config_hash: String,
    pub seed: u64,
    /// SHA-256 of every input file, keyed like `args`.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
    pub wall_clock: WallClock,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a file, or of every file under a directory except manifests
/// (sorted relative names and contents).
pub fn sha256_path(path: &Path) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(std::fs::read(path.join(&rel)).with_context(|| format!("reading {}", rel.display()))?);
        }
    } else {
        let mut f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = f.read(&mut buf)?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn is_manifest(p: &Path) -> bool {
    p.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n == MANIFEST_FILE || n.ends_with(".manifest.json"))
}

/// Manifest path for a stage whose output is the single file `out`.
pub fn manifest_for_file(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if !is_manifest(&p) {
            out.push(p.strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(())
}

/// `path` relative to `base`, climbing out with `..` as needed. Paths
/// sharing nothing with `base` beyond the filesystem root stay absolute.
pub fn display_rel(path: &Path, base: &Path) -> String {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    let (pc, bc): (Vec<Component>, Vec<Component>) = (p.components().collect(), b.components().collect());
    let shared = pc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    if !pc[..shared].iter().any(|c| matches!(c, Component::Normal(_))) {
        return p.display().to_string();
    }
    let mut rel = PathBuf::new();
    for _ in shared..bc.len() {
        rel.push("..");
    }
    rel.extend(&pc[shared..]);
    if rel.as_os_str().is_empty() {
        ".".into()
    } else {
        rel.display().to_string()
    }
}

/// Collects a stage's arguments and files, then writes the manifest.
pub struct ManifestBuilder {
    command: String,
    path: PathBuf,
    dir: PathBuf,
    seed: u64,
    config_hash: String,
    args: BTreeMap<String, String>,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<(String, PathBuf)>,
    started: Instant,
    started_at: String,
}

impl ManifestBuilder {
    /// The manifest is written to `path`; other paths are shown relative to
    /// its directory.
    pub fn new(command: &str, path: &Path, seed: u64, config: &impl Serialize) -> anyhow::Result<Self> {
        Ok(Self {
            command: command.into(),
            path: path.to_path_buf(),
            dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            seed,
            config_hash: sha256_bytes(&serde_json::to_vec(config)?),
            args: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
            started_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        })
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.args.insert(key.into(), value.to_string());
        self
    }

    pub fn input(&mut self, key: &str, path: &Path) -> &mut Self {
        self.args.insert(key.into(), display_rel(path, &self.dir));
        self.inputs.push((key.into(), path.to_path_buf()));
        self
    }

    pub fn output(&mut self, key: &str, path: &Path) -> &mut Self {
        self.outputs.push((key.into(), path.to_path_buf()));
        self
    }

    /// Hashes inputs and outputs and writes the manifest atomically.
    pub fn finish(&self) -> anyhow::Result<RunManifest> {
        let digest = |list: &[(String, PathBuf)]| -> anyhow::Result<BTreeMap<String, String>> {
            list.iter().map(|(k, p)| Ok((k.clone(), sha256_path(p)?))).collect()
        };
        let m = RunManifest {
            command: self.command.clone(),
            args: self.args.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            inputs: digest(&self.inputs)?,
            outputs: digest(&self.outputs)?,
            versions: BTreeMap::from([
                ("ehrgen".to_string(), env!("CARGO_PKG_VERSION").to_string()),
                ("checkpoint_format".to_string(), "1".to_string()),
            ]),
            wall_clock: WallClock {
                started_at: self.started_at.clone(),
                elapsed_seconds: self.started.elapsed().as_secs_f64(),
            },
        };
        write_atomic(&self.path, serde_json::to_string_pretty(&m)?.as_bytes())?;
        Ok(m)
    }
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_digest_ignores_manifest_and_tracks_content() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("a.txt"), "x").unwrap();
        std::fs::create_dir(d.path().join("sub")).unwrap();
        std::fs::write(d.path().join("sub/b.txt"), "y").unwrap();
        let h1 = sha256_path(d.path()).unwrap();
        std::fs::write(d.path().join(MANIFEST_FILE), "{}").unwrap();
        assert_eq!(sha256_path(d.path()).unwrap(), h1);
        std::fs::write(d.path().join("sub/b.txt"), "z").unwrap();
        assert_ne!(sha256_path(d.path()).unwrap(), h1);
        assert_eq!(
            sha256_path(&d.path().join("a.txt")).unwrap(),
            sha256_bytes(b"x")
        );
    }

    #[test]
    fn manifest_paths_are_relative() {
        let d = tempfile::tempdir().unwrap();
        let f = d.path().join("in.jsonl");
        std::fs::write(&f, "{}").unwrap();
        let mut b = ManifestBuilder::new("simulate", &d.path().join(MANIFEST_FILE), 3, &"cfg").unwrap();
        b.input("corpus", &f).output("corpus_out", &f).arg("n", 5);
        let m = b.finish().unwrap();
        assert_eq!(m.args["corpus"], "in.jsonl");
        assert_eq!(m.args["n"], "5");
        let back: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(d.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
