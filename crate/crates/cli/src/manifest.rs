//! Atomic output writes and the content-hash manifest.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, Stage, StageError};

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8], stage: Stage) -> Result<()> {
    let err = |e: std::io::Error| StageError::new(stage, format!("{}: {e}", path.display()));
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
    tmp.write_all(bytes).map_err(err)?;
    tmp.as_file().sync_all().map_err(err)?;
    tmp.persist(path).map_err(|e| err(e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("write to string");
    }
    out
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).expect("path under root");
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

impl Manifest {
    /// Hashes every file under `root` except the manifest itself, sorted by path.
    pub fn scan(root: &Path, stage: Stage) -> Result<Self> {
        let mut paths = Vec::new();
        collect(root, &mut paths)
            .map_err(|e| StageError::new(stage, format!("{}: {e}", root.display())))?;
        let mut files = Vec::with_capacity(paths.len());
        for p in paths {
            let rel = relative(root, &p);
            if rel == MANIFEST_NAME {
                continue;
            }
            let bytes = std::fs::read(&p)
                .map_err(|e| StageError::new(stage, format!("{}: {e}", p.display())))?;
            files.push(ManifestEntry {
                path: rel,
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Self { files })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, root: &Path, stage: Stage) -> Result<()> {
        write_atomic(&root.join(MANIFEST_NAME), self.to_json().as_bytes(), stage)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| StageError::new(Stage::Verify, format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| StageError::new(Stage::Verify, format!("{}: {e}", path.display())))
    }

    pub fn find(&self, path: &str) -> Option<&ManifestEntry> {
        self.files.iter().find(|f| f.path == path)
    }
}

/// Rescans `root` and writes its manifest.
pub fn refresh(root: &Path, stage: Stage) -> Result<Manifest> {
    let m = Manifest::scan(root, stage)?;
    m.write(root, stage)?;
    Ok(m)
}

/// Problems found by [`verify`]; empty when the directory matches.
pub fn verify(root: &Path) -> Result<Vec<String>> {
    let recorded = Manifest::load(root)?;
    let actual = Manifest::scan(root, Stage::Verify)?;
    let mut problems = Vec::new();
    for f in &recorded.files {
        match actual.find(&f.path) {
            None => problems.push(format!("{}: missing", f.path)),
            Some(a) if a.sha256 != f.sha256 => problems.push(format!("{}: hash mismatch", f.path)),
            Some(_) => {}
        }
    }
    for a in &actual.files {
        if recorded.find(&a.path).is_none() {
            problems.push(format!("{}: not in manifest", a.path));
        }
    }
    Ok(problems)
}
