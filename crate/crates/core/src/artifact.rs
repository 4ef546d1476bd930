//! On-disk artifacts: atomic writes, content digests, output-directory locks,
//! and the adversarial-pair bundle layout.
//!
//! A bundle directory holds the adversarial image as a lossless 8-bit PNG,
//! the suffix record (token ids plus decoded text), a provenance document
//! (digests, seed, loss summary), and per-iteration loss traces in columnar
//! text. Nothing in a bundle depends on wall-clock time, so identical runs
//! produce byte-identical bundles.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imagestate::ImageState;
use crate::orchestrator::{AttackOutcome, Provenance};
use crate::suffix_attack::SuffixState;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Write via a temporary sibling file and rename, so partial outputs are
/// never left behind under the final name.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = parent.join(format!(
        ".{}.tmp",
        path.file_name().map_or_else(
            || "artifact".to_string(),
            |n| n.to_string_lossy().to_string()
        )
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Exclusive ownership of an output directory for one run. The lock file is
/// created with `create_new` and removed on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Artifact {
                path: path.clone(),
                message: "output directory is locked by another invocation".to_string(),
            }),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub const IMAGE_FILE: &str = "image.png";
pub const SUFFIX_FILE: &str = "suffix.json";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const IMAGE_TRACE_FILE: &str = "trace_image.csv";
pub const SUFFIX_TRACE_FILE: &str = "trace_suffix.csv";

#[derive(Debug, Serialize, Deserialize)]
struct SuffixRecord {
    tokens: Vec<usize>,
    text: String,
}

/// A bundle loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub image: ImageState,
    pub suffix_tokens: Vec<usize>,
    pub suffix_text: String,
    pub provenance: Provenance,
}

/// Write an attack outcome as a bundle directory.
pub fn save_bundle(dir: &Path, outcome: &AttackOutcome, suffix_text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    atomic_write(&dir.join(IMAGE_FILE), &outcome.pair.image.to_png_bytes()?)?;
    let suffix = SuffixRecord {
        tokens: outcome.pair.suffix.tokens().to_vec(),
        text: suffix_text.to_string(),
    };
    atomic_write(
        &dir.join(SUFFIX_FILE),
        &serde_json::to_vec_pretty(&suffix)?,
    )?;
    atomic_write(
        &dir.join(PROVENANCE_FILE),
        &serde_json::to_vec_pretty(&outcome.pair.provenance)?,
    )?;
    atomic_write(
        &dir.join(IMAGE_TRACE_FILE),
        trace_csv(&outcome.image_trace).as_bytes(),
    )?;
    atomic_write(
        &dir.join(SUFFIX_TRACE_FILE),
        trace_csv(&outcome.suffix_trace).as_bytes(),
    )?;
    Ok(())
}

/// Columnar loss trace: outer iteration, inner iteration, loss.
fn trace_csv(trace: &[(usize, usize, f64)]) -> String {
    let mut out = String::from("outer,inner,loss\n");
    for (o, i, l) in trace {
        out.push_str(&format!("{o},{i},{l:.17}\n"));
    }
    out
}

pub fn load_bundle(dir: &Path) -> Result<LoadedPair> {
    let img_bytes = fs::read(dir.join(IMAGE_FILE)).map_err(|e| Error::io(dir.join(IMAGE_FILE), e))?;
    let image = ImageState::from_png_bytes(&img_bytes)?;
    let suffix: SuffixRecord =
        serde_json::from_slice(&fs::read(dir.join(SUFFIX_FILE)).map_err(|e| {
            Error::io(dir.join(SUFFIX_FILE), e)
        })?)?;
    let provenance: Provenance =
        serde_json::from_slice(&fs::read(dir.join(PROVENANCE_FILE)).map_err(|e| {
            Error::io(dir.join(PROVENANCE_FILE), e)
        })?)?;
    Ok(LoadedPair {
        image,
        suffix_tokens: suffix.tokens,
        suffix_text: suffix.text,
        provenance,
    })
}

/// Digest over every regular file in a bundle, in sorted name order.
pub fn bundle_digest(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != ".lock"))
        .collect();
    names.sort();
    let mut hasher = Sha256::new();
    for p in &names {
        hasher.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(p).map_err(|e| Error::io(p, e))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Reconstruct a [`SuffixState`] from loaded bundle tokens.
pub fn suffix_from_tokens(tokens: Vec<usize>, vocab: usize) -> Result<SuffixState> {
    SuffixState::from_tokens(tokens, vocab)
}
