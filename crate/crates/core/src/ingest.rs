//! Archive walking and figure/caption extraction.
//!
//! An archive is a directory tree; every directory holding a `package.json`
//! is one article package:
//!
//! ```json
//! {
//!   "package_id": "pkg001",
//!   "figure_entries": [
//!     { "figure_id": "F1", "image_path": "F1.png", "caption": "(a) CT. (b) MRI." }
//!   ]
//! }
//! ```
//!
//! `image_path` is relative to the package directory. `caption` may be
//! omitted or `null`; such figures are kept and flagged `caption_missing`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;
use walkdir::WalkDir;

use crate::raster::{Raster, RasterError};
use crate::warning::Warning;

pub const MANIFEST_FILE: &str = "package.json";

const STAGE: &str = "ingest";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{0} is not a directory")]
    NotADirectory(PathBuf),
    #[error("manifest {path} is malformed: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// On-disk manifest schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub package_id: String,
    pub figure_entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub figure_id: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureEntry {
    pub figure_id: String,
    /// Resolved against the package directory.
    pub image_path: PathBuf,
    /// NFC-normalized; empty when `caption_missing`.
    pub caption: String,
    pub caption_missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticlePackage {
    pub package_id: String,
    pub manifest_path: PathBuf,
    pub figure_entries: Vec<FigureEntry>,
    /// Entries declared in the manifest, including ones dropped for a missing image.
    pub declared_entries: usize,
}

/// One decoded figure with its caption and provenance.
#[derive(Debug, Clone)]
pub struct FigureRecord {
    pub package_id: String,
    pub figure_id: String,
    pub image: Raster,
    pub caption: String,
    pub caption_missing: bool,
    pub source_path: PathBuf,
}

impl FigureRecord {
    pub fn meta(&self) -> FigureMeta {
        FigureMeta {
            package_id: self.package_id.clone(),
            figure_id: self.figure_id.clone(),
            caption: self.caption.clone(),
            caption_missing: self.caption_missing,
            source_path: self.source_path.clone(),
            width: self.image.width(),
            height: self.image.height(),
        }
    }
}

/// A figure record without its pixels; what stage checkpoints carry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureMeta {
    pub package_id: String,
    pub figure_id: String,
    pub caption: String,
    pub caption_missing: bool,
    pub source_path: PathBuf,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractOptions {
    pub promote_gray: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { promote_gray: true }
    }
}

#[derive(Deserialize)]
struct ManifestId {
    package_id: String,
}

/// Every directory under `root` holding a manifest, ordered by package id
/// (directory path breaks ties). Unreadable subtrees are skipped with a warning.
pub fn scan_archive(root: &Path) -> Result<Vec<PathBuf>, IngestError> {
    scan_archive_with_warnings(root).map(|(paths, _)| paths)
}

pub fn scan_archive_with_warnings(
    root: &Path,
) -> Result<(Vec<PathBuf>, Vec<Warning>), IngestError> {
    if !root.is_dir() {
        return Err(IngestError::NotADirectory(root.to_path_buf()));
    }
    let mut warnings = Vec::new();
    let mut found = Vec::new();
    for entry in WalkDir::new(root).follow_links(false) {
        let entry = match entry {
            Ok(e) => e,
            Err(err) => {
                let subject = err
                    .path()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| root.display().to_string());
                warnings.push(Warning::new(STAGE, subject, format!("skipped: {err}")));
                continue;
            }
        };
        if entry.file_type().is_file() && entry.file_name() == MANIFEST_FILE {
            let dir = entry
                .path()
                .parent()
                .expect("manifest has a parent")
                .to_path_buf();
            let key = fs::read(entry.path())
                .ok()
                .and_then(|b| serde_json::from_slice::<ManifestId>(&b).ok())
                .map(|m| m.package_id)
                .unwrap_or_else(|| {
                    dir.file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default()
                });
            found.push((key, dir));
        }
    }
    found.sort();
    Ok((found.into_iter().map(|(_, p)| p).collect(), warnings))
}

fn manifest_path_of(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Parse one package manifest. `path` may be the package directory or the
/// manifest itself. Entries whose image file is absent are dropped with a warning.
pub fn parse_package(path: &Path) -> Result<(ArticlePackage, Vec<Warning>), IngestError> {
    let manifest_path = manifest_path_of(path);
    let bytes = fs::read(&manifest_path).map_err(|source| IngestError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let malformed = |reason: String| IngestError::MalformedManifest {
        path: manifest_path.clone(),
        reason,
    };
    let manifest: ManifestFile =
        serde_json::from_slice(&bytes).map_err(|e| malformed(e.to_string()))?;
    if manifest.package_id.trim().is_empty() {
        return Err(malformed("package_id is empty".into()));
    }
    let package_dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let mut seen = HashSet::new();
    let mut warnings = Vec::new();
    let mut figure_entries = Vec::with_capacity(manifest.figure_entries.len());
    for entry in &manifest.figure_entries {
        if entry.figure_id.is_empty() {
            return Err(malformed("empty figure_id".into()));
        }
        if !seen.insert(entry.figure_id.as_str()) {
            return Err(malformed(format!("duplicate figure_id {}", entry.figure_id)));
        }
        let image_path = package_dir.join(&entry.image_path);
        if !image_path.is_file() {
            warnings.push(Warning::new(
                STAGE,
                format!("{}/{}", manifest.package_id, entry.figure_id),
                format!("missing image file {}", image_path.display()),
            ));
            continue;
        }
        let caption: String = entry
            .caption
            .as_deref()
            .map(|c| c.nfc().collect())
            .unwrap_or_default();
        let caption_missing = caption.trim().is_empty();
        figure_entries.push(FigureEntry {
            figure_id: entry.figure_id.clone(),
            image_path,
            caption,
            caption_missing,
        });
    }
    Ok((
        ArticlePackage {
            package_id: manifest.package_id,
            manifest_path,
            figure_entries,
            declared_entries: manifest.figure_entries.len(),
        },
        warnings,
    ))
}

/// Decode every entry's image. Undecodable or unreadable images are dropped
/// with a warning, so `records.len() + warnings.len() == entries`.
pub fn extract_pairs(pkg: &ArticlePackage, opts: ExtractOptions) -> (Vec<FigureRecord>, Vec<Warning>) {
    let mut records = Vec::with_capacity(pkg.figure_entries.len());
    let mut warnings = Vec::new();
    for entry in &pkg.figure_entries {
        let subject = format!("{}/{}", pkg.package_id, entry.figure_id);
        let decoded = fs::read(&entry.image_path)
            .map_err(|e| RasterError::Decode(e.to_string()))
            .and_then(|bytes| Raster::decode(&bytes, opts.promote_gray));
        match decoded {
            Ok(image) => records.push(FigureRecord {
                package_id: pkg.package_id.clone(),
                figure_id: entry.figure_id.clone(),
                image,
                caption: entry.caption.clone(),
                caption_missing: entry.caption_missing,
                source_path: entry.image_path.clone(),
            }),
            Err(err) => warnings.push(Warning::new(STAGE, subject, format!("image decode error: {err}"))),
        }
    }
    (records, warnings)
}
