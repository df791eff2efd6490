//! Dataset emission: deduplication, demographics extraction, JSONL output
//! and corpus statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::align::AlignmentMode;
use crate::warning::Warning;

pub const SCHEMA_VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.json";
pub const DEFAULT_TOP_TERMS: usize = 20;
pub const MAX_AGE: u32 = 120;

const STAGE: &str = "emit";

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("average subfigures per caption is undefined with zero compound figures")]
    DivisionByZero,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmitError + '_ {
    move |source| EmitError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: u32,
    pub sex: Sex,
}

/// One emitted image-text pair. Serialized field order is the JSONL schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub entry_id: String,
    pub package_id: String,
    pub figure_id: String,
    pub panel_index: usize,
    /// Crop location relative to the output directory.
    pub image_path: String,
    pub text: String,
    pub alignment_mode: AlignmentMode,
    pub confidence: f64,
    pub modality_tags: Vec<String>,
    pub demographics: Option<Demographics>,
}

fn demographics_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\b(\d{1,3})(?:[\s-]?years?[\s-]old|\s?y/o|\s?yo)\s+(male|man|boy|female|woman|girl|m|f)\b",
        )
        .unwrap()
    })
}

/// Patient age and sex from phrases like "54-year-old male", "54 year old
/// man", "54 y/o F" or "54yo woman". The first such phrase decides; ages
/// above 120 yield nothing.
pub fn extract_demographics(caption: &str) -> Option<Demographics> {
    let caps = demographics_pattern().captures(caption)?;
    let age: u32 = caps[1].parse().ok()?;
    if age > MAX_AGE {
        return None;
    }
    let sex = match caps[2].to_ascii_lowercase().as_str() {
        "male" | "man" | "boy" | "m" => Sex::M,
        _ => Sex::F,
    };
    Some(Demographics { age, sex })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RemovalReason {
    Duplicate { of: String },
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub entry_id: String,
    pub sha256: String,
    #[serde(flatten)]
    pub reason: RemovalReason,
}

#[derive(Debug, Clone, Default)]
pub struct DedupOutcome {
    pub kept: Vec<DatasetEntry>,
    pub removed: Vec<Removal>,
    pub warnings: Vec<Warning>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Exact-byte dedup of crops. Entries are visited in `entry_id` order; the
/// first of each hash survives and any hash in `exclusion` is dropped.
/// Unreadable images are kept with a warning.
pub fn dedup(entries: Vec<DatasetEntry>, base_dir: &Path, exclusion: Option<&HashSet<String>>) -> DedupOutcome {
    let mut entries = entries;
    entries.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
    let hashes: Vec<Result<String, String>> = entries
        .par_iter()
        .map(|e| {
            fs::read(base_dir.join(&e.image_path))
                .map(|b| sha256_hex(&b))
                .map_err(|err| err.to_string())
        })
        .collect();

    let mut out = DedupOutcome::default();
    let mut first_of: HashMap<String, String> = HashMap::new();
    for (entry, hash) in entries.into_iter().zip(hashes) {
        let hash = match hash {
            Ok(h) => h,
            Err(err) => {
                out.warnings.push(Warning::new(
                    STAGE,
                    &entry.entry_id,
                    format!("cannot hash {}: {err}", entry.image_path),
                ));
                out.kept.push(entry);
                continue;
            }
        };
        if exclusion.is_some_and(|ex| ex.contains(&hash)) {
            out.removed.push(Removal {
                entry_id: entry.entry_id,
                sha256: hash,
                reason: RemovalReason::Excluded,
            });
        } else if let Some(first) = first_of.get(&hash) {
            out.removed.push(Removal {
                entry_id: entry.entry_id,
                sha256: hash,
                reason: RemovalReason::Duplicate { of: first.clone() },
            });
        } else {
            first_of.insert(hash, entry.entry_id.clone());
            out.kept.push(entry);
        }
    }
    out
}

/// One lowercase hex SHA-256 per line; blank and `#` lines ignored.
pub fn load_exclusion_hashes(path: &Path) -> Result<HashSet<String>, EmitError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if t.len() != 64 || !t.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(EmitError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "expected a 64-digit hex hash".into(),
            });
        }
        out.insert(t.to_ascii_lowercase());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dataset_file: String,
    pub entry_count: usize,
    pub dataset_sha256: String,
    pub config_hash: String,
}

/// Write entries as JSON lines ordered by `entry_id`, plus `manifest.json`
/// next to the dataset file.
pub fn write_jsonl(entries: &[DatasetEntry], path: &Path, config_hash: &str) -> Result<Manifest, EmitError> {
    let mut sorted: Vec<&DatasetEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
    let mut buf = Vec::new();
    for e in sorted {
        serde_json::to_writer(&mut buf, e).expect("entry serializes");
        buf.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, &buf).map_err(io_err(path))?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        dataset_file: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entry_count: entries.len(),
        dataset_sha256: sha256_hex(&buf),
        config_hash: config_hash.to_string(),
    };
    let manifest_path = path.with_file_name(MANIFEST_FILE);
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetEntry>, EmitError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EmitError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EmitError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).expect("value serializes");
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(path))
}

/// Panel and compound-figure totals from the separation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionLedger {
    pub n_subfigures: u64,
    pub n_compound_figures: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub total_entries: usize,
    /// Fraction of figures whose entries came from a split caption.
    pub separable_fraction: f64,
    pub avg_subfigs_per_caption: f64,
    /// Entry count per primary (first-mentioned) modality tag.
    pub modality_histogram: BTreeMap<String, usize>,
    pub term_frequency: Vec<(String, usize)>,
    /// Fraction male among entries with demographics.
    pub sex_ratio: Option<f64>,
    /// Decade buckets such as "50-59".
    pub age_histogram: BTreeMap<String, usize>,
}

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "with", "from", "that", "this", "are", "was", "were", "which", "into", "after", "before",
    "between", "showing", "shows", "show", "shown", "image", "images", "figure", "panel", "panels", "left", "right",
    "arrow", "arrows", "indicate", "indicates", "its", "has", "have", "not", "our", "all", "also", "than", "each",
    "both", "within", "using", "used", "there", "their", "these", "those", "via", "per", "may", "can", "scale",
    "bar", "bars",
];

fn terms_of(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() >= 3 && !w.chars().all(|c| c.is_numeric()))
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
}

pub fn compute_stats(entries: &[DatasetEntry], ledger: CaptionLedger) -> Result<StatsReport, EmitError> {
    compute_stats_top(entries, ledger, DEFAULT_TOP_TERMS)
}

pub fn compute_stats_top(entries: &[DatasetEntry], ledger: CaptionLedger, top_n: usize) -> Result<StatsReport, EmitError> {
    if ledger.n_compound_figures == 0 {
        return Err(EmitError::DivisionByZero);
    }
    let avg = ledger.n_subfigures as f64 / ledger.n_compound_figures as f64;

    let mut figures: BTreeMap<(&str, &str), bool> = BTreeMap::new();
    let mut modality_histogram = BTreeMap::new();
    let mut terms: HashMap<String, usize> = HashMap::new();
    let (mut males, mut with_demo) = (0usize, 0usize);
    let mut age_histogram = BTreeMap::new();
    for e in entries {
        let separable = figures.entry((&e.package_id, &e.figure_id)).or_insert(false);
        *separable |= e.alignment_mode != AlignmentMode::FullCaptionFallback;
        if let Some(tag) = e.modality_tags.first() {
            *modality_histogram.entry(tag.clone()).or_insert(0) += 1;
        }
        for t in terms_of(&e.text) {
            *terms.entry(t).or_insert(0) += 1;
        }
        if let Some(d) = e.demographics {
            with_demo += 1;
            if d.sex == Sex::M {
                males += 1;
            }
            let lo = d.age / 10 * 10;
            *age_histogram.entry(format!("{lo}-{}", lo + 9)).or_insert(0) += 1;
        }
    }
    let mut term_frequency: Vec<(String, usize)> = terms.into_iter().collect();
    term_frequency.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    term_frequency.truncate(top_n);

    let separable_fraction = if figures.is_empty() {
        0.0
    } else {
        figures.values().filter(|s| **s).count() as f64 / figures.len() as f64
    };
    Ok(StatsReport {
        total_entries: entries.len(),
        separable_fraction,
        avg_subfigs_per_caption: avg,
        modality_histogram,
        term_frequency,
        sex_ratio: (with_demo > 0).then(|| males as f64 / with_demo as f64),
        age_histogram,
    })
}

/// Distinct modality tags across entries, for reporting.
pub fn tag_set(entries: &[DatasetEntry]) -> BTreeSet<&str> {
    entries.iter().flat_map(|e| e.modality_tags.iter().map(String::as_str)).collect()
}
