//! Config loading and stage orchestration.
//!
//! Each stage writes a JSON checkpoint under `<output_dir>/stages/`. A
//! checkpoint carries a key chained from the previous stage's key and the
//! config knobs the stage depends on, so changing a knob invalidates that
//! stage and everything after it while upstream checkpoints are reused.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, info};

use crate::align::{self, Alignment, AlignmentMode, AlignPolicy, Panel};
use crate::captionparse::{split_caption, SplitResult};
use crate::emit::{self, CaptionLedger, DatasetEntry, EmitError, StatsReport};
use crate::filter::{self, KeywordSet, Taxonomy};
use crate::fixtures::load_ground_truth;
use crate::infer::{ClientConfig, EmbeddingScorer, InferenceClient, DEFAULT_MAX_IN_FLIGHT};
use crate::ingest::{self, ExtractOptions, FigureMeta};
use crate::metrics::{self, DetectionSet, Rect, ScoredRect};
use crate::panelsplit::{self, GutterParams, SubfigureBox};
use crate::raster::Raster;
use crate::warning::Warning;

pub const STAGES_DIR: &str = "stages";
pub const CROPS_DIR: &str = "crops";
pub const REPORT_FILE: &str = "report.json";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Gutter,
    Detector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub temperature: f64,
    pub lambda_mlm: f64,
    pub mask_probability: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            lambda_mlm: 0.5,
            mask_probability: 0.15,
        }
    }
}

/// The config file as written: every key optional. Also used for CLI
/// overrides, which win over file values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub archive_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub keyword_file: Option<PathBuf>,
    pub taxonomy_file: Option<PathBuf>,
    pub split_mode: Option<String>,
    pub conf_threshold: Option<f64>,
    pub nms_iou: Option<f64>,
    pub align_mode: Option<String>,
    pub inference_endpoint: Option<String>,
    pub classifier_gate: Option<bool>,
    pub top_k: Option<usize>,
    pub seed: Option<u64>,
    pub exclusion_hash_file: Option<PathBuf>,
    pub ground_truth_file: Option<PathBuf>,
    pub workers: Option<usize>,
    pub max_in_flight: Option<usize>,
    pub gutter: Option<GutterParams>,
    pub loss: Option<LossSection>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Join relative paths onto `base`.
    pub fn rebase(mut self, base: &Path) -> Self {
        for p in [
            &mut self.archive_root,
            &mut self.output_dir,
            &mut self.keyword_file,
            &mut self.taxonomy_file,
            &mut self.exclusion_hash_file,
            &mut self.ground_truth_file,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }

    /// `other`'s set keys replace ours.
    pub fn merge(self, other: RawConfig) -> Self {
        macro_rules! pick {
            ($($f:ident),*) => { RawConfig { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            archive_root, output_dir, keyword_file, taxonomy_file, split_mode, conf_threshold, nms_iou, align_mode,
            inference_endpoint, classifier_gate, top_k, seed, exclusion_hash_file, ground_truth_file, workers,
            max_in_flight, gutter, loss
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub archive_root: PathBuf,
    pub output_dir: PathBuf,
    pub keyword_file: Option<PathBuf>,
    pub taxonomy_file: Option<PathBuf>,
    pub split_mode: SplitMode,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub align_mode: AlignPolicy,
    pub inference_endpoint: Option<String>,
    pub classifier_gate: bool,
    pub top_k: usize,
    pub seed: u64,
    pub exclusion_hash_file: Option<PathBuf>,
    pub ground_truth_file: Option<PathBuf>,
    /// 0 means one worker per CPU.
    pub workers: usize,
    pub max_in_flight: usize,
    pub gutter: GutterParams,
    pub loss: LossSection,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: &'static str,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid TOML: {0}")]
    Parse(String),
    #[error("invalid config: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
}

/// Read, rebase against the file's directory, apply `overrides` and validate.
pub fn validate_config(path: &Path, overrides: RawConfig) -> Result<PipelineConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let raw = RawConfig::parse(&text)?.rebase(base).merge(overrides);
    validate_raw(raw)
}

pub fn validate_raw(raw: RawConfig) -> Result<PipelineConfig, ConfigError> {
    let mut errs = Vec::new();
    let mut bad = |field: &'static str, message: String| errs.push(FieldError { field, message });

    let split_mode = match raw.split_mode.as_deref() {
        None | Some("gutter") => SplitMode::Gutter,
        Some("detector") => SplitMode::Detector,
        Some(other) => {
            bad("split_mode", format!("expected gutter or detector, got {other:?}"));
            SplitMode::Gutter
        }
    };
    let align_mode = match raw.align_mode.as_deref() {
        None | Some("auto") => AlignPolicy::Auto,
        Some("label") => AlignPolicy::Label,
        Some("similarity") => AlignPolicy::Similarity,
        Some("fallback") => AlignPolicy::Fallback,
        Some(other) => {
            bad("align_mode", format!("expected auto, label, similarity or fallback, got {other:?}"));
            AlignPolicy::Auto
        }
    };
    if raw.archive_root.is_none() {
        bad("archive_root", "required".into());
    }
    if raw.output_dir.is_none() {
        bad("output_dir", "required".into());
    }
    let conf_threshold = raw.conf_threshold.unwrap_or(panelsplit::DEFAULT_CONF_THRESHOLD);
    if !(0.0..=1.0).contains(&conf_threshold) {
        bad("conf_threshold", format!("must be in [0, 1], got {conf_threshold}"));
    }
    let nms_iou = raw.nms_iou.unwrap_or(panelsplit::DEFAULT_NMS_IOU);
    if !(0.0..=1.0).contains(&nms_iou) {
        bad("nms_iou", format!("must be in [0, 1], got {nms_iou}"));
    }
    let top_k = raw.top_k.unwrap_or(filter::DEFAULT_TOP_K);
    if !(1..=filter::NUM_CATEGORIES).contains(&top_k) {
        bad("top_k", format!("must be in 1..={}, got {top_k}", filter::NUM_CATEGORIES));
    }
    let endpoint = raw.inference_endpoint.filter(|e| !e.trim().is_empty());
    let classifier_gate = raw.classifier_gate.unwrap_or(false);
    if endpoint.is_none() {
        if split_mode == SplitMode::Detector {
            bad("split_mode", "detector mode requires inference_endpoint".into());
        }
        if align_mode == AlignPolicy::Similarity {
            bad("align_mode", "similarity mode requires inference_endpoint".into());
        }
        if classifier_gate {
            bad("classifier_gate", "requires inference_endpoint".into());
        }
    }
    let gutter = raw.gutter.unwrap_or_default();
    if let Err(msg) = gutter.validate() {
        bad("gutter", msg);
    }
    let loss = raw.loss.unwrap_or_default();
    if !(loss.temperature > 0.0 && loss.temperature.is_finite()) {
        bad("loss.temperature", "must be positive".into());
    }
    if !(loss.lambda_mlm >= 0.0 && loss.lambda_mlm.is_finite()) {
        bad("loss.lambda_mlm", "must be non-negative".into());
    }
    if !(0.0..=1.0).contains(&loss.mask_probability) {
        bad("loss.mask_probability", "must be in [0, 1]".into());
    }
    let max_in_flight = raw.max_in_flight.unwrap_or(DEFAULT_MAX_IN_FLIGHT);
    if max_in_flight == 0 {
        bad("max_in_flight", "must be at least 1".into());
    }
    if !errs.is_empty() {
        return Err(ConfigError::Invalid(errs));
    }
    Ok(PipelineConfig {
        archive_root: raw.archive_root.unwrap(),
        output_dir: raw.output_dir.unwrap(),
        keyword_file: raw.keyword_file,
        taxonomy_file: raw.taxonomy_file,
        split_mode,
        conf_threshold,
        nms_iou,
        align_mode,
        inference_endpoint: endpoint,
        classifier_gate,
        top_k,
        seed: raw.seed.unwrap_or(0),
        exclusion_hash_file: raw.exclusion_hash_file,
        ground_truth_file: raw.ground_truth_file,
        workers: raw.workers.unwrap_or(0),
        max_in_flight,
        gutter,
        loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Filter,
    Split,
    Parse,
    Align,
    Emit,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Filter,
        Stage::Split,
        Stage::Parse,
        Stage::Align,
        Stage::Emit,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Filter => "filter",
            Stage::Split => "split",
            Stage::Parse => "parse",
            Stage::Align => "align",
            Stage::Emit => "emit",
            Stage::Eval => "eval",
        }
    }

    fn checkpoint_file(self) -> String {
        format!("{}-{}.json", self as u8 + 1, self.name())
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: BoxError,
        partial: Box<RunReport>,
    },
    #[error("stage {stage} needs a current {needs} checkpoint; run `figforge {needs}` first")]
    MissingCheckpoint { stage: Stage, needs: Stage },
}

/// Funnel counts across the stages.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub packages: usize,
    pub figures_in: usize,
    pub figures_kept: usize,
    pub dropped_no_keyword: usize,
    pub dropped_classifier: usize,
    pub compound_figures: usize,
    pub subfigures: usize,
    pub separable_captions: usize,
    pub subcaptions: usize,
    pub aligned_label_order: usize,
    pub aligned_similarity: usize,
    pub aligned_fallback: usize,
    pub duplicates_removed: usize,
    pub excluded: usize,
    pub entries: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub counts: StageCounts,
    pub stage_ms: BTreeMap<String, f64>,
    pub reused_stages: Vec<Stage>,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint<T> {
    stage: Stage,
    key: String,
    data: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestOutput {
    pub packages: usize,
    pub figures: Vec<FigureMeta>,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeptFigure {
    pub meta: FigureMeta,
    pub keyword_hits: Vec<String>,
    pub medical_rank: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterOutput {
    pub kept: Vec<KeptFigure>,
    pub dropped_no_keyword: usize,
    pub dropped_classifier: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FigurePanels {
    pub meta: FigureMeta,
    /// Reading order.
    pub boxes: Vec<SubfigureBox>,
    /// Crop files relative to the output directory, parallel to `boxes`.
    pub crops: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitOutput {
    pub figures: Vec<FigurePanels>,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParseOutput {
    /// Parallel to the split stage's figures.
    pub captions: Vec<SplitResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FigureAlignment {
    pub package_id: String,
    pub figure_id: String,
    pub boxes: Vec<SubfigureBox>,
    pub alignment: Alignment,
    pub entries: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignOutput {
    pub figures: Vec<FigureAlignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub figures_evaluated: usize,
    pub aligned_figures_evaluated: usize,
    pub metrics: BTreeMap<String, f64>,
}

fn sha_json<T: Serialize>(parts: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(parts).expect("serializable")))
}

fn file_digest(path: Option<&Path>) -> Result<Option<String>, std::io::Error> {
    path.map(|p| fs::read(p).map(|b| emit::sha256_hex(&b))).transpose()
}

/// Chained per-stage keys.
#[derive(Debug, Clone)]
struct StageKeys {
    keys: BTreeMap<Stage, String>,
}

impl StageKeys {
    fn new(cfg: &PipelineConfig) -> Result<Self, std::io::Error> {
        let endpoint = cfg.inference_endpoint.as_deref();
        let uses_scorer = endpoint.is_some() && matches!(cfg.align_mode, AlignPolicy::Auto | AlignPolicy::Similarity);
        let knobs: [(Stage, serde_json::Value); 7] = [
            (Stage::Ingest, serde_json::json!({ "archive_root": cfg.archive_root })),
            (
                Stage::Filter,
                serde_json::json!({
                    "keywords": file_digest(cfg.keyword_file.as_deref())?,
                    "taxonomy": file_digest(cfg.taxonomy_file.as_deref())?,
                    "gate": cfg.classifier_gate.then_some((cfg.top_k, endpoint)),
                }),
            ),
            (
                Stage::Split,
                serde_json::json!({
                    "mode": cfg.split_mode,
                    "gutter": cfg.gutter,
                    "detector": (cfg.split_mode == SplitMode::Detector).then_some((cfg.conf_threshold, cfg.nms_iou, endpoint)),
                }),
            ),
            (Stage::Parse, serde_json::json!({ "share_preamble": true })),
            (
                Stage::Align,
                serde_json::json!({ "mode": cfg.align_mode, "scorer": uses_scorer.then_some(endpoint) }),
            ),
            (
                Stage::Emit,
                serde_json::json!({ "exclusion": file_digest(cfg.exclusion_hash_file.as_deref())?, "seed": cfg.seed }),
            ),
            (Stage::Eval, serde_json::json!({ "ground_truth": file_digest(cfg.ground_truth_file.as_deref())? })),
        ];
        let mut keys = BTreeMap::new();
        let mut prev = String::from("figforge/1");
        for (stage, k) in knobs {
            prev = sha_json(&(prev, stage, k));
            keys.insert(stage, prev.clone());
        }
        Ok(Self { keys })
    }

    fn get(&self, s: Stage) -> &str {
        &self.keys[&s]
    }
}

/// Hash over every stage-relevant knob; recorded in the manifest.
pub fn config_hash(cfg: &PipelineConfig) -> Result<String, std::io::Error> {
    StageKeys::new(cfg).map(|k| k.get(Stage::Eval).to_string())
}

fn stage_err(stage: Stage, report: &RunReport) -> impl FnOnce(BoxError) -> PipelineError + '_ {
    move |source| PipelineError::Stage {
        stage,
        source,
        partial: Box::new(report.clone()),
    }
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    keys: StageKeys,
    client: Option<InferenceClient>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a PipelineConfig) -> Result<Self, BoxError> {
        let client = cfg.inference_endpoint.as_ref().map(|e| {
            InferenceClient::with_config(ClientConfig {
                max_in_flight: cfg.max_in_flight,
                ..ClientConfig::new(e.clone())
            })
        });
        Ok(Self {
            cfg,
            keys: StageKeys::new(cfg)?,
            client,
        })
    }

    fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.cfg.output_dir.join(STAGES_DIR).join(stage.checkpoint_file())
    }

    fn load<T: DeserializeOwned>(&self, stage: Stage) -> Option<T> {
        let bytes = fs::read(self.checkpoint_path(stage)).ok()?;
        let cp: Checkpoint<T> = serde_json::from_slice(&bytes).ok()?;
        (cp.stage == stage && cp.key == self.keys.get(stage)).then_some(cp.data)
    }

    fn store<T: Serialize>(&self, stage: Stage, data: &T) -> Result<(), BoxError> {
        let cp = Checkpoint {
            stage,
            key: self.keys.get(stage).to_string(),
            data,
        };
        emit::write_json(&self.checkpoint_path(stage), &cp)?;
        Ok(())
    }

    fn ingest(&self) -> Result<IngestOutput, BoxError> {
        let (dirs, mut warnings) = ingest::scan_archive_with_warnings(&self.cfg.archive_root)?;
        let per_pkg: Vec<(Vec<FigureMeta>, Vec<Warning>)> = dirs
            .par_iter()
            .map(|dir| match ingest::parse_package(dir) {
                Ok((pkg, mut w)) => {
                    let (records, w2) = ingest::extract_pairs(&pkg, ExtractOptions::default());
                    w.extend(w2);
                    (records.iter().map(|r| r.meta()).collect(), w)
                }
                Err(e) => (Vec::new(), vec![Warning::new("ingest", dir.display().to_string(), e.to_string())]),
            })
            .collect();
        let packages = per_pkg.len();
        let mut figures = Vec::new();
        for (f, w) in per_pkg {
            figures.extend(f);
            warnings.extend(w);
        }
        Ok(IngestOutput {
            packages,
            figures,
            warnings,
        })
    }

    fn filter(&self, input: &IngestOutput) -> Result<FilterOutput, BoxError> {
        let kw = match &self.cfg.keyword_file {
            Some(p) => filter::load_keywords(p)?,
            None => KeywordSet::default_list(),
        };
        let gate = self.client.as_ref().filter(|_| self.cfg.classifier_gate);
        let results: Vec<Result<Option<KeptFigure>, BoxError>> = input
            .figures
            .par_iter()
            .map(|meta| {
                let m = filter::match_caption(&meta.caption, &kw);
                if !m.matched {
                    return Ok(None);
                }
                let mut hits: Vec<String> = m.hits.into_iter().map(|h| h.term).collect();
                hits.dedup();
                let medical_rank = match gate {
                    Some(client) => {
                        let scores = client.classify(&fs::read(&meta.source_path)?)?;
                        let medical = scores
                            .category_names()
                            .iter()
                            .position(|n| n == filter::MEDICAL_CATEGORY)
                            .ok_or(filter::FilterError::MissingMedicalCategory)?;
                        Some(scores.rank_of(medical))
                    }
                    None => None,
                };
                Ok(Some(KeptFigure {
                    meta: meta.clone(),
                    keyword_hits: hits,
                    medical_rank,
                }))
            })
            .collect();
        let mut out = FilterOutput {
            kept: Vec::new(),
            dropped_no_keyword: 0,
            dropped_classifier: 0,
        };
        for r in results {
            match r? {
                None => out.dropped_no_keyword += 1,
                Some(k) if k.medical_rank.is_some_and(|rank| rank > self.cfg.top_k) => out.dropped_classifier += 1,
                Some(k) => out.kept.push(k),
            }
        }
        Ok(out)
    }

    fn split(&self, input: &FilterOutput) -> Result<SplitOutput, BoxError> {
        let out_dir = &self.cfg.output_dir;
        let results: Vec<Result<(FigurePanels, Vec<Warning>), BoxError>> = input
            .kept
            .par_iter()
            .map(|k| {
                let meta = &k.meta;
                let subject = format!("{}/{}", meta.package_id, meta.figure_id);
                let mut warnings = Vec::new();
                let image = match fs::read(&meta.source_path)
                    .map_err(|e| e.to_string())
                    .and_then(|b| Raster::decode(&b, true).map_err(|e| e.to_string()))
                {
                    Ok(img) => img,
                    Err(e) => {
                        warnings.push(Warning::new("split", &subject, format!("cannot decode image: {e}")));
                        return Ok((figure_panels(meta, Vec::new(), Vec::new()), warnings));
                    }
                };
                let raw = match (self.cfg.split_mode, &self.client) {
                    (SplitMode::Detector, Some(client)) => {
                        let det = client.detect(&image)?;
                        panelsplit::filter_detections(&det, self.cfg.conf_threshold, self.cfg.nms_iou)
                    }
                    _ => panelsplit::split_gutters(&image, &self.cfg.gutter),
                };
                if raw.is_empty() {
                    warnings.push(Warning::new("split", &subject, "no panels found"));
                    return Ok((figure_panels(meta, Vec::new(), Vec::new()), warnings));
                }
                let order = panelsplit::reading_order(&raw)?;
                let boxes: Vec<SubfigureBox> = order.into_iter().map(|i| raw[i]).collect();
                let crops = panelsplit::crop_panels(&image, &boxes)?;
                let mut paths = Vec::with_capacity(crops.len());
                for (i, crop) in crops.iter().enumerate() {
                    let rel = format!(
                        "{CROPS_DIR}/{}/{}_{i:03}.png",
                        path_safe(&meta.package_id),
                        path_safe(&meta.figure_id)
                    );
                    let abs = out_dir.join(&rel);
                    if let Some(dir) = abs.parent() {
                        fs::create_dir_all(dir)?;
                    }
                    fs::write(&abs, crop.encode_png()?)?;
                    paths.push(rel);
                }
                Ok((figure_panels(meta, boxes, paths), warnings))
            })
            .collect();
        let mut out = SplitOutput {
            figures: Vec::new(),
            warnings: Vec::new(),
        };
        for r in results {
            let (f, w) = r?;
            out.figures.push(f);
            out.warnings.extend(w);
        }
        Ok(out)
    }

    fn parse(&self, input: &SplitOutput) -> ParseOutput {
        ParseOutput {
            captions: input.figures.par_iter().map(|f| split_caption(&f.meta.caption)).collect(),
        }
    }

    fn align(&self, split: &SplitOutput, parse: &ParseOutput) -> Result<AlignOutput, BoxError> {
        let taxonomy = match &self.cfg.taxonomy_file {
            Some(p) => Taxonomy::load(p)?,
            None => Taxonomy::default_table(),
        };
        let scorer: Option<&dyn EmbeddingScorer> = match self.cfg.align_mode {
            AlignPolicy::Auto | AlignPolicy::Similarity => self.client.as_ref().map(|c| c as &dyn EmbeddingScorer),
            _ => None,
        };
        let figures: Vec<Result<FigureAlignment, BoxError>> = split
            .figures
            .par_iter()
            .zip(&parse.captions)
            .map(|(fig, caption)| {
                let mut panels = Vec::with_capacity(fig.boxes.len());
                for (i, (b, path)) in fig.boxes.iter().zip(&fig.crops).enumerate() {
                    let crop = match scorer {
                        Some(_) => Raster::decode(&fs::read(self.cfg.output_dir.join(path))?, true)?,
                        None => Raster::filled(1, 1, 3, 255),
                    };
                    panels.push(Panel {
                        index: i,
                        bbox: *b,
                        crop,
                        image_path: path.clone(),
                    });
                }
                let alignment = align::choose_alignment(&fig.meta, &panels, caption, scorer, self.cfg.align_mode)?;
                let mut entries = align::entries_from_alignment(&fig.meta, &panels, caption, &alignment);
                let demographics = emit::extract_demographics(&fig.meta.caption);
                for e in &mut entries {
                    e.modality_tags = filter::tag_modality(&e.text, &taxonomy);
                    e.demographics = demographics;
                }
                Ok(FigureAlignment {
                    package_id: fig.meta.package_id.clone(),
                    figure_id: fig.meta.figure_id.clone(),
                    boxes: fig.boxes.clone(),
                    alignment,
                    entries,
                })
            })
            .collect();
        Ok(AlignOutput {
            figures: figures.into_iter().collect::<Result<_, _>>()?,
        })
    }

    fn emit(&self, align: &AlignOutput, counts: &mut StageCounts) -> Result<StatsReport, BoxError> {
        let exclusion = self.cfg.exclusion_hash_file.as_deref().map(emit::load_exclusion_hashes).transpose()?;
        let entries: Vec<DatasetEntry> = align.figures.iter().flat_map(|f| f.entries.iter().cloned()).collect();
        let outcome = emit::dedup(entries, &self.cfg.output_dir, exclusion.as_ref());
        for r in &outcome.removed {
            match r.reason {
                emit::RemovalReason::Excluded => counts.excluded += 1,
                emit::RemovalReason::Duplicate { .. } => counts.duplicates_removed += 1,
            }
        }
        counts.entries = outcome.kept.len();
        emit::write_jsonl(
            &outcome.kept,
            &self.cfg.output_dir.join(emit::DATASET_FILE),
            self.keys.get(Stage::Eval),
        )?;
        let compound: Vec<&FigureAlignment> = align.figures.iter().filter(|f| f.boxes.len() > 1).collect();
        let ledger = CaptionLedger {
            n_subfigures: compound.iter().map(|f| f.boxes.len() as u64).sum(),
            n_compound_figures: compound.len() as u64,
        };
        let stats = match emit::compute_stats(&outcome.kept, ledger) {
            // no compound figures: report the average as zero
            Err(EmitError::DivisionByZero) => emit::compute_stats(
                &outcome.kept,
                CaptionLedger {
                    n_subfigures: 0,
                    n_compound_figures: 1,
                },
            )?,
            other => other?,
        };
        emit::write_json(&self.cfg.output_dir.join(emit::STATS_FILE), &stats)?;
        Ok(stats)
    }

    fn eval(&self, align: &AlignOutput) -> Result<EvalReport, BoxError> {
        let mut report = EvalReport {
            figures_evaluated: 0,
            aligned_figures_evaluated: 0,
            metrics: BTreeMap::new(),
        };
        let mut by_mode: BTreeMap<&str, usize> = BTreeMap::new();
        for f in &align.figures {
            let mode = match f.alignment.mode {
                AlignmentMode::LabelOrder => "label_order",
                AlignmentMode::Similarity => "similarity",
                AlignmentMode::FullCaptionFallback => "full_caption_fallback",
            };
            *by_mode.entry(mode).or_insert(0) += f.entries.len();
        }
        let total: usize = by_mode.values().sum();
        for (mode, n) in by_mode {
            report
                .metrics
                .insert(format!("pair_fraction@mode={mode}"), n as f64 / total as f64);
        }
        let Some(gt_path) = &self.cfg.ground_truth_file else {
            return Ok(report);
        };
        let truth = load_ground_truth(gt_path)?;
        let predicted: BTreeMap<(&str, &str), &FigureAlignment> = align
            .figures
            .iter()
            .map(|f| ((f.package_id.as_str(), f.figure_id.as_str()), f))
            .collect();
        let mut det = DetectionSet::<f64>::new();
        let (mut correct, mut gold_total) = (0.0, 0usize);
        for g in &truth.figures {
            let Some(p) = predicted.get(&(g.package_id.as_str(), g.figure_id.as_str())) else {
                continue;
            };
            report.figures_evaluated += 1;
            det.insert(
                format!("{}/{}", g.package_id, g.figure_id),
                p.boxes
                    .iter()
                    .map(|b| ScoredRect {
                        rect: b.rect(),
                        confidence: b.confidence,
                    })
                    .collect(),
                g.panels.iter().map(|b| b.rect::<f64>()).collect::<Vec<Rect<f64>>>(),
            );
            if let Some(gold) = &g.gold_pairs {
                report.aligned_figures_evaluated += 1;
                gold_total += gold.len();
                if let Ok(acc) = metrics::alignment_accuracy(&p.alignment, gold) {
                    if p.alignment.pairs.len() == gold.len() {
                        correct += acc * gold.len() as f64;
                    }
                }
            }
        }
        if det.ground_truth_count() > 0 {
            let iou = 0.5;
            let conf = self.cfg.conf_threshold;
            report
                .metrics
                .insert(format!("average_precision@iou={iou}"), metrics::average_precision(&det, iou)?);
            let (p, r) = metrics::precision_recall(&det, conf, iou);
            report.metrics.insert(format!("precision@conf={conf},iou={iou}"), p);
            report.metrics.insert(format!("recall@conf={conf},iou={iou}"), r);
        }
        if gold_total > 0 {
            report.metrics.insert("alignment_accuracy".into(), correct / gold_total as f64);
        }
        Ok(report)
    }
}

fn figure_panels(meta: &FigureMeta, boxes: Vec<SubfigureBox>, crops: Vec<String>) -> FigurePanels {
    FigurePanels {
        meta: meta.clone(),
        boxes,
        crops,
    }
}

fn path_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

fn crops_present(cfg: &PipelineConfig, split: &SplitOutput) -> bool {
    split
        .figures
        .iter()
        .flat_map(|f| &f.crops)
        .all(|c| cfg.output_dir.join(c).is_file())
}

fn fill_counts(counts: &mut StageCounts, ing: Option<&IngestOutput>, filt: Option<&FilterOutput>, split: Option<&SplitOutput>) {
    if let Some(i) = ing {
        counts.packages = i.packages;
        counts.figures_in = i.figures.len();
    }
    if let Some(f) = filt {
        counts.figures_kept = f.kept.len();
        counts.dropped_no_keyword = f.dropped_no_keyword;
        counts.dropped_classifier = f.dropped_classifier;
    }
    if let Some(s) = split {
        counts.compound_figures = s.figures.iter().filter(|f| f.boxes.len() > 1).count();
        counts.subfigures = s.figures.iter().map(|f| f.boxes.len()).sum();
    }
}

fn fill_parse_counts(counts: &mut StageCounts, parse: &ParseOutput) {
    counts.separable_captions = parse.captions.iter().filter(|c| c.is_separable()).count();
    counts.subcaptions = parse.captions.iter().map(|c| c.subcaptions().len()).sum();
}

fn fill_align_counts(counts: &mut StageCounts, align: &AlignOutput) {
    for f in &align.figures {
        let n = f.entries.len();
        match f.alignment.mode {
            AlignmentMode::LabelOrder => counts.aligned_label_order += n,
            AlignmentMode::Similarity => counts.aligned_similarity += n,
            AlignmentMode::FullCaptionFallback => counts.aligned_fallback += n,
        }
    }
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, BoxError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    Ok(pool.install(f))
}

/// Run every stage, reusing checkpoints whose keys still match, and write
/// `dataset.jsonl`, `manifest.json`, `stats.json`, `eval.json` and
/// `report.json` into the output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let mut report = RunReport::default();
    let result = with_pool(cfg.workers, || run_all(cfg, &mut report));
    let partial = report.clone();
    match result {
        Ok(r) => r,
        Err(source) => Err(PipelineError::Stage {
            stage: Stage::Ingest,
            source,
            partial: Box::new(partial),
        }),
    }
}

fn timed<T>(report: &mut RunReport, stage: Stage, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    report.stage_ms.insert(stage.name().into(), t.elapsed().as_secs_f64() * 1e3);
    out
}

fn run_all(cfg: &PipelineConfig, report: &mut RunReport) -> Result<RunReport, PipelineError> {
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| stage_err(Stage::Ingest, report)(Box::new(e)))?;
    let runner = Runner::new(cfg).map_err(|e| stage_err(Stage::Ingest, report)(e))?;
    report.config_hash = runner.keys.get(Stage::Eval).to_string();

    macro_rules! stage {
        ($stage:expr, $reuse:expr, $compute:expr) => {{
            let stage = $stage;
            let cached = runner.load(stage).filter($reuse);
            match cached {
                Some(v) => {
                    debug!(%stage, "reusing checkpoint");
                    report.reused_stages.push(stage);
                    v
                }
                None => {
                    let v = timed(report, stage, || $compute).map_err(|e| stage_err(stage, report)(e))?;
                    runner.store(stage, &v).map_err(|e| stage_err(stage, report)(e))?;
                    v
                }
            }
        }};
    }

    let ing: IngestOutput = stage!(Stage::Ingest, |_: &IngestOutput| true, runner.ingest());
    report.warnings.extend(ing.warnings.iter().cloned());
    fill_counts(&mut report.counts, Some(&ing), None, None);

    let filt: FilterOutput = stage!(Stage::Filter, |_: &FilterOutput| true, runner.filter(&ing));
    fill_counts(&mut report.counts, None, Some(&filt), None);

    let split: SplitOutput = stage!(Stage::Split, |s: &SplitOutput| crops_present(cfg, s), runner.split(&filt));
    report.warnings.extend(split.warnings.iter().cloned());
    fill_counts(&mut report.counts, None, None, Some(&split));

    let parse: ParseOutput = stage!(Stage::Parse, |_: &ParseOutput| true, Ok::<_, BoxError>(runner.parse(&split)));
    fill_parse_counts(&mut report.counts, &parse);

    let align: AlignOutput = stage!(Stage::Align, |_: &AlignOutput| true, runner.align(&split, &parse));
    fill_align_counts(&mut report.counts, &align);

    let mut counts = report.counts.clone();
    timed(report, Stage::Emit, || runner.emit(&align, &mut counts)).map_err(|e| stage_err(Stage::Emit, report)(e))?;
    report.counts = counts;

    let eval = timed(report, Stage::Eval, || runner.eval(&align)).map_err(|e| stage_err(Stage::Eval, report)(e))?;
    emit::write_json(&cfg.output_dir.join(EVAL_FILE), &eval)
        .map_err(|e| stage_err(Stage::Eval, report)(Box::new(e)))?;
    emit::write_json(&cfg.output_dir.join(REPORT_FILE), &*report)
        .map_err(|e| stage_err(Stage::Eval, report)(Box::new(e)))?;
    info!(entries = report.counts.entries, reused = report.reused_stages.len(), "pipeline finished");
    Ok(report.clone())
}

/// What a single-stage invocation produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub items: usize,
    pub warnings: Vec<Warning>,
}

/// Run one stage from the previous stage's checkpoint, which must exist and
/// match the current config.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<StageSummary, PipelineError> {
    let report = RunReport::default();
    with_pool(cfg.workers, || run_one(cfg, stage, &report))
        .map_err(|e| stage_err(stage, &report)(e))?
}

fn run_one(cfg: &PipelineConfig, stage: Stage, report: &RunReport) -> Result<StageSummary, PipelineError> {
    let err = |e: BoxError| stage_err(stage, report)(e);
    fs::create_dir_all(&cfg.output_dir).map_err(|e| err(Box::new(e)))?;
    let runner = Runner::new(cfg).map_err(err)?;
    let need = |needs: Stage| PipelineError::MissingCheckpoint { stage, needs };
    let summary = |items: usize, warnings: Vec<Warning>| StageSummary { stage, items, warnings };
    match stage {
        Stage::Ingest => {
            let out = runner.ingest().map_err(err)?;
            runner.store(stage, &out).map_err(err)?;
            Ok(summary(out.figures.len(), out.warnings))
        }
        Stage::Filter => {
            let ing: IngestOutput = runner.load(Stage::Ingest).ok_or_else(|| need(Stage::Ingest))?;
            let out = runner.filter(&ing).map_err(err)?;
            runner.store(stage, &out).map_err(err)?;
            Ok(summary(out.kept.len(), Vec::new()))
        }
        Stage::Split => {
            let filt: FilterOutput = runner.load(Stage::Filter).ok_or_else(|| need(Stage::Filter))?;
            let out = runner.split(&filt).map_err(err)?;
            runner.store(stage, &out).map_err(err)?;
            Ok(summary(out.figures.iter().map(|f| f.boxes.len()).sum(), out.warnings))
        }
        Stage::Parse => {
            let split: SplitOutput = runner.load(Stage::Split).ok_or_else(|| need(Stage::Split))?;
            let out = runner.parse(&split);
            runner.store(stage, &out).map_err(err)?;
            Ok(summary(out.captions.iter().filter(|c| c.is_separable()).count(), Vec::new()))
        }
        Stage::Align => {
            let split: SplitOutput = runner.load(Stage::Split).ok_or_else(|| need(Stage::Split))?;
            let parse: ParseOutput = runner.load(Stage::Parse).ok_or_else(|| need(Stage::Parse))?;
            let out = runner.align(&split, &parse).map_err(err)?;
            runner.store(stage, &out).map_err(err)?;
            Ok(summary(out.figures.iter().map(|f| f.entries.len()).sum(), Vec::new()))
        }
        Stage::Emit => {
            let align: AlignOutput = runner.load(Stage::Align).ok_or_else(|| need(Stage::Align))?;
            let mut counts = StageCounts::default();
            runner.emit(&align, &mut counts).map_err(err)?;
            Ok(summary(counts.entries, Vec::new()))
        }
        Stage::Eval => {
            let align: AlignOutput = runner.load(Stage::Align).ok_or_else(|| need(Stage::Align))?;
            let eval = runner.eval(&align).map_err(err)?;
            emit::write_json(&cfg.output_dir.join(EVAL_FILE), &eval).map_err(|e| err(Box::new(e)))?;
            Ok(summary(eval.figures_evaluated, Vec::new()))
        }
    }
}

/// Exclusion hashes as a set, for callers outside the pipeline.
pub fn exclusion_set(cfg: &PipelineConfig) -> Result<Option<HashSet<String>>, EmitError> {
    cfg.exclusion_hash_file.as_deref().map(emit::load_exclusion_hashes).transpose()
}
