//! Deterministic synthetic data: grid compound figures with known panel
//! boxes, and a small article archive with a ledger of expected counts.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emit::sha256_hex;
use crate::ingest::{ManifestEntry, ManifestFile, MANIFEST_FILE};
use crate::panelsplit::SubfigureBox;
use crate::raster::{Raster, RasterError};

pub const LEDGER_FILE: &str = "ledger.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const EXCLUSION_FILE: &str = "exclusion_hashes.txt";
pub const CONFIG_FILE: &str = "figforge.toml";
pub const ARCHIVE_DIR: &str = "archive";

/// Darkest and lightest panel base shades; the light end stays well under
/// the splitter's whiteness threshold.
const SHADE_RANGE: (u8, u8) = (30, 200);

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FixtureError + '_ {
    move |source| FixtureError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: u32,
    pub cols: u32,
    pub panel_min: u32,
    pub panel_max: u32,
}

impl GridSpec {
    pub fn new(rows: u32, cols: u32) -> Self {
        Self {
            rows,
            cols,
            panel_min: 36,
            panel_max: 90,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthFigure {
    pub image: Raster,
    /// Ground-truth panels, row-major.
    pub panels: Vec<SubfigureBox>,
    pub rows: u32,
    pub cols: u32,
}

/// Every layout from 1×2 to 4×4.
pub fn grid_layouts() -> Vec<(u32, u32)> {
    (1..=4)
        .flat_map(|r| (1..=4).map(move |c| (r, c)))
        .filter(|&(r, c)| r * c > 1)
        .collect()
}

fn fill_rect(img: &mut Raster, x: u32, y: u32, w: u32, h: u32, shade: u8) {
    let px = [shade; 3];
    for yy in y..y + h {
        for xx in x..x + w {
            img.set_pixel(xx, yy, &px[..img.channels() as usize]);
        }
    }
}

/// Solid panel with a few darker or lighter blocks so crops differ.
fn paint_panel<R: Rng>(img: &mut Raster, b: &SubfigureBox, shade: u8, rng: &mut R) {
    fill_rect(img, b.x, b.y, b.w, b.h, shade);
    for _ in 0..rng.gen_range(1..=3) {
        let w = rng.gen_range(4..=b.w / 2);
        let h = rng.gen_range(4..=b.h / 2);
        let x = b.x + rng.gen_range(0..=b.w - w);
        let y = b.y + rng.gen_range(0..=b.h - h);
        let s = rng.gen_range(0..=SHADE_RANGE.1);
        fill_rect(img, x, y, w, h, s);
    }
}

/// Gutter width at least `frac` of the larger image side (plus one pixel),
/// so the splitter's minimum-length rule is met at every recursion level.
fn gutter_for(base: u32, margin: u32, rows: u32, cols: u32, pw: u32, ph: u32) -> u32 {
    let mut g = base;
    loop {
        let w = 2 * margin + cols * pw + (cols - 1) * g;
        let h = 2 * margin + rows * ph + (rows - 1) * g;
        let need = (0.02 * w.max(h) as f64).ceil() as u32 + 1;
        if g >= need {
            return g;
        }
        g = need;
    }
}

pub fn synth_grid<R: Rng>(spec: GridSpec, rng: &mut R) -> SynthFigure {
    let GridSpec { rows, cols, .. } = spec;
    let pw = rng.gen_range(spec.panel_min..=spec.panel_max);
    let ph = rng.gen_range(spec.panel_min..=spec.panel_max);
    let margin = rng.gen_range(2..=12);
    let g = gutter_for(rng.gen_range(4..=14), margin, rows, cols, pw, ph);
    let width = 2 * margin + cols * pw + (cols - 1) * g;
    let height = 2 * margin + rows * ph + (rows - 1) * g;

    let mut shades: Vec<u8> = (SHADE_RANGE.0..=SHADE_RANGE.1).collect();
    shades.shuffle(rng);
    let mut image = Raster::filled(width, height, 3, 255);
    let mut panels = Vec::with_capacity((rows * cols) as usize);
    for r in 0..rows {
        for c in 0..cols {
            let b = SubfigureBox::new(margin + c * (pw + g), margin + r * (ph + g), pw, ph, 1.0);
            paint_panel(&mut image, &b, shades[panels.len()], rng);
            panels.push(b);
        }
    }
    SynthFigure {
        image,
        panels,
        rows,
        cols,
    }
}

/// `n` figures cycling through [`grid_layouts`].
pub fn synth_suite(n: usize, seed: u64) -> Vec<SynthFigure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layouts = grid_layouts();
    (0..n)
        .map(|i| {
            let (r, c) = layouts[i % layouts.len()];
            synth_grid(GridSpec::new(r, c), &mut rng)
        })
        .collect()
}

/// Expected counts for the generated archive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLedger {
    pub seed: u64,
    pub packages: usize,
    pub figures_in: usize,
    pub figures_kept: usize,
    pub compound_figures: usize,
    pub subfigures: usize,
    pub separable_captions: usize,
    pub label_aligned: usize,
    pub duplicates_removed: usize,
    pub excluded: usize,
    pub expected_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFigure {
    pub package_id: String,
    pub figure_id: String,
    /// Panels in reading order.
    pub panels: Vec<SubfigureBox>,
    /// `(panel, subcaption)` pairs when the caption labels every panel.
    pub gold_pairs: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub figures: Vec<GroundTruthFigure>,
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, FixtureError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| FixtureError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}

#[derive(Clone, Copy)]
enum Layout {
    Grid(u32, u32),
    /// Same image bytes as an earlier figure.
    CopyOf(&'static str, &'static str),
}

#[derive(Clone, Copy, PartialEq)]
enum Expect {
    /// Labels cover every panel in order.
    Labeled,
    /// Labelled caption whose count disagrees with the panels.
    Mismatch,
    Fallback,
    Dropped,
}

struct FigureSpec {
    package: &'static str,
    figure: &'static str,
    layout: Layout,
    caption: Option<&'static str>,
    expect: Expect,
    /// Panel whose crop hash goes in the exclusion list.
    exclude_panel: Option<usize>,
}

const fn fig(
    package: &'static str,
    figure: &'static str,
    layout: Layout,
    caption: Option<&'static str>,
    expect: Expect,
) -> FigureSpec {
    FigureSpec {
        package,
        figure,
        layout,
        caption,
        expect,
        exclude_panel: None,
    }
}

fn corpus_table() -> Vec<FigureSpec> {
    use Expect::*;
    use Layout::*;
    vec![
        fig("pkg001", "F1", Grid(2, 2), Some("(a) Axial CT of the chest. (b) Coronal CT. (c) MRI T1. (d) MRI T2."), Labeled),
        fig("pkg001", "F2", Grid(1, 2), Some("Chest X-ray of a 54-year-old male with pneumonia."), Fallback),
        fig(
            "pkg002",
            "F1",
            Grid(1, 3),
            Some("Ultrasound of the kidney. (a) Longitudinal view. (b) Transverse view. (c) Color Doppler."),
            Labeled,
        ),
        fig("pkg002", "F2", Grid(1, 2), Some("Bar chart of annual publication counts by year."), Dropped),
        fig("pkg002", "F3", Grid(2, 1), Some("A. MRI of a 61-year-old woman. B. Follow-up MRI after six months."), Labeled),
        fig(
            "pkg003",
            "F1",
            Grid(2, 3),
            Some("(a-c) Axial CT at three levels. (d-f) Corresponding PET slices."),
            Labeled,
        ),
        fig("pkg003", "F2", Grid(1, 2), None, Dropped),
        fig(
            "pkg003",
            "F3",
            Grid(1, 2),
            Some("(a) Histology showing a mitotic figure. (b) H&E stain at higher magnification."),
            Labeled,
        ),
        fig("pkg004", "F1", Grid(1, 3), Some("(a) CT before treatment. (b) CT after treatment."), Mismatch),
        fig("pkg004", "F2", CopyOf("pkg001", "F2"), Some("Chest X-ray of a 54-year-old male with pneumonia."), Fallback),
        FigureSpec {
            exclude_panel: Some(0),
            ..fig(
                "pkg005",
                "F1",
                Grid(2, 2),
                Some("Fluorescence microscopy of cultured cells. (i) Control. (ii) Day 1. (iii) Day 3. (iv) Day 7."),
                Labeled,
            )
        },
        fig("pkg005", "F2", Grid(1, 1), Some("Ultrasound of the liver in a 45 yo F."), Fallback),
    ]
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FixtureError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

/// Write the mini archive plus `ledger.json`, `ground_truth.json`,
/// `exclusion_hashes.txt` and a ready-to-run `figforge.toml` under `out`.
pub fn generate_mini_corpus(out: &Path, seed: u64) -> Result<CorpusLedger, FixtureError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = corpus_table();
    let archive = out.join(ARCHIVE_DIR);

    let mut images: Vec<(&str, &str, SynthFigure)> = Vec::new();
    let mut manifests: Vec<ManifestFile> = Vec::new();
    let mut truth = Vec::new();
    let mut exclusions = Vec::new();
    let mut ledger = CorpusLedger {
        seed,
        packages: 0,
        figures_in: table.len(),
        figures_kept: 0,
        compound_figures: 0,
        subfigures: 0,
        separable_captions: 0,
        label_aligned: 0,
        duplicates_removed: 0,
        excluded: 0,
        expected_entries: 0,
    };

    for spec in &table {
        let figure = match spec.layout {
            Layout::Grid(r, c) => {
                let mut g = GridSpec::new(r, c);
                if r * c == 1 {
                    g.panel_min = 60;
                }
                synth_grid(g, &mut rng)
            }
            Layout::CopyOf(p, f) => {
                let (_, _, src) = images
                    .iter()
                    .find(|(ip, iff, _)| *ip == p && *iff == f)
                    .expect("copy source precedes copy");
                ledger.duplicates_removed += src.panels.len();
                src.clone()
            }
        };
        let file = format!("{}.png", spec.figure);
        write_file(&archive.join(spec.package).join(&file), &figure.image.encode_png()?)?;

        match manifests.last_mut() {
            Some(m) if m.package_id == spec.package => {}
            _ => manifests.push(ManifestFile {
                package_id: spec.package.to_string(),
                figure_entries: Vec::new(),
            }),
        }
        manifests.last_mut().unwrap().figure_entries.push(ManifestEntry {
            figure_id: spec.figure.to_string(),
            image_path: file,
            caption: spec.caption.map(str::to_string),
        });

        if spec.expect != Expect::Dropped {
            let n = figure.panels.len();
            ledger.figures_kept += 1;
            ledger.subfigures += n;
            ledger.compound_figures += usize::from(n > 1);
            ledger.separable_captions += usize::from(matches!(spec.expect, Expect::Labeled | Expect::Mismatch));
            if let Some(k) = spec.exclude_panel {
                let b = figure.panels[k];
                let crop = figure.image.crop(b.x, b.y, b.w, b.h)?;
                exclusions.push(sha256_hex(&crop.encode_png()?));
                ledger.excluded += 1;
            }
            let labeled = spec.expect == Expect::Labeled;
            ledger.label_aligned += if labeled { n } else { 0 };
            truth.push(GroundTruthFigure {
                package_id: spec.package.to_string(),
                figure_id: spec.figure.to_string(),
                panels: figure.panels.clone(),
                gold_pairs: labeled.then(|| (0..n).map(|k| (k, k)).collect()),
            });
        }
        images.push((spec.package, spec.figure, figure));
    }
    ledger.packages = manifests.len();
    ledger.expected_entries = ledger.subfigures - ledger.duplicates_removed - ledger.excluded;

    for m in &manifests {
        write_file(&archive.join(&m.package_id).join(MANIFEST_FILE), &pretty(m))?;
    }
    write_file(&out.join(LEDGER_FILE), &pretty(&ledger))?;
    write_file(&out.join(GROUND_TRUTH_FILE), &pretty(&GroundTruth { figures: truth }))?;
    let mut ex = String::from("# crop hashes withheld from the dataset\n");
    for h in &exclusions {
        ex.push_str(h);
        ex.push('\n');
    }
    write_file(&out.join(EXCLUSION_FILE), ex.as_bytes())?;
    let config = format!(
        "archive_root = \"{ARCHIVE_DIR}\"\noutput_dir = \"out\"\nexclusion_hash_file = \"{EXCLUSION_FILE}\"\nground_truth_file = \"{GROUND_TRUTH_FILE}\"\nseed = {seed}\n"
    );
    write_file(&out.join(CONFIG_FILE), config.as_bytes())?;
    Ok(ledger)
}
