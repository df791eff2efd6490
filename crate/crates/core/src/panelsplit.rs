//! Compound figure separation: whitespace-gutter splitting, detector
//! post-processing, reading order and cropping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, Rect};
use crate::raster::{Raster, RasterError};
use crate::Scalar;

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.7;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("reading order of an empty box list")]
    EmptyInput,
    #[error(transparent)]
    OutOfBounds(#[from] RasterError),
}

/// Axis-aligned panel region in pixel coordinates with a detection confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubfigureBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub confidence: f64,
}

impl SubfigureBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32, confidence: f64) -> Self {
        Self {
            x,
            y,
            w,
            h,
            confidence,
        }
    }

    pub fn rect<T: Scalar>(&self) -> Rect<T> {
        Rect::new(
            T::from_u32(self.x).unwrap(),
            T::from_u32(self.y).unwrap(),
            T::from_u32(self.w).unwrap(),
            T::from_u32(self.h).unwrap(),
        )
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn iou(&self, other: &SubfigureBox) -> f64 {
        metrics::iou(&self.rect::<f64>(), &other.rect())
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x as u64 + self.w as u64 <= width as u64
            && self.y as u64 + self.h as u64 <= height as u64
            && self.confidence.is_finite()
    }
}

/// Knobs for the projection-profile splitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GutterParams {
    /// A row/column whose mean luminance reaches this fraction counts as white.
    pub whiteness_threshold: f64,
    /// Minimum gutter length as a fraction of the region's extent on the split axis.
    pub min_gutter_frac: f64,
    pub min_panel_px: u32,
    pub max_depth: u32,
}

impl Default for GutterParams {
    fn default() -> Self {
        Self {
            whiteness_threshold: 0.95,
            min_gutter_frac: 0.02,
            min_panel_px: 32,
            max_depth: 4,
        }
    }
}

impl GutterParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.whiteness_threshold > 0.0 && self.whiteness_threshold <= 1.0) {
            return Err("whiteness_threshold must be in (0, 1]".into());
        }
        if !(self.min_gutter_frac > 0.0 && self.min_gutter_frac.is_finite()) {
            return Err("min_gutter_frac must be positive".into());
        }
        if self.min_panel_px == 0 || self.max_depth == 0 {
            return Err("min_panel_px and max_depth must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    /// Horizontal gutters; cuts the region into stacked strips.
    Rows,
    /// Vertical gutters; cuts the region into side-by-side strips.
    Cols,
}

impl Axis {
    fn other(self) -> Self {
        match self {
            Axis::Rows => Axis::Cols,
            Axis::Cols => Axis::Rows,
        }
    }
}

/// Half-open pixel region.
#[derive(Debug, Clone, Copy)]
struct Region {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

struct LumaMap {
    width: usize,
    lum: Vec<f64>,
}

impl LumaMap {
    fn new(image: &Raster) -> Self {
        let mut lum = Vec::with_capacity(image.width() as usize * image.height() as usize);
        for y in 0..image.height() {
            for x in 0..image.width() {
                lum.push(image.luminance(x, y));
            }
        }
        Self {
            width: image.width() as usize,
            lum,
        }
    }

    /// Mean luminance of each line along `axis` inside `r`.
    fn profile(&self, r: Region, axis: Axis) -> Vec<f64> {
        match axis {
            Axis::Rows => (r.y0..r.y1)
                .map(|y| {
                    let row = &self.lum[y as usize * self.width..][r.x0 as usize..r.x1 as usize];
                    row.iter().sum::<f64>() / row.len() as f64
                })
                .collect(),
            Axis::Cols => {
                let mut sums = vec![0.0; (r.x1 - r.x0) as usize];
                for y in r.y0..r.y1 {
                    let row = &self.lum[y as usize * self.width..][r.x0 as usize..r.x1 as usize];
                    for (s, v) in sums.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                let n = (r.y1 - r.y0) as f64;
                sums.into_iter().map(|s| s / n).collect()
            }
        }
    }
}

struct Splitter<'a> {
    luma: LumaMap,
    params: &'a GutterParams,
    out: Vec<SubfigureBox>,
}

impl Splitter<'_> {
    fn is_white(&self, v: f64) -> bool {
        v >= self.params.whiteness_threshold
    }

    /// Shrink `r` to its non-white rows and columns; `None` if all white.
    fn trim(&self, mut r: Region) -> Option<Region> {
        for axis in [Axis::Rows, Axis::Cols] {
            let prof = self.luma.profile(r, axis);
            let first = prof.iter().position(|&v| !self.is_white(v))? as u32;
            let last = prof.iter().rposition(|&v| !self.is_white(v))? as u32;
            match axis {
                Axis::Rows => {
                    r.y1 = r.y0 + last + 1;
                    r.y0 += first;
                }
                Axis::Cols => {
                    r.x1 = r.x0 + last + 1;
                    r.x0 += first;
                }
            }
        }
        Some(r)
    }

    /// Content segments of `r` between qualifying gutters along `axis`.
    fn segments(&self, r: Region, axis: Axis) -> Vec<Region> {
        let prof = self.luma.profile(r, axis);
        let extent = prof.len();
        let min_len = ((self.params.min_gutter_frac * extent as f64).ceil() as usize).max(1);
        let mut cuts = Vec::new();
        let mut i = 0;
        while i < extent {
            if self.is_white(prof[i]) {
                let start = i;
                while i < extent && self.is_white(prof[i]) {
                    i += 1;
                }
                if i - start >= min_len && start > 0 && i < extent {
                    cuts.push((start, i));
                }
            } else {
                i += 1;
            }
        }
        if cuts.is_empty() {
            return Vec::new();
        }
        let mut bounds = Vec::with_capacity(cuts.len() + 1);
        let mut lo = 0;
        for (s, e) in cuts {
            bounds.push((lo, s));
            lo = e;
        }
        bounds.push((lo, extent));
        bounds
            .into_iter()
            .map(|(a, b)| match axis {
                Axis::Rows => Region {
                    y0: r.y0 + a as u32,
                    y1: r.y0 + b as u32,
                    ..r
                },
                Axis::Cols => Region {
                    x0: r.x0 + a as u32,
                    x1: r.x0 + b as u32,
                    ..r
                },
            })
            .collect()
    }

    fn emit(&mut self, r: Region) {
        let (w, h) = (r.x1 - r.x0, r.y1 - r.y0);
        if w >= self.params.min_panel_px && h >= self.params.min_panel_px {
            self.out.push(SubfigureBox::new(r.x0, r.y0, w, h, 1.0));
        }
    }

    fn split(&mut self, region: Region, depth: u32, axis: Axis) {
        let Some(r) = self.trim(region) else {
            return;
        };
        if depth >= self.params.max_depth {
            self.emit(r);
            return;
        }
        let (segments, used) = match self.segments(r, axis) {
            s if !s.is_empty() => (s, axis),
            _ => (self.segments(r, axis.other()), axis.other()),
        };
        if segments.is_empty() {
            self.emit(r);
            return;
        }
        for seg in segments {
            self.split(seg, depth + 1, used.other());
        }
    }
}

/// Recursive alternating row/column projection-profile split. Boxes come
/// back in discovery order with confidence 1.0; a fully white image yields
/// no boxes.
pub fn split_gutters(image: &Raster, params: &GutterParams) -> Vec<SubfigureBox> {
    let mut splitter = Splitter {
        luma: LumaMap::new(image),
        params,
        out: Vec::new(),
    };
    let full = Region {
        x0: 0,
        y0: 0,
        x1: image.width(),
        y1: image.height(),
    };
    splitter.split(full, 0, Axis::Rows);
    splitter.out
}

/// Confidence threshold then greedy non-maximum suppression. Output is
/// sorted by descending confidence (stable for ties).
pub fn filter_detections(raw: &[SubfigureBox], conf_threshold: f64, nms_iou: f64) -> Vec<SubfigureBox> {
    let mut candidates: Vec<SubfigureBox> = raw
        .iter()
        .copied()
        .filter(|b| b.confidence >= conf_threshold)
        .collect();
    candidates.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<SubfigureBox> = Vec::with_capacity(candidates.len());
    for cand in candidates {
        if kept.iter().all(|k| k.iou(&cand) < nms_iou) {
            kept.push(cand);
        }
    }
    kept
}

/// Twice the median of `v`, so the result stays integral.
fn double_median(mut v: Vec<i64>) -> i64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        2 * v[n / 2]
    } else {
        v[n / 2 - 1] + v[n / 2]
    }
}

/// Row-major reading order. Boxes whose vertical centers lie within half the
/// median box height of a row's mean center join that row; rows run top to
/// bottom and boxes left to right within a row.
pub fn reading_order(boxes: &[SubfigureBox]) -> Result<Vec<usize>, PanelError> {
    if boxes.is_empty() {
        return Err(PanelError::EmptyInput);
    }
    // Integer arithmetic on doubled centers keeps grouping exact and
    // translation invariant.
    let median2 = double_median(boxes.iter().map(|b| b.h as i64).collect());
    let center2 = |b: &SubfigureBox| 2 * b.y as i64 + b.h as i64;

    let mut by_center: Vec<usize> = (0..boxes.len()).collect();
    by_center.sort_by_key(|&i| (center2(&boxes[i]), i));

    let mut rows: Vec<Vec<usize>> = Vec::new();
    for idx in by_center {
        let c2 = center2(&boxes[idx]);
        let joins = rows.last().is_some_and(|row| {
            let n = row.len() as i64;
            let sum2: i64 = row.iter().map(|&i| center2(&boxes[i])).sum();
            // |c - mean| <= median / 2
            2 * (n * c2 - sum2).abs() <= n * median2
        });
        if joins {
            rows.last_mut().unwrap().push(idx);
        } else {
            rows.push(vec![idx]);
        }
    }
    let mut order = Vec::with_capacity(boxes.len());
    for mut row in rows {
        row.sort_by_key(|&i| (boxes[i].x, i));
        order.extend(row);
    }
    Ok(order)
}

/// One raster per box, exactly `w`x`h` with the input's channel count.
pub fn crop_panels(image: &Raster, boxes: &[SubfigureBox]) -> Result<Vec<Raster>, PanelError> {
    boxes
        .iter()
        .map(|b| image.crop(b.x, b.y, b.w, b.h).map_err(PanelError::from))
        .collect()
}
