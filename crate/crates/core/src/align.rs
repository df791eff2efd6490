//! Subfigure to subcaption assignment.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::captionparse::{SplitResult, Subcaption};
use crate::emit::DatasetEntry;
use crate::infer::{EmbeddingScorer, InferError};
use crate::ingest::FigureMeta;
use crate::panelsplit::SubfigureBox;
use crate::raster::Raster;
use crate::Scalar;

/// Confidence given to full-caption fallback pairs; a filtering convention.
pub const FALLBACK_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    LabelOrder,
    Similarity,
    FullCaptionFallback,
}

/// `pairs[k] = (subfigure, subcaption)`; every subfigure appears once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub pairs: Vec<(usize, usize)>,
    pub mode: AlignmentMode,
    pub confidence: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{subfigures} subfigures but {subcaptions} subcaptions")]
pub struct CountMismatch {
    pub subfigures: usize,
    pub subcaptions: usize,
}

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("similarity matrix is empty")]
    EmptyMatrix,
    #[error("similarity alignment requested without an embedding scorer")]
    MissingScorer,
    #[error("inference failed for {package_id}/{figure_id}: {source}")]
    Inference {
        package_id: String,
        figure_id: String,
        #[source]
        source: InferError,
    },
    #[error("embedding dimensions disagree ({0} vs {1})")]
    DimMismatch(usize, usize),
}

/// Which assignment strategy `resolve` may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignPolicy {
    /// Similarity when a scorer exists, else label order, else fallback.
    #[default]
    Auto,
    Label,
    Similarity,
    Fallback,
}

/// Pair subfigure k (reading order) with the k-th subcaption in label order.
pub fn align_label_order(n_subfigs: usize, subcaps: &[Subcaption]) -> Result<Alignment, CountMismatch> {
    if n_subfigs == 0 || n_subfigs != subcaps.len() {
        return Err(CountMismatch {
            subfigures: n_subfigs,
            subcaptions: subcaps.len(),
        });
    }
    let mut by_label: Vec<usize> = (0..subcaps.len()).collect();
    by_label.sort_by(|&a, &b| subcaps[a].label.cmp(&subcaps[b].label).then(a.cmp(&b)));
    Ok(Alignment {
        pairs: by_label.into_iter().enumerate().collect(),
        mode: AlignmentMode::LabelOrder,
        confidence: vec![1.0; n_subfigs],
    })
}

/// Row-wise argmax (lowest column wins ties); confidence is the row softmax
/// at the chosen column. Several subfigures may share a subcaption.
pub fn align_similarity<T: Scalar>(sim: &Array2<T>) -> Result<Alignment, AlignError> {
    let (rows, cols) = sim.dim();
    if rows == 0 || cols == 0 {
        return Err(AlignError::EmptyMatrix);
    }
    let mut pairs = Vec::with_capacity(rows);
    let mut confidence = Vec::with_capacity(rows);
    for (i, row) in sim.outer_iter().enumerate() {
        let mut best = 0;
        for j in 1..cols {
            if row[j] > row[best] {
                best = j;
            }
        }
        let max = row[best];
        let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
        pairs.push((i, best));
        confidence.push((T::one() / denom).to_f64().unwrap_or(0.0));
    }
    Ok(Alignment {
        pairs,
        mode: AlignmentMode::Similarity,
        confidence,
    })
}

/// A cropped panel ready for alignment, in reading order.
#[derive(Debug, Clone)]
pub struct Panel {
    pub index: usize,
    pub bbox: SubfigureBox,
    pub crop: Raster,
    /// Where the crop is (or will be) written, relative to the output directory.
    pub image_path: String,
}

pub fn entry_id(package_id: &str, figure_id: &str, panel_index: usize) -> String {
    format!("{package_id}:{figure_id}:{panel_index:03}")
}

fn cosine_matrix(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<Array2<f64>, AlignError> {
    let norm = |v: &Vec<f32>| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, u) in a.iter().enumerate() {
        for (j, v) in b.iter().enumerate() {
            if u.len() != v.len() {
                return Err(AlignError::DimMismatch(u.len(), v.len()));
            }
            let dot: f64 = u.iter().zip(v).map(|(x, y)| *x as f64 * *y as f64).sum();
            let n = norm(u) * norm(v);
            out[[i, j]] = if n > 0.0 { dot / n } else { 0.0 };
        }
    }
    Ok(out)
}

fn similarity_alignment(
    meta: &FigureMeta,
    panels: &[Panel],
    subcaps: &[Subcaption],
    scorer: &dyn EmbeddingScorer,
) -> Result<Alignment, AlignError> {
    let wrap = |source: InferError| AlignError::Inference {
        package_id: meta.package_id.clone(),
        figure_id: meta.figure_id.clone(),
        source,
    };
    let images = panels
        .iter()
        .map(|p| {
            let png = p.crop.encode_png().map_err(|e| InferError::Encode(e.to_string()))?;
            scorer.embed_image(&png)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(wrap)?;
    let texts = subcaps
        .iter()
        .map(|s| scorer.embed_text(&s.text))
        .collect::<Result<Vec<_>, _>>()
        .map_err(wrap)?;
    align_similarity(&cosine_matrix(&images, &texts)?)
}

fn fallback(n: usize) -> Alignment {
    Alignment {
        pairs: (0..n).map(|i| (i, 0)).collect(),
        mode: AlignmentMode::FullCaptionFallback,
        confidence: vec![FALLBACK_CONFIDENCE; n],
    }
}

/// Choose an alignment for one figure under `policy`.
pub fn choose_alignment(
    meta: &FigureMeta,
    panels: &[Panel],
    split: &SplitResult,
    scorer: Option<&dyn EmbeddingScorer>,
    policy: AlignPolicy,
) -> Result<Alignment, AlignError> {
    let n = panels.len();
    let subcaps = split.subcaptions();
    if n == 0 {
        return Ok(fallback(0));
    }
    let alignment = match (policy, split.is_separable(), scorer) {
        (AlignPolicy::Fallback, _, _) => fallback(n),
        (AlignPolicy::Similarity, _, None) => return Err(AlignError::MissingScorer),
        (AlignPolicy::Similarity | AlignPolicy::Auto, true, Some(s)) => similarity_alignment(meta, panels, subcaps, s)?,
        (AlignPolicy::Label | AlignPolicy::Auto, true, _) => align_label_order(n, subcaps).unwrap_or_else(|_| fallback(n)),
        _ => fallback(n),
    };
    Ok(alignment)
}

/// One dataset entry per panel. Modality tags and demographics are left
/// empty for the caller to fill.
pub fn resolve(
    meta: &FigureMeta,
    panels: &[Panel],
    split: &SplitResult,
    scorer: Option<&dyn EmbeddingScorer>,
    policy: AlignPolicy,
) -> Result<Vec<DatasetEntry>, AlignError> {
    let alignment = choose_alignment(meta, panels, split, scorer, policy)?;
    Ok(entries_from_alignment(meta, panels, split, &alignment))
}

pub fn entries_from_alignment(
    meta: &FigureMeta,
    panels: &[Panel],
    split: &SplitResult,
    alignment: &Alignment,
) -> Vec<DatasetEntry> {
    let subcaps = split.subcaptions();
    alignment
        .pairs
        .iter()
        .zip(&alignment.confidence)
        .map(|(&(sub, cap), &confidence)| {
            let panel = &panels[sub];
            let text = match alignment.mode {
                AlignmentMode::FullCaptionFallback => meta.caption.trim().to_string(),
                _ => subcaps[cap].text.clone(),
            };
            DatasetEntry {
                entry_id: entry_id(&meta.package_id, &meta.figure_id, panel.index),
                package_id: meta.package_id.clone(),
                figure_id: meta.figure_id.clone(),
                panel_index: panel.index,
                image_path: panel.image_path.clone(),
                text,
                alignment_mode: alignment.mode,
                confidence,
                modality_tags: Vec::new(),
                demographics: None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captionparse::split_caption;
    use ndarray::arr2;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::path::PathBuf;

    fn meta(caption: &str) -> FigureMeta {
        FigureMeta {
            package_id: "p".into(),
            figure_id: "F1".into(),
            caption: caption.into(),
            caption_missing: caption.is_empty(),
            source_path: PathBuf::from("F1.png"),
            width: 100,
            height: 100,
        }
    }

    fn panels(n: usize) -> Vec<Panel> {
        (0..n)
            .map(|i| Panel {
                index: i,
                bbox: SubfigureBox::new(0, 0, 10, 10, 1.0),
                crop: Raster::filled(10, 10, 3, 10 * i as u8),
                image_path: format!("crops/{i}.png"),
            })
            .collect()
    }

    #[test]
    fn label_order_pairs() {
        let split = split_caption("(a) one. (b) two. (c) three.");
        let a = align_label_order(3, split.subcaptions()).unwrap();
        assert_eq!(a.pairs, [(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.confidence, [1.0; 3]);

        let split = split_caption("(b) two. (a) one. (c) three.");
        let a = align_label_order(3, split.subcaptions()).unwrap();
        let subs = split.subcaptions();
        let labels: Vec<_> = a.pairs.iter().map(|&(_, c)| subs[c].label.as_str()).collect();
        assert_eq!(labels, ["a", "b", "c"]);

        let split = split_caption("(a) one. (b) two.");
        assert_eq!(
            align_label_order(4, split.subcaptions()),
            Err(CountMismatch { subfigures: 4, subcaptions: 2 })
        );
    }

    #[test]
    fn similarity_argmax_and_ties() {
        let a = align_similarity(&arr2(&[[0.9, 0.1], [0.2, 0.8]])).unwrap();
        assert_eq!(a.pairs, [(0, 0), (1, 1)]);
        let e = (0.8f64).exp();
        assert!((a.confidence[0] - e / (e + 1.0)).abs() < 1e-12);
        let tie = align_similarity(&arr2(&[[0.5, 0.5]])).unwrap();
        assert_eq!(tie.pairs, [(0, 0)]);
        assert!((tie.confidence[0] - 0.5).abs() < 1e-12);
        assert!(matches!(align_similarity(&Array2::<f64>::zeros((0, 2))), Err(AlignError::EmptyMatrix)));
    }

    /// Plain scan for the largest entry; the first one seen wins.
    fn row_max_oracle(m: &Array2<f64>) -> Vec<(usize, usize)> {
        m.rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let mut best = (0, f64::NEG_INFINITY);
                for (j, &v) in r.iter().enumerate() {
                    if v > best.1 {
                        best = (j, v);
                    }
                }
                (i, best.0)
            })
            .collect()
    }

    #[test]
    fn similarity_matches_oracle_on_random_6x4() {
        let mut rng = StdRng::seed_from_u64(5);
        let m = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        assert_eq!(align_similarity(&m).unwrap().pairs, row_max_oracle(&m));
    }

    #[test]
    fn resolve_policies() {
        let sep = split_caption("(a) chest X-ray. (b) CT scan.");
        let entries = resolve(&meta("(a) chest X-ray. (b) CT scan."), &panels(2), &sep, None, AlignPolicy::Auto).unwrap();
        assert_eq!(entries.len(), 2);
        assert!(entries.iter().all(|e| e.alignment_mode == AlignmentMode::LabelOrder));
        assert_eq!(entries[1].text, "CT scan.");

        let cap = "MRI of the brain.";
        let entries = resolve(&meta(cap), &panels(3), &split_caption(cap), None, AlignPolicy::Auto).unwrap();
        assert_eq!(entries.len(), 3);
        for e in &entries {
            assert_eq!(e.alignment_mode, AlignmentMode::FullCaptionFallback);
            assert_eq!(e.text, cap);
            assert_eq!(e.confidence, FALLBACK_CONFIDENCE);
        }

        // separable but counts disagree
        let entries = resolve(&meta("(a) x. (b) y."), &panels(3), &sep, None, AlignPolicy::Auto).unwrap();
        assert!(entries.iter().all(|e| e.alignment_mode == AlignmentMode::FullCaptionFallback));

        assert!(matches!(
            resolve(&meta("x"), &panels(2), &sep, None, AlignPolicy::Similarity),
            Err(AlignError::MissingScorer)
        ));
        let forced = resolve(&meta("x"), &panels(2), &sep, None, AlignPolicy::Fallback).unwrap();
        assert!(forced.iter().all(|e| e.alignment_mode == AlignmentMode::FullCaptionFallback));
    }

    struct KeyedScorer;

    impl EmbeddingScorer for KeyedScorer {
        // panel i has gray value 10*i; text "k..." points the same way as panel k
        fn embed_image(&self, png: &[u8]) -> Result<Vec<f32>, InferError> {
            let r = Raster::decode(png, false).unwrap();
            let k = r.pixel(0, 0)[0] as usize / 10;
            let mut v = vec![0.0; 4];
            v[k] = 1.0;
            Ok(v)
        }

        fn embed_text(&self, text: &str) -> Result<Vec<f32>, InferError> {
            let k = match text {
                t if t.contains("zero") => 0,
                t if t.contains("one") => 1,
                _ => 2,
            };
            let mut v = vec![0.0; 4];
            v[k] = 1.0;
            Ok(v)
        }
    }

    #[test]
    fn resolve_with_scorer_uses_similarity() {
        let cap = "(a) panel one. (b) panel zero.";
        let split = split_caption(cap);
        let entries = resolve(&meta(cap), &panels(2), &split, Some(&KeyedScorer), AlignPolicy::Auto).unwrap();
        assert!(entries.iter().all(|e| e.alignment_mode == AlignmentMode::Similarity));
        assert_eq!(entries[0].text, "panel zero.");
        assert_eq!(entries[1].text, "panel one.");
    }

    proptest! {
        #[test]
        fn similarity_row_shift_invariant(
            vals in proptest::collection::vec(-5.0f64..5.0, 12), shifts in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let m = Array2::from_shape_vec((3, 4), vals).unwrap();
            let mut shifted = m.clone();
            for (i, mut r) in shifted.rows_mut().into_iter().enumerate() {
                r.mapv_inplace(|v| v + shifts[i]);
            }
            let a = align_similarity(&m).unwrap();
            let b = align_similarity(&shifted).unwrap();
            // shifting can reorder near-ties by rounding; compare where the margin is clear
            for i in 0..3 {
                let row = m.row(i);
                let best = row[a.pairs[i].1];
                let runner = row.iter().enumerate().filter(|&(j, _)| j != a.pairs[i].1).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
                if best - runner > 1e-9 {
                    prop_assert_eq!(a.pairs[i], b.pairs[i]);
                    prop_assert!((a.confidence[i] - b.confidence[i]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn resolve_emits_one_entry_per_box(n in 1usize..6, labels in 0usize..6, policy in prop_oneof![Just(AlignPolicy::Auto), Just(AlignPolicy::Label), Just(AlignPolicy::Fallback)]) {
            let caption: String = (0..labels).map(|i| format!("({}) part {i}. ", (b'a' + i as u8) as char)).collect();
            let split = split_caption(&caption);
            let entries = resolve(&meta(&caption), &panels(n), &split, None, policy).unwrap();
            prop_assert_eq!(entries.len(), n);
        }

        #[test]
        fn label_order_is_bijection(n in 2usize..8) {
            let caption: String = (0..n).rev().map(|i| format!("({}) part {i}. ", (b'a' + i as u8) as char)).collect();
            let split = split_caption(&caption);
            let a = align_label_order(n, split.subcaptions()).unwrap();
            let mut caps: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
            caps.sort();
            prop_assert_eq!(caps, (0..n).collect::<Vec<_>>());
        }
    }
}
