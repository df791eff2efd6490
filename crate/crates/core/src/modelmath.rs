//! Loss arithmetic for image-text pretraining, evaluated on given embeddings
//! and predicted distributions: similarity logits, symmetric contrastive
//! (InfoNCE) loss, token masking, masked-token cross-entropy and the
//! weighted total.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

pub const DEFAULT_MASK_PROB: f64 = 0.15;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("embedding row {row} of the {side} matrix has zero norm")]
    ZeroNormRow { side: &'static str, row: usize },
    #[error("image and text embeddings disagree in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("batch needs at least {min} rows, got {got}")]
    BatchTooSmall { min: usize, got: usize },
    #[error("non-finite embedding entry")]
    NonFinite,
    #[error("temperature must be positive")]
    BadTemperature,
    #[error("no masked positions")]
    EmptyMask,
    #[error("expected {expected} predicted distributions, got {got}")]
    PredictionCount { expected: usize, got: usize },
    #[error("distribution for masked position {position} sums to {sum}")]
    NonNormalizedDistribution { position: usize, sum: f64 },
    #[error("target token {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("mask probability must be in [0, 1]")]
    BadProbability,
}

/// Row i of `image` pairs with row i of `text`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<T> {
    image: Array2<T>,
    text: Array2<T>,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn new(image: Array2<T>, text: Array2<T>) -> Result<Self, LossError> {
        if image.dim() != text.dim() {
            return Err(LossError::ShapeMismatch(image.dim(), text.dim()));
        }
        if image.iter().chain(text.iter()).any(|v| !v.is_finite()) {
            return Err(LossError::NonFinite);
        }
        Ok(Self { image, text })
    }

    pub fn from_rows(image: &[Vec<T>], text: &[Vec<T>]) -> Result<Self, LossError> {
        let to_array = |rows: &[Vec<T>]| {
            let d = rows.first().map_or(0, Vec::len);
            let flat: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
            Array2::from_shape_vec((rows.len(), d), flat)
        };
        match (to_array(image), to_array(text)) {
            (Ok(i), Ok(t)) => Self::new(i, t),
            _ => Err(LossError::ShapeMismatch(
                (image.len(), image.first().map_or(0, Vec::len)),
                (text.len(), text.first().map_or(0, Vec::len)),
            )),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.image.nrows()
    }

    pub fn dim(&self) -> usize {
        self.image.ncols()
    }

    pub fn image(&self) -> &Array2<T> {
        &self.image
    }

    pub fn text(&self) -> &Array2<T> {
        &self.text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig<T> {
    pub temperature: T,
    pub lambda_mlm: T,
    /// L2-normalize embedding rows before taking dot products.
    pub normalize: bool,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        Self {
            temperature: T::lit(0.07),
            lambda_mlm: T::lit(0.5),
            normalize: true,
        }
    }
}

fn l2_normalized<T: Scalar>(m: &Array2<T>, side: &'static str) -> Result<Array2<T>, LossError> {
    let mut out = m.clone();
    for (row, mut r) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = r.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if norm == T::zero() {
            return Err(LossError::ZeroNormRow { side, row });
        }
        r.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Logits `S[i][j] = <image_i, text_j> / temperature`.
pub fn similarity<T: Scalar>(batch: &EmbeddingBatch<T>, cfg: &LossConfig<T>) -> Result<Array2<T>, LossError> {
    // negated so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(cfg.temperature > T::zero()) {
        return Err(LossError::BadTemperature);
    }
    let (img, txt) = if cfg.normalize {
        (l2_normalized(&batch.image, "image")?, l2_normalized(&batch.text, "text")?)
    } else {
        (batch.image.clone(), batch.text.clone())
    };
    let scale = T::one() / cfg.temperature;
    Ok(img.dot(&txt.t()).mapv(|v| v * scale))
}

/// `-ln softmax(logits)[target]`, computed with the max subtracted.
pub fn cross_entropy<T: Scalar>(logits: ArrayView1<'_, T>, target: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let log_sum = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    -(logits[target] - max - log_sum)
}

/// Batch mean of image-to-text plus text-to-image cross-entropy against the
/// diagonal pairing.
pub fn itc_loss<T: Scalar>(batch: &EmbeddingBatch<T>, cfg: &LossConfig<T>) -> Result<T, LossError> {
    let b = batch.batch_size();
    if b < 2 {
        return Err(LossError::BatchTooSmall { min: 2, got: b });
    }
    let sim = similarity(batch, cfg)?;
    let total: T = (0..b)
        .map(|i| cross_entropy(sim.row(i), i) + cross_entropy(sim.column(i), i))
        .sum();
    Ok(total / T::from_usize_lossy(b))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub tokens: Vec<u32>,
    /// Ascending.
    pub mask_positions: Vec<usize>,
    /// Original ids at `mask_positions`, same order.
    pub original_ids: Vec<u32>,
    pub mask_token_id: u32,
}

/// Masking settings; `special_ids` are never masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub probability: f64,
    pub mask_token_id: u32,
    pub special_ids: BTreeSet<u32>,
}

impl Default for MaskSpec {
    fn default() -> Self {
        // BERT-style ids: [PAD]=0, [CLS]=101, [SEP]=102, [MASK]=103
        Self {
            probability: DEFAULT_MASK_PROB,
            mask_token_id: 103,
            special_ids: [0, 101, 102, 103].into_iter().collect(),
        }
    }
}

/// Replace each maskable token with the mask id independently with the spec's
/// probability. Deterministic for a given seed.
pub fn mask_tokens(tokens: &[u32], spec: &MaskSpec, seed: u64) -> Result<MaskedSequence, LossError> {
    if !(0.0..=1.0).contains(&spec.probability) {
        return Err(LossError::BadProbability);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = tokens.to_vec();
    let mut mask_positions = Vec::new();
    let mut original_ids = Vec::new();
    for (pos, tok) in tokens.iter().enumerate() {
        if spec.special_ids.contains(tok) {
            continue;
        }
        if rng.gen_bool(spec.probability) {
            out[pos] = spec.mask_token_id;
            mask_positions.push(pos);
            original_ids.push(*tok);
        }
    }
    Ok(MaskedSequence {
        tokens: out,
        mask_positions,
        original_ids,
        mask_token_id: spec.mask_token_id,
    })
}

/// Mean negative log-probability of the original token over masked
/// positions. Row k of `predicted` is the distribution at the k-th masked
/// position and must sum to 1 within 1e-6.
pub fn mlm_loss<T: Scalar>(predicted: &Array2<T>, seq: &MaskedSequence) -> Result<T, LossError> {
    let n = seq.mask_positions.len();
    if n == 0 {
        return Err(LossError::EmptyMask);
    }
    if predicted.nrows() != n {
        return Err(LossError::PredictionCount {
            expected: n,
            got: predicted.nrows(),
        });
    }
    let vocab = predicted.ncols();
    let tol = T::lit(1e-6);
    let mut total = T::zero();
    for (k, row) in predicted.axis_iter(Axis(0)).enumerate() {
        let sum: T = row.iter().copied().sum();
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !((sum - T::one()).abs() <= tol) || row.iter().any(|p| *p < T::zero()) {
            return Err(LossError::NonNormalizedDistribution {
                position: seq.mask_positions[k],
                sum: sum.to_f64().unwrap_or(f64::NAN),
            });
        }
        let target = seq.original_ids[k];
        let p = *row.get(target as usize).ok_or(LossError::TokenOutOfVocab { token: target, vocab })?;
        total = total - p.ln();
    }
    Ok(total / T::from_usize_lossy(n))
}

pub fn total_loss<T: Scalar>(itc: T, mlm: T, lambda_mlm: T) -> T {
    itc + lambda_mlm * mlm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr2;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::Rng;

    fn cfg(t: f64) -> LossConfig<f64> {
        LossConfig {
            temperature: t,
            ..Default::default()
        }
    }

    fn ident2() -> EmbeddingBatch<f64> {
        let e = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        EmbeddingBatch::new(e.clone(), e).unwrap()
    }

    /// Direct double loop, no matrix ops.
    fn naive_similarity(img: &[Vec<f64>], txt: &[Vec<f64>], t: f64) -> Vec<Vec<f64>> {
        let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut out = vec![vec![0.0; txt.len()]; img.len()];
        for i in 0..img.len() {
            for j in 0..txt.len() {
                let mut dot = 0.0;
                for k in 0..img[i].len() {
                    dot += img[i][k] * txt[j][k];
                }
                out[i][j] = dot / (norm(&img[i]) * norm(&txt[j])) / t;
            }
        }
        out
    }

    #[allow(clippy::needless_range_loop)]
    fn naive_itc(s: &[Vec<f64>]) -> f64 {
        let b = s.len();
        let mut total = 0.0;
        for i in 0..b {
            let row: f64 = (0..b).map(|j| s[i][j].exp()).sum();
            let col: f64 = (0..b).map(|j| s[j][i].exp()).sum();
            total += -(s[i][i].exp() / row).ln() - (s[i][i].exp() / col).ln();
        }
        total / b as f64
    }

    fn random_rows(rng: &mut StdRng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn similarity_identity_and_scaling() {
        let s = similarity(&ident2(), &cfg(1.0)).unwrap();
        assert_eq!(s, arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        let s = similarity(&ident2(), &cfg(0.5)).unwrap();
        assert_eq!(s, arr2(&[[2.0, 0.0], [0.0, 2.0]]));
        assert_eq!(similarity(&ident2(), &cfg(0.0)), Err(LossError::BadTemperature));
    }

    #[test]
    fn similarity_matches_double_loop() {
        let mut rng = StdRng::seed_from_u64(7);
        let (img, txt) = (random_rows(&mut rng, 4, 8), random_rows(&mut rng, 4, 8));
        let batch = EmbeddingBatch::from_rows(&img, &txt).unwrap();
        let s = similarity(&batch, &cfg(0.07)).unwrap();
        let oracle = naive_similarity(&img, &txt, 0.07);
        for i in 0..4 {
            for j in 0..4 {
                assert!((s[[i, j]] - oracle[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_row_rejected() {
        let z = arr2(&[[0.0, 0.0], [1.0, 0.0]]);
        let b = EmbeddingBatch::new(z.clone(), z).unwrap();
        assert_eq!(similarity(&b, &cfg(1.0)), Err(LossError::ZeroNormRow { side: "image", row: 0 }));
    }

    #[test]
    fn itc_uniform_and_identity() {
        let same = Array2::from_elem((4, 3), 0.3);
        let b = EmbeddingBatch::new(same.clone(), same).unwrap();
        assert_relative_eq!(itc_loss(&b, &cfg(0.07)).unwrap(), 2.0 * 4f64.ln(), epsilon = 1e-9);

        let e = std::f64::consts::E;
        let want = 2.0 * -(e / (e + 1.0)).ln();
        assert_relative_eq!(itc_loss(&ident2(), &cfg(1.0)).unwrap(), want, epsilon = 1e-12);
        assert!((want - 0.62652).abs() < 1e-4);

        let one = EmbeddingBatch::new(arr2(&[[1.0, 0.0]]), arr2(&[[1.0, 0.0]])).unwrap();
        assert_eq!(itc_loss(&one, &cfg(1.0)), Err(LossError::BatchTooSmall { min: 2, got: 1 }));
    }

    #[test]
    fn itc_matches_summation_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let (img, txt) = (random_rows(&mut rng, 6, 5), random_rows(&mut rng, 6, 5));
            let batch = EmbeddingBatch::from_rows(&img, &txt).unwrap();
            let got = itc_loss(&batch, &cfg(0.5)).unwrap();
            let want = naive_itc(&naive_similarity(&img, &txt, 0.5));
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn itc_f32_agrees_with_f64() {
        let same32 = Array2::from_elem((4, 3), 0.3f32);
        let b = EmbeddingBatch::new(same32.clone(), same32).unwrap();
        let got = itc_loss(&b, &LossConfig::<f32>::default()).unwrap();
        assert!((got - 2.0 * 4f32.ln()).abs() < 1e-5);
    }

    #[test]
    fn masking_extremes() {
        let toks: Vec<u32> = (1000..1100).collect();
        let none = mask_tokens(&toks, &MaskSpec { probability: 0.0, ..Default::default() }, 1).unwrap();
        assert_eq!(none.tokens, toks);
        assert!(none.mask_positions.is_empty());
        let all = mask_tokens(&toks, &MaskSpec { probability: 1.0, ..Default::default() }, 1).unwrap();
        assert_eq!(all.mask_positions, (0..100).collect::<Vec<_>>());
        assert_eq!(all.original_ids, toks);
        assert!(all.tokens.iter().all(|&t| t == 103));
        assert!(mask_tokens(&toks, &MaskSpec { probability: 1.5, ..Default::default() }, 1).is_err());
    }

    #[test]
    fn special_tokens_never_masked() {
        let toks = vec![101, 5000, 5001, 102, 0, 0];
        let m = mask_tokens(&toks, &MaskSpec { probability: 1.0, ..Default::default() }, 3).unwrap();
        assert_eq!(m.mask_positions, [1, 2]);
        assert_eq!(m.tokens, [101, 103, 103, 102, 0, 0]);
    }

    #[test]
    fn masking_rate_and_seed() {
        let toks: Vec<u32> = (0..100_000).map(|i| 1000 + (i % 5000)).collect();
        let spec = MaskSpec::default();
        let a = mask_tokens(&toks, &spec, 42).unwrap();
        let frac = a.mask_positions.len() as f64 / toks.len() as f64;
        assert!((0.14..=0.16).contains(&frac), "{frac}");
        assert_eq!(a, mask_tokens(&toks, &spec, 42).unwrap());
        let short = &toks[..10_000];
        assert_ne!(
            mask_tokens(short, &spec, 1).unwrap().mask_positions,
            mask_tokens(short, &spec, 2).unwrap().mask_positions
        );
    }

    fn seq(ids: &[u32]) -> MaskedSequence {
        MaskedSequence {
            tokens: vec![103; ids.len()],
            mask_positions: (0..ids.len()).collect(),
            original_ids: ids.to_vec(),
            mask_token_id: 103,
        }
    }

    #[test]
    fn mlm_one_hot_and_uniform() {
        let s = seq(&[3, 1]);
        let mut one_hot = Array2::zeros((2, 5));
        one_hot[[0, 3]] = 1.0;
        one_hot[[1, 1]] = 1.0;
        assert_eq!(mlm_loss(&one_hot, &s).unwrap(), 0.0);
        let uniform = Array2::from_elem((2, 100), 0.01);
        assert_relative_eq!(mlm_loss(&uniform, &s).unwrap(), 100f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn mlm_mixed_positions() {
        let s = seq(&[0, 1, 2, 0, 3]);
        let p = arr2(&[
            [0.7, 0.1, 0.1, 0.1],
            [0.25, 0.25, 0.25, 0.25],
            [0.1, 0.2, 0.6, 0.1],
            [0.4, 0.3, 0.2, 0.1],
            [0.05, 0.05, 0.1, 0.8],
        ]);
        let hand = -(0.7f64.ln() + 0.25f64.ln() + 0.6f64.ln() + 0.4f64.ln() + 0.8f64.ln()) / 5.0;
        assert_relative_eq!(mlm_loss(&p, &s).unwrap(), hand, epsilon = 1e-12);
    }

    #[test]
    fn mlm_errors() {
        let empty = seq(&[]);
        assert_eq!(mlm_loss(&Array2::<f64>::zeros((0, 3)), &empty), Err(LossError::EmptyMask));
        let s = seq(&[0]);
        assert!(matches!(
            mlm_loss(&arr2(&[[0.5, 0.4]]), &s),
            Err(LossError::NonNormalizedDistribution { position: 0, .. })
        ));
        assert!(matches!(mlm_loss(&arr2(&[[1.0], [0.0]]), &s), Err(LossError::PredictionCount { .. })));
        assert!(matches!(mlm_loss(&arr2(&[[1.0]]), &seq(&[4])), Err(LossError::TokenOutOfVocab { .. })));
    }

    #[test]
    fn total_loss_weighting() {
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
        assert_eq!(total_loss(1.25, 99.0, 0.0), 1.25);
        assert_eq!(total_loss(0.0, 3.0, 0.5), 1.5);
        assert_eq!(LossConfig::<f64>::default().lambda_mlm, 0.5);
    }

    fn arb_batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        (2usize..6, 2usize..5).prop_flat_map(|(b, d)| {
            let row = proptest::collection::vec(0.1f64..1.0, d);
            (
                proptest::collection::vec(row.clone(), b),
                proptest::collection::vec(row, b),
            )
        })
    }

    proptest! {
        #[test]
        fn itc_permutation_invariant((img, txt) in arb_batch(), rot in 0usize..6) {
            let b = img.len();
            let perm: Vec<usize> = (0..b).map(|i| (i + rot) % b).collect();
            let pi: Vec<_> = perm.iter().map(|&i| img[i].clone()).collect();
            let pt: Vec<_> = perm.iter().map(|&i| txt[i].clone()).collect();
            let a = itc_loss(&EmbeddingBatch::from_rows(&img, &txt).unwrap(), &cfg(0.3)).unwrap();
            let c = itc_loss(&EmbeddingBatch::from_rows(&pi, &pt).unwrap(), &cfg(0.3)).unwrap();
            prop_assert!((a - c).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn argmax_invariant_to_temperature((img, txt) in arb_batch(), t in 0.01f64..5.0) {
            let batch = EmbeddingBatch::from_rows(&img, &txt).unwrap();
            let argmax = |s: &Array2<f64>| -> Vec<usize> {
                s.axis_iter(Axis(0)).map(|r| {
                    let mut best = 0;
                    for j in 1..r.len() { if r[j] > r[best] { best = j; } }
                    best
                }).collect()
            };
            let base = similarity(&batch, &cfg(1.0)).unwrap();
            let scaled = similarity(&batch, &cfg(t)).unwrap();
            prop_assert_eq!(argmax(&base), argmax(&scaled));
        }

        #[test]
        fn masking_preserves_unmasked(toks in proptest::collection::vec(0u32..2000, 0..200), seed in any::<u64>()) {
            let m = mask_tokens(&toks, &MaskSpec::default(), seed).unwrap();
            for (i, t) in toks.iter().enumerate() {
                if m.mask_positions.binary_search(&i).is_ok() {
                    prop_assert_eq!(m.tokens[i], 103);
                } else {
                    prop_assert_eq!(m.tokens[i], *t);
                }
            }
        }
    }
}
