//! Caption keyword filtering, modality tagging and the "Medical" category gate.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shipped diagnostic-procedure keyword list.
pub const DEFAULT_KEYWORDS: &str = include_str!("../data/keywords.txt");
/// Shipped term-to-modality taxonomy.
pub const DEFAULT_TAXONOMY: &str = include_str!("../data/taxonomy.tsv");

pub const NUM_CATEGORIES: usize = 28;
pub const MEDICAL_CATEGORY: &str = "Medical";
pub const DEFAULT_TOP_K: usize = 4;

/// The 28 document-figure classes the classifier scores, in index order.
pub const FIGURE_CATEGORIES: [&str; NUM_CATEGORIES] = [
    "3D objects",
    "Algorithm",
    "Area chart",
    "Bar plots",
    "Block diagram",
    "Box plot",
    "Bubble chart",
    "Confusion matrix",
    "Contour plot",
    "Flow chart",
    "Geographic map",
    "Graph plots",
    "Heat map",
    "Histogram",
    "Mask",
    MEDICAL_CATEGORY,
    "Natural images",
    "Pareto charts",
    "Pie chart",
    "Polar plot",
    "Radar chart",
    "Scatter plot",
    "Sketches",
    "Surface plot",
    "Tables",
    "Tree diagram",
    "Vector plot",
    "Venn diagram",
];

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("keyword list {0} has no terms")]
    EmptyKeywordList(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("taxonomy line {line}: {reason}")]
    MalformedTaxonomy { line: usize, reason: String },
    #[error("category scores: {0}")]
    InvalidScores(String),
    #[error("no \"Medical\" category among the scored categories")]
    MissingMedicalCategory,
    #[error("top-k must be in [1, 28], got {0}")]
    InvalidK(usize),
}

fn normalize_term(raw: &str) -> Option<String> {
    let t = raw.trim();
    if t.is_empty() || t.starts_with('#') {
        None
    } else {
        Some(t.to_lowercase())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSet {
    terms: BTreeSet<String>,
    pub source_note: String,
}

impl KeywordSet {
    /// Parse one-term-per-line text; `#` lines are comments.
    pub fn parse(text: &str, source_note: impl Into<String>) -> Result<Self, FilterError> {
        let source_note = source_note.into();
        let terms: BTreeSet<String> = text.lines().filter_map(normalize_term).collect();
        if terms.is_empty() {
            return Err(FilterError::EmptyKeywordList(source_note));
        }
        Ok(Self { terms, source_note })
    }

    pub fn from_terms<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            terms: terms
                .into_iter()
                .filter_map(|t| normalize_term(t.as_ref()))
                .collect(),
            source_note: "inline".into(),
        }
    }

    pub fn default_list() -> Self {
        Self::parse(DEFAULT_KEYWORDS, "builtin").expect("shipped keyword list is nonempty")
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn insert(&mut self, term: &str) {
        if let Some(t) = normalize_term(term) {
            self.terms.insert(t);
        }
    }
}

pub fn load_keywords(path: &Path) -> Result<KeywordSet, FilterError> {
    let text = fs::read_to_string(path).map_err(|source| FilterError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    KeywordSet::parse(&text, path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordHit {
    pub term: String,
    /// Byte offset into the original caption.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matched: bool,
    pub hits: Vec<KeywordHit>,
}

/// Lowercased copy of a caption with a map from each lowered byte back to
/// the byte offset of the source char it came from.
struct Folded {
    text: String,
    origin: Vec<usize>,
}

impl Folded {
    fn new(caption: &str) -> Self {
        let mut text = String::with_capacity(caption.len());
        let mut origin = Vec::with_capacity(caption.len());
        for (off, ch) in caption.char_indices() {
            for lc in ch.to_lowercase() {
                let before = text.len();
                text.push(lc);
                origin.extend(std::iter::repeat_n(off, text.len() - before));
            }
        }
        Self { text, origin }
    }

    /// Original byte range of lowered range `start..end`, if both ends fall
    /// on source char boundaries.
    fn source_range(&self, start: usize, end: usize, source_len: usize) -> Option<(usize, usize)> {
        if start > 0 && self.origin[start - 1] == self.origin[start] {
            return None;
        }
        let src_end = if end == self.text.len() {
            source_len
        } else if self.origin[end - 1] == self.origin[end] {
            return None;
        } else {
            self.origin[end]
        };
        Some((self.origin[start], src_end))
    }
}

fn is_word_boundary(caption: &str, start: usize, end: usize) -> bool {
    let before = caption[..start].chars().next_back();
    let after = caption[end..].chars().next();
    !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
}

fn find_terms<'a>(caption: &str, terms: impl Iterator<Item = &'a str>) -> Vec<KeywordHit> {
    if caption.is_empty() {
        return Vec::new();
    }
    let folded = Folded::new(caption);
    let mut hits = Vec::new();
    for term in terms {
        if term.is_empty() {
            continue;
        }
        let mut from = 0;
        while let Some(pos) = folded.text[from..].find(term) {
            let start = from + pos;
            let end = start + term.len();
            if let Some((s, e)) = folded.source_range(start, end, caption.len()) {
                if is_word_boundary(caption, s, e) {
                    hits.push(KeywordHit {
                        term: term.to_string(),
                        offset: s,
                    });
                }
            }
            from = start + folded.text[start..].chars().next().map_or(1, char::len_utf8);
        }
    }
    hits.sort_by(|a, b| a.offset.cmp(&b.offset).then_with(|| a.term.cmp(&b.term)));
    hits
}

/// Case-insensitive whole-word keyword search; a word boundary is any
/// non-alphanumeric char or either end of the caption.
pub fn match_caption(caption: &str, kw: &KeywordSet) -> MatchResult {
    let hits = find_terms(caption, kw.terms());
    MatchResult {
        matched: !hits.is_empty(),
        hits,
    }
}

/// Term-to-tag table for modality tagging.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    entries: Vec<(String, String)>,
}

impl Taxonomy {
    /// Two tab-separated columns per line: term, tag.
    pub fn parse(text: &str) -> Result<Self, FilterError> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (term, tag) = line.split_once('\t').ok_or_else(|| FilterError::MalformedTaxonomy {
                line: i + 1,
                reason: "expected two tab-separated columns".into(),
            })?;
            let term = term.trim().to_lowercase();
            let tag = tag.trim().to_string();
            if term.is_empty() || tag.is_empty() || tag.contains('\t') {
                return Err(FilterError::MalformedTaxonomy {
                    line: i + 1,
                    reason: "empty term or tag".into(),
                });
            }
            entries.retain(|(t, _)| *t != term);
            entries.push((term, tag));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, FilterError> {
        let text = fs::read_to_string(path).map_err(|source| FilterError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn default_table() -> Self {
        Self::parse(DEFAULT_TAXONOMY).expect("shipped taxonomy parses")
    }

    pub fn tag_of(&self, term: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(t, _)| t == term)
            .map(|(_, tag)| tag.as_str())
    }

    pub fn tags(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|(_, tag)| tag.as_str()).collect()
    }
}

/// Modality tags in order of first mention, without repeats.
pub fn tag_modality(caption: &str, taxonomy: &Taxonomy) -> Vec<String> {
    let hits = find_terms(caption, taxonomy.entries.iter().map(|(t, _)| t.as_str()));
    let mut tags: Vec<String> = Vec::new();
    for hit in hits {
        let tag = taxonomy.tag_of(&hit.term).expect("hit comes from taxonomy");
        if !tags.iter().any(|t| t == tag) {
            tags.push(tag.to_string());
        }
    }
    tags
}

/// Classifier output over the 28 figure categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScores {
    scores: Vec<f64>,
    category_names: Vec<String>,
}

impl CategoryScores {
    pub fn new(scores: Vec<f64>, category_names: Vec<String>) -> Result<Self, FilterError> {
        if scores.len() != NUM_CATEGORIES || category_names.len() != NUM_CATEGORIES {
            return Err(FilterError::InvalidScores(format!(
                "expected {NUM_CATEGORIES} scores and names, got {} and {}",
                scores.len(),
                category_names.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(FilterError::InvalidScores(format!(
                "scores must be finite and non-negative, got {bad}"
            )));
        }
        Ok(Self {
            scores,
            category_names,
        })
    }

    /// Scores paired with [`FIGURE_CATEGORIES`].
    pub fn with_default_names(scores: Vec<f64>) -> Result<Self, FilterError> {
        Self::new(scores, FIGURE_CATEGORIES.iter().map(|s| s.to_string()).collect())
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    /// 1-based rank of `index`: descending score, ties broken by lower index.
    pub fn rank_of(&self, index: usize) -> usize {
        let s = self.scores[index];
        1 + self
            .scores
            .iter()
            .enumerate()
            .filter(|&(j, &o)| o > s || (o == s && j < index))
            .count()
    }
}

/// True iff the "Medical" category ranks within the top `k`.
pub fn gate_medical(scores: &CategoryScores, k: usize) -> Result<bool, FilterError> {
    if !(1..=NUM_CATEGORIES).contains(&k) {
        return Err(FilterError::InvalidK(k));
    }
    let medical = scores
        .category_names
        .iter()
        .position(|n| n == MEDICAL_CATEGORY)
        .ok_or(FilterError::MissingMedicalCategory)?;
    Ok(scores.rank_of(medical) <= k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn medical_index() -> usize {
        FIGURE_CATEGORIES.iter().position(|c| *c == MEDICAL_CATEGORY).unwrap()
    }

    #[test]
    fn keyword_normalization() {
        let kw = KeywordSet::parse("CT\nct \nMRI\n", "t").unwrap();
        assert_eq!(kw.terms().collect::<Vec<_>>(), ["ct", "mri"]);
    }

    #[test]
    fn comment_only_list_is_empty() {
        assert!(matches!(
            KeywordSet::parse("# a\n   # b\n\n", "t"),
            Err(FilterError::EmptyKeywordList(_))
        ));
    }

    #[test]
    fn shipped_list_size() {
        let kw = KeywordSet::default_list();
        let lines = DEFAULT_KEYWORDS
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .count();
        assert_eq!(kw.len(), lines);
        assert!(kw.len() >= 40);
    }

    #[test]
    fn whole_word_match() {
        let kw = KeywordSet::from_terms(["ct", "mri"]);
        let r = match_caption("Axial CT scan of chest", &kw);
        assert!(r.matched);
        assert_eq!(r.hits, vec![KeywordHit { term: "ct".into(), offset: 6 }]);
        assert!(!match_caption("Octopus anatomy", &KeywordSet::from_terms(["ct"])).matched);
        assert!(!match_caption("", &kw).matched);
    }

    #[test]
    fn multiword_and_punctuated_terms() {
        let kw = KeywordSet::from_terms(["x-ray", "mitotic figure", "h&e"]);
        let r = match_caption("Chest X-Ray; H&E stain shows a Mitotic Figure.", &kw);
        let terms: Vec<_> = r.hits.iter().map(|h| (h.term.as_str(), h.offset)).collect();
        assert_eq!(terms, [("x-ray", 6), ("h&e", 13), ("mitotic figure", 31)]);
        assert!(!match_caption("x-rays", &KeywordSet::from_terms(["x-ray"])).matched);
    }

    #[test]
    fn offsets_survive_case_folding_expansion() {
        // U+0130 lowercases to two chars, shifting folded offsets
        let kw = KeywordSet::from_terms(["ct"]);
        let cap = "\u{130}stanbul cohort, CT";
        let r = match_caption(cap, &kw);
        assert_eq!(r.hits.len(), 1);
        assert_eq!(&cap[r.hits[0].offset..r.hits[0].offset + 2], "CT");
    }

    #[test]
    fn gate_boundary() {
        let m = medical_index();
        let mut scores = vec![0.0; NUM_CATEGORIES];
        scores[m] = 0.5;
        for j in [0, 1, 2] {
            scores[j] = 0.9;
        }
        let s = CategoryScores::with_default_names(scores.clone()).unwrap();
        assert_eq!(s.rank_of(m), 4);
        assert!(gate_medical(&s, 4).unwrap());
        scores[3] = 0.8;
        let s = CategoryScores::with_default_names(scores).unwrap();
        assert_eq!(s.rank_of(m), 5);
        assert!(!gate_medical(&s, 4).unwrap());
    }

    #[test]
    fn gate_ties_use_index() {
        let m = medical_index();
        let s = CategoryScores::with_default_names(vec![1.0; NUM_CATEGORIES]).unwrap();
        assert_eq!(s.rank_of(m), m + 1);
        for k in 1..=NUM_CATEGORIES {
            assert_eq!(gate_medical(&s, k).unwrap(), m < k);
        }
    }

    #[test]
    fn gate_errors() {
        let s = CategoryScores::with_default_names(vec![0.1; NUM_CATEGORIES]).unwrap();
        assert!(matches!(gate_medical(&s, 0), Err(FilterError::InvalidK(0))));
        assert!(matches!(gate_medical(&s, 29), Err(FilterError::InvalidK(29))));
        let names = (0..NUM_CATEGORIES).map(|i| format!("c{i}")).collect();
        let s = CategoryScores::new(vec![0.1; NUM_CATEGORIES], names).unwrap();
        assert!(matches!(gate_medical(&s, 4), Err(FilterError::MissingMedicalCategory)));
        assert!(CategoryScores::with_default_names(vec![0.1; 27]).is_err());
        let mut nan = vec![0.1; NUM_CATEGORIES];
        nan[3] = f64::NAN;
        assert!(CategoryScores::with_default_names(nan).is_err());
    }

    #[test]
    fn modality_tags() {
        let tax = Taxonomy::default_table();
        assert_eq!(tag_modality("MRI and CT of the abdomen", &tax), ["MRI", "CT"]);
        assert_eq!(
            tag_modality("H&E section with a mitotic figure", &tax),
            ["Histology", "MitoticFigure"]
        );
        assert_eq!(tag_modality("A mitotic figure is visible", &tax), ["MitoticFigure"]);
        assert!(tag_modality("Bar chart of survival", &tax).is_empty());
    }

    #[test]
    fn taxonomy_parse_errors() {
        assert!(Taxonomy::parse("ct CT\n").is_err());
        assert!(Taxonomy::parse("ct\t\n").is_err());
        let t = Taxonomy::parse("# c\nCT\tCT\nct\tCTX\n").unwrap();
        assert_eq!(t.tag_of("ct"), Some("CTX"));
    }

    proptest! {
        #[test]
        fn match_monotone_in_keywords(
            caption in "[a-zA-Z ,.()-]{0,60}",
            base in proptest::collection::vec("[a-z]{1,4}", 1..5),
            extra in "[a-z]{1,4}",
        ) {
            let kw = KeywordSet::from_terms(&base);
            let mut bigger = kw.clone();
            bigger.insert(&extra);
            if match_caption(&caption, &kw).matched {
                prop_assert!(match_caption(&caption, &bigger).matched);
            }
        }

        #[test]
        fn gate_monotone_in_k(scores in proptest::collection::vec(0.0f64..1.0, NUM_CATEGORIES), k in 1usize..NUM_CATEGORIES) {
            let s = CategoryScores::with_default_names(scores).unwrap();
            if gate_medical(&s, k).unwrap() {
                prop_assert!(gate_medical(&s, k + 1).unwrap());
            }
        }

        #[test]
        fn tags_within_range_and_idempotent(words in proptest::collection::vec(
            prop_oneof![Just("ct"), Just("MRI"), Just("x-ray"), Just("lung"), Just("mitotic figure"), Just("pet"), Just("scan")], 0..8)
        ) {
            let tax = Taxonomy::default_table();
            let caption = words.join(" ");
            let tags = tag_modality(&caption, &tax);
            let range = tax.tags();
            prop_assert!(tags.iter().all(|t| range.contains(t.as_str())));
            let doubled = format!("{caption} {caption}");
            prop_assert_eq!(tag_modality(&doubled, &tax), tags);
        }
    }
}
