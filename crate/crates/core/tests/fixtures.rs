use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use figforge_core::captionparse::{split_caption, SplitResult, Subcaption};
use figforge_core::filter::{match_caption, KeywordSet};
use figforge_core::fixtures::generate_mini_corpus;
use figforge_core::ingest::{extract_pairs, parse_package, scan_archive, ExtractOptions};
use serde::Deserialize;
use walkdir::WalkDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[derive(Deserialize)]
struct GoldSub {
    label: String,
    text: String,
}

#[derive(Deserialize)]
struct GoldLine {
    caption: String,
    expected: Option<Vec<GoldSub>>,
}

fn gold() -> Vec<GoldLine> {
    fs::read_to_string(fixture("caption_gold.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Label tokens and their segments tile the caption from the first token on.
fn assert_partition(caption: &str, subs: &[Subcaption]) {
    let mut spans: Vec<_> = subs.iter().map(|s| (s.label_span.clone(), s.span.clone())).collect();
    spans.dedup();
    for w in spans.windows(2) {
        assert_eq!(w[0].1.end, w[1].0.start, "{caption:?}");
    }
    for (label, seg) in &spans {
        assert_eq!(label.end, seg.start, "{caption:?}");
    }
    assert_eq!(spans.last().unwrap().1.end, caption.len(), "{caption:?}");
}

#[test]
fn gold_corpus_splits_exactly() {
    let lines = gold();
    assert_eq!(lines.len(), 50);
    let (mut separable, mut unseparable) = (0, 0);
    for g in &lines {
        let got = split_caption(&g.caption);
        match (&g.expected, &got) {
            (Some(want), SplitResult::Separable(subs)) => {
                separable += 1;
                let got: Vec<(String, &str)> = subs.iter().map(|s| (s.label.to_string(), s.text.as_str())).collect();
                let want: Vec<(String, &str)> = want.iter().map(|w| (w.label.clone(), w.text.as_str())).collect();
                assert_eq!(got, want, "{:?}", g.caption);
                assert_partition(&g.caption, subs);
            }
            (None, SplitResult::Unseparable(_)) => unseparable += 1,
            _ => panic!("{:?}: got {got:?}", g.caption),
        }
    }
    assert_eq!((separable, unseparable), (38, 12));
}

/// Plain substring search with explicit word-boundary checks.
fn naive_match(caption: &str, terms: &[String]) -> bool {
    let lower = caption.to_lowercase();
    terms.iter().any(|t| {
        lower.match_indices(t.as_str()).any(|(i, m)| {
            let before = lower[..i].chars().next_back();
            let after = lower[i + m.len()..].chars().next();
            !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
        })
    })
}

fn shipped_terms() -> Vec<String> {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("data/keywords.txt")).unwrap();
    let mut terms: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    terms.sort();
    terms.dedup();
    terms
}

#[test]
fn default_keyword_list_matches_shipped_file() {
    let terms = shipped_terms();
    assert!(terms.len() >= 40);
    let kw = KeywordSet::default_list();
    assert_eq!(kw.len(), terms.len());
    let mut got: Vec<&str> = kw.terms().collect();
    got.sort();
    assert_eq!(got, terms);
}

#[test]
fn filter_fixture_against_naive_scan() {
    let terms = shipped_terms();
    let kw = KeywordSet::default_list();
    let captions = fs::read_to_string(fixture("filter_captions.txt")).unwrap();
    let captions: Vec<&str> = captions.lines().collect();
    assert_eq!(captions.len(), 20);
    let mut matched = 0;
    for c in &captions {
        let ours = match_caption(c, &kw).matched;
        assert_eq!(ours, naive_match(c, &terms), "{c:?}");
        matched += usize::from(ours);
    }
    assert_eq!(matched, 13);
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    WalkDir::new(root)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .filter(|e| !e.path().strip_prefix(root).unwrap().starts_with("out"))
        .map(|e| (e.path().strip_prefix(root).unwrap().to_path_buf(), fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn bundled_mini_corpus_regenerates_byte_identically() {
    let tmp = tempfile::TempDir::new().unwrap();
    generate_mini_corpus(tmp.path(), 7).unwrap();
    let bundled = tree(&fixture("mini_corpus"));
    let fresh = tree(tmp.path());
    assert_eq!(bundled.keys().collect::<Vec<_>>(), fresh.keys().collect::<Vec<_>>());
    for (path, bytes) in &bundled {
        assert!(fresh[path] == *bytes, "{} differs", path.display());
    }
}

#[test]
fn bundled_archive_ingest_counts() {
    let root = fixture("mini_corpus/archive");
    let paths = scan_archive(&root).unwrap();
    assert_eq!(paths.len(), 5);
    let mut records = 0;
    for p in &paths {
        let (pkg, warnings) = parse_package(p).unwrap();
        assert!(warnings.is_empty());
        if pkg.package_id == "pkg003" {
            assert_eq!(pkg.figure_entries.len(), 3);
            assert_eq!(pkg.figure_entries.iter().filter(|e| e.caption_missing).count(), 1);
        }
        let (recs, w) = extract_pairs(&pkg, ExtractOptions::default());
        assert!(w.is_empty());
        records += recs.len();
    }
    assert_eq!(records, 12);
}
