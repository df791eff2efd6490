//! Caption distributor: splits a full caption into labeled subcaptions.
//!
//! Label tokens are only recognized at clause-initial positions: the start of
//! the caption, right after a `.`, `;` or `:` (plus optional whitespace),
//! after a line break, or directly after another label token. Accepted forms:
//!
//! * parenthesized: `(a)`, `(A)`, `(ii)`, `(3)`, ranges `(a-c)`, `(a–c)`,
//!   `(i-iii)` and lists `(a, c)`, `(a and b)`, `(a-c, e)`;
//! * half-parenthesized: `a)`, `ii)`;
//! * delimited: `A.`, `A:`, `a,` followed by whitespace or the end of text.
//!
//! Inline references such as "as shown in (b)" never split a caption.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Longest parenthesized label expression considered, in bytes.
const MAX_PAREN_INNER: usize = 24;
const MAX_ROMAN: u32 = 39;
const MAX_DIGIT_LABEL: u32 = 99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LabelKind {
    Letter,
    Roman,
    Digit,
}

/// Normalized panel label: lowercase letter, lowercase canonical roman
/// numeral, or decimal number.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Label {
    text: String,
    kind: LabelKind,
}

impl Label {
    pub fn letter(c: char) -> Self {
        Self {
            text: c.to_ascii_lowercase().to_string(),
            kind: LabelKind::Letter,
        }
    }

    pub fn roman(value: u32) -> Self {
        Self {
            text: to_roman(value),
            kind: LabelKind::Roman,
        }
    }

    pub fn digit(value: u32) -> Self {
        Self {
            text: value.to_string(),
            kind: LabelKind::Digit,
        }
    }

    /// Interpret a bare label. Single letters stay letters even when they
    /// could be roman numerals; callers resolve that with caption context.
    pub fn parse(raw: &str) -> Option<Self> {
        if raw.is_empty() {
            return None;
        }
        if raw.bytes().all(|b| b.is_ascii_digit()) {
            let v: u32 = raw.parse().ok()?;
            return (raw.len() <= 2 && (1..=MAX_DIGIT_LABEL).contains(&v)).then(|| Self::digit(v));
        }
        let mut chars = raw.chars();
        let first = chars.next()?;
        if chars.next().is_none() {
            return first.is_ascii_alphabetic().then(|| Self::letter(first));
        }
        roman_value(raw).map(Self::roman)
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    /// Position within its own alphabet (a=1, ii=2, 3=3).
    pub fn ordinal(&self) -> u32 {
        match self.kind {
            LabelKind::Letter => (self.text.as_bytes()[0] - b'a') as u32 + 1,
            LabelKind::Roman => roman_value(&self.text).expect("canonical roman"),
            LabelKind::Digit => self.text.parse().expect("numeric label"),
        }
    }

    fn could_be_roman(&self) -> bool {
        self.kind == LabelKind::Roman || (self.kind == LabelKind::Letter && roman_value(&self.text).is_some())
    }

    fn as_roman(&self) -> Self {
        Self::roman(roman_value(&self.text).expect("checked by could_be_roman"))
    }
}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.kind, self.ordinal(), &self.text).cmp(&(other.kind, other.ordinal(), &other.text))
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Label::parse(&raw).ok_or_else(|| serde::de::Error::custom(format!("invalid label {raw:?}")))
    }
}

/// Value of a canonical roman numeral in 1..=39 written in one case.
pub fn roman_value(raw: &str) -> Option<u32> {
    if raw.is_empty() || raw.len() > 7 {
        return None;
    }
    let lower = raw.to_ascii_lowercase();
    if raw != lower && raw != raw.to_ascii_uppercase() {
        return None;
    }
    let mut total = 0i32;
    let vals: Vec<i32> = lower
        .chars()
        .map(|c| match c {
            'i' => Some(1),
            'v' => Some(5),
            'x' => Some(10),
            _ => None,
        })
        .collect::<Option<_>>()?;
    for (k, v) in vals.iter().enumerate() {
        if vals.get(k + 1).is_some_and(|next| next > v) {
            total -= v;
        } else {
            total += v;
        }
    }
    let value = u32::try_from(total).ok()?;
    ((1..=MAX_ROMAN).contains(&value) && to_roman(value) == lower).then_some(value)
}

pub fn to_roman(mut value: u32) -> String {
    let mut out = String::new();
    for (v, s) in [(10, "x"), (9, "ix"), (5, "v"), (4, "iv"), (1, "i")] {
        while value >= v {
            out.push_str(s);
            value -= v;
        }
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RangeError {
    #[error("range {0:?} runs backwards")]
    InvertedRange(String),
    #[error("range {0:?} mixes label alphabets")]
    MixedAlphabet(String),
    #[error("{0:?} is not a label, range or list")]
    Invalid(String),
}

fn list_separator() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s*,\s*(?:and\s+)?|\s+and\s+|\s*&\s*").unwrap())
}

fn range_item() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([A-Za-z]+|[0-9]+)(?:\s*[-\u{2013}]\s*([A-Za-z]+|[0-9]+))?$").unwrap())
}

fn expand_pair(item: &str, lo: &str, hi: &str) -> Result<Vec<Label>, RangeError> {
    let mixed = || RangeError::MixedAlphabet(item.to_string());
    let invalid = || RangeError::Invalid(item.to_string());
    let (a, b, make): (u32, u32, fn(u32) -> Label) = if let (Some(a), Some(b)) = (roman_value(lo), roman_value(hi)) {
        (a, b, Label::roman)
    } else {
        let (la, lb) = (Label::parse(lo).ok_or_else(invalid)?, Label::parse(hi).ok_or_else(invalid)?);
        if la.kind != lb.kind {
            return Err(mixed());
        }
        match la.kind {
            LabelKind::Letter => (la.ordinal(), lb.ordinal(), |v| Label::letter((b'a' + (v - 1) as u8) as char)),
            LabelKind::Digit => (la.ordinal(), lb.ordinal(), Label::digit),
            // one side roman, the other not
            LabelKind::Roman => return Err(mixed()),
        }
    };
    if a > b {
        return Err(RangeError::InvertedRange(item.to_string()));
    }
    Ok((a..=b).map(make).collect())
}

/// Expand a label expression: a single label, an inclusive range (`a-c`,
/// `i-iii`, `1–3`), or a list of those joined by commas, `and` or `&`.
/// Range endpoints that are both roman numerals expand as roman numerals.
pub fn expand_range(token_text: &str) -> Result<Vec<Label>, RangeError> {
    let text = token_text.trim();
    if text.is_empty() {
        return Err(RangeError::Invalid(token_text.to_string()));
    }
    let mut labels = Vec::new();
    for item in list_separator().split(text) {
        let caps = range_item()
            .captures(item)
            .ok_or_else(|| RangeError::Invalid(item.to_string()))?;
        let lo = caps.get(1).unwrap().as_str();
        match caps.get(2) {
            Some(hi) => labels.extend(expand_pair(item, lo, hi.as_str())?),
            None => labels.push(Label::parse(lo).ok_or_else(|| RangeError::Invalid(item.to_string()))?),
        }
    }
    let mut seen = HashSet::new();
    if !labels.iter().all(|l| seen.insert(l.text.clone())) {
        return Err(RangeError::Invalid(token_text.to_string()));
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelToken {
    pub raw: String,
    pub labels: Vec<Label>,
    /// Byte range of `raw` in the caption.
    pub span: Range<usize>,
}

/// Match a label token at the start of `s`; returns its byte length and labels.
fn match_token(s: &str) -> Option<(usize, Vec<Label>)> {
    if let Some(rest) = s.strip_prefix('(') {
        let close = rest.char_indices().take_while(|&(i, _)| i <= MAX_PAREN_INNER).find(|&(_, c)| c == ')')?.0;
        let labels = expand_range(&rest[..close]).ok()?;
        return Some((close + 2, labels));
    }
    let run = s.bytes().take_while(u8::is_ascii_alphabetic).count();
    if run == 0 {
        return None;
    }
    let label = Label::parse(&s[..run])?;
    let mut after = s[run..].chars();
    match after.next()? {
        ')' => Some((run + 1, vec![label])),
        '.' | ':' | ',' if after.next().is_none_or(char::is_whitespace) => Some((run + 1, vec![label])),
        _ => None,
    }
}

fn clause_initial(caption: &str, pos: usize, last_token_end: Option<usize>) -> bool {
    let before = &caption[..pos];
    let trimmed = before.trim_end();
    if last_token_end == Some(pos) {
        return true;
    }
    // "A.B." and "e.g." are not labels: a token starts after whitespace
    if !trimmed.is_empty() && trimmed.len() == before.len() {
        return false;
    }
    trimmed.is_empty()
        || last_token_end == Some(trimmed.len())
        || before[trimmed.len()..].contains('\n')
        || trimmed.ends_with(['.', ';', ':'])
}

/// Label tokens at clause-initial positions, in caption order.
pub fn scan_labels(caption: &str) -> Vec<LabelToken> {
    let mut tokens: Vec<LabelToken> = Vec::new();
    let mut pos = 0;
    while let Some(c) = caption[pos..].chars().next() {
        if !c.is_whitespace() && clause_initial(caption, pos, tokens.last().map(|t| t.span.end)) {
            if let Some((len, labels)) = match_token(&caption[pos..]) {
                tokens.push(LabelToken {
                    raw: caption[pos..pos + len].to_string(),
                    labels,
                    span: pos..pos + len,
                });
                pos += len;
                continue;
            }
        }
        pos += c.len_utf8();
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subcaption {
    pub label: Label,
    /// Trimmed segment text, prefixed by the shared preamble when enabled.
    pub text: String,
    /// Untrimmed segment: from the end of this label token to the next token.
    pub span: Range<usize>,
    pub label_span: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnseparableReason {
    NoLabels,
    SingleLabel,
    DuplicateLabels,
    /// A label token with no text before the next one, e.g. "(a) (b) CT".
    EmptySubcaption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum SplitResult {
    Separable(Vec<Subcaption>),
    Unseparable(UnseparableReason),
}

impl SplitResult {
    pub fn subcaptions(&self) -> &[Subcaption] {
        match self {
            SplitResult::Separable(s) => s,
            SplitResult::Unseparable(_) => &[],
        }
    }

    pub fn is_separable(&self) -> bool {
        matches!(self, SplitResult::Separable(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitOptions {
    /// Prepend text before the first label to every subcaption.
    pub share_preamble: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self { share_preamble: true }
    }
}

pub fn split_caption(caption: &str) -> SplitResult {
    split_caption_with(caption, SplitOptions::default())
}

pub fn split_caption_with(caption: &str, opts: SplitOptions) -> SplitResult {
    let mut tokens = scan_labels(caption);
    match tokens.len() {
        0 => return SplitResult::Unseparable(UnseparableReason::NoLabels),
        1 => return SplitResult::Unseparable(UnseparableReason::SingleLabel),
        _ => {}
    }
    // "i", "v", "x" read as roman numerals when the caption uses roman labels
    let all = |ts: &[LabelToken]| ts.iter().flat_map(|t| t.labels.clone()).collect::<Vec<_>>();
    let labels = all(&tokens);
    if labels.iter().any(|l| l.kind == LabelKind::Roman) && labels.iter().all(Label::could_be_roman) {
        for t in &mut tokens {
            for l in &mut t.labels {
                *l = l.as_roman();
            }
        }
    }
    let mut seen = HashSet::new();
    if !all(&tokens).iter().all(|l| seen.insert(l.as_str().to_string())) {
        return SplitResult::Unseparable(UnseparableReason::DuplicateLabels);
    }

    let preamble = caption[..tokens[0].span.start].trim();
    let mut subcaptions = Vec::new();
    for (k, tok) in tokens.iter().enumerate() {
        let end = tokens.get(k + 1).map_or(caption.len(), |n| n.span.start);
        let span = tok.span.end..end;
        let body = caption[span.clone()].trim();
        if body.is_empty() {
            return SplitResult::Unseparable(UnseparableReason::EmptySubcaption);
        }
        let text = if opts.share_preamble && !preamble.is_empty() {
            format!("{preamble} {body}")
        } else {
            body.to_string()
        };
        for label in &tok.labels {
            subcaptions.push(Subcaption {
                label: label.clone(),
                text: text.clone(),
                span: span.clone(),
                label_span: tok.span.clone(),
            });
        }
    }
    SplitResult::Separable(subcaptions)
}
