//! Documents, tokens, rationale spans and the JSON Lines corpus format.
//!
//! Rationale spans are token-indexed and end-exclusive. A span covers at most
//! three consecutive tokens and spans within a document never overlap. The
//! per-token rationale mask is always derived from the spans.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTrace;

/// Maximum number of tokens in one rationale span.
pub const MAX_SPAN_LEN: usize = 3;

/// Sentence terminators recognised by [`segment_sentences`].
pub const SENTENCE_TERMINATORS: [&str; 3] = [".", "!", "?"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub index: usize,
    pub is_punct: bool,
}

impl Token {
    pub fn new(surface: impl Into<String>, index: usize) -> Self {
        let surface = surface.into();
        let is_punct = is_punct(&surface);
        Token {
            surface,
            index,
            is_punct,
        }
    }
}

/// True iff `s` is non-empty and made only of ASCII punctuation.
pub fn is_punct(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_punctuation())
}

/// Whitespace split, then detach leading and trailing ASCII punctuation runs
/// as their own tokens.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut surfaces: Vec<&str> = Vec::new();
    for chunk in text.split_whitespace() {
        if is_punct(chunk) {
            surfaces.push(chunk);
            continue;
        }
        let lead = chunk.find(|c: char| !c.is_ascii_punctuation()).unwrap_or(chunk.len());
        let trail = chunk
            .rfind(|c: char| !c.is_ascii_punctuation())
            .map(|i| i + chunk[i..].chars().next().map_or(1, char::len_utf8))
            .unwrap_or(chunk.len());
        if lead > 0 {
            surfaces.push(&chunk[..lead]);
        }
        surfaces.push(&chunk[lead..trail]);
        if trail < chunk.len() {
            surfaces.push(&chunk[trail..]);
        }
    }
    tokens_from_surfaces(surfaces)
}

/// Build a contiguously indexed token sequence from surfaces.
pub fn tokens_from_surfaces<S: AsRef<str>>(surfaces: impl IntoIterator<Item = S>) -> Vec<Token> {
    surfaces
        .into_iter()
        .enumerate()
        .map(|(i, s)| Token::new(s.as_ref(), i))
        .collect()
}

/// Surfaces joined by single spaces.
pub fn join_tokens(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&t.surface);
    }
    out
}

/// Sentence ranges partitioning `0..tokens.len()`; a range closes after each
/// terminator token and the last range closes at the end.
pub fn segment_sentences(tokens: &[Token]) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if SENTENCE_TERMINATORS.contains(&t.surface.as_str()) {
            ranges.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < tokens.len() {
        ranges.push((start, tokens.len()));
    }
    ranges
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RationaleSpan {
    pub start: usize,
    pub end: usize,
}

impl RationaleSpan {
    pub const fn new(start: usize, end: usize) -> Self {
        RationaleSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, index: usize) -> bool {
        self.start <= index && index < self.end
    }

    pub fn overlaps(&self, other: &RationaleSpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    /// Check the length and bounds invariants against a document length.
    pub fn check(&self, doc_len: usize) -> std::result::Result<(), String> {
        if self.start >= self.end {
            return Err("empty span".into());
        }
        if self.len() > MAX_SPAN_LEN {
            return Err(format!("length {} exceeds {} tokens", self.len(), MAX_SPAN_LEN));
        }
        if self.end > doc_len {
            return Err(format!("end {} beyond document length {}", self.end, doc_len));
        }
        Ok(())
    }
}

impl fmt::Display for RationaleSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.start, self.end)
    }
}

impl Serialize for RationaleSpan {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.start, self.end].serialize(s)
    }
}

impl<'de> Deserialize<'de> for RationaleSpan {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [start, end] = <[usize; 2]>::deserialize(d)?;
        Ok(RationaleSpan { start, end })
    }
}

/// Validate and sort a span set for a document of `doc_len` tokens.
pub fn validate_spans(doc_id: &str, doc_len: usize, spans: &[RationaleSpan]) -> Result<Vec<RationaleSpan>> {
    let mut sorted = spans.to_vec();
    sorted.sort_unstable();
    for span in &sorted {
        span.check(doc_len).map_err(|reason| Error::InvalidSpan {
            doc_id: doc_id.to_string(),
            span: *span,
            reason,
        })?;
    }
    for pair in sorted.windows(2) {
        if pair[0].overlaps(&pair[1]) {
            return Err(Error::InvalidSpan {
                doc_id: doc_id.to_string(),
                span: pair[1],
                reason: format!("overlaps {}", pair[0]),
            });
        }
    }
    Ok(sorted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "neg")]
    Negative,
    #[serde(rename = "pos")]
    Positive,
}

impl Label {
    pub fn from_positive(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    /// 1.0 for positive, 0.0 for negative.
    pub fn target(self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "pos",
            Label::Negative => "neg",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Static,
    FrCorrection,
    MrExtraction,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Static => "static",
            Provenance::FrCorrection => "fr_correction",
            Provenance::MrExtraction => "mr_extraction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    pub position: usize,
    pub old: String,
    pub new: String,
}

/// Provenance block carried by generated documents on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentInfo {
    pub provenance: Provenance,
    pub base_id: String,
    #[serde(default)]
    pub replacements: Vec<Replacement>,
    pub seed_trace: SeedTrace,
    /// Token range of the source this example was extracted from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_range: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<Token>,
    pub label: Label,
    rationales: Vec<RationaleSpan>,
    pub augmented: Option<AugmentInfo>,
}

impl Document {
    pub fn new(id: impl Into<String>, tokens: Vec<Token>, label: Label, rationales: &[RationaleSpan]) -> Result<Self> {
        let id = id.into();
        let rationales = validate_spans(&id, tokens.len(), rationales)?;
        Ok(Document {
            id,
            tokens,
            label,
            rationales,
            augmented: None,
        })
    }

    pub fn from_text(id: impl Into<String>, text: &str, label: Label, rationales: &[RationaleSpan]) -> Result<Self> {
        Self::new(id, tokenize(text), label, rationales)
    }

    pub fn with_augmentation(mut self, info: AugmentInfo) -> Self {
        self.augmented = Some(info);
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Gold rationale spans, sorted by start.
    pub fn rationales(&self) -> &[RationaleSpan] {
        &self.rationales
    }

    pub fn set_rationales(&mut self, spans: &[RationaleSpan]) -> Result<()> {
        self.rationales = validate_spans(&self.id, self.tokens.len(), spans)?;
        Ok(())
    }

    /// `mask[j]` is true iff token `j` is covered by a rationale span.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.tokens.len()];
        for span in &self.rationales {
            for m in &mut mask[span.range()] {
                *m = true;
            }
        }
        mask
    }

    pub fn text(&self) -> String {
        join_tokens(&self.tokens)
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    pub fn sentences(&self) -> Vec<(usize, usize)> {
        segment_sentences(&self.tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Validation,
    Test,
    Ood(String),
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitTag::Train => f.write_str("train"),
            SplitTag::Validation => f.write_str("validation"),
            SplitTag::Test => f.write_str("test"),
            SplitTag::Ood(name) => write!(f, "ood:{name}"),
        }
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "validation" | "val" => Ok(SplitTag::Validation),
            "test" => Ok(SplitTag::Test),
            other => match other.strip_prefix("ood:") {
                Some(name) if !name.is_empty() => Ok(SplitTag::Ood(name.to_string())),
                _ => Err(Error::Validation(format!("unknown split tag {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub documents: Vec<Document>,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(documents: Vec<Document>, split: SplitTag) -> Result<Self> {
        let mut seen = HashSet::new();
        for doc in &documents {
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::Validation(format!("duplicate document id {}", doc.id)));
            }
        }
        Ok(Dataset { documents, split })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    /// (positives, negatives)
    pub fn label_counts(&self) -> (usize, usize) {
        let pos = self.documents.iter().filter(|d| d.label.is_positive()).count();
        (pos, self.documents.len() - pos)
    }

    pub fn is_balanced(&self) -> bool {
        let (pos, neg) = self.label_counts();
        pos.abs_diff(neg) <= 1
    }

    pub fn ensure_balanced(&self) -> Result<()> {
        if self.is_balanced() {
            Ok(())
        } else {
            let (pos, neg) = self.label_counts();
            Err(Error::Validation(format!(
                "{} split is not balanced: {pos} positive / {neg} negative",
                self.split
            )))
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    label: Label,
    #[serde(default)]
    rationales: Vec<RationaleSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    augmented: Option<AugmentInfo>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Require |positives - negatives| <= 1.
    pub balanced: bool,
}

pub fn read_corpus(reader: impl BufRead, path: &Path, split: SplitTag, options: LoadOptions) -> Result<Dataset> {
    let mut documents = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let mut doc = Document::from_text(record.id, &record.text, record.label, &record.rationales)?;
        doc.augmented = record.augmented;
        documents.push(doc);
    }
    let dataset = Dataset::new(documents, split)?;
    if options.balanced {
        dataset.ensure_balanced()?;
    }
    Ok(dataset)
}

pub fn load_corpus(path: impl AsRef<Path>, split: SplitTag) -> Result<Dataset> {
    load_corpus_with(path, split, LoadOptions::default())
}

pub fn load_corpus_with(path: impl AsRef<Path>, split: SplitTag, options: LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file), path, split, options)
}

pub fn write_corpus(dataset: &Dataset, mut writer: impl Write) -> std::io::Result<()> {
    for doc in &dataset.documents {
        let record = Record {
            id: doc.id.clone(),
            text: doc.text(),
            label: doc.label,
            rationales: doc.rationales.clone(),
            augmented: doc.augmented.clone(),
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_corpus(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus(dataset, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surfaces(text: &str) -> Vec<String> {
        tokenize(text).into_iter().map(|t| t.surface).collect()
    }

    #[test]
    fn tokenize_detaches_punctuation() {
        assert_eq!(surfaces("was sad."), ["was", "sad", "."]);
        assert_eq!(surfaces("not great"), ["not", "great"]);
        assert_eq!(
            surfaces("a \"lesbian scene\" was"),
            ["a", "\"", "lesbian", "scene", "\"", "was"]
        );
        assert_eq!(surfaces("15 ...."), ["15", "...."]);
        assert_eq!(surfaces("(good),"), ["(", "good", "),"]);
        assert_eq!(surfaces("don't"), ["don't"]);
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \n").is_empty());
    }

    #[test]
    fn tokenize_handles_multibyte_edges() {
        assert_eq!(surfaces("café!"), ["café", "!"]);
        assert_eq!(surfaces("\"naïve\""), ["\"", "naïve", "\""]);
    }

    #[test]
    fn token_flags_and_indices() {
        let toks = tokenize("Good movie . I cried !");
        assert!(toks.iter().enumerate().all(|(i, t)| t.index == i));
        let punct: Vec<bool> = toks.iter().map(|t| t.is_punct).collect();
        assert_eq!(punct, [false, false, true, false, false, true]);
    }

    #[test]
    fn sentences_split_on_terminators() {
        let toks = tokenize("Good movie. I cried.");
        assert_eq!(segment_sentences(&toks), [(0, 3), (3, 6)]);
        let toks = tokenize("no terminator here");
        assert_eq!(segment_sentences(&toks), [(0, 3)]);
        let toks = tokenize(
            "Robert Urich was a fine actor, and he makes this TV movie believable. \
             I remember watching this film when I was 15 ....",
        );
        let ranges = segment_sentences(&toks);
        assert_eq!(ranges[0], (0, 15));
        assert_eq!(toks[14].surface, ".");
        assert_eq!(ranges.last().unwrap().1, toks.len());
        assert!(segment_sentences(&[]).is_empty());
    }

    #[test]
    fn mask_follows_spans() {
        let doc = Document::from_text(
            "d",
            "one two three four five six seven eight",
            Label::Positive,
            &[RationaleSpan::new(7, 8)],
        )
        .unwrap();
        let mask = doc.mask();
        assert_eq!(mask.len(), 8);
        assert!(mask[7]);
        assert_eq!(mask.iter().filter(|m| **m).count(), 1);
    }

    #[test]
    fn span_validation() {
        let toks = tokenize("a b c d e f g h");
        let long = Document::new("d1", toks.clone(), Label::Negative, &[RationaleSpan::new(2, 6)]);
        match long {
            Err(Error::InvalidSpan { doc_id, span, .. }) => {
                assert_eq!(doc_id, "d1");
                assert_eq!(span, RationaleSpan::new(2, 6));
            }
            other => panic!("expected InvalidSpan, got {other:?}"),
        }
        let overlap = Document::new(
            "d2",
            toks.clone(),
            Label::Negative,
            &[RationaleSpan::new(1, 3), RationaleSpan::new(2, 4)],
        );
        assert!(matches!(overlap, Err(Error::InvalidSpan { .. })));
        let oob = Document::new("d3", toks.clone(), Label::Negative, &[RationaleSpan::new(7, 9)]);
        assert!(oob.is_err());
        let empty = Document::new("d4", toks, Label::Negative, &[RationaleSpan::new(3, 3)]);
        assert!(empty.is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let data = "{\"id\":\"a\",\"text\":\"x\",\"label\":\"pos\",\"rationales\":[]}\nnot json\n";
        let err = read_corpus(
            data.as_bytes(),
            Path::new("c.jsonl"),
            SplitTag::Train,
            LoadOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = Document::from_text("a", "x", Label::Positive, &[]).unwrap();
        assert!(Dataset::new(vec![a.clone(), a], SplitTag::Train).is_err());
    }

    #[test]
    fn split_tags_parse() {
        assert_eq!("ood:yelp".parse::<SplitTag>().unwrap(), SplitTag::Ood("yelp".into()));
        assert_eq!(SplitTag::Ood("yelp".into()).to_string(), "ood:yelp");
        assert!("ood:".parse::<SplitTag>().is_err());
    }
}
