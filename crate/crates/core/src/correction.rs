//! Turning reviewed model rationales into semi-factual training examples.
//!
//! A surfaced model rationale is *confirmed* when a human (or the oracle)
//! agrees it supports the label, and *false* otherwise. Gold rationales the
//! model did not surface are *missing*. False rationales are rewritten with
//! synonyms; sentences holding missing rationales are extracted as new
//! examples. Empty branches are topped up with static variants so every
//! document contributes a fixed number of examples.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedExample, Protect, Sampler, DEFAULT_RATE, RETRIES_PER_VARIANT};
use crate::corpus::{tokens_from_surfaces, Document, Provenance, RationaleSpan, Replacement};
use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::rng::{SeedTrace, TracedRng};
use crate::saliency::{extract_model_rationales, ModelRationaleSet, SaliencyConfig};
use crate::synonyms::SynonymProvider;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "confirmed")]
    Confirmed,
    #[serde(rename = "false")]
    FalseRationale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    #[default]
    Human,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RationaleVerdict {
    pub doc_id: String,
    pub span: RationaleSpan,
    pub verdict: Verdict,
    #[serde(default)]
    pub source: VerdictSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MissingRationale {
    pub doc_id: String,
    pub span: RationaleSpan,
}

/// All review decisions for one document.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DocReview {
    pub verdicts: Vec<RationaleVerdict>,
    pub missing: Vec<MissingRationale>,
}

impl DocReview {
    pub fn false_spans(&self) -> Vec<RationaleSpan> {
        self.verdicts
            .iter()
            .filter(|v| v.verdict == Verdict::FalseRationale)
            .map(|v| v.span)
            .collect()
    }

    pub fn missing_spans(&self) -> Vec<RationaleSpan> {
        self.missing.iter().map(|m| m.span).collect()
    }

    /// Check the review against the surfaced spans and the gold rationales.
    pub fn validate(&self, doc: &Document, surfaced: &ModelRationaleSet) -> Result<()> {
        let mut seen = HashSet::new();
        for v in &self.verdicts {
            if v.doc_id != doc.id {
                return Err(Error::Validation(format!(
                    "verdict for {} filed under {}",
                    v.doc_id, doc.id
                )));
            }
            if !surfaced.contains(&v.span) {
                return Err(Error::InvalidSpan {
                    doc_id: doc.id.clone(),
                    span: v.span,
                    reason: "not a surfaced model rationale".into(),
                });
            }
            if !seen.insert(v.span) {
                return Err(Error::InvalidSpan {
                    doc_id: doc.id.clone(),
                    span: v.span,
                    reason: "more than one verdict".into(),
                });
            }
        }
        for m in &self.missing {
            if !doc.rationales().contains(&m.span) {
                return Err(Error::InvalidSpan {
                    doc_id: doc.id.clone(),
                    span: m.span,
                    reason: "missing rationale is not a gold rationale".into(),
                });
            }
        }
        Ok(())
    }

    /// Same decisions regardless of order and source tags.
    pub fn normalized(&self) -> DocReview {
        let mut verdicts: Vec<RationaleVerdict> = self
            .verdicts
            .iter()
            .map(|v| RationaleVerdict {
                source: VerdictSource::Human,
                ..v.clone()
            })
            .collect();
        verdicts.sort_by_key(|v| v.span);
        verdicts.dedup();
        let mut missing = self.missing.clone();
        missing.sort_by_key(|m| m.span);
        missing.dedup();
        DocReview { verdicts, missing }
    }
}

/// Verdicts from gold annotations: a surfaced span sharing a token with some
/// gold span is confirmed, otherwise false; gold spans sharing no token with
/// any surfaced span are missing.
pub fn oracle_verdicts(doc: &Document, model_rats: &ModelRationaleSet) -> DocReview {
    let gold = doc.rationales();
    let verdicts = model_rats
        .spans
        .iter()
        .map(|s| RationaleVerdict {
            doc_id: doc.id.clone(),
            span: s.span,
            verdict: if gold.iter().any(|g| g.overlaps(&s.span)) {
                Verdict::Confirmed
            } else {
                Verdict::FalseRationale
            },
            source: VerdictSource::Oracle,
        })
        .collect();
    let missing = gold
        .iter()
        .filter(|g| model_rats.spans.iter().all(|s| !s.span.overlaps(g)))
        .map(|g| MissingRationale {
            doc_id: doc.id.clone(),
            span: *g,
        })
        .collect();
    DocReview { verdicts, missing }
}

#[derive(Debug, Clone, Default)]
pub struct CorrectionBatch {
    pub variants: Vec<AugmentedExample>,
    pub shortfall: bool,
    pub warnings: Vec<String>,
}

/// Replace every token of every false span with an independently drawn
/// synonym, `n_variants` times.
pub fn correct_false<P: SynonymProvider + ?Sized>(
    doc: &Document,
    false_spans: &[RationaleSpan],
    provider: &P,
    n_variants: usize,
    seed: u64,
) -> Result<CorrectionBatch> {
    if false_spans.is_empty() {
        return Err(Error::Validation(format!(
            "document {}: no false rationales to correct",
            doc.id
        )));
    }
    let mask = doc.mask();
    let mut batch = CorrectionBatch::default();
    let mut positions: Vec<usize> = false_spans
        .iter()
        .flat_map(|s| s.range())
        .filter(|&j| j < doc.len())
        .collect();
    positions.sort_unstable();
    positions.dedup();

    let mut slots: Vec<(usize, Vec<String>)> = Vec::new();
    for j in positions {
        let tok = &doc.tokens[j];
        if mask[j] {
            batch
                .warnings
                .push(format!("{}: token {j} is a gold rationale; kept", doc.id));
            continue;
        }
        let cands = if tok.is_punct {
            Vec::new()
        } else {
            provider.candidates(&tok.surface, doc, j)?
        };
        if cands.is_empty() {
            batch
                .warnings
                .push(format!("{}: no synonym for {:?}; kept", doc.id, tok.surface));
        } else {
            slots.push((j, cands));
        }
    }
    if slots.is_empty() {
        return Err(Error::NoCandidatesAnywhere { doc_id: doc.id.clone() });
    }

    let mut rng = TracedRng::derived(seed, &[b"fr", doc.id.as_bytes()]);
    let source: Vec<String> = doc.tokens.iter().map(|t| t.surface.clone()).collect();
    let mut seen: HashSet<Vec<String>> = HashSet::from([source.clone()]);
    let mut attempts = 0;
    while batch.variants.len() < n_variants && attempts < RETRIES_PER_VARIANT * n_variants {
        attempts += 1;
        let mut surfaces = source.clone();
        let mut replacements = Vec::with_capacity(slots.len());
        for (pos, cands) in &slots {
            let new = cands[rng.index(cands.len())].clone();
            replacements.push(Replacement {
                position: *pos,
                old: source[*pos].clone(),
                new: new.clone(),
            });
            surfaces[*pos] = new;
        }
        if !seen.insert(surfaces.clone()) {
            continue;
        }
        batch.variants.push(AugmentedExample {
            base_id: doc.id.clone(),
            tokens: tokens_from_surfaces(&surfaces),
            label: doc.label,
            provenance: Provenance::FrCorrection,
            replacements,
            seed_trace: rng.trace(),
            rationales: doc.rationales().to_vec(),
            source_range: None,
        });
    }
    batch.shortfall = batch.variants.len() < n_variants;
    Ok(batch)
}

/// Token range of the sentence(s) covering `span`.
fn sentence_range(sentences: &[(usize, usize)], span: RationaleSpan) -> Option<(usize, usize)> {
    let hit: Vec<&(usize, usize)> = sentences
        .iter()
        .filter(|(s, e)| *s < span.end && span.start < *e)
        .collect();
    Some((hit.first()?.0, hit.last()?.1))
}

/// Extract the sentences holding missing rationales as new examples with the
/// source label. Each distinct sentence is used once; a sentence spanning the
/// whole document adds nothing and is skipped.
pub fn correct_missing(
    doc: &Document,
    missing: &[RationaleSpan],
    n_variants: usize,
    seed: u64,
) -> Result<CorrectionBatch> {
    if missing.is_empty() {
        return Err(Error::Validation(format!(
            "document {}: no missing rationales to extract",
            doc.id
        )));
    }
    let sentences = doc.sentences();
    let mut ordered = missing.to_vec();
    ordered.sort_unstable();
    let mut used = HashSet::new();
    let mut batch = CorrectionBatch::default();
    for span in ordered {
        if batch.variants.len() >= n_variants {
            break;
        }
        let Some((start, end)) = sentence_range(&sentences, span) else {
            batch
                .warnings
                .push(format!("{}: span {span} outside the document", doc.id));
            continue;
        };
        if (start, end) == (0, doc.len()) || !used.insert((start, end)) {
            continue;
        }
        let rationales: Vec<RationaleSpan> = doc
            .rationales()
            .iter()
            .filter(|r| start <= r.start && r.end <= end)
            .map(|r| RationaleSpan::new(r.start - start, r.end - start))
            .collect();
        batch.variants.push(AugmentedExample {
            base_id: doc.id.clone(),
            tokens: tokens_from_surfaces(doc.tokens[start..end].iter().map(|t| t.surface.as_str())),
            label: doc.label,
            provenance: Provenance::MrExtraction,
            replacements: Vec::new(),
            seed_trace: SeedTrace { seed, draws: 0 },
            rationales,
            source_range: Some((start, end)),
        });
    }
    batch.shortfall = batch.variants.len() < n_variants;
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicConfig {
    pub mr_count: usize,
    pub fr_count: usize,
    pub saliency: SaliencyConfig,
    /// Replacement rate used for static backfill.
    pub rate: f64,
}

impl Default for DynamicConfig {
    fn default() -> Self {
        DynamicConfig {
            mr_count: 4,
            fr_count: 3,
            saliency: SaliencyConfig::default(),
            rate: DEFAULT_RATE,
        }
    }
}

/// Examples generated for one document, in quota order: missing-rationale
/// quota first, then false-rationale quota.
#[derive(Debug, Clone, Default)]
pub struct DynamicOutcome {
    pub mr_examples: Vec<AugmentedExample>,
    pub fr_examples: Vec<AugmentedExample>,
    /// Static variants filling whichever quota lacked material.
    pub mr_backfill: Vec<AugmentedExample>,
    pub fr_backfill: Vec<AugmentedExample>,
    pub shortfall: bool,
    pub warnings: Vec<String>,
}

impl DynamicOutcome {
    pub fn len(&self) -> usize {
        self.mr_examples.len() + self.mr_backfill.len() + self.fr_examples.len() + self.fr_backfill.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(suffix tag, example)` pairs in output order.
    pub fn tagged(&self) -> Vec<(&'static str, &AugmentedExample)> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.mr_examples.iter().map(|e| ("mr", e)));
        out.extend(self.mr_backfill.iter().map(|e| ("bm", e)));
        out.extend(self.fr_examples.iter().map(|e| ("fr", e)));
        out.extend(self.fr_backfill.iter().map(|e| ("bf", e)));
        out
    }

    pub fn into_documents(self) -> Result<Vec<Document>> {
        let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
        let mut docs = Vec::with_capacity(self.len());
        for (tag, example) in self.tagged() {
            let n = counters.entry(tag).or_insert(0);
            *n += 1;
            let id = crate::augment::variant_id(&example.base_id, tag, *n);
            docs.push(example.clone().into_document(id)?);
        }
        Ok(docs)
    }
}

/// Quota-filling correction for one reviewed document.
pub fn dynamic_augment_reviewed<P: SynonymProvider + ?Sized>(
    doc: &Document,
    review: &DocReview,
    provider: &P,
    config: &DynamicConfig,
    seed: u64,
) -> Result<DynamicOutcome> {
    let mut out = DynamicOutcome::default();

    let missing = review.missing_spans();
    if config.mr_count > 0 && !missing.is_empty() {
        let batch = correct_missing(doc, &missing, config.mr_count, seed)?;
        out.warnings.extend(batch.warnings);
        out.mr_examples = batch.variants;
    }

    let false_spans = review.false_spans();
    if config.fr_count > 0 && !false_spans.is_empty() {
        match correct_false(doc, &false_spans, provider, config.fr_count, seed) {
            Ok(batch) => {
                out.warnings.extend(batch.warnings);
                out.fr_examples = batch.variants;
            }
            Err(Error::NoCandidatesAnywhere { doc_id }) => out
                .warnings
                .push(format!("{doc_id}: no replaceable false-rationale token")),
            Err(e) => return Err(e),
        }
    }

    let need_mr = config.mr_count - out.mr_examples.len();
    let need_fr = config.fr_count - out.fr_examples.len();
    if need_mr + need_fr > 0 {
        let exclude: Vec<Vec<String>> = out
            .fr_examples
            .iter()
            .map(|e| e.tokens.iter().map(|t| t.surface.clone()).collect())
            .collect();
        let mut rng = TracedRng::derived(seed, &[b"backfill", doc.id.as_bytes()]);
        match Sampler::new(doc, provider, Protect::Rationales, config.rate).generate(
            need_mr + need_fr,
            &mut rng,
            &exclude,
        ) {
            Ok(batch) => {
                let mut fill = batch.variants;
                let fr_part = fill.split_off(need_mr.min(fill.len()));
                out.mr_backfill = fill;
                out.fr_backfill = fr_part;
            }
            Err(Error::NoEligibleTokens { doc_id }) => {
                out.warnings.push(format!("{doc_id}: static backfill impossible"))
            }
            Err(e) => return Err(e),
        }
    }
    out.shortfall = out.len() < config.mr_count + config.fr_count;
    Ok(out)
}

/// Surface model rationales, judge them with the oracle and correct.
pub fn dynamic_augment<M, P>(
    doc: &Document,
    model: &M,
    provider: &P,
    config: &DynamicConfig,
    seed: u64,
) -> Result<(ModelRationaleSet, DocReview, DynamicOutcome)>
where
    M: ClassifierModel + ?Sized,
    P: SynonymProvider + ?Sized,
{
    let surfaced = extract_model_rationales(model, doc, &config.saliency, seed)?;
    let review = oracle_verdicts(doc, &surfaced);
    let outcome = dynamic_augment_reviewed(doc, &review, provider, config, seed)?;
    Ok((surfaced, review, outcome))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ReviewLine {
    Verdict {
        doc_id: String,
        span: RationaleSpan,
        verdict: Verdict,
        #[serde(default)]
        source: VerdictSource,
    },
    Missing {
        doc_id: String,
        missing: Vec<RationaleSpan>,
    },
}

/// Read a verdict file: one verdict object or one missing-list object per line.
pub fn load_reviews(path: impl AsRef<Path>) -> Result<BTreeMap<String, DocReview>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reviews: BTreeMap<String, DocReview> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ReviewLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match parsed {
            ReviewLine::Verdict {
                doc_id,
                span,
                verdict,
                source,
            } => reviews
                .entry(doc_id.clone())
                .or_default()
                .verdicts
                .push(RationaleVerdict {
                    doc_id,
                    span,
                    verdict,
                    source,
                }),
            ReviewLine::Missing { doc_id, missing } => {
                let entry = reviews.entry(doc_id.clone()).or_default();
                entry.missing.extend(missing.into_iter().map(|span| MissingRationale {
                    doc_id: doc_id.clone(),
                    span,
                }));
            }
        }
    }
    Ok(reviews)
}

pub fn write_reviews<'a>(
    reviews: impl IntoIterator<Item = (&'a String, &'a DocReview)>,
    mut writer: impl Write,
) -> std::io::Result<()> {
    for (doc_id, review) in reviews {
        for v in &review.verdicts {
            let line = ReviewLine::Verdict {
                doc_id: v.doc_id.clone(),
                span: v.span,
                verdict: v.verdict,
                source: v.source,
            };
            serde_json::to_writer(&mut writer, &line)?;
            writer.write_all(b"\n")?;
        }
        let line = ReviewLine::Missing {
            doc_id: doc_id.clone(),
            missing: review.missing_spans(),
        };
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}
