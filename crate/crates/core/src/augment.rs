//! Static semi-factual generation.
//!
//! A variant replaces `k = max(1, ceil(rate * E))` sampled non-rationale,
//! non-punctuation tokens with synonyms, where `E` counts the non-rationale
//! non-punctuation tokens of the source. Rationale tokens are never touched,
//! so the variant keeps the source label.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::corpus::{
    tokens_from_surfaces, AugmentInfo, Dataset, Document, Label, Provenance, RationaleSpan, Replacement, Token,
};
use crate::error::{Error, Result};
use crate::rng::{SeedTrace, TracedRng};
use crate::synonyms::SynonymProvider;

pub const DEFAULT_RATE: f64 = 0.05;

/// Attempts allowed per requested variant before giving up on dedup.
pub const RETRIES_PER_VARIANT: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedExample {
    pub base_id: String,
    pub tokens: Vec<Token>,
    pub label: Label,
    pub provenance: Provenance,
    pub replacements: Vec<Replacement>,
    pub seed_trace: SeedTrace,
    /// Gold rationales re-indexed into this example.
    pub rationales: Vec<RationaleSpan>,
    /// Source token range for extracted examples.
    pub source_range: Option<(usize, usize)>,
}

impl AugmentedExample {
    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    pub fn into_document(self, id: impl Into<String>) -> Result<Document> {
        let info = AugmentInfo {
            provenance: self.provenance,
            base_id: self.base_id,
            replacements: self.replacements,
            seed_trace: self.seed_trace,
            source_range: self.source_range,
        };
        Ok(Document::new(id, self.tokens, self.label, &self.rationales)?.with_augmentation(info))
    }
}

/// Variants produced for one document. `shortfall` is set when fewer distinct
/// variants than requested could be found within the retry budget.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub variants: Vec<AugmentedExample>,
    pub shortfall: bool,
}

/// `max(1, ceil(rate * eligible))`.
pub fn replacement_count(rate: f64, eligible: usize) -> usize {
    // guard against 0.05 * 20 landing a hair above 1.0
    let raw = (rate * eligible as f64 - 1e-9).ceil();
    (raw.max(0.0) as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Protect {
    Rationales,
    Nothing,
}

pub(crate) struct Sampler<'a, P: SynonymProvider + ?Sized> {
    doc: &'a Document,
    provider: &'a P,
    protect: Protect,
    rate: f64,
}

impl<'a, P: SynonymProvider + ?Sized> Sampler<'a, P> {
    pub(crate) fn new(doc: &'a Document, provider: &'a P, protect: Protect, rate: f64) -> Self {
        Sampler {
            doc,
            provider,
            protect,
            rate,
        }
    }

    /// Draw up to `n` distinct variants that also differ from `exclude`.
    pub(crate) fn generate(&self, n: usize, rng: &mut TracedRng, exclude: &[Vec<String>]) -> Result<Batch> {
        let doc = self.doc;
        let mask = doc.mask();
        let mut base_count = 0;
        let mut eligible: Vec<(usize, Vec<String>)> = Vec::new();
        for (j, tok) in doc.tokens.iter().enumerate() {
            if tok.is_punct || (self.protect == Protect::Rationales && mask[j]) {
                continue;
            }
            base_count += 1;
            let cands = self.provider.candidates(&tok.surface, doc, j)?;
            if !cands.is_empty() {
                eligible.push((j, cands));
            }
        }
        if eligible.is_empty() {
            return Err(Error::NoEligibleTokens { doc_id: doc.id.clone() });
        }
        let k = replacement_count(self.rate, base_count).min(eligible.len());

        let source: Vec<String> = doc.tokens.iter().map(|t| t.surface.clone()).collect();
        let mut seen: HashSet<Vec<String>> = exclude.iter().cloned().collect();
        seen.insert(source.clone());

        let mut batch = Batch::default();
        let budget = RETRIES_PER_VARIANT * n;
        let mut attempts = 0;
        while batch.variants.len() < n && attempts < budget {
            attempts += 1;
            let mut picks: Vec<usize> = rng.sample_indices(eligible.len(), k).into_iter().collect();
            picks.sort_unstable();
            let mut surfaces = source.clone();
            let mut replacements = Vec::with_capacity(k);
            for pick in picks {
                let (pos, cands) = &eligible[pick];
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
                provenance: Provenance::Static,
                replacements,
                seed_trace: rng.trace(),
                rationales: doc.rationales().to_vec(),
                source_range: None,
            });
        }
        batch.shortfall = batch.variants.len() < n;
        Ok(batch)
    }
}

/// Per-document stream for static generation.
pub fn static_stream(seed: u64, doc_id: &str) -> TracedRng {
    TracedRng::derived(seed, &[b"static", doc_id.as_bytes()])
}

pub fn generate_static<P: SynonymProvider + ?Sized>(
    doc: &Document,
    provider: &P,
    n_variants: usize,
    rate: f64,
    seed: u64,
) -> Result<Batch> {
    check_rate(rate)?;
    let mut rng = static_stream(seed, &doc.id);
    Sampler::new(doc, provider, Protect::Rationales, rate).generate(n_variants, &mut rng, &[])
}

fn check_rate(rate: f64) -> Result<()> {
    if rate.is_finite() && rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("rate must be in (0, 1], got {rate}")))
    }
}

/// Dataset with generated examples appended, plus per-document problems.
#[derive(Debug, Clone)]
pub struct Expansion {
    pub dataset: Dataset,
    /// `(doc_id, reason)` for documents that contributed fewer variants.
    pub shortfalls: Vec<(String, String)>,
}

pub(crate) fn variant_id(base: &str, tag: &str, n: usize) -> String {
    format!("{base}#{tag}{n}")
}

fn expand_with<F>(train: &Dataset, per_doc: usize, tag: &str, generate: F) -> Result<Expansion>
where
    F: Fn(&Document) -> Result<Batch> + Sync,
{
    let mut documents = train.documents.clone();
    let mut shortfalls = Vec::new();
    if per_doc == 0 {
        return Ok(Expansion {
            dataset: train.clone(),
            shortfalls,
        });
    }
    let batches: Vec<Result<Batch>> = train.documents.par_iter().map(&generate).collect();
    for (doc, batch) in train.documents.iter().zip(batches) {
        match batch {
            Ok(batch) => {
                if batch.shortfall {
                    shortfalls.push((
                        doc.id.clone(),
                        format!("{} of {per_doc} distinct variants", batch.variants.len()),
                    ));
                }
                for (i, variant) in batch.variants.into_iter().enumerate() {
                    documents.push(variant.into_document(variant_id(&doc.id, tag, i + 1))?);
                }
            }
            Err(e @ Error::Provider { .. }) => return Err(e),
            Err(e) => shortfalls.push((doc.id.clone(), e.to_string())),
        }
    }
    Ok(Expansion {
        dataset: Dataset::new(documents, train.split.clone())?,
        shortfalls,
    })
}

/// Originals followed by `per_doc` static variants per document, grouped by source.
pub fn expand_dataset<P: SynonymProvider + ?Sized>(
    train: &Dataset,
    provider: &P,
    per_doc: usize,
    rate: f64,
    seed: u64,
) -> Result<Expansion> {
    check_rate(rate)?;
    expand_with(train, per_doc, "s", |doc| {
        generate_static(doc, provider, per_doc, rate, seed)
    })
}

/// Random replacement baseline: like [`expand_dataset`] but rationale tokens
/// are eligible too.
pub fn random_replacement_baseline<P: SynonymProvider + ?Sized>(
    train: &Dataset,
    provider: &P,
    per_doc: usize,
    rate: f64,
    seed: u64,
) -> Result<Expansion> {
    check_rate(rate)?;
    expand_with(train, per_doc, "rr", |doc| {
        random_replacement(doc, provider, per_doc, rate, seed)
    })
}

pub fn random_replacement<P: SynonymProvider + ?Sized>(
    doc: &Document,
    provider: &P,
    n_variants: usize,
    rate: f64,
    seed: u64,
) -> Result<Batch> {
    check_rate(rate)?;
    let mut rng = TracedRng::derived(seed, &[b"random", doc.id.as_bytes()]);
    Sampler::new(doc, provider, Protect::Nothing, rate).generate(n_variants, &mut rng, &[])
}

/// Duplication baseline: every document repeated `factor` times.
pub fn duplicate_baseline(train: &Dataset, factor: usize) -> Result<Dataset> {
    if factor == 0 {
        return Err(Error::Validation("duplication factor must be at least 1".into()));
    }
    let mut documents = Vec::with_capacity(train.len() * factor);
    for copy in 0..factor {
        for doc in &train.documents {
            let mut doc = doc.clone();
            if copy > 0 {
                doc.id = variant_id(&doc.id, "dup", copy);
            }
            documents.push(doc);
        }
    }
    Dataset::new(documents, train.split.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, SplitTag};
    use crate::synonyms::SynonymLexicon;

    fn lexicon(entries: &[(&str, &[&str])]) -> SynonymLexicon {
        let mut lex = SynonymLexicon::new();
        for (head, syns) in entries {
            lex.insert(head, syns).unwrap();
        }
        lex
    }

    #[test]
    fn replacement_count_rounds_up_with_floor_of_one() {
        assert_eq!(replacement_count(0.05, 16), 1);
        assert_eq!(replacement_count(0.05, 20), 1);
        assert_eq!(replacement_count(0.05, 21), 2);
        assert_eq!(replacement_count(0.05, 60), 3);
        assert_eq!(replacement_count(0.05, 0), 1);
        assert_eq!(replacement_count(0.05, 1000), 50);
    }

    #[test]
    fn table_example_keeps_rationale() {
        let doc = Document::from_text(
            "t1",
            "The attempt at a \" lesbian scene \" was sad .",
            Label::Negative,
            &[RationaleSpan::new(9, 10)],
        )
        .unwrap();
        let lex = lexicon(&[("attempt", &["hint"])]);
        let batch = generate_static(&doc, &lex, 1, DEFAULT_RATE, 0).unwrap();
        let v = &batch.variants[0];
        assert_eq!(
            crate::corpus::join_tokens(&v.tokens),
            "The hint at a \" lesbian scene \" was sad ."
        );
        assert_eq!(v.replacements.len(), 1);
        assert_eq!(v.replacements[0].position, 1);
        assert_eq!(v.label, Label::Negative);
    }

    #[test]
    fn all_rationale_or_punct_has_nothing_to_replace() {
        let doc = Document::from_text(
            "t2",
            "awful ! terrible .",
            Label::Negative,
            &[RationaleSpan::new(0, 1), RationaleSpan::new(2, 3)],
        )
        .unwrap();
        let lex = lexicon(&[("awful", &["dire"]), ("terrible", &["bad"])]);
        assert!(matches!(
            generate_static(&doc, &lex, 3, DEFAULT_RATE, 1),
            Err(Error::NoEligibleTokens { .. })
        ));
    }

    #[test]
    fn dedup_shortfall_is_flagged() {
        let doc = Document::from_text("t3", "a great film", Label::Positive, &[RationaleSpan::new(1, 2)]).unwrap();
        let lex = lexicon(&[("film", &["movie"])]);
        let batch = generate_static(&doc, &lex, 3, DEFAULT_RATE, 9).unwrap();
        assert_eq!(batch.variants.len(), 1);
        assert!(batch.shortfall);
    }

    #[test]
    fn duplicate_baseline_sizes_and_ids() {
        let docs = (0..50)
            .map(|i| Document::from_text(format!("d{i}"), "x y", Label::from_positive(i % 2 == 0), &[]).unwrap())
            .collect();
        let train = Dataset::new(docs, SplitTag::Train).unwrap();
        assert_eq!(duplicate_baseline(&train, 8).unwrap().len(), 400);
        assert_eq!(duplicate_baseline(&train, 1).unwrap(), train);
        assert!(duplicate_baseline(&train, 0).is_err());
    }
}
