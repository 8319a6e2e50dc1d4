//! Phrase saliency by deletion.
//!
//! The score of a span is the drop in the probability of the document's own
//! label when the span is deleted. With `samples > 0` the drop is averaged
//! over random contexts in which each other non-punctuation token is deleted
//! independently with probability `p_drop`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Document, RationaleSpan, MAX_SPAN_LEN};
use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::rng::TracedRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyConfig {
    /// Model rationales surfaced per document.
    pub k: usize,
    /// Context samples per span; 0 means plain occlusion.
    pub samples: usize,
    pub p_drop: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig {
            k: 5,
            samples: 8,
            p_drop: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub doc_id: String,
    pub span: RationaleSpan,
    pub score: f64,
    pub abs_score: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSpan {
    pub span: RationaleSpan,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRationaleSet {
    pub doc_id: String,
    pub k: usize,
    /// Non-overlapping spans, strongest first.
    pub spans: Vec<ScoredSpan>,
}

impl ModelRationaleSet {
    pub fn contains(&self, span: &RationaleSpan) -> bool {
        self.spans.iter().any(|s| s.span == *span)
    }
}

fn label_probability<M: ClassifierModel + ?Sized>(model: &M, positive: bool, surfaces: &[&str]) -> f64 {
    let p = model.predict_surfaces(surfaces);
    if positive {
        p
    } else {
        1.0 - p
    }
}

fn span_rng(seed: u64, doc_id: &str, span: RationaleSpan) -> TracedRng {
    TracedRng::derived(
        seed,
        &[
            b"saliency",
            doc_id.as_bytes(),
            &(span.start as u64).to_le_bytes(),
            &(span.end as u64).to_le_bytes(),
        ],
    )
}

pub fn phrase_sensitivity<M: ClassifierModel + ?Sized>(
    model: &M,
    doc: &Document,
    span: RationaleSpan,
    samples: usize,
    p_drop: f64,
    seed: u64,
) -> Result<SensitivityRecord> {
    if span.is_empty() || span.len() > MAX_SPAN_LEN || span.end > doc.len() {
        return Err(Error::InvalidSpan {
            doc_id: doc.id.clone(),
            span,
            reason: "not a valid phrase span".into(),
        });
    }
    if span.start == 0 && span.end == doc.len() {
        return Err(Error::InvalidSpan {
            doc_id: doc.id.clone(),
            span,
            reason: "span covers the whole document".into(),
        });
    }
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::Validation(format!("p_drop must be in [0, 1], got {p_drop}")));
    }
    let positive = doc.label.is_positive();
    let surfaces = doc.surfaces();
    let drop_diff = |keep: &[bool]| {
        let with: Vec<&str> = surfaces
            .iter()
            .zip(keep)
            .filter(|(_, k)| **k)
            .map(|(s, _)| *s)
            .collect();
        let without: Vec<&str> = surfaces
            .iter()
            .zip(keep)
            .enumerate()
            .filter(|(j, (_, k))| **k && !span.contains(*j))
            .map(|(_, (s, _))| *s)
            .collect();
        label_probability(model, positive, &with) - label_probability(model, positive, &without)
    };

    let score = if samples == 0 {
        drop_diff(&vec![true; surfaces.len()])
    } else {
        let mut rng = span_rng(seed, &doc.id, span);
        let mut total = 0.0;
        let mut keep = vec![true; surfaces.len()];
        for _ in 0..samples {
            for (j, tok) in doc.tokens.iter().enumerate() {
                keep[j] = span.contains(j) || tok.is_punct || rng.gen::<f64>() >= p_drop;
            }
            total += drop_diff(&keep);
        }
        total / samples as f64
    };
    Ok(SensitivityRecord {
        doc_id: doc.id.clone(),
        span,
        score,
        abs_score: score.abs(),
        samples,
    })
}

/// All 1-3 token windows made only of non-punctuation tokens, excluding a
/// window equal to the whole document.
pub fn candidate_spans(doc: &Document) -> Vec<RationaleSpan> {
    let n = doc.len();
    let mut spans = Vec::new();
    for start in 0..n {
        for len in 1..=MAX_SPAN_LEN {
            let end = start + len;
            if end > n || doc.tokens[end - 1].is_punct || doc.tokens[start].is_punct {
                break;
            }
            if doc.tokens[start..end].iter().any(|t| t.is_punct) {
                break;
            }
            if start == 0 && end == n {
                continue;
            }
            spans.push(RationaleSpan::new(start, end));
        }
    }
    spans
}

/// Greedy top-`k` by |score|; ties go to the earlier start, then the shorter
/// span. A span is not eligible when a phrase nested inside it scores at
/// least as high in absolute value.
pub fn select_top_k(scored: Vec<ScoredSpan>, k: usize) -> Vec<ScoredSpan> {
    let mut scored: Vec<ScoredSpan> = scored
        .iter()
        .filter(|outer| {
            !scored.iter().any(|inner| {
                inner.span != outer.span
                    && outer.span.start <= inner.span.start
                    && inner.span.end <= outer.span.end
                    && inner.score.abs() >= outer.score.abs()
            })
        })
        .copied()
        .collect();
    scored.sort_by(|a, b| {
        b.score
            .abs()
            .total_cmp(&a.score.abs())
            .then(a.span.start.cmp(&b.span.start))
            .then(a.span.len().cmp(&b.span.len()))
    });
    let mut chosen: Vec<ScoredSpan> = Vec::with_capacity(k);
    for cand in scored {
        if chosen.len() >= k {
            break;
        }
        if chosen.iter().all(|c| !c.span.overlaps(&cand.span)) {
            chosen.push(cand);
        }
    }
    chosen
}

pub fn extract_model_rationales<M: ClassifierModel + ?Sized>(
    model: &M,
    doc: &Document,
    config: &SaliencyConfig,
    seed: u64,
) -> Result<ModelRationaleSet> {
    let mut scored = Vec::new();
    if config.k > 0 {
        for span in candidate_spans(doc) {
            let rec = phrase_sensitivity(model, doc, span, config.samples, config.p_drop, seed)?;
            scored.push(ScoredSpan { span, score: rec.score });
        }
    }
    Ok(ModelRationaleSet {
        doc_id: doc.id.clone(),
        k: config.k,
        spans: select_top_k(scored, config.k),
    })
}

/// Mean sensitivity to gold rationales versus other words, normalised to
/// shares that sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub rationale_share: f64,
    pub nonrationale_share: f64,
    pub rationale_mean: f64,
    pub nonrationale_mean: f64,
    pub rationale_spans: usize,
    pub nonrationale_tokens: usize,
}

impl SensitivityReport {
    /// Normalise raw means; shares are rounded to three decimals and the
    /// non-rationale share is taken as the complement so the pair sums to 1.
    pub fn from_means(
        rationale_mean: f64,
        nonrationale_mean: f64,
        rationale_spans: usize,
        nonrationale_tokens: usize,
    ) -> Result<Self> {
        let total = rationale_mean + nonrationale_mean;
        if total.is_nan() || total <= 0.0 {
            return Err(Error::Validation("model shows no sensitivity at all".into()));
        }
        let milli = (1000.0 * rationale_mean / total).round() as u32;
        Ok(SensitivityReport {
            rationale_share: f64::from(milli) / 1000.0,
            nonrationale_share: f64::from(1000 - milli) / 1000.0,
            rationale_mean,
            nonrationale_mean,
            rationale_spans,
            nonrationale_tokens,
        })
    }

    pub fn rationale_milli(&self) -> u32 {
        (self.rationale_share * 1000.0).round() as u32
    }

    pub fn nonrationale_milli(&self) -> u32 {
        (self.nonrationale_share * 1000.0).round() as u32
    }
}

pub fn sensitivity_report<M: ClassifierModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    samples: usize,
    p_drop: f64,
    seed: u64,
) -> Result<SensitivityReport> {
    let per_doc: Vec<Result<(Vec<f64>, Vec<f64>)>> = dataset
        .documents
        .par_iter()
        .map(|doc| {
            let mask = doc.mask();
            let mut gold = Vec::new();
            for span in doc.rationales() {
                if span.start == 0 && span.end == doc.len() {
                    continue;
                }
                gold.push(phrase_sensitivity(model, doc, *span, samples, p_drop, seed)?.abs_score);
            }
            let mut other = Vec::new();
            for (j, tok) in doc.tokens.iter().enumerate() {
                if tok.is_punct || mask[j] || doc.len() == 1 {
                    continue;
                }
                let span = RationaleSpan::new(j, j + 1);
                other.push(phrase_sensitivity(model, doc, span, samples, p_drop, seed)?.abs_score);
            }
            Ok((gold, other))
        })
        .collect();

    let (mut gold_sum, mut gold_n, mut other_sum, mut other_n) = (0.0, 0usize, 0.0, 0usize);
    for res in per_doc {
        let (gold, other) = res?;
        gold_n += gold.len();
        other_n += other.len();
        gold_sum += gold.iter().sum::<f64>();
        other_sum += other.iter().sum::<f64>();
    }
    if gold_n == 0 {
        return Err(Error::Validation(format!(
            "{} split has no gold rationale spans",
            dataset.split
        )));
    }
    let other_mean = if other_n == 0 { 0.0 } else { other_sum / other_n as f64 };
    SensitivityReport::from_means(gold_sum / gold_n as f64, other_mean, gold_n, other_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;
    use crate::model::{logistic, LinearTextModel, ModelConfig};

    fn model_with(weights: &[(&str, f64)], bias: f64) -> LinearTextModel {
        let mut m = LinearTextModel::zeros(ModelConfig {
            dims_log2: 12,
            ..ModelConfig::default()
        });
        for (t, w) in weights {
            m.set_token_weight(t, *w);
        }
        m.bias = bias;
        m
    }

    fn doc(text: &str, label: Label, spans: &[RationaleSpan]) -> Document {
        Document::from_text("d", text, label, spans).unwrap()
    }

    #[test]
    fn zero_weight_span_scores_zero() {
        let m = model_with(&[("great", 1.5)], 0.2);
        let d = doc("a great movie overall", Label::Positive, &[]);
        let rec = phrase_sensitivity(&m, &d, RationaleSpan::new(2, 4), 0, 0.1, 0).unwrap();
        assert_eq!(rec.score, 0.0);
    }

    #[test]
    fn occlusion_matches_hand_computation() {
        let m = model_with(&[("great", 1.5), ("boring", -2.0)], 0.2);
        let d = doc("great but boring", Label::Negative, &[]);
        let rec = phrase_sensitivity(&m, &d, RationaleSpan::new(2, 3), 0, 0.1, 0).unwrap();
        let expected = (1.0 - logistic(0.2 + 1.5 - 2.0)) - (1.0 - logistic(0.2 + 1.5));
        assert!((rec.score - expected).abs() < 1e-12);
        assert_eq!(rec.abs_score, rec.score.abs());
    }

    #[test]
    fn zero_weight_context_makes_sampling_a_no_op() {
        let m = model_with(&[("awful", -1.0)], 0.0);
        let d = doc("the plot was awful and long", Label::Negative, &[]);
        let span = RationaleSpan::new(3, 4);
        let plain = phrase_sensitivity(&m, &d, span, 0, 0.1, 5).unwrap();
        let sampled = phrase_sensitivity(&m, &d, span, 4, 0.1, 5).unwrap();
        assert!((plain.score - sampled.score).abs() < 1e-15);
    }

    #[test]
    fn whole_document_span_is_rejected() {
        let m = model_with(&[], 0.0);
        let d = doc("fine film", Label::Positive, &[]);
        assert!(phrase_sensitivity(&m, &d, RationaleSpan::new(0, 2), 0, 0.1, 0).is_err());
    }

    #[test]
    fn top_span_is_the_weighted_word() {
        let m = model_with(&[("pathetic", -3.0)], 0.0);
        let d = doc("I wanted to like it , but this is pathetic !", Label::Negative, &[]);
        let set = extract_model_rationales(
            &m,
            &d,
            &SaliencyConfig {
                k: 1,
                samples: 0,
                p_drop: 0.1,
            },
            0,
        )
        .unwrap();
        assert_eq!(set.spans.len(), 1);
        // windows around "pathetic" score the same as the word itself
        assert_eq!(set.spans[0].span, RationaleSpan::new(9, 10));
        assert_eq!(d.tokens[9].surface, "pathetic");
    }

    #[test]
    fn k_zero_is_empty() {
        let m = model_with(&[("x", 1.0)], 0.0);
        let d = doc("x y z", Label::Positive, &[]);
        let cfg = SaliencyConfig {
            k: 0,
            ..SaliencyConfig::default()
        };
        assert!(extract_model_rationales(&m, &d, &cfg, 0).unwrap().spans.is_empty());
    }

    #[test]
    fn ties_prefer_earlier_then_shorter() {
        let s = |a, b, score| ScoredSpan {
            span: RationaleSpan::new(a, b),
            score,
        };
        let picked = select_top_k(vec![s(4, 5, 0.5), s(0, 2, -0.5), s(2, 3, 0.1)], 3);
        let spans: Vec<_> = picked.iter().map(|p| p.span).collect();
        assert_eq!(
            spans,
            [
                RationaleSpan::new(0, 2),
                RationaleSpan::new(4, 5),
                RationaleSpan::new(2, 3)
            ]
        );
        let picked = select_top_k(vec![s(1, 2, 0.5), s(1, 3, 0.5), s(0, 3, 0.5)], 3);
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].span, RationaleSpan::new(1, 2));
    }

    #[test]
    fn candidate_spans_skip_punctuation() {
        let d = doc("good . bad", Label::Positive, &[]);
        assert_eq!(
            candidate_spans(&d),
            [RationaleSpan::new(0, 1), RationaleSpan::new(2, 3)]
        );
    }

    #[test]
    fn normalisation() {
        let r = SensitivityReport::from_means(0.02, 0.03, 1, 1).unwrap();
        assert_eq!(r.rationale_share, 0.4);
        assert_eq!(r.nonrationale_share, 0.6);
        assert_eq!(r.rationale_milli() + r.nonrationale_milli(), 1000);
        assert!(SensitivityReport::from_means(0.0, 0.0, 1, 1).is_err());
    }

    #[test]
    fn report_on_rationale_only_model() {
        let m = model_with(&[("superb", 2.0), ("dull", -2.0)], 0.0);
        let docs = vec![
            Document::from_text("a", "a superb film today", Label::Positive, &[RationaleSpan::new(1, 2)]).unwrap(),
            Document::from_text("b", "the dull film today", Label::Negative, &[RationaleSpan::new(1, 2)]).unwrap(),
        ];
        let ds = Dataset::new(docs, crate::corpus::SplitTag::Test).unwrap();
        let r = sensitivity_report(&m, &ds, 4, 0.1, 0).unwrap();
        assert_eq!((r.rationale_share, r.nonrationale_share), (1.0, 0.0));

        let none = Dataset::new(
            vec![Document::from_text("c", "x y", Label::Positive, &[]).unwrap()],
            crate::corpus::SplitTag::Test,
        )
        .unwrap();
        assert!(sensitivity_report(&m, &none, 0, 0.1, 0).is_err());
    }
}
