use proptest::prelude::*;

use rationale_core::active::uncertainty_sample;
use rationale_core::augment::{generate_static, replacement_count};
use rationale_core::corpus::{
    join_tokens, read_corpus, tokenize, tokens_from_surfaces, write_corpus, Dataset, Document, Label, LoadOptions,
    RationaleSpan, SplitTag,
};
use rationale_core::model::logistic;
use rationale_core::{ClassifierModel, LinearTextModel, ModelConfig, SynonymLexicon, SynonymProvider};

const VOCAB: &[&str] = &[
    "plot", "movie", "great", "awful", "the", "scene", "Movie", "actor", "ending",
];

fn lexicon() -> SynonymLexicon {
    let mut lex = SynonymLexicon::new();
    lex.insert("plot", &["story", "storyline"]).unwrap();
    lex.insert("movie", &["film", "Movie", "picture"]).unwrap();
    lex.insert("scene", &["sequence"]).unwrap();
    lex.insert("actor", &["performer", "lead"]).unwrap();
    lex.insert("ending", &["finale"]).unwrap();
    lex.insert("the", &["a"]).unwrap();
    lex
}

/// A document over VOCAB plus punctuation with random non-overlapping spans.
fn arb_doc() -> impl Strategy<Value = Document> {
    (
        prop::collection::vec(
            prop::sample::select(VOCAB.iter().chain(&[".", ","]).copied().collect::<Vec<_>>()),
            2..30,
        ),
        any::<bool>(),
        prop::collection::vec((0usize..30, 1usize..=3), 0..4),
    )
        .prop_map(|(words, positive, raw_spans)| {
            let n = words.len();
            let mut spans: Vec<RationaleSpan> = Vec::new();
            for (start, len) in raw_spans {
                let start = start % n;
                let end = (start + len).min(n);
                let span = RationaleSpan::new(start, end);
                if spans.iter().all(|s| !s.overlaps(&span)) {
                    spans.push(span);
                }
            }
            Document::new(
                "d",
                tokens_from_surfaces(&words),
                Label::from_positive(positive),
                &spans,
            )
            .unwrap()
        })
}

proptest! {
    #[test]
    fn tokenize_is_idempotent(text in "[a-zA-Z.,!?'\" ]{0,60}") {
        let once = tokenize(&text);
        let twice = tokenize(&join_tokens(&once));
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn corpus_round_trips(doc in arb_doc()) {
        let ds = Dataset::new(vec![doc], SplitTag::Train).unwrap();
        let mut buf = Vec::new();
        write_corpus(&ds, &mut buf).unwrap();
        let back = read_corpus(&buf[..], std::path::Path::new("mem"), SplitTag::Train, LoadOptions::default()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn static_variants_keep_rationales(doc in arb_doc(), seed in any::<u64>(), n in 1usize..5) {
        let lex = lexicon();
        let mask = doc.mask();
        match generate_static(&doc, &lex, n, 0.05, seed) {
            Ok(batch) => {
                for v in &batch.variants {
                    prop_assert_eq!(v.tokens.len(), doc.len());
                    prop_assert_eq!(&v.rationales, &doc.rationales().to_vec());
                    for (j, keep) in mask.iter().enumerate() {
                        if *keep {
                            prop_assert_eq!(&v.tokens[j].surface, &doc.tokens[j].surface);
                        }
                    }
                    for r in &v.replacements {
                        prop_assert!(!mask[r.position]);
                        prop_assert_ne!(r.old.to_lowercase(), r.new.to_lowercase());
                    }
                }
            }
            Err(e) => {
                let expected = matches!(e, rationale_core::Error::NoEligibleTokens { .. });
                prop_assert!(expected, "unexpected error: {}", e);
            }
        }
    }

    #[test]
    fn candidates_never_echo_the_surface(word in prop::sample::select(VOCAB.to_vec())) {
        let lex = lexicon();
        let doc = Document::from_text("d", word, Label::Positive, &[]).unwrap();
        for c in lex.candidates(word, &doc, 0).unwrap() {
            prop_assert_ne!(c.to_lowercase(), word.to_lowercase());
        }
    }

    #[test]
    fn probability_is_monotone_in_token_weight(
        doc in arb_doc(),
        w in -5.0f64..5.0,
        bump in 0.0f64..5.0,
        bias in -2.0f64..2.0,
    ) {
        let config = ModelConfig { dims_log2: 12, ..ModelConfig::default() };
        let mut m = LinearTextModel::zeros(config);
        m.bias = bias;
        let target = doc.tokens[0].surface.clone();
        m.set_token_weight(&target, w);
        let before = m.predict_proba(&doc);
        m.set_token_weight(&target, w + bump);
        prop_assert!(m.predict_proba(&doc) >= before);
    }

    #[test]
    fn logistic_is_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(logistic(lo) <= logistic(hi));
        prop_assert!((0.0..=1.0).contains(&logistic(a)));
    }

    #[test]
    fn replacement_count_matches_integer_formula(e in 0usize..10_000) {
        prop_assert_eq!(replacement_count(0.05, e), e.div_ceil(20).max(1));
    }
}

/// Small random pools, every k: the sampled set reaches the smallest margin
/// sum any k-subset can have, and in balanced mode each picked id beats every
/// left-out id of its class.
#[test]
fn uncertainty_sampling_is_exhaustively_optimal() {
    let words = ["good", "bad", "fine", "meh", "okay", "grim"];
    let mut model = LinearTextModel::zeros(ModelConfig {
        dims_log2: 10,
        ..ModelConfig::default()
    });
    for (i, w) in words.iter().enumerate() {
        model.set_token_weight(w, (i as f64 - 2.5) * 0.7);
    }
    let mut rng_state = 7u64;
    let mut next = || {
        rng_state = rng_state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (rng_state >> 33) as usize
    };
    for trial in 0..200 {
        let n = 4 + trial % 5;
        let docs: Vec<Document> = (0..n)
            .map(|i| {
                let len = 1 + next() % 3;
                let text: Vec<&str> = (0..len).map(|_| words[next() % words.len()]).collect();
                Document::from_text(format!("d{i}"), &text.join(" "), Label::from_positive(i % 2 == 0), &[]).unwrap()
            })
            .collect();
        let pool = Dataset::new(docs, SplitTag::Train).unwrap();
        let margin = |id: &str| (model.predict_proba(pool.get(id).unwrap()) - 0.5).abs();
        for k in 1..=n {
            let picked = uncertainty_sample(&model, &pool, k, false).unwrap();
            let best: f64 = {
                let mut all: Vec<f64> = pool.documents.iter().map(|d| margin(&d.id)).collect();
                all.sort_by(f64::total_cmp);
                all[..k].iter().sum()
            };
            let got: f64 = picked.iter().map(|id| margin(id)).sum();
            assert!((got - best).abs() < 1e-12, "trial {trial} k {k}");

            if k % 2 == 0 && k / 2 <= n / 2 {
                let picked = uncertainty_sample(&model, &pool, k, true).unwrap();
                let pos = picked
                    .iter()
                    .filter(|id| pool.get(id).unwrap().label.is_positive())
                    .count();
                assert_eq!(pos, k / 2);
                for d in &pool.documents {
                    if picked.contains(&d.id) {
                        continue;
                    }
                    for id in picked.iter().filter(|id| pool.get(id).unwrap().label == d.label) {
                        let (a, b) = (margin(id), margin(&d.id));
                        assert!(a < b || (a == b && id.as_str() < d.id.as_str()));
                    }
                }
            }
        }
    }
}
