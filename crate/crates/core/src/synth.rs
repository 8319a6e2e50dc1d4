//! Synthetic sentiment corpus with a planted spurious token.
//!
//! Each document is a few sentences of neutral filler with a handful of
//! sentiment words (two or three by default) that alone decide the label. In the training pool,
//! validation and in-distribution test splits a spurious token appears in
//! most positive documents; with `flip_in_ood` the out-of-distribution split
//! moves it to most negative documents instead.

use serde::{Deserialize, Serialize};

use crate::corpus::{tokens_from_surfaces, Dataset, Document, Label, RationaleSpan, SplitTag};
use crate::error::{Error, Result};
use crate::rng::TracedRng;
use crate::synonyms::SynonymLexicon;

const FILLER_GROUPS: &[&[&str]] = &[
    &["movie", "film", "picture", "feature", "flick"],
    &["plot", "story", "storyline", "narrative", "premise"],
    &["actor", "performer", "player", "lead", "star"],
    &["scene", "sequence", "segment", "shot", "moment"],
    &["director", "filmmaker", "helmer", "auteur", "creator"],
    &["watched", "saw", "viewed", "caught", "streamed"],
    &["yesterday", "recently", "lately", "tonight", "today"],
    &["theater", "cinema", "screen", "venue", "multiplex"],
    &["character", "role", "figure", "persona", "protagonist"],
    &["ending", "finale", "conclusion", "climax", "resolution"],
    &["music", "score", "soundtrack", "songs", "melody"],
    &["camera", "lens", "framing", "cinematography", "lighting"],
    &["friend", "buddy", "pal", "companion", "mate"],
    &["city", "town", "village", "place", "suburb"],
    &["night", "evening", "dusk", "twilight", "midnight"],
    &["family", "household", "clan", "kin", "relatives"],
    &["book", "novel", "source", "text", "manuscript"],
    &["studio", "company", "label", "house", "distributor"],
    &["version", "cut", "edition", "release", "print"],
    &["series", "franchise", "saga", "sequel", "trilogy"],
    &["costume", "outfit", "wardrobe", "attire", "garment"],
    &["dialogue", "lines", "script", "writing", "banter"],
    &["budget", "funding", "money", "cost", "finances"],
    &["audience", "crowd", "viewers", "public", "spectators"],
    &["weekend", "holiday", "vacation", "break", "getaway"],
];

/// Words with no synonyms, so they are never replaced.
const FUNCTION_WORDS: &[&str] = &["the", "a", "and", "with", "was", "about", "in", "of", "it", "then"];

const POSITIVE_GROUPS: &[&[&str]] = &[
    &["great", "excellent", "superb"],
    &["enjoyed", "loved", "adored"],
    &["fine", "believable", "convincing"],
];

const NEGATIVE_GROUPS: &[&[&str]] = &[
    &["awful", "terrible", "dreadful"],
    &["boring", "dull", "tedious"],
    &["pathetic", "sad", "lame"],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Training pool size.
    pub n: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub spurious_token: String,
    /// Replacements the lexicon offers for the spurious token.
    pub spurious_synonyms: Vec<String>,
    /// Share of documents of the favoured class carrying the spurious token.
    pub spurious_rate: f64,
    pub flip_in_ood: bool,
    /// Sentiment words per document, inclusive range.
    pub min_sentiment: usize,
    pub max_sentiment: usize,
    pub positive_words: Vec<String>,
    pub negative_words: Vec<String>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let flat = |groups: &[&[&str]]| groups.iter().flat_map(|g| g.iter().map(|w| w.to_string())).collect();
        SynthConfig {
            n: 500,
            n_val: 200,
            n_test: 400,
            spurious_token: "soylent".into(),
            spurious_synonyms: vec!["tarkus".into(), "marlowe".into(), "quatermass".into()],
            spurious_rate: 0.9,
            flip_in_ood: true,
            min_sentiment: 2,
            max_sentiment: 3,
            positive_words: flat(POSITIVE_GROUPS),
            negative_words: flat(NEGATIVE_GROUPS),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train_pool: Dataset,
    pub val: Dataset,
    pub test_in: Dataset,
    pub test_ood: Dataset,
    pub lexicon: SynonymLexicon,
}

fn filler_words() -> Vec<&'static str> {
    FILLER_GROUPS
        .iter()
        .flat_map(|g| g.iter().copied())
        .chain(FUNCTION_WORDS.iter().copied())
        .collect()
}

/// Synonym lexicon covering filler, sentiment words and the spurious token.
/// Sentiment words map to same-polarity words in groups of three.
pub fn synth_lexicon(config: &SynthConfig) -> Result<SynonymLexicon> {
    let mut lex = SynonymLexicon::new();
    for group in FILLER_GROUPS {
        for w in *group {
            let others: Vec<&str> = group.iter().copied().filter(|o| o != w).collect();
            lex.insert(w, &others)?;
        }
    }
    for words in [&config.positive_words, &config.negative_words] {
        for chunk in words.chunks(3) {
            if chunk.len() < 2 {
                continue;
            }
            for w in chunk {
                let others: Vec<&str> = chunk.iter().map(String::as_str).filter(|o| o != w).collect();
                lex.insert(w, &others)?;
            }
        }
    }
    if !config.spurious_synonyms.is_empty() {
        lex.insert(&config.spurious_token, &config.spurious_synonyms)?;
    }
    Ok(lex)
}

#[derive(Clone, Copy)]
enum Spurious {
    /// Carried by `rate` of positive documents.
    Positive(f64),
    Negative(f64),
}

fn make_doc(
    id: String,
    positive: bool,
    spurious: bool,
    config: &SynthConfig,
    filler: &[&str],
    rng: &mut TracedRng,
) -> Result<Document> {
    let words = if positive {
        &config.positive_words
    } else {
        &config.negative_words
    };
    let n_sentences = 2 + rng.index(2);
    let mut sentences: Vec<Vec<(String, bool)>> = (0..n_sentences)
        .map(|_| {
            let len = 4 + rng.index(4);
            (0..len)
                .map(|_| (filler[rng.index(filler.len())].to_string(), false))
                .collect()
        })
        .collect();
    let n_sentiment = config.min_sentiment + rng.index(config.max_sentiment - config.min_sentiment + 1);
    for _ in 0..n_sentiment {
        let s = rng.index(sentences.len());
        let at = rng.index(sentences[s].len() + 1);
        sentences[s].insert(at, (words[rng.index(words.len())].clone(), true));
    }
    if spurious {
        let s = rng.index(sentences.len());
        let at = rng.index(sentences[s].len() + 1);
        sentences[s].insert(at, (config.spurious_token.clone(), false));
    }
    let mut surfaces = Vec::new();
    let mut spans = Vec::new();
    for sentence in sentences {
        for (w, gold) in sentence {
            if gold {
                spans.push(RationaleSpan::new(surfaces.len(), surfaces.len() + 1));
            }
            surfaces.push(w);
        }
        surfaces.push(".".to_string());
    }
    let label = Label::from_positive(positive);
    Document::new(id, tokens_from_surfaces(&surfaces), label, &spans)
}

fn make_split(
    prefix: &str,
    n: usize,
    split: SplitTag,
    spurious: Spurious,
    config: &SynthConfig,
    filler: &[&str],
) -> Result<Dataset> {
    let mut rng = TracedRng::derived(config.seed, &[b"synth", prefix.as_bytes()]);
    let mut docs = Vec::with_capacity(n);
    // exact 50:50 with labels interleaved, then shuffled
    let mut plan: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    rng.shuffle(&mut plan);
    let (n_pos, n_neg) = (
        plan.iter().filter(|p| **p).count(),
        plan.iter().filter(|p| !**p).count(),
    );
    let quota = |count: usize, rate: f64| (rate * count as f64).round() as usize;
    // which documents of the favoured class carry the token
    let (favoured_pos, carriers) = match spurious {
        Spurious::Positive(r) => (true, quota(n_pos, r)),
        Spurious::Negative(r) => (false, quota(n_neg, r)),
    };
    let favoured_total = if favoured_pos { n_pos } else { n_neg };
    let mut carry: Vec<bool> = (0..favoured_total).map(|i| i < carriers).collect();
    rng.shuffle(&mut carry);
    let mut carry = carry.into_iter();
    for (i, positive) in plan.into_iter().enumerate() {
        let spurious = if positive == favoured_pos {
            carry.next().unwrap_or(false)
        } else {
            false
        };
        docs.push(make_doc(
            format!("{prefix}-{i:05}"),
            positive,
            spurious,
            config,
            filler,
            &mut rng,
        )?);
    }
    Dataset::new(docs, split)
}

pub fn synth_spurious_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    if config.positive_words.is_empty() || config.negative_words.is_empty() {
        return Err(Error::Validation(
            "sentiment lexicon needs positive and negative words".into(),
        ));
    }
    if config.min_sentiment == 0 || config.max_sentiment < config.min_sentiment {
        return Err(Error::Validation("need 1 <= min_sentiment <= max_sentiment".into()));
    }
    if !(0.0..=1.0).contains(&config.spurious_rate) {
        return Err(Error::Validation("spurious_rate must be in [0, 1]".into()));
    }
    let filler = filler_words();
    let in_dist = Spurious::Positive(config.spurious_rate);
    let ood = if config.flip_in_ood {
        Spurious::Negative(config.spurious_rate)
    } else {
        in_dist
    };
    Ok(SynthCorpus {
        train_pool: make_split("pool", config.n, SplitTag::Train, in_dist, config, &filler)?,
        val: make_split("val", config.n_val, SplitTag::Validation, in_dist, config, &filler)?,
        test_in: make_split("test", config.n_test, SplitTag::Test, in_dist, config, &filler)?,
        test_ood: make_split(
            "ood",
            config.n_test,
            SplitTag::Ood("flipped".into()),
            ood,
            config,
            &filler,
        )?,
        lexicon: synth_lexicon(config)?,
    })
}
