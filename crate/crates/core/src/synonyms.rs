//! Synonym sources for replacement-based generation.
//!
//! Providers only rank candidates; the caller picks among them with its own
//! RNG stream.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_punct, Document};
use crate::error::{Error, Result};

pub trait SynonymProvider: Send + Sync {
    /// Same inputs give the same list.
    fn is_deterministic(&self) -> bool;

    /// Raw candidates for the token at `position` of `context`.
    fn lookup(&self, surface: &str, context: &Document, position: usize) -> Result<Vec<String>>;

    /// Candidates with the original surface removed (case-insensitive).
    fn candidates(&self, surface: &str, context: &Document, position: usize) -> Result<Vec<String>> {
        let mut found = self.lookup(surface, context, position)?;
        let folded = surface.to_lowercase();
        found.retain(|c| c.to_lowercase() != folded);
        Ok(found)
    }
}

impl<P: SynonymProvider + ?Sized> SynonymProvider for &P {
    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }

    fn lookup(&self, surface: &str, context: &Document, position: usize) -> Result<Vec<String>> {
        (**self).lookup(surface, context, position)
    }
}

/// Head word (lowercased) to ordered, distinct synonyms.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl SynonymLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add synonyms for `head`, merging with existing ones. Self-synonyms and
    /// repeats are dropped; an entry that ends up empty is rejected.
    pub fn insert<S: AsRef<str>>(&mut self, head: &str, synonyms: &[S]) -> Result<()> {
        let key = head.trim().to_lowercase();
        if key.is_empty() {
            return Err(Error::Validation("empty head word".into()));
        }
        let mut list = self.entries.get(&key).cloned().unwrap_or_default();
        for syn in synonyms {
            let syn = syn.as_ref().trim();
            if syn.is_empty() || syn.to_lowercase() == key || list.iter().any(|s| s == syn) {
                continue;
            }
            if !is_single_token(syn) {
                return Err(Error::Validation(format!(
                    "synonym {syn:?} for {key:?} is not a single token"
                )));
            }
            list.push(syn.to_string());
        }
        if list.is_empty() {
            return Err(Error::Validation(format!("no synonyms left for {key:?}")));
        }
        self.entries.insert(key, list);
        Ok(())
    }

    pub fn get(&self, surface: &str) -> Option<&[String]> {
        self.entries.get(&surface.to_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn parse(source: &str, path: &Path) -> Result<Self> {
        let mut lexicon = SynonymLexicon::new();
        for (i, raw) in source.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (head, cell) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected head<TAB>synonyms".into()))?;
            let synonyms: Vec<&str> = cell.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if synonyms.is_empty() {
                return Err(parse_err(format!("empty synonym cell for {head:?}")));
            }
            lexicon.insert(head, &synonyms).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(lexicon)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (head, syns) in &self.entries {
            out.push_str(head);
            out.push('\t');
            out.push_str(&syns.join(","));
            out.push('\n');
        }
        out
    }
}

fn is_single_token(s: &str) -> bool {
    let toks = crate::corpus::tokenize(s);
    toks.len() == 1 && toks[0].surface == s && !is_punct(s)
}

pub fn load_lexicon(path: impl AsRef<Path>) -> Result<SynonymLexicon> {
    let path = path.as_ref();
    let source = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SynonymLexicon::parse(&source, path)
}

impl SynonymProvider for SynonymLexicon {
    fn is_deterministic(&self) -> bool {
        true
    }

    fn lookup(&self, surface: &str, _context: &Document, _position: usize) -> Result<Vec<String>> {
        Ok(self.get(surface).map(<[String]>::to_vec).unwrap_or_default())
    }
}

#[derive(Serialize)]
struct SynonymRequest<'a> {
    token: &'a str,
    context: String,
    position: usize,
}

#[derive(Deserialize)]
struct SynonymResponse {
    candidates: Vec<String>,
}

/// Client for an external synonym service (for example a mask-filling model)
/// answering `POST /synonyms`.
#[derive(Debug)]
pub struct HttpSynonymProvider {
    url: String,
    agent: ureq::Agent,
    deterministic: bool,
}

impl HttpSynonymProvider {
    /// `base_url` is the service root; requests go to `{base_url}/synonyms`.
    pub fn new(base_url: &str, deterministic: bool) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        HttpSynonymProvider {
            url: format!("{}/synonyms", base_url.trim_end_matches('/')),
            agent,
            deterministic,
        }
    }
}

impl SynonymProvider for HttpSynonymProvider {
    fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    fn lookup(&self, surface: &str, context: &Document, position: usize) -> Result<Vec<String>> {
        let body = SynonymRequest {
            token: surface,
            context: context.text(),
            position,
        };
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .map_err(|e| Error::Provider {
                message: e.to_string(),
                retryable: true,
            })?;
        let status = response.status().as_u16();
        if status != 200 {
            return Err(Error::Provider {
                message: format!("{} returned HTTP {status}", self.url),
                retryable: status >= 500 || status == 429,
            });
        }
        let parsed: SynonymResponse = response.body_mut().read_json().map_err(|e| Error::Provider {
            message: format!("bad response body: {e}"),
            retryable: false,
        })?;
        Ok(parsed.candidates)
    }
}
