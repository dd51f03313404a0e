//! Word-level vocabulary and whitespace tokenizer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
/// Content-free input marker. Its surface is the literal `N/A` so that the
/// default NULL input tokenizes to this single reserved id.
pub const NULL_MARKER: &str = "N/A";
/// Separator between demonstration elements. A `\n` in text tokenizes here.
pub const NEWLINE: &str = "<nl>";
pub const UNK: &str = "<unk>";

pub const DEFAULT_RESERVED: [&str; 5] = [PAD, BOS, NULL_MARKER, NEWLINE, UNK];

/// Sequence of vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    pub fn extend_from(&mut self, other: &TokenSeq) {
        self.0.extend_from_slice(&other.0);
    }

    pub fn concat(parts: &[&TokenSeq]) -> TokenSeq {
        TokenSeq(parts.iter().flat_map(|p| p.0.iter().copied()).collect())
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSeq(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    frequency: Vec<u64>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

/// Splits text into word surfaces. Newlines become separator tokens; any
/// other whitespace run is a boundary.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        if i > 0 {
            out.push(NEWLINE);
        }
        out.extend(line.split_whitespace());
    }
    out
}

/// Builds a vocabulary from a corpus. Reserved tokens come first in the given
/// order, then corpus words in order of first appearance.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], reserved: &[&str]) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }
    for required in [PAD, BOS, NULL_MARKER] {
        if !reserved.contains(&required) {
            return Err(Error::Config(format!("reserved tokens must include {required:?}")));
        }
    }
    let mut tokens: Vec<String> = Vec::new();
    let mut index: HashMap<String, TokenId> = HashMap::new();
    for r in reserved {
        if index.contains_key(*r) {
            return Err(Error::Config(format!("duplicate reserved token {r:?}")));
        }
        index.insert((*r).to_string(), tokens.len() as TokenId);
        tokens.push((*r).to_string());
    }
    let mut frequency = vec![0u64; tokens.len()];
    for doc in corpus {
        for w in split_words(doc.as_ref()) {
            let id = match index.get(w) {
                Some(&id) => id,
                None => {
                    let id = tokens.len() as TokenId;
                    index.insert(w.to_string(), id);
                    tokens.push(w.to_string());
                    frequency.push(0);
                    id
                }
            };
            frequency[id as usize] += 1;
        }
    }
    Ok(Vocab {
        tokens,
        frequency,
        index,
    })
}

impl Vocab {
    /// Vocabulary over `corpus` with [`DEFAULT_RESERVED`].
    pub fn from_corpus<S: AsRef<str>>(corpus: &[S]) -> Result<Vocab> {
        build_vocab(corpus, &DEFAULT_RESERVED)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn frequency(&self, id: TokenId) -> u64 {
        self.frequency[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn bos(&self) -> TokenId {
        self.id(BOS).expect("vocabulary always has BOS")
    }

    pub fn null_marker(&self) -> TokenId {
        self.id(NULL_MARKER).expect("vocabulary always has NULL marker")
    }

    pub fn newline(&self) -> Option<TokenId> {
        self.id(NEWLINE)
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        let s = self.surface(id);
        DEFAULT_RESERVED.contains(&s)
    }

    /// Ids sorted by descending corpus frequency, ties broken by id.
    pub fn by_frequency(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.tokens.len() as TokenId).collect();
        ids.sort_by(|&a, &b| {
            self.frequency[b as usize]
                .cmp(&self.frequency[a as usize])
                .then(a.cmp(&b))
        });
        ids
    }

    /// Top `n` non-reserved ids by frequency.
    pub fn top_content(&self, n: usize) -> Vec<TokenId> {
        self.by_frequency()
            .into_iter()
            .filter(|&id| !self.is_reserved(id))
            .take(n)
            .collect()
    }

    pub fn content_count(&self) -> usize {
        (0..self.tokens.len() as TokenId)
            .filter(|&id| !self.is_reserved(id))
            .count()
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let unk = self.id(UNK);
        split_words(text)
            .into_iter()
            .map(|w| match (self.id(w), unk) {
                (Some(id), _) => Ok(id),
                (None, Some(u)) => Ok(u),
                (None, None) => Err(Error::UnknownToken(w.to_string())),
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSeq)
    }

    pub fn detokenize(&self, seq: &TokenSeq) -> String {
        let mut out = String::new();
        for (i, &id) in seq.0.iter().enumerate() {
            let s = self.surface(id);
            if s == NEWLINE {
                out.push('\n');
                continue;
            }
            if i > 0 && !out.ends_with('\n') {
                out.push(' ');
            }
            out.push_str(s);
        }
        out
    }

    /// Rebuilds the lookup table after deserialization.
    pub(crate) fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }

    pub(crate) fn from_parts(tokens: Vec<String>, frequency: Vec<u64>) -> Result<Vocab> {
        if tokens.len() != frequency.len() {
            return Err(Error::Checkpoint("vocab token/frequency length mismatch".into()));
        }
        let mut v = Vocab {
            tokens,
            frequency,
            index: HashMap::new(),
        };
        v.reindex();
        if v.index.len() != v.tokens.len() {
            return Err(Error::Checkpoint("duplicate vocabulary surfaces".into()));
        }
        Ok(v)
    }

    pub(crate) fn frequencies(&self) -> &[u64] {
        &self.frequency
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_small_corpus() {
        let v = build_vocab(&["a b", "b"], &[PAD, BOS, NULL_MARKER]).unwrap();
        assert_eq!(v.tokens(), &[PAD, BOS, NULL_MARKER, "a", "b"]);
        assert_eq!(v.frequency(v.id("b").unwrap()), 2);
        assert_eq!(v.frequency(v.id("a").unwrap()), 1);
    }

    #[test]
    fn duplicated_corpus_doubles_frequencies() {
        let once = build_vocab(&["x y z", "y"], &DEFAULT_RESERVED).unwrap();
        let twice = build_vocab(&["x y z", "y", "x y z", "y"], &DEFAULT_RESERVED).unwrap();
        assert_eq!(once.tokens(), twice.tokens());
        for id in 0..once.len() as TokenId {
            assert_eq!(2 * once.frequency(id), twice.frequency(id));
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(build_vocab(&empty, &DEFAULT_RESERVED), Err(Error::Config(_))));
    }

    #[test]
    fn missing_reserved_rejected() {
        assert!(build_vocab(&["a"], &[PAD, BOS]).is_err());
    }

    #[test]
    fn frequency_ties_break_by_index() {
        let v = build_vocab(&["c a b a b c"], &[PAD, BOS, NULL_MARKER]).unwrap();
        let order: Vec<&str> = v.by_frequency().iter().map(|&i| v.surface(i)).collect();
        assert_eq!(&order[..3], &["c", "a", "b"]);
    }

    #[test]
    fn newline_and_unknown_handling() {
        let v = Vocab::from_corpus(&["it was great"]).unwrap();
        let seq = v.tokenize("it was\ngreat zzz").unwrap();
        let surfaces: Vec<&str> = seq.ids().iter().map(|&i| v.surface(i)).collect();
        assert_eq!(surfaces, ["it", "was", NEWLINE, "great", UNK]);
        assert_eq!(v.detokenize(&seq), "it was\ngreat <unk>");
        assert_eq!(v.tokenize("N/A").unwrap().ids(), &[v.null_marker()]);
    }

    #[test]
    fn detokenize_round_trips_up_to_whitespace() {
        let v = Vocab::from_corpus(&["the  film\twas  fine"]).unwrap();
        let seq = v.tokenize(" the film   was\tfine ").unwrap();
        let text = v.detokenize(&seq);
        assert_eq!(text, "the film was fine");
        assert_eq!(v.tokenize(&text).unwrap(), seq);
    }
}
