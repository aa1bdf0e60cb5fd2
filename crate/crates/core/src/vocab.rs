//! Toy whitespace tokenizer and frequency-ordered vocabulary.
//!
//! Stands in for SentencePiece at desk scale. Ids are dense: the three
//! reserved specials come first (PAD, EOS, UNK), then the sentinel block,
//! then text tokens in descending corpus frequency (ties broken
//! lexicographically) — so the "most common" tokens occupy the lowest
//! non-special id band, which is what prompt initialization samples from.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const NUM_RESERVED: usize = 3;

/// An ordered list of documents, each a sequence of whitespace tokens.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub documents: Vec<Vec<String>>,
}

impl Corpus {
    /// Parses one document per line; blank lines are dropped.
    pub fn from_text(text: &str) -> Self {
        let documents = text
            .lines()
            .map(tokenize)
            .filter(|d| !d.is_empty())
            .collect();
        Self { documents }
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

/// Whitespace splitting on pre-normalized text.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    frequencies: Vec<u64>,
    lookup: HashMap<String, u32>,
    num_sentinels: usize,
}

impl Vocabulary {
    /// Builds a frequency-ordered vocabulary capped at `max_size`, reserving
    /// PAD/EOS/UNK and a block of `num_sentinels` sentinel ids.
    pub fn build(corpus: &Corpus, max_size: usize, num_sentinels: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Corpus("corpus has no documents".into()));
        }
        if max_size <= num_sentinels + NUM_RESERVED {
            return Err(Error::Config(format!(
                "max_size {max_size} leaves no room for text tokens \
                 ({num_sentinels} sentinels + {NUM_RESERVED} specials)"
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for doc in &corpus.documents {
            for tok in doc {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - num_sentinels - NUM_RESERVED);

        let mut tokens = vec!["<pad>".to_owned(), "</s>".to_owned(), "<unk>".to_owned()];
        let mut frequencies = vec![0u64; NUM_RESERVED];
        for i in 0..num_sentinels {
            tokens.push(sentinel_display(i));
            frequencies.push(0);
        }
        for (tok, freq) in ranked {
            tokens.push(tok.to_owned());
            frequencies.push(freq);
        }
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self {
            tokens,
            frequencies,
            lookup,
            num_sentinels,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_sentinels(&self) -> usize {
        self.num_sentinels
    }

    pub fn sentinel_id(&self, index: usize) -> Result<u32> {
        if index >= self.num_sentinels {
            return Err(Error::Vocabulary(format!(
                "sentinel {index} requested but only {} allocated",
                self.num_sentinels
            )));
        }
        Ok((NUM_RESERVED + index) as u32)
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        (id as usize) >= NUM_RESERVED && (id as usize) < NUM_RESERVED + self.num_sentinels
    }

    /// First id of the frequency-ordered text band.
    pub fn first_text_id(&self) -> u32 {
        (NUM_RESERVED + self.num_sentinels) as u32
    }

    /// PAD, EOS, UNK and all sentinels.
    pub fn special_ids(&self) -> Vec<u32> {
        (0..self.first_text_id()).collect()
    }

    /// The `k` most common text ids (the whole band if it is smaller).
    pub fn common_band(&self, k: usize) -> Vec<u32> {
        let first = self.first_text_id();
        let avail = self.len() as u32 - first;
        (first..first + avail.min(k as u32)).collect()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| {
                Error::Vocabulary(format!("id {id} out of range for vocabulary of size {}", self.len()))
            })
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn frequency(&self, id: u32) -> u64 {
        self.frequencies[id as usize]
    }

    /// In-vocab tokens map to their ids, everything else to UNK.
    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.lookup.get(t.as_str()).copied().unwrap_or(UNK_ID))
            .collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        self.encode(&tokenize(text))
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter().map(|&id| self.token(id).map(str::to_owned)).collect()
    }

    pub fn decode_text(&self, ids: &[u32]) -> Result<String> {
        Ok(self.decode(ids)?.join(" "))
    }

    /// `token<TAB>id<TAB>frequency`, one line per id, in id order.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{tok}\t{id}\t{}", self.frequencies[id]);
        }
        out
    }

    pub fn import(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut frequencies = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split('\t');
            let (Some(tok), Some(id), Some(freq)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::Vocabulary(format!(
                    "vocabulary line {} is not token<TAB>id<TAB>frequency",
                    lineno + 1
                )));
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::Vocabulary(format!("bad id on line {}", lineno + 1)))?;
            if id != tokens.len() {
                return Err(Error::Vocabulary(format!(
                    "ids must be dense and in order (line {})",
                    lineno + 1
                )));
            }
            let freq: u64 = freq
                .parse()
                .map_err(|_| Error::Vocabulary(format!("bad frequency on line {}", lineno + 1)))?;
            tokens.push(tok.to_owned());
            frequencies.push(freq);
        }
        if tokens.len() < NUM_RESERVED {
            return Err(Error::Vocabulary("vocabulary missing reserved tokens".into()));
        }
        let num_sentinels = tokens
            .iter()
            .skip(NUM_RESERVED)
            .take_while(|t| t.starts_with('\u{27e8}'))
            .count();
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self {
            tokens,
            frequencies,
            lookup,
            num_sentinels,
        })
    }
}

/// Display form of sentinel `index`: ⟨X⟩, ⟨Y⟩, ⟨Z⟩, then wrapping on through
/// the alphabet (⟨A⟩, ⟨B⟩, …) for indices past two.
pub fn sentinel_display(index: usize) -> String {
    if index < 26 {
        let letter = (b'A' + ((index + 23) % 26) as u8) as char;
        format!("\u{27e8}{letter}\u{27e9}")
    } else {
        format!("\u{27e8}X{index}\u{27e9}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vocab() -> Vocabulary {
        let corpus = Corpus::from_text("a a b\nc a b\n");
        Vocabulary::build(&corpus, 32, 3).unwrap()
    }

    #[test]
    fn frequency_ordering_places_common_tokens_first() {
        let v = small_vocab();
        assert!(v.id("a").unwrap() < v.id("b").unwrap());
        assert!(v.id("b").unwrap() < v.id("c").unwrap());
    }

    #[test]
    fn ties_break_lexicographically() {
        let corpus = Corpus::from_text("b a\n");
        let v = Vocabulary::build(&corpus, 32, 2).unwrap();
        assert!(v.id("a").unwrap() < v.id("b").unwrap());
    }

    #[test]
    fn sentinels_are_disjoint_from_text_ids() {
        let v = small_vocab();
        assert_eq!(v.num_sentinels(), 3);
        for i in 0..3 {
            let sid = v.sentinel_id(i).unwrap();
            assert!(v.is_sentinel(sid));
            assert!(sid < v.first_text_id());
        }
        for tok in ["a", "b", "c"] {
            assert!(!v.is_sentinel(v.id(tok).unwrap()));
        }
    }

    #[test]
    fn sentinel_zero_renders_as_angle_x() {
        assert_eq!(sentinel_display(0), "\u{27e8}X\u{27e9}");
        assert_eq!(sentinel_display(1), "\u{27e8}Y\u{27e9}");
        assert_eq!(sentinel_display(2), "\u{27e8}Z\u{27e9}");
        assert_eq!(sentinel_display(3), "\u{27e8}A\u{27e9}");
    }

    #[test]
    fn encode_roundtrips_known_text() {
        let v = small_vocab();
        let doc = tokenize("a b c a");
        let ids = v.encode(&doc);
        assert_eq!(v.decode(&ids).unwrap(), doc);
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let v = small_vocab();
        assert_eq!(v.encode(&tokenize("zebra")), vec![UNK_ID]);
        assert_eq!(v.encode(&[]), Vec::<u32>::new());
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let v = small_vocab();
        assert!(v.decode(&[v.len() as u32]).is_err());
    }

    #[test]
    fn mixed_text_and_sentinels_interleave() {
        let v = small_vocab();
        let ids = vec![
            v.id("a").unwrap(),
            v.sentinel_id(0).unwrap(),
            v.id("b").unwrap(),
            v.sentinel_id(1).unwrap(),
            v.id("c").unwrap(),
        ];
        assert_eq!(
            v.decode_text(&ids).unwrap(),
            "a \u{27e8}X\u{27e9} b \u{27e8}Y\u{27e9} c"
        );
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let corpus = Corpus::from_text("");
        assert!(matches!(
            Vocabulary::build(&corpus, 32, 3),
            Err(Error::Corpus(_))
        ));
    }

    #[test]
    fn export_import_roundtrip() {
        let v = small_vocab();
        let v2 = Vocabulary::import(&v.export()).unwrap();
        assert_eq!(v2.len(), v.len());
        assert_eq!(v2.num_sentinels(), v.num_sentinels());
        for tok in ["a", "b", "c"] {
            assert_eq!(v2.id(tok), v.id(tok));
        }
        assert_eq!(v2.frequency(v2.id("a").unwrap()), 3);
    }

    #[test]
    fn common_band_is_top_of_text_range() {
        let v = small_vocab();
        let band = v.common_band(2);
        assert_eq!(band, vec![v.id("a").unwrap(), v.id("b").unwrap()]);
        // stable across rebuilds of the same corpus
        let v2 = small_vocab();
        assert_eq!(v2.common_band(2), band);
    }
}
