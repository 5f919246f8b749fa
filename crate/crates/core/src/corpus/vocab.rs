//! Word vocabulary and caption encoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::embeddings::PretrainedTables;
use super::record::CorpusRecord;

/// Index of the padding symbol.
pub const PAD: usize = 0;
/// Index of the unknown-word symbol.
pub const UNK: usize = 1;
/// Caption length fed to the language branch at full scale.
pub const MAX_CAPTION_LEN: usize = 1000;

const RESERVED: [&str; 2] = ["<pad>", "<unk>"];

/// Word → index map with two reserved entries (padding, unknown) followed
/// by words in descending frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary over every record's tokens. Words occurring fewer
    /// than `min_count` times are left out; `max_size` caps the number of
    /// regular (non-reserved) words.
    pub fn build(records: &[CorpusRecord], max_size: Option<usize>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in records {
            for t in &r.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size.unwrap_or(usize::MAX));
        Self::from_words(ranked.into_iter().map(|(w, _)| w.to_string()).collect())
    }

    /// Vocabulary whose regular words take indices 2, 3, … in the given order.
    pub fn from_words(words: Vec<String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let index = all.iter().enumerate().skip(RESERVED.len()).map(|(i, w)| (w.clone(), i)).collect();
        Self { words: all, index }
    }

    /// Size including the reserved entries.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() == RESERVED.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Words of an id row up to the first padding entry.
    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .take_while(|&&i| i != PAD)
            .map(|&i| self.word(i).unwrap_or(RESERVED[UNK]))
            .collect()
    }
}

impl From<Vec<String>> for Vocab {
    fn from(mut words: Vec<String>) -> Self {
        let regular = if words.len() >= RESERVED.len() { words.split_off(RESERVED.len()) } else { Vec::new() };
        Self::from_words(regular)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

/// Id rows of one caption, each of length `max_len`. Pretrained rows index
/// the matching table's [`to_matrix`](super::EmbeddingTable::to_matrix), with
/// 0 marking an absent entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedCaption {
    pub tokens: Vec<usize>,
    pub words: Option<Vec<usize>>,
    pub lemmas: Option<Vec<usize>>,
    pub concepts: Option<Vec<usize>>,
    /// Number of real (non-padding) positions.
    pub length: usize,
}

/// Truncates to `max_len` tokens and right-pads with [`PAD`]. A row is
/// produced for every registered pretrained table; a token with several
/// concepts uses the first one.
pub fn encode_caption(
    record: &CorpusRecord,
    vocab: &Vocab,
    tables: &PretrainedTables,
    max_len: usize,
) -> EncodedCaption {
    let length = record.tokens.len().min(max_len);
    let row = |f: &dyn Fn(usize) -> usize| {
        let mut ids: Vec<usize> = (0..length).map(f).collect();
        ids.resize(max_len, PAD);
        ids
    };
    let tokens = row(&|i| vocab.id(&record.tokens[i]));
    let words = tables.word.as_ref().map(|t| row(&|i| t.row_id(&record.tokens[i])));
    let lemmas = tables.lemma.as_ref().map(|t| {
        row(&|i| record.lemmas.as_ref().map_or(0, |l| t.row_id(&l[i])))
    });
    let concepts = tables.concept.as_ref().map(|t| {
        row(&|i| {
            record
                .concepts
                .as_ref()
                .and_then(|c| c[i].first())
                .map_or(0, |c| t.row_id(c))
        })
    });
    EncodedCaption {
        tokens,
        words,
        lemmas,
        concepts,
        length,
    }
}

#[cfg(test)]
mod tests {
    use super::super::embeddings::{EmbeddingTable, TableKind};
    use super::*;

    fn record(text: &str) -> CorpusRecord {
        CorpusRecord {
            id: text.into(),
            image_path: "x.png".into(),
            tokens: text.split(' ').map(String::from).collect(),
            lemmas: None,
            concepts: None,
            label: None,
            visual_feature: None,
        }
    }

    #[test]
    fn frequency_order() {
        let v = Vocab::build(&[record("a a b")], None, 1);
        assert_eq!((v.id("a"), v.id("b")), (2, 3));
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn min_count_maps_rare_words_to_unknown() {
        let v = Vocab::build(&[record("a a b")], None, 2);
        assert_eq!((v.id("a"), v.id("b")), (2, UNK));
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocab::build(&[record("y x")], None, 1);
        assert_eq!((v.id("x"), v.id("y")), (2, 3));
    }

    #[test]
    fn max_size_caps_regular_words() {
        let v = Vocab::build(&[record("a a b c")], Some(1), 1);
        assert_eq!((v.id("a"), v.id("b"), v.len()), (2, UNK, 3));
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::build(&[record("q r r s")], None, 1);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }

    #[test]
    fn short_caption_is_right_padded() {
        let r = record("a b c");
        let v = Vocab::build(std::slice::from_ref(&r), None, 1);
        let e = encode_caption(&r, &v, &PretrainedTables::default(), MAX_CAPTION_LEN);
        assert_eq!(e.tokens.len(), MAX_CAPTION_LEN);
        assert!(e.tokens[..3].iter().all(|&i| i >= 2));
        assert!(e.tokens[3..].iter().all(|&i| i == PAD));
        assert_eq!(v.decode(&e.tokens), ["a", "b", "c"]);
        assert!(e.words.is_none() && e.lemmas.is_none() && e.concepts.is_none());
    }

    #[test]
    fn long_caption_is_truncated() {
        let text = vec!["w"; 1200].join(" ");
        let r = record(&text);
        let v = Vocab::build(std::slice::from_ref(&r), None, 1);
        let e = encode_caption(&r, &v, &PretrainedTables::default(), MAX_CAPTION_LEN);
        assert_eq!(e.tokens.len(), 1000);
        assert_eq!(e.length, 1000);
        assert!(e.tokens.iter().all(|&i| i == 2));
    }

    #[test]
    fn lemma_resolved_and_unseen_concept_is_absent() {
        let mut r = record("it made sense");
        r.lemmas = Some(vec!["it".into(), "make".into(), "sense".into()]);
        r.concepts = Some(vec![vec![], vec!["kg:produce".into(), "kg:create".into()], vec!["kg:unseen".into()]]);
        let mut lemma = EmbeddingTable::new(TableKind::Lemma, 2).unwrap();
        lemma.insert("make", &[1.0, 2.0]).unwrap();
        let mut concept = EmbeddingTable::new(TableKind::Concept, 2).unwrap();
        concept.insert("kg:create", &[3.0, 3.0]).unwrap();
        concept.insert("kg:produce", &[4.0, 4.0]).unwrap();
        let tables = PretrainedTables {
            word: None,
            lemma: Some(lemma),
            concept: Some(concept),
        };
        let v = Vocab::build(&[r.clone()], None, 1);
        let e = encode_caption(&r, &v, &tables, 5);
        assert_eq!(e.lemmas.unwrap(), [0, 1, 0, 0, 0]);
        // First listed concept wins; unseen concept maps to the zero row.
        assert_eq!(e.concepts.unwrap(), [0, 2, 0, 0, 0]);
    }
}
