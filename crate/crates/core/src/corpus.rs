//! Word-level tokenization, vocabulary management, dataset ingestion and
//! splitting, and the random input masking used by training and insertion.
//!
//! Tokenization is whitespace word-level. The vocabulary reserves four ids
//! (pad, unknown, begin, end) ahead of the learned tokens; ids are dense in
//! `[0, |V|)`.

use crate::error::Error;
use crate::Result;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Deserialize;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BEGIN_ID: usize = 2;
pub const END_ID: usize = 3;
pub const RESERVED: usize = 4;
const RESERVED_SURFACE: [&str; RESERVED] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Surface-string <-> dense-id bijection with four reserved ids in front.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from the non-reserved token list, in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if RESERVED_SURFACE.contains(&t.as_str()) || index.insert(t.clone(), RESERVED + i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate or reserved token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Total size including the four reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn surface(&self, id: usize) -> Result<&str> {
        if id < RESERVED {
            Ok(RESERVED_SURFACE[id])
        } else {
            self.tokens
                .get(id - RESERVED)
                .map(|s| s.as_str())
                .ok_or(Error::InvalidTokenId { id, vocab_size: self.size() })
        }
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of all non-reserved tokens.
    pub fn non_reserved_ids(&self) -> std::ops::Range<usize> {
        RESERVED..self.size()
    }

    /// Writes the plain-text vocabulary file: a header comment documenting
    /// the reserved ids, then one token per line (line k -> id k + 4).
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# vocabulary file: one token per line, id = line index + {RESERVED}")?;
        for (i, s) in RESERVED_SURFACE.iter().enumerate() {
            writeln!(w, "# reserved id {i}: {s}")?;
        }
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut tokens = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            tokens.push(line);
        }
        Vocabulary::from_tokens(tokens)
    }
}

/// Token ids over a finite vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Per-position keep/mask bits paired with a token sequence; 1 keeps the
/// token, 0 masks it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSequence {
    pub bits: Vec<u8>,
}

impl MaskSequence {
    pub fn ones(len: usize) -> Self {
        MaskSequence { bits: vec![1; len] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Applies the mask: masked positions become the pad id.
    pub fn apply(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        if self.bits.len() != seq.len() {
            return Err(Error::LengthMismatch { left: self.bits.len(), right: seq.len() });
        }
        let ids = seq
            .ids
            .iter()
            .zip(&self.bits)
            .map(|(&id, &b)| if b == 1 { id } else { PAD_ID })
            .collect();
        Ok(TokenSequence::new(ids))
    }
}

/// Raw texts plus a train/test partition.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_ratio: f64,
}

impl Corpus {
    /// Seeded-shuffle split; `train_ratio` of the records go to train.
    pub fn new(records: Vec<String>, train_ratio: f64, seed: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if !(0.0..=1.0).contains(&train_ratio) {
            return Err(Error::InvalidConfig(format!("train ratio {train_ratio} out of range")));
        }
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut rng = crate::rng::stream(seed, &[0x7370_6c69_74]);
        order.shuffle(&mut rng);
        let n_train = (records.len() as f64 * train_ratio).round() as usize;
        let train = order[..n_train].to_vec();
        let test = order[n_train..].to_vec();
        Ok(Corpus { records, train, test, train_ratio })
    }

    pub fn train_texts(&self) -> impl Iterator<Item = &str> {
        self.train.iter().map(|&i| self.records[i].as_str())
    }

    pub fn test_texts(&self) -> impl Iterator<Item = &str> {
        self.test.iter().map(|&i| self.records[i].as_str())
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: String,
}

/// Loads a JSONL corpus; each line is an object with a required `"text"`
/// field, unknown fields ignored.
pub fn load_jsonl(r: impl Read) -> Result<Vec<String>> {
    let reader = BufReader::new(r);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line)?;
        out.push(rec.text);
    }
    Ok(out)
}

/// Builds a vocabulary from the `max_size - 4` most frequent whitespace
/// tokens. Frequency ties break lexicographically.
pub fn build_vocabulary(texts: &[String], max_size: usize) -> Result<Vocabulary> {
    if texts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if max_size <= RESERVED {
        return Err(Error::InvalidConfig(format!(
            "max_size {max_size} must exceed the {RESERVED} reserved ids"
        )));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for text in texts {
        for tok in text.split_whitespace() {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()).collect())
}

/// Whitespace tokenization; out-of-vocabulary tokens map to the unknown id;
/// the result is truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let ids = text
        .split_whitespace()
        .take(max_len)
        .map(|tok| vocab.id_of(tok))
        .collect();
    TokenSequence::new(ids)
}

/// Whitespace-joined surface strings; reserved ids are omitted.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String> {
    let mut parts = Vec::with_capacity(seq.len());
    for &id in &seq.ids {
        if id >= vocab.size() {
            return Err(Error::InvalidTokenId { id, vocab_size: vocab.size() });
        }
        if id >= RESERVED {
            parts.push(vocab.surface(id)?);
        }
    }
    Ok(parts.join(" "))
}

/// Generates synthetic sentences from a seeded deterministic slot chain.
///
/// Sentences walk a seeded permutation over `slots` abstract states, so a
/// sentence's slot sequence is fully determined by its start; each slot
/// owns `forms` interchangeable surface words, picked uniformly per
/// occurrence. The structure is learnable by small models while the form
/// choice leaves genuine lexical freedom. Useful for smoke tests and
/// end-to-end demos without shipping a real dataset.
pub fn synthetic_sentences(
    n_sentences: usize,
    sentence_len: usize,
    slots: usize,
    forms: usize,
    seed: u64,
) -> Vec<String> {
    assert!(slots >= 4 && forms >= 1, "need at least 4 slots and 1 form");
    let word = |slot: usize, form: usize| format!("s{slot:02}{}", (b'a' + form as u8) as char);
    let mut successor: Vec<usize> = (0..slots).collect();
    successor.shuffle(&mut crate::rng::stream(seed, &[0x636861_696e]));
    let mut out = Vec::with_capacity(n_sentences);
    for i in 0..n_sentences {
        let mut rng = crate::rng::stream(seed, &[0x73_656e74, i as u64]);
        let mut slot = rng.random_range(0..slots);
        let mut words = Vec::with_capacity(sentence_len);
        for _ in 0..sentence_len {
            words.push(word(slot, rng.random_range(0..forms)));
            slot = successor[slot];
        }
        out.push(words.join(" "));
    }
    out
}

/// Independent Bernoulli mask: each position is 0 (masked) with probability
/// `mask_pct`. Deterministic under a fixed stream.
pub fn sample_mask(length: usize, mask_pct: f64, rng: &mut impl Rng) -> Result<MaskSequence> {
    if !(0.0..=1.0).contains(&mask_pct) {
        return Err(Error::InvalidConfig(format!("mask_pct {mask_pct} out of range")));
    }
    let bits = (0..length)
        .map(|_| if rng.random::<f64>() < mask_pct { 0 } else { 1 })
        .collect();
    Ok(MaskSequence { bits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn vocabulary_from_small_corpus() {
        let v = build_vocabulary(&texts(&["a b", "a c"]), 7).unwrap();
        assert_eq!(v.size(), 7);
        // a has count 2; b and c tie at 1, lexicographic
        assert_eq!(v.tokens(), &["a".to_string(), "b".to_string(), "c".to_string()]);
        assert_eq!(v.id_of("a"), RESERVED);
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(matches!(build_vocabulary(&[], 10), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn vocabulary_keeps_most_frequent_against_brute_force() {
        // 1000-doc synthetic corpus with a known frequency law
        let mut docs = Vec::new();
        let mut rng = crate::rng::stream(42, &[1]);
        let words: Vec<String> = (0..500).map(|i| format!("w{i:03}")).collect();
        for _ in 0..1000 {
            let mut doc = Vec::new();
            for _ in 0..30 {
                // lower indices more likely
                let r: f64 = rng.random::<f64>();
                let idx = ((r * r) * words.len() as f64) as usize % words.len();
                doc.push(words[idx].clone());
            }
            docs.push(doc.join(" "));
        }
        let v = build_vocabulary(&docs, 200).unwrap();
        assert_eq!(v.size(), 200);

        // independent frequency oracle
        let mut counts: HashMap<String, u64> = HashMap::new();
        for d in &docs {
            for t in d.split_whitespace() {
                *counts.entry(t.to_string()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let expect: Vec<String> = ranked.into_iter().take(196).map(|(t, _)| t).collect();
        assert_eq!(v.tokens(), expect.as_slice());
    }

    #[test]
    fn tokenize_empty_and_truncation() {
        let v = build_vocabulary(&texts(&["a b c"]), 10).unwrap();
        assert!(tokenize("", &v, 80).is_empty());
        let long = vec!["a"; 100].join(" ");
        assert_eq!(tokenize(&long, &v, 80).len(), 80);
    }

    #[test]
    fn tokenize_detokenize_round_trip() {
        let v = build_vocabulary(&texts(&["the quick brown fox jumps"]), 20).unwrap();
        let s = "quick fox jumps the";
        let seq = tokenize(s, &v, 80);
        assert_eq!(detokenize(&seq, &v).unwrap(), s);
    }

    #[test]
    fn detokenize_drops_reserved_and_rejects_out_of_range() {
        let v = build_vocabulary(&texts(&["x y"]), 6).unwrap();
        assert_eq!(detokenize(&TokenSequence::new(vec![]), &v).unwrap(), "");
        let seq = TokenSequence::new(vec![PAD_ID, v.id_of("x"), PAD_ID, v.id_of("y")]);
        assert_eq!(detokenize(&seq, &v).unwrap(), "x y");
        let bad = TokenSequence::new(vec![v.size()]);
        assert!(matches!(detokenize(&bad, &v), Err(Error::InvalidTokenId { .. })));
    }

    #[test]
    fn oov_maps_to_unknown() {
        let v = build_vocabulary(&texts(&["a b"]), 6).unwrap();
        let seq = tokenize("a zzz b", &v, 10);
        assert_eq!(seq.ids[1], UNK_ID);
    }

    #[test]
    fn mask_extremes() {
        let mut rng = crate::rng::stream(1, &[2]);
        let all_kept = sample_mask(50, 0.0, &mut rng).unwrap();
        assert!(all_kept.bits.iter().all(|&b| b == 1));
        let all_masked = sample_mask(50, 1.0, &mut rng).unwrap();
        assert!(all_masked.bits.iter().all(|&b| b == 0));
    }

    #[test]
    fn mask_fraction_within_binomial_interval() {
        // central 99.9% interval for Binomial(1000, 0.5) is [436, 564]
        let mut rng = crate::rng::stream(7, &[3]);
        let m = sample_mask(1000, 0.5, &mut rng).unwrap();
        let zeros = m.bits.iter().filter(|&&b| b == 0).count();
        assert!((436..=564).contains(&zeros), "zeros = {zeros}");
    }

    #[test]
    fn mask_reproducible_and_converges() {
        let a = sample_mask(200, 0.3, &mut crate::rng::stream(9, &[4])).unwrap();
        let b = sample_mask(200, 0.3, &mut crate::rng::stream(9, &[4])).unwrap();
        assert_eq!(a, b);

        let mut rng = crate::rng::stream(11, &[5]);
        let draws = 20_000;
        let mut masked = 0usize;
        for _ in 0..draws {
            masked += sample_mask(1, 0.3, &mut rng).unwrap().bits[0] as usize ^ 1;
        }
        let frac = masked as f64 / draws as f64;
        assert!((frac - 0.3).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn mask_apply_uses_pad() {
        let seq = TokenSequence::new(vec![5, 6, 7]);
        let m = MaskSequence { bits: vec![1, 0, 1] };
        assert_eq!(m.apply(&seq).unwrap().ids, vec![5, PAD_ID, 7]);
    }

    #[test]
    fn corpus_split_disjoint_and_ratio() {
        let records: Vec<String> = (0..100).map(|i| format!("doc {i}")).collect();
        let c = Corpus::new(records, 0.8, 13).unwrap();
        assert_eq!(c.train.len(), 80);
        assert_eq!(c.test.len(), 20);
        for t in &c.test {
            assert!(!c.train.contains(t));
        }
        // seeded: same seed, same split
        let records2: Vec<String> = (0..100).map(|i| format!("doc {i}")).collect();
        let c2 = Corpus::new(records2, 0.8, 13).unwrap();
        assert_eq!(c.train, c2.train);
    }

    #[test]
    fn jsonl_loader_ignores_unknown_fields() {
        let data = "{\"text\": \"hello world\", \"meta\": 3}\n\n{\"text\": \"second\"}\n";
        let texts = load_jsonl(data.as_bytes()).unwrap();
        assert_eq!(texts, vec!["hello world".to_string(), "second".to_string()]);
    }

    #[test]
    fn synthetic_sentences_deterministic_and_shaped() {
        let a = synthetic_sentences(5, 20, 49, 4, 42);
        let b = synthetic_sentences(5, 20, 49, 4, 42);
        assert_eq!(a, b);
        for s in &a {
            assert_eq!(s.split_whitespace().count(), 20);
        }
        let c = synthetic_sentences(5, 20, 49, 4, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_vocabulary_covers_all_forms() {
        let texts = synthetic_sentences(2000, 20, 49, 4, 7);
        let v = build_vocabulary(&texts, 200).unwrap();
        assert_eq!(v.size(), 200);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = build_vocabulary(&texts(&["roundtrip of some tokens tokens"]), 10).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let v2 = Vocabulary::read_from(buf.as_slice()).unwrap();
        assert_eq!(v, v2);
    }
}
