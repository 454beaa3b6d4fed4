//! Corpus-local word vectors and the synonym table built from them.
//!
//! Vectors are rows of a positive-PMI co-occurrence matrix over the most
//! frequent context words (window +/-2), L2-normalized. They are nowhere
//! near pretrained-vector quality, but they are deterministic, need no
//! external data, and give usable nearest-neighbor synonyms and
//! bag-of-embeddings text similarity on the corpora this crate trains on.

use crate::error::Error;
use crate::Result;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

const WINDOW: usize = 2;
const MAX_CONTEXT: usize = 512;

#[derive(Debug, Clone)]
pub struct WordVectors {
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<Vec<f64>>,
}

impl WordVectors {
    /// Trains vectors on raw texts. Deterministic given the input order.
    pub fn train(texts: &[String]) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        if freq.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut words: Vec<(&str, u64)> = freq.iter().map(|(w, c)| (*w, *c)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let vocab: Vec<String> = words.iter().map(|(w, _)| w.to_string()).collect();
        let index: HashMap<String, usize> =
            vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let n_context = vocab.len().min(MAX_CONTEXT);

        // co-occurrence counts within the window, context limited to the
        // n_context most frequent words
        let mut cooc = vec![0f64; vocab.len() * n_context];
        let mut word_totals = vec![0f64; vocab.len()];
        let mut ctx_totals = vec![0f64; n_context];
        let mut grand = 0f64;
        for t in texts {
            let ids: Vec<usize> = t.split_whitespace().map(|w| index[w]).collect();
            for (i, &w) in ids.iter().enumerate() {
                let lo = i.saturating_sub(WINDOW);
                let hi = (i + WINDOW + 1).min(ids.len());
                for j in lo..hi {
                    if i == j {
                        continue;
                    }
                    let c = ids[j];
                    if c < n_context {
                        cooc[w * n_context + c] += 1.0;
                        word_totals[w] += 1.0;
                        ctx_totals[c] += 1.0;
                        grand += 1.0;
                    }
                }
            }
        }
        if grand == 0.0 {
            return Err(Error::EmptyInput("co-occurrence counts"));
        }

        // positive PMI, L2-normalized rows
        let mut vectors = Vec::with_capacity(vocab.len());
        for w in 0..vocab.len() {
            let mut row = vec![0f64; n_context];
            if word_totals[w] > 0.0 {
                for c in 0..n_context {
                    let joint = cooc[w * n_context + c];
                    if joint > 0.0 {
                        let pmi = (joint * grand / (word_totals[w] * ctx_totals[c])).ln();
                        if pmi > 0.0 {
                            row[c] = pmi;
                        }
                    }
                }
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut row {
                    *v /= norm;
                }
            }
            vectors.push(row);
        }
        Ok(WordVectors { words: vocab, index, vectors })
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index.get(word).map(|&i| self.vectors[i].as_slice())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        let (va, vb) = (self.get(a)?, self.get(b)?);
        Some(va.iter().zip(vb).map(|(x, y)| x * y).sum())
    }

    /// Mean bag-of-embeddings vector for a text; `None` when no word is
    /// known.
    pub fn text_vector(&self, text: &str) -> Option<Vec<f64>> {
        let dim = self.vectors.first()?.len();
        let mut acc = vec![0f64; dim];
        let mut n = 0usize;
        for w in text.split_whitespace() {
            if let Some(v) = self.get(w) {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
                n += 1;
            }
        }
        if n == 0 {
            return None;
        }
        for a in &mut acc {
            *a /= n as f64;
        }
        Some(acc)
    }

    /// The `k` nearest neighbors of a word by cosine, descending (ties
    /// break lexicographically). The word itself is excluded.
    pub fn neighbors(&self, word: &str, k: usize) -> Vec<(String, f64)> {
        let Some(v) = self.get(word) else { return Vec::new() };
        let mut scored: Vec<(f64, &String)> = self
            .words
            .iter()
            .filter(|w| w.as_str() != word)
            .map(|w| {
                let u = self.get(w).expect("vocabulary word");
                (u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>(), w)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
        scored.into_iter().take(k).map(|(s, w)| (w.clone(), s)).collect()
    }
}

/// Word -> ranked nearest neighbors.
#[derive(Debug, Clone, Default)]
pub struct SynonymTable {
    map: HashMap<String, Vec<String>>,
}

impl SynonymTable {
    /// Builds the table from trained vectors, keeping `k` neighbors per
    /// word.
    pub fn from_word_vectors(wv: &WordVectors, k: usize) -> Self {
        let mut map = HashMap::new();
        for w in wv.words() {
            let ns: Vec<String> = wv.neighbors(w, k).into_iter().map(|(n, _)| n).collect();
            if !ns.is_empty() {
                map.insert(w.clone(), ns);
            }
        }
        SynonymTable { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn neighbors(&self, word: &str) -> Option<&[String]> {
        self.map.get(word).map(|v| v.as_slice())
    }

    pub fn top(&self, word: &str) -> Option<&str> {
        self.map.get(word).and_then(|v| v.first()).map(|s| s.as_str())
    }

    /// File format: one line per word, the word followed by its ranked
    /// neighbors, whitespace-separated.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut words: Vec<&String> = self.map.keys().collect();
        words.sort();
        for word in words {
            write!(w, "{word}")?;
            for n in &self.map[word] {
                write!(w, " {n}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut map = HashMap::new();
        for line in BufReader::new(r).lines() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let neighbors: Vec<String> = parts.map(|s| s.to_string()).collect();
            if !neighbors.is_empty() {
                map.insert(word.to_string(), neighbors);
            }
        }
        Ok(SynonymTable { map })
    }
}
