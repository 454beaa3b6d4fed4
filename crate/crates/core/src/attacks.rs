//! The watermark-removal adversary suite: token deletion, addition,
//! synonym replacement, rule-based rephrasing, and re-watermarking with an
//! independently trained model.
//!
//! Attack rates are per-token Bernoulli probabilities. Every attack with
//! rate or strength zero is the identity, and deletion never empties a
//! sequence.

use crate::corpus::{detokenize, tokenize, TokenSequence, Vocabulary, RESERVED};
use crate::error::Error;
use crate::evaluation::TextScorer;
use crate::insertion::{watermark, InsertionConfig};
use crate::wm_model::{BitMessage, WatermarkModel};
use crate::word_vectors::SynonymTable;
use crate::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Delete,
    Add,
    Replace,
    Rephrase,
    Rewatermark,
}

impl AttackKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "delete" => Ok(AttackKind::Delete),
            "add" => Ok(AttackKind::Add),
            "replace" => Ok(AttackKind::Replace),
            "rephrase" => Ok(AttackKind::Rephrase),
            "rewatermark" => Ok(AttackKind::Rewatermark),
            other => Err(Error::InvalidConfig(format!("unknown attack {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Delete => "delete",
            AttackKind::Add => "add",
            AttackKind::Replace => "replace",
            AttackKind::Rephrase => "rephrase",
            AttackKind::Rewatermark => "rewatermark",
        }
    }
}

/// Attack parameters; the heavyweight resources (synonym table,
/// paraphraser, adversary model) are passed to the individual operations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub rate: f64,
    pub acceptor_floor: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { kind: AttackKind::Delete, rate: 0.06, acceptor_floor: 0.85, seed: 0 }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::InvalidConfig(format!("attack rate {} out of [0,1)", self.rate)));
        }
        if !(self.acceptor_floor > 0.0 && self.acceptor_floor <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "acceptor floor {} out of (0,1]",
                self.acceptor_floor
            )));
        }
        Ok(())
    }
}

/// Deletes each token independently with probability `rate`; at least one
/// token always survives (the first, if the draw removed everything).
pub fn attack_delete(text: &TokenSequence, rate: f64, rng: &mut impl Rng) -> Result<TokenSequence> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("rate {rate} out of [0,1)")));
    }
    let ids: Vec<usize> =
        text.ids.iter().copied().filter(|_| rng.random::<f64>() >= rate).collect();
    if ids.is_empty() && !text.is_empty() {
        return Ok(TokenSequence::new(vec![text.ids[0]]));
    }
    Ok(TokenSequence::new(ids))
}

/// Inserts a uniformly random non-reserved token after each position with
/// probability `rate`.
pub fn attack_add(
    text: &TokenSequence,
    rate: f64,
    rng: &mut impl Rng,
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("rate {rate} out of [0,1)")));
    }
    let mut ids = Vec::with_capacity(text.len() + text.len() / 8);
    for &id in &text.ids {
        ids.push(id);
        if rng.random::<f64>() < rate {
            ids.push(rng.random_range(RESERVED..vocab.size()));
        }
    }
    Ok(TokenSequence::new(ids))
}

/// Replaces each token that has a synonym-table entry with its top-ranked
/// neighbor, independently with probability `rate`. Tokens absent from the
/// table are never touched.
pub fn attack_replace(
    text: &TokenSequence,
    rate: f64,
    rng: &mut impl Rng,
    synonyms: Option<&SynonymTable>,
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    let synonyms = synonyms.ok_or(Error::MissingSynonymTable)?;
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("rate {rate} out of [0,1)")));
    }
    let mut ids = Vec::with_capacity(text.len());
    for &id in &text.ids {
        let surface = vocab.surface(id)?;
        let replacement = if id >= RESERVED {
            synonyms.top(surface).filter(|_| rng.random::<f64>() < rate)
        } else {
            None
        };
        match replacement {
            Some(neighbor) => ids.push(vocab.id_of(neighbor)),
            None => ids.push(id),
        }
    }
    Ok(TokenSequence::new(ids))
}

/// Text-to-text rewriting hook; `None` signals a paraphraser failure.
pub trait Paraphraser {
    fn paraphrase(&self, text: &str) -> Option<String>;
}

/// The shipped rule-based paraphraser: swaps adjacent token pairs and
/// substitutes top synonyms, both at fixed per-position probabilities,
/// deterministically per input text.
pub struct RuleParaphraser<'a> {
    pub synonyms: &'a SynonymTable,
    pub swap_pct: f64,
    pub replace_pct: f64,
    pub seed: u64,
}

impl<'a> RuleParaphraser<'a> {
    pub fn new(synonyms: &'a SynonymTable, seed: u64) -> Self {
        RuleParaphraser { synonyms, swap_pct: 0.15, replace_pct: 0.25, seed }
    }
}

impl Paraphraser for RuleParaphraser<'_> {
    fn paraphrase(&self, text: &str) -> Option<String> {
        let mut words: Vec<String> = text.split_whitespace().map(|s| s.to_string()).collect();
        if words.is_empty() {
            return None;
        }
        let mut tag = 0xcbf2_9ce4_8422_2325u64;
        for b in text.bytes() {
            tag = (tag ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        let mut rng = crate::rng::stream(self.seed, &[0x7265_7068, tag]);
        for w in words.iter_mut() {
            if rng.random::<f64>() < self.replace_pct {
                if let Some(n) = self.synonyms.top(w) {
                    *w = n.to_string();
                }
            }
        }
        let mut i = 0;
        while i + 1 < words.len() {
            if rng.random::<f64>() < self.swap_pct {
                words.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        Some(words.join(" "))
    }
}

/// A paraphrase attempt plus the acceptance decision.
#[derive(Debug, Clone)]
pub struct RephraseOutcome {
    pub tokens: TokenSequence,
    pub accepted: bool,
    pub paraphraser_failed: bool,
}

/// Rephrases the text and keeps the result only if the semantic score
/// against the original reaches `floor`; otherwise (or on paraphraser
/// failure) the original text is returned.
pub fn attack_rephrase(
    text: &TokenSequence,
    vocab: &Vocabulary,
    paraphraser: &dyn Paraphraser,
    scorer: &dyn TextScorer,
    floor: f64,
) -> Result<RephraseOutcome> {
    let original = detokenize(text, vocab)?;
    let Some(candidate) = paraphraser.paraphrase(&original) else {
        return Ok(RephraseOutcome { tokens: text.clone(), accepted: false, paraphraser_failed: true });
    };
    let score = scorer.score(&original, &candidate)?;
    if score >= floor {
        Ok(RephraseOutcome {
            tokens: tokenize(&candidate, vocab, usize::MAX),
            accepted: true,
            paraphraser_failed: false,
        })
    } else {
        Ok(RephraseOutcome { tokens: text.clone(), accepted: false, paraphraser_failed: false })
    }
}

/// Runs the adversary's own insertion over the text with a fresh message.
/// `cfg.iterations == 0` disables the attack (identity).
pub fn attack_rewatermark(
    text: &TokenSequence,
    adversary: &WatermarkModel,
    fresh_message: &BitMessage,
    cfg: &InsertionConfig,
    rng: &mut impl Rng,
) -> Result<TokenSequence> {
    if cfg.iterations == 0 {
        return Ok(text.clone());
    }
    Ok(watermark(adversary, text, fresh_message, cfg, rng)?.tokens)
}

/// One line of the attack output JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutput {
    pub watermarked_text: String,
    pub attacked_text: String,
    pub attack: String,
    pub params: serde_json::Value,
}
