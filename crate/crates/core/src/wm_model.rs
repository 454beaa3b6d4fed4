//! The watermarking network: text encoder, message embedder, shared
//! normalizer, latent fusion, decoder to vocabulary distributions,
//! Gumbel-Softmax reparameterization, distribution-level robustness
//! transforms, the embedding mapper, and the signature extractor.
//!
//! The same graph builders serve training (with gradients) and inference
//! (values only), so there is exactly one definition of every forward path.

use crate::corpus::TokenSequence;
use crate::error::Error;
use crate::nn::{self, Block, LayerNorm, Linear};
use crate::tensor::{Array, Graph, NodeId, ParamSet, RowSrc, LOG_EPS};
use crate::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fixed-length binary signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMessage {
    pub bits: Vec<u8>,
}

impl BitMessage {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::EmptyInput("message"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidBitString(format!("{bits:?}")));
        }
        Ok(BitMessage { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Uniform random message: each bit is Bernoulli(0.5).
    pub fn random(len: usize, rng: &mut impl Rng) -> Self {
        BitMessage { bits: (0..len).map(|_| rng.random_range(0..2u8)).collect() }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s.is_empty() || !s.chars().all(|c| c == '0' || c == '1') {
            return Err(Error::InvalidBitString(s.to_string()));
        }
        BitMessage::new(s.chars().map(|c| (c == '1') as u8).collect())
    }

    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }

    pub fn complement(&self) -> Self {
        BitMessage { bits: self.bits.iter().map(|b| 1 - b).collect() }
    }

    fn as_row(&self) -> Array {
        Array::from_vec(1, self.bits.len(), self.bits.iter().map(|&b| b as f64).collect())
    }
}

/// One latent vector of model width per input position.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub vectors: Array,
}

/// Per-position probability rows over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSequence {
    pub rows: Array,
}

impl DistributionSequence {
    /// Checks the distribution invariant: entries non-negative, rows sum to
    /// one within 1e-6.
    pub fn validate(&self) -> Result<()> {
        for r in 0..self.rows.rows {
            let row = self.rows.row(r);
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::InvalidConfig(format!("row {r} has invalid entries")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!("row {r} sums to {sum}")));
            }
        }
        Ok(())
    }

    /// One-hot rows for a token sequence over a `vocab_size` vocabulary.
    pub fn one_hot(seq: &TokenSequence, vocab_size: usize) -> Result<Self> {
        for &id in &seq.ids {
            if id >= vocab_size {
                return Err(Error::InvalidTokenId { id, vocab_size });
            }
        }
        Ok(DistributionSequence { rows: Array::one_hot(&seq.ids, vocab_size) })
    }

    /// Per-row argmax token ids (lowest index wins ties).
    pub fn argmax_ids(&self) -> Vec<usize> {
        (0..self.rows.rows)
            .map(|r| {
                let row = self.rows.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rows.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows == 0
    }
}

/// Rows in the extractor embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSequence {
    pub vectors: Array,
}

/// Distribution-level robustness transform kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Drop,
    Add,
    Replace,
}

/// Architecture and seed record; every dimension of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub msg_len: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub ext_width: usize,
    pub ext_heads: usize,
    pub ext_layers: usize,
    pub ext_ff: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 8000,
            msg_len: 16,
            d_model: 128,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ff_width: 512,
            ext_width: 64,
            ext_heads: 8,
            ext_layers: 3,
            ext_ff: 512,
            max_len: 80,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.vocab_size <= crate::corpus::RESERVED {
            problems.push("vocab_size must exceed the reserved ids".to_string());
        }
        if self.msg_len == 0 {
            problems.push("msg_len must be positive".to_string());
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            problems.push("d_model must be a positive multiple of heads".to_string());
        }
        if self.ext_width == 0 || self.ext_heads == 0 || self.ext_width % self.ext_heads != 0 {
            problems.push("ext_width must be a positive multiple of ext_heads".to_string());
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.ext_layers == 0 {
            problems.push("layer counts must be positive".to_string());
        }
        if self.ff_width == 0 || self.ext_ff == 0 {
            problems.push("feed-forward widths must be positive".to_string());
        }
        if self.max_len == 0 {
            problems.push("max_len must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    tok_embed: crate::tensor::ParamId,
    enc: Vec<Block>,
    rn: LayerNorm,
    msg: Linear,
    dec: Vec<Block>,
    dec_ln: LayerNorm,
    out: Linear,
    map: Linear,
    ext: Vec<Block>,
    ext_ln: LayerNorm,
    head: Linear,
}

/// The learned watermarking network plus its configuration.
#[derive(Debug, Clone)]
pub struct WatermarkModel {
    pub config: ModelConfig,
    params: ParamSet,
    layout: Layout,
    pub train_steps: u64,
}

impl WatermarkModel {
    /// Builds a freshly initialized model, deterministic under
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = crate::rng::stream(config.seed, &[0x6d6f_64656c]);
        let tok_embed =
            ps.register("embedding.token", Array::xavier(config.vocab_size, config.d_model, &mut rng));
        let enc = (0..config.enc_layers)
            .map(|i| Block::register(&mut ps, &mut rng, &format!("encoder.l{i}"), config.d_model, config.heads, config.ff_width))
            .collect();
        let rn = LayerNorm::register(&mut ps, "norm.shared", config.d_model);
        let msg = Linear::register(&mut ps, &mut rng, "message.proj", config.msg_len, config.d_model);
        let dec = (0..config.dec_layers)
            .map(|i| Block::register(&mut ps, &mut rng, &format!("decoder.l{i}"), config.d_model, config.heads, config.ff_width))
            .collect();
        let dec_ln = LayerNorm::register(&mut ps, "decoder.final_ln", config.d_model);
        let out = Linear::register(&mut ps, &mut rng, "decoder.out", config.d_model, config.vocab_size);
        let map = Linear::register(&mut ps, &mut rng, "mapper", config.vocab_size, config.ext_width);
        let ext = (0..config.ext_layers)
            .map(|i| Block::register(&mut ps, &mut rng, &format!("extractor.l{i}"), config.ext_width, config.ext_heads, config.ext_ff))
            .collect();
        let ext_ln = LayerNorm::register(&mut ps, "extractor.final_ln", config.ext_width);
        let head = Linear::register(&mut ps, &mut rng, "extractor.head", config.ext_width, config.msg_len);
        let layout = Layout { tok_embed, enc, rn, msg, dec, dec_ln, out, map, ext, ext_ln, head };
        Ok(WatermarkModel { config, params: ps, layout, train_steps: 0 })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    // ----- graph builders (shared by training and inference) -----

    /// Encoder path: token embedding + positional encoding, encoder blocks,
    /// then the shared normalization layer.
    pub(crate) fn build_encode(&self, g: &mut Graph, ids: &[usize]) -> NodeId {
        let table = g.param(&self.params, self.layout.tok_embed);
        let e = g.embed(table, ids);
        let pe = nn::positional_encoding(ids.len(), self.config.d_model);
        let mut x = g.add_const(e, pe);
        for block in &self.layout.enc {
            x = block.apply(g, &self.params, x);
        }
        self.layout.rn.apply(g, &self.params, x)
    }

    /// Message path: affine map then the shared normalization layer.
    pub(crate) fn build_embed_message(&self, g: &mut Graph, message: &BitMessage) -> NodeId {
        let m = g.input(message.as_row());
        let projected = self.layout.msg.apply(g, &self.params, m);
        self.layout.rn.apply(g, &self.params, projected)
    }

    /// Fusion: the message latent is added to every token latent.
    pub(crate) fn build_fuse(&self, g: &mut Graph, text: NodeId, msg: NodeId) -> NodeId {
        g.add_bias(text, msg)
    }

    /// Decoder path: blocks over the fused latents, final norm, projection
    /// to the vocabulary, softmax rows.
    pub(crate) fn build_decode(&self, g: &mut Graph, fused: NodeId) -> NodeId {
        let mut x = fused;
        for block in &self.layout.dec {
            x = block.apply(g, &self.params, x);
        }
        let x = self.layout.dec_ln.apply(g, &self.params, x);
        let logits = self.layout.out.apply(g, &self.params, x);
        g.softmax_rows(logits)
    }

    /// Gumbel-Softmax reparameterization on the graph; `noise` must match
    /// the distribution shape.
    pub(crate) fn build_gumbel(&self, g: &mut Graph, dist: NodeId, tau: f64, noise: Array) -> NodeId {
        let logs = g.log_clamped(dist, LOG_EPS);
        let noisy = g.add_const(logs, noise);
        let scaled = g.scale(noisy, 1.0 / tau);
        g.softmax_rows(scaled)
    }

    /// Embedding mapper: every distribution row through the affine map.
    pub(crate) fn build_map_embedding(&self, g: &mut Graph, dist: NodeId) -> NodeId {
        self.layout.map.apply(g, &self.params, dist)
    }

    /// Extractor: blocks over the embedded rows, final norm, mean pooling,
    /// projection to `msg_len` logits, logistic.
    pub(crate) fn build_extract(&self, g: &mut Graph, embedded: NodeId) -> NodeId {
        let rows = g.value(embedded).rows;
        let pe = nn::positional_encoding(rows, self.config.ext_width);
        let mut x = g.add_const(embedded, pe);
        for block in &self.layout.ext {
            x = block.apply(g, &self.params, x);
        }
        let x = self.layout.ext_ln.apply(g, &self.params, x);
        let pooled = g.mean_rows(x);
        let logits = self.layout.head.apply(g, &self.params, pooled);
        g.sigmoid(logits)
    }

    // ----- public operations -----

    /// Encodes a token sequence into latents (already through the shared
    /// normalizer).
    pub fn encode_text(&self, seq: &TokenSequence) -> Result<LatentSequence> {
        if seq.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        for &id in &seq.ids {
            if id >= self.config.vocab_size {
                return Err(Error::InvalidTokenId { id, vocab_size: self.config.vocab_size });
            }
        }
        let mut g = Graph::new();
        let out = self.build_encode(&mut g, &seq.ids);
        Ok(LatentSequence { vectors: g.value(out).clone() })
    }

    /// Embeds a message into a single latent vector of model width.
    pub fn embed_message(&self, message: &BitMessage) -> Result<Vec<f64>> {
        if message.len() != self.config.msg_len {
            return Err(Error::MessageLengthMismatch {
                got: message.len(),
                expected: self.config.msg_len,
            });
        }
        let mut g = Graph::new();
        let out = self.build_embed_message(&mut g, message);
        Ok(g.value(out).data.clone())
    }

    /// Decodes fused latents into a distribution sequence of equal length.
    pub fn decode_distribution(&self, fused: &LatentSequence) -> Result<DistributionSequence> {
        if fused.vectors.rows == 0 {
            return Err(Error::EmptyInput("latent sequence"));
        }
        if fused.vectors.cols != self.config.d_model {
            return Err(Error::WidthMismatch { left: fused.vectors.cols, right: self.config.d_model });
        }
        let mut g = Graph::new();
        let node = g.input(fused.vectors.clone());
        let out = self.build_decode(&mut g, node);
        Ok(DistributionSequence { rows: g.value(out).clone() })
    }

    /// Maps distribution rows into the extractor embedding space.
    pub fn map_embedding(&self, dist: &DistributionSequence) -> Result<EmbeddedSequence> {
        if dist.rows.cols != self.config.vocab_size {
            return Err(Error::WidthMismatch { left: dist.rows.cols, right: self.config.vocab_size });
        }
        let mut g = Graph::new();
        let node = g.input(dist.rows.clone());
        let out = self.build_map_embedding(&mut g, node);
        Ok(EmbeddedSequence { vectors: g.value(out).clone() })
    }

    /// Extracts per-bit probabilities and thresholded bits. A probability
    /// of exactly 0.5 decodes to bit 0 (strict `> 0.5` rule).
    pub fn extract(&self, embedded: &EmbeddedSequence) -> Result<(Vec<f64>, BitMessage)> {
        if embedded.vectors.rows == 0 {
            return Err(Error::EmptyInput("embedded sequence"));
        }
        if embedded.vectors.cols != self.config.ext_width {
            return Err(Error::WidthMismatch { left: embedded.vectors.cols, right: self.config.ext_width });
        }
        let mut g = Graph::new();
        let node = g.input(embedded.vectors.clone());
        let out = self.build_extract(&mut g, node);
        let probs = g.value(out).data.clone();
        let bits = probs.iter().map(|&p| (p > 0.5) as u8).collect();
        Ok((probs, BitMessage { bits }))
    }

    /// Full clean-path forward: `encode -> fuse -> decode` on a masked
    /// sequence.
    pub fn watermarked_distribution(
        &self,
        masked: &TokenSequence,
        message: &BitMessage,
    ) -> Result<DistributionSequence> {
        if message.len() != self.config.msg_len {
            return Err(Error::MessageLengthMismatch {
                got: message.len(),
                expected: self.config.msg_len,
            });
        }
        if masked.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        for &id in &masked.ids {
            if id >= self.config.vocab_size {
                return Err(Error::InvalidTokenId { id, vocab_size: self.config.vocab_size });
            }
        }
        let mut g = Graph::new();
        let enc = self.build_encode(&mut g, &masked.ids);
        let msg = self.build_embed_message(&mut g, message);
        let fused = self.build_fuse(&mut g, enc, msg);
        let out = self.build_decode(&mut g, fused);
        Ok(DistributionSequence { rows: g.value(out).clone() })
    }

    /// Extraction from a finished token sequence: one-hot rows through the
    /// mapper and extractor.
    pub fn extract_from_tokens(&self, seq: &TokenSequence) -> Result<(Vec<f64>, BitMessage)> {
        if seq.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        let one_hot = DistributionSequence::one_hot(seq, self.config.vocab_size)?;
        let embedded = self.map_embedding(&one_hot)?;
        self.extract(&embedded)
    }
}

/// Position-wise addition of a message latent to every text latent.
pub fn fuse(text: &LatentSequence, msg_latent: &[f64]) -> Result<LatentSequence> {
    if text.vectors.cols != msg_latent.len() {
        return Err(Error::WidthMismatch { left: text.vectors.cols, right: msg_latent.len() });
    }
    let mut out = text.vectors.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        for (j, &m) in msg_latent.iter().enumerate() {
            row[j] += m;
        }
    }
    Ok(LatentSequence { vectors: out })
}

/// Gumbel-Softmax with explicit noise: every row becomes
/// `softmax((ln(max(S, eps)) + g) / tau)`.
pub fn gumbel_softmax_with_noise(
    dist: &DistributionSequence,
    tau: f64,
    noise: &Array,
) -> Result<DistributionSequence> {
    if tau <= 0.0 {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let s = &dist.rows;
    if (noise.rows, noise.cols) != (s.rows, s.cols) {
        return Err(Error::LengthMismatch { left: noise.rows, right: s.rows });
    }
    let mut out = Array::zeros(s.rows, s.cols);
    for r in 0..s.rows {
        let src = s.row(r);
        let nz = noise.row(r);
        let dst = out.row_mut(r);
        let mut max = f64::NEG_INFINITY;
        for j in 0..src.len() {
            dst[j] = (src[j].max(LOG_EPS).ln() + nz[j]) / tau;
            max = max.max(dst[j]);
        }
        let mut sum = 0.0;
        for v in dst.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in dst.iter_mut() {
            *v /= sum;
        }
    }
    Ok(DistributionSequence { rows: out })
}

/// Gumbel-Softmax with freshly sampled Gumbel(0,1) noise.
pub fn gumbel_softmax(
    dist: &DistributionSequence,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<DistributionSequence> {
    if tau <= 0.0 {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let noise = crate::tensor::gumbel_noise(dist.rows.rows, dist.rows.cols, rng);
    gumbel_softmax_with_noise(dist, tau, &noise)
}

/// A reproducible transform plan: which rows survive, which are replaced,
/// and which one-hot rows are inserted.
#[derive(Debug, Clone)]
pub struct TransformPlan {
    pub plan: Vec<RowSrc>,
    pub fixed: Array,
}

/// Draws a transform plan. Drop removes each row with probability `rate`
/// (always retaining at least one row); add inserts a uniformly random
/// one-hot row after each position with probability `rate`; replace
/// substitutes each row with a random one-hot row with probability `rate`.
pub fn transform_plan(
    n_rows: usize,
    vocab_size: usize,
    kind: TransformKind,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<TransformPlan> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("transform rate {rate} out of range")));
    }
    if n_rows == 0 {
        return Err(Error::EmptyInput("distribution sequence"));
    }
    let mut plan = Vec::with_capacity(n_rows + n_rows / 4);
    let mut fixed_ids = Vec::new();
    match kind {
        TransformKind::Drop => {
            for i in 0..n_rows {
                if rng.random::<f64>() >= rate {
                    plan.push(RowSrc::From(i));
                }
            }
            if plan.is_empty() {
                plan.push(RowSrc::From(0));
            }
        }
        TransformKind::Add => {
            for i in 0..n_rows {
                plan.push(RowSrc::From(i));
                if rng.random::<f64>() < rate {
                    plan.push(RowSrc::Fixed(fixed_ids.len()));
                    fixed_ids.push(rng.random_range(0..vocab_size));
                }
            }
        }
        TransformKind::Replace => {
            for i in 0..n_rows {
                if rng.random::<f64>() < rate {
                    plan.push(RowSrc::Fixed(fixed_ids.len()));
                    fixed_ids.push(rng.random_range(0..vocab_size));
                } else {
                    plan.push(RowSrc::From(i));
                }
            }
        }
    }
    let fixed = Array::one_hot(&fixed_ids, vocab_size);
    Ok(TransformPlan { plan, fixed })
}

/// Applies a plan to a distribution sequence (array form).
pub fn apply_transform_plan(dist: &DistributionSequence, plan: &TransformPlan) -> DistributionSequence {
    let cols = dist.rows.cols;
    let mut out = Array::zeros(plan.plan.len(), cols);
    for (i, src) in plan.plan.iter().enumerate() {
        match *src {
            RowSrc::From(r) => out.row_mut(i).copy_from_slice(dist.rows.row(r)),
            RowSrc::Fixed(r) => out.row_mut(i).copy_from_slice(plan.fixed.row(r)),
        }
    }
    DistributionSequence { rows: out }
}

/// Random drop/add/replace over distribution rows.
pub fn transform_distribution(
    dist: &DistributionSequence,
    kind: TransformKind,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<DistributionSequence> {
    let plan = transform_plan(dist.rows.rows, dist.rows.cols, kind, rate, rng)?;
    Ok(apply_transform_plan(dist, &plan))
}
