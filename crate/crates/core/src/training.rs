//! Losses, the end-to-end training loop, and training diagnostics.
//!
//! Each batch: fresh Bernoulli(0.5) messages and masks per sample, one
//! forward through encode -> fuse -> decode, the Gumbel-Softmax
//! reparameterization, a clean extraction and a transformed extraction
//! (one transform kind drawn per batch from the configured mix), then the
//! combined loss and one decoupled-weight-decay Adam step. Every random
//! draw comes from a stream derived from the seed and the (epoch, batch,
//! sample) path, so training is bit-reproducible for any thread count.

use crate::corpus::{sample_mask, tokenize, Corpus, TokenSequence, Vocabulary};
use crate::error::Error;
use crate::tensor::{gumbel_noise, Array, Gradients, Graph, ParamSet};
use crate::wm_model::{
    transform_plan, BitMessage, DistributionSequence, TransformKind, WatermarkModel,
};
use crate::Result;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

const TAG_SHUFFLE: u64 = 0x01;
const TAG_SAMPLE: u64 = 0x02;
const TAG_KIND: u64 = 0x03;
const TAG_EVAL: u64 = 0x04;

/// Held-out evaluation is capped to keep per-epoch cost bounded.
const EVAL_CAP: usize = 256;

/// Training hyperparameters. Loaded from flat JSON; unknown keys rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub gumbel_tau: f64,
    pub mask_pct: f64,
    pub w_w: f64,
    pub w_t: f64,
    pub w_1: f64,
    pub w_2: f64,
    /// Probabilities of drawing [replace, drop, add] as the batch transform.
    pub transform_mix: [f64; 3],
    /// Per-row rate passed to the drawn transform.
    pub transform_rate: f64,
    pub max_token_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 16,
            learning_rate: 3e-5,
            optimizer: "adamw".to_string(),
            gumbel_tau: 0.3,
            mask_pct: 0.5,
            w_w: 0.7,
            w_t: 0.3,
            w_1: 0.5,
            w_2: 0.5,
            transform_mix: [0.33, 0.33, 0.34],
            transform_rate: 0.06,
            max_token_size: 80,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push("learning_rate must be finite and non-negative".into());
        }
        if self.optimizer != "adamw" {
            problems.push(format!("unknown optimizer {:?}", self.optimizer));
        }
        if self.gumbel_tau <= 0.0 {
            problems.push("gumbel_tau must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mask_pct) {
            problems.push("mask_pct out of [0,1]".into());
        }
        for (name, v) in [("w_w", self.w_w), ("w_t", self.w_t), ("w_1", self.w_1), ("w_2", self.w_2)] {
            if v < 0.0 || !v.is_finite() {
                problems.push(format!("{name} must be finite and non-negative"));
            }
        }
        if self.w_w + self.w_t <= 0.0 {
            problems.push("w_w + w_t must be strictly positive".into());
        }
        if self.w_1 + self.w_2 <= 0.0 {
            problems.push("w_1 + w_2 must be strictly positive".into());
        }
        let mix_sum: f64 = self.transform_mix.iter().sum();
        if self.transform_mix.iter().any(|&p| p < 0.0) || (mix_sum - 1.0).abs() > 1e-6 {
            problems.push("transform_mix must be non-negative and sum to 1".into());
        }
        if !(0.0..1.0).contains(&self.transform_rate) {
            problems.push("transform_rate out of [0,1)".into());
        }
        if self.max_token_size == 0 {
            problems.push("max_token_size must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-epoch loss trace entry.
#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub semantic_loss: f64,
    pub message_loss: f64,
    pub total_loss: f64,
    pub heldout_wer: Option<f64>,
}

/// Mean cross entropy between the original tokens and the watermarked
/// distribution: `-(1/|T|) sum_i ln S[i, T_i]`.
pub fn semantic_loss(original: &TokenSequence, dist: &DistributionSequence) -> Result<f64> {
    if original.len() != dist.len() {
        return Err(Error::LengthMismatch { left: original.len(), right: dist.len() });
    }
    if original.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    let mut sum = 0.0;
    for (i, &t) in original.ids.iter().enumerate() {
        if t >= dist.rows.cols {
            return Err(Error::InvalidTokenId { id: t, vocab_size: dist.rows.cols });
        }
        sum -= dist.rows.at(i, t).max(crate::tensor::LOG_EPS).ln();
    }
    Ok(sum / original.len() as f64)
}

/// L1 recovery loss between the message and the clean / transformed
/// extraction probabilities: `w_w * sum|M - M'| + w_t * sum|M - M_t'|`.
pub fn message_loss(
    message: &BitMessage,
    clean_probs: &[f64],
    transformed_probs: &[f64],
    w_w: f64,
    w_t: f64,
) -> Result<f64> {
    if clean_probs.len() != message.len() {
        return Err(Error::LengthMismatch { left: clean_probs.len(), right: message.len() });
    }
    if transformed_probs.len() != message.len() {
        return Err(Error::LengthMismatch { left: transformed_probs.len(), right: message.len() });
    }
    let l1 = |probs: &[f64]| -> f64 {
        probs
            .iter()
            .zip(&message.bits)
            .map(|(&p, &b)| (b as f64 - p).abs())
            .sum()
    };
    Ok(w_w * l1(clean_probs) + w_t * l1(transformed_probs))
}

/// Weighted objective: `w_1 * L_S + w_2 * L_M`.
pub fn total_loss(semantic: f64, message: f64, w_1: f64, w_2: f64) -> f64 {
    w_1 * semantic + w_2 * message
}

/// Decoupled-weight-decay Adam.
struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamW {
    fn new(lr: f64, params: &ParamSet) -> Self {
        let m = (0..params.len()).map(|i| {
            let a = params.get(i);
            Array::zeros(a.rows, a.cols)
        });
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            t: 0,
            m: m.clone().collect(),
            v: m.collect(),
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, grad) in grads.by_param.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.get_mut(i);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -=
                    self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.data[j]);
            }
        }
    }
}

/// One sample's forward/backward through the full training objective.
/// Fixed randomness comes in as explicit values so the same function serves
/// the optimizer, evaluation, and the finite-difference check.
struct SampleDraw {
    message: BitMessage,
    mask_bits: Vec<u8>,
    noise: Array,
    plan: crate::wm_model::TransformPlan,
}

fn draw_sample(
    model: &WatermarkModel,
    cfg: &TrainConfig,
    seq_len: usize,
    kind: TransformKind,
    rng: &mut impl Rng,
) -> Result<SampleDraw> {
    let message = BitMessage::random(model.config.msg_len, rng);
    let mask_bits = sample_mask(seq_len, cfg.mask_pct, rng)?.bits;
    let noise = gumbel_noise(seq_len, model.config.vocab_size, rng);
    let plan = transform_plan(seq_len, model.config.vocab_size, kind, cfg.transform_rate, rng)?;
    Ok(SampleDraw { message, mask_bits, noise, plan })
}

struct SampleOutcome {
    semantic: f64,
    message: f64,
    total: f64,
    grads: Option<Gradients>,
}

fn sample_pass(
    model: &WatermarkModel,
    cfg: &TrainConfig,
    seq: &TokenSequence,
    draw: &SampleDraw,
    want_grads: bool,
) -> Result<SampleOutcome> {
    let masked: Vec<usize> = seq
        .ids
        .iter()
        .zip(&draw.mask_bits)
        .map(|(&id, &b)| if b == 1 { id } else { crate::corpus::PAD_ID })
        .collect();
    let msg_row = Array::from_vec(
        1,
        draw.message.len(),
        draw.message.bits.iter().map(|&b| b as f64).collect(),
    );

    let mut g = Graph::new();
    let enc = model.build_encode(&mut g, &masked);
    let msg = model.build_embed_message(&mut g, &draw.message);
    let fused = model.build_fuse(&mut g, enc, msg);
    let dist = model.build_decode(&mut g, fused);
    let l_s = g.cross_entropy_rows(dist, &seq.ids);
    let sharp = model.build_gumbel(&mut g, dist, cfg.gumbel_tau, draw.noise.clone());

    let emb = model.build_map_embedding(&mut g, sharp);
    let clean_probs = model.build_extract(&mut g, emb);
    let l1_clean = g.l1_to_const(clean_probs, msg_row.clone());

    let transformed = g.compose_rows(sharp, &draw.plan.plan, draw.plan.fixed.clone());
    let emb_t = model.build_map_embedding(&mut g, transformed);
    let t_probs = model.build_extract(&mut g, emb_t);
    let l1_t = g.l1_to_const(t_probs, msg_row);

    let l_m = g.weighted_sum(&[(l1_clean, cfg.w_w), (l1_t, cfg.w_t)]);
    let total = g.weighted_sum(&[(l_s, cfg.w_1), (l_m, cfg.w_2)]);

    let outcome = SampleOutcome {
        semantic: g.value(l_s).item(),
        message: g.value(l_m).item(),
        total: g.value(total).item(),
        grads: None,
    };
    if !outcome.total.is_finite() {
        return Ok(outcome);
    }
    if want_grads {
        let grads = g.backward(total, model.n_params());
        return Ok(SampleOutcome { grads: Some(grads), ..outcome });
    }
    Ok(outcome)
}

/// Clean-path extraction accuracy over (up to `cap`) held-out segments.
pub fn heldout_wer(
    model: &WatermarkModel,
    corpus: &Corpus,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    epoch: usize,
    cap: Option<usize>,
) -> Result<Option<f64>> {
    let cap = cap.unwrap_or(usize::MAX);
    let mut bits_total = 0usize;
    let mut bits_matched = 0usize;
    for (idx, text) in corpus.test_texts().enumerate() {
        if idx >= cap {
            break;
        }
        let seq = tokenize(text, vocab, cfg.max_token_size);
        if seq.is_empty() {
            continue;
        }
        let mut rng = crate::rng::stream(cfg.seed, &[TAG_EVAL, epoch as u64, idx as u64]);
        let message = BitMessage::random(model.config.msg_len, &mut rng);
        let mask = sample_mask(seq.len(), cfg.mask_pct, &mut rng)?;
        let masked = mask.apply(&seq)?;
        let dist = model.watermarked_distribution(&masked, &message)?;
        let sharp = crate::wm_model::gumbel_softmax(&dist, cfg.gumbel_tau, &mut rng)?;
        let emb = model.map_embedding(&sharp)?;
        let (_, decoded) = model.extract(&emb)?;
        bits_total += message.len();
        bits_matched += decoded.bits.iter().zip(&message.bits).filter(|(a, b)| a == b).count();
    }
    if bits_total == 0 {
        return Ok(None);
    }
    Ok(Some(bits_matched as f64 / bits_total as f64))
}

/// Draws the batch transform kind from the configured mix.
fn draw_kind(mix: &[f64; 3], rng: &mut impl Rng) -> TransformKind {
    let r: f64 = rng.random();
    if r < mix[0] {
        TransformKind::Replace
    } else if r < mix[0] + mix[1] {
        TransformKind::Drop
    } else {
        TransformKind::Add
    }
}

/// End-to-end training. Returns the trained model and the per-epoch trace.
pub fn train(
    mut model: WatermarkModel,
    corpus: &Corpus,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<(WatermarkModel, Vec<TrainRecord>)> {
    cfg.validate()?;
    if vocab.size() != model.config.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "vocabulary size {} does not match model vocab_size {}",
            vocab.size(),
            model.config.vocab_size
        )));
    }
    let sequences: Vec<TokenSequence> = corpus
        .train_texts()
        .map(|t| tokenize(t, vocab, cfg.max_token_size))
        .filter(|s| !s.is_empty())
        .collect();
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut optimizer = AdamW::new(cfg.learning_rate, model.params());
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        let mut shuffle_rng = crate::rng::stream(cfg.seed, &[TAG_SHUFFLE, epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_semantic = 0.0;
        let mut epoch_message = 0.0;
        let mut epoch_total = 0.0;
        let mut n_batches = 0usize;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut kind_rng =
                crate::rng::stream(cfg.seed, &[TAG_KIND, epoch as u64, batch_idx as u64]);
            let kind = draw_kind(&cfg.transform_mix, &mut kind_rng);

            let draws: Vec<(usize, SampleDraw)> = batch
                .iter()
                .enumerate()
                .map(|(i, &seq_idx)| {
                    let mut rng = crate::rng::stream(
                        cfg.seed,
                        &[TAG_SAMPLE, epoch as u64, batch_idx as u64, i as u64],
                    );
                    let draw = draw_sample(&model, cfg, sequences[seq_idx].len(), kind, &mut rng)?;
                    Ok((seq_idx, draw))
                })
                .collect::<Result<_>>()?;

            let outcomes: Vec<Result<SampleOutcome>> = draws
                .par_iter()
                .map(|(seq_idx, draw)| sample_pass(&model, cfg, &sequences[*seq_idx], draw, true))
                .collect();

            let mut batch_grads = Gradients::zeros(model.n_params());
            let mut batch_semantic = 0.0;
            let mut batch_message = 0.0;
            let mut batch_total = 0.0;
            let n = draws.len();
            for outcome in outcomes {
                let outcome = outcome?;
                if !outcome.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_idx,
                        semantic_loss: outcome.semantic,
                        message_loss: outcome.message,
                    });
                }
                batch_semantic += outcome.semantic;
                batch_message += outcome.message;
                batch_total += outcome.total;
                batch_grads.accumulate(outcome.grads.as_ref().expect("gradients requested"));
            }
            batch_grads.scale(1.0 / n as f64);
            optimizer.step(model.params_mut(), &batch_grads);
            model.train_steps += 1;

            epoch_semantic += batch_semantic / n as f64;
            epoch_message += batch_message / n as f64;
            epoch_total += batch_total / n as f64;
            n_batches += 1;
        }

        let wer = heldout_wer(&model, corpus, vocab, cfg, epoch, Some(EVAL_CAP))?;
        records.push(TrainRecord {
            epoch,
            semantic_loss: epoch_semantic / n_batches as f64,
            message_loss: epoch_message / n_batches as f64,
            total_loss: epoch_total / n_batches as f64,
            heldout_wer: wer,
        });
    }
    Ok((model, records))
}

/// Writes the loss trace CSV: `epoch,L_S,L_M,total,heldout_wer`.
pub fn write_loss_trace(records: &[TrainRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "epoch,L_S,L_M,total,heldout_wer")?;
    for r in records {
        let wer = r.heldout_wer.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{}",
            r.epoch, r.semantic_loss, r.message_loss, r.total_loss, wer
        )?;
    }
    Ok(())
}

/// Result of the analytic-vs-finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients of the full training objective against
/// central finite differences over every parameter entry, with the noise,
/// mask, message, and transform fixed.
pub fn finite_difference_check(
    model: &WatermarkModel,
    cfg: &TrainConfig,
    seq: &TokenSequence,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = crate::rng::stream(seed, &[0xfd]);
    let kind = draw_kind(&cfg.transform_mix, &mut rng);
    let draw = draw_sample(model, cfg, seq.len(), kind, &mut rng)?;

    let analytic = sample_pass(model, cfg, seq, &draw, true)?
        .grads
        .expect("gradients requested");

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut probe = model.clone();
    for pid in 0..model.n_params() {
        let n_entries = model.params().get(pid).data.len();
        for j in 0..n_entries {
            let orig = model.params().get(pid).data[j];
            probe.params_mut().get_mut(pid).data[j] = orig + h;
            let plus = sample_pass(&probe, cfg, seq, &draw, false)?.total;
            probe.params_mut().get_mut(pid).data[j] = orig - h;
            let minus = sample_pass(&probe, cfg, seq, &draw, false)?.total;
            probe.params_mut().get_mut(pid).data[j] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let an = analytic.by_param[pid].as_ref().map(|g| g.data[j]).unwrap_or(0.0);
            let scale = an.abs().max(fd.abs());
            if scale > 1e-7 {
                max_rel = max_rel.max((an - fd).abs() / scale);
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked })
}
