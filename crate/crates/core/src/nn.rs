//! Transformer building blocks over the autodiff graph.
//!
//! Pre-norm blocks: `x + attn(ln1(x))` then `x + ff(ln2(x))`, multi-head
//! scaled dot-product attention, GELU feed-forward, sinusoidal positional
//! encoding. Parameters are registered once in a [`ParamSet`]; blocks apply
//! themselves to any [`Graph`].

use crate::tensor::{Array, Graph, NodeId, ParamId, ParamSet};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = ps.register(format!("{name}.w"), Array::xavier(fan_in, fan_out, rng));
        let b = ps.register(format!("{name}.b"), Array::zeros(1, fan_out));
        Linear { w, b }
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: NodeId) -> NodeId {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let xw = g.matmul(x, w);
        g.add_bias(xw, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn register(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        let gain = ps.register(format!("{name}.g"), Array::from_vec(1, width, vec![1.0; width]));
        let bias = ps.register(format!("{name}.b"), Array::zeros(1, width));
        LayerNorm { gain, bias }
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: NodeId) -> NodeId {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl Attention {
    pub fn register(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Self {
        assert!(width % heads == 0, "width must divide into heads");
        Attention {
            wq: Linear::register(ps, rng, &format!("{name}.q"), width, width),
            wk: Linear::register(ps, rng, &format!("{name}.k"), width, width),
            wv: Linear::register(ps, rng, &format!("{name}.v"), width, width),
            wo: Linear::register(ps, rng, &format!("{name}.o"), width, width),
            heads,
        }
    }

    /// Full (bidirectional) self-attention over the rows of `x`.
    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: NodeId) -> NodeId {
        let width = g.value(x).cols;
        let dh = width / self.heads;
        let q = self.wq.apply(g, ps, x);
        let k = self.wk.apply(g, ps, x);
        let v = self.wv.apply(g, ps, x);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_bt(qh, kh);
            let scaled = g.scale(scores, scale);
            let probs = g.softmax_rows(scaled);
            ctx.push(g.matmul(probs, vh));
        }
        let merged = g.concat_cols(&ctx);
        self.wo.apply(g, ps, merged)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    pub fn register(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
    ) -> Self {
        Block {
            ln1: LayerNorm::register(ps, &format!("{name}.ln1"), width),
            attn: Attention::register(ps, rng, &format!("{name}.attn"), width, heads),
            ln2: LayerNorm::register(ps, &format!("{name}.ln2"), width),
            ff1: Linear::register(ps, rng, &format!("{name}.ff1"), width, ff_width),
            ff2: Linear::register(ps, rng, &format!("{name}.ff2"), ff_width, width),
        }
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: NodeId) -> NodeId {
        let n1 = self.ln1.apply(g, ps, x);
        let a = self.attn.apply(g, ps, n1);
        let x = g.add(x, a);
        let n2 = self.ln2.apply(g, ps, x);
        let h = self.ff1.apply(g, ps, n2);
        let h = g.gelu(h);
        let h = self.ff2.apply(g, ps, h);
        g.add(x, h)
    }
}

/// Sinusoidal positional encoding, `len x width`.
pub fn positional_encoding(len: usize, width: usize) -> Array {
    let mut pe = Array::zeros(len, width);
    for pos in 0..len {
        for i in 0..width / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / width as f64);
            pe.set(pos, 2 * i, angle.sin());
            pe.set(pos, 2 * i + 1, angle.cos());
        }
        if width % 2 == 1 {
            let i = width / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / width as f64);
            pe.set(pos, width - 1, angle.sin());
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_preserves_shape_and_is_deterministic() {
        let mut ps = ParamSet::new();
        let mut rng = crate::rng::stream(3, &[1]);
        let block = Block::register(&mut ps, &mut rng, "b0", 8, 2, 16);

        let run = |x: Array| {
            let mut g = Graph::new();
            let xn = g.input(x);
            let y = block.apply(&mut g, &ps, xn);
            g.value(y).clone()
        };
        let x = Array::xavier(5, 8, &mut crate::rng::stream(4, &[2]));
        let y1 = run(x.clone());
        let y2 = run(x.clone());
        assert_eq!((y1.rows, y1.cols), (5, 8));
        assert_eq!(y1.data, y2.data);
    }

    #[test]
    fn attention_depends_on_token_order() {
        let mut ps = ParamSet::new();
        let mut rng = crate::rng::stream(5, &[1]);
        let attn = Attention::register(&mut ps, &mut rng, "a", 8, 2);
        let x = Array::xavier(4, 8, &mut crate::rng::stream(6, &[2]));
        let mut swapped = x.clone();
        for j in 0..8 {
            let tmp = swapped.at(0, j);
            swapped.set(0, j, swapped.at(1, j));
            swapped.set(1, j, tmp);
        }
        let run = |x: Array| {
            let mut g = Graph::new();
            let pe = positional_encoding(4, 8);
            let xn = g.input(x);
            let xp = g.add_const(xn, pe);
            let y = attn.apply(&mut g, &ps, xp);
            g.value(y).clone()
        };
        assert_ne!(run(x).data, run(swapped).data);
    }

    #[test]
    fn positional_encoding_rows_distinct() {
        let pe = positional_encoding(10, 6);
        for i in 0..10 {
            for j in (i + 1)..10 {
                assert_ne!(pe.row(i), pe.row(j));
            }
        }
    }
}
