//! Transformer building blocks on top of [`crate::autograd`].
//!
//! Layers hold parameter ids into a [`ParamSet`]; the forward functions take
//! the graph, the set and a [`Forward`] mode that decides whether dropout is
//! active.

use ndarray::Array2;
use rand::{Rng, RngCore};

use crate::autograd::{Graph, ParamSet, Var};

/// Forward-pass mode: inference, or training with dropout drawn from `rng`.
pub struct Forward<'r> {
    dropout: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> Forward<'r> {
    pub fn inference() -> Self {
        Forward {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: &'r mut dyn RngCore) -> Self {
        Forward {
            dropout,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout; the identity in inference mode or when p = 0.
    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        let p = self.dropout;
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let shape = g.value(x).raw_dim();
        let mask = Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < p { 0.0 } else { keep });
        g.mul_const(x, mask)
    }
}

/// Uniform init with standard deviation `std`.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let a = std * 3f64.sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-a..a))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init_uniform(rng, fan_in, fan_out, (fan_in as f64).powf(-0.5)),
        );
        let b = bias.then(|| ps.add(format!("{name}.b"), Array2::zeros((1, fan_out))));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(ps, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: ps.add(format!("{name}.gamma"), Array2::ones((1, dim))),
            beta: ps.add(format!("{name}.beta"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Var {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(dim.is_multiple_of(heads), "model width must divide into heads");
        MultiHeadAttention {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    /// Attention from `queries` over `memory`; `mask` is added to the raw
    /// scores (use `-inf` to block a position).
    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, queries: Var, memory: Var, mask: Option<&Array2<f64>>) -> Var {
        let q = self.q.forward(g, ps, queries);
        let k = self.k.forward(g, ps, memory);
        let v = self.v.forward(g, ps, memory);
        let width = self.dim / self.heads;
        let scale = (width as f64).powf(-0.5);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * width, width);
            let kh = g.slice_cols(k, h * width, width);
            let vh = g.slice_cols(v, h * width, width);
            let scores = g.matmul_t(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add_const(scores, m);
            }
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let merged = g.concat_cols(&outs);
        self.o.forward(g, ps, merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            up: Linear::new(ps, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(ps, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Var {
        let h = self.up.forward(g, ps, x);
        let h = g.gelu(h);
        self.down.forward(g, ps, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        EncoderLayer {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng),
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, fwd: &mut Forward, x: Var) -> Var {
        let h = self.ln_attn.forward(g, ps, x);
        let a = self.attn.forward(g, ps, h, h, None);
        let a = fwd.dropout(g, a);
        let x = g.add(x, a);
        let h = self.ln_ff.forward(g, ps, x);
        let f = self.ff.forward(g, ps, h);
        let f = fwd.dropout(g, f);
        g.add(x, f)
    }
}

/// Pre-norm causal self-attention, cross-attention and feed-forward block.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        DecoderLayer {
            ln_self: LayerNorm::new(ps, &format!("{name}.ln_self"), dim),
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), dim, heads, rng),
            ln_cross: LayerNorm::new(ps, &format!("{name}.ln_cross"), dim),
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), dim, heads, rng),
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, hidden, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        fwd: &mut Forward,
        x: Var,
        memory: Var,
        causal: &Array2<f64>,
    ) -> Var {
        let h = self.ln_self.forward(g, ps, x);
        let a = self.self_attn.forward(g, ps, h, h, Some(causal));
        let a = fwd.dropout(g, a);
        let x = g.add(x, a);
        let h = self.ln_cross.forward(g, ps, x);
        let c = self.cross_attn.forward(g, ps, h, memory, None);
        let c = fwd.dropout(g, c);
        let x = g.add(x, c);
        let h = self.ln_ff.forward(g, ps, x);
        let f = self.ff.forward(g, ps, h);
        let f = fwd.dropout(g, f);
        g.add(x, f)
    }
}

/// `-inf` above the diagonal.
pub fn causal_mask(len: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, len), |(i, j)| if j > i { f64::NEG_INFINITY } else { 0.0 })
}

/// Fixed sinusoidal position table, `len x dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Scaled token embedding plus sinusoidal positions.
pub fn embed_tokens(g: &mut Graph, ps: &ParamSet, table: usize, ids: &[usize]) -> Var {
    let dim = ps.get(table).ncols();
    let t = g.param(ps, table);
    let e = g.gather(t, ids);
    let e = g.scale(e, (dim as f64).sqrt());
    g.add_const(e, &positional_encoding(ids.len(), dim))
}
