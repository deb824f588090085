//! Neural layers built on the autodiff tape: linear maps, MLPs, a GRU,
//! multi-head attention and layer norm. Layers own [`PId`] handles into a
//! shared [`ParamStore`]; forward passes bind them onto a tape.

use crate::autodiff::{Tape, Var};
use crate::params::{fan_in_init, zeros, PId, ParamStore, TapeBind};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: PId,
    pub b: PId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), fan_in_init(rng, &[in_dim, out_dim], in_dim));
        let b = store.add(&format!("{name}.b"), zeros(&[out_dim]));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// Zero-initialized variant (used for the coupling head and FiLM so the
    /// flow starts from a documented identity-like state).
    pub fn new_zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(&format!("{name}.w"), zeros(&[in_dim, out_dim]));
        let b = store.add(&format!("{name}.b"), zeros(&[out_dim]));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// Applies to the last axis of `x` (any leading shape).
    pub fn forward(&self, t: &Tape, bind: &mut TapeBind, store: &ParamStore, x: Var) -> Var {
        let shape = t.shape(x);
        let rows: usize = shape[..shape.len() - 1].iter().product();
        assert_eq!(shape[shape.len() - 1], self.in_dim, "linear input dim");
        let flat = t.reshape(x, &[rows, self.in_dim]);
        let w = bind.param(t, store, self.w);
        let b = bind.param(t, store, self.b);
        let y = t.add(t.matmul(flat, w), b);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        t.reshape(y, &out_shape)
    }
}

/// Two-layer perceptron with tanh in between: `in -> hidden -> out`.
#[derive(Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), in_dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out_dim),
        }
    }

    pub fn forward(&self, t: &Tape, bind: &mut TapeBind, store: &ParamStore, x: Var) -> Var {
        let h = t.isru(self.fc1.forward(t, bind, store, x));
        self.fc2.forward(t, bind, store, h)
    }
}

/// Layer norm over the last axis with learned gain and bias.
#[derive(Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: PId,
    pub bias: PId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(&format!("{name}.gain"), ndarray::ArrayD::ones(ndarray::IxDyn(&[dim])));
        let bias = store.add(&format!("{name}.bias"), zeros(&[dim]));
        LayerNorm {
            gain,
            bias,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &Tape, bind: &mut TapeBind, store: &ParamStore, x: Var) -> Var {
        let n = t.layer_norm_last(x, self.eps);
        let g = bind.param(t, store, self.gain);
        let b = bind.param(t, store, self.bias);
        t.add(t.mul(n, g), b)
    }
}

/// Single-layer GRU over a `[B, L, in] -> [B, L, hidden]` sequence.
///
/// Gate layout follows the (reset, update, candidate) convention with the
/// reset gate applied to the hidden contribution of the candidate.
#[derive(Clone, Serialize, Deserialize)]
pub struct Gru {
    pub wx: PId,
    pub wh: PId,
    pub bx: PId,
    pub bh: PId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        Gru {
            wx: store.add(&format!("{name}.wx"), fan_in_init(rng, &[in_dim, 3 * hidden], in_dim)),
            wh: store.add(&format!("{name}.wh"), fan_in_init(rng, &[hidden, 3 * hidden], hidden)),
            bx: store.add(&format!("{name}.bx"), zeros(&[3 * hidden])),
            bh: store.add(&format!("{name}.bh"), zeros(&[3 * hidden])),
            in_dim,
            hidden,
        }
    }

    pub fn forward(&self, t: &Tape, bind: &mut TapeBind, store: &ParamStore, x: Var) -> Var {
        let shape = t.shape(x);
        assert_eq!(shape.len(), 3, "gru expects [B, L, in]");
        let (b, l) = (shape[0], shape[1]);
        let h = self.hidden;
        let wx = bind.param(t, store, self.wx);
        let wh = bind.param(t, store, self.wh);
        let bx = bind.param(t, store, self.bx);
        let bh = bind.param(t, store, self.bh);
        let mut hidden = t.constant(zeros(&[b, h]));
        let mut outputs = Vec::with_capacity(l);
        for step in 0..l {
            let xt = t.reshape(t.slice(x, 1, step, step + 1), &[b, self.in_dim]);
            let gx = t.add(t.matmul(xt, wx), bx);
            let gh = t.add(t.matmul(hidden, wh), bh);
            let r = t.sigmoid(t.add(t.slice(gx, 1, 0, h), t.slice(gh, 1, 0, h)));
            let z = t.sigmoid(t.add(t.slice(gx, 1, h, 2 * h), t.slice(gh, 1, h, 2 * h)));
            let n = t.tanh(t.add(
                t.slice(gx, 1, 2 * h, 3 * h),
                t.mul(r, t.slice(gh, 1, 2 * h, 3 * h)),
            ));
            // h' = (1 - z) * n + z * h
            let one_minus_z = t.add_scalar(t.neg(z), 1.0);
            hidden = t.add(t.mul(one_minus_z, n), t.mul(z, hidden));
            outputs.push(t.reshape(hidden, &[b, 1, h]));
        }
        t.concat(&outputs, 1)
    }
}

/// Multi-head attention: queries `[B, Lq, d]` attend to keys/values
/// `[B, Lk, d]`. Returns `[B, Lq, d]`.
#[derive(Clone, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Self {
        assert!(d_model % heads == 0, "d_model must divide by heads");
        MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d_model, d_model),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d_model, d_model),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d_model, d_model),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d_model, d_model),
            heads,
            d_model,
        }
    }

    fn split_heads(&self, t: &Tape, x: Var, b: usize, l: usize) -> Var {
        let dh = self.d_model / self.heads;
        let x = t.reshape(x, &[b, l, self.heads, dh]);
        let x = t.permute(x, &[0, 2, 1, 3]);
        t.reshape(x, &[b * self.heads, l, dh])
    }

    pub fn forward(
        &self,
        t: &Tape,
        bind: &mut TapeBind,
        store: &ParamStore,
        queries: Var,
        memory: Var,
    ) -> Var {
        let qs = t.shape(queries);
        let ms = t.shape(memory);
        let (b, lq, lk) = (qs[0], qs[1], ms[1]);
        let dh = self.d_model / self.heads;
        let q = self.split_heads(t, self.wq.forward(t, bind, store, queries), b, lq);
        let k = self.split_heads(t, self.wk.forward(t, bind, store, memory), b, lk);
        let v = self.split_heads(t, self.wv.forward(t, bind, store, memory), b, lk);
        let kt = t.permute(k, &[0, 2, 1]);
        let scores = t.mul_scalar(t.bmm(q, kt), 1.0 / (dh as f64).sqrt());
        let attn = t.softmax_last(scores);
        let ctx = t.bmm(attn, v);
        let ctx = t.reshape(ctx, &[b, self.heads, lq, dh]);
        let ctx = t.permute(ctx, &[0, 2, 1, 3]);
        let ctx = t.reshape(ctx, &[b, lq, self.d_model]);
        self.wo.forward(t, bind, store, ctx)
    }
}

/// Pre-norm transformer encoder layer (self-attention + feed-forward).
#[derive(Clone, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d_model, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d_model, ffn_hidden),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), ffn_hidden, d_model),
        }
    }

    pub fn forward(&self, t: &Tape, bind: &mut TapeBind, store: &ParamStore, x: Var) -> Var {
        let n = self.ln1.forward(t, bind, store, x);
        let x = t.add(x, self.attn.forward(t, bind, store, n, n));
        let n = self.ln2.forward(t, bind, store, x);
        let h = t.isru(self.ff1.forward(t, bind, store, n));
        let ff = self.ff2.forward(t, bind, store, h);
        t.add(x, ff)
    }
}

/// Pre-norm cross-attention layer: queries attend to an encoded memory.
#[derive(Clone, Serialize, Deserialize)]
pub struct CrossAttentionLayer {
    pub ln_q: LayerNorm,
    pub ln_m: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl CrossAttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Self {
        CrossAttentionLayer {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d_model),
            ln_m: LayerNorm::new(store, &format!("{name}.ln_m"), d_model),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d_model, heads),
        }
    }

    pub fn forward(
        &self,
        t: &Tape,
        bind: &mut TapeBind,
        store: &ParamStore,
        queries: Var,
        memory: Var,
    ) -> Var {
        let q = self.ln_q.forward(t, bind, store, queries);
        let m = self.ln_m.forward(t, bind, store, memory);
        t.add(queries, self.attn.forward(t, bind, store, q, m))
    }
}
