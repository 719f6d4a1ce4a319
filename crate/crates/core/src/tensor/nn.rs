//! Layers built from tape operations. Each layer only holds parameter ids;
//! values live in a [`ParamStore`] and are bound per forward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Init, ParamId, ParamStore, Tape, Var};
use crate::error::{dim_err, Result};
use crate::Scalar;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// State for one forward pass: the tape being recorded, the parameters it
/// reads, the train/eval flag and the dropout RNG.
pub struct Ctx<'s, T> {
    pub tape: Tape<T>,
    pub store: &'s ParamStore<T>,
    pub training: bool,
    pub rng: ChaCha8Rng,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, training: bool, rng: ChaCha8Rng) -> Self {
        Self { tape: Tape::new(), store, training, rng }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let training = self.training;
        self.tape.dropout(x, rate, training, &mut self.rng)
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }
}

/// `y = x W + b` with `W[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), &[d_in, d_out], Init::LeCun, rng);
        let b = store.add(format!("{name}.b"), &[d_out], Init::Zeros, rng);
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        let h = cx.tape.matmul(x, w)?;
        cx.tape.add_row(h, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.g"), &[d], Init::Ones, rng);
        let bias = store.add(format!("{name}.b"), &[d], Init::Zeros, rng);
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gain), cx.p(self.bias));
        cx.tape.layernorm(x, g, b, T::lit(LAYERNORM_EPS))
    }
}

/// Linear, GELU, dropout, Linear.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        d_ff: usize,
        dropout: f64,
    ) -> Self {
        let up = Linear::new(store, rng, &format!("{name}.up"), d, d_ff);
        let down = Linear::new(store, rng, &format!("{name}.down"), d_ff, d);
        Self { up, down, dropout }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(cx, x)?;
        let h = cx.tape.gelu(h);
        let h = cx.dropout(h, self.dropout)?;
        self.down.forward(cx, h)
    }
}

/// Scaled dot-product attention with `heads` heads. Queries come from one
/// sequence, keys and values from another (the same one for self-attention).
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "{heads} heads do not divide width {d}");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            heads,
        }
    }

    /// Returns the output and the per-head attention matrices
    /// `[rows(query), rows(context)]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, query: Var, context: Var) -> Result<(Var, Vec<Var>)> {
        let nq = cx.tape.value(query).dims2()?.0;
        let nk = cx.tape.value(context).dims2()?.0;
        if nq == 0 || nk == 0 {
            return Err(crate::Error::Contract("attention over an empty token set".into()));
        }
        let d = self.q.d_out;
        let dh = d / self.heads;
        let q = self.q.forward(cx, query)?;
        let k = self.k.forward(cx, context)?;
        let v = self.v.forward(cx, context)?;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = cx.tape.slice_cols(q, h * dh, dh)?;
            let kh = cx.tape.slice_cols(k, h * dh, dh)?;
            let vh = cx.tape.slice_cols(v, h * dh, dh)?;
            let kt = cx.tape.transpose(kh)?;
            let s = cx.tape.matmul(qh, kt)?;
            let s = cx.tape.scale(s, scale);
            let a = cx.tape.softmax(s)?;
            weights.push(a);
            outs.push(cx.tape.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { cx.tape.concat_cols(&outs)? };
        Ok((self.o.forward(cx, cat)?, weights))
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads),
            ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, d_ff, dropout),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let h = self.ln1.forward(cx, x)?;
        let (a, w) = self.attn.forward(cx, h, h)?;
        let x = cx.tape.add(x, a)?;
        let h = self.ln2.forward(cx, x)?;
        let f = self.ff.forward(cx, h)?;
        Ok((cx.tape.add(x, f)?, w))
    }
}

/// Checks that `x` has `d` columns.
pub fn expect_width<T: Scalar>(cx: &Ctx<T>, x: Var, d: usize, what: &str) -> Result<()> {
    let got = cx.tape.value(x).dims2()?.1;
    if got != d {
        return Err(dim_err(format!("{what}: expected width {d}, got {got}")));
    }
    Ok(())
}
