//! Post-norm transformer encoder layer shared by the word encoder and the
//! chunk-level aggregator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Var};
use crate::error::Result;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub hidden: usize,
    pub n_heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub ff_inner: usize,
}

/// Inverted dropout driven by a seeded stream. `p == 0` is a no-op.
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, rng: ChaCha8Rng) -> Self {
        Dropout { p, rng }
    }

    pub fn apply<T: Element>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let shape = tape.value(x).shape().to_vec();
        let keep = T::from_f64(1.0 / (1.0 - self.p));
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if self.rng.gen::<f64>() < self.p { T::zero() } else { keep })
            .collect();
        let mask = tape.constant(Tensor::new(shape, data)?);
        tape.mul(x, mask)
    }
}

pub(crate) fn maybe_dropout<T: Element>(
    tape: &mut Tape<'_, T>,
    dropout: &mut Option<&mut Dropout>,
    x: Var,
) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

pub fn init_layer<T: Element>(
    store: &mut ParamStore<T>,
    prefix: &str,
    g: &LayerGeometry,
    init: &mut Init,
) -> Result<()> {
    let qk = g.n_heads * g.key_dim;
    let v = g.n_heads * g.value_dim;
    let h = g.hidden;
    store.insert(format!("{prefix}.attn.wq"), init.normal(&[h, qk]))?;
    store.insert(format!("{prefix}.attn.bq"), Tensor::zeros(&[1, qk]))?;
    store.insert(format!("{prefix}.attn.wk"), init.normal(&[h, qk]))?;
    store.insert(format!("{prefix}.attn.wv"), init.normal(&[h, v]))?;
    store.insert(format!("{prefix}.attn.bv"), Tensor::zeros(&[1, v]))?;
    store.insert(format!("{prefix}.attn.wo"), init.normal(&[v, h]))?;
    store.insert(format!("{prefix}.attn.bo"), Tensor::zeros(&[1, h]))?;
    store.insert(format!("{prefix}.ln1.gain"), Tensor::full(&[1, h], T::one()))?;
    store.insert(format!("{prefix}.ln1.bias"), Tensor::zeros(&[1, h]))?;
    store.insert(format!("{prefix}.ff.w1"), init.normal(&[h, g.ff_inner]))?;
    store.insert(format!("{prefix}.ff.b1"), Tensor::zeros(&[1, g.ff_inner]))?;
    store.insert(format!("{prefix}.ff.w2"), init.normal(&[g.ff_inner, h]))?;
    store.insert(format!("{prefix}.ff.b2"), Tensor::zeros(&[1, h]))?;
    store.insert(format!("{prefix}.ln2.gain"), Tensor::full(&[1, h], T::one()))?;
    store.insert(format!("{prefix}.ln2.bias"), Tensor::zeros(&[1, h]))?;
    Ok(())
}

pub(crate) fn linear<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    x: Var,
    w: &str,
    b: &str,
) -> Result<Var> {
    let y = tape.matmul(x, p.var(w)?)?;
    tape.add_bias(y, p.var(b)?)
}

/// Multi-head self-attention; keys with `key_mask[j] == false` receive zero
/// attention weight.
pub fn self_attention<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    prefix: &str,
    g: &LayerGeometry,
    x: Var,
    key_mask: &[bool],
) -> Result<Var> {
    let q = linear(tape, p, x, &format!("{prefix}.attn.wq"), &format!("{prefix}.attn.bq"))?;
    // No key bias: it adds a per-query constant to every score, which the
    // softmax cancels.
    let k = tape.matmul(x, p.var(&format!("{prefix}.attn.wk"))?)?;
    let v = linear(tape, p, x, &format!("{prefix}.attn.wv"), &format!("{prefix}.attn.bv"))?;
    let scale = T::from_f64(1.0 / (g.key_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(g.n_heads);
    for h in 0..g.n_heads {
        let qh = tape.slice(q, Axis::Cols, h * g.key_dim, (h + 1) * g.key_dim)?;
        let kh = tape.slice(k, Axis::Cols, h * g.key_dim, (h + 1) * g.key_dim)?;
        let vh = tape.slice(v, Axis::Cols, h * g.value_dim, (h + 1) * g.value_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.masked_softmax(scores, Some(key_mask))?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads, Axis::Cols)?
    };
    linear(tape, p, cat, &format!("{prefix}.attn.wo"), &format!("{prefix}.attn.bo"))
}

/// attention → residual → layer norm → feed-forward (gelu) → residual → layer norm.
pub fn encoder_layer<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    prefix: &str,
    g: &LayerGeometry,
    x: Var,
    key_mask: &[bool],
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let a = self_attention(tape, p, prefix, g, x, key_mask)?;
    let a = maybe_dropout(tape, &mut dropout, a)?;
    let r = tape.add(x, a)?;
    let x = tape.layer_norm(r, p.var(&format!("{prefix}.ln1.gain"))?, p.var(&format!("{prefix}.ln1.bias"))?)?;
    let f = linear(tape, p, x, &format!("{prefix}.ff.w1"), &format!("{prefix}.ff.b1"))?;
    let f = tape.gelu(f)?;
    let f = linear(tape, p, f, &format!("{prefix}.ff.w2"), &format!("{prefix}.ff.b2"))?;
    let f = maybe_dropout(tape, &mut dropout, f)?;
    let r = tape.add(x, f)?;
    tape.layer_norm(r, p.var(&format!("{prefix}.ln2.gain"))?, p.var(&format!("{prefix}.ln2.bias"))?)
}
