//! Chunk-level encoders that fold a sequence of chunk vectors into one
//! document vector, plus the linear classifier head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Element, Tensor};
use crate::transformer::{encoder_layer, init_layer, Dropout, LayerGeometry};

pub const PREFIX: &str = "agg";
pub const CNN_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregatorKind {
    Transformer { use_positions: bool },
    Lstm,
    Cnn,
    Mean,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 5] = [
        AggregatorKind::Transformer { use_positions: false },
        AggregatorKind::Transformer { use_positions: true },
        AggregatorKind::Lstm,
        AggregatorKind::Cnn,
        AggregatorKind::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Transformer { use_positions: false } => "transformer",
            AggregatorKind::Transformer { use_positions: true } => "transformer-pos",
            AggregatorKind::Lstm => "lstm",
            AggregatorKind::Cnn => "cnn",
            AggregatorKind::Mean => "mean",
        }
    }
}

impl std::str::FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggregatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown aggregator {s:?}")))
    }
}

/// Geometry of the small transformer on top of the chunk sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkTransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Query/key width per head; values use `hidden / n_heads`.
    pub key_dim: usize,
    pub ff_inner: usize,
}

impl ChunkTransformerConfig {
    /// 2 layers and 8 heads with the feed-forward width scaled from
    /// 2048-at-768 to `hidden`. Falls back to fewer heads when 8 does not
    /// divide `hidden`.
    pub fn scaled(hidden: usize) -> Self {
        let n_heads = [8, 4, 2, 1].into_iter().find(|h| hidden % h == 0).unwrap_or(1);
        ChunkTransformerConfig {
            n_layers: 2,
            n_heads,
            key_dim: hidden / n_heads,
            ff_inner: ((hidden * 2048) as f64 / 768.0).round().max(1.0) as usize,
        }
    }

    pub fn geometry(&self, hidden: usize) -> Result<LayerGeometry> {
        if self.n_heads == 0 || hidden % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "chunk transformer: {} heads do not divide hidden {hidden}",
                self.n_heads
            )));
        }
        Ok(LayerGeometry {
            hidden,
            n_heads: self.n_heads,
            key_dim: self.key_dim,
            value_dim: hidden / self.n_heads,
            ff_inner: self.ff_inner,
        })
    }
}

pub fn init_params<T: Element>(
    kind: AggregatorKind,
    chunk_tf: &ChunkTransformerConfig,
    hidden: usize,
    max_chunks: usize,
    store: &mut ParamStore<T>,
    init: &mut Init,
) -> Result<()> {
    match kind {
        AggregatorKind::Transformer { use_positions } => {
            let g = chunk_tf.geometry(hidden)?;
            store.insert(format!("{PREFIX}.doc_token"), init.normal(&[1, hidden]))?;
            if use_positions {
                store.insert(format!("{PREFIX}.pos_emb"), init.normal(&[max_chunks + 1, hidden]))?;
            }
            for l in 0..chunk_tf.n_layers {
                init_layer(store, &format!("{PREFIX}.layer{l}"), &g, init)?;
            }
        }
        AggregatorKind::Lstm => {
            store.insert(format!("{PREFIX}.lstm.w_ih"), init.normal(&[hidden, 4 * hidden]))?;
            store.insert(format!("{PREFIX}.lstm.w_hh"), init.normal(&[hidden, 4 * hidden]))?;
            store.insert(format!("{PREFIX}.lstm.bias"), Tensor::zeros(&[1, 4 * hidden]))?;
        }
        AggregatorKind::Cnn => {
            store.insert(format!("{PREFIX}.cnn.weight"), init.normal(&[CNN_KERNEL, hidden, hidden]))?;
            store.insert(format!("{PREFIX}.cnn.bias"), Tensor::zeros(&[1, hidden]))?;
        }
        AggregatorKind::Mean => {}
    }
    Ok(())
}

fn require_real(kernel: &str, chunk_mask: &[bool]) -> Result<()> {
    if !chunk_mask.iter().any(|&m| m) {
        return Err(Error::invalid(format!("{kernel}: every chunk is masked")));
    }
    Ok(())
}

fn check_rows<T: Element>(tape: &Tape<'_, T>, kernel: &'static str, x: Var, mask: &[bool]) -> Result<()> {
    let shape = tape.value(x).shape();
    if shape.len() != 2 || shape[0] != mask.len() {
        return Err(Error::shape(kernel, shape, &[mask.len()]));
    }
    Ok(())
}

/// Prepends a learned document token, optionally adds chunk-position
/// embeddings, runs the chunk transformer and returns the output at the
/// document-token slot.
#[allow(clippy::too_many_arguments)]
pub fn transformer_aggregate<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &ChunkTransformerConfig,
    chunk_vecs: Var,
    chunk_mask: &[bool],
    use_positions: bool,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    check_rows(tape, "transformer_aggregate", chunk_vecs, chunk_mask)?;
    require_real("transformer_aggregate", chunk_mask)?;
    let hidden = tape.value(chunk_vecs).shape()[1];
    let g = cfg.geometry(hidden)?;
    let doc = p.var(&format!("{PREFIX}.doc_token"))?;
    let mut x = tape.concat(&[doc, chunk_vecs], Axis::Rows)?;
    if use_positions {
        let table = p.var(&format!("{PREFIX}.pos_emb"))?;
        let rows = chunk_mask.len() + 1;
        if rows > tape.value(table).shape()[0] {
            return Err(Error::invalid(format!("{} chunks exceed the position table", chunk_mask.len())));
        }
        let pos = tape.embedding(table, &(0..rows).collect::<Vec<_>>())?;
        x = tape.add(x, pos)?;
    }
    let mut key_mask = Vec::with_capacity(chunk_mask.len() + 1);
    key_mask.push(true);
    key_mask.extend_from_slice(chunk_mask);
    for l in 0..cfg.n_layers {
        x = encoder_layer(tape, p, &format!("{PREFIX}.layer{l}"), &g, x, &key_mask, dropout.as_deref_mut())?;
    }
    tape.slice(x, Axis::Rows, 0, 1)
}

/// Unidirectional single-layer LSTM over the mask-1 chunks; returns the
/// hidden state after the last of them. Gate order: input, forget, cell, output.
pub fn lstm_aggregate<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    chunk_vecs: Var,
    chunk_mask: &[bool],
) -> Result<Var> {
    check_rows(tape, "lstm_aggregate", chunk_vecs, chunk_mask)?;
    require_real("lstm_aggregate", chunk_mask)?;
    let hidden = tape.value(chunk_vecs).shape()[1];
    let w_ih = p.var(&format!("{PREFIX}.lstm.w_ih"))?;
    let w_hh = p.var(&format!("{PREFIX}.lstm.w_hh"))?;
    let bias = p.var(&format!("{PREFIX}.lstm.bias"))?;
    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, hidden]));
    for t in (0..chunk_mask.len()).filter(|&t| chunk_mask[t]) {
        let x_t = tape.slice(chunk_vecs, Axis::Rows, t, t + 1)?;
        let a = tape.matmul(x_t, w_ih)?;
        let b = tape.matmul(h, w_hh)?;
        let gates = tape.add(a, b)?;
        let gates = tape.add_bias(gates, bias)?;
        let gate = |tape: &mut Tape<'_, T>, k: usize| tape.slice(gates, Axis::Cols, k * hidden, (k + 1) * hidden);
        let i = gate(tape, 0)?;
        let i = tape.sigmoid(i)?;
        let f = gate(tape, 1)?;
        let f = tape.sigmoid(f)?;
        let g = gate(tape, 2)?;
        let g = tape.tanh(g)?;
        let o = gate(tape, 3)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        h = tape.mul(o, tc)?;
    }
    Ok(h)
}

/// Zeroes masked chunks, convolves along the chunk axis (kernel 3, zero
/// same-padding), applies relu and takes the max over mask-1 positions.
pub fn cnn_aggregate<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    chunk_vecs: Var,
    chunk_mask: &[bool],
) -> Result<Var> {
    check_rows(tape, "cnn_aggregate", chunk_vecs, chunk_mask)?;
    require_real("cnn_aggregate", chunk_mask)?;
    let hidden = tape.value(chunk_vecs).shape()[1];
    let mut keep = Vec::with_capacity(chunk_mask.len() * hidden);
    for &m in chunk_mask {
        let v = if m { T::one() } else { T::zero() };
        keep.extend(std::iter::repeat(v).take(hidden));
    }
    let keep = tape.constant(Tensor::new(vec![chunk_mask.len(), hidden], keep)?);
    let x = tape.mul(chunk_vecs, keep)?;
    let y = tape.conv1d(x, p.var(&format!("{PREFIX}.cnn.weight"))?, p.var(&format!("{PREFIX}.cnn.bias"))?)?;
    let y = tape.relu(y)?;
    tape.masked_max(y, chunk_mask, Axis::Rows)
}

/// Mean of the mask-1 chunk vectors.
pub fn mean_aggregate<T: Element>(tape: &mut Tape<'_, T>, chunk_vecs: Var, chunk_mask: &[bool]) -> Result<Var> {
    check_rows(tape, "mean_aggregate", chunk_vecs, chunk_mask)?;
    require_real("mean_aggregate", chunk_mask)?;
    tape.masked_mean(chunk_vecs, chunk_mask, Axis::Rows)
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

pub fn init_head<T: Element>(hidden: usize, n_class: usize, store: &mut ParamStore<T>, init: &mut Init) -> Result<()> {
    if n_class < 2 {
        return Err(Error::invalid(format!("classifier needs ≥ 2 classes, got {n_class}")));
    }
    store.insert(HEAD_WEIGHT, init.normal(&[hidden, n_class]))?;
    store.insert(HEAD_BIAS, Tensor::zeros(&[1, n_class]))
}

/// Affine map from the document vector to class logits.
pub fn classify<T: Element>(tape: &mut Tape<'_, T>, p: &Bound, doc: Var) -> Result<Var> {
    let z = tape.matmul(doc, p.var(HEAD_WEIGHT)?)?;
    tape.add_bias(z, p.var(HEAD_BIAS)?)
}
