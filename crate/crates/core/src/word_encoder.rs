//! Token-level transformer run independently on each chunk, and the two
//! ways of collapsing its hidden states into one chunk vector.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Element, Tensor};
use crate::transformer::{encoder_layer, init_layer, maybe_dropout, Dropout, LayerGeometry};

/// Name prefix of every word-encoder parameter (embeddings included).
pub const PREFIX: &str = "word";
pub const LAYER_WEIGHTS: &str = "pool.layer_weights";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordEncoderConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub ff_inner: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl WordEncoderConfig {
    /// 2 layers, hidden 64, ff 128, 4 heads of 16.
    pub fn desk(vocab_size: usize, max_positions: usize) -> Self {
        WordEncoderConfig {
            n_layers: 2,
            hidden: 64,
            ff_inner: 128,
            n_heads: 4,
            head_dim: 16,
            max_positions,
            vocab_size,
        }
    }

    /// DistilBERT-sized geometry: 6 layers, hidden 768, ff 3072, 12 heads.
    pub fn full(vocab_size: usize, max_positions: usize) -> Self {
        WordEncoderConfig {
            n_layers: 6,
            hidden: 768,
            ff_inner: 3072,
            n_heads: 12,
            head_dim: 64,
            max_positions,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.head_dim != self.hidden {
            return Err(Error::invalid(format!(
                "word encoder: n_heads·head_dim = {} ≠ hidden {}",
                self.n_heads * self.head_dim,
                self.hidden
            )));
        }
        if self.n_layers == 0 || self.ff_inner == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::invalid("word encoder: all sizes must be ≥ 1"));
        }
        Ok(())
    }

    pub fn geometry(&self) -> LayerGeometry {
        LayerGeometry {
            hidden: self.hidden,
            n_heads: self.n_heads,
            key_dim: self.head_dim,
            value_dim: self.head_dim,
            ff_inner: self.ff_inner,
        }
    }
}

pub fn init_params<T: Element>(cfg: &WordEncoderConfig, store: &mut ParamStore<T>, init: &mut Init) -> Result<()> {
    cfg.validate()?;
    store.insert(format!("{PREFIX}.tok_emb"), init.normal(&[cfg.vocab_size, cfg.hidden]))?;
    store.insert(format!("{PREFIX}.pos_emb"), init.normal(&[cfg.max_positions, cfg.hidden]))?;
    let g = cfg.geometry();
    for l in 0..cfg.n_layers {
        init_layer(store, &format!("{PREFIX}.layer{l}"), &g, init)?;
    }
    Ok(())
}

/// Layer weights for weighted-sum pooling, initialized to a uniform average.
pub fn init_layer_weights<T: Element>(cfg: &WordEncoderConfig, store: &mut ParamStore<T>) -> Result<()> {
    let w = T::from_f64(1.0 / cfg.n_layers as f64);
    store.insert(LAYER_WEIGHTS, Tensor::full(&[1, cfg.n_layers], w))
}

/// Runs the encoder over one chunk row and returns every layer's output
/// (`[row_len × hidden]` each, first layer first).
pub fn encode_chunk<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &WordEncoderConfig,
    ids: &[u32],
    mask: &[u8],
    mut dropout: Option<&mut Dropout>,
) -> Result<Vec<Var>> {
    if ids.len() != mask.len() {
        return Err(Error::shape("encode_chunk", &[ids.len()], &[mask.len()]));
    }
    if ids.len() > cfg.max_positions {
        return Err(Error::invalid(format!(
            "row of {} tokens exceeds max_positions {}",
            ids.len(),
            cfg.max_positions
        )));
    }
    let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = tape.embedding(p.var(&format!("{PREFIX}.tok_emb"))?, &tok_ids)?;
    let pos = tape.embedding(p.var(&format!("{PREFIX}.pos_emb"))?, &positions)?;
    let mut x = tape.add(tok, pos)?;
    x = maybe_dropout(tape, &mut dropout, x)?;
    let key_mask: Vec<bool> = mask.iter().map(|&m| m == 1).collect();
    let g = cfg.geometry();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        x = encoder_layer(tape, p, &format!("{PREFIX}.layer{l}"), &g, x, &key_mask, dropout.as_deref_mut())?;
        layers.push(x);
    }
    Ok(layers)
}

/// Row 0 (the `[CLS]` slot) of the final layer.
pub fn cls_pool<T: Element>(tape: &mut Tape<'_, T>, layers: &[Var]) -> Result<Var> {
    let last = *layers.last().ok_or_else(|| Error::invalid("cls_pool: no layers"))?;
    tape.slice(last, Axis::Rows, 0, 1)
}

/// `Σᵢ wᵢ·hᵢ` where `hᵢ` is layer i's mean over mask-1 rows (`[CLS]` included).
pub fn weighted_sum_pool<T: Element>(
    tape: &mut Tape<'_, T>,
    layers: &[Var],
    mask: &[u8],
    weights: Var,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::invalid("weighted_sum_pool: no layers"));
    }
    if tape.value(weights).numel() != layers.len() {
        return Err(Error::shape("weighted_sum_pool", &[layers.len()], tape.value(weights).shape()));
    }
    let rows: Vec<bool> = mask.iter().map(|&m| m == 1).collect();
    let means = layers
        .iter()
        .map(|&h| tape.masked_mean(h, &rows, Axis::Rows))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat(&means, Axis::Rows)?;
    tape.matmul(weights, stacked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::tokenizer::{CLS_ID, PAD_ID};

    fn tiny() -> WordEncoderConfig {
        WordEncoderConfig {
            n_layers: 2,
            hidden: 8,
            ff_inner: 16,
            n_heads: 2,
            head_dim: 4,
            max_positions: 12,
            vocab_size: 20,
        }
    }

    fn store(std: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut init = Init::new(stream(7, Stream::Init), std).unwrap();
        init_params(&tiny(), &mut s, &mut init).unwrap();
        init_layer_weights(&tiny(), &mut s).unwrap();
        s
    }

    fn run(s: &ParamStore<f64>, ids: &[u32], mask: &[u8]) -> Vec<Tensor<f64>> {
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, |_| false);
        let layers = encode_chunk(&mut tape, &p, &tiny(), ids, mask, None).unwrap();
        layers.iter().map(|&v| tape.value(v).clone()).collect()
    }

    #[test]
    fn one_matrix_per_layer() {
        let s = store(0.3);
        let out = run(&s, &[CLS_ID, 5, 6, 7, 8, 9], &[1; 6]);
        assert_eq!(out.len(), 2);
        for m in out {
            assert_eq!(m.shape(), &[6, 8]);
        }
    }

    #[test]
    fn row_longer_than_positions_is_rejected() {
        let s = store(0.3);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, |_| false);
        let ids = vec![CLS_ID; 13];
        assert!(encode_chunk(&mut tape, &p, &tiny(), &ids, &[1; 13], None).is_err());
    }

    #[test]
    fn all_pad_row_gives_finite_cls_that_ignores_pad() {
        let s = store(0.3);
        let a = run(&s, &[CLS_ID, PAD_ID, PAD_ID, PAD_ID], &[1, 0, 0, 0]);
        let b = run(&s, &[CLS_ID], &[1]);
        assert!(a.iter().all(Tensor::is_finite));
        // CLS attends only to itself, so it matches the CLS-only row exactly.
        assert_eq!(a[1].row_slice(0), b[1].row_slice(0));
    }

    #[test]
    fn pad_extension_leaves_real_positions_unchanged() {
        let s = store(0.3);
        let short = run(&s, &[CLS_ID, 4, 9, 11], &[1, 1, 1, 1]);
        let long = run(&s, &[CLS_ID, 4, 9, 11, PAD_ID, PAD_ID, PAD_ID], &[1, 1, 1, 1, 0, 0, 0]);
        // Values stored at masked slots must not matter either.
        let junk = run(&s, &[CLS_ID, 4, 9, 11, 17, 3, 12], &[1, 1, 1, 1, 0, 0, 0]);
        for l in 0..2 {
            for r in 0..4 {
                for c in 0..8 {
                    let x = short[l].get2(r, c);
                    assert!((x - long[l].get2(r, c)).abs() <= 1e-8);
                    assert!((x - junk[l].get2(r, c)).abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn cls_pool_is_row_zero_bitwise() {
        let s = store(0.3);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, |_| false);
        let layers = encode_chunk(&mut tape, &p, &tiny(), &[CLS_ID, 5, 6], &[1, 1, 1], None).unwrap();
        let v = cls_pool(&mut tape, &layers).unwrap();
        let last = tape.value(layers[1]);
        let got = tape.value(v).data();
        assert!(got.iter().zip(last.row_slice(0)).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_parameters_give_reproducible_constant() {
        let mut s = store(0.3);
        for t in s.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let a = run(&s, &[CLS_ID, 5, 6], &[1, 1, 1]);
        let b = run(&s, &[CLS_ID, 5, 6], &[1, 1, 1]);
        assert_eq!(a, b);
        assert!(a[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_sum_examples() {
        let mut tape = Tape::<f64>::new();
        let l1 = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap());
        let l2 = tape.constant(Tensor::from_rows(&[vec![-4.0, 0.5], vec![8.0, 1.5]]).unwrap());
        let mask = [1u8, 1];

        let w = tape.constant(Tensor::row(vec![0.5, 0.25]));
        let out = weighted_sum_pool(&mut tape, &[l1, l2], &mask, w).unwrap();
        // layer means: [2, 4] and [2, 1]; 0.5·[2,4] + 0.25·[2,1] = [1.5, 2.25]
        assert_eq!(tape.value(out).data(), &[1.5, 2.25]);

        let one_hot = tape.constant(Tensor::row(vec![0.0, 1.0]));
        let out = weighted_sum_pool(&mut tape, &[l1, l2], &mask, one_hot).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 1.0]);

        let zeros = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let out = weighted_sum_pool(&mut tape, &[l1, l2], &mask, zeros).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0]);

        let masked = weighted_sum_pool(&mut tape, &[l1, l2], &[1, 0], w).unwrap();
        // means over row 0 only: [1, 2] and [-4, 0.5] → [0.5 − 1, 1 + 0.125]
        assert_eq!(tape.value(masked).data(), &[-0.5, 1.125]);

        assert!(weighted_sum_pool(&mut tape, &[l1, l2], &[0, 0], w).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.head_dim = 3;
        assert!(c.validate().is_err());
        assert!(WordEncoderConfig::desk(100, 203).validate().is_ok());
        assert!(WordEncoderConfig::full(100, 512).validate().is_ok());
    }
}
