//! The full hierarchical classifier: word encoder → word pooling → chunk
//! aggregator → linear head.

use serde::{Deserialize, Serialize};

use crate::aggregator::{self, AggregatorKind, ChunkTransformerConfig};
use crate::autodiff::{Axis, Tape, Var};
use crate::chunker::{ChunkConfig, ChunkedDocument};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::rng::{stream, Stream};
use crate::tensor::{Element, Tensor};
use crate::transformer::Dropout;
use crate::word_encoder::{self, WordEncoderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordPool {
    Cls,
    #[serde(rename = "wsum")]
    WeightedSum,
}

impl WordPool {
    pub fn name(self) -> &'static str {
        match self {
            WordPool::Cls => "cls",
            WordPool::WeightedSum => "wsum",
        }
    }
}

impl std::str::FromStr for WordPool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(WordPool::Cls),
            "wsum" => Ok(WordPool::WeightedSum),
            other => Err(Error::invalid(format!("unknown word pool {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_class: usize,
    pub word: WordEncoderConfig,
    pub word_pool: WordPool,
    pub aggregator: AggregatorKind,
    pub chunk_transformer: ChunkTransformerConfig,
    pub chunking: ChunkConfig,
    pub init_std: f64,
}

pub const DEFAULT_INIT_STD: f64 = 0.02;

impl ModelConfig {
    /// Desk-scale word encoder with a proportionally scaled chunk transformer.
    pub fn desk(vocab_size: usize, n_class: usize, chunking: ChunkConfig) -> Self {
        let word = WordEncoderConfig::desk(vocab_size, chunking.row_len());
        ModelConfig {
            n_class,
            chunk_transformer: ChunkTransformerConfig::scaled(word.hidden),
            word,
            word_pool: WordPool::Cls,
            aggregator: AggregatorKind::Transformer { use_positions: false },
            chunking,
            init_std: DEFAULT_INIT_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.word.validate()?;
        self.chunking.validate()?;
        if self.word.max_positions < self.chunking.row_len() {
            return Err(Error::invalid(format!(
                "max_positions {} is shorter than the chunk row length {}",
                self.word.max_positions,
                self.chunking.row_len()
            )));
        }
        if self.n_class < 2 {
            return Err(Error::invalid("n_class must be ≥ 2"));
        }
        if let AggregatorKind::Transformer { .. } = self.aggregator {
            self.chunk_transformer.geometry(self.word.hidden)?;
        }
        Ok(())
    }
}

/// Options for a single forward pass.
#[derive(Default)]
pub struct ForwardOptions<'d> {
    /// Track gradients for word-encoder parameters (false = frozen encoder).
    pub train_word_encoder: bool,
    /// Track gradients for everything else.
    pub train_top: bool,
    pub dropout: Option<&'d mut Dropout>,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub params: Bound,
}

/// Whether a parameter belongs to the word encoder (embeddings included).
pub fn is_word_param(name: &str) -> bool {
    name.starts_with(word_encoder::PREFIX) && name[word_encoder::PREFIX.len()..].starts_with('.')
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierModel<T: Element> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Element> HierModel<T> {
    /// Fresh parameters drawn from the seed's init stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(stream(seed, Stream::Init), config.init_std)?;
        let mut params = ParamStore::new();
        word_encoder::init_params(&config.word, &mut params, &mut init)?;
        if config.word_pool == WordPool::WeightedSum {
            word_encoder::init_layer_weights(&config.word, &mut params)?;
        }
        let hidden = config.word.hidden;
        aggregator::init_params(
            config.aggregator,
            &config.chunk_transformer,
            hidden,
            config.chunking.max_chunks,
            &mut params,
            &mut init,
        )?;
        aggregator::init_head(hidden, config.n_class, &mut params, &mut init)?;
        Ok(HierModel { config, params })
    }

    /// Wraps existing parameters, checking names and shapes against a fresh
    /// model built from `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let template = HierModel::<T>::new(config.clone(), 0)?;
        if template.params.names() != params.names() {
            return Err(Error::invalid("parameter names do not match the model configuration"));
        }
        for ((name, a), b) in template.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::invalid(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(HierModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Encodes every real chunk and pools it to one vector, giving `[T × hidden]`.
    pub fn chunk_vectors<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        p: &Bound,
        doc: &ChunkedDocument,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let mut vecs = Vec::with_capacity(doc.n_chunks());
        for c in 0..doc.n_real_chunks() {
            // Trailing PAD slots are masked keys and never pooled, so dropping
            // them is exact and saves attention work on the last chunk.
            let len = doc.real_len(c);
            let ids = &doc.ids(c)[..len];
            let mask = &doc.mask(c)[..len];
            let layers = word_encoder::encode_chunk(tape, p, &self.config.word, ids, mask, dropout.as_deref_mut())?;
            let v = match self.config.word_pool {
                WordPool::Cls => word_encoder::cls_pool(tape, &layers)?,
                WordPool::WeightedSum => {
                    word_encoder::weighted_sum_pool(tape, &layers, mask, p.var(word_encoder::LAYER_WEIGHTS)?)?
                }
            };
            vecs.push(v);
        }
        if vecs.len() == 1 {
            Ok(vecs[0])
        } else {
            tape.concat(&vecs, Axis::Rows)
        }
    }

    pub fn aggregate(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        chunk_vecs: Var,
        chunk_mask: &[bool],
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        match self.config.aggregator {
            AggregatorKind::Transformer { use_positions } => aggregator::transformer_aggregate(
                tape,
                p,
                &self.config.chunk_transformer,
                chunk_vecs,
                chunk_mask,
                use_positions,
                dropout,
            ),
            AggregatorKind::Lstm => aggregator::lstm_aggregate(tape, p, chunk_vecs, chunk_mask),
            AggregatorKind::Cnn => aggregator::cnn_aggregate(tape, p, chunk_vecs, chunk_mask),
            AggregatorKind::Mean => aggregator::mean_aggregate(tape, chunk_vecs, chunk_mask),
        }
    }

    /// Records the whole model on `tape` and returns the class logits.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        doc: &ChunkedDocument,
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let (word, top) = (opts.train_word_encoder, opts.train_top);
        let params = self
            .params
            .bind(tape, |name| if is_word_param(name) { word } else { top });
        let mut dropout = opts.dropout;
        let chunks = self.chunk_vectors(tape, &params, doc, dropout.as_deref_mut())?;
        let mask = vec![true; doc.n_real_chunks()];
        let doc_vec = self.aggregate(tape, &params, chunks, &mask, dropout)?;
        let logits = aggregator::classify(tape, &params, doc_vec)?;
        Ok(ForwardOutput { logits, params })
    }

    /// Softmax class probabilities without gradient tracking.
    pub fn predict_proba(&self, doc: &ChunkedDocument) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, doc, ForwardOptions::default())?;
        let probs = tape.softmax(out.logits)?;
        Ok(tape.value(probs).to_f64_vec())
    }

    /// Cross-entropy of one document and its gradient for every parameter
    /// (zeros for frozen ones), in parameter order.
    pub fn loss_and_grads(
        &self,
        doc: &ChunkedDocument,
        label: usize,
        train_word_encoder: bool,
        dropout: Option<&mut Dropout>,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let out = self.forward(
            &mut tape,
            doc,
            ForwardOptions {
                train_word_encoder,
                train_top: true,
                dropout,
            },
        )?;
        let loss = tape.cross_entropy(out.logits, label)?;
        let value = tape.value(loss).data()[0].as_f64();
        tape.backward(loss)?;
        let grads = out
            .params
            .vars()
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, grads))
    }
}

/// Tiny f64-friendly configuration: hidden 8, two word layers, two chunk
/// layers, content length 6, at most 3 chunks.
pub fn tiny_config(vocab_size: usize, n_class: usize, word_pool: WordPool, aggregator: AggregatorKind) -> ModelConfig {
    let chunking = ChunkConfig::new(6, 3);
    ModelConfig {
        n_class,
        word: WordEncoderConfig {
            n_layers: 2,
            hidden: 8,
            ff_inner: 16,
            n_heads: 2,
            head_dim: 4,
            max_positions: chunking.row_len(),
            vocab_size,
        },
        word_pool,
        aggregator,
        chunk_transformer: ChunkTransformerConfig {
            n_layers: 2,
            n_heads: 2,
            key_dim: 4,
            ff_inner: 16,
        },
        chunking,
        init_std: 0.3,
    }
}

/// Checks every parameter's analytic gradient of the cross-entropy on `doc`
/// against central differences.
pub fn grad_check_model(
    model: &HierModel<f64>,
    doc: &ChunkedDocument,
    label: usize,
    h: f64,
    tol: f64,
) -> Result<crate::autodiff::GradCheckReport> {
    let (_, analytic) = model.loss_and_grads(doc, label, true, None)?;
    let config = model.config().clone();
    let names = model.params().names().to_vec();
    let mut tensors = model.params().tensors().to_vec();
    crate::autodiff::grad_check(&names, &mut tensors, &analytic, h, tol, |ps| {
        let mut store = ParamStore::new();
        for (n, t) in names.iter().zip(ps) {
            store.insert(n.clone(), t.clone())?;
        }
        let probe = HierModel {
            config: config.clone(),
            params: store,
        };
        let mut tape = Tape::new();
        let out = probe.forward(&mut tape, doc, ForwardOptions::default())?;
        let loss = tape.cross_entropy(out.logits, label)?;
        Ok(tape.value(loss).data()[0])
    })
}

#[cfg(test)]
mod tests;
