//! Comparison baselines: first-chunk truncation and a bag-of-words linear model.

use serde::{Deserialize, Serialize};

use crate::data::{prepare, Record};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{HierModel, ModelConfig};
use crate::optim::Adam;
use crate::tensor::{Element, Tensor};
use crate::tokenizer::{encode, Vocabulary};
use crate::train::{train, TrainConfig};

/// The same hierarchical model restricted to its first chunk, trained and
/// scored exactly like the full model.
pub fn truncation_baseline<T: Element>(
    train_set: &[Record],
    test_set: &[Record],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<EvalReport> {
    let mut cfg = model_cfg.clone();
    train_cfg.apply_to(&mut cfg);
    cfg.chunking.max_chunks = 1;
    let train_docs = prepare(train_set, vocab, &cfg.chunking)?;
    let test_docs = prepare(test_set, vocab, &cfg.chunking)?;
    let model = HierModel::<T>::new(cfg, train_cfg.seed)?;
    let (model, _) = train(model, &train_docs, train_cfg, |_| {})?;
    evaluate(&model, &test_docs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BowConfig {
    /// Penalty `l2/2 · ‖W‖²` on the weights (not the bias).
    pub l2: f64,
    pub lr: f64,
    /// Full-batch Adam steps.
    pub steps: usize,
}

impl Default for BowConfig {
    fn default() -> Self {
        BowConfig {
            l2: 1e-2,
            lr: 0.05,
            steps: 300,
        }
    }
}

/// Sparse term counts, sorted by id.
pub fn term_counts(text: &str, vocab: &Vocabulary) -> Vec<(usize, f64)> {
    let mut ids: Vec<usize> = encode(text, vocab).into_iter().map(|i| i as usize).collect();
    ids.sort_unstable();
    let mut out: Vec<(usize, f64)> = Vec::new();
    for id in ids {
        match out.last_mut() {
            Some((last, c)) if *last == id => *c += 1.0,
            _ => out.push((id, 1.0)),
        }
    }
    out
}

/// Softmax regression over term-count vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct BowModel {
    /// `[vocab, n_class]`.
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
}

impl BowModel {
    fn logits(&self, x: &[(usize, f64)]) -> Vec<f64> {
        let c = self.weight.shape()[1];
        let mut z = self.bias.data().to_vec();
        for &(id, v) in x {
            for (k, zk) in z.iter_mut().enumerate() {
                *zk += v * self.weight.data()[id * c + k];
            }
        }
        z
    }

    pub fn predict_proba(&self, x: &[(usize, f64)]) -> Vec<f64> {
        let z = self.logits(x);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Mean cross-entropy plus the L2 term, with gradients `(dW, db)`.
    fn loss_and_grads(&self, xs: &[Vec<(usize, f64)>], ys: &[usize], l2: f64) -> (f64, Vec<f64>, Vec<f64>) {
        let (v, c) = (self.weight.shape()[0], self.weight.shape()[1]);
        let mut dw = vec![0.0; v * c];
        let mut db = vec![0.0; c];
        let mut loss = 0.0;
        let n = xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let p = self.predict_proba(x);
            loss -= p[y].max(f64::MIN_POSITIVE).ln();
            for k in 0..c {
                let d = (p[k] - if k == y { 1.0 } else { 0.0 }) / n;
                db[k] += d;
                for &(id, val) in x {
                    dw[id * c + k] += d * val;
                }
            }
        }
        let w = self.weight.data();
        let mut penalty = 0.0;
        for (g, &wi) in dw.iter_mut().zip(w) {
            *g += l2 * wi;
            penalty += wi * wi;
        }
        (loss / n + 0.5 * l2 * penalty, dw, db)
    }

    pub fn fit(xs: &[Vec<(usize, f64)>], ys: &[usize], vocab_size: usize, n_class: usize, cfg: &BowConfig) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::invalid("bag-of-words fit needs a non-empty, aligned training set"));
        }
        if let Some(&y) = ys.iter().find(|&&y| y >= n_class) {
            return Err(Error::invalid(format!("label {y} out of range for {n_class} classes")));
        }
        let mut model = BowModel {
            weight: Tensor::zeros(&[vocab_size, n_class]),
            bias: Tensor::zeros(&[n_class]),
        };
        let mut adam = Adam::new(&[model.weight.clone(), model.bias.clone()]);
        for _ in 0..cfg.steps {
            let (loss, dw, db) = model.loss_and_grads(xs, ys, cfg.l2);
            if !loss.is_finite() {
                return Err(Error::invalid("bag-of-words loss diverged"));
            }
            let mut params = [model.weight, model.bias];
            let grads = [Tensor::new(vec![vocab_size, n_class], dw)?, Tensor::new(vec![n_class], db)?];
            adam.step(&mut params, &grads, cfg.lr, &[false, false])?;
            let [w, b] = params;
            model = BowModel { weight: w, bias: b };
        }
        Ok(model)
    }
}

pub fn bow_baseline(
    train_set: &[Record],
    test_set: &[Record],
    vocab: &Vocabulary,
    n_class: usize,
    cfg: &BowConfig,
) -> Result<EvalReport> {
    let featurize = |rs: &[Record]| -> (Vec<Vec<(usize, f64)>>, Vec<usize>) {
        (rs.iter().map(|r| term_counts(&r.text, vocab)).collect(), rs.iter().map(|r| r.label).collect())
    };
    let (xs, ys) = featurize(train_set);
    let model = BowModel::fit(&xs, &ys, vocab.len(), n_class, cfg)?;
    let (xt, yt) = featurize(test_set);
    let probs: Vec<Vec<f64>> = xt.iter().map(|x| model.predict_proba(x)).collect();
    EvalReport::from_probs(&yt, &probs, n_class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};
    use crate::tokenizer::build_vocab;

    fn vocab_for(records: &[Record]) -> Vocabulary {
        let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
        build_vocab(&texts, 10_000).unwrap()
    }

    #[test]
    fn counts_are_sparse_and_sorted() {
        let v = Vocabulary::from_tokens(["a", "b"]).unwrap();
        assert_eq!(term_counts("b a b zzz", &v), vec![(1, 1.0), (3, 1.0), (4, 2.0)]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let xs = vec![vec![(0, 1.0), (2, 3.0)], vec![(1, 2.0)], vec![(2, 1.0)]];
        let ys = vec![0, 1, 2];
        let m = BowModel {
            weight: Tensor::from_f64(&[3, 3], &[0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2, 0.2, -0.4]).unwrap(),
            bias: Tensor::from_f64(&[3], &[0.05, -0.05, 0.0]).unwrap(),
        };
        let (_, dw, db) = m.loss_and_grads(&xs, &ys, 0.1);
        let h = 1e-6;
        for i in 0..9 {
            let mut p = m.clone();
            p.weight.data_mut()[i] += h;
            let mut q = m.clone();
            q.weight.data_mut()[i] -= h;
            let num = (p.loss_and_grads(&xs, &ys, 0.1).0 - q.loss_and_grads(&xs, &ys, 0.1).0) / (2.0 * h);
            assert!((num - dw[i]).abs() < 1e-8, "w{i}: {num} vs {}", dw[i]);
        }
        for k in 0..3 {
            let mut p = m.clone();
            p.bias.data_mut()[k] += h;
            let mut q = m.clone();
            q.bias.data_mut()[k] -= h;
            let num = (p.loss_and_grads(&xs, &ys, 0.1).0 - q.loss_and_grads(&xs, &ys, 0.1).0) / (2.0 * h);
            assert!((num - db[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn separable_toy_task_is_solved() {
        let rec = |i: usize, text: &str, label| Record {
            id: i.to_string(),
            text: text.into(),
            label,
        };
        let train_set = vec![
            rec(0, "good fine ok", 1),
            rec(1, "bad fine ok", 0),
            rec(2, "good ok", 1),
            rec(3, "bad fine", 0),
        ];
        let v = vocab_for(&train_set);
        let r = bow_baseline(&train_set, &train_set, &v, 2, &BowConfig::default()).unwrap();
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn keyword_task_is_unigram_separable() {
        let spec = SynthSpec {
            n_train: 1000,
            n_test: 200,
            vocab_size: 200,
            doc_len_mean: 60,
            doc_len_jitter: 5,
            ..SynthSpec::keyword(3)
        };
        let (tr, te) = generate(&spec).unwrap();
        let r = bow_baseline(&tr, &te, &vocab_for(&tr), 2, &BowConfig::default()).unwrap();
        assert!(r.accuracy >= 0.95, "accuracy {}", r.accuracy);
    }

    #[test]
    fn long_range_pair_defeats_the_unigram_model() {
        let spec = SynthSpec {
            n_train: 400,
            n_test: 400,
            vocab_size: 200,
            doc_len_mean: 60,
            doc_len_jitter: 5,
            signal_offset_tokens: 30,
            first_chunk_tokens: 30,
            ..SynthSpec::long_range(3)
        };
        let (tr, te) = generate(&spec).unwrap();
        let r = bow_baseline(&tr, &te, &vocab_for(&tr), 2, &BowConfig::default()).unwrap();
        assert!(r.accuracy <= 0.6, "accuracy {}", r.accuracy);
    }

    #[test]
    fn fit_rejects_bad_labels() {
        assert!(BowModel::fit(&[vec![]], &[3], 4, 2, &BowConfig::default()).is_err());
        assert!(BowModel::fit(&[], &[], 4, 2, &BowConfig::default()).is_err());
    }
}
