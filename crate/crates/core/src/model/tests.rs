use super::*;
use crate::chunker::chunk;

fn doc(n_tokens: usize, vocab: usize, cfg: &ChunkConfig) -> ChunkedDocument {
    let ids: Vec<u32> = (0..n_tokens).map(|i| 3 + ((i * 7 + 2) % (vocab - 3)) as u32).collect();
    chunk(&ids, cfg).unwrap()
}

#[test]
fn gradients_match_finite_differences_for_every_variant() {
    for pool in [WordPool::Cls, WordPool::WeightedSum] {
        for kind in AggregatorKind::ALL {
            let cfg = tiny_config(20, 3, pool, kind);
            let model = HierModel::<f64>::new(cfg.clone(), 3).unwrap();
            let d = doc(16, 20, &cfg.chunking);
            assert_eq!(d.n_chunks(), 3);
            let report = grad_check_model(&model, &d, 1, 1e-5, 1e-4).unwrap();
            assert!(
                report.passed(),
                "{}/{}: {:?}",
                pool.name(),
                kind.name(),
                report.worst
            );
        }
    }
}

#[test]
fn frozen_encoder_gets_no_gradient() {
    let cfg = tiny_config(20, 2, WordPool::WeightedSum, AggregatorKind::Cnn);
    let model = HierModel::<f64>::new(cfg.clone(), 1).unwrap();
    let d = doc(10, 20, &cfg.chunking);
    let (_, grads) = model.loss_and_grads(&d, 0, false, None).unwrap();
    for ((name, _), g) in model.params().iter().zip(&grads) {
        let nonzero = g.data().iter().any(|&v| v != 0.0);
        assert_eq!(nonzero, !is_word_param(name), "{name}");
    }
}

#[test]
fn probabilities_sum_to_one() {
    let cfg = tiny_config(20, 3, WordPool::Cls, AggregatorKind::Lstm);
    let model = HierModel::<f32>::new(cfg.clone(), 5).unwrap();
    let p = model.predict_proba(&doc(7, 20, &cfg.chunking)).unwrap();
    assert_eq!(p.len(), 3);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn word_param_classification() {
    assert!(is_word_param("word.tok_emb"));
    assert!(is_word_param("word.layer0.attn.wq"));
    assert!(!is_word_param("pool.layer_weights"));
    assert!(!is_word_param("agg.layer0.attn.wq"));
    assert!(!is_word_param("wordy"));
}

#[test]
fn from_params_checks_layout() {
    let cfg = tiny_config(20, 2, WordPool::Cls, AggregatorKind::Mean);
    let model = HierModel::<f32>::new(cfg.clone(), 1).unwrap();
    let params = model.params().clone();
    assert!(HierModel::from_params(cfg.clone(), params.clone()).is_ok());

    let other = tiny_config(20, 2, WordPool::Cls, AggregatorKind::Lstm);
    assert!(HierModel::from_params(other, params.clone()).is_err());

    let bigger = tiny_config(21, 2, WordPool::Cls, AggregatorKind::Mean);
    assert!(HierModel::from_params(bigger, params).is_err());
}

#[test]
fn same_seed_same_parameters() {
    let cfg = tiny_config(20, 2, WordPool::Cls, AggregatorKind::Transformer { use_positions: true });
    let a = HierModel::<f32>::new(cfg.clone(), 9).unwrap();
    let b = HierModel::<f32>::new(cfg.clone(), 9).unwrap();
    let c = HierModel::<f32>::new(cfg, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn config_rejects_short_positions() {
    let mut cfg = tiny_config(20, 2, WordPool::Cls, AggregatorKind::Mean);
    cfg.word.max_positions = 5;
    assert!(HierModel::<f32>::new(cfg, 0).is_err());
}
