mod common;

use common::*;
use muco_core::harness::*;
use muco_core::types::{EmbeddingMatrix, LossConfig, Role};

fn embeddings(labels_role: Role, n: usize, dim: usize, values: Vec<f64>) -> EmbeddingMatrix {
    EmbeddingMatrix::new(grid(n, 1, labels_role), dim, values).unwrap()
}

#[test]
fn perfect_retrieval_scores_one() {
    let mut r = rng(1);
    let v = unit_rows(&mut r, 20, 8);
    let q = embeddings(Role::Query, 20, 8, v.clone());
    let t = embeddings(Role::Target, 20, 8, v);
    let relevant: Vec<usize> = (0..20).collect();
    let rep = rank_report(&q, &t, &relevant, &[1, 5, 20]).unwrap();
    assert_eq!(rep.precision_at_1, 1.0);
    assert!(rep.recall_at_k.values().all(|&x| x == 1.0));
}

#[test]
fn random_embeddings_score_at_chance() {
    let (c, seeds) = (64, 50);
    let mut total = 0.0;
    for seed in 0..seeds {
        let mut r = rng(1000 + seed);
        let q = embeddings(Role::Query, c, 16, unit_rows(&mut r, c, 16));
        let t = embeddings(Role::Target, c, 16, unit_rows(&mut r, c, 16));
        let relevant: Vec<usize> = (0..c).collect();
        let rep = rank_report(&q, &t, &relevant, &[1, 10, c]).unwrap();
        assert_eq!(rep.recall_at_k[&c], 1.0);
        assert!(rep.recall_at_k[&1] <= rep.recall_at_k[&10]);
        assert_eq!(rep.recall_at_k[&1], rep.precision_at_1);
        total += rep.precision_at_1;
    }
    let p = 1.0 / c as f64;
    let sigma = (p * (1.0 - p) / (c * seeds as usize) as f64).sqrt();
    let mean = total / seeds as f64;
    assert!((mean - p).abs() < 3.0 * sigma, "mean P@1 {mean} vs chance {p}");
}

#[test]
fn training_lowers_the_loss_across_seeds() {
    for seed in 0..3 {
        let corpus = tiny_corpus(seed);
        let cfg = TrainConfig {
            steps: 40,
            seed,
            learning_rate: 5e-3,
            ..tiny_cfg()
        };
        let tok = word_tokenizer(&cfg, &corpus);
        let out = train(&corpus.train, &cfg, tok.as_ref()).unwrap();
        let head: f64 = out.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = out.losses[35..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "seed {seed}: {head} -> {tail}");
    }
}

#[test]
fn finetune_batch_has_four_terms_per_image_and_masking_matters() {
    let corpus = tiny_corpus(4);
    let mut cfg = TrainConfig {
        loss_variant: LossVariant::FinetuneAdapted,
        loss: LossConfig::with_temperature(0.5),
        ..tiny_cfg()
    };
    cfg.model.max_seq = 160;
    let tok = word_tokenizer(&cfg, &corpus);
    let state = lively_state(&cfg, tok.as_ref(), 4);
    let batch = &corpus.train[..4];
    let (masked, _) = batch_loss(&state, batch, &cfg, tok.as_ref(), 9).unwrap();
    assert_eq!(masked.report.per_term.len(), 4 * batch.len());
    cfg.loss.mask_counterpart = false;
    let (unmasked, _) = batch_loss(&state, batch, &cfg, tok.as_ref(), 9).unwrap();
    assert!(unmasked.report.total > masked.report.total);
}

#[test]
fn one_turn_muco_equals_single_turn_infonce() {
    let corpus = tiny_corpus(5);
    let cfg = TrainConfig {
        turns_per_image: 1,
        ..tiny_cfg()
    };
    let tok = word_tokenizer(&cfg, &corpus);
    let state = lively_state(&cfg, tok.as_ref(), 5);
    let batch = &corpus.train[..4];
    let (a, ga) = batch_loss(&state, batch, &cfg, tok.as_ref(), 3).unwrap();
    let single = TrainConfig {
        loss_variant: LossVariant::SingleTurn,
        ..cfg
    };
    let (b, gb) = batch_loss(&state, batch, &single, tok.as_ref(), 3).unwrap();
    assert_eq!(a.report.total, b.report.total);
    assert_eq!(ga, gb);
}

#[test]
fn evaluation_is_deterministic_and_bounded() {
    let corpus = tiny_corpus(6);
    let cfg = TrainConfig {
        recall_ks: vec![1, 3, 6],
        ..tiny_cfg()
    };
    let tok = word_tokenizer(&cfg, &corpus);
    let state = lively_state(&cfg, tok.as_ref(), 6);
    let a = evaluate(&state, &corpus.eval, &cfg, tok.as_ref()).unwrap();
    assert_eq!(a, evaluate(&state, &corpus.eval, &cfg, tok.as_ref()).unwrap());
    assert_eq!(a.candidates, 6);
    assert_eq!(a.recall_at_k[&6], 1.0);
    assert!(a.recall_at_k[&1] <= a.recall_at_k[&3]);
    assert!(evaluate(&state, &[], &cfg, tok.as_ref()).is_err());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = TrainConfig {
        steps: 12,
        loss_variant: LossVariant::Naive,
        ..tiny_cfg()
    };
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
}
