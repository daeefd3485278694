mod common;

use common::*;
use muco_core::harness::{batch_loss, turn_input_gradient, LossVariant, TrainConfig};
use muco_core::template::AttentionMode;
use muco_core::types::LossConfig;

fn encoder_fd(cfg: &TrainConfig, seed: u64) -> f64 {
    let corpus = tiny_corpus(seed);
    let tok = word_tokenizer(cfg, &corpus);
    let batch = &corpus.train[..cfg.batch_images];
    let mut state = lively_state(cfg, tok.as_ref(), seed);
    assert!(state.param_count() <= 10_000, "{} params", state.param_count());
    let step_seed = 17 + seed;
    let (_, analytic) = batch_loss(&state, batch, cfg, tok.as_ref(), step_seed).unwrap();
    let h = 1e-5;
    let mut numeric = vec![0.0; analytic.len()];
    for i in 0..numeric.len() {
        let x = state.params[i];
        state.params[i] = x + h;
        let up = batch_loss(&state, batch, cfg, tok.as_ref(), step_seed).unwrap().0.report.total;
        state.params[i] = x - h;
        let down = batch_loss(&state, batch, cfg, tok.as_ref(), step_seed).unwrap().0.report.total;
        state.params[i] = x;
        numeric[i] = (up - down) / (2.0 * h);
    }
    rel_err(&analytic, &numeric)
}

fn small(variant: LossVariant, mode: AttentionMode) -> TrainConfig {
    TrainConfig {
        batch_images: 2,
        turns_per_image: 2,
        loss_variant: variant,
        attention_mode: mode,
        loss: LossConfig::with_temperature(0.5),
        ..tiny_cfg()
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    for (variant, mode) in [
        (LossVariant::Muco, AttentionMode::Causal),
        (LossVariant::Muco, AttentionMode::IsolatedTurns),
        (LossVariant::Naive, AttentionMode::Causal),
    ] {
        let e = encoder_fd(&small(variant, mode), 1);
        assert!(e < 1e-4, "{variant:?} {mode:?}: {e:e}");
    }
}

#[test]
fn finetune_gradients_match_finite_differences() {
    let mut cfg = small(LossVariant::FinetuneAdapted, AttentionMode::Causal);
    cfg.model.max_seq = 160;
    let e = encoder_fd(&cfg, 2);
    assert!(e < 1e-4, "{e:e}");
}

#[test]
fn default_temperature_gradients_match() {
    let cfg = TrainConfig {
        loss: LossConfig::default(),
        ..small(LossVariant::Muco, AttentionMode::Causal)
    };
    let e = encoder_fd(&cfg, 3);
    assert!(e < 1e-4, "{e:e}");
}

/// Norm of the turn-`j` gradient on the tokens of each earlier turn.
fn earlier_turn_norms(mode: AttentionMode, seed: u64) -> Vec<Vec<f64>> {
    let cfg = TrainConfig {
        batch_images: 3,
        turns_per_image: 4,
        attention_mode: mode,
        ..tiny_cfg()
    };
    let corpus = tiny_corpus(seed);
    let tok = word_tokenizer(&cfg, &corpus);
    let state = lively_state(&cfg, tok.as_ref(), seed);
    let batch = &corpus.train[..3];
    let d = cfg.model.dim;
    (1..4)
        .map(|j| {
            let (g, packed) = turn_input_gradient(&state, batch, j, &cfg, tok.as_ref()).unwrap();
            packed.turn_spans[..j].iter().map(|span| norm(&g[span.start * d..span.end * d])).collect()
        })
        .collect()
}

#[test]
fn isolated_turns_receive_no_gradient_from_later_terms() {
    for seed in 0..10 {
        for norms in earlier_turn_norms(AttentionMode::IsolatedTurns, seed) {
            assert!(norms.iter().all(|n| *n == 0.0), "seed {seed}: {norms:?}");
        }
    }
}

#[test]
fn causal_turns_receive_gradient_from_later_terms() {
    for seed in 0..10 {
        for norms in earlier_turn_norms(AttentionMode::Causal, seed) {
            assert!(norms.iter().all(|n| *n > 1e-12), "seed {seed}: {norms:?}");
        }
    }
}
