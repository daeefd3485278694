//! Reference implementations written directly from the definitions, kept
//! independent of the library's mask builders and kernels.

#![allow(dead_code)]

use muco_core::types::{EmbeddingMatrix, Role, RowLabel, Variant};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    muco_core::seed::rng(seed)
}

pub fn unit_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let row: Vec<f64> = loop {
            let r: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if r.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                break r;
            }
        };
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.extend(row.iter().map(|x| x / n));
    }
    v
}

pub fn grid(images: usize, turns: usize, role: Role) -> Vec<RowLabel> {
    (0..images)
        .flat_map(|i| (0..turns).map(move |j| RowLabel { role, ..RowLabel::query(i, j) }))
        .collect()
}

/// `{q, q'}` or `{p, p'}` per image, turn 0.
pub fn forms(images: usize, role: Role) -> Vec<RowLabel> {
    (0..images)
        .flat_map(|i| {
            [Variant::Original, Variant::Augmented].map(move |v| RowLabel {
                role,
                ..RowLabel::query(i, 0)
            }
            .with_variant(v))
        })
        .collect()
}

pub fn matrix(labels: Vec<RowLabel>, dim: usize, values: Vec<f64>) -> EmbeddingMatrix {
    EmbeddingMatrix::new(labels, dim, values).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// `-log(exp(pos) / sum_{kept} exp(logit))` with a max shift.
fn term(pos: f64, kept: &[f64]) -> f64 {
    let mut m = pos;
    for &l in kept {
        if l > m {
            m = l;
        }
    }
    let mut z = 0.0;
    for &l in kept {
        z += (l - m).exp();
    }
    -(pos - m) + z.ln()
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Rule {
    /// Same-image targets other than the positive are excluded.
    Muco,
    /// Everything but the positive is a negative.
    Naive,
}

/// Multi-pair loss: one term per query, positive = target with the same
/// (image, turn).
pub fn multipair(q: &EmbeddingMatrix, t: &EmbeddingMatrix, tau: f64, rule: Rule) -> f64 {
    let mut total = 0.0;
    for a in 0..q.len() {
        let la = q.rows()[a];
        let mut pos = None;
        let mut kept = Vec::new();
        for b in 0..t.len() {
            let lb = t.rows()[b];
            let logit = dot(q.row(a), t.row(b)) / tau;
            let same_image = la.image_index == lb.image_index;
            if same_image && la.turn_index == lb.turn_index {
                pos = Some(logit);
                kept.push(logit);
            } else if !(rule == Rule::Muco && same_image) {
                kept.push(logit);
            }
        }
        total += term(pos.expect("aligned positive"), &kept);
    }
    total / q.len() as f64
}

/// Fine-tuning loss over `{q, q'} x {p, p'}` per image: the counterpart of
/// each term's positive is excluded when `mask_counterpart`.
pub fn finetune(q: &EmbeddingMatrix, t: &EmbeddingMatrix, tau: f64, mask_counterpart: bool) -> f64 {
    let mut total = 0.0;
    let mut terms = 0;
    for a in 0..q.len() {
        let la = q.rows()[a];
        for p in 0..t.len() {
            let lp = t.rows()[p];
            if lp.image_index != la.image_index {
                continue;
            }
            let pos = dot(q.row(a), t.row(p)) / tau;
            let mut kept = Vec::new();
            for b in 0..t.len() {
                let lb = t.rows()[b];
                let logit = dot(q.row(a), t.row(b)) / tau;
                let counterpart = lb.image_index == lp.image_index && lb.variant != lp.variant;
                if !(mask_counterpart && counterpart) {
                    kept.push(logit);
                }
            }
            total += term(pos, &kept);
            terms += 1;
        }
    }
    total / terms as f64
}

/// Index set masked by a partial Fisher-Yates pass with the library's
/// seeded generator, recomputed from scratch.
pub fn masked_index_set(n: usize, ratio: f64, seed: u64) -> std::collections::BTreeSet<usize> {
    let m = (ratio * n as f64).floor() as usize;
    let mut r = rng(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = r.random_range(i..n);
        idx.swap(i, j);
    }
    idx[..m].iter().copied().collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a - n‖ / max(‖a‖, ‖n‖)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let s = norm(a).max(norm(n));
    if s == 0.0 {
        0.0
    } else {
        norm(&d) / s
    }
}

use muco_core::encoder::EncoderState;
use muco_core::harness::{
    build_tokenizer, corpus_vocabulary, encoder_config, synthetic_corpus, ModelShape, SyntheticCorpus, SyntheticSpec,
    TokenizerKind, TrainConfig,
};
use muco_core::template::Tokenizer;
use rand_distr::StandardNormal;

pub fn tiny_corpus(seed: u64) -> SyntheticCorpus {
    synthetic_corpus(&SyntheticSpec {
        images: 6,
        turns: 4,
        slice_words: 5,
        words_per_text: 2,
        image_tokens: 2,
        seed,
    })
    .unwrap()
}

pub fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        batch_images: 3,
        turns_per_image: 3,
        steps: 3,
        model: ModelShape {
            dim: 8,
            heads: 2,
            layers: 1,
            max_seq: 96,
        },
        tokenizer: TokenizerKind::Word,
        ..TrainConfig::default()
    }
}

pub fn word_tokenizer(cfg: &TrainConfig, corpus: &SyntheticCorpus) -> Box<dyn Tokenizer> {
    build_tokenizer(TokenizerKind::Word, &cfg.template, &corpus_vocabulary(&corpus.train, &cfg.template)).unwrap()
}

/// Fresh encoder with weights scaled up so that every path carries signal.
pub fn lively_state(cfg: &TrainConfig, tok: &dyn Tokenizer, seed: u64) -> EncoderState {
    let mut state = EncoderState::init(encoder_config(cfg, tok)).unwrap();
    let mut r = rng(seed);
    for p in state.params.iter_mut() {
        *p += 0.3 * r.sample::<f64, _>(StandardNormal);
    }
    state
}
