mod common;

use common::masked_index_set;
use muco_core::template::*;
use muco_core::types::{MultiTurnSample, TaskTag, TurnPair, Variant};
use proptest::prelude::*;

const MASK: &str = "<|mask|>";

fn text(words: usize) -> String {
    (0..words).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
}

#[test]
fn mask_words_hides_the_oracle_index_set() {
    for words in 0..40 {
        for seed in 0..25 {
            let t = text(words);
            let masked = mask_words(&t, 0.5, seed, MASK);
            let expect = masked_index_set(words, 0.5, seed);
            if words == 0 {
                assert_eq!(masked, "");
                continue;
            }
            let got: Vec<&str> = masked.split(' ').collect();
            assert_eq!(got.len(), words);
            for (i, w) in got.iter().enumerate() {
                if expect.contains(&i) {
                    assert_eq!(*w, MASK);
                } else {
                    assert_eq!(*w, format!("w{i}"));
                }
            }
            assert_eq!(got.iter().filter(|w| **w == MASK).count(), words / 2);
        }
    }
}

#[test]
fn mask_words_extreme_ratios() {
    let t = text(9);
    assert_eq!(mask_words(&t, 0.0, 3, MASK), t);
    assert!(mask_words(&t, 1.0, 3, MASK).split(' ').all(|w| w == MASK));
}

fn sample(turns: usize) -> MultiTurnSample {
    MultiTurnSample {
        image_id: "img-42".into(),
        image_tokens: 3,
        pairs: (0..turns)
            .map(|j| TurnPair::new(format!("query {j} about the scene"), format!("answer {j}"), TaskTag::Generic))
            .collect(),
    }
}

#[test]
fn turn_spans_cover_every_token_after_the_prefix() {
    let markup = ChatMarkup::default();
    let tok = ByteTokenizer::new(&markup, 32).unwrap();
    let (q, _) = pack_multiturn(&sample(5), &markup, &tok, AttentionMode::Causal).unwrap();
    assert_eq!(q.turn_spans.first().unwrap().start, q.image_prefix_len);
    for w in q.turn_spans.windows(2) {
        assert_eq!(w[0].end, w[1].start);
    }
    assert_eq!(q.turn_spans.last().unwrap().end, q.len());
    for (p, t) in q.emb_positions.iter().zip(&q.turn_of_position) {
        assert!(q.turn_spans[*t].contains(p));
    }
}

#[test]
fn adapted_pair_forms() {
    let markup = ChatMarkup::default();
    let tok = ByteTokenizer::new(&markup, 32).unwrap();
    let cfg = PromptConfig::default();
    let pair = build_adapted_pair("a small red boat on a lake", "a boat drifting near the shore", &cfg, &markup, 5).unwrap();
    let prefix = image_prefix("img-1", 2, &markup, &tok).unwrap();
    let mut embeddings = 0;
    for side in [&pair.query, &pair.target] {
        for form in [Variant::Original, Variant::Augmented] {
            let seq = pack_adapted(side, form, &prefix, &markup, &tok, AttentionMode::Causal).unwrap();
            embeddings += seq.emb_positions.len();
        }
        // the augmented form extends the original
        assert!(side.augmented().starts_with(side.original()));
    }
    // q, q' on one side and p, p' on the other: three embeddings per side
    assert_eq!(embeddings, 6);
    // the query's continuation masks the target text, not its own
    assert!(pair.query.subsequent.contains(MASK));
    assert!(pair.query.subsequent.contains("boat") || pair.query.subsequent.matches(MASK).count() == 3);
    assert!(!pair.query.subsequent.contains("lake"));
}

#[test]
fn rephrasing_variant_has_no_counterpart() {
    let markup = ChatMarkup::default();
    let cfg = PromptConfig {
        template_variant: TemplateVariant::Rephrasing,
        ..PromptConfig::default()
    };
    let pair = build_adapted_pair("alpha beta", "gamma delta", &cfg, &markup, 1).unwrap();
    assert!(!pair.query.subsequent.contains("gamma") && !pair.query.subsequent.contains(MASK));
}

#[test]
fn reserved_strings_are_rejected() {
    let markup = ChatMarkup::default();
    let cfg = PromptConfig::default();
    assert!(build_adapted_pair("hi <|emb|>", "x", &cfg, &markup, 0).is_err());
    let tok = ByteTokenizer::new(&markup, 32).unwrap();
    let mut s = sample(1);
    s.pairs[0].target_text = "<|user|>".into();
    assert!(pack_multiturn(&s, &markup, &tok, AttentionMode::Causal).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn earlier_turns_are_a_token_prefix(turns in 1usize..7, extra in 1usize..4) {
        let markup = ChatMarkup::default();
        let tok = ByteTokenizer::new(&markup, 32).unwrap();
        let long = sample(turns + extra);
        let mut short = long.clone();
        short.pairs.truncate(turns);
        let (ql, tl) = pack_multiturn(&long, &markup, &tok, AttentionMode::Causal).unwrap();
        let (qs, ts) = pack_multiturn(&short, &markup, &tok, AttentionMode::Causal).unwrap();
        prop_assert_eq!(&ql.token_ids[..qs.len()], &qs.token_ids[..]);
        prop_assert_eq!(&tl.token_ids[..ts.len()], &ts.token_ids[..]);
        prop_assert_eq!(&ql.emb_positions[..turns], &qs.emb_positions[..]);
        prop_assert_eq!(&ql.turn_spans[..turns], &qs.turn_spans[..]);
    }

    #[test]
    fn masking_is_seed_deterministic(words in 1usize..60, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let t = text(words);
        let a = mask_words(&t, ratio, seed, MASK);
        prop_assert_eq!(&a, &mask_words(&t, ratio, seed, MASK));
        let hidden = a.split(' ').filter(|w| *w == MASK).count();
        prop_assert_eq!(hidden, (ratio * words as f64).floor() as usize);
    }

    #[test]
    fn shuffle_is_a_permutation(turns in 1usize..8, seed in any::<u64>()) {
        let s = sample(turns);
        let sh = shuffle_turns(&s, seed);
        let mut a: Vec<_> = s.pairs.iter().map(|p| p.query_text.clone()).collect();
        let mut b: Vec<_> = sh.pairs.iter().map(|p| p.query_text.clone()).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }
}
