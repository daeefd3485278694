//! Dialogue templating and token packing.
//!
//! A multi-turn sample becomes two sequences. The query side carries the
//! image prefix once, followed by one user/assistant exchange per turn that
//! ends in an embedding token. The target side repeats the exchange layout
//! with target texts and no image. Every turn contributes exactly one
//! embedding position, so turn `j`'s embedding sees turns `1..=j` under
//! causal attention.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::types::{MultiTurnSample, Variant};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatMarkup {
    pub user_open: String,
    pub user_close: String,
    pub assistant_open: String,
    pub assistant_close: String,
    pub emb_token: String,
    pub mask_token: String,
    pub image_placeholder: String,
}

impl Default for ChatMarkup {
    fn default() -> Self {
        Self {
            user_open: "<|user|>".into(),
            user_close: "<|/user|>".into(),
            assistant_open: "<|assistant|>".into(),
            assistant_close: "<|/assistant|>".into(),
            emb_token: "<|emb|>".into(),
            mask_token: "<|mask|>".into(),
            image_placeholder: "<|image|>".into(),
        }
    }
}

impl ChatMarkup {
    /// All reserved strings, in the order tokenizers assign them ids.
    pub fn tokens(&self) -> [&str; 7] {
        [
            &self.user_open,
            &self.user_close,
            &self.assistant_open,
            &self.assistant_close,
            &self.emb_token,
            &self.mask_token,
            &self.image_placeholder,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let tokens = self.tokens();
        for (i, a) in tokens.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::InvalidMarkup("markup tokens must be non-empty".into()));
            }
            if tokens[..i].contains(a) {
                return Err(Error::InvalidMarkup(format!("token `{a}` is used twice")));
            }
        }
        Ok(())
    }

    /// Rejects user-provided text that contains any reserved string.
    pub fn check_user_text(&self, text: &str) -> Result<()> {
        match self.tokens().into_iter().find(|t| text.contains(t)) {
            Some(token) => Err(Error::ReservedTokenInText {
                token: token.to_string(),
            }),
            None => Ok(()),
        }
    }

    /// One complete exchange: the user says `text`, the assistant answers
    /// with the embedding token.
    fn embed_turn(&self, text: &str) -> String {
        format!(
            "{}{}{}{}{}{}",
            self.user_open, text, self.user_close, self.assistant_open, self.emb_token, self.assistant_close
        )
    }

    fn user(&self, text: &str) -> String {
        format!("{}{}{}", self.user_open, text, self.user_close)
    }

    fn assistant(&self, text: &str) -> String {
        format!("{}{}{}", self.assistant_open, text, self.assistant_close)
    }
}

/// Pluggable text-to-id mapping. Implementations must map every markup
/// string to a single reserved id.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Result<Vec<u32>>;
    fn vocab_size(&self) -> usize;
    /// Ids reserved for pseudo-visual prefix tokens.
    fn image_ids(&self) -> Range<u32>;
}

/// Splits text into reserved-token hits and plain runs, longest match first.
#[derive(Debug, Clone)]
struct SpecialMatcher {
    // sorted longest first
    specials: Vec<(String, u32)>,
}

enum Piece<'a> {
    Special(u32),
    Plain(&'a str),
}

impl SpecialMatcher {
    fn new(markup: &ChatMarkup, first_id: u32) -> Self {
        let mut specials: Vec<(String, u32)> = markup
            .tokens()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.to_string(), first_id + i as u32))
            .collect();
        specials.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        Self { specials }
    }

    fn split<'a>(&self, text: &'a str) -> Vec<Piece<'a>> {
        let mut out = Vec::new();
        let mut plain_start = 0;
        let mut i = 0;
        while i < text.len() {
            if !text.is_char_boundary(i) {
                i += 1;
                continue;
            }
            let rest = &text[i..];
            if let Some((s, id)) = self.specials.iter().find(|(s, _)| rest.starts_with(s.as_str())) {
                if plain_start < i {
                    out.push(Piece::Plain(&text[plain_start..i]));
                }
                out.push(Piece::Special(*id));
                i += s.len();
                plain_start = i;
            } else {
                i += 1;
            }
        }
        if plain_start < text.len() {
            out.push(Piece::Plain(&text[plain_start..]));
        }
        out
    }
}

/// Byte-level tokenizer: ids `0..256` are raw bytes, followed by the seven
/// markup ids, followed by `image_slots` pseudo-visual ids.
#[derive(Debug, Clone)]
pub struct ByteTokenizer {
    matcher: SpecialMatcher,
    image_slots: u32,
}

impl ByteTokenizer {
    pub const SPECIAL_BASE: u32 = 256;
    pub const DEFAULT_IMAGE_SLOTS: u32 = 32;

    pub fn new(markup: &ChatMarkup, image_slots: u32) -> Result<Self> {
        markup.validate()?;
        Ok(Self {
            matcher: SpecialMatcher::new(markup, Self::SPECIAL_BASE),
            image_slots,
        })
    }
}

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(text.len());
        for piece in self.matcher.split(text) {
            match piece {
                Piece::Special(id) => ids.push(id),
                Piece::Plain(s) => ids.extend(s.bytes().map(u32::from)),
            }
        }
        Ok(ids)
    }

    fn vocab_size(&self) -> usize {
        (Self::SPECIAL_BASE + 7 + self.image_slots) as usize
    }

    fn image_ids(&self) -> Range<u32> {
        let start = Self::SPECIAL_BASE + 7;
        start..start + self.image_slots
    }
}

/// Whitespace word tokenizer over a closed vocabulary. Id 0 is `<unk>`,
/// then markup ids, then image ids, then the vocabulary words.
#[derive(Debug, Clone)]
pub struct WordTokenizer {
    matcher: SpecialMatcher,
    image_slots: u32,
    words: HashMap<String, u32>,
}

impl WordTokenizer {
    pub const UNK: u32 = 0;

    pub fn new<I, S>(markup: &ChatMarkup, image_slots: u32, words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        markup.validate()?;
        let mut next = 1 + 7 + image_slots;
        let mut map = HashMap::new();
        for w in words {
            let w = w.into();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::TokenizerFailure(format!("invalid vocabulary word `{w}`")));
            }
            map.entry(w).or_insert_with(|| {
                next += 1;
                next - 1
            });
        }
        Ok(Self {
            matcher: SpecialMatcher::new(markup, 1),
            image_slots,
            words: map,
        })
    }
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for piece in self.matcher.split(text) {
            match piece {
                Piece::Special(id) => ids.push(id),
                Piece::Plain(s) => ids.extend(
                    s.split_whitespace()
                        .map(|w| self.words.get(w).copied().unwrap_or(Self::UNK)),
                ),
            }
        }
        Ok(ids)
    }

    fn vocab_size(&self) -> usize {
        1 + 7 + self.image_slots as usize + self.words.len()
    }

    fn image_ids(&self) -> Range<u32> {
        8..8 + self.image_slots
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Causal,
    /// Each turn sees the image prefix and its own earlier tokens only.
    IsolatedTurns,
}

/// A tokenized dialogue with the positions of its embedding tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub token_ids: Vec<u32>,
    pub emb_positions: Vec<usize>,
    /// Turn index of each entry of `emb_positions`.
    pub turn_of_position: Vec<usize>,
    /// Token range of every turn, in turn order, after the image prefix.
    pub turn_spans: Vec<Range<usize>>,
    pub attention_mode: AttentionMode,
    pub image_prefix_len: usize,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Turn of every token; `None` for the image prefix.
    pub fn token_turns(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.token_ids.len()];
        for (t, span) in self.turn_spans.iter().enumerate() {
            for slot in &mut out[span.clone()] {
                *slot = Some(t);
            }
        }
        out
    }

    /// Copy with a different attention mode.
    pub fn with_mode(&self, mode: AttentionMode) -> Self {
        Self {
            attention_mode: mode,
            ..self.clone()
        }
    }
}

struct SequenceBuilder<'a> {
    tokenizer: &'a dyn Tokenizer,
    emb_id: u32,
    seq: PackedSequence,
}

impl<'a> SequenceBuilder<'a> {
    fn new(tokenizer: &'a dyn Tokenizer, markup: &ChatMarkup, mode: AttentionMode) -> Result<Self> {
        let emb_id = single_id(tokenizer, &markup.emb_token)?;
        Ok(Self {
            tokenizer,
            emb_id,
            seq: PackedSequence {
                token_ids: Vec::new(),
                emb_positions: Vec::new(),
                turn_of_position: Vec::new(),
                turn_spans: Vec::new(),
                attention_mode: mode,
                image_prefix_len: 0,
            },
        })
    }

    fn image_prefix(&mut self, ids: &[u32]) {
        debug_assert!(self.seq.token_ids.is_empty());
        self.seq.token_ids.extend_from_slice(ids);
        self.seq.image_prefix_len = ids.len();
    }

    /// Appends one turn of already-assembled markup text.
    fn turn(&mut self, text: &str) -> Result<()> {
        let turn = self.seq.turn_spans.len();
        let start = self.seq.token_ids.len();
        for id in self.tokenizer.encode(text)? {
            if id == self.emb_id {
                self.seq.emb_positions.push(self.seq.token_ids.len());
                self.seq.turn_of_position.push(turn);
            }
            self.seq.token_ids.push(id);
        }
        self.seq.turn_spans.push(start..self.seq.token_ids.len());
        Ok(())
    }

    fn finish(self) -> PackedSequence {
        self.seq
    }
}

fn single_id(tokenizer: &dyn Tokenizer, token: &str) -> Result<u32> {
    match tokenizer.encode(token)?.as_slice() {
        [id] => Ok(*id),
        other => Err(Error::TokenizerFailure(format!(
            "reserved token `{token}` encodes to {} ids, expected 1",
            other.len()
        ))),
    }
}

/// Image prefix ids: the placeholder followed by `count` pseudo-visual ids
/// drawn deterministically from the image id. Empty when `count == 0`.
pub fn image_prefix(
    image_id: &str,
    count: usize,
    markup: &ChatMarkup,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<u32>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let range = tokenizer.image_ids();
    if range.is_empty() {
        return Err(Error::TokenizerFailure("tokenizer has no image ids".into()));
    }
    let mut ids = Vec::with_capacity(count + 1);
    ids.push(single_id(tokenizer, &markup.image_placeholder)?);
    let mut rng = seed::rng(seed::hash_str(image_id));
    ids.extend((0..count).map(|_| rng.random_range(range.clone())));
    Ok(ids)
}

/// Packs a sample into its query-side and target-side sequences.
pub fn pack_multiturn(
    sample: &MultiTurnSample,
    markup: &ChatMarkup,
    tokenizer: &dyn Tokenizer,
    mode: AttentionMode,
) -> Result<(PackedSequence, PackedSequence)> {
    markup.validate()?;
    for pair in &sample.pairs {
        markup.check_user_text(&pair.query_text)?;
        markup.check_user_text(&pair.target_text)?;
    }

    let mut query = SequenceBuilder::new(tokenizer, markup, mode)?;
    query.image_prefix(&image_prefix(&sample.image_id, sample.image_tokens, markup, tokenizer)?);
    let mut target = SequenceBuilder::new(tokenizer, markup, mode)?;
    for pair in &sample.pairs {
        query.turn(&markup.embed_turn(&pair.query_text))?;
        target.turn(&markup.embed_turn(&pair.target_text))?;
    }
    Ok((query.finish(), target.finish()))
}

/// Seeded uniform permutation of the sample's pairs.
pub fn shuffle_turns(sample: &MultiTurnSample, seed: u64) -> MultiTurnSample {
    let mut out = sample.clone();
    out.pairs.shuffle(&mut seed::rng(seed));
    out
}

/// Replaces `floor(ratio * words)` distinct space-separated words with
/// `mask_token`. Empty text has no words.
pub fn mask_words(text: &str, ratio: f64, seed: u64, mask_token: &str) -> String {
    if text.is_empty() {
        return String::new();
    }
    let mut words: Vec<&str> = text.split(' ').collect();
    for i in masked_indices(words.len(), ratio, seed) {
        words[i] = mask_token;
    }
    words.join(" ")
}

/// Indices chosen by a partial Fisher-Yates pass, in selection order.
fn masked_indices(n: usize, ratio: f64, seed: u64) -> Vec<usize> {
    let ratio = ratio.clamp(0.0, 1.0);
    let m = ((ratio * n as f64).floor() as usize).min(n);
    let mut rng = seed::rng(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateVariant {
    /// Rewrite request, masked counterpart, reconstruction request.
    #[default]
    Reconstruction,
    /// A fixed rephrasing request with no counterpart.
    Rephrasing,
    /// Like `Reconstruction` but the masked content is the side's own text.
    SelfReconstruction,
    /// Like `Reconstruction` with a plain embedding request in place of the
    /// reconstruction instruction.
    NoGuidance,
}

impl std::str::FromStr for TemplateVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "reconstruction" => Ok(Self::Reconstruction),
            "rephrasing" => Ok(Self::Rephrasing),
            "self_reconstruction" => Ok(Self::SelfReconstruction),
            "no_guidance" => Ok(Self::NoGuidance),
            other => Err(format!("unknown template variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub pi1: String,
    pub pi2: String,
    pub rephrase: String,
    pub plain_request: String,
    pub mask_ratio: f64,
    pub template_variant: TemplateVariant,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            pi1: "Please rewrite your last response in human-readable language".into(),
            pi2: "Reconstruct the previous response, acknowledge my query, and seamlessly integrate the answer"
                .into(),
            rephrase: "Please rephrase your last response in embedding space".into(),
            plain_request: "Please represent the conversation above".into(),
            mask_ratio: 0.5,
            template_variant: TemplateVariant::Reconstruction,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::InvalidConfig(format!(
                "mask_ratio must lie in [0, 1], got {}",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

/// Markup plus prompt defaults, loadable from a TOML file with optional
/// `[markup]` and `[prompts]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateConfig {
    pub markup: ChatMarkup,
    pub prompts: PromptConfig,
}

impl TemplateConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.markup.validate()?;
        cfg.prompts.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Supplies text for image content ahead of adaptation (offline captioning).
pub trait Captioner {
    fn caption(&self, image_ref: &str) -> Result<String>;
}

/// One side of a fine-tuning pair, possibly carrying an image.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Content {
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub text: String,
}

impl Content {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            image: None,
            text: text.into(),
        }
    }

    /// Text-only form: the caption of any image, then the text.
    pub fn resolve(&self, captioner: &dyn Captioner) -> Result<String> {
        match &self.image {
            None => Ok(self.text.clone()),
            Some(image) => {
                let caption = captioner.caption(image)?;
                Ok(match self.text.is_empty() {
                    true => caption,
                    false => format!("{caption} {}", self.text),
                })
            }
        }
    }
}

/// Initial and subsequent turns of one adapted side, as markup text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptedSide {
    pub initial: String,
    pub subsequent: String,
}

impl AdaptedSide {
    pub fn original(&self) -> &str {
        &self.initial
    }

    pub fn augmented(&self) -> String {
        format!("{}{}", self.initial, self.subsequent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptedPair {
    pub query: AdaptedSide,
    pub target: AdaptedSide,
}

/// Builds `(q, q')` and `(p, p')` for single-pair fine-tuning. Image content
/// must already be replaced by captions.
pub fn build_adapted_pair(
    query: &str,
    target: &str,
    cfg: &PromptConfig,
    markup: &ChatMarkup,
    seed: u64,
) -> Result<AdaptedPair> {
    markup.validate()?;
    cfg.validate()?;
    for text in [query, target, &cfg.pi1, &cfg.pi2, &cfg.rephrase, &cfg.plain_request] {
        markup.check_user_text(text)?;
    }
    let query_seed = seed::derive(seed, 0);
    let target_seed = seed::derive(seed, 1);
    Ok(AdaptedPair {
        query: adapted_side(query, target, query_seed, cfg, markup),
        target: adapted_side(target, query, target_seed, cfg, markup),
    })
}

fn adapted_side(own: &str, counterpart: &str, seed: u64, cfg: &PromptConfig, markup: &ChatMarkup) -> AdaptedSide {
    let masked = |text: &str| mask_words(text, cfg.mask_ratio, seed, &markup.mask_token);
    let request = |masked_text: String, closing: &str| {
        format!(
            "{}{}{}",
            markup.user(&cfg.pi1),
            markup.assistant(&masked_text),
            markup.embed_turn(closing)
        )
    };
    let subsequent = match cfg.template_variant {
        TemplateVariant::Reconstruction => request(masked(counterpart), &cfg.pi2),
        TemplateVariant::SelfReconstruction => request(masked(own), &cfg.pi2),
        TemplateVariant::NoGuidance => request(masked(counterpart), &cfg.plain_request),
        TemplateVariant::Rephrasing => markup.embed_turn(&cfg.rephrase),
    };
    AdaptedSide {
        initial: markup.embed_turn(own),
        subsequent,
    }
}

/// Packs one adapted side. The original form has one embedding position;
/// the augmented form has two (initial, subsequent).
pub fn pack_adapted(
    side: &AdaptedSide,
    form: Variant,
    prefix: &[u32],
    markup: &ChatMarkup,
    tokenizer: &dyn Tokenizer,
    mode: AttentionMode,
) -> Result<PackedSequence> {
    let mut b = SequenceBuilder::new(tokenizer, markup, mode)?;
    b.image_prefix(prefix);
    b.turn(&side.initial)?;
    if form == Variant::Augmented {
        b.turn(&side.subsequent)?;
    }
    let seq = b.finish();
    let expected = if form == Variant::Augmented { 2 } else { 1 };
    if seq.emb_positions.len() != expected {
        return Err(Error::TokenizerFailure(format!(
            "adapted side has {} embedding tokens, expected {expected}",
            seq.emb_positions.len()
        )));
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{TaskTag, TurnPair};

    fn sample(k: usize, image_tokens: usize) -> MultiTurnSample {
        MultiTurnSample {
            image_id: "img-7".into(),
            image_tokens,
            pairs: (0..k)
                .map(|j| TurnPair::new(format!("what is item {j}?"), format!("item {j} is red"), TaskTag::Generic))
                .collect(),
        }
    }

    fn byte_tok() -> ByteTokenizer {
        ByteTokenizer::new(&ChatMarkup::default(), 32).unwrap()
    }

    #[test]
    fn seven_turns_give_seven_embeddings() {
        let (q, t) = pack_multiturn(&sample(7, 4), &ChatMarkup::default(), &byte_tok(), AttentionMode::Causal).unwrap();
        assert_eq!(q.emb_positions.len(), 7);
        assert_eq!(t.emb_positions.len(), 7);
        assert_eq!(q.turn_of_position, (0..7).collect::<Vec<_>>());
        assert_eq!(q.image_prefix_len, 5);
        assert_eq!(t.image_prefix_len, 0);
    }

    #[test]
    fn single_turn_layout() {
        let markup = ChatMarkup::default();
        let tok = byte_tok();
        let (q, t) = pack_multiturn(&sample(1, 0), &markup, &tok, AttentionMode::Causal).unwrap();
        assert_eq!(q.emb_positions.len(), 1);
        assert_eq!(t.token_ids, tok.encode(&markup.embed_turn("item 0 is red")).unwrap());
    }

    #[test]
    fn layout_matches_string_oracle() {
        // assemble the whole dialogue as one string and tokenize it at once
        let markup = ChatMarkup::default();
        let tok = byte_tok();
        let s = sample(3, 2);
        let (q, t) = pack_multiturn(&s, &markup, &tok, AttentionMode::Causal).unwrap();

        let mut query_text = String::new();
        let mut target_text = String::new();
        for p in &s.pairs {
            query_text += &format!("<|user|>{}<|/user|><|assistant|><|emb|><|/assistant|>", p.query_text);
            target_text += &format!("<|user|>{}<|/user|><|assistant|><|emb|><|/assistant|>", p.target_text);
        }
        let prefix = image_prefix(&s.image_id, 2, &markup, &tok).unwrap();
        assert_eq!(prefix[0], tok.encode("<|image|>").unwrap()[0]);
        let mut expected = prefix.clone();
        expected.extend(tok.encode(&query_text).unwrap());
        assert_eq!(q.token_ids, expected);
        assert_eq!(t.token_ids, tok.encode(&target_text).unwrap());

        let emb = tok.encode("<|emb|>").unwrap()[0];
        let scanned: Vec<usize> = q.token_ids.iter().enumerate().filter(|(_, &id)| id == emb).map(|(i, _)| i).collect();
        assert_eq!(q.emb_positions, scanned);
    }

    #[test]
    fn image_placeholder_once() {
        let markup = ChatMarkup::default();
        let tok = byte_tok();
        let placeholder = tok.encode(&markup.image_placeholder).unwrap()[0];
        for k in 1..=7 {
            let (q, t) = pack_multiturn(&sample(k, 3), &markup, &tok, AttentionMode::Causal).unwrap();
            assert_eq!(q.token_ids.iter().filter(|&&id| id == placeholder).count(), 1);
            assert_eq!(t.token_ids.iter().filter(|&&id| id == placeholder).count(), 0);
        }
    }

    #[test]
    fn cumulative_positions() {
        let (q, _) = pack_multiturn(&sample(5, 3), &ChatMarkup::default(), &byte_tok(), AttentionMode::Causal).unwrap();
        for (j, &pos) in q.emb_positions.iter().enumerate() {
            assert!(q.turn_spans[..=j].iter().all(|s| s.end <= pos + 2));
            assert!(q.turn_spans[j].contains(&pos));
            if j + 1 < q.turn_spans.len() {
                assert!(pos < q.turn_spans[j + 1].start);
            }
        }
    }

    #[test]
    fn reserved_token_rejected() {
        let mut s = sample(2, 0);
        s.pairs[1].query_text = "sneaky <|emb|> text".into();
        let err = pack_multiturn(&s, &ChatMarkup::default(), &byte_tok(), AttentionMode::Causal).unwrap_err();
        assert!(matches!(err, Error::ReservedTokenInText { token } if token == "<|emb|>"));
    }

    #[test]
    fn markup_validation() {
        let mut m = ChatMarkup::default();
        m.mask_token = m.emb_token.clone();
        assert!(m.validate().is_err());
        m.mask_token = String::new();
        assert!(m.validate().is_err());
    }

    #[test]
    fn shuffle_k1_identity_and_determinism() {
        let s = sample(1, 0);
        assert_eq!(shuffle_turns(&s, 99), s);
        let s7 = sample(7, 0);
        assert_eq!(shuffle_turns(&s7, 5), shuffle_turns(&s7, 5));
    }

    #[test]
    fn shuffle_preserves_multiset_and_varies() {
        let s = sample(7, 0);
        let mut differing = 0;
        for seed in 0..100u64 {
            let a = shuffle_turns(&s, seed);
            let b = shuffle_turns(&s, seed + 1000);
            let mut sorted: Vec<_> = a.pairs.iter().map(|p| p.query_text.clone()).collect();
            sorted.sort();
            let mut orig: Vec<_> = s.pairs.iter().map(|p| p.query_text.clone()).collect();
            orig.sort();
            assert_eq!(sorted, orig);
            if a != b {
                differing += 1;
            }
        }
        assert!(differing > 0);
    }

    #[test]
    fn mask_ratio_edges() {
        assert_eq!(mask_words("a b c", 0.0, 1, "<|mask|>"), "a b c");
        assert_eq!(mask_words("a b c", 1.0, 1, "<|mask|>"), "<|mask|> <|mask|> <|mask|>");
        assert_eq!(mask_words("", 1.0, 1, "<|mask|>"), "");
        // floor(0.5 * 3) = 1
        let out = mask_words("a b c", 0.5, 3, "#");
        assert_eq!(out.split(' ').filter(|w| *w == "#").count(), 1);
    }

    #[test]
    fn adapted_reconstruction_layout() {
        let markup = ChatMarkup::default();
        let cfg = PromptConfig::default();
        let pair = build_adapted_pair("what color is the car", "the car is red and shiny", &cfg, &markup, 7).unwrap();
        let aug = pair.query.augmented();
        assert!(aug.starts_with("<|user|>what color is the car<|/user|>"));
        let pi1 = aug.find(&cfg.pi1).unwrap();
        let pi2 = aug.find(&cfg.pi2).unwrap();
        assert!(pi1 < pi2);
        let masked = &aug[pi1..pi2];
        assert_eq!(masked.matches("<|mask|>").count(), 3); // floor(0.5 * 6)
        assert_eq!(aug.matches("<|emb|>").count(), 2);
        assert!(aug.ends_with("<|emb|><|/assistant|>"));
        assert_eq!(pair.query.original().matches("<|emb|>").count(), 1);
        // target side masks the query
        let t_aug = pair.target.augmented();
        assert_eq!(t_aug.matches("<|mask|>").count(), 2); // floor(0.5 * 5)
    }

    #[test]
    fn adapted_rephrasing_has_no_counterpart() {
        let cfg = PromptConfig {
            template_variant: TemplateVariant::Rephrasing,
            ..PromptConfig::default()
        };
        let pair = build_adapted_pair("q words here", "p words here", &cfg, &ChatMarkup::default(), 1).unwrap();
        assert_eq!(
            pair.query.subsequent,
            "<|user|>Please rephrase your last response in embedding space<|/user|><|assistant|><|emb|><|/assistant|>"
        );
        assert!(!pair.query.subsequent.contains("p words"));
    }

    #[test]
    fn adapted_ratio_zero_keeps_counterpart() {
        let cfg = PromptConfig {
            mask_ratio: 0.0,
            ..PromptConfig::default()
        };
        let pair = build_adapted_pair("the query", "the full target text", &cfg, &ChatMarkup::default(), 1).unwrap();
        assert!(pair.query.subsequent.contains("<|assistant|>the full target text<|/assistant|>"));
        assert!(pair.target.subsequent.contains("<|assistant|>the query<|/assistant|>"));
    }

    #[test]
    fn adapted_self_and_no_guidance() {
        let markup = ChatMarkup::default();
        let base = PromptConfig {
            mask_ratio: 0.0,
            ..PromptConfig::default()
        };
        let self_cfg = PromptConfig {
            template_variant: TemplateVariant::SelfReconstruction,
            ..base.clone()
        };
        let pair = build_adapted_pair("own query", "other target", &self_cfg, &markup, 1).unwrap();
        assert!(pair.query.subsequent.contains("<|assistant|>own query<|/assistant|>"));

        let ng = PromptConfig {
            template_variant: TemplateVariant::NoGuidance,
            ..base
        };
        let pair = build_adapted_pair("own query", "other target", &ng, &markup, 1).unwrap();
        assert!(!pair.query.subsequent.contains(&ng.pi2));
        assert!(pair.query.subsequent.contains(&ng.plain_request));
    }

    #[test]
    fn adapted_is_deterministic() {
        let cfg = PromptConfig::default();
        let m = ChatMarkup::default();
        let a = build_adapted_pair("a b c d e f", "g h i j", &cfg, &m, 11).unwrap();
        let b = build_adapted_pair("a b c d e f", "g h i j", &cfg, &m, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pack_adapted_embeddings() {
        let markup = ChatMarkup::default();
        let tok = byte_tok();
        let pair = build_adapted_pair("q a b", "p c d", &PromptConfig::default(), &markup, 3).unwrap();
        let prefix = image_prefix("img", 2, &markup, &tok).unwrap();
        let orig = pack_adapted(&pair.query, Variant::Original, &prefix, &markup, &tok, AttentionMode::Causal).unwrap();
        let aug = pack_adapted(&pair.query, Variant::Augmented, &prefix, &markup, &tok, AttentionMode::Causal).unwrap();
        assert_eq!(orig.emb_positions.len(), 1);
        assert_eq!(aug.emb_positions.len(), 2);
        assert_eq!(aug.token_ids[..orig.len()], orig.token_ids[..]);
    }

    #[test]
    fn word_tokenizer_maps_words_and_specials() {
        let markup = ChatMarkup::default();
        let tok = WordTokenizer::new(&markup, 4, ["red", "car"]).unwrap();
        let ids = tok.encode("<|user|>red  car blue<|/user|>").unwrap();
        assert_eq!(ids, vec![1, 12, 13, WordTokenizer::UNK, 2]);
        assert_eq!(tok.vocab_size(), 1 + 7 + 4 + 2);
        assert_eq!(tok.image_ids(), 8..12);
    }

    #[test]
    fn template_config_from_toml() {
        let cfg = TemplateConfig::from_toml_str(
            "[markup]\nmask_token = \"___\"\n[prompts]\nmask_ratio = 0.25\ntemplate_variant = \"no_guidance\"\n",
        )
        .unwrap();
        assert_eq!(cfg.markup.mask_token, "___");
        assert_eq!(cfg.markup.emb_token, "<|emb|>");
        assert_eq!(cfg.prompts.mask_ratio, 0.25);
        assert_eq!(cfg.prompts.template_variant, TemplateVariant::NoGuidance);
        assert!(TemplateConfig::from_toml_str("[prompts]\nmask_ratio = 1.5\n").is_err());
    }

    struct FixedCaption;
    impl Captioner for FixedCaption {
        fn caption(&self, image_ref: &str) -> Result<String> {
            Ok(format!("a photo of {image_ref}"))
        }
    }

    #[test]
    fn content_resolves_images_to_captions() {
        let c = Content {
            image: Some("dog.jpg".into()),
            text: "find similar".into(),
        };
        assert_eq!(c.resolve(&FixedCaption).unwrap(), "a photo of dog.jpg find similar");
        assert_eq!(Content::text("plain").resolve(&FixedCaption).unwrap(), "plain");
    }
}
