//! Desk-scale training and retrieval evaluation.
//!
//! Ties templating, the encoder and the contrastive losses into a
//! deterministic training loop, plus a seeded synthetic corpus on which
//! retrieval is learnable at toy scale.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::{build_mask_finetune, build_mask_pretrain, muco_loss, naive_multipair_loss, single_turn_infonce, LossOutput};
use crate::costmodel::{summarize, CostConfig, CostSummary};
use crate::encoder::{self, EncoderConfig, EncoderState, ForwardPass, Gradients};
use crate::error::{Error, Result};
use crate::seed;
use crate::template::{
    build_adapted_pair, image_prefix, pack_adapted, pack_multiturn, shuffle_turns, AttentionMode, ByteTokenizer,
    PackedSequence, TemplateConfig, Tokenizer, WordTokenizer,
};
use crate::types::{validate_batch, EmbeddingMatrix, LossConfig, MultiTurnSample, Role, RowLabel, TaskTag, TurnPair, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    Muco,
    Naive,
    /// Plain InfoNCE; requires `turns_per_image = 1`.
    SingleTurn,
    /// One pair per image expanded into original and augmented forms.
    FinetuneAdapted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    #[default]
    Byte,
    /// Whitespace words drawn from the training corpus and prompts.
    Word,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_seq: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            layers: 2,
            max_seq: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_images: usize,
    pub turns_per_image: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub attention_mode: AttentionMode,
    pub loss_variant: LossVariant,
    pub loss: LossConfig,
    pub model: ModelShape,
    pub tokenizer: TokenizerKind,
    pub template: TemplateConfig,
    pub recall_ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_images: 8,
            turns_per_image: 7,
            steps: 300,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            seed: 0,
            attention_mode: AttentionMode::Causal,
            loss_variant: LossVariant::Muco,
            loss: LossConfig::default(),
            model: ModelShape::default(),
            tokenizer: TokenizerKind::Byte,
            template: TemplateConfig::default(),
            recall_ks: vec![1, 5, 10],
        }
    }
}

/// Constant learning rate used at a given global batch size in the
/// large-scale batch/turn scaling runs.
pub fn scaled_learning_rate(batch_images: usize) -> f64 {
    match batch_images {
        0..=2048 => 5e-5,
        2049..=4096 => 1e-4,
        _ => 2e-4,
    }
}

impl TrainConfig {
    /// `toy` is the default; `paper` switches to the large-scale constant
    /// learning rate with Adam.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::default()),
            "paper" => Ok(Self {
                learning_rate: scaled_learning_rate(1024),
                optimizer: Optimizer::Adam,
                ..Self::default()
            }),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_images == 0 || self.turns_per_image == 0 {
            return Err(Error::InvalidConfig("batch_images and turns_per_image must be >= 1".into()));
        }
        if self.loss_variant == LossVariant::SingleTurn && self.turns_per_image != 1 {
            return Err(Error::InvalidConfig("single_turn requires turns_per_image = 1".into()));
        }
        if self.recall_ks.contains(&0) {
            return Err(Error::InvalidConfig("recall cut-offs must be >= 1".into()));
        }
        self.loss.validate()?;
        self.template.markup.validate()?;
        self.template.prompts.validate()
    }

    /// Parses TOML; an optional top-level `preset` key selects the base.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(s)?;
        let base = match table.remove("preset") {
            Some(toml::Value::String(name)) => Self::preset(&name)?,
            Some(other) => return Err(Error::InvalidConfig(format!("preset must be a string, got {other}"))),
            None => Self::default(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        merge_tables(&mut merged, table);
        let cfg: Self = merged.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Distinct whitespace words of the corpus and prompts, in first-seen order.
pub fn corpus_vocabulary(corpus: &[MultiTurnSample], template: &TemplateConfig) -> Vec<String> {
    let p = &template.prompts;
    let prompt_texts = [&p.pi1, &p.pi2, &p.rephrase, &p.plain_request];
    let texts = corpus
        .iter()
        .flat_map(|s| &s.pairs)
        .flat_map(|pair| [&pair.query_text, &pair.target_text])
        .chain(prompt_texts);
    let mut seen = HashSet::new();
    let mut words = Vec::new();
    for text in texts {
        for w in text.split_whitespace() {
            if template.markup.tokens().iter().any(|t| w.contains(t)) {
                continue;
            }
            if seen.insert(w) {
                words.push(w.to_string());
            }
        }
    }
    words
}

pub const IMAGE_SLOTS: u32 = 32;

pub fn build_tokenizer(kind: TokenizerKind, template: &TemplateConfig, words: &[String]) -> Result<Box<dyn Tokenizer>> {
    Ok(match kind {
        TokenizerKind::Byte => Box::new(ByteTokenizer::new(&template.markup, IMAGE_SLOTS)?),
        TokenizerKind::Word => Box::new(WordTokenizer::new(&template.markup, IMAGE_SLOTS, words.iter().cloned())?),
    })
}

pub fn encoder_config(cfg: &TrainConfig, tokenizer: &dyn Tokenizer) -> EncoderConfig {
    EncoderConfig {
        vocab_size: tokenizer.vocab_size(),
        dim: cfg.model.dim,
        heads: cfg.model.heads,
        layers: cfg.model.layers,
        max_seq: cfg.model.max_seq,
        seed: seed::derive(cfg.seed, 0x1417),
    }
}

/// One held-out single-turn retrieval pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub image_id: String,
    #[serde(default)]
    pub image_tokens: usize,
    pub query: String,
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub images: usize,
    pub turns: usize,
    /// Size of each image's private word slice.
    pub slice_words: usize,
    /// Slice words per query or target text.
    pub words_per_text: usize,
    pub image_tokens: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            images: 64,
            turns: 7,
            slice_words: 12,
            words_per_text: 3,
            image_tokens: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<MultiTurnSample>,
    pub eval: Vec<EvalPair>,
}

const FUNCTION_WORDS: [&str; 10] = ["the", "a", "of", "which", "is", "with", "and", "show", "near", "this"];

/// Seeded corpus in which every image owns a disjoint word slice; texts mix
/// slice words with shared function words. Each image also gets one
/// held-out pair whose query differs from all of its training queries.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.images == 0 || spec.turns == 0 || spec.words_per_text == 0 || spec.slice_words < spec.words_per_text {
        return Err(Error::InvalidConfig(format!("degenerate synthetic corpus spec {spec:?}")));
    }
    let mut rng = seed::rng(seed::derive(spec.seed, 0x5e7));
    let text = |image: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut words: Vec<String> = (0..2)
            .map(|_| FUNCTION_WORDS[rng.random_range(0..FUNCTION_WORDS.len())].to_string())
            .collect();
        for m in index::sample(rng, spec.slice_words, spec.words_per_text) {
            words.push(format!("x{image}y{m}"));
        }
        words.join(" ")
    };
    let mut train = Vec::with_capacity(spec.images);
    let mut eval = Vec::with_capacity(spec.images);
    for i in 0..spec.images {
        let image_id = format!("syn-{i:04}");
        let pairs: Vec<TurnPair> = (0..spec.turns)
            .map(|_| TurnPair::new(text(i, &mut rng), text(i, &mut rng), TaskTag::Generic))
            .collect();
        let used: HashSet<&str> = pairs.iter().map(|p| p.query_text.as_str()).collect();
        let query = loop {
            let q = text(i, &mut rng);
            if !used.contains(q.as_str()) {
                break q;
            }
        };
        eval.push(EvalPair {
            image_id: image_id.clone(),
            image_tokens: spec.image_tokens,
            query,
            target: text(i, &mut rng),
        });
        train.push(MultiTurnSample {
            image_id,
            image_tokens: spec.image_tokens,
            pairs,
        });
    }
    Ok(SyntheticCorpus { train, eval })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_update(params: &mut [f64], grads: &[f64], lr: f64, adam: Option<&mut Adam>) {
    match adam {
        None => params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g),
        Some(a) => {
            a.t += 1;
            let (c1, c2) = (1.0 - BETA1.powi(a.t), 1.0 - BETA2.powi(a.t));
            for i in 0..params.len() {
                a.m[i] = BETA1 * a.m[i] + (1.0 - BETA1) * grads[i];
                a.v[i] = BETA2 * a.v[i] + (1.0 - BETA2) * grads[i] * grads[i];
                params[i] -= lr * (a.m[i] / c1) / ((a.v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Runs `f` over `items` on scoped threads and returns results in input
/// order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if threads <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, x)| f(c * chunk + i, x))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

struct Side {
    packed: PackedSequence,
    pass: ForwardPass,
    emb: EmbeddingMatrix,
}

fn encode_side(state: &EncoderState, packed: PackedSequence, image: usize, role: Role, augmented: bool) -> Result<Side> {
    let pass = encoder::forward(state, &packed)?;
    let mut emb = encoder::extract_embeddings(&pass, &packed, image, role)?;
    if augmented {
        // the second embedding of an augmented sequence is the augmented form
        // of turn 0
        let rows = emb
            .rows()
            .iter()
            .enumerate()
            .map(|(r, l)| match r {
                0 => RowLabel { turn_index: 0, ..*l },
                _ => RowLabel { turn_index: 0, ..*l }.with_variant(Variant::Augmented),
            })
            .collect();
        emb = EmbeddingMatrix::new(rows, emb.dim(), emb.values().to_vec())?;
    }
    Ok(Side { packed, pass, emb })
}

fn concat(parts: impl Iterator<Item = EmbeddingMatrix>) -> Result<EmbeddingMatrix> {
    let mut out: Option<EmbeddingMatrix> = None;
    for m in parts {
        out = Some(match out {
            None => m,
            Some(acc) => acc.concat(&m)?,
        });
    }
    out.ok_or_else(|| Error::ShapeMismatch("empty batch".into()))
}

/// Loss and parameter gradient for one batch, with the batch's samples
/// labelled by their position. Turns are shuffled with `step_seed` and
/// truncated to `turns_per_image`.
pub fn batch_loss(
    state: &EncoderState,
    batch: &[MultiTurnSample],
    cfg: &TrainConfig,
    tokenizer: &dyn Tokenizer,
    step_seed: u64,
) -> Result<(LossOutput, Vec<f64>)> {
    let markup = &cfg.template.markup;
    let mode = cfg.attention_mode;
    let finetune = cfg.loss_variant == LossVariant::FinetuneAdapted;

    let sides = par_map(batch, |b, sample| -> Result<(Side, Side)> {
        let mut s = shuffle_turns(sample, seed::derive(step_seed, b as u64));
        s.pairs.truncate(if finetune { 1 } else { cfg.turns_per_image });
        if finetune {
            let pair = &s.pairs[0];
            let adapted = build_adapted_pair(
                &pair.query_text,
                &pair.target_text,
                &cfg.template.prompts,
                markup,
                seed::derive(step_seed, 0xada0 + b as u64),
            )?;
            let prefix = image_prefix(&s.image_id, s.image_tokens, markup, tokenizer)?;
            let q = pack_adapted(&adapted.query, Variant::Augmented, &prefix, markup, tokenizer, mode)?;
            let t = pack_adapted(&adapted.target, Variant::Augmented, &[], markup, tokenizer, mode)?;
            Ok((encode_side(state, q, b, Role::Query, true)?, encode_side(state, t, b, Role::Target, true)?))
        } else {
            let (q, t) = pack_multiturn(&s, markup, tokenizer, mode)?;
            Ok((encode_side(state, q, b, Role::Query, false)?, encode_side(state, t, b, Role::Target, false)?))
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let queries = concat(sides.iter().map(|(q, _)| q.emb.clone()))?;
    let targets = concat(sides.iter().map(|(_, t)| t.emb.clone()))?;
    let out = match cfg.loss_variant {
        LossVariant::Muco => muco_loss(&queries, &targets, &build_mask_pretrain(queries.rows(), targets.rows())?, &cfg.loss)?,
        LossVariant::Naive => {
            naive_multipair_loss(&queries, &targets, &build_mask_pretrain(queries.rows(), targets.rows())?, &cfg.loss)?
        }
        LossVariant::SingleTurn => single_turn_infonce(&queries, &targets, &cfg.loss)?,
        LossVariant::FinetuneAdapted => {
            muco_loss(&queries, &targets, &build_mask_finetune(queries.rows(), targets.rows())?, &cfg.loss)?
        }
    };

    // row offsets of each side inside the concatenated matrices
    let d = queries.dim();
    let mut jobs = Vec::with_capacity(2 * sides.len());
    let (mut qo, mut to) = (0, 0);
    for (q, t) in &sides {
        let (qn, tn) = (q.emb.len() * d, t.emb.len() * d);
        jobs.push((q, &out.grad_queries[qo..qo + qn]));
        jobs.push((t, &out.grad_targets[to..to + tn]));
        qo += qn;
        to += tn;
    }
    let grads = par_map(&jobs, |_, (side, g)| {
        let upstream = encoder::embedding_backward(&side.pass, &side.packed, g);
        encoder::backward(state, &side.pass.cache, &upstream)
    });
    // fixed reduction order: sample ascending, query side before target side
    let mut total = Gradients::zeros(state);
    for g in &grads {
        total.accumulate(g);
    }
    Ok((out, total.params))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: EncoderState,
    /// Loss at every step, measured before that step's update.
    pub losses: Vec<f64>,
}

/// Trains a fresh encoder on `corpus`.
pub fn train(corpus: &[MultiTurnSample], cfg: &TrainConfig, tokenizer: &dyn Tokenizer) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus = validate_batch(corpus.to_vec())?;
    if cfg.batch_images > corpus.len() {
        return Err(Error::InvalidConfig(format!(
            "batch_images {} exceeds corpus size {}",
            cfg.batch_images,
            corpus.len()
        )));
    }
    let mut state = EncoderState::init(encoder_config(cfg, tokenizer))?;
    let mut adam = (cfg.optimizer == Optimizer::Adam).then(|| Adam {
        m: vec![0.0; state.param_count()],
        v: vec![0.0; state.param_count()],
        t: 0,
    });
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let step_seed = seed::derive(cfg.seed, step as u64 + 1);
        let mut rng = seed::rng(step_seed);
        let batch: Vec<MultiTurnSample> = index::sample(&mut rng, corpus.len(), cfg.batch_images)
            .into_iter()
            .map(|i| corpus[i].clone())
            .collect();
        let (out, grads) = batch_loss(&state, &batch, cfg, tokenizer, step_seed)?;
        log::debug!("step {step}: loss {:.6}", out.report.total);
        losses.push(out.report.total);
        apply_update(&mut state.params, &grads, cfg.learning_rate, adam.as_mut());
    }
    Ok(TrainOutcome { state, losses })
}

pub fn write_loss_csv(mut w: impl Write, losses: &[f64]) -> Result<()> {
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision_at_1: f64,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub candidates: usize,
    pub queries: usize,
}

/// Ranks every target for every query by dot product (cosine on unit rows)
/// and scores against `relevant[q]`. Ties go to the lower target index.
pub fn rank_report(queries: &EmbeddingMatrix, targets: &EmbeddingMatrix, relevant: &[usize], ks: &[usize]) -> Result<EvalReport> {
    if queries.is_empty() || targets.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if relevant.len() != queries.len() || queries.dim() != targets.dim() {
        return Err(Error::ShapeMismatch("queries, targets and relevance labels disagree".into()));
    }
    let c = targets.len();
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut top1 = 0;
    for (qi, &rel) in relevant.iter().enumerate() {
        let q = queries.row(qi);
        let sim = |t: usize| -> f64 { q.iter().zip(targets.row(t)).map(|(a, b)| a * b).sum() };
        let s_rel = sim(rel);
        // rank of the relevant target: strictly better, or equal with a lower index
        let rank = (0..c)
            .filter(|&t| t != rel && (sim(t) > s_rel || (sim(t) == s_rel && t < rel)))
            .count();
        if rank == 0 {
            top1 += 1;
        }
        for (&k, h) in hits.iter_mut() {
            if rank < k {
                *h += 1;
            }
        }
    }
    let n = relevant.len() as f64;
    Ok(EvalReport {
        precision_at_1: top1 as f64 / n,
        recall_at_k: hits.into_iter().map(|(k, h)| (k, h as f64 / n)).collect(),
        candidates: c,
        queries: relevant.len(),
    })
}

/// Encodes each query and target as a one-turn sequence and scores
/// retrieval of the paired target among all targets.
pub fn evaluate(state: &EncoderState, eval: &[EvalPair], cfg: &TrainConfig, tokenizer: &dyn Tokenizer) -> Result<EvalReport> {
    if eval.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let markup = &cfg.template.markup;
    let encoded = par_map(eval, |i, pair| -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
        let sample = MultiTurnSample {
            image_id: pair.image_id.clone(),
            image_tokens: pair.image_tokens,
            pairs: vec![TurnPair::new(pair.query.clone(), pair.target.clone(), TaskTag::Generic)],
        };
        let (q, t) = pack_multiturn(&sample, markup, tokenizer, cfg.attention_mode)?;
        let q = encode_side(state, q, i, Role::Query, false)?.emb;
        let t = encode_side(state, t, i, Role::Target, false)?.emb;
        Ok((q, t))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let queries = concat(encoded.iter().map(|(q, _)| q.clone()))?;
    let targets = concat(encoded.iter().map(|(_, t)| t.clone()))?;
    let relevant: Vec<usize> = (0..eval.len()).collect();
    rank_report(&queries, &targets, &relevant, &cfg.recall_ks)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingArm {
    pub turns: usize,
    pub batch: usize,
    pub precision_at_1: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub cost: CostSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub single_turn: ScalingArm,
    pub multi_turn: ScalingArm,
    /// Single-turn run at batch `B·k`: same effective batch as multi-turn.
    pub batch_scaled: CostSummary,
}

/// Trains and evaluates `(turns = 1, batch = B)` and `(turns = k, batch = B)`
/// with equal steps and image budget; costs come from `cost`.
pub fn compare_scaling(
    corpus: &[MultiTurnSample],
    eval: &[EvalPair],
    base: &TrainConfig,
    tokenizer: &dyn Tokenizer,
    cost: &CostConfig,
) -> Result<ScalingReport> {
    let k = base.turns_per_image;
    if k < 2 {
        return Err(Error::InvalidConfig("compare_scaling needs turns_per_image >= 2".into()));
    }
    if let Some(s) = corpus.iter().find(|s| s.pairs.len() < k) {
        return Err(Error::InvalidConfig(format!("{} has fewer than {k} pairs", s.image_id)));
    }
    let arm = |turns: usize, variant: LossVariant| -> Result<ScalingArm> {
        let cfg = TrainConfig {
            turns_per_image: turns,
            loss_variant: variant,
            ..base.clone()
        };
        let outcome = train(corpus, &cfg, tokenizer)?;
        let report = evaluate(&outcome.state, eval, &cfg, tokenizer)?;
        Ok(ScalingArm {
            turns,
            batch: cfg.batch_images,
            precision_at_1: report.precision_at_1,
            initial_loss: outcome.losses[0],
            final_loss: *outcome.losses.last().expect("steps >= 1"),
            cost: summarize(cost, cfg.batch_images, turns),
        })
    };
    Ok(ScalingReport {
        single_turn: arm(1, LossVariant::SingleTurn)?,
        multi_turn: arm(k, base.loss_variant)?,
        batch_scaled: summarize(cost, base.batch_images * k, 1),
    })
}

/// Gradient of turn `turn`'s loss term at the query side's token inputs,
/// for the first sample of `batch`. Rows are `(len, dim)`; the returned
/// sequence gives the turn spans.
pub fn turn_input_gradient(
    state: &EncoderState,
    batch: &[MultiTurnSample],
    turn: usize,
    cfg: &TrainConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<(Vec<f64>, PackedSequence)> {
    let markup = &cfg.template.markup;
    let mut sides = Vec::with_capacity(batch.len());
    for (b, s) in batch.iter().enumerate() {
        let (q, t) = pack_multiturn(s, markup, tokenizer, cfg.attention_mode)?;
        sides.push((encode_side(state, q, b, Role::Query, false)?, encode_side(state, t, b, Role::Target, false)?));
    }
    let queries = concat(sides.iter().map(|(q, _)| q.emb.clone()))?;
    let targets = concat(sides.iter().map(|(_, t)| t.emb.clone()))?;
    let term = RowLabel::query(0, turn);
    if !queries.rows().contains(&term) {
        return Err(Error::MissingAlignedPositive(term));
    }
    let spec = build_mask_pretrain(&[term], targets.rows())?;
    let out = muco_loss(&queries, &targets, &spec, &cfg.loss)?;
    let first = &sides[0].0;
    let g = &out.grad_queries[..first.emb.len() * queries.dim()];
    let upstream = encoder::embedding_backward(&first.pass, &first.packed, g);
    let grads = encoder::backward(state, &first.pass.cache, &upstream);
    Ok((grads.inputs, first.packed.clone()))
}
