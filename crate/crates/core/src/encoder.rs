//! A small pre-norm transformer encoder with hand-written reverse-mode
//! gradients.
//!
//! Parameters live in one flat `f64` buffer indexed by named segments.
//! Blocks use learned positional embeddings, multi-head self-attention with
//! a per-sequence mask, a 4x GELU feed-forward layer and a final layer norm.
//! Embeddings are read off the hidden states at `<|emb|>` positions.

use std::ops::Range;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flatfile::FlatFile;
use crate::seed;
use crate::template::{AttentionMode, PackedSequence};
use crate::types::{l2_norm, EmbeddingMatrix, Role, RowLabel};

const LN_EPS: f64 = 1e-5;
const INIT_SCALE: f64 = 0.02;
const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidEncoderConfig(format!("{name} must be >= 1")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidEncoderConfig(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let per_layer = 12 * d * d + 13 * d;
        self.vocab_size * d + self.max_seq * d + self.layers * per_layer + 2 * d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    init: Init,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wqkv: usize,
    bqkv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    segments: Vec<Segment>,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &EncoderConfig) -> Self {
        let d = cfg.dim;
        let f = FFN_MULT * d;
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize, init: Init| {
            segments.push(Segment { name, offset, len, init });
            offset += len;
            offset - len
        };
        let tok_emb = push("tok_emb".into(), cfg.vocab_size * d, Init::Normal);
        let pos_emb = push("pos_emb".into(), cfg.max_seq * d, Init::Normal);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(name("ln1_g"), d, Init::Ones),
                ln1_b: push(name("ln1_b"), d, Init::Zeros),
                wqkv: push(name("wqkv"), d * 3 * d, Init::Normal),
                bqkv: push(name("bqkv"), 3 * d, Init::Zeros),
                wo: push(name("wo"), d * d, Init::Normal),
                bo: push(name("bo"), d, Init::Zeros),
                ln2_g: push(name("ln2_g"), d, Init::Ones),
                ln2_b: push(name("ln2_b"), d, Init::Zeros),
                w1: push(name("w1"), d * f, Init::Normal),
                b1: push(name("b1"), f, Init::Zeros),
                w2: push(name("w2"), f * d, Init::Normal),
                b2: push(name("b2"), d, Init::Zeros),
            });
        }
        let lnf_g = push("lnf_g".into(), d, Init::Ones);
        let lnf_b = push("lnf_b".into(), d, Init::Zeros);
        Self {
            segments,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            total: offset,
        }
    }
}

/// Encoder parameters plus their segment index.
#[derive(Debug, Clone)]
pub struct EncoderState {
    config: EncoderConfig,
    layout: Layout,
    pub params: Vec<f64>,
}

impl PartialEq for EncoderState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl EncoderState {
    /// Seeded init: `0.02 * N(0, 1)` for matrices and embeddings, zeros for
    /// biases and norm offsets, ones for norm gains.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = seed::rng(config.seed);
        let mut params = vec![0.0; layout.total];
        for seg in &layout.segments {
            let slot = &mut params[seg.range()];
            match seg.init {
                Init::Zeros => {}
                Init::Ones => slot.fill(1.0),
                Init::Normal => slot.iter_mut().for_each(|p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *p = INIT_SCALE * z;
                }),
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.layout.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.layout.segments.iter().find(|s| s.name == name)
    }

    /// Sets every segment whose name ends with one of `suffixes` to zero.
    pub fn zero_segments(&mut self, suffixes: &[&str]) {
        for seg in &self.layout.segments {
            if suffixes.iter().any(|s| seg.name.ends_with(s)) {
                self.params[seg.range()].fill(0.0);
            }
        }
    }

    pub fn to_flat(&self) -> FlatFile {
        let c = &self.config;
        let segments: Vec<String> = self
            .layout
            .segments
            .iter()
            .map(|s| format!("{}:{}", s.name, s.len))
            .collect();
        FlatFile::new(self.params.clone())
            .with("kind", "encoder")
            .with("vocab_size", c.vocab_size)
            .with("dim", c.dim)
            .with("heads", c.heads)
            .with("layers", c.layers)
            .with("max_seq", c.max_seq)
            .with("seed", c.seed)
            .with("segments", segments.join(","))
    }

    pub fn from_flat(f: &FlatFile) -> Result<Self> {
        if f.get("kind") != Some("encoder") {
            return Err(Error::MalformedFile("not an encoder checkpoint".into()));
        }
        let config = EncoderConfig {
            vocab_size: f.require_usize("vocab_size")?,
            dim: f.require_usize("dim")?,
            heads: f.require_usize("heads")?,
            layers: f.require_usize("layers")?,
            max_seq: f.require_usize("max_seq")?,
            seed: f
                .require("seed")?
                .parse()
                .map_err(|_| Error::MalformedFile("bad seed".into()))?,
        };
        config.validate()?;
        let layout = Layout::new(&config);
        let expected: Vec<String> = layout.segments.iter().map(|s| format!("{}:{}", s.name, s.len)).collect();
        if f.require("segments")? != expected.join(",") {
            return Err(Error::MalformedFile("segment table does not match the config".into()));
        }
        if f.values.len() != layout.total {
            return Err(Error::MalformedFile(format!(
                "expected {} parameters, found {}",
                layout.total,
                f.values.len()
            )));
        }
        if f.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedFile("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            layout,
            params: f.values.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_flat().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_flat(&FlatFile::load(path)?)
    }

    fn p(&self, offset: usize, len: usize) -> &[f64] {
        &self.params[offset..offset + len]
    }
}

/// Gradients of a scalar objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same layout as `EncoderState::params`.
    pub params: Vec<f64>,
    /// Gradient at the summed token + position input of every position,
    /// row-major `(len, dim)`.
    pub inputs: Vec<f64>,
}

impl Gradients {
    pub fn zeros(state: &EncoderState) -> Self {
        Self {
            params: vec![0.0; state.param_count()],
            inputs: Vec::new(),
        }
    }

    /// Adds `other`'s parameter gradient into `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: NormCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    /// Attention probabilities per head, `(heads, len, len)`; zero where masked.
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: NormCache,
    b: Vec<f64>,
    h1: Vec<f64>,
    g: Vec<f64>,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<u32>,
    allowed: Vec<bool>,
    layers: Vec<LayerCache>,
    lnf: NormCache,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Row-major `(len, dim)`.
    pub hidden: Vec<f64>,
    pub len: usize,
    pub dim: usize,
    pub cache: ForwardCache,
}

impl ForwardPass {
    pub fn row(&self, pos: usize) -> &[f64] {
        &self.hidden[pos * self.dim..(pos + 1) * self.dim]
    }
}

/// `allowed[p * len + s]`: may position `p` attend to position `s`.
pub fn attention_mask(packed: &PackedSequence) -> Vec<bool> {
    let n = packed.len();
    let turns = packed.token_turns();
    let mut allowed = vec![false; n * n];
    for p in 0..n {
        for s in 0..=p {
            allowed[p * n + s] = match packed.attention_mode {
                AttentionMode::Causal => true,
                AttentionMode::IsolatedTurns => s < packed.image_prefix_len || turns[s] == turns[p],
            };
        }
    }
    allowed
}

pub fn forward(state: &EncoderState, packed: &PackedSequence) -> Result<ForwardPass> {
    let cfg = &state.config;
    let n = packed.len();
    if n > cfg.max_seq {
        return Err(Error::SequenceTooLong { len: n, max: cfg.max_seq });
    }
    if let Some(&id) = packed.token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfVocab { id, vocab: cfg.vocab_size });
    }
    let d = cfg.dim;
    let f = FFN_MULT * d;
    let lay = &state.layout;
    let allowed = attention_mask(packed);

    let mut x = vec![0.0; n * d];
    for (p, &id) in packed.token_ids.iter().enumerate() {
        let tok = state.p(lay.tok_emb + id as usize * d, d);
        let pos = state.p(lay.pos_emb + p * d, d);
        for k in 0..d {
            x[p * d + k] = tok[k] + pos[k];
        }
    }

    let mut layers = Vec::with_capacity(cfg.layers);
    for lo in &lay.layers {
        let (a, ln1) = layer_norm(&x, d, state.p(lo.ln1_g, d), state.p(lo.ln1_b, d));
        let mut qkv = matmul(&a, state.p(lo.wqkv, d * 3 * d), n, d, 3 * d);
        add_bias(&mut qkv, state.p(lo.bqkv, 3 * d));
        let (attn, probs) = attention(&qkv, &allowed, n, d, cfg.heads);
        let mut proj = matmul(&attn, state.p(lo.wo, d * d), n, d, d);
        add_bias(&mut proj, state.p(lo.bo, d));
        add_assign(&mut x, &proj);

        let (b, ln2) = layer_norm(&x, d, state.p(lo.ln2_g, d), state.p(lo.ln2_b, d));
        let mut h1 = matmul(&b, state.p(lo.w1, d * f), n, d, f);
        add_bias(&mut h1, state.p(lo.b1, f));
        let g: Vec<f64> = h1.iter().map(|&v| gelu(v)).collect();
        let mut ff = matmul(&g, state.p(lo.w2, f * d), n, f, d);
        add_bias(&mut ff, state.p(lo.b2, d));
        add_assign(&mut x, &ff);

        layers.push(LayerCache {
            ln1,
            a,
            qkv,
            probs,
            attn,
            ln2,
            b,
            h1,
            g,
        });
    }
    let (hidden, lnf) = layer_norm(&x, d, state.p(lay.lnf_g, d), state.p(lay.lnf_b, d));
    Ok(ForwardPass {
        hidden,
        len: n,
        dim: d,
        cache: ForwardCache {
            tokens: packed.token_ids.clone(),
            allowed,
            layers,
            lnf,
        },
    })
}

/// Exact reverse-mode gradient given `d objective / d hidden` (`(len, dim)`).
pub fn backward(state: &EncoderState, cache: &ForwardCache, grad_hidden: &[f64]) -> Gradients {
    let cfg = &state.config;
    let d = cfg.dim;
    let f = FFN_MULT * d;
    let n = cache.tokens.len();
    assert_eq!(grad_hidden.len(), n * d, "upstream gradient has the wrong shape");
    let lay = &state.layout;
    let mut grads = vec![0.0; state.param_count()];

    let mut dx = layer_norm_backward(
        grad_hidden,
        &cache.lnf,
        d,
        state.p(lay.lnf_g, d),
        &mut grads,
        lay.lnf_g,
        lay.lnf_b,
    );

    for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
        // feed-forward branch
        accumulate_at_b(&mut grads[lo.w2..lo.w2 + f * d], &lc.g, &dx, n, f, d);
        accumulate_colsum(&mut grads[lo.b2..lo.b2 + d], &dx, d);
        let mut dh1 = matmul_bt(&dx, state.p(lo.w2, f * d), n, d, f);
        for (g, &h) in dh1.iter_mut().zip(&lc.h1) {
            *g *= gelu_grad(h);
        }
        accumulate_at_b(&mut grads[lo.w1..lo.w1 + d * f], &lc.b, &dh1, n, d, f);
        accumulate_colsum(&mut grads[lo.b1..lo.b1 + f], &dh1, f);
        let db = matmul_bt(&dh1, state.p(lo.w1, d * f), n, f, d);
        let dres = layer_norm_backward(&db, &lc.ln2, d, state.p(lo.ln2_g, d), &mut grads, lo.ln2_g, lo.ln2_b);
        add_assign(&mut dx, &dres);

        // attention branch
        accumulate_at_b(&mut grads[lo.wo..lo.wo + d * d], &lc.attn, &dx, n, d, d);
        accumulate_colsum(&mut grads[lo.bo..lo.bo + d], &dx, d);
        let dattn = matmul_bt(&dx, state.p(lo.wo, d * d), n, d, d);
        let dqkv = attention_backward(&dattn, &lc.qkv, &lc.probs, &cache.allowed, n, d, cfg.heads);
        accumulate_at_b(&mut grads[lo.wqkv..lo.wqkv + d * 3 * d], &lc.a, &dqkv, n, d, 3 * d);
        accumulate_colsum(&mut grads[lo.bqkv..lo.bqkv + 3 * d], &dqkv, 3 * d);
        let da = matmul_bt(&dqkv, state.p(lo.wqkv, d * 3 * d), n, 3 * d, d);
        let dres = layer_norm_backward(&da, &lc.ln1, d, state.p(lo.ln1_g, d), &mut grads, lo.ln1_g, lo.ln1_b);
        add_assign(&mut dx, &dres);
    }

    for (p, &id) in cache.tokens.iter().enumerate() {
        let row = &dx[p * d..(p + 1) * d];
        let tok = lay.tok_emb + id as usize * d;
        let pos = lay.pos_emb + p * d;
        for k in 0..d {
            grads[tok + k] += row[k];
            grads[pos + k] += row[k];
        }
    }
    Gradients { params: grads, inputs: dx }
}

/// Unit-normalized hidden states at the embedding positions, labelled by
/// `(image_index, turn, role)`.
pub fn extract_embeddings(
    pass: &ForwardPass,
    packed: &PackedSequence,
    image_index: usize,
    role: Role,
) -> Result<EmbeddingMatrix> {
    let mut rows = Vec::with_capacity(packed.emb_positions.len());
    let mut values = Vec::with_capacity(packed.emb_positions.len() * pass.dim);
    for (&pos, &turn) in packed.emb_positions.iter().zip(&packed.turn_of_position) {
        rows.push(RowLabel {
            role,
            ..RowLabel::query(image_index, turn)
        });
        values.extend_from_slice(pass.row(pos));
    }
    EmbeddingMatrix::normalized(rows, pass.dim, values)
}

/// Maps gradients at the normalized embeddings (one row per embedding
/// position) back to a full `(len, dim)` hidden-state gradient.
pub fn embedding_backward(pass: &ForwardPass, packed: &PackedSequence, grad_rows: &[f64]) -> Vec<f64> {
    let d = pass.dim;
    assert_eq!(grad_rows.len(), packed.emb_positions.len() * d);
    let mut out = vec![0.0; pass.len * d];
    for (r, &pos) in packed.emb_positions.iter().enumerate() {
        let h = pass.row(pos);
        let g = &grad_rows[r * d..(r + 1) * d];
        let norm = l2_norm(h);
        let dot: f64 = h.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / norm;
        for k in 0..d {
            let y = h[k] / norm;
            out[pos * d + k] += (g[k] - y * dot) / norm;
        }
    }
    out
}

fn attention(qkv: &[f64], allowed: &[bool], n: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = 3 * d;
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * n];
    let mut scores = vec![0.0; n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for p in 0..n {
            let q = &qkv[p * stride + qo..p * stride + qo + dh];
            let mut max = f64::NEG_INFINITY;
            for s in 0..n {
                if allowed[p * n + s] {
                    let k = &qkv[s * stride + ko..s * stride + ko + dh];
                    scores[s] = dot(q, k) * scale;
                    max = max.max(scores[s]);
                }
            }
            let row = &mut probs[(h * n + p) * n..(h * n + p + 1) * n];
            let mut sum = 0.0;
            for s in 0..n {
                if allowed[p * n + s] {
                    row[s] = (scores[s] - max).exp();
                    sum += row[s];
                }
            }
            for s in 0..n {
                if allowed[p * n + s] {
                    row[s] /= sum;
                    let v = &qkv[s * stride + vo..s * stride + vo + dh];
                    let o = &mut out[p * d + h * dh..p * d + (h + 1) * dh];
                    for k in 0..dh {
                        o[k] += row[s] * v[k];
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    dout: &[f64],
    qkv: &[f64],
    probs: &[f64],
    allowed: &[bool],
    n: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = 3 * d;
    let mut dqkv = vec![0.0; n * stride];
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for p in 0..n {
            let row = &probs[(h * n + p) * n..(h * n + p + 1) * n];
            let g = &dout[p * d + h * dh..p * d + (h + 1) * dh];
            let mut weighted = 0.0;
            for s in 0..n {
                if allowed[p * n + s] {
                    let v = &qkv[s * stride + vo..s * stride + vo + dh];
                    dp[s] = dot(g, v);
                    weighted += dp[s] * row[s];
                    for k in 0..dh {
                        dqkv[s * stride + vo + k] += row[s] * g[k];
                    }
                }
            }
            for s in 0..n {
                if allowed[p * n + s] {
                    let ds = row[s] * (dp[s] - weighted) * scale;
                    for k in 0..dh {
                        let qk = qkv[p * stride + qo + k];
                        let kk = qkv[s * stride + ko + k];
                        dqkv[p * stride + qo + k] += ds * kk;
                        dqkv[s * stride + ko + k] += ds * qk;
                    }
                }
            }
        }
    }
    dqkv
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, NormCache) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for k in 0..d {
            let xh = (row[k] - mean) * rs;
            xhat[r * d + k] = xh;
            y[r * d + k] = gain[k] * xh + bias[k];
        }
    }
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    d: usize,
    gain: &[f64],
    grads: &mut [f64],
    gain_off: usize,
    bias_off: usize,
) -> Vec<f64> {
    let n = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let g = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for k in 0..d {
            grads[gain_off + k] += g[k] * xh[k];
            grads[bias_off + k] += g[k];
            dxhat[k] = g[k] * gain[k];
            mean_dxhat += dxhat[k];
            mean_dxhat_xhat += dxhat[k] * xh[k];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for k in 0..d {
            dx[r * d + k] = cache.rstd[r] * (dxhat[k] - mean_dxhat - xh[k] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(n, k) x (k, m)`.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for (j, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                for (ov, &bv) in o.iter_mut().zip(&b[j * m..(j + 1) * m]) {
                    *ov += av * bv;
                }
            }
        }
    }
    out
}

/// `(n, m) x (k, m)^T`.
fn matmul_bt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let ar = &a[i * m..(i + 1) * m];
        for j in 0..k {
            out[i * k + j] = dot(ar, &b[j * m..(j + 1) * m]);
        }
    }
    out
}

/// `acc += a^T b` with `a: (n, k)`, `b: (n, m)`.
fn accumulate_at_b(acc: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let br = &b[i * m..(i + 1) * m];
        for (j, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                for (o, &bv) in acc[j * m..(j + 1) * m].iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn accumulate_colsum(acc: &mut [f64], x: &[f64], m: usize) {
    for row in x.chunks_exact(m) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn add_assign(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}
