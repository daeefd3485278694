//! Central finite-difference checks of the analytic gradients.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::contrast::{build_mask_pretrain, loss_kernel, MaskedLogitSpec};
use crate::encoder::{EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::harness::{batch_loss, ModelShape, TokenizerKind, TrainConfig};
use crate::seed;
use crate::template::{TemplateConfig, Tokenizer, WordTokenizer};
use crate::types::{LossConfig, MultiTurnSample, RowLabel, TaskTag, TurnPair};

pub const LOSS_STEP: f64 = 1e-6;
pub const ENCODER_STEP: f64 = 1e-5;
/// Components smaller than this fraction of the largest analytic component
/// are compared against that scale instead of their own magnitude, where
/// finite-difference roundoff would otherwise dominate.
pub const SCALE_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// `‖a - n‖₂ / max(‖a‖₂, ‖n‖₂)`: the pass/fail metric. Immune to the
/// roundoff that dominates near-zero components at small steps.
pub fn norm_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Both error measures for one gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradError {
    /// Norm-wise relative error; compared against the tolerance.
    pub relative: f64,
    /// Worst component-wise relative error (diagnostic).
    pub max_component: f64,
    pub checked: usize,
}

impl GradError {
    pub fn between(analytic: &[f64], numeric: &[f64]) -> Self {
        Self {
            relative: norm_relative_error(analytic, numeric),
            max_component: max_relative_error(analytic, numeric),
            checked: analytic.len(),
        }
    }
}

/// Worst component-wise relative error with the scale-aware floor
/// `SCALE_FLOOR * max|analytic|`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let floor = SCALE_FLOOR * analytic.iter().fold(0.0, |m: f64, a| m.max(a.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n, floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub dim: usize,
    pub images: usize,
    pub turns: usize,
    pub seed: u64,
    pub tol: f64,
    pub temperature: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            images: 2,
            turns: 2,
            seed: 0,
            tol: 1e-4,
            temperature: LossConfig::default().temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub loss: GradError,
    pub encoder: GradError,
    pub tol: f64,
    pub passed: bool,
}

fn random_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    for row in v.chunks_mut(dim) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Loss gradient with respect to every query and target coordinate versus
/// central differences.
pub fn check_loss_gradients(
    spec: &MaskedLogitSpec,
    queries: &[f64],
    targets: &[f64],
    dim: usize,
    temperature: f64,
) -> Result<GradError> {
    // query buffer rows follow the sorted distinct term queries
    let mut distinct: Vec<RowLabel> = spec.queries().to_vec();
    distinct.sort();
    distinct.dedup();
    let query_rows = spec.query_rows_in(&distinct)?;
    if queries.len() != distinct.len() * dim {
        return Err(Error::ShapeMismatch("query buffer does not match the spec".into()));
    }
    let eval = |q: &[f64], t: &[f64]| loss_kernel(spec, &query_rows, q, t, dim, temperature);
    let base = eval(queries, targets);
    let mut numeric = Vec::with_capacity(queries.len() + targets.len());
    let (mut q, mut t) = (queries.to_vec(), targets.to_vec());
    for i in 0..q.len() {
        let x = q[i];
        q[i] = x + LOSS_STEP;
        let up = eval(&q, &t).report.total;
        q[i] = x - LOSS_STEP;
        let down = eval(&q, &t).report.total;
        q[i] = x;
        numeric.push((up - down) / (2.0 * LOSS_STEP));
    }
    for i in 0..t.len() {
        let x = t[i];
        t[i] = x + LOSS_STEP;
        let up = eval(&q, &t).report.total;
        t[i] = x - LOSS_STEP;
        let down = eval(&q, &t).report.total;
        t[i] = x;
        numeric.push((up - down) / (2.0 * LOSS_STEP));
    }
    let analytic: Vec<f64> = base.grad_queries.iter().chain(&base.grad_targets).copied().collect();
    Ok(GradError::between(&analytic, &numeric))
}

/// Small word-level batch used by the encoder check.
pub fn gradcheck_batch(images: usize, turns: usize) -> Vec<MultiTurnSample> {
    (0..images)
        .map(|i| MultiTurnSample {
            image_id: format!("g{i}"),
            image_tokens: 2,
            pairs: (0..turns)
                .map(|j| TurnPair::new(format!("w{} w{}", (i + j) % 5, (2 * i + j) % 5), format!("w{} w{}", (i + 2 * j) % 5, j % 5), TaskTag::Generic))
                .collect(),
        })
        .collect()
}

/// Analytic versus numeric gradient of the batch loss for every encoder
/// parameter, on a word-level model with `dim` hidden units.
pub fn check_encoder_gradients(cfg: &GradcheckConfig) -> Result<GradError> {
    let (a, n) = encoder_gradient_pairs(cfg)?;
    Ok(GradError::between(&a, &n))
}

/// Analytic and central-difference gradients for every encoder parameter.
pub fn encoder_gradient_pairs(cfg: &GradcheckConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let template = TemplateConfig::default();
    let tokenizer = WordTokenizer::new(&template.markup, 4, (0..5).map(|w| format!("w{w}")))?;
    let batch = gradcheck_batch(cfg.images, cfg.turns);
    let train = TrainConfig {
        batch_images: cfg.images,
        turns_per_image: cfg.turns,
        loss: LossConfig::with_temperature(cfg.temperature),
        model: ModelShape {
            dim: cfg.dim,
            heads: 2,
            layers: 1,
            max_seq: 3 + 7 * cfg.turns,
        },
        tokenizer: TokenizerKind::Word,
        template,
        ..TrainConfig::default()
    };
    train.validate()?;
    let enc = EncoderConfig {
        vocab_size: tokenizer.vocab_size(),
        dim: cfg.dim,
        heads: 2,
        layers: 1,
        max_seq: train.model.max_seq,
        seed: cfg.seed,
    };
    let mut state = EncoderState::init(enc)?;
    // larger weights than the default init so every path carries signal
    let mut rng = seed::rng(seed::derive(cfg.seed, 7));
    for p in state.params.iter_mut() {
        *p += 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    let step_seed = seed::derive(cfg.seed, 11);
    let loss_at = |s: &EncoderState| -> Result<f64> { Ok(batch_loss(s, &batch, &train, &tokenizer, step_seed)?.0.report.total) };
    let (_, grads) = batch_loss(&state, &batch, &train, &tokenizer, step_seed)?;
    let mut numeric = Vec::with_capacity(grads.len());
    for i in 0..state.params.len() {
        let x = state.params[i];
        state.params[i] = x + ENCODER_STEP;
        let up = loss_at(&state)?;
        state.params[i] = x - ENCODER_STEP;
        let down = loss_at(&state)?;
        state.params[i] = x;
        numeric.push((up - down) / (2.0 * ENCODER_STEP));
    }
    Ok((grads, numeric))
}


/// Both checks on random instances derived from `cfg.seed`.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.dim == 0 || cfg.images == 0 || cfg.turns == 0 || cfg.dim % 2 != 0 {
        return Err(Error::InvalidConfig("gradcheck needs dim even and >= 2, images >= 1, turns >= 1".into()));
    }
    let mut rng = seed::rng(cfg.seed);
    let labels = |role: fn(usize, usize) -> RowLabel| -> Vec<RowLabel> {
        (0..cfg.images).flat_map(|i| (0..cfg.turns).map(move |j| role(i, j))).collect()
    };
    let (ql, tl) = (labels(RowLabel::query), labels(RowLabel::target));
    let spec = build_mask_pretrain(&ql, &tl)?;
    let q = random_rows(&mut rng, ql.len(), cfg.dim);
    let t = random_rows(&mut rng, tl.len(), cfg.dim);
    let loss = check_loss_gradients(&spec, &q, &t, cfg.dim, cfg.temperature)?;
    let encoder = check_encoder_gradients(cfg)?;
    Ok(GradcheckReport {
        loss,
        encoder,
        tol: cfg.tol,
        passed: loss.relative < cfg.tol && encoder.relative < cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1, 0.0) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-7) - 1e-2).abs() < 1e-12);
        // tiny components are judged against the largest one
        let e = max_relative_error(&[10.0, 0.0], &[10.0, 1e-9]);
        assert!((e - 1e-9 / 1e-2).abs() < 1e-15);
    }

    #[test]
    fn norm_error() {
        assert_eq!(norm_relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((norm_relative_error(&[3.0, 4.0], &[3.0, 4.5]) - 0.5 / 4.5f64.hypot(3.0)).abs() < 1e-15);
    }

    #[test]
    fn small_run_passes() {
        let r = run(&GradcheckConfig {
            dim: 4,
            images: 2,
            turns: 2,
            ..GradcheckConfig::default()
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
