//! Per-iteration FLOPs accounting for image+text contrastive training.
//!
//! Cost is affine in token counts: each sample pays for its image tokens and
//! its first query/target texts, and every extra turn only adds text tokens.
//! Forward coefficients come from two point calibrations (294 image tokens
//! at 2.24 TFLOPs, 25 text tokens at 0.12 TFLOPs); a single multiplier folds
//! in backward and anything else a training step costs.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_CALIBRATION_TOKENS: f64 = 294.0;
pub const IMAGE_CALIBRATION_FLOPS: f64 = 2.24e12;
pub const TEXT_CALIBRATION_TOKENS: f64 = 25.0;
pub const TEXT_CALIBRATION_FLOPS: f64 = 0.12e12;

/// Published batch-vs-turns rows: `(turns, batch, PFLOPs)`.
pub const SCALING_ROWS: [(usize, usize, f64); 8] = [
    (1, 1024, 17.5),
    (1, 2048, 35.1),
    (1, 4096, 70.2),
    (1, 7168, 122.7),
    (1, 8192, 140.4),
    (2, 1024, 17.6),
    (4, 1024, 17.7),
    (7, 1024, 18.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseTokens {
    pub image: usize,
    pub query_text: usize,
    pub target_text: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub flops_per_image_token: f64,
    pub flops_per_text_token: f64,
    pub backward_multiplier: f64,
    pub per_sample_base_tokens: BaseTokens,
    /// Text tokens added by each turn after the first (query + target).
    /// Fractional after fitting.
    pub per_extra_pair_tokens: f64,
}

impl Default for CostConfig {
    /// The forward calibration with multiplier and per-turn tokens fitted to
    /// the published batch/turn scaling rows.
    fn default() -> Self {
        fit_table5(&scaling_rows(), &Self::forward_calibrated())
            .expect("published rows are well conditioned")
            .config
    }
}

impl CostConfig {
    /// Forward-only calibration: multiplier 1, every turn adds one average
    /// query and one average target.
    pub fn forward_calibrated() -> Self {
        Self {
            flops_per_image_token: IMAGE_CALIBRATION_FLOPS / IMAGE_CALIBRATION_TOKENS,
            flops_per_text_token: TEXT_CALIBRATION_FLOPS / TEXT_CALIBRATION_TOKENS,
            backward_multiplier: 1.0,
            per_sample_base_tokens: BaseTokens {
                image: IMAGE_CALIBRATION_TOKENS as usize,
                query_text: TEXT_CALIBRATION_TOKENS as usize,
                target_text: TEXT_CALIBRATION_TOKENS as usize,
            },
            per_extra_pair_tokens: 2.0 * TEXT_CALIBRATION_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let coeffs = [
            self.flops_per_image_token,
            self.flops_per_text_token,
            self.backward_multiplier,
            self.per_extra_pair_tokens,
        ];
        if coeffs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::InvalidConfig("cost coefficients must be positive".into()));
        }
        Ok(())
    }

    /// Forward FLOPs of one image's visual tokens.
    pub fn image_forward(&self) -> f64 {
        self.per_sample_base_tokens.image as f64 * self.flops_per_image_token
    }

    /// Forward FLOPs of `tokens` text tokens.
    pub fn text_forward(&self, tokens: f64) -> f64 {
        tokens * self.flops_per_text_token
    }

    /// Forward FLOPs of one single-turn sample.
    pub fn base_forward(&self) -> f64 {
        let b = &self.per_sample_base_tokens;
        self.image_forward() + self.text_forward((b.query_text + b.target_text) as f64)
    }

    /// Forward FLOPs added by one more turn.
    pub fn extra_pair_forward(&self) -> f64 {
        self.text_forward(self.per_extra_pair_tokens)
    }
}

/// Total FLOPs of one training iteration.
pub fn iteration_cost(cfg: &CostConfig, batch: usize, turns: usize) -> f64 {
    assert!(batch >= 1 && turns >= 1, "batch and turns must be >= 1");
    let per_sample = cfg.base_forward() + (turns - 1) as f64 * cfg.extra_pair_forward();
    batch as f64 * cfg.backward_multiplier * per_sample
}

/// Cost of `turns` turns relative to a single turn at the same batch.
pub fn efficiency_ratio(cfg: &CostConfig, batch: usize, turns: usize) -> f64 {
    iteration_cost(cfg, batch, turns) / iteration_cost(cfg, batch, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub turns: usize,
    pub batch: usize,
    pub effective_batch: usize,
    pub pflops: f64,
}

impl ScalingRow {
    pub fn new(turns: usize, batch: usize, pflops: f64) -> Self {
        Self {
            turns,
            batch,
            effective_batch: turns * batch,
            pflops,
        }
    }
}

pub fn scaling_rows() -> Vec<ScalingRow> {
    SCALING_ROWS.iter().map(|&(t, b, p)| ScalingRow::new(t, b, p)).collect()
}

/// Reads `turns,batch,pflops` rows (with header) from CSV.
pub fn read_rows_csv(reader: impl Read) -> Result<Vec<ScalingRow>> {
    #[derive(Deserialize)]
    struct Raw {
        turns: usize,
        batch: usize,
        pflops: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize()
        .map(|r| {
            let r: Raw = r?;
            Ok(ScalingRow::new(r.turns, r.batch, r.pflops))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub config: CostConfig,
    /// Per-sample cost of the first turn, FLOPs.
    pub base_cost: f64,
    /// Per-sample cost of each further turn, FLOPs.
    pub extra_pair_cost: f64,
    /// `(predicted - observed) / observed` per input row.
    pub relative_residuals: Vec<f64>,
}

impl FitReport {
    pub fn max_relative_residual(&self) -> f64 {
        self.relative_residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// Least-squares fit of `pflops = batch * (base + (turns - 1) * extra)`.
///
/// The fitted base fixes `backward_multiplier` against the forward
/// calibration of `template`; the fitted extra cost then fixes
/// `per_extra_pair_tokens`.
pub fn fit_table5(rows: &[ScalingRow], template: &CostConfig) -> Result<FitReport> {
    if rows.len() < 2 {
        return Err(Error::DegenerateFit(format!("{} row(s); need at least 2", rows.len())));
    }
    // normal equations for columns x1 = batch, x2 = batch * (turns - 1)
    let (mut s11, mut s12, mut s22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for row in rows {
        if row.batch == 0 || row.turns == 0 {
            return Err(Error::DegenerateFit("rows need batch and turns >= 1".into()));
        }
        let y = row.pflops * 1e15;
        let x1 = row.batch as f64;
        let x2 = row.batch as f64 * (row.turns - 1) as f64;
        s11 += x1 * x1;
        s12 += x1 * x2;
        s22 += x2 * x2;
        r1 += x1 * y;
        r2 += x2 * y;
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() <= 1e-12 * s11 * s22.max(1.0) || s22 == 0.0 {
        return Err(Error::DegenerateFit("rows do not separate base and per-turn cost".into()));
    }
    let base = (s22 * r1 - s12 * r2) / det;
    let extra = (s11 * r2 - s12 * r1) / det;
    if !(base > 0.0 && extra > 0.0) {
        return Err(Error::DegenerateFit(format!(
            "non-positive fitted costs (base {base:e}, extra {extra:e})"
        )));
    }

    let multiplier = base / template.base_forward();
    let config = CostConfig {
        backward_multiplier: multiplier,
        per_extra_pair_tokens: extra / (multiplier * template.flops_per_text_token),
        ..*template
    };
    let relative_residuals = rows
        .iter()
        .map(|r| {
            let predicted = iteration_cost(&config, r.batch, r.turns) / 1e15;
            (predicted - r.pflops) / r.pflops
        })
        .collect();
    Ok(FitReport {
        config,
        base_cost: base,
        extra_pair_cost: extra,
        relative_residuals,
    })
}

/// JSON-friendly summary of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSummary {
    pub pflops: f64,
    pub effective_batch: usize,
    pub ratio: f64,
}

pub fn summarize(cfg: &CostConfig, batch: usize, turns: usize) -> CostSummary {
    CostSummary {
        pflops: iteration_cost(cfg, batch, turns) / 1e15,
        effective_batch: batch * turns,
        ratio: efficiency_ratio(cfg, batch, turns),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_calibrations() {
        let cfg = CostConfig::forward_calibrated();
        assert!((cfg.image_forward() - 2.24e12).abs() / 2.24e12 < 1e-15);
        assert!((cfg.text_forward(25.0) - 0.12e12).abs() / 0.12e12 < 1e-15);
    }

    #[test]
    fn linear_in_batch() {
        let cfg = CostConfig::default();
        assert_eq!(iteration_cost(&cfg, 2, 1), 2.0 * iteration_cost(&cfg, 1, 1));
        assert_eq!(iteration_cost(&cfg, 10, 3), 10.0 * iteration_cost(&cfg, 1, 3));
        assert_eq!(efficiency_ratio(&cfg, 64, 1), 1.0);
    }

    #[test]
    fn fit_reproduces_published_rows() {
        let fit = fit_table5(&scaling_rows(), &CostConfig::forward_calibrated()).unwrap();
        assert!(fit.max_relative_residual() < 0.02, "{:?}", fit.relative_residuals);
        let cost = iteration_cost(&fit.config, 1024, 7) / 1e15;
        assert!((cost - 18.0).abs() / 18.0 < 0.02);
        assert!(efficiency_ratio(&fit.config, 1024, 7) <= 1.05);
        let scaled = iteration_cost(&fit.config, 7168, 1) / iteration_cost(&fit.config, 1024, 1);
        assert!((scaled - 7.0).abs() / 7.0 < 0.01);
    }

    #[test]
    fn consistent_rows_fit_exactly() {
        let truth = |t: usize, b: usize| b as f64 * (1e13 + (t - 1) as f64 * 1e11) / 1e15;
        let rows: Vec<_> = [(1, 100), (1, 300), (3, 100), (5, 200)]
            .iter()
            .map(|&(t, b)| ScalingRow::new(t, b, truth(t, b)))
            .collect();
        let fit = fit_table5(&rows, &CostConfig::forward_calibrated()).unwrap();
        assert!(fit.max_relative_residual() < 1e-12);
        assert!((fit.base_cost - 1e13).abs() / 1e13 < 1e-12);
        assert!((fit.extra_pair_cost - 1e11).abs() / 1e11 < 1e-12);
    }

    #[test]
    fn degenerate_fits() {
        let one = [ScalingRow::new(1, 1024, 17.5)];
        assert!(matches!(fit_table5(&one, &CostConfig::forward_calibrated()), Err(Error::DegenerateFit(_))));
        let single_turn_only = [ScalingRow::new(1, 1024, 17.5), ScalingRow::new(1, 2048, 35.1)];
        assert!(matches!(
            fit_table5(&single_turn_only, &CostConfig::forward_calibrated()),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn default_is_fitted() {
        let cfg = CostConfig::default();
        assert!((iteration_cost(&cfg, 1024, 7) / 1e15 - 18.0).abs() < 0.36);
        assert!(cfg.backward_multiplier > 1.0);
        assert_eq!(cfg.flops_per_image_token, CostConfig::forward_calibrated().flops_per_image_token);
    }

    #[test]
    fn csv_rows() {
        let rows = read_rows_csv("turns,batch,pflops\n1, 1024, 17.5\n7,1024,18.0\n".as_bytes()).unwrap();
        assert_eq!(rows, vec![ScalingRow::new(1, 1024, 17.5), ScalingRow::new(7, 1024, 18.0)]);
        assert_eq!(rows[1].effective_batch, 7168);
    }
}
