//! Domain types shared across the engine.
//!
//! Everything here is immutable after construction and only carries
//! validation logic.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the Euclidean norm of an embedding row.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Cls,
    Ret,
    GlobalVqa,
    LocalVqa,
    CreativeVqa,
    Generic,
}

impl TaskTag {
    pub const ALL: [TaskTag; 6] = [
        TaskTag::Cls,
        TaskTag::Ret,
        TaskTag::GlobalVqa,
        TaskTag::LocalVqa,
        TaskTag::CreativeVqa,
        TaskTag::Generic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::Cls => "cls",
            TaskTag::Ret => "ret",
            TaskTag::GlobalVqa => "global_vqa",
            TaskTag::LocalVqa => "local_vqa",
            TaskTag::CreativeVqa => "creative_vqa",
            TaskTag::Generic => "generic",
        }
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One query/target text pair attached to an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnPair {
    pub query_text: String,
    pub target_text: String,
    #[serde(default = "default_tag")]
    pub task_tag: TaskTag,
}

fn default_tag() -> TaskTag {
    TaskTag::Generic
}

impl TurnPair {
    pub fn new(query: impl Into<String>, target: impl Into<String>, tag: TaskTag) -> Self {
        Self {
            query_text: query.into(),
            target_text: target.into(),
            task_tag: tag,
        }
    }
}

/// One image context with `k >= 1` ordered query/target pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiTurnSample {
    pub image_id: String,
    #[serde(default)]
    pub image_tokens: usize,
    pub pairs: Vec<TurnPair>,
}

impl MultiTurnSample {
    pub fn turns(&self) -> usize {
        self.pairs.len()
    }

    fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyPairs(self.image_id.clone()));
        }
        for (i, pair) in self.pairs.iter().enumerate() {
            for (field, text) in [("query", &pair.query_text), ("target", &pair.target_text)] {
                if text.trim().is_empty() {
                    return Err(Error::EmptyText {
                        image_id: self.image_id.clone(),
                        pair: i,
                        field,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Checks every sample invariant plus pairwise-distinct image ids.
///
/// Uniqueness is batch-local: the same image may appear in two different
/// batches.
pub fn validate_batch(samples: Vec<MultiTurnSample>) -> Result<Vec<MultiTurnSample>> {
    let mut seen = HashSet::with_capacity(samples.len());
    for sample in &samples {
        sample.validate()?;
        if !seen.insert(sample.image_id.as_str()) {
            return Err(Error::DuplicateImageId(sample.image_id.clone()));
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    /// Only produced by the single-turn adaptation path.
    Augmented,
}

impl Variant {
    /// The opposite form: augmented for original and vice versa.
    pub fn counterpart(self) -> Self {
        match self {
            Variant::Original => Variant::Augmented,
            Variant::Augmented => Variant::Original,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowLabel {
    pub image_index: usize,
    pub turn_index: usize,
    pub role: Role,
    pub variant: Variant,
}

impl RowLabel {
    pub fn query(image_index: usize, turn_index: usize) -> Self {
        Self {
            image_index,
            turn_index,
            role: Role::Query,
            variant: Variant::Original,
        }
    }

    pub fn target(image_index: usize, turn_index: usize) -> Self {
        Self {
            image_index,
            turn_index,
            role: Role::Target,
            variant: Variant::Original,
        }
    }

    pub fn with_variant(self, variant: Variant) -> Self {
        Self { variant, ..self }
    }

    /// Compact `image:turn:role:variant` form used in flat-file headers.
    pub fn encode(&self) -> String {
        let role = match self.role {
            Role::Query => 'q',
            Role::Target => 't',
        };
        let variant = match self.variant {
            Variant::Original => 'o',
            Variant::Augmented => 'a',
        };
        format!("{}:{}:{}:{}", self.image_index, self.turn_index, role, variant)
    }

    pub fn decode(s: &str) -> Option<Self> {
        let mut parts = s.split(':');
        let image_index = parts.next()?.parse().ok()?;
        let turn_index = parts.next()?.parse().ok()?;
        let role = match parts.next()? {
            "q" => Role::Query,
            "t" => Role::Target,
            _ => return None,
        };
        let variant = match parts.next()? {
            "o" => Variant::Original,
            "a" => Variant::Augmented,
            _ => return None,
        };
        if parts.next().is_some() {
            return None;
        }
        Some(Self {
            image_index,
            turn_index,
            role,
            variant,
        })
    }
}

/// Row-major matrix of unit-norm embeddings with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Vec<RowLabel>,
    dim: usize,
    values: Vec<f64>,
}

impl EmbeddingMatrix {
    /// Wraps already-normalized rows, rejecting any row off the unit sphere.
    pub fn new(rows: Vec<RowLabel>, dim: usize, values: Vec<f64>) -> Result<Self> {
        check_shape(&rows, dim, &values)?;
        for (r, row) in values.chunks_exact(dim).enumerate() {
            let norm = l2_norm(row);
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NonUnitEmbedding { row: r, norm });
            }
        }
        Ok(Self { rows, dim, values })
    }

    /// Normalizes every row to unit length. Zero rows are rejected.
    pub fn normalized(rows: Vec<RowLabel>, dim: usize, mut values: Vec<f64>) -> Result<Self> {
        check_shape(&rows, dim, &values)?;
        for (r, row) in values.chunks_exact_mut(dim).enumerate() {
            let norm = l2_norm(row);
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::NonUnitEmbedding { row: r, norm });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Self::new(rows, dim, values)
    }

    pub fn rows(&self) -> &[RowLabel] {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Concatenates two matrices of equal dimension.
    pub fn concat(&self, other: &EmbeddingMatrix) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::ShapeMismatch(format!(
                "cannot concatenate dim {} with dim {}",
                self.dim, other.dim
            )));
        }
        let mut rows = self.rows.clone();
        rows.extend_from_slice(&other.rows);
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Ok(Self {
            rows,
            dim: self.dim,
            values,
        })
    }
}

fn check_shape(rows: &[RowLabel], dim: usize, values: &[f64]) -> Result<()> {
    if dim == 0 {
        return Err(Error::ShapeMismatch("dim must be >= 1".into()));
    }
    if rows.len() * dim != values.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows x dim {} != {} values",
            rows.len(),
            dim,
            values.len()
        )));
    }
    Ok(())
}

pub(crate) fn l2_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
    pub mask_same_image: bool,
    pub mask_counterpart: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.02,
            mask_same_image: true,
            mask_counterpart: true,
        }
    }
}

impl LossConfig {
    pub fn with_temperature(temperature: f64) -> Self {
        Self {
            temperature,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidLossConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, k: usize) -> MultiTurnSample {
        MultiTurnSample {
            image_id: id.into(),
            image_tokens: 4,
            pairs: (0..k)
                .map(|j| TurnPair::new(format!("q{j}"), format!("p{j}"), TaskTag::Generic))
                .collect(),
        }
    }

    #[test]
    fn distinct_ids_validate() {
        let batch = vec![sample("a", 7), sample("b", 7)];
        assert_eq!(validate_batch(batch.clone()).unwrap(), batch);
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = validate_batch(vec![sample("a", 2), sample("a", 3)]).unwrap_err();
        assert!(matches!(err, Error::DuplicateImageId(id) if id == "a"));
    }

    #[test]
    fn empty_pairs_rejected() {
        let err = validate_batch(vec![sample("a", 0)]).unwrap_err();
        assert!(matches!(err, Error::EmptyPairs(_)));
    }

    #[test]
    fn whitespace_text_rejected() {
        let mut s = sample("a", 2);
        s.pairs[1].target_text = "  \t".into();
        let err = validate_batch(vec![s]).unwrap_err();
        assert!(matches!(err, Error::EmptyText { pair: 1, field: "target", .. }));
    }

    #[test]
    fn duplicate_queries_allowed() {
        let mut s = sample("a", 2);
        s.pairs[1].query_text = s.pairs[0].query_text.clone();
        assert!(validate_batch(vec![s]).is_ok());
    }

    #[test]
    fn validation_is_idempotent() {
        let batch = vec![sample("x", 3), sample("y", 1)];
        let once = validate_batch(batch).unwrap();
        let twice = validate_batch(once.clone()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn embedding_matrix_checks_norm() {
        let rows = vec![RowLabel::query(0, 0)];
        assert!(EmbeddingMatrix::new(rows.clone(), 2, vec![0.6, 0.8]).is_ok());
        assert!(matches!(
            EmbeddingMatrix::new(rows.clone(), 2, vec![1.0, 1.0]),
            Err(Error::NonUnitEmbedding { .. })
        ));
        assert!(matches!(
            EmbeddingMatrix::new(rows, 3, vec![1.0, 0.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn normalized_constructor_yields_unit_rows() {
        let rows = vec![RowLabel::query(0, 0), RowLabel::query(0, 1)];
        let m = EmbeddingMatrix::normalized(rows, 3, vec![3.0, 0.0, 4.0, 1e-3, 2e-3, -5e-3]).unwrap();
        for i in 0..m.len() {
            assert!((l2_norm(m.row(i)) - 1.0).abs() <= UNIT_NORM_TOL);
        }
        assert!(EmbeddingMatrix::normalized(vec![RowLabel::query(0, 0)], 2, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn label_codec() {
        let l = RowLabel::target(3, 1).with_variant(Variant::Augmented);
        assert_eq!(l.encode(), "3:1:t:a");
        assert_eq!(RowLabel::decode("3:1:t:a"), Some(l));
        assert_eq!(RowLabel::decode("3:1:x:a"), None);
        assert_eq!(RowLabel::decode("3:1:t:a:9"), None);
    }

    #[test]
    fn loss_config_defaults() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.temperature, 0.02);
        assert!(cfg.mask_same_image && cfg.mask_counterpart);
        assert!(LossConfig::with_temperature(0.0).validate().is_err());
    }
}
