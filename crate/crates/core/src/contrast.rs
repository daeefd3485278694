//! Logit masks and contrastive losses.
//!
//! Every loss here is the same kernel: a temperature-scaled softmax over one
//! row of query/target cosine similarities, restricted to the row's positive
//! and its negatives. What changes between variants is the mask:
//!
//! * pretraining masks every other target of the query's own image,
//! * fine-tuning masks the opposite form (original vs augmented) of the
//!   term's positive,
//! * the naive multi-pair loss masks nothing.
//!
//! Masked entries get `-inf` logits, which the kernel realizes by skipping
//! them, so they never contribute to the max, the partition sum, or the
//! gradient.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::types::{EmbeddingMatrix, LossConfig, Role, RowLabel, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskReason {
    /// Another target of the query's own image.
    SameImage,
    /// The opposite form of the term's positive target.
    Counterpart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntryKind {
    Positive,
    Negative,
    Masked(MaskReason),
}

/// Classification of every (term, target) entry of the logit matrix.
///
/// Rows are loss terms. A query appears once per positive it owns, so in
/// fine-tuning the same query label heads two rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLogitSpec {
    queries: Vec<RowLabel>,
    targets: Vec<RowLabel>,
    kind: Vec<EntryKind>,
}

impl MaskedLogitSpec {
    pub fn queries(&self) -> &[RowLabel] {
        &self.queries
    }

    pub fn targets(&self) -> &[RowLabel] {
        &self.targets
    }

    pub fn n_terms(&self) -> usize {
        self.queries.len()
    }

    pub fn kind(&self, term: usize, target: usize) -> EntryKind {
        self.kind[term * self.targets.len() + target]
    }

    pub fn row(&self, term: usize) -> &[EntryKind] {
        let n = self.targets.len();
        &self.kind[term * n..(term + 1) * n]
    }

    pub fn positive(&self, term: usize) -> usize {
        self.row(term)
            .iter()
            .position(|k| *k == EntryKind::Positive)
            .expect("every term has a positive")
    }

    pub fn count(&self, term: usize, kind: EntryKind) -> usize {
        self.row(term).iter().filter(|k| **k == kind).count()
    }

    pub fn negatives(&self, term: usize) -> usize {
        self.count(term, EntryKind::Negative)
    }

    pub fn masked(&self, term: usize) -> usize {
        self.row(term).iter().filter(|k| matches!(k, EntryKind::Masked(_))).count()
    }

    /// Smallest negative count over all terms.
    pub fn effective_negatives_per_query(&self) -> usize {
        (0..self.n_terms()).map(|t| self.negatives(t)).min().unwrap_or(0)
    }

    /// Turns masks disabled by `cfg` back into negatives.
    pub fn with_toggles(&self, cfg: &LossConfig) -> Self {
        self.demote(|reason| match reason {
            MaskReason::SameImage => !cfg.mask_same_image,
            MaskReason::Counterpart => !cfg.mask_counterpart,
        })
    }

    /// Every masked entry becomes a negative.
    pub fn unmasked(&self) -> Self {
        self.demote(|_| true)
    }

    fn demote(&self, demote: impl Fn(MaskReason) -> bool) -> Self {
        let kind = self
            .kind
            .iter()
            .map(|&k| match k {
                EntryKind::Masked(r) if demote(r) => EntryKind::Negative,
                other => other,
            })
            .collect();
        Self {
            queries: self.queries.clone(),
            targets: self.targets.clone(),
            kind,
        }
    }

    /// Index of each term's query within `rows`.
    pub fn query_rows_in(&self, rows: &[RowLabel]) -> Result<Vec<usize>> {
        let index: HashMap<&RowLabel, usize> = rows.iter().enumerate().map(|(i, l)| (l, i)).collect();
        if index.len() != rows.len() {
            return Err(Error::LabelMismatch("duplicate query row labels".into()));
        }
        self.queries
            .iter()
            .map(|q| {
                index
                    .get(q)
                    .copied()
                    .ok_or_else(|| Error::LabelMismatch(format!("no query row labelled {q:?}")))
            })
            .collect()
    }
}

fn check_unique(labels: &[RowLabel], what: &str) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for l in labels {
        if !seen.insert(l) {
            return Err(Error::LabelMismatch(format!("duplicate {what} label {l:?}")));
        }
    }
    Ok(())
}

/// Pretraining mask: the aligned target `(i, j)` is positive, other targets
/// of image `i` are masked, targets of other images are negatives.
pub fn build_mask_pretrain(queries: &[RowLabel], targets: &[RowLabel]) -> Result<MaskedLogitSpec> {
    check_unique(queries, "query")?;
    check_unique(targets, "target")?;
    let mut kind = Vec::with_capacity(queries.len() * targets.len());
    for q in queries {
        let mut has_positive = false;
        for t in targets {
            let k = if t.image_index != q.image_index {
                EntryKind::Negative
            } else if t.turn_index == q.turn_index && t.variant == q.variant {
                has_positive = true;
                EntryKind::Positive
            } else {
                EntryKind::Masked(MaskReason::SameImage)
            };
            kind.push(k);
        }
        if !has_positive {
            return Err(Error::MissingAlignedPositive(*q));
        }
    }
    Ok(MaskedLogitSpec {
        queries: queries.to_vec(),
        targets: targets.to_vec(),
        kind,
    })
}

/// Fine-tuning mask over original and augmented forms.
///
/// Each image contributes query rows `{q, q'}` and target columns `{p, p'}`
/// and four terms `(q,p), (q,p'), (q',p), (q',p')`. Within a term the
/// counterpart of its positive is masked; both forms of every other image
/// are negatives.
pub fn build_mask_finetune(queries: &[RowLabel], targets: &[RowLabel]) -> Result<MaskedLogitSpec> {
    check_unique(queries, "query")?;
    check_unique(targets, "target")?;
    // image -> (query forms, target forms)
    let mut images: BTreeMap<usize, ([Option<RowLabel>; 2], [Option<RowLabel>; 2])> = BTreeMap::new();
    let slot = |v: Variant| match v {
        Variant::Original => 0,
        Variant::Augmented => 1,
    };
    for q in queries {
        images.entry(q.image_index).or_default().0[slot(q.variant)] = Some(*q);
    }
    for t in targets {
        images.entry(t.image_index).or_default().1[slot(t.variant)] = Some(*t);
    }

    let mut terms = Vec::new();
    let mut kind = Vec::new();
    for (&image, (qs, ts)) in &images {
        let (Some(q), Some(qa), Some(p), Some(pa)) = (qs[0], qs[1], ts[0], ts[1]) else {
            return Err(Error::UnpairedAugmentation(image));
        };
        for query in [q, qa] {
            for positive in [p, pa] {
                terms.push(query);
                for t in targets {
                    kind.push(if *t == positive {
                        EntryKind::Positive
                    } else if t.image_index == image {
                        EntryKind::Masked(MaskReason::Counterpart)
                    } else {
                        EntryKind::Negative
                    });
                }
            }
        }
    }
    Ok(MaskedLogitSpec {
        queries: terms,
        targets: targets.to_vec(),
        kind,
    })
}

/// Negatives seen by each query with `batch_images` images of `turns` pairs
/// under same-image masking.
pub fn effective_negatives(batch_images: usize, turns: usize) -> usize {
    batch_images * turns - turns
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_term: Vec<(RowLabel, f64)>,
    pub effective_negatives_per_query: usize,
    /// Similarities divided by the temperature, `(terms, targets)`.
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub report: LossReport,
    /// Gradient of `report.total` with respect to the query matrix values.
    pub grad_queries: Vec<f64>,
    /// Gradient of `report.total` with respect to the target matrix values.
    pub grad_targets: Vec<f64>,
}

/// Per-term losses from a precomputed `(terms, targets)` similarity matrix.
pub fn terms_from_similarities(spec: &MaskedLogitSpec, sims: &[f64], temperature: f64) -> Vec<f64> {
    let n = spec.targets.len();
    (0..spec.n_terms())
        .map(|r| row_softmax(spec.row(r), &sims[r * n..(r + 1) * n], temperature).0)
        .collect()
}

/// Loss of one row and the softmax weights of its allowed entries (zero
/// elsewhere).
fn row_softmax(kinds: &[EntryKind], sims: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let allowed = |k: &EntryKind| matches!(k, EntryKind::Positive | EntryKind::Negative);
    let mut max = f64::NEG_INFINITY;
    let mut pos_logit = f64::NAN;
    for (k, s) in kinds.iter().zip(sims) {
        if allowed(k) {
            let z = s / temperature;
            max = max.max(z);
            if *k == EntryKind::Positive {
                pos_logit = z;
            }
        }
    }
    let mut weights = vec![0.0; kinds.len()];
    let mut sum = 0.0;
    for ((k, s), w) in kinds.iter().zip(sims).zip(weights.iter_mut()) {
        if allowed(k) {
            *w = (s / temperature - max).exp();
            sum += *w;
        }
    }
    weights.iter_mut().for_each(|w| *w /= sum);
    let loss = (max + sum.ln() - pos_logit).max(0.0);
    (loss, weights)
}

/// Loss and gradients on raw row-major buffers. Rows are not required to be
/// unit norm here; similarity is the plain dot product.
pub fn loss_kernel(
    spec: &MaskedLogitSpec,
    query_rows: &[usize],
    queries: &[f64],
    targets: &[f64],
    dim: usize,
    temperature: f64,
) -> LossOutput {
    let n_terms = spec.n_terms();
    let n_targets = spec.targets.len();
    assert_eq!(query_rows.len(), n_terms);
    assert_eq!(targets.len(), n_targets * dim);
    let mut sims = vec![0.0; n_terms * n_targets];
    for (r, &qi) in query_rows.iter().enumerate() {
        let q = &queries[qi * dim..(qi + 1) * dim];
        for c in 0..n_targets {
            let t = &targets[c * dim..(c + 1) * dim];
            sims[r * n_targets + c] = q.iter().zip(t).map(|(a, b)| a * b).sum();
        }
    }

    let mut grad_q = vec![0.0; queries.len()];
    let mut grad_t = vec![0.0; targets.len()];
    let mut per_term = Vec::with_capacity(n_terms);
    let mut total = 0.0;
    let scale = 1.0 / (n_terms.max(1) as f64 * temperature);
    for (r, &qi) in query_rows.iter().enumerate() {
        let kinds = spec.row(r);
        let (loss, weights) = row_softmax(kinds, &sims[r * n_targets..(r + 1) * n_targets], temperature);
        total += loss;
        per_term.push((spec.queries[r], loss));
        let q = &queries[qi * dim..(qi + 1) * dim];
        for c in 0..n_targets {
            let mut coeff = weights[c];
            if kinds[c] == EntryKind::Positive {
                coeff -= 1.0;
            }
            if coeff == 0.0 {
                continue;
            }
            let coeff = coeff * scale;
            let t = &targets[c * dim..(c + 1) * dim];
            for k in 0..dim {
                grad_q[qi * dim + k] += coeff * t[k];
                grad_t[c * dim + k] += coeff * q[k];
            }
        }
    }
    if n_terms > 0 {
        total /= n_terms as f64;
    }
    LossOutput {
        report: LossReport {
            total,
            per_term,
            effective_negatives_per_query: spec.effective_negatives_per_query(),
            logits: sims.iter().map(|s| s / temperature).collect(),
        },
        grad_queries: grad_q,
        grad_targets: grad_t,
    }
}

fn run(queries: &EmbeddingMatrix, targets: &EmbeddingMatrix, spec: &MaskedLogitSpec, temperature: f64) -> Result<LossOutput> {
    if queries.dim() != targets.dim() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} != target dim {}",
            queries.dim(),
            targets.dim()
        )));
    }
    if spec.targets() != targets.rows() {
        return Err(Error::LabelMismatch("target rows differ from the spec's target labels".into()));
    }
    let query_rows = spec.query_rows_in(queries.rows())?;
    Ok(loss_kernel(
        spec,
        &query_rows,
        queries.values(),
        targets.values(),
        queries.dim(),
        temperature,
    ))
}

/// Masked multi-pair InfoNCE. Masks switched off in `cfg` act as negatives.
pub fn muco_loss(
    queries: &EmbeddingMatrix,
    targets: &EmbeddingMatrix,
    spec: &MaskedLogitSpec,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    run(queries, targets, &spec.with_toggles(cfg), cfg.temperature)
}

/// Multi-pair InfoNCE without any masking: every non-positive target is a
/// negative, including other targets of the same image.
pub fn naive_multipair_loss(
    queries: &EmbeddingMatrix,
    targets: &EmbeddingMatrix,
    spec: &MaskedLogitSpec,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    run(queries, targets, &spec.unmasked(), cfg.temperature)
}

/// Standard in-batch InfoNCE with one query and one target per image.
pub fn single_turn_infonce(queries: &EmbeddingMatrix, targets: &EmbeddingMatrix, cfg: &LossConfig) -> Result<LossOutput> {
    for rows in [queries.rows(), targets.rows()] {
        let mut images: Vec<usize> = rows.iter().map(|l| l.image_index).collect();
        images.sort_unstable();
        if images.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::LabelMismatch("single-turn InfoNCE takes one row per image".into()));
        }
    }
    let spec = build_mask_pretrain(queries.rows(), targets.rows())?;
    muco_loss(queries, targets, &spec, cfg)
}

/// Borrowed flat buffer with one label per row.
#[derive(Debug, Clone, Copy)]
pub struct BufferView<'a> {
    pub rows: usize,
    pub dim: usize,
    pub data: &'a [f64],
    pub labels: &'a [RowLabel],
}

impl BufferView<'_> {
    fn check(&self) -> Result<()> {
        if self.rows == 0 || self.dim == 0 {
            return Err(Error::ShapeMismatch("buffers must have at least one row and column".into()));
        }
        if self.data.len() != self.rows * self.dim || self.labels.len() != self.rows {
            return Err(Error::ShapeMismatch(format!(
                "{} values and {} labels for shape ({}, {})",
                self.data.len(),
                self.labels.len(),
                self.rows,
                self.dim
            )));
        }
        Ok(())
    }

    fn matrix(&self) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::new(self.labels.to_vec(), self.dim, self.data.to_vec())
    }
}

/// Flat-buffer entry point for host-language bindings. Chooses the
/// fine-tuning mask when any label is augmented, the pretraining mask
/// otherwise, and writes gradients into caller-owned buffers.
pub fn muco_loss_buffers(
    queries: BufferView<'_>,
    targets: BufferView<'_>,
    cfg: &LossConfig,
    grad_queries: &mut [f64],
    grad_targets: &mut [f64],
) -> Result<f64> {
    queries.check()?;
    targets.check()?;
    if grad_queries.len() != queries.data.len() || grad_targets.len() != targets.data.len() {
        return Err(Error::ShapeMismatch("gradient buffers must match the inputs".into()));
    }
    if queries.labels.iter().any(|l| l.role != Role::Query) || targets.labels.iter().any(|l| l.role != Role::Target) {
        return Err(Error::LabelMismatch("query/target roles are swapped".into()));
    }
    let augmented = queries
        .labels
        .iter()
        .chain(targets.labels)
        .any(|l| l.variant == Variant::Augmented);
    let spec = if augmented {
        build_mask_finetune(queries.labels, targets.labels)?
    } else {
        build_mask_pretrain(queries.labels, targets.labels)?
    };
    let out = muco_loss(&queries.matrix()?, &targets.matrix()?, &spec, cfg)?;
    grad_queries.copy_from_slice(&out.grad_queries);
    grad_targets.copy_from_slice(&out.grad_targets);
    Ok(out.report.total)
}
