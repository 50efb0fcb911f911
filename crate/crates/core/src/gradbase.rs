//! Gradient-magnitude pruning baselines.
//!
//! Two redirection losses locate weights implicated in unsafe behavior:
//!
//! - `g_unsafe`: per-sample cosine redirection. For the text encoder,
//!   `D_c(f(t_s), f_frozen_txt(t_u)) - D_c(f(t_s), f_frozen_img(v_s))` with
//!   `D_c(a, b) = 1 - a.b` on unit embeddings; mirrored for the image side.
//! - `g_safeclip`: batch contrastive redirection. Live safe queries are
//!   pulled toward frozen unsafe targets of the opposite modality via an
//!   InfoNCE-style cross-entropy over cosine logits / temperature.
//!
//! Only the live encoder receives gradients; the encoders processing unsafe
//! samples and the opposite modality stay frozen snapshots. Scores are the
//! accumulated per-batch gradient magnitudes, in dataset order.

use std::collections::BTreeMap;

use crate::calibration::CalibTuple;
use crate::encoder::{
    forward, layer_gradient, Embedding, EncoderWeights, LayerId, Modality, ModelPair,
};
use crate::flowscore::ScoreTable;
use crate::mat::Mat64;
use crate::{Error, Result};

pub const DEFAULT_TEMPERATURE: f32 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    GUnsafe,
    GSafeclip,
}

/// Which baseline loss to differentiate, and for which encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub modality: Modality,
    /// Softmax temperature; only used by `g_safeclip`.
    pub temperature: f32,
}

impl LossSpec {
    pub fn g_unsafe(modality: Modality) -> Self {
        Self {
            kind: LossKind::GUnsafe,
            modality,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn g_safeclip(modality: Modality, temperature: f32) -> Self {
        Self {
            kind: LossKind::GSafeclip,
            modality,
            temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::BadConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// The live encoder's input for one tuple: the safe sequence of the loss
/// modality (the query being redirected).
pub fn live_tokens<'t>(spec: &LossSpec, tuple: &'t CalibTuple) -> &'t [u32] {
    match spec.modality {
        Modality::Text => &tuple.t_s,
        Modality::Image => &tuple.v_s,
    }
}

fn dot(a: &Embedding, b: &Embedding) -> f64 {
    a.0.iter().zip(&b.0).map(|(&x, &y)| x * y).sum()
}

/// Frozen targets for one tuple under a given loss modality:
/// (same-modality unsafe, opposite-modality safe).
fn frozen_targets(
    spec: &LossSpec,
    tuple: &CalibTuple,
    frozen: &ModelPair,
) -> Result<(Embedding, Embedding)> {
    match spec.modality {
        Modality::Text => {
            let (unsafe_same, _) = forward(&frozen.text, &tuple.t_u, &[])?;
            let (safe_opposite, _) = forward(&frozen.image, &tuple.v_s, &[])?;
            Ok((unsafe_same, safe_opposite))
        }
        Modality::Image => {
            let (unsafe_same, _) = forward(&frozen.image, &tuple.v_u, &[])?;
            let (safe_opposite, _) = forward(&frozen.text, &tuple.t_s, &[])?;
            Ok((unsafe_same, safe_opposite))
        }
    }
}

/// The frozen unsafe target of the *opposite* modality, the g_safeclip
/// positive for tuple i.
fn opposite_unsafe_target(
    spec: &LossSpec,
    tuple: &CalibTuple,
    frozen: &ModelPair,
) -> Result<Embedding> {
    match spec.modality {
        Modality::Text => Ok(forward(&frozen.image, &tuple.v_u, &[])?.0),
        Modality::Image => Ok(forward(&frozen.text, &tuple.t_u, &[])?.0),
    }
}

/// Batch loss and the gradient with respect to each live embedding.
/// For `g_unsafe` the batch loss is the mean of the per-sample losses.
pub(crate) fn embedding_grads(
    spec: &LossSpec,
    batch: &[CalibTuple],
    live_embs: &[Embedding],
    frozen: &ModelPair,
) -> Result<(f64, Vec<Vec<f64>>)> {
    spec.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    debug_assert_eq!(batch.len(), live_embs.len());
    let n = batch.len() as f64;
    match spec.kind {
        LossKind::GUnsafe => {
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(batch.len());
            for (tuple, a) in batch.iter().zip(live_embs) {
                let (b_unsafe, b_safe_opp) = frozen_targets(spec, tuple, frozen)?;
                // D_c(a, b1) - D_c(a, b2) = a . (b2 - b1)
                loss += (1.0 - dot(a, &b_unsafe)) - (1.0 - dot(a, &b_safe_opp));
                let g: Vec<f64> = b_safe_opp
                    .0
                    .iter()
                    .zip(&b_unsafe.0)
                    .map(|(&b2, &b1)| (b2 - b1) / n)
                    .collect();
                grads.push(g);
            }
            Ok((loss / n, grads))
        }
        LossKind::GSafeclip => {
            if batch.len() < 2 {
                return Err(Error::BatchTooSmall {
                    got: batch.len(),
                    want: 2,
                });
            }
            let targets: Vec<Embedding> = batch
                .iter()
                .map(|t| opposite_unsafe_target(spec, t, frozen))
                .collect::<Result<_>>()?;
            Ok(safeclip_from_embeddings(
                live_embs,
                &targets,
                spec.temperature as f64,
            ))
        }
    }
}

/// Cross-entropy over cosine logits / temperature; query i's positive is
/// target i. Returns the batch-mean loss and per-query gradients.
fn safeclip_from_embeddings(
    queries: &[Embedding],
    targets: &[Embedding],
    temp: f64,
) -> (f64, Vec<Vec<f64>>) {
    let n = queries.len() as f64;
    let dim = queries[0].dim();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(queries.len());
    for (i, a) in queries.iter().enumerate() {
        let logits: Vec<f64> = targets.iter().map(|b| dot(a, b) / temp).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += -(logits[i] - max) + z.ln();
        let mut g = vec![0.0; dim];
        for (j, b) in targets.iter().enumerate() {
            let p = exps[j] / z;
            let coeff = (p - if i == j { 1.0 } else { 0.0 }) / (n * temp);
            for (gv, &bv) in g.iter_mut().zip(&b.0) {
                *gv += coeff * bv;
            }
        }
        grads.push(g);
    }
    (loss / n, grads)
}

/// Full-precision batch loss; the f32 ops wrap this, and finite-difference
/// gradient checks need the f64 value directly.
pub fn batch_loss(
    live: &EncoderWeights,
    frozen: &ModelPair,
    spec: &LossSpec,
    batch: &[CalibTuple],
) -> Result<f64> {
    if live.modality != spec.modality {
        return Err(Error::LayerMismatch(format!(
            "live encoder is {}, loss targets {}",
            live.modality, spec.modality
        )));
    }
    let embs = live_embeddings(live, spec, batch)?;
    Ok(embedding_grads(spec, batch, &embs, frozen)?.0)
}

fn live_embeddings(
    live: &EncoderWeights,
    spec: &LossSpec,
    batch: &[CalibTuple],
) -> Result<Vec<Embedding>> {
    batch
        .iter()
        .map(|t| Ok(forward(live, live_tokens(spec, t), &[])?.0))
        .collect()
}

/// Per-sample cosine redirection loss.
pub fn g_unsafe_loss(
    sample: &CalibTuple,
    live: &EncoderWeights,
    frozen: &ModelPair,
    modality: Modality,
) -> Result<f32> {
    let spec = LossSpec::g_unsafe(modality);
    if live.modality != modality {
        return Err(Error::LayerMismatch(format!(
            "live encoder is {}, loss targets {}",
            live.modality, modality
        )));
    }
    let batch = std::slice::from_ref(sample);
    let embs = live_embeddings(live, &spec, batch)?;
    let (loss, _) = embedding_grads(&spec, batch, &embs, frozen)?;
    Ok(loss as f32)
}

/// Batch contrastive redirection loss (mean over the batch).
pub fn g_safeclip_loss(
    batch: &[CalibTuple],
    live: &EncoderWeights,
    frozen: &ModelPair,
    modality: Modality,
    temperature: f32,
) -> Result<f32> {
    let spec = LossSpec::g_safeclip(modality, temperature);
    if live.modality != modality {
        return Err(Error::LayerMismatch(format!(
            "live encoder is {}, loss targets {}",
            live.modality, modality
        )));
    }
    let embs = live_embeddings(live, &spec, batch)?;
    let (loss, _) = embedding_grads(&spec, batch, &embs, frozen)?;
    Ok(loss as f32)
}

/// Accumulates |d loss / d theta| over consecutive batches in dataset order.
/// For `g_safeclip` a trailing single-tuple batch is folded into its
/// predecessor so every batch keeps at least one negative.
pub fn gradient_scores(
    live: &EncoderWeights,
    frozen: &ModelPair,
    calib: &crate::calibration::TupleSet,
    spec: &LossSpec,
    layers: &[LayerId],
    batch_size: usize,
) -> Result<ScoreTable> {
    spec.validate()?;
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if batch_size == 0 {
        return Err(Error::BatchTooSmall { got: 0, want: 1 });
    }
    let tuples = calib.tuples();
    let mut boundaries: Vec<(usize, usize)> = (0..tuples.len())
        .step_by(batch_size)
        .map(|start| (start, (start + batch_size).min(tuples.len())))
        .collect();
    if spec.kind == LossKind::GSafeclip {
        if tuples.len() < 2 {
            return Err(Error::BatchTooSmall {
                got: tuples.len(),
                want: 2,
            });
        }
        if let Some(&(start, end)) = boundaries.last() {
            if end - start < 2 && boundaries.len() > 1 {
                boundaries.pop();
                boundaries.last_mut().expect("len > 1").1 = end;
            }
        }
    }

    let mut acc: BTreeMap<LayerId, Mat64> = BTreeMap::new();
    for &(start, end) in &boundaries {
        let grads = layer_gradient(live, frozen, spec, &tuples[start..end], layers)?;
        for (id, g) in grads {
            let slot = acc
                .entry(id)
                .or_insert_with(|| Mat64::zeros(g.rows(), g.cols()));
            for (a, b) in slot.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b.abs();
            }
        }
    }

    let mut out = ScoreTable::new();
    for (id, m) in acc {
        out.insert(id, m.to_f32())?;
    }
    Ok(out)
}
