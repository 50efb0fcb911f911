//! Synthetic worlds with a ground-truth unsafe pathway.
//!
//! A world is a dual encoder plus tuple datasets constructed so that:
//!
//! - both encoders start from the same base weights and paired safe
//!   sequences share almost every token, so the untrained model has real
//!   cross-modal retrieval structure;
//! - a contiguous "unsafe" token band exists per modality, its embeddings
//!   share a common offset direction, and unsafe variants of each tuple
//!   replace part of the sequence with tokens from a concept-specific
//!   unsafe signature (disjoint between modalities, so unsafe pairs share
//!   no token ids, only the pathway's response);
//! - a planted pathway routes unsafe-band content through known weight
//!   coordinates of the default manipulation targets (text out-projection,
//!   image fc2): chosen input rows are wired upstream to respond to the
//!   unsafe direction and gated to idle on safe content, and the planted
//!   entries amplify those rows into output columns whose downstream effect
//!   aligns with the unsafe embedding direction;
//! - the knowledge set is curated: class templates are mutually distant in
//!   embedding space and samples keep a solid classification margin, so
//!   zero-shot accuracy only reacts to edits that genuinely damage the
//!   model.
//!
//! The planted coordinates are the localization ground truth. Negating them
//! removes the amplification, which weakens the unsafe-unsafe attraction
//! the pathway created without touching the safe content channel.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibTuple, KnowledgeSet, TupleSet, DEFAULT_CONCEPTS};
use crate::encoder::{
    default_target_layers, forward, forward_traced, init_encoder, EncoderConfig, EncoderWeights,
    LayerId, LayerKind, Modality, ModelPair,
};
use crate::mat::Mat64;
use crate::surgeon::SelectionMask;
use crate::{Error, Result};

/// Probe sequences per band for direction measurements.
const DIR_PROBES: usize = 32;
/// Probe sequences for output-column bump measurements.
const BUMP_PROBES: usize = 8;
/// Bias bump used to estimate a column's downstream embedding direction.
const BUMP_EPS: f64 = 0.05;
/// Fraction of probe positions replaced with unsafe-band tokens.
const PROBE_UNSAFE_FRAC: f64 = 0.5;
/// Safe-content principal directions removed from wiring directions.
const SAFE_PCA_DEFLATE: usize = 3;
/// Minimum own-vs-impostor margin for knowledge samples.
const KNOWLEDGE_MARGIN: f32 = 0.15;

/// Internal pathway-strength knobs. Exposed for the tuning harness only;
/// the defaults are what `gen_world` uses.
#[doc(hidden)]
#[derive(Debug, Clone, Copy)]
pub struct Tuning {
    /// Shared embedding offset added to every unsafe-band token, giving
    /// the band a stable direction the pathway can key on.
    pub embed_offset: f32,
    /// Dead-zone margin (in safe per-token stds) for the gated fc2 route.
    pub gate_margin: f64,
    /// Target post-gate response of wired fc2 rows on unsafe content.
    pub fc2_response: f64,
    /// Target attend-level response of wired value rows on unsafe content;
    /// the out route is linear, so this stays small to bound safe noise.
    pub out_response: f64,
}

impl Default for Tuning {
    fn default() -> Self {
        Self {
            embed_offset: 0.3,
            gate_margin: 2.5,
            fc2_response: 3.0,
            out_response: 0.02,
        }
    }
}

/// Generation parameters for one synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub encoder: EncoderConfig,
    pub n_concepts: usize,
    pub train_per_concept: usize,
    pub test_per_concept: usize,
    pub knowledge_per_class: usize,
    /// Contiguous unsafe token range `[start, end)` per modality.
    pub unsafe_band_text: (u32, u32),
    pub unsafe_band_image: (u32, u32),
    /// Fraction of entries planted per target layer.
    pub plant_density: f64,
    /// Planted magnitude as a multiple of the layer's weight std.
    pub plant_scale: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let band = (encoder.vocab_size - encoder.vocab_size / 4, encoder.vocab_size);
        Self {
            encoder,
            n_concepts: 20,
            train_per_concept: 20,
            test_per_concept: 25,
            knowledge_per_class: 10,
            unsafe_band_text: band,
            unsafe_band_image: band,
            plant_density: 0.02,
            plant_scale: 5.0,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        for (name, (lo, hi)) in [
            ("text", self.unsafe_band_text),
            ("image", self.unsafe_band_image),
        ] {
            if lo >= hi || hi > self.encoder.vocab_size || lo == 0 {
                return Err(Error::BadWorldConfig(format!(
                    "{name} unsafe band [{lo}, {hi}) must be non-empty, above 0, within vocab {}",
                    self.encoder.vocab_size
                )));
            }
        }
        if !(self.plant_density > 0.0 && self.plant_density < 1.0) {
            return Err(Error::BadWorldConfig(format!(
                "plant density {} outside (0, 1)",
                self.plant_density
            )));
        }
        if self.plant_scale <= 0.0 {
            return Err(Error::BadWorldConfig(format!(
                "plant scale {} must be > 0",
                self.plant_scale
            )));
        }
        if self.n_concepts == 0 || self.train_per_concept == 0 || self.test_per_concept == 0 {
            return Err(Error::BadWorldConfig(
                "concept and tuple counts must be >= 1".to_string(),
            ));
        }
        if self.encoder.seq_len < 4 {
            return Err(Error::BadWorldConfig(
                "worlds need seq_len >= 4 to fit signature/core/filler structure".to_string(),
            ));
        }
        Ok(())
    }

    fn safe_band(&self, modality: Modality) -> (u32, u32) {
        match modality {
            Modality::Text => (0, self.unsafe_band_text.0),
            Modality::Image => (0, self.unsafe_band_image.0),
        }
    }

    fn unsafe_band(&self, modality: Modality) -> (u32, u32) {
        match modality {
            Modality::Text => self.unsafe_band_text,
            Modality::Image => self.unsafe_band_image,
        }
    }
}

/// Planted coordinates per target layer: the localization ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask(pub SelectionMask);

/// A fully generated world.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub model: ModelPair,
    pub truth: GroundTruthMask,
    pub train: TupleSet,
    pub test: TupleSet,
    pub knowledge: KnowledgeSet,
}

fn random_band_seq(rng: &mut ChaCha8Rng, band: (u32, u32), len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(band.0..band.1)).collect()
}

fn probe_sequences(
    rng: &mut ChaCha8Rng,
    safe_band: (u32, u32),
    unsafe_band: (u32, u32),
    seq_len: usize,
) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let safe: Vec<Vec<u32>> = (0..DIR_PROBES)
        .map(|_| random_band_seq(rng, safe_band, seq_len))
        .collect();
    let n_unsafe = ((seq_len as f64) * PROBE_UNSAFE_FRAC).ceil() as usize;
    let unsafe_: Vec<Vec<u32>> = safe
        .iter()
        .map(|s| {
            let mut seq = s.clone();
            let mut positions: Vec<usize> = (0..seq_len).collect();
            positions.shuffle(rng);
            for &p in positions.iter().take(n_unsafe) {
                seq[p] = rng.random_range(unsafe_band.0..unsafe_band.1);
            }
            seq
        })
        .collect();
    (safe, unsafe_)
}

/// Mean over all (sample, token) rows of the captured layer input.
fn mean_rows(weights: &EncoderWeights, probes: &[Vec<u32>], capture: LayerId) -> Result<Vec<f64>> {
    let n = weights.config.input_dim(capture.kind);
    let mut acc = vec![0.0; n];
    let mut count = 0usize;
    for seq in probes {
        let (_, trace) = forward(weights, seq, &[capture])?;
        let z = trace.get(capture)?;
        for r in 0..z.rows() {
            for (i, a) in acc.iter_mut().enumerate() {
                *a += z.get(r, i);
            }
        }
        count += weights.config.seq_len;
    }
    for a in acc.iter_mut() {
        *a /= count as f64;
    }
    Ok(acc)
}

fn mean_prenorm_embedding(weights: &EncoderWeights, probes: &[Vec<u32>]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; weights.config.embed_dim];
    for seq in probes {
        let (_, tape) = forward_traced(weights, seq)?;
        for (a, &q) in acc.iter_mut().zip(tape.prenorm_embedding()) {
            *a += q;
        }
    }
    for a in acc.iter_mut() {
        *a /= probes.len() as f64;
    }
    Ok(acc)
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    v
}

/// Top principal directions of a row collection (power iteration with
/// deflation). Used to strip dominant safe-content variance out of wiring
/// directions so wired rows stay quiet on safe inputs.
fn principal_directions(rows: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    if rows.is_empty() {
        return Vec::new();
    }
    let dim = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(&v, &m)| v - m).collect())
        .collect();
    let mut found: Vec<Vec<f64>> = Vec::new();
    for idx in 0..k.min(dim) {
        // Deterministic start vector, deflated against found components.
        let mut v: Vec<f64> = (0..dim)
            .map(|j| if j % (idx + 2) == 0 { 1.0 } else { 0.5 })
            .collect();
        for _ in 0..30 {
            for f in &found {
                let a = dot(&v, f);
                for (x, &fv) in v.iter_mut().zip(f) {
                    *x -= a * fv;
                }
            }
            let mut next = vec![0.0; dim];
            for row in &centered {
                let a = dot(row, &v);
                for (x, &rv) in next.iter_mut().zip(row) {
                    *x += a * rv;
                }
            }
            v = normalize(next);
        }
        if v.iter().all(|&x| x == 0.0) {
            break;
        }
        found.push(v);
    }
    found
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Wired rows per layer: roughly sqrt-proportioned so a count-sized block
/// fits in a few columns.
fn plant_row_count(count: usize, n_in: usize, n_out: usize) -> usize {
    ((count as f64 * n_in as f64 / n_out as f64).sqrt().ceil() as usize).clamp(1, n_in)
}

/// The upstream layer whose columns feed a target layer's input rows. Its
/// kind doubles as the capture point for the space it reads from (the
/// capture of `value`/`fc1` is that layer's own input). Worlds only target
/// out/fc2, whose upstreams are value/fc1.
fn upstream_kind(target: LayerKind) -> LayerKind {
    match target {
        LayerKind::Out => LayerKind::Value, // wired columns read post-LN1
        LayerKind::Fc2 => LayerKind::Fc1,   // wired columns read post-LN2
        other => other,
    }
}

struct PlantOutcome {
    coords: BTreeSet<(usize, usize)>,
}

/// Wires `rows` upstream to respond to the unsafe direction, then plants
/// `count` amplified entries in the target layer at (wired row, aligned
/// column) coordinates.
#[allow(clippy::too_many_arguments)]
fn wire_and_plant(
    weights: &mut EncoderWeights,
    target: LayerId,
    count: usize,
    plant_scale: f64,
    band: (u32, u32),
    unsafe_dir_embed: &[f64],
    safe_probes: &[Vec<u32>],
    unsafe_probes: &[Vec<u32>],
    tuning: &Tuning,
    rng: &mut ChaCha8Rng,
) -> Result<PlantOutcome> {
    let cfg = weights.config;
    let n_in = cfg.input_dim(target.kind);
    let n_out = cfg.output_dim(target.kind);
    if count == 0 {
        return Err(Error::EmptyPlant {
            layer: target.to_string(),
            density: 0.0,
        });
    }
    let n_rows = plant_row_count(count, n_in, n_out);

    // 1. Choose the rows to wire: the upstream column feeding each chosen
    //    row is replaced by a gated readout of the unsafe direction, so the
    //    row lights up for unsafe-band content and idles otherwise.
    let mut all_rows: Vec<usize> = (0..n_in).collect();
    all_rows.shuffle(rng);
    let rows: Vec<usize> = all_rows.into_iter().take(n_rows).collect();

    // Measure the unsafe signal in the space the upstream layer reads from.
    // Two components exist there: a sequence-level DC shift (attention mixes
    // the unsafe offset into every token) and a per-token spike on unsafe
    // positions. Wired rows must carry a response that is uniform across
    // tokens, otherwise the on/off spike pattern inflates the per-token
    // variance that the score normalizes by; so for the per-token fc2 route
    // the spike direction is projected out of the wiring direction.
    let probe_at = LayerId::new(target.modality, target.block, upstream_kind(target.kind));
    let unsafe_band = band; // token range marking unsafe positions in probes
    let dim = cfg.input_dim(upstream_kind(target.kind));
    let mut safe_mean = vec![0.0; dim];
    let mut unsafe_mean = vec![0.0; dim];
    let mut spike_on = vec![0.0; dim];
    let mut spike_off = vec![0.0; dim];
    let mut n_on = 0usize;
    let mut n_off = 0usize;
    let mut safe_rows_cache: Vec<Mat64> = Vec::with_capacity(safe_probes.len());
    for seq in safe_probes {
        let (_, trace) = forward(weights, seq, &[probe_at])?;
        let z = trace.get(probe_at)?.clone();
        for r in 0..z.rows() {
            for (k, m) in safe_mean.iter_mut().enumerate() {
                *m += z.get(r, k);
            }
        }
        safe_rows_cache.push(z);
    }
    for seq in unsafe_probes {
        let (_, trace) = forward(weights, seq, &[probe_at])?;
        let z = trace.get(probe_at)?;
        for r in 0..z.rows() {
            let is_unsafe = seq[r] >= unsafe_band.0 && seq[r] < unsafe_band.1;
            for k in 0..dim {
                let v = z.get(r, k);
                unsafe_mean[k] += v;
                if is_unsafe {
                    spike_on[k] += v;
                } else {
                    spike_off[k] += v;
                }
            }
            if is_unsafe {
                n_on += 1;
            } else {
                n_off += 1;
            }
        }
    }
    let safe_count = (safe_probes.len() * cfg.seq_len) as f64;
    let unsafe_count = (unsafe_probes.len() * cfg.seq_len) as f64;
    for m in safe_mean.iter_mut() {
        *m /= safe_count;
    }
    for m in unsafe_mean.iter_mut() {
        *m /= unsafe_count;
    }
    let dc: Vec<f64> = unsafe_mean.iter().zip(&safe_mean).map(|(&u, &s)| u - s).collect();
    let per_token_route = target.kind == LayerKind::Fc2;
    let mut dir = if per_token_route && n_on > 0 && n_off > 0 {
        let spike = normalize(
            (0..dim)
                .map(|k| spike_on[k] / n_on as f64 - spike_off[k] / n_off as f64)
                .collect(),
        );
        let along = dot(&dc, &spike);
        normalize(dc.iter().zip(&spike).map(|(&d, &s)| d - along * s).collect())
    } else {
        normalize(dc)
    };
    // Deflate the dominant safe-content variance directions out of the
    // wiring direction: wired rows should project safe inputs near zero
    // with as little spread as the geometry allows.
    {
        let safe_rows: Vec<Vec<f64>> = if per_token_route {
            safe_rows_cache
                .iter()
                .flat_map(|z| (0..z.rows()).map(|r| z.row(r).to_vec()).collect::<Vec<_>>())
                .collect()
        } else {
            safe_rows_cache
                .iter()
                .map(|z| {
                    (0..dim)
                        .map(|k| (0..z.rows()).map(|r| z.get(r, k)).sum::<f64>() / z.rows() as f64)
                        .collect()
                })
                .collect()
        };
        for pc in principal_directions(&safe_rows, SAFE_PCA_DEFLATE) {
            let along = dot(&dir, &pc);
            for (d, &p) in dir.iter_mut().zip(&pc) {
                *d -= along * p;
            }
        }
        dir = normalize(dir);
    }

    // Safe-side projection statistics at the granularity the target layer
    // sees (per token for fc2, per-sequence attend mean for out), plus the
    // unsafe DC separation, for gain calibration.
    let mut per_token_vals = Vec::new();
    let mut per_seq_vals = Vec::new();
    for z in &safe_rows_cache {
        let mut seq_sum = 0.0;
        for r in 0..z.rows() {
            let proj = (0..dim).map(|k| z.get(r, k) * dir[k]).sum::<f64>();
            per_token_vals.push(proj);
            seq_sum += proj;
        }
        per_seq_vals.push(seq_sum / z.rows() as f64);
    }
    let moments = |vals: &[f64]| {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (tok_mean, tok_std) = moments(&per_token_vals);
    let (seq_mean, _seq_std) = moments(&per_seq_vals);
    let mut unsafe_seq_vals = Vec::with_capacity(unsafe_probes.len());
    for seq in unsafe_probes {
        let (_, trace) = forward(weights, seq, &[probe_at])?;
        let z = trace.get(probe_at)?;
        let mut seq_sum = 0.0;
        for r in 0..z.rows() {
            seq_sum += (0..dim).map(|k| z.get(r, k) * dir[k]).sum::<f64>();
        }
        unsafe_seq_vals.push(seq_sum / z.rows() as f64);
    }
    let (unsafe_seq_mean, _) = moments(&unsafe_seq_vals);

    // Calibrated gain: the post-gate unsafe response lands near a fixed
    // target regardless of how strong this block's measured separation is.
    let (proj_mean, margin_sd, gain) = if per_token_route {
        let delta = (unsafe_seq_mean - tok_mean).max(0.05);
        let margin = tuning.gate_margin * tok_std;
        let gain = (tuning.fc2_response / (delta - margin).max(0.2 * delta)).clamp(0.2, 8.0);
        (tok_mean, margin, gain as f32)
    } else {
        let delta = (unsafe_seq_mean - seq_mean).max(0.05);
        let gain = (tuning.out_response / delta).clamp(0.02, 4.0);
        (seq_mean, 0.0, gain as f32)
    };
    if std::env::var_os("UWM_WORLD_DEBUG").is_some() {
        eprintln!(
            "[world] {target}: delta_seq {:.4} tok_std {:.4} seq_std {:.4} gain {gain:.3} margin {margin_sd:.4}",
            unsafe_seq_mean - if per_token_route { tok_mean } else { seq_mean },
            tok_std,
            _seq_std,
        );
    }

    let upstream = LayerId::new(target.modality, target.block, upstream_kind(target.kind));
    {
        // The wired column is replaced outright: the node's only job is to
        // carry the unsafe signal, and keeping its original random column
        // would leak sequence noise straight into the planted entries.
        let w = weights.weight_mut(upstream)?;
        for &i in &rows {
            for k in 0..w.rows() {
                w.set(k, i, gain * dir[k] as f32);
            }
        }
        // Gate: the upstream bias absorbs the safe-mean projection plus the
        // spread margin, so wired rows idle on safe content.
        let offset = (gain as f64 * (proj_mean + margin_sd)) as f32;
        let bias = match upstream.kind {
            LayerKind::Value => &mut weights.blocks[target.block].value_b,
            LayerKind::Fc1 => &mut weights.blocks[target.block].fc1_b,
            LayerKind::Out => &mut weights.blocks[target.block].out_b,
            LayerKind::Fc2 => &mut weights.blocks[target.block].fc2_b,
        };
        for &i in &rows {
            bias[i] -= offset;
        }
    }

    // 2. Input-side sign of each wired row under unsafe content.
    let target_input = mean_rows(weights, unsafe_probes, target)?;
    let row_sign: Vec<f32> = rows
        .iter()
        .map(|&i| if target_input[i] >= 0.0 { 1.0 } else { -1.0 })
        .collect();

    // 3. Downstream direction of each output column, estimated by a bias
    //    bump, scored by alignment with the unsafe embedding direction.
    let bump_probes = &unsafe_probes[..BUMP_PROBES.min(unsafe_probes.len())];
    let baseline = mean_prenorm_embedding(weights, bump_probes)?;
    let mut col_scores: Vec<(f64, f64, usize)> = Vec::with_capacity(n_out); // (|align|, sign, j)
    for j in 0..n_out {
        let mut bumped = weights.clone();
        match target.kind {
            LayerKind::Out => bumped.blocks[target.block].out_b[j] += BUMP_EPS as f32,
            LayerKind::Fc2 => bumped.blocks[target.block].fc2_b[j] += BUMP_EPS as f32,
            LayerKind::Value => bumped.blocks[target.block].value_b[j] += BUMP_EPS as f32,
            LayerKind::Fc1 => bumped.blocks[target.block].fc1_b[j] += BUMP_EPS as f32,
        }
        let shifted = mean_prenorm_embedding(&bumped, bump_probes)?;
        let delta: Vec<f64> = shifted
            .iter()
            .zip(&baseline)
            .map(|(&a, &b)| (a - b) / BUMP_EPS)
            .collect();
        let align = dot(&delta, unsafe_dir_embed);
        col_scores.push((align.abs(), align.signum(), j));
    }
    col_scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));

    // 4. Plant `count` entries, magnitudes set to plant_scale x the layer's
    //    original weight std, signed so unsafe activations push the
    //    embedding along the unsafe direction. Columns receive geometrically
    //    decaying shares (best-aligned first): a column's score rises with
    //    its planted mass, so adaptive selection flips the columns carrying
    //    the most displacement first and the edit's effect grows steadily
    //    with tau.
    let std = weights.weight(target)?.std().max(1e-6);
    let magnitude = (plant_scale * std) as f32;
    let mut block: Vec<(usize, usize, f32)> = Vec::with_capacity(count);
    let mut remaining = count;
    for &(_, sign, j) in &col_scores {
        if remaining == 0 {
            break;
        }
        let take = remaining.div_ceil(2).min(rows.len()).max(1);
        let cs = if sign >= 0.0 { 1.0f32 } else { -1.0 };
        for (&i, &rs) in rows.iter().zip(&row_sign).take(take) {
            block.push((i, j, rs * cs));
        }
        remaining -= take;
    }
    debug_assert_eq!(block.len(), count);

    let pre_plant = mean_prenorm_embedding(weights, bump_probes)?;
    {
        let w = weights.weight_mut(target)?;
        for &(i, j, sign) in &block {
            w.set(i, j, sign * magnitude);
        }
    }
    // Per-column signs are estimated from linearized bumps; verify the
    // planted block's aggregate displacement actually points along the
    // shared unsafe direction and flip the whole block when it does not,
    // so every layer's pathway pushes the same way in embedding space.
    let post_plant = mean_prenorm_embedding(weights, bump_probes)?;
    let delta: Vec<f64> = post_plant
        .iter()
        .zip(&pre_plant)
        .map(|(&a, &b)| a - b)
        .collect();
    if dot(&delta, unsafe_dir_embed) < 0.0 {
        let w = weights.weight_mut(target)?;
        for &(i, j, sign) in &block {
            w.set(i, j, -sign * magnitude);
        }
    }
    let coords: BTreeSet<(usize, usize)> = block.iter().map(|&(i, j, _)| (i, j)).collect();
    Ok(PlantOutcome { coords })
}

fn concept_labels(n: usize) -> Vec<String> {
    (0..n)
        .map(|k| {
            DEFAULT_CONCEPTS
                .get(k)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("concept{k}"))
        })
        .collect()
}

/// Distinct tokens per concept from a band; falls back to sampling with
/// replacement when the band is too small to keep concepts disjoint.
fn concept_signatures(
    rng: &mut ChaCha8Rng,
    band: (u32, u32),
    n_concepts: usize,
    per_concept: usize,
) -> Vec<Vec<u32>> {
    let band_size = (band.1 - band.0) as usize;
    if band_size >= n_concepts * per_concept {
        let mut pool: Vec<u32> = (band.0..band.1).collect();
        pool.shuffle(rng);
        pool.chunks(per_concept)
            .take(n_concepts)
            .map(|c| c.to_vec())
            .collect()
    } else {
        (0..n_concepts)
            .map(|_| random_band_seq(rng, band, per_concept))
            .collect()
    }
}

/// Per-sequence divergence between the paired safe text and image.
fn pair_jitter(seq_len: usize) -> usize {
    seq_len.div_ceil(8).max(1)
}

/// Positions replaced with unsafe tokens in an unsafe variant (>= 25%).
fn unsafe_positions(seq_len: usize) -> usize {
    ((seq_len as f64) * 0.3125).ceil() as usize
}

/// Replaces `k` distinct random positions using `draw`.
fn replace_positions(
    rng: &mut ChaCha8Rng,
    seq: &mut [u32],
    k: usize,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> u32,
) {
    let mut positions: Vec<usize> = (0..seq.len()).collect();
    positions.shuffle(rng);
    for &p in positions.iter().take(k) {
        seq[p] = draw(rng);
    }
}

/// Generates the world: correlated base encoders, wired-and-planted unsafe
/// pathways in the default target layers, tuple datasets, and a knowledge
/// set for zero-shot evaluation.
pub fn gen_world(config: &WorldConfig) -> Result<World> {
    gen_world_tuned(config, &Tuning::default())
}

#[doc(hidden)]
pub fn gen_world_tuned(config: &WorldConfig, tuning: &Tuning) -> Result<World> {
    config.validate()?;
    let enc = config.encoder;

    // Both encoders share one base init so token overlap produces real
    // cross-modal similarity without training; plants then differentiate
    // them.
    let mut text_base = init_encoder(&enc, Modality::Text, config.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);

    // Unsafe-band tokens share an embedding offset along one direction, so
    // unsafe content has a consistent signature for pathways to key on.
    let offset_dir: Vec<f32> = {
        let raw: Vec<f64> = (0..enc.model_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize(raw).into_iter().map(|v| v as f32).collect()
    };
    {
        let band = config.unsafe_band(Modality::Text);
        for tok in band.0..band.1 {
            let row = text_base.embed.row_mut(tok as usize);
            for (r, &d) in row.iter_mut().zip(&offset_dir) {
                *r += tuning.embed_offset * d;
            }
        }
    }
    let mut image_base = text_base.clone();
    image_base.modality = Modality::Image;
    if config.unsafe_band_image != config.unsafe_band_text {
        // Different band per modality: rebuild the image offset on its band.
        image_base.embed = init_encoder(&enc, Modality::Text, config.seed)?.embed;
        let band = config.unsafe_band(Modality::Image);
        for tok in band.0..band.1 {
            let row = image_base.embed.row_mut(tok as usize);
            for (r, &d) in row.iter_mut().zip(&offset_dir) {
                *r += tuning.embed_offset * d;
            }
        }
    }

    // The shared unsafe embedding direction, measured on the base before any
    // planting so both encoders aim their pathways at the same target.
    let (safe_probes_t, unsafe_probes_t) = probe_sequences(
        &mut rng,
        config.safe_band(Modality::Text),
        config.unsafe_band(Modality::Text),
        enc.seq_len,
    );
    let (safe_probes_i, unsafe_probes_i) = probe_sequences(
        &mut rng,
        config.safe_band(Modality::Image),
        config.unsafe_band(Modality::Image),
        enc.seq_len,
    );
    let base_safe = mean_prenorm_embedding(&text_base, &safe_probes_t)?;
    let base_unsafe = mean_prenorm_embedding(&text_base, &unsafe_probes_t)?;
    let unsafe_dir = normalize(
        base_unsafe
            .iter()
            .zip(&base_safe)
            .map(|(&u, &s)| u - s)
            .collect(),
    );

    let mut model = ModelPair { text: text_base, image: image_base };
    let mut truth = SelectionMask::new();
    for layer in default_target_layers(&enc) {
        let n_entries = enc.input_dim(layer.kind) * enc.output_dim(layer.kind);
        let count = (config.plant_density * n_entries as f64).ceil() as usize;
        if count == 0 {
            return Err(Error::EmptyPlant {
                layer: layer.to_string(),
                density: config.plant_density,
            });
        }
        let (safe_probes, unsafe_probes) = match layer.modality {
            Modality::Text => (&safe_probes_t, &unsafe_probes_t),
            Modality::Image => (&safe_probes_i, &unsafe_probes_i),
        };
        let outcome = wire_and_plant(
            model.encoder_mut(layer.modality),
            layer,
            count,
            config.plant_scale,
            config.unsafe_band(layer.modality),
            &unsafe_dir,
            safe_probes,
            unsafe_probes,
            tuning,
            &mut rng,
        )?;
        truth.insert(layer, outcome.coords);
    }

    // Datasets. Paired safe sequences share almost every token (the
    // untrained encoders turn multiset overlap into similarity); unsafe
    // variants swap in concept-specific unsafe tokens, with disjoint
    // signatures per modality so unsafe pairs share no token ids, only the
    // planted pathway's response.
    let labels = concept_labels(config.n_concepts);
    let text_safe = config.safe_band(Modality::Text);
    let image_safe = config.safe_band(Modality::Image);
    let shared_safe = (0u32, text_safe.1.min(image_safe.1));
    let n_sig = (enc.seq_len * 3 / 16).max(1);
    let safe_sig = concept_signatures(&mut rng, shared_safe, config.n_concepts, n_sig);

    let text_band = config.unsafe_band(Modality::Text);
    let image_band = config.unsafe_band(Modality::Image);
    let (text_usig, image_usig) = if text_band == image_band {
        let both = concept_signatures(&mut rng, text_band, config.n_concepts, 8);
        let text: Vec<Vec<u32>> = both.iter().map(|c| c[..4].to_vec()).collect();
        let image: Vec<Vec<u32>> = both.iter().map(|c| c[4..].to_vec()).collect();
        (text, image)
    } else {
        (
            concept_signatures(&mut rng, text_band, config.n_concepts, 4),
            concept_signatures(&mut rng, image_band, config.n_concepts, 4),
        )
    };

    let k_pair = pair_jitter(enc.seq_len);
    let k_unsafe = unsafe_positions(enc.seq_len);
    let mut next_id = 0u64;
    let mut make_tuples = |rng: &mut ChaCha8Rng, per_concept: usize| -> Result<TupleSet> {
        let mut tuples = Vec::with_capacity(config.n_concepts * per_concept);
        for (k, concept) in labels.iter().enumerate() {
            for _ in 0..per_concept {
                let mut base: Vec<u32> = safe_sig[k].clone();
                while base.len() < enc.seq_len {
                    base.push(rng.random_range(shared_safe.0..shared_safe.1));
                }
                base.shuffle(rng);

                let t_s = base.clone();
                let mut v_s = base.clone();
                replace_positions(rng, &mut v_s, k_pair, |r| {
                    r.random_range(image_safe.0..image_safe.1)
                });
                let mut t_u = t_s.clone();
                replace_positions(rng, &mut t_u, k_unsafe, |r| {
                    text_usig[k][r.random_range(0..text_usig[k].len())]
                });
                let mut v_u = v_s.clone();
                replace_positions(rng, &mut v_u, k_unsafe, |r| {
                    image_usig[k][r.random_range(0..image_usig[k].len())]
                });
                tuples.push(CalibTuple {
                    id: next_id,
                    concept: concept.clone(),
                    t_s,
                    t_u,
                    v_s,
                    v_u,
                });
                next_id += 1;
            }
        }
        TupleSet::new(tuples, labels.clone())
    };

    let train = make_tuples(&mut rng, config.train_per_concept)?;
    let test = make_tuples(&mut rng, config.test_per_concept)?;

    // Knowledge set: class templates drawn from the safe band and chosen
    // greedily so their image-encoder embeddings are mutually distant
    // (random same-band sequences can collide in embedding space, which
    // would make zero-shot margins fragile). Samples jitter one position;
    // prototypes are the templates themselves.
    let n_classes = config.n_concepts;
    let classes: Vec<String> = (0..n_classes).map(|c| format!("class{c}")).collect();
    let candidates: Vec<Vec<u32>> = (0..8 * n_classes)
        .map(|_| random_band_seq(&mut rng, shared_safe, enc.seq_len))
        .collect();
    let cand_embs: Vec<crate::encoder::Embedding> = candidates
        .iter()
        .map(|t| Ok(forward(&model.image, t, &[])?.0))
        .collect::<Result<_>>()?;
    let mut chosen: Vec<usize> = vec![0];
    while chosen.len() < n_classes {
        let next = (0..candidates.len())
            .filter(|i| !chosen.contains(i))
            .min_by(|&a, &b| {
                let worst = |i: usize| {
                    chosen
                        .iter()
                        .map(|&c| crate::encoder::similarity(&cand_embs[i], &cand_embs[c]).abs())
                        .fold(f32::NEG_INFINITY, f32::max)
                };
                worst(a).total_cmp(&worst(b))
            })
            .expect("candidate pool exceeds class count");
        chosen.push(next);
    }
    let prototypes: Vec<Vec<u32>> = chosen.iter().map(|&idx| candidates[idx].clone()).collect();
    let proto_embs: Vec<crate::encoder::Embedding> = chosen.iter().map(|&idx| cand_embs[idx].clone()).collect();

    // Samples jitter one position and are rejection-sampled for a solid
    // classification margin, so the tiny perturbations an edit causes on
    // safe content cannot flip their argmax; only a destructive edit can.
    let mut samples = Vec::new();
    let jitter = (enc.seq_len / 16).max(1);
    for c in 0..n_classes {
        let mut kept = 0;
        let mut best: Option<(f32, Vec<u32>)> = None;
        let mut tries = 0;
        while kept < config.knowledge_per_class && tries < 50 * config.knowledge_per_class {
            tries += 1;
            let mut v = prototypes[c].clone();
            replace_positions(&mut rng, &mut v, jitter, |r| {
                r.random_range(shared_safe.0..shared_safe.1)
            });
            let e = forward(&model.image, &v, &[])?.0;
            let own = crate::encoder::similarity(&e, &proto_embs[c]);
            let worst = (0..n_classes)
                .filter(|&k| k != c)
                .map(|k| crate::encoder::similarity(&e, &proto_embs[k]))
                .fold(f32::NEG_INFINITY, f32::max);
            let margin = own - worst;
            if margin >= KNOWLEDGE_MARGIN {
                samples.push((v, c));
                kept += 1;
            } else if best.as_ref().map(|(m, _)| margin > *m).unwrap_or(true) {
                best = Some((margin, v));
            }
        }
        // Degenerate geometry: fall back to the best margin seen.
        while kept < config.knowledge_per_class {
            let (_, v) = best.clone().expect("at least one candidate tried");
            samples.push((v, c));
            kept += 1;
        }
    }
    samples.sort_by_key(|&(_, c)| c);
    let knowledge = KnowledgeSet { classes, prototypes, samples };

    Ok(World {
        config: *config,
        model,
        truth: GroundTruthMask(truth),
        train,
        test,
        knowledge,
    })
}

/// Per-layer localization quality of a selection against the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerLocalization {
    pub selected: usize,
    pub truth: usize,
    pub hits: usize,
    /// None when nothing was selected.
    pub precision: Option<f64>,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Localization {
    pub per_layer: Vec<(String, LayerLocalization)>,
    pub micro_precision: Option<f64>,
    pub micro_recall: f64,
}

/// Standard precision/recall of selected coordinates against planted ones.
/// Both masks must cover the same layers.
pub fn eval_localization(selected: &SelectionMask, truth: &GroundTruthMask) -> Result<Localization> {
    let sel_layers: Vec<LayerId> = selected.layers().collect();
    let truth_layers: Vec<LayerId> = truth.0.layers().collect();
    if sel_layers != truth_layers {
        return Err(Error::LayerMismatch(format!(
            "selected covers {sel_layers:?}, truth covers {truth_layers:?}"
        )));
    }
    let mut per_layer = Vec::new();
    let mut total_sel = 0usize;
    let mut total_truth = 0usize;
    let mut total_hits = 0usize;
    for layer in sel_layers {
        let sel = selected.get(layer).expect("layer listed");
        let tru = truth.0.get(layer).expect("layer listed");
        let hits = sel.intersection(tru).count();
        total_sel += sel.len();
        total_truth += tru.len();
        total_hits += hits;
        per_layer.push((
            layer.to_string(),
            LayerLocalization {
                selected: sel.len(),
                truth: tru.len(),
                hits,
                precision: (!sel.is_empty()).then(|| hits as f64 / sel.len() as f64),
                recall: if tru.is_empty() {
                    0.0
                } else {
                    hits as f64 / tru.len() as f64
                },
            },
        ));
    }
    Ok(Localization {
        per_layer,
        micro_precision: (total_sel > 0).then(|| total_hits as f64 / total_sel as f64),
        micro_recall: if total_truth == 0 {
            0.0
        } else {
            total_hits as f64 / total_truth as f64
        },
    })
}

/// Uniformly random mask with the same per-layer sizes as `truth`, for the
/// Monte-Carlo precision baseline.
pub fn random_mask_like(
    truth: &GroundTruthMask,
    shapes: &std::collections::BTreeMap<LayerId, (usize, usize)>,
    seed: u64,
) -> Result<SelectionMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = SelectionMask::new();
    for (&layer, coords) in truth.0.iter() {
        let &(rows, cols) = shapes
            .get(&layer)
            .ok_or_else(|| Error::LayerMismatch(format!("no shape for {layer}")))?;
        let chosen = rand::seq::index::sample(&mut rng, rows * cols, coords.len());
        mask.insert(
            layer,
            chosen.iter().map(|flat| (flat / cols, flat % cols)).collect(),
        );
    }
    Ok(mask)
}
