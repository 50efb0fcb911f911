//! Forward evaluation with activation capture.
//!
//! The captured "input activation" of a linear layer is its immediate
//! pre-multiplication input: post-LN1 for value, post-attend for out,
//! post-LN2 for fc1, post-GELU for fc2.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::mat::{Mat, Mat64};
use crate::{Error, Result};

use super::{Embedding, EncoderWeights, LayerId, LayerKind, LayerNormParams};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044_715;
/// Pooled projections shorter than this are degenerate weights, not data.
const MIN_EMBED_NORM: f64 = 1e-12;

/// Captured per-sample inputs of linear layers, keyed by layer id.
/// Each matrix is `[seq_len x n_l]`.
#[derive(Debug, Clone, Default)]
pub struct ActivationTrace {
    map: BTreeMap<LayerId, Mat64>,
}

impl ActivationTrace {
    pub fn get(&self, layer: LayerId) -> Result<&Mat64> {
        self.map
            .get(&layer)
            .ok_or_else(|| Error::LayerNotCaptured(layer.to_string()))
    }

    pub fn insert(&mut self, layer: LayerId, activation: Mat64) {
        self.map.insert(layer, activation);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerId, &Mat64)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Cached LayerNorm intermediates: normalized rows and per-row inverse std.
#[derive(Debug, Clone)]
pub(super) struct LnCache {
    pub xhat: Mat64,
    pub invstd: Vec<f64>,
}

/// Everything the reverse pass needs, recorded per block.
#[derive(Debug, Clone)]
pub(super) struct BlockTape {
    pub ln1: LnCache,
    /// value input (post-LN1)
    pub z1: Mat64,
    /// out input (post-attend)
    pub attend: Mat64,
    pub ln2: LnCache,
    /// fc1 input (post-LN2)
    pub z2: Mat64,
    /// fc1 pre-activation
    pub h: Mat64,
    /// fc2 input (post-GELU)
    pub g: Mat64,
}

/// Per-sample forward record for reverse accumulation.
#[derive(Debug, Clone)]
pub struct Tape {
    pub(super) blocks: Vec<BlockTape>,
    pub(super) final_ln: LnCache,
    pub(super) proj_out: Vec<f64>,
    pub(super) proj_norm: f64,
}

impl Tape {
    /// The projection output before L2 normalization.
    pub fn prenorm_embedding(&self) -> &[f64] {
        &self.proj_out
    }
}

fn layer_norm(x: &Mat64, params: &LayerNormParams) -> (Mat64, LnCache) {
    let (t, d) = (x.rows(), x.cols());
    let mut out = Mat64::zeros(t, d);
    let mut xhat = Mat64::zeros(t, d);
    let mut invstd = vec![0.0; t];
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        invstd[r] = inv;
        for c in 0..d {
            let h = (row[c] - mean) * inv;
            xhat.set(r, c, h);
            out.set(r, c, h * params.scale[c] as f64 + params.shift[c] as f64);
        }
    }
    (out, LnCache { xhat, invstd })
}

/// y = x W + b with x `[T x in]`, W `[in x out]`.
fn linear(x: &Mat64, w: &Mat, b: &[f32]) -> Mat64 {
    let (t, n_in) = (x.rows(), x.cols());
    let n_out = w.cols();
    debug_assert_eq!(n_in, w.rows());
    let mut y = Mat64::zeros(t, n_out);
    for r in 0..t {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for (j, yv) in yr.iter_mut().enumerate() {
            *yv = b[j] as f64;
        }
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = w.row(i);
            for (j, yv) in yr.iter_mut().enumerate() {
                *yv += xv * wrow[j] as f64;
            }
        }
    }
    y
}

/// Replaces every token's vector with the mean over all tokens.
fn uniform_attend(v: &Mat64) -> Mat64 {
    let (t, d) = (v.rows(), v.cols());
    let mut mean = vec![0.0; d];
    for r in 0..t {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += v.get(r, c);
        }
    }
    for m in mean.iter_mut() {
        *m /= t as f64;
    }
    let mut out = Mat64::zeros(t, d);
    for r in 0..t {
        out.row_mut(r).copy_from_slice(&mean);
    }
    out
}

pub(super) fn gelu(x: f64) -> f64 {
    let u = (2.0 / PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(super) fn gelu_prime(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let u = c * (x + GELU_C * x * x * x);
    let th = u.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * c * (1.0 + 3.0 * GELU_C * x * x)
}

fn gelu_mat(x: &Mat64) -> Mat64 {
    let mut out = x.clone();
    for v in out.as_mut_slice() {
        *v = gelu(*v);
    }
    out
}

fn add_into(x: &mut Mat64, y: &Mat64) {
    for (a, b) in x.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *a += *b;
    }
}

fn validate_tokens(w: &EncoderWeights, tokens: &[u32]) -> Result<()> {
    if tokens.len() != w.config.seq_len {
        return Err(Error::BadSeqLen {
            got: tokens.len(),
            want: w.config.seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= w.config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            vocab: w.config.vocab_size,
        });
    }
    Ok(())
}

/// Runs the encoder over a token sequence, capturing the requested layer
/// inputs. Returns the unit-normalized embedding and the trace.
pub fn forward(
    weights: &EncoderWeights,
    tokens: &[u32],
    capture: &[LayerId],
) -> Result<(Embedding, ActivationTrace)> {
    for &layer in capture {
        weights.check_layer(layer)?;
    }
    let (embedding, tape) = forward_traced(weights, tokens)?;
    let mut trace = ActivationTrace::default();
    for &layer in capture {
        let blk = &tape.blocks[layer.block];
        let m = match layer.kind {
            LayerKind::Value => &blk.z1,
            LayerKind::Out => &blk.attend,
            LayerKind::Fc1 => &blk.z2,
            LayerKind::Fc2 => &blk.g,
        };
        trace.insert(layer, m.clone());
    }
    Ok((embedding, trace))
}

/// Forward pass recording the full tape for reverse accumulation.
pub fn forward_traced(weights: &EncoderWeights, tokens: &[u32]) -> Result<(Embedding, Tape)> {
    validate_tokens(weights, tokens)?;
    let cfg = &weights.config;
    let (t, d) = (cfg.seq_len, cfg.model_dim);

    let mut x = Mat64::zeros(t, d);
    for (r, &tok) in tokens.iter().enumerate() {
        let row = weights.embed.row(tok as usize);
        for (c, v) in x.row_mut(r).iter_mut().enumerate() {
            *v = row[c] as f64;
        }
    }

    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for blk in &weights.blocks {
        let (z1, ln1) = layer_norm(&x, &blk.ln1);
        let v = linear(&z1, &blk.value_w, &blk.value_b);
        let attend = uniform_attend(&v);
        let out = linear(&attend, &blk.out_w, &blk.out_b);
        add_into(&mut x, &out);

        let (z2, ln2) = layer_norm(&x, &blk.ln2);
        let h = linear(&z2, &blk.fc1_w, &blk.fc1_b);
        let g = gelu_mat(&h);
        let f = linear(&g, &blk.fc2_w, &blk.fc2_b);
        add_into(&mut x, &f);

        blocks.push(BlockTape { ln1, z1, attend, ln2, z2, h, g });
    }

    let (y, final_ln) = layer_norm(&x, &weights.final_ln);
    let mut pooled = vec![0.0; d];
    for r in 0..t {
        for (c, p) in pooled.iter_mut().enumerate() {
            *p += y.get(r, c);
        }
    }
    for p in pooled.iter_mut() {
        *p /= t as f64;
    }

    let de = cfg.embed_dim;
    let mut q = vec![0.0; de];
    for (i, &pv) in pooled.iter().enumerate() {
        let wrow = weights.proj.row(i);
        for (j, qv) in q.iter_mut().enumerate() {
            *qv += pv * wrow[j] as f64;
        }
    }

    let norm = q.iter().map(|&v| v * v).sum::<f64>().sqrt();
    if norm < MIN_EMBED_NORM {
        return Err(Error::ZeroNormEmbedding);
    }
    let embedding = Embedding(q.iter().map(|&v| v / norm).collect());

    Ok((
        embedding,
        Tape {
            blocks,
            final_ln,
            proj_out: q,
            proj_norm: norm,
        },
    ))
}
