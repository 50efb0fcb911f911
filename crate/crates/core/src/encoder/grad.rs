//! Reverse accumulation through the encoder.
//!
//! [`backward`] turns a gradient with respect to the unit embedding into
//! gradients of selected linear-layer weight matrices. [`layer_gradient`]
//! wires that into the baseline losses over a batch of calibration tuples.

use std::collections::BTreeMap;

use crate::calibration::CalibTuple;
use crate::gradbase::{embedding_grads, live_tokens, LossSpec};
use crate::mat::{Mat, Mat64};
use crate::{Error, Result};

use super::forward::{forward_traced, gelu_prime, LnCache, Tape};
use super::{EncoderWeights, LayerId, LayerKind, LayerNormParams, ModelPair};

/// a^T b for a `[T x n]`, b `[T x m]` -> `[n x m]`.
fn mat_t_mul(a: &Mat64, b: &Mat64) -> Mat64 {
    let (t, n) = (a.rows(), a.cols());
    let m = b.cols();
    debug_assert_eq!(t, b.rows());
    let mut out = Mat64::zeros(n, m);
    for r in 0..t {
        let ar = a.row(r);
        let br = b.row(r);
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = out.row_mut(i);
            for (j, &bv) in br.iter().enumerate() {
                orow[j] += av * bv;
            }
        }
    }
    out
}

/// dy W^T for dy `[T x out]`, W `[in x out]` -> `[T x in]`.
fn mul_weight_t(dy: &Mat64, w: &Mat) -> Mat64 {
    let (t, n_out) = (dy.rows(), dy.cols());
    let n_in = w.rows();
    debug_assert_eq!(n_out, w.cols());
    let mut out = Mat64::zeros(t, n_in);
    for r in 0..t {
        let dyr = dy.row(r);
        let orow = out.row_mut(r);
        for (i, ov) in orow.iter_mut().enumerate() {
            let wrow = w.row(i);
            let mut acc = 0.0;
            for (j, &dv) in dyr.iter().enumerate() {
                acc += dv * wrow[j] as f64;
            }
            *ov = acc;
        }
    }
    out
}

fn ln_backward(dy: &Mat64, cache: &LnCache, params: &LayerNormParams) -> Mat64 {
    let (t, d) = (dy.rows(), dy.cols());
    let mut dx = Mat64::zeros(t, d);
    for r in 0..t {
        let dyr = dy.row(r);
        let xhat = cache.xhat.row(r);
        let inv = cache.invstd[r];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..d {
            let a = dyr[c] * params.scale[c] as f64;
            m1 += a;
            m2 += a * xhat[c];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for c in 0..d {
            let a = dyr[c] * params.scale[c] as f64;
            dx.set(r, c, inv * (a - m1 - xhat[c] * m2));
        }
    }
    dx
}

fn add_into(x: &mut Mat64, y: &Mat64) {
    for (a, b) in x.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *a += *b;
    }
}

/// Propagates `grad_embedding` (gradient w.r.t. the unit-normalized
/// embedding) back through one recorded forward pass, accumulating the
/// gradients of the requested weight matrices into `acc`.
pub fn backward(
    weights: &EncoderWeights,
    tape: &Tape,
    grad_embedding: &[f64],
    acc: &mut BTreeMap<LayerId, Mat64>,
) {
    let cfg = &weights.config;
    let (t, d) = (cfg.seq_len, cfg.model_dim);
    debug_assert_eq!(grad_embedding.len(), cfg.embed_dim);

    // L2 normalization: e = q / |q|. dq = (g - e (e.g)) / |q|
    let n = tape.proj_norm;
    let e: Vec<f64> = tape.proj_out.iter().map(|&q| q / n).collect();
    let edotg: f64 = e.iter().zip(grad_embedding).map(|(a, b)| a * b).sum();
    let dq: Vec<f64> = grad_embedding
        .iter()
        .zip(&e)
        .map(|(&g, &ev)| (g - ev * edotg) / n)
        .collect();

    // Projection: q = p P.  dp_i = sum_j dq_j P[i, j]
    let mut dp = vec![0.0; d];
    for (i, dpv) in dp.iter_mut().enumerate() {
        let wrow = weights.proj.row(i);
        *dpv = dq
            .iter()
            .enumerate()
            .map(|(j, &dv)| dv * wrow[j] as f64)
            .sum();
    }

    // Mean pooling: each token row receives dp / T.
    let mut dx = Mat64::zeros(t, d);
    for r in 0..t {
        for (c, v) in dx.row_mut(r).iter_mut().enumerate() {
            *v = dp[c] / t as f64;
        }
    }

    dx = ln_backward(&dx, &tape.final_ln, &weights.final_ln);

    for (b, blk) in weights.blocks.iter().enumerate().rev() {
        let tp = &tape.blocks[b];

        // MLP branch: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
        let df = dx.clone();
        if let Some(g) = acc.get_mut(&LayerId::new(weights.modality, b, LayerKind::Fc2)) {
            add_into(g, &mat_t_mul(&tp.g, &df));
        }
        let dg = mul_weight_t(&df, &blk.fc2_w);
        let mut dh = dg;
        for (v, &hv) in dh.as_mut_slice().iter_mut().zip(tp.h.as_slice()) {
            *v *= gelu_prime(hv);
        }
        if let Some(g) = acc.get_mut(&LayerId::new(weights.modality, b, LayerKind::Fc1)) {
            add_into(g, &mat_t_mul(&tp.z2, &dh));
        }
        let dz2 = mul_weight_t(&dh, &blk.fc1_w);
        add_into(&mut dx, &ln_backward(&dz2, &tp.ln2, &blk.ln2));

        // Attention branch: x_mid = x_in + out(attend(value(ln1(x_in))))
        let dout = dx.clone();
        if let Some(g) = acc.get_mut(&LayerId::new(weights.modality, b, LayerKind::Out)) {
            add_into(g, &mat_t_mul(&tp.attend, &dout));
        }
        let da = mul_weight_t(&dout, &blk.out_w);
        // attend[t] = mean_s v[s]: every value row receives the column mean.
        let mut col_mean = vec![0.0; d];
        for r in 0..t {
            for (c, m) in col_mean.iter_mut().enumerate() {
                *m += da.get(r, c);
            }
        }
        for m in col_mean.iter_mut() {
            *m /= t as f64;
        }
        let mut dv = Mat64::zeros(t, d);
        for r in 0..t {
            dv.row_mut(r).copy_from_slice(&col_mean);
        }
        if let Some(g) = acc.get_mut(&LayerId::new(weights.modality, b, LayerKind::Value)) {
            add_into(g, &mat_t_mul(&tp.z1, &dv));
        }
        let dz1 = mul_weight_t(&dv, &blk.value_w);
        add_into(&mut dx, &ln_backward(&dz1, &tp.ln1, &blk.ln1));
    }
}

/// Exact gradient of a baseline loss over `batch` with respect to the
/// requested linear-layer weight matrices of the live encoder.
pub fn layer_gradient(
    live: &EncoderWeights,
    frozen: &ModelPair,
    loss: &LossSpec,
    batch: &[CalibTuple],
    layers: &[LayerId],
) -> Result<BTreeMap<LayerId, Mat64>> {
    if loss.modality != live.modality {
        return Err(Error::LayerMismatch(format!(
            "loss targets the {} encoder but live weights are {}",
            loss.modality, live.modality
        )));
    }
    for &layer in layers {
        live.check_layer(layer)?;
    }
    if batch.is_empty() {
        return Err(Error::EmptyCalibration);
    }

    let mut tapes: Vec<Tape> = Vec::with_capacity(batch.len());
    let mut embs = Vec::with_capacity(batch.len());
    for tuple in batch {
        let (e, tape) = forward_traced(live, live_tokens(loss, tuple))?;
        embs.push(e);
        tapes.push(tape);
    }
    let (_, grads) = embedding_grads(loss, batch, &embs, frozen)?;

    let mut acc: BTreeMap<LayerId, Mat64> = layers
        .iter()
        .map(|&id| {
            let shape = (
                live.config.input_dim(id.kind),
                live.config.output_dim(id.kind),
            );
            (id, Mat64::zeros(shape.0, shape.1))
        })
        .collect();
    for (tape, g) in tapes.iter().zip(&grads) {
        backward(live, tape, g, &mut acc);
    }
    Ok(acc)
}
