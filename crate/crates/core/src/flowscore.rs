//! Activation-flow saliency and safe/unsafe score aggregation.
//!
//! Per sample, a weight's saliency couples what its input node emits with
//! what its output node receives:
//!
//! ```text
//! phi_ij = B_i * A_j
//! B_i = |z_i| * mean_j' |w_ij'|          (input node i emits)
//! A_j = mean_i' |z_i'| * |w_i'j|         (output node j receives)
//! ```
//!
//! where `|z_i|` is the L2 norm of node i's activation over the token axis.
//! Per-sample saliencies are averaged over a partition, each divided by the
//! partition-level standard deviation of the node's activation, and the
//! final score is the unsafe/safe ratio, optionally multiplied by the weight
//! magnitude on text layers.
//!
//! All reductions fold per-sample results in partition order, so the output
//! is bit-identical for any worker count.

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{split_partitions, Pair, TupleSet};
use crate::encoder::{forward, ActivationTrace, EncoderWeights, LayerId, ModelPair, Modality};
use crate::mat::{Mat, Mat64};
use crate::tensorio::TensorArchive;
use crate::{Error, Result};

/// Guards zero variance and zero safe scores.
pub const SCORE_EPS: f64 = 1e-8;

/// Per-node activation statistics over one partition, pooled over every
/// (sample, token) observation. `std` is the population formula.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
}

/// Non-negative per-layer score matrices aligned with weight shapes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    tables: BTreeMap<LayerId, Mat>,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: LayerId, table: Mat) -> Result<()> {
        if let Some(&bad) = table.as_slice().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::ShapeMismatch(format!(
                "score table for {layer} contains invalid entry {bad}"
            )));
        }
        self.tables.insert(layer, table);
        Ok(())
    }

    pub fn get(&self, layer: LayerId) -> Option<&Mat> {
        self.tables.get(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.tables.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerId, &Mat)> {
        self.tables.iter()
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    /// Persists as `<prefix>.<layer>` tensors, e.g. `score.text.block0.out`.
    pub fn to_archive(&self, prefix: &str) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        for (layer, table) in &self.tables {
            a.insert_mat(&format!("{prefix}.{layer}"), table)?;
        }
        Ok(a)
    }

    pub fn from_archive(archive: &TensorArchive, prefix: &str) -> Result<Self> {
        let mut out = ScoreTable::new();
        let dot_prefix = format!("{prefix}.");
        for (name, tensor) in archive.iter() {
            let Some(rest) = name.strip_prefix(&dot_prefix) else {
                continue;
            };
            let layer = LayerId::from_str(rest)?;
            out.insert(layer, tensor.to_mat()?)?;
        }
        if out.is_empty() {
            return Err(Error::MissingTensor(format!("{prefix}.*")));
        }
        Ok(out)
    }
}

/// L2 norm over the token axis of each captured input node.
pub fn node_norms(trace: &ActivationTrace, layer: LayerId) -> Result<Vec<f64>> {
    let z = trace.get(layer)?;
    let mut out = vec![0.0; z.cols()];
    for r in 0..z.rows() {
        for (i, v) in out.iter_mut().enumerate() {
            let x = z.get(r, i);
            *v += x * x;
        }
    }
    for v in out.iter_mut() {
        *v = v.sqrt();
    }
    Ok(out)
}

/// The rank-1 factors of the per-sample saliency: `phi = outer(B, A)`.
fn flow_factors(weight: &Mat, norms: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n_in, n_out) = (weight.rows(), weight.cols());
    let mut emits = vec![0.0; n_in]; // B_i
    let mut receives = vec![0.0; n_out]; // A_j
    for i in 0..n_in {
        let row = weight.row(i);
        let mut row_abs = 0.0;
        for (j, &w) in row.iter().enumerate() {
            let a = (w as f64).abs();
            row_abs += a;
            receives[j] += norms[i] * a;
        }
        emits[i] = norms[i] * row_abs / n_out as f64;
    }
    for r in receives.iter_mut() {
        *r /= n_in as f64;
    }
    (emits, receives)
}

/// Per-sample flow saliency of every weight.
pub fn flow_saliency(weight: &Mat, norms: &[f64]) -> Result<Mat64> {
    if norms.len() != weight.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} norms for a weight with {} input nodes",
            norms.len(),
            weight.rows()
        )));
    }
    let (emits, receives) = flow_factors(weight, norms);
    let mut phi = Mat64::zeros(weight.rows(), weight.cols());
    for i in 0..weight.rows() {
        let row = phi.row_mut(i);
        for (j, p) in row.iter_mut().enumerate() {
            *p = emits[i] * receives[j];
        }
    }
    Ok(phi)
}

/// Pools per-node mean/std from materialized traces (population formula,
/// shifted by the first observation for conditioning).
pub fn stats_from_traces(traces: &[Mat64]) -> Result<NodeStats> {
    let first = traces.first().ok_or(Error::EmptyPartition)?;
    let n = first.cols();
    let shift: Vec<f64> = first.row(0).to_vec();
    let mut sum = vec![0.0; n];
    let mut sumsq = vec![0.0; n];
    let mut count = 0usize;
    for z in traces {
        for r in 0..z.rows() {
            for (i, (s, q)) in sum.iter_mut().zip(sumsq.iter_mut()).enumerate() {
                let d = z.get(r, i) - shift[i];
                *s += d;
                *q += d * d;
            }
        }
        count += z.rows();
    }
    let cf = count as f64;
    let mut mean = vec![0.0; n];
    let mut std = vec![0.0; n];
    for i in 0..n {
        let d_mean = sum[i] / cf;
        mean[i] = shift[i] + d_mean;
        std[i] = (sumsq[i] / cf - d_mean * d_mean).max(0.0).sqrt();
    }
    Ok(NodeStats { mean, std, count })
}

fn run_ordered<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers <= 1 {
        (0..n).map(f).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::ShapeMismatch(format!("thread pool: {e}")))?;
        pool.install(|| (0..n).into_par_iter().map(&f).collect())
    }
}

fn capture_layers_of(weights: &EncoderWeights, layers: &[LayerId]) -> Result<Vec<LayerId>> {
    let mut out = Vec::new();
    for &layer in layers {
        if layer.modality != weights.modality {
            return Err(Error::LayerNotInEncoder(layer.to_string()));
        }
        out.push(layer);
    }
    Ok(out)
}

/// Multi-layer variant of [`partition_stats`]; one forward per sample.
///
/// Sums are accumulated relative to a per-node shift (the first sample's
/// first observation), so constant observations give an exact zero std.
pub fn partition_stats_multi(
    weights: &EncoderWeights,
    partition: &[Pair],
    layers: &[LayerId],
    workers: usize,
) -> Result<BTreeMap<LayerId, NodeStats>> {
    if partition.is_empty() {
        return Err(Error::EmptyPartition);
    }
    let capture = capture_layers_of(weights, layers)?;
    let seq_len = weights.config.seq_len;

    let shifts: Vec<Vec<f64>> = {
        let (_, trace) = forward(weights, partition[0].tokens(weights.modality), &capture)?;
        capture
            .iter()
            .map(|&layer| {
                let z = trace.get(layer).expect("captured above");
                z.row(0).to_vec()
            })
            .collect()
    };

    // Per-sample shifted (sum, sumsq) per layer, folded in partition order.
    let partials = run_ordered(partition.len(), workers, |s| {
        let (_, trace) = forward(weights, partition[s].tokens(weights.modality), &capture)?;
        let mut per_layer = Vec::with_capacity(capture.len());
        for (k, &layer) in capture.iter().enumerate() {
            let z = trace.get(layer)?;
            let n = z.cols();
            let mut sum = vec![0.0; n];
            let mut sumsq = vec![0.0; n];
            for r in 0..z.rows() {
                for (i, (sv, qv)) in sum.iter_mut().zip(sumsq.iter_mut()).enumerate() {
                    let d = z.get(r, i) - shifts[k][i];
                    *sv += d;
                    *qv += d * d;
                }
            }
            per_layer.push((sum, sumsq));
        }
        Ok(per_layer)
    })?;

    let count = partition.len() * seq_len;
    let cf = count as f64;
    let mut out = BTreeMap::new();
    for (k, &layer) in capture.iter().enumerate() {
        let n = weights.config.input_dim(layer.kind);
        let mut sum = vec![0.0; n];
        let mut sumsq = vec![0.0; n];
        for per_layer in &partials {
            for (i, (s, q)) in per_layer[k].0.iter().zip(&per_layer[k].1).enumerate() {
                sum[i] += s;
                sumsq[i] += q;
            }
        }
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for i in 0..n {
            let d_mean = sum[i] / cf;
            mean[i] = shifts[k][i] + d_mean;
            std[i] = (sumsq[i] / cf - d_mean * d_mean).max(0.0).sqrt();
        }
        out.insert(layer, NodeStats { mean, std, count });
    }
    Ok(out)
}

/// Streams forward passes over a partition, pooling per-node activation
/// statistics for one layer.
pub fn partition_stats(
    weights: &EncoderWeights,
    partition: &[Pair],
    layer: LayerId,
    workers: usize,
) -> Result<NodeStats> {
    let mut map = partition_stats_multi(weights, partition, &[layer], workers)?;
    Ok(map.remove(&layer).expect("requested layer present"))
}

/// Partition-averaged, variance-normalized flow scores:
/// `Phi_ij = mean_samples phi_ij / (std_i + eps)`.
pub fn accumulate_scores(
    weights: &EncoderWeights,
    partition: &[Pair],
    layers: &[LayerId],
    stats: &BTreeMap<LayerId, NodeStats>,
    workers: usize,
) -> Result<ScoreTable> {
    if partition.is_empty() {
        return Err(Error::EmptyPartition);
    }
    let capture = capture_layers_of(weights, layers)?;
    for &layer in &capture {
        let st = stats
            .get(&layer)
            .ok_or_else(|| Error::LayerMismatch(format!("no stats for {layer}")))?;
        if st.std.len() != weights.config.input_dim(layer.kind) {
            return Err(Error::LayerMismatch(format!(
                "stats for {layer} have {} nodes, expected {}",
                st.std.len(),
                weights.config.input_dim(layer.kind)
            )));
        }
    }

    // Rank-1 factors per sample, computed in parallel; the outer-product
    // accumulation folds sequentially in partition order.
    let factors = run_ordered(partition.len(), workers, |s| {
        let (_, trace) = forward(weights, partition[s].tokens(weights.modality), &capture)?;
        let mut per_layer = Vec::with_capacity(capture.len());
        for &layer in &capture {
            let norms = node_norms(&trace, layer)?;
            per_layer.push(flow_factors(weights.weight(layer)?, &norms));
        }
        Ok(per_layer)
    })?;

    let inv_n = 1.0 / partition.len() as f64;
    let mut out = ScoreTable::new();
    for (k, &layer) in capture.iter().enumerate() {
        let st = &stats[&layer];
        let (n_in, n_out) = (
            weights.config.input_dim(layer.kind),
            weights.config.output_dim(layer.kind),
        );
        let mut acc = Mat64::zeros(n_in, n_out);
        for per_layer in &factors {
            let (emits, receives) = &per_layer[k];
            for i in 0..n_in {
                let scaled = emits[i] / (st.std[i] + SCORE_EPS);
                if scaled == 0.0 {
                    continue;
                }
                let row = acc.row_mut(i);
                for (j, r) in receives.iter().enumerate() {
                    row[j] += scaled * r;
                }
            }
        }
        for v in acc.as_mut_slice() {
            *v *= inv_n;
        }
        out.insert(layer, acc.to_f32())?;
    }
    Ok(out)
}

/// Whether the final score is multiplied by the weight magnitude. The prior
/// only ever applies to text layers; applying it to the image encoder
/// degrades the model badly enough to be useless.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Prior {
    None,
    TextMagnitude,
}

impl FromStr for Prior {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Prior::None),
            "text-magnitude" => Ok(Prior::TextMagnitude),
            other => Err(Error::BadLayerId(format!("prior {other:?}"))),
        }
    }
}

/// Unsafe/safe ratio: `Phi_ij = uns_ij / (sf_ij + eps)`, with the optional
/// magnitude prior on text layers.
pub fn unsafe_ratio(
    uns: &ScoreTable,
    sf: &ScoreTable,
    model: &ModelPair,
    prior: Prior,
) -> Result<ScoreTable> {
    let uns_layers: Vec<_> = uns.layers().collect();
    let sf_layers: Vec<_> = sf.layers().collect();
    if uns_layers != sf_layers {
        return Err(Error::LayerMismatch(format!(
            "unsafe tables cover {uns_layers:?}, safe tables cover {sf_layers:?}"
        )));
    }
    let mut out = ScoreTable::new();
    for (&layer, u) in uns.iter() {
        let s = sf.get(layer).expect("layer sets already checked");
        if u.rows() != s.rows() || u.cols() != s.cols() {
            return Err(Error::ShapeMismatch(format!(
                "{layer}: unsafe {}x{} vs safe {}x{}",
                u.rows(),
                u.cols(),
                s.rows(),
                s.cols()
            )));
        }
        let weight = model.encoder(layer.modality).weight(layer)?;
        if weight.rows() != u.rows() || weight.cols() != u.cols() {
            return Err(Error::ShapeMismatch(format!(
                "{layer}: score {}x{} vs weight {}x{}",
                u.rows(),
                u.cols(),
                weight.rows(),
                weight.cols()
            )));
        }
        let apply_prior = prior == Prior::TextMagnitude && layer.modality == Modality::Text;
        let mut table = Mat::zeros(u.rows(), u.cols());
        for i in 0..u.rows() {
            for j in 0..u.cols() {
                let mut v = u.get(i, j) as f64 / (s.get(i, j) as f64 + SCORE_EPS);
                if apply_prior {
                    v *= (weight.get(i, j) as f64).abs();
                }
                table.set(i, j, v as f32);
            }
        }
        out.insert(layer, table)?;
    }
    Ok(out)
}

/// The full scoring pipeline over a calibration set: split partitions, pool
/// activation statistics, accumulate safe and unsafe scores, take the ratio.
pub fn flow_scores(
    model: &ModelPair,
    calib: &TupleSet,
    layers: &[LayerId],
    prior: Prior,
    workers: usize,
) -> Result<ScoreTable> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let (safe, unsafe_) = split_partitions(calib);
    let mut sf_all = ScoreTable::new();
    let mut uns_all = ScoreTable::new();
    for modality in [Modality::Text, Modality::Image] {
        let subset: Vec<LayerId> = layers
            .iter()
            .copied()
            .filter(|l| l.modality == modality)
            .collect();
        if subset.is_empty() {
            continue;
        }
        let weights = model.encoder(modality);
        let sf_stats = partition_stats_multi(weights, &safe, &subset, workers)?;
        let uns_stats = partition_stats_multi(weights, &unsafe_, &subset, workers)?;
        let sf = accumulate_scores(weights, &safe, &subset, &sf_stats, workers)?;
        let uns = accumulate_scores(weights, &unsafe_, &subset, &uns_stats, workers)?;
        for (&layer, table) in sf.iter() {
            sf_all.insert(layer, table.clone())?;
        }
        for (&layer, table) in uns.iter() {
            uns_all.insert(layer, table.clone())?;
        }
    }
    unsafe_ratio(&uns_all, &sf_all, model, prior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, EncoderConfig, LayerKind};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // ------------------------------------------------------------------
    // Naive reference: literal loops over the formulas, kept independent
    // of the implementation path above.
    // ------------------------------------------------------------------

    fn naive_norms(z: &Mat64) -> Vec<f64> {
        (0..z.cols())
            .map(|i| {
                (0..z.rows())
                    .map(|t| z.get(t, i) * z.get(t, i))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    fn naive_phi(w: &Mat, norms: &[f64]) -> Mat64 {
        let (n, m) = (w.rows(), w.cols());
        let mut phi = Mat64::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                let mut emits = 0.0;
                for jp in 0..m {
                    emits += (w.get(i, jp) as f64).abs();
                }
                emits = norms[i] * emits / m as f64;
                let mut receives = 0.0;
                for ip in 0..n {
                    receives += norms[ip] * (w.get(ip, j) as f64).abs();
                }
                receives /= n as f64;
                phi.set(i, j, emits * receives);
            }
        }
        phi
    }

    fn naive_std(traces: &[Mat64]) -> Vec<f64> {
        let n = traces[0].cols();
        let mut obs: Vec<Vec<f64>> = vec![Vec::new(); n];
        for z in traces {
            for t in 0..z.rows() {
                for (i, o) in obs.iter_mut().enumerate() {
                    o.push(z.get(t, i));
                }
            }
        }
        obs.iter()
            .map(|o| {
                let m = o.iter().sum::<f64>() / o.len() as f64;
                (o.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / o.len() as f64).sqrt()
            })
            .collect()
    }

    fn naive_accumulate(w: &Mat, traces: &[Mat64]) -> Mat64 {
        let std = naive_std(traces);
        let mut acc = Mat64::zeros(w.rows(), w.cols());
        for z in traces {
            let phi = naive_phi(w, &naive_norms(z));
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    let v = acc.get(i, j) + phi.get(i, j) / (std[i] + SCORE_EPS);
                    acc.set(i, j, v);
                }
            }
        }
        for v in acc.as_mut_slice() {
            *v /= traces.len() as f64;
        }
        acc
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
    }

    fn trace_of(weights: &EncoderWeights, pair: &Pair, layer: LayerId) -> Mat64 {
        let (_, trace) = forward(weights, pair.tokens(weights.modality), &[layer]).unwrap();
        trace.get(layer).unwrap().clone()
    }

    fn random_pairs(n: usize, cfg: &EncoderConfig, seed: u64) -> Vec<Pair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Pair {
                image: (0..cfg.seq_len)
                    .map(|_| rng.random_range(0..cfg.vocab_size))
                    .collect(),
                text: (0..cfg.seq_len)
                    .map(|_| rng.random_range(0..cfg.vocab_size))
                    .collect(),
            })
            .collect()
    }

    fn toy_model(cfg: &EncoderConfig, seed: u64) -> ModelPair {
        ModelPair {
            text: init_encoder(cfg, Modality::Text, seed).unwrap(),
            image: init_encoder(cfg, Modality::Image, seed + 1).unwrap(),
        }
    }

    // ------------------------------------------------------------------

    #[test]
    fn node_norms_basics() {
        let mut trace = ActivationTrace::default();
        let layer = LayerId::new(Modality::Text, 0, LayerKind::Value);
        trace.insert(layer, Mat64::zeros(3, 2));
        assert_eq!(node_norms(&trace, layer).unwrap(), vec![0.0, 0.0]);

        let mut trace = ActivationTrace::default();
        trace.insert(layer, Mat64::from_vec(1, 2, vec![-2.0, 0.5]));
        assert_eq!(node_norms(&trace, layer).unwrap(), vec![2.0, 0.5]);

        let mut trace = ActivationTrace::default();
        trace.insert(layer, Mat64::from_vec(2, 1, vec![3.0, 4.0]));
        assert_eq!(node_norms(&trace, layer).unwrap(), vec![5.0]);

        let other = LayerId::new(Modality::Text, 0, LayerKind::Out);
        assert!(matches!(
            node_norms(&trace, other),
            Err(Error::LayerNotCaptured(_))
        ));
    }

    #[test]
    fn flow_saliency_worked_example() {
        // theta = [[1,-2],[0,3]], norms = [1,2]
        // emits B = [1.5, 3], receives A = [0.5, 4]
        let w = Mat::from_vec(2, 2, vec![1.0, -2.0, 0.0, 3.0]);
        let phi = flow_saliency(&w, &[1.0, 2.0]).unwrap();
        assert_eq!(phi.as_slice(), &[0.75, 6.0, 1.5, 12.0]);
        let reference = naive_phi(&w, &[1.0, 2.0]);
        assert_eq!(phi.as_slice(), reference.as_slice());

        let zero = Mat::zeros(2, 2);
        assert_eq!(flow_saliency(&zero, &[1.0, 2.0]).unwrap().as_slice(), &[0.0; 4]);

        assert!(flow_saliency(&w, &[1.0]).is_err());
    }

    #[test]
    fn flow_saliency_scales_quadratically_with_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Mat::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let norms: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..2.0)).collect();
        let c = 1.7;
        let scaled: Vec<f64> = norms.iter().map(|&v| c * v).collect();
        let phi = flow_saliency(&w, &norms).unwrap();
        let phi_c = flow_saliency(&w, &scaled).unwrap();
        for (a, b) in phi.as_slice().iter().zip(phi_c.as_slice()) {
            assert!(rel_close(*b, c * c * a, 1e-12), "{b} vs {}", c * c * a);
        }
    }

    #[test]
    fn stats_two_point_example() {
        let traces = vec![
            Mat64::from_vec(1, 1, vec![1.0]),
            Mat64::from_vec(1, 1, vec![3.0]),
        ];
        let st = stats_from_traces(&traces).unwrap();
        assert_eq!(st.mean, vec![2.0]);
        assert_eq!(st.std, vec![1.0]);
        assert_eq!(st.count, 2);
    }

    #[test]
    fn partition_stats_identical_observations_have_zero_std() {
        let cfg = EncoderConfig {
            vocab_size: 16,
            seq_len: 4,
            model_dim: 6,
            ff_dim: 8,
            num_blocks: 1,
            embed_dim: 4,
        };
        let w = init_encoder(&cfg, Modality::Text, 2).unwrap();
        // Identical samples with a constant token sequence: every
        // (sample, token) observation coincides, so std is exactly zero.
        let pair = Pair { image: vec![0; 4], text: vec![7; 4] };
        let layer = LayerId::new(Modality::Text, 0, LayerKind::Fc2);
        let st = partition_stats(&w, &[pair.clone(), pair.clone(), pair.clone()], layer, 1).unwrap();
        assert!(st.std.iter().all(|&s| s == 0.0), "std: {:?}", st.std);

        // Identical samples with varying tokens: std pools the token axis;
        // must match the materialized-trace oracle.
        let varied = Pair { image: vec![0, 1, 2, 3], text: vec![5, 6, 7, 8] };
        let st = partition_stats(&w, &[varied.clone(), varied.clone()], layer, 1).unwrap();
        let tr = trace_of(&w, &varied, layer);
        let oracle = naive_std(&[tr.clone(), tr]);
        for (a, b) in st.std.iter().zip(&oracle) {
            assert!(rel_close(*a, *b, 1e-9));
        }
        assert!(matches!(
            partition_stats(&w, &[], layer, 1),
            Err(Error::EmptyPartition)
        ));
    }

    #[test]
    fn accumulate_matches_oracle_and_eps_rule() {
        let cfg = EncoderConfig {
            vocab_size: 16,
            seq_len: 4,
            model_dim: 4,
            ff_dim: 6,
            num_blocks: 1,
            embed_dim: 4,
        };
        let w = init_encoder(&cfg, Modality::Image, 5).unwrap();
        let layer = LayerId::new(Modality::Image, 0, LayerKind::Value);
        let pairs = random_pairs(4, &cfg, 11);

        let stats = partition_stats_multi(&w, &pairs, &[layer], 1).unwrap();
        let table = accumulate_scores(&w, &pairs, &[layer], &stats, 1).unwrap();

        let traces: Vec<Mat64> = pairs.iter().map(|p| trace_of(&w, p, layer)).collect();
        let oracle = naive_accumulate(w.weight(layer).unwrap(), &traces);
        for (a, b) in table.get(layer).unwrap().as_slice().iter().zip(oracle.as_slice()) {
            assert!(rel_close(*a as f64, *b, 1e-5), "{a} vs {b}");
        }

        // Two identical samples equal the single-sample value.
        let one = accumulate_scores(&w, &pairs[..1], &[layer], &partition_stats_multi(&w, &pairs[..1], &[layer], 1).unwrap(), 1).unwrap();
        let two_pairs = vec![pairs[0].clone(), pairs[0].clone()];
        let two = accumulate_scores(&w, &two_pairs, &[layer], &partition_stats_multi(&w, &two_pairs, &[layer], 1).unwrap(), 1).unwrap();
        for (a, b) in one.get(layer).unwrap().as_slice().iter().zip(two.get(layer).unwrap().as_slice()) {
            assert!(rel_close(*a as f64, *b as f64, 1e-6));
        }
    }

    #[test]
    fn zero_std_uses_eps_guard() {
        // sigma = 0 everywhere: scores become phi / eps, not inf.
        let w = Mat::from_vec(1, 1, vec![2.0]);
        let traces = vec![Mat64::from_vec(1, 1, vec![1.5])];
        let oracle = naive_accumulate(&w, &traces);
        let phi = naive_phi(&w, &naive_norms(&traces[0]));
        assert!(rel_close(oracle.get(0, 0), phi.get(0, 0) / SCORE_EPS, 1e-12));

        // Same rule through the real path: one sample with a constant token
        // sequence gives exactly zero std, so Phi = phi / eps.
        let cfg = EncoderConfig {
            vocab_size: 8,
            seq_len: 3,
            model_dim: 4,
            ff_dim: 4,
            num_blocks: 1,
            embed_dim: 2,
        };
        let enc = init_encoder(&cfg, Modality::Text, 9).unwrap();
        let layer = LayerId::new(Modality::Text, 0, LayerKind::Value);
        let pair = Pair { image: vec![0; 3], text: vec![5; 3] };
        let stats = partition_stats_multi(&enc, std::slice::from_ref(&pair), &[layer], 1).unwrap();
        assert!(stats[&layer].std.iter().all(|&s| s == 0.0));
        let table =
            accumulate_scores(&enc, std::slice::from_ref(&pair), &[layer], &stats, 1).unwrap();
        let tr = trace_of(&enc, &pair, layer);
        let phi = naive_phi(enc.weight(layer).unwrap(), &naive_norms(&tr));
        for i in 0..4 {
            for j in 0..4 {
                let want = phi.get(i, j) / SCORE_EPS;
                let have = table.get(layer).unwrap().get(i, j) as f64;
                assert!(rel_close(have, want, 1e-5), "({i},{j}): {have} vs {want}");
            }
        }
    }

    #[test]
    fn worker_count_never_changes_bits() {
        let cfg = EncoderConfig {
            vocab_size: 32,
            seq_len: 6,
            model_dim: 8,
            ff_dim: 10,
            num_blocks: 2,
            embed_dim: 6,
        };
        let model = toy_model(&cfg, 3);
        let layers = crate::encoder::default_target_layers(&cfg);
        let pairs = random_pairs(17, &cfg, 23);
        let tuples: Vec<_> = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| crate::calibration::CalibTuple {
                id: i as u64,
                concept: "c".to_string(),
                t_s: p.text.clone(),
                t_u: p.image.clone(),
                v_s: p.image.clone(),
                v_u: p.text.clone(),
            })
            .collect();
        let set = crate::calibration::TupleSet::new(tuples, vec!["c".to_string()]).unwrap();
        let s1 = flow_scores(&model, &set, &layers, Prior::TextMagnitude, 1).unwrap();
        let s4 = flow_scores(&model, &set, &layers, Prior::TextMagnitude, 4).unwrap();
        for (layer, t1) in s1.iter() {
            assert!(t1.bits_eq(s4.get(*layer).unwrap()), "layer {layer} differs");
        }
    }

    #[test]
    fn ratio_basics_and_prior() {
        let cfg = EncoderConfig {
            vocab_size: 8,
            seq_len: 2,
            model_dim: 2,
            ff_dim: 2,
            num_blocks: 1,
            embed_dim: 2,
        };
        let mut model = toy_model(&cfg, 1);
        let layer = LayerId::new(Modality::Text, 0, LayerKind::Out);

        let mut sf = ScoreTable::new();
        sf.insert(layer, Mat::from_vec(2, 2, vec![1.0, 2.0, 4.0, 8.0])).unwrap();
        let mut uns = ScoreTable::new();
        uns.insert(layer, Mat::from_vec(2, 2, vec![1.0, 2.0, 4.0, 8.0])).unwrap();

        let r = unsafe_ratio(&uns, &sf, &model, Prior::None).unwrap();
        for &v in r.get(layer).unwrap().as_slice() {
            assert!((v - 1.0).abs() < 1e-6);
        }

        let mut uns2 = ScoreTable::new();
        uns2.insert(layer, Mat::from_vec(2, 2, vec![2.0, 4.0, 8.0, 16.0])).unwrap();
        let r2 = unsafe_ratio(&uns2, &sf, &model, Prior::None).unwrap();
        for &v in r2.get(layer).unwrap().as_slice() {
            assert!((v - 2.0).abs() < 1e-6);
        }

        // Magnitude prior zeroes entries whose weight is zero, text only.
        model.text.weight_mut(layer).unwrap().set(0, 0, 0.0);
        let r3 = unsafe_ratio(&uns2, &sf, &model, Prior::TextMagnitude).unwrap();
        assert_eq!(r3.get(layer).unwrap().get(0, 0), 0.0);
        assert!(r3.get(layer).unwrap().get(0, 1) > 0.0);

        // Image layers are never prior-multiplied.
        let img_layer = LayerId::new(Modality::Image, 0, LayerKind::Fc2);
        let mut sf_img = ScoreTable::new();
        sf_img.insert(img_layer, Mat::from_vec(2, 2, vec![1.0; 4])).unwrap();
        let mut uns_img = ScoreTable::new();
        uns_img.insert(img_layer, Mat::from_vec(2, 2, vec![3.0; 4])).unwrap();
        model.image.weight_mut(img_layer).unwrap().set(0, 0, 0.0);
        let r4 = unsafe_ratio(&uns_img, &sf_img, &model, Prior::TextMagnitude).unwrap();
        assert!((r4.get(img_layer).unwrap().get(0, 0) - 3.0).abs() < 1e-6);

        // Mismatched layer sets are rejected.
        assert!(matches!(
            unsafe_ratio(&uns_img, &sf, &model, Prior::None),
            Err(Error::LayerMismatch(_))
        ));
    }

    #[test]
    fn score_archive_roundtrip() {
        let layer = LayerId::new(Modality::Image, 1, LayerKind::Fc2);
        let mut t = ScoreTable::new();
        t.insert(layer, Mat::from_vec(2, 3, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5])).unwrap();
        let archive = t.to_archive("score").unwrap();
        assert!(archive.get("score.image.block1.fc2").is_some());
        let back = ScoreTable::from_archive(&archive, "score").unwrap();
        assert_eq!(t, back);
        assert!(ScoreTable::from_archive(&archive, "gradscore").is_err());
    }

    #[test]
    fn negative_scores_rejected() {
        let layer = LayerId::new(Modality::Text, 0, LayerKind::Out);
        let mut t = ScoreTable::new();
        assert!(t.insert(layer, Mat::from_vec(1, 1, vec![-0.5])).is_err());
    }
}
