//! A compact dual-encoder contrastive model with activation capture.
//!
//! Each encoder is a stack of pre-norm blocks over token embeddings:
//!
//! ```text
//! x <- x + Out(UniformAttend(Value(LN1(x))))
//! x <- x + Fc2(GELU(Fc1(LN2(x))))
//! ```
//!
//! followed by a final LayerNorm, mean pooling over the sequence, a linear
//! projection, and L2 normalization. UniformAttend replaces every token's
//! value vector with the mean over all tokens, so the model keeps the
//! value/out projections that get manipulated without attention logits.
//! There are no positional embeddings; outputs depend on the token multiset.
//!
//! Weights are stored as f32 (the archive dtype); all arithmetic runs in f64
//! so gradient checks against central finite differences hold at 1e-4.

mod forward;
mod grad;

pub use forward::{forward, forward_traced, ActivationTrace, Tape};
pub use grad::{backward, layer_gradient};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mat::Mat;
use crate::tensorio::{validate_archive, TensorArchive};
use crate::{Error, Result};

/// Which encoder a layer or input belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            other => Err(Error::BadLayerId(other.to_string())),
        }
    }
}

/// The four linear layers per block that scoring and editing touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Value,
    Out,
    Fc1,
    Fc2,
}

impl LayerKind {
    pub const ALL: [LayerKind; 4] = [LayerKind::Value, LayerKind::Out, LayerKind::Fc1, LayerKind::Fc2];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Value => "value",
            LayerKind::Out => "out",
            LayerKind::Fc1 => "fc1",
            LayerKind::Fc2 => "fc2",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "value" => Ok(LayerKind::Value),
            "out" => Ok(LayerKind::Out),
            "fc1" => Ok(LayerKind::Fc1),
            "fc2" => Ok(LayerKind::Fc2),
            other => Err(Error::BadLayerId(other.to_string())),
        }
    }
}

/// Identifies one linear layer's weight matrix, e.g. `text.block0.out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub modality: Modality,
    pub block: usize,
    pub kind: LayerKind,
}

impl LayerId {
    pub fn new(modality: Modality, block: usize, kind: LayerKind) -> Self {
        Self { modality, block, kind }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.block{}.{}", self.modality, self.block, self.kind)
    }
}

impl FromStr for LayerId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('.');
        let (Some(m), Some(b), Some(k), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::BadLayerId(s.to_string()));
        };
        let modality = m.parse()?;
        let block = b
            .strip_prefix("block")
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| Error::BadLayerId(s.to_string()))?;
        let kind = k.parse()?;
        Ok(LayerId::new(modality, block, kind))
    }
}

/// Architecture description for one encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: u32,
    pub seq_len: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub num_blocks: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            seq_len: 16,
            model_dim: 32,
            ff_dim: 128,
            num_blocks: 2,
            embed_dim: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.seq_len == 0
            || self.model_dim == 0
            || self.ff_dim == 0
            || self.num_blocks == 0
            || self.embed_dim == 0
        {
            return Err(Error::BadConfig("all dimensions must be >= 1".to_string()));
        }
        if self.ff_dim < self.model_dim {
            return Err(Error::BadConfig(format!(
                "ff_dim {} < model_dim {}",
                self.ff_dim, self.model_dim
            )));
        }
        Ok(())
    }

    /// Input dimension n_l of a layer kind's weight matrix.
    pub fn input_dim(&self, kind: LayerKind) -> usize {
        match kind {
            LayerKind::Value | LayerKind::Out | LayerKind::Fc1 => self.model_dim,
            LayerKind::Fc2 => self.ff_dim,
        }
    }

    /// Output dimension n_{l+1} of a layer kind's weight matrix.
    pub fn output_dim(&self, kind: LayerKind) -> usize {
        match kind {
            LayerKind::Value | LayerKind::Out | LayerKind::Fc2 => self.model_dim,
            LayerKind::Fc1 => self.ff_dim,
        }
    }
}

/// Scale/shift pair for one LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl LayerNormParams {
    fn identity(dim: usize) -> Self {
        Self {
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }
}

/// Weights of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNormParams,
    pub value_w: Mat,
    pub value_b: Vec<f32>,
    pub out_w: Mat,
    pub out_b: Vec<f32>,
    pub ln2: LayerNormParams,
    pub fc1_w: Mat,
    pub fc1_b: Vec<f32>,
    pub fc2_w: Mat,
    pub fc2_b: Vec<f32>,
}

/// Full parameter set of one encoder. Weight matrices are `[input x output]`:
/// entry `(i, j)` connects input node `i` to output node `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub modality: Modality,
    pub embed: Mat,
    pub blocks: Vec<BlockWeights>,
    pub final_ln: LayerNormParams,
    pub proj: Mat,
}

/// The text/image encoder pair that makes up one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub text: EncoderWeights,
    pub image: EncoderWeights,
}

impl ModelPair {
    pub fn encoder(&self, modality: Modality) -> &EncoderWeights {
        match modality {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }

    pub fn encoder_mut(&mut self, modality: Modality) -> &mut EncoderWeights {
        match modality {
            Modality::Text => &mut self.text,
            Modality::Image => &mut self.image,
        }
    }
}

/// Seeded init: uniform weights scaled by 1/sqrt(fan_in), zero biases,
/// identity LayerNorms. The same (config, seed) reproduces identical bits.
pub fn init_encoder(config: &EncoderConfig, modality: Modality, seed: u64) -> Result<EncoderWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.model_dim;
    let ff = config.ff_dim;

    let mut draw = |rows: usize, cols: usize, fan_in: usize| -> Mat {
        let s = 1.0 / (fan_in as f32).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-s..s)).collect();
        Mat::from_vec(rows, cols, data)
    };

    let embed = draw(config.vocab_size as usize, d, d);
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for _ in 0..config.num_blocks {
        blocks.push(BlockWeights {
            ln1: LayerNormParams::identity(d),
            value_w: draw(d, d, d),
            value_b: vec![0.0; d],
            out_w: draw(d, d, d),
            out_b: vec![0.0; d],
            ln2: LayerNormParams::identity(d),
            fc1_w: draw(d, ff, d),
            fc1_b: vec![0.0; ff],
            fc2_w: draw(ff, d, ff),
            fc2_b: vec![0.0; d],
        });
    }
    let final_ln = LayerNormParams::identity(d);
    let proj = draw(d, config.embed_dim, d);

    Ok(EncoderWeights {
        config: *config,
        modality,
        embed,
        blocks,
        final_ln,
        proj,
    })
}

impl EncoderWeights {
    /// All linear-layer ids of this encoder, in block order.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        let mut out = Vec::new();
        for b in 0..self.config.num_blocks {
            for kind in LayerKind::ALL {
                out.push(LayerId::new(self.modality, b, kind));
            }
        }
        out
    }

    fn check_layer(&self, id: LayerId) -> Result<()> {
        if id.modality != self.modality || id.block >= self.config.num_blocks {
            return Err(Error::LayerNotInEncoder(id.to_string()));
        }
        Ok(())
    }

    /// The weight matrix of one linear layer.
    pub fn weight(&self, id: LayerId) -> Result<&Mat> {
        self.check_layer(id)?;
        let b = &self.blocks[id.block];
        Ok(match id.kind {
            LayerKind::Value => &b.value_w,
            LayerKind::Out => &b.out_w,
            LayerKind::Fc1 => &b.fc1_w,
            LayerKind::Fc2 => &b.fc2_w,
        })
    }

    pub fn weight_mut(&mut self, id: LayerId) -> Result<&mut Mat> {
        self.check_layer(id)?;
        let b = &mut self.blocks[id.block];
        Ok(match id.kind {
            LayerKind::Value => &mut b.value_w,
            LayerKind::Out => &mut b.out_w,
            LayerKind::Fc1 => &mut b.fc1_w,
            LayerKind::Fc2 => &mut b.fc2_w,
        })
    }

    /// Tensor names and shapes this encoder serializes to.
    pub fn expected_shapes(config: &EncoderConfig, modality: Modality) -> BTreeMap<String, Vec<usize>> {
        let m = modality.as_str();
        let d = config.model_dim;
        let ff = config.ff_dim;
        let mut map = BTreeMap::new();
        map.insert(format!("{m}.embed"), vec![config.vocab_size as usize, d]);
        for b in 0..config.num_blocks {
            map.insert(format!("{m}.block{b}.value.weight"), vec![d, d]);
            map.insert(format!("{m}.block{b}.value.bias"), vec![d]);
            map.insert(format!("{m}.block{b}.out.weight"), vec![d, d]);
            map.insert(format!("{m}.block{b}.out.bias"), vec![d]);
            map.insert(format!("{m}.block{b}.fc1.weight"), vec![d, ff]);
            map.insert(format!("{m}.block{b}.fc1.bias"), vec![ff]);
            map.insert(format!("{m}.block{b}.fc2.weight"), vec![ff, d]);
            map.insert(format!("{m}.block{b}.fc2.bias"), vec![d]);
            // Flat LayerNorm index: block b holds ln{2b} and ln{2b+1}.
            map.insert(format!("{m}.ln{}.scale", 2 * b), vec![d]);
            map.insert(format!("{m}.ln{}.shift", 2 * b), vec![d]);
            map.insert(format!("{m}.ln{}.scale", 2 * b + 1), vec![d]);
            map.insert(format!("{m}.ln{}.shift", 2 * b + 1), vec![d]);
        }
        map.insert(format!("{m}.final_ln.scale"), vec![d]);
        map.insert(format!("{m}.final_ln.shift"), vec![d]);
        map.insert(format!("{m}.proj"), vec![d, config.embed_dim]);
        map
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let m = self.modality.as_str();
        let mut a = TensorArchive::new();
        a.insert_mat(&format!("{m}.embed"), &self.embed)?;
        for (b, blk) in self.blocks.iter().enumerate() {
            a.insert_mat(&format!("{m}.block{b}.value.weight"), &blk.value_w)?;
            a.insert_vec(&format!("{m}.block{b}.value.bias"), &blk.value_b)?;
            a.insert_mat(&format!("{m}.block{b}.out.weight"), &blk.out_w)?;
            a.insert_vec(&format!("{m}.block{b}.out.bias"), &blk.out_b)?;
            a.insert_mat(&format!("{m}.block{b}.fc1.weight"), &blk.fc1_w)?;
            a.insert_vec(&format!("{m}.block{b}.fc1.bias"), &blk.fc1_b)?;
            a.insert_mat(&format!("{m}.block{b}.fc2.weight"), &blk.fc2_w)?;
            a.insert_vec(&format!("{m}.block{b}.fc2.bias"), &blk.fc2_b)?;
            a.insert_vec(&format!("{m}.ln{}.scale", 2 * b), &blk.ln1.scale)?;
            a.insert_vec(&format!("{m}.ln{}.shift", 2 * b), &blk.ln1.shift)?;
            a.insert_vec(&format!("{m}.ln{}.scale", 2 * b + 1), &blk.ln2.scale)?;
            a.insert_vec(&format!("{m}.ln{}.shift", 2 * b + 1), &blk.ln2.shift)?;
        }
        a.insert_vec(&format!("{m}.final_ln.scale"), &self.final_ln.scale)?;
        a.insert_vec(&format!("{m}.final_ln.shift"), &self.final_ln.shift)?;
        a.insert_mat(&format!("{m}.proj"), &self.proj)?;
        Ok(a)
    }

    pub fn from_archive(
        archive: &TensorArchive,
        config: &EncoderConfig,
        modality: Modality,
    ) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(config, modality);
        let mismatches = validate_archive(archive, &expected);
        if !mismatches.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "weight archive does not match config: {mismatches:?}"
            )));
        }
        let m = modality.as_str();
        let mat = |name: &str| -> Result<Mat> { archive.require(name)?.to_mat() };
        let vec = |name: &str| -> Result<Vec<f32>> { Ok(archive.require(name)?.data.clone()) };
        let ln = |i: usize| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                scale: vec(&format!("{m}.ln{i}.scale"))?,
                shift: vec(&format!("{m}.ln{i}.shift"))?,
            })
        };
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            blocks.push(BlockWeights {
                ln1: ln(2 * b)?,
                value_w: mat(&format!("{m}.block{b}.value.weight"))?,
                value_b: vec(&format!("{m}.block{b}.value.bias"))?,
                out_w: mat(&format!("{m}.block{b}.out.weight"))?,
                out_b: vec(&format!("{m}.block{b}.out.bias"))?,
                ln2: ln(2 * b + 1)?,
                fc1_w: mat(&format!("{m}.block{b}.fc1.weight"))?,
                fc1_b: vec(&format!("{m}.block{b}.fc1.bias"))?,
                fc2_w: mat(&format!("{m}.block{b}.fc2.weight"))?,
                fc2_b: vec(&format!("{m}.block{b}.fc2.bias"))?,
            });
        }
        Ok(EncoderWeights {
            config: *config,
            modality,
            embed: mat(&format!("{m}.embed"))?,
            blocks,
            final_ln: LayerNormParams {
                scale: vec(&format!("{m}.final_ln.scale"))?,
                shift: vec(&format!("{m}.final_ln.shift"))?,
            },
            proj: mat(&format!("{m}.proj"))?,
        })
    }

    /// Bitwise equality over every tensor.
    pub fn bits_eq(&self, other: &EncoderWeights) -> bool {
        let vecs_eq = |a: &[f32], b: &[f32]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        if self.config != other.config
            || self.modality != other.modality
            || !self.embed.bits_eq(&other.embed)
            || !self.proj.bits_eq(&other.proj)
            || !vecs_eq(&self.final_ln.scale, &other.final_ln.scale)
            || !vecs_eq(&self.final_ln.shift, &other.final_ln.shift)
        {
            return false;
        }
        self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
            a.value_w.bits_eq(&b.value_w)
                && vecs_eq(&a.value_b, &b.value_b)
                && a.out_w.bits_eq(&b.out_w)
                && vecs_eq(&a.out_b, &b.out_b)
                && a.fc1_w.bits_eq(&b.fc1_w)
                && vecs_eq(&a.fc1_b, &b.fc1_b)
                && a.fc2_w.bits_eq(&b.fc2_w)
                && vecs_eq(&a.fc2_b, &b.fc2_b)
                && vecs_eq(&a.ln1.scale, &b.ln1.scale)
                && vecs_eq(&a.ln1.shift, &b.ln1.shift)
                && vecs_eq(&a.ln2.scale, &b.ln2.scale)
                && vecs_eq(&a.ln2.shift, &b.ln2.shift)
        })
    }
}

/// Default manipulation targets: the text out-projection and the image fc2,
/// across all blocks.
pub fn default_target_layers(config: &EncoderConfig) -> Vec<LayerId> {
    let mut out = Vec::new();
    for b in 0..config.num_blocks {
        out.push(LayerId::new(Modality::Text, b, LayerKind::Out));
    }
    for b in 0..config.num_blocks {
        out.push(LayerId::new(Modality::Image, b, LayerKind::Fc2));
    }
    out
}

/// A unit-L2-norm embedding vector. Kept in f64: similarity scores are
/// reported as f32, but losses differentiated against finite differences
/// need full-precision embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity of two unit embeddings, clamped to [-1, 1].
pub fn similarity(a: &Embedding, b: &Embedding) -> f32 {
    let dot: f64 = a.0.iter().zip(&b.0).map(|(&x, &y)| x * y).sum();
    dot.clamp(-1.0, 1.0) as f32
}
