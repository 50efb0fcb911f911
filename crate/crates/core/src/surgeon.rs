//! Weight selection and the scaling edit.
//!
//! Adaptive selection takes, per layer, the smallest set of top-scoring
//! entries whose scores cover at least `tau` of the layer's total score
//! mass. Ties break deterministically: score descending, then coordinate
//! ascending. The edit replaces selected weights by `alpha * w` and leaves
//! every other bit untouched.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderWeights, LayerId, ModelPair};
use crate::flowscore::ScoreTable;
use crate::mat::Mat;
use crate::tensorio::TensorArchive;
use crate::{Error, Result};

/// Chosen weight coordinates per layer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SelectionMask {
    layers: BTreeMap<LayerId, BTreeSet<(usize, usize)>>,
}

impl SelectionMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: LayerId, coords: BTreeSet<(usize, usize)>) {
        self.layers.insert(layer, coords);
    }

    pub fn get(&self, layer: LayerId) -> Option<&BTreeSet<(usize, usize)>> {
        self.layers.get(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.layers.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerId, &BTreeSet<(usize, usize)>)> {
        self.layers.iter()
    }

    /// Total selected coordinates across layers.
    pub fn total(&self) -> usize {
        self.layers.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.values().all(BTreeSet::is_empty)
    }

    /// Per-layer subset relation (used by the tau-monotonicity property).
    pub fn is_subset_of(&self, other: &SelectionMask) -> bool {
        self.layers.iter().all(|(layer, coords)| {
            other
                .layers
                .get(layer)
                .map(|o| coords.is_subset(o))
                .unwrap_or_else(|| coords.is_empty())
        })
    }

    /// Persists as 0/1 f32 matrices named `mask.<layer>`.
    pub fn to_archive(&self, shapes: &BTreeMap<LayerId, (usize, usize)>) -> Result<TensorArchive> {
        let mut archive = TensorArchive::new();
        for (layer, coords) in &self.layers {
            let &(rows, cols) = shapes.get(layer).ok_or_else(|| {
                Error::LayerMismatch(format!("no shape provided for {layer}"))
            })?;
            let mut m = Mat::zeros(rows, cols);
            for &(i, j) in coords {
                if i >= rows || j >= cols {
                    return Err(Error::CoordOutOfRange {
                        layer: layer.to_string(),
                        i,
                        j,
                        rows,
                        cols,
                    });
                }
                m.set(i, j, 1.0);
            }
            archive.insert_mat(&format!("mask.{layer}"), &m)?;
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let mut out = SelectionMask::new();
        for (name, tensor) in archive.iter() {
            let Some(rest) = name.strip_prefix("mask.") else {
                continue;
            };
            let layer: LayerId = rest.parse()?;
            let m = tensor.to_mat()?;
            let mut coords = BTreeSet::new();
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    let v = m.get(i, j);
                    if v == 1.0 {
                        coords.insert((i, j));
                    } else if v != 0.0 {
                        return Err(Error::BadMaskValue {
                            name: name.to_string(),
                            value: v,
                        });
                    }
                }
            }
            out.insert(layer, coords);
        }
        if out.layers.is_empty() {
            return Err(Error::MissingTensor("mask.*".to_string()));
        }
        Ok(out)
    }
}

/// How a mask was selected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Tau(f32),
    Sparsity(f32),
}

/// A selection plus the scaling factor and provenance of its scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EditPlan {
    pub mask: SelectionMask,
    pub alpha: f32,
    pub selector: Selector,
    /// Path or label of the score archive the mask came from.
    pub provenance: String,
}

impl EditPlan {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::BadConfig(format!("alpha must be finite, got {}", self.alpha)));
        }
        Ok(())
    }

    /// The JSON sidecar stored next to mask archives.
    pub fn metadata_json(&self) -> serde_json::Value {
        // f32 -> f64 through the shortest decimal repr, so 0.02f32 prints as
        // 0.02 rather than its widened binary value.
        let jnum = |v: f32| -> serde_json::Value {
            v.to_string().parse::<f64>().expect("finite float").into()
        };
        let mut obj = serde_json::Map::new();
        match self.selector {
            Selector::Tau(t) => obj.insert("tau".to_string(), jnum(t)),
            Selector::Sparsity(s) => obj.insert("sparsity".to_string(), jnum(s)),
        };
        obj.insert("alpha".to_string(), jnum(self.alpha));
        obj.insert("scores".to_string(), self.provenance.clone().into());
        serde_json::Value::Object(obj)
    }
}

/// Entries of one layer sorted by (score descending, coordinate ascending).
fn sorted_entries(table: &Mat) -> Vec<(f32, usize, usize)> {
    let mut entries: Vec<(f32, usize, usize)> = Vec::with_capacity(table.len());
    for i in 0..table.rows() {
        for j in 0..table.cols() {
            entries.push((table.get(i, j), i, j));
        }
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| (a.1, a.2).cmp(&(b.1, b.2))));
    entries
}

/// Smallest top-scoring subset per layer whose scores sum to at least
/// `tau` times the layer total. A layer with zero total selects nothing.
pub fn adaptive_select(scores: &ScoreTable, tau: f32) -> Result<SelectionMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::BadTau(tau));
    }
    let mut mask = SelectionMask::new();
    for (&layer, table) in scores.iter() {
        let entries = sorted_entries(table);
        // Total and prefix sums accumulate in the same sorted order so the
        // threshold comparison is reproducible.
        let total: f64 = entries.iter().map(|e| e.0 as f64).sum();
        let threshold = tau as f64 * total;
        let mut coords = BTreeSet::new();
        if total > 0.0 {
            let mut cum = 0.0;
            for &(score, i, j) in &entries {
                if cum >= threshold {
                    break;
                }
                cum += score as f64;
                coords.insert((i, j));
            }
        }
        mask.insert(layer, coords);
    }
    Ok(mask)
}

/// Fixed-sparsity selection: the ceil(sparsity * n) highest-scoring entries
/// per layer, same tie-break as [`adaptive_select`].
pub fn topk_select(scores: &ScoreTable, sparsity: f32) -> Result<SelectionMask> {
    if !(sparsity > 0.0 && sparsity < 1.0) {
        return Err(Error::BadSparsity(sparsity));
    }
    let mut mask = SelectionMask::new();
    for (&layer, table) in scores.iter() {
        let k = (sparsity as f64 * table.len() as f64).ceil() as usize;
        let entries = sorted_entries(table);
        let coords: BTreeSet<(usize, usize)> =
            entries.iter().take(k).map(|&(_, i, j)| (i, j)).collect();
        mask.insert(layer, coords);
    }
    Ok(mask)
}

/// Returns new weights with `w[i,j] = alpha * w[i,j]` exactly on the masked
/// coordinates of this encoder's layers and bit-identical values elsewhere.
pub fn apply_edit(weights: &EncoderWeights, plan: &EditPlan) -> Result<EncoderWeights> {
    plan.validate()?;
    let mut edited = weights.clone();
    for (&layer, coords) in plan.mask.iter() {
        if layer.modality != weights.modality {
            continue;
        }
        let w = edited.weight_mut(layer)?;
        for &(i, j) in coords {
            if i >= w.rows() || j >= w.cols() {
                return Err(Error::CoordOutOfRange {
                    layer: layer.to_string(),
                    i,
                    j,
                    rows: w.rows(),
                    cols: w.cols(),
                });
            }
            w.set(i, j, plan.alpha * w.get(i, j));
        }
    }
    Ok(edited)
}

/// Applies one plan to both encoders.
pub fn apply_edit_pair(model: &ModelPair, plan: &EditPlan) -> Result<ModelPair> {
    Ok(ModelPair {
        text: apply_edit(&model.text, plan)?,
        image: apply_edit(&model.image, plan)?,
    })
}

/// Per-layer differences between two weight sets.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiff {
    pub count: usize,
    pub max_abs: f32,
    /// First differing coordinates, capped at [`DIFF_COORD_CAP`].
    pub coords: Vec<(usize, usize)>,
    /// How many differing coordinates did not fit in `coords`.
    pub overflow: usize,
}

pub const DIFF_COORD_CAP: usize = 64;

/// Compares the linear-layer weight matrices of two same-shape encoders.
pub fn diff_weights(a: &EncoderWeights, b: &EncoderWeights) -> Result<BTreeMap<LayerId, LayerDiff>> {
    if a.config != b.config || a.modality != b.modality {
        return Err(Error::ShapeMismatch(
            "weight sets differ in config or modality".to_string(),
        ));
    }
    let mut out = BTreeMap::new();
    for id in a.layer_ids() {
        let wa = a.weight(id)?;
        let wb = b.weight(id)?;
        let mut diff = LayerDiff {
            count: 0,
            max_abs: 0.0,
            coords: Vec::new(),
            overflow: 0,
        };
        for i in 0..wa.rows() {
            for j in 0..wa.cols() {
                let (x, y) = (wa.get(i, j), wb.get(i, j));
                if x != y {
                    diff.count += 1;
                    diff.max_abs = diff.max_abs.max((x - y).abs());
                    if diff.coords.len() < DIFF_COORD_CAP {
                        diff.coords.push((i, j));
                    } else {
                        diff.overflow += 1;
                    }
                }
            }
        }
        out.insert(id, diff);
    }
    Ok(out)
}
