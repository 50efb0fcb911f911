//! Safe/unsafe tuple datasets and calibration sampling.
//!
//! A tuple pairs a safe caption and image with an unsafe variant of each,
//! all sharing one concept. Files are line-delimited JSON, one tuple per
//! line, with token-id arrays standing in for raw text and pixels.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};

use rand::seq::index::sample as index_sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Modality};
use crate::{Error, Result};

/// The default concept taxonomy (20 unsafe categories).
pub const DEFAULT_CONCEPTS: [&str; 20] = [
    "hate",
    "violence",
    "suffering",
    "cruelty",
    "vandalism",
    "harm",
    "suicide",
    "sexual",
    "nudity",
    "harassment",
    "bodily fluids",
    "blood",
    "obscene gestures",
    "illegal activity",
    "drug use",
    "theft",
    "weapons",
    "child abuse",
    "brutality",
    "humiliation",
];

/// One calibration tuple: safe/unsafe text and image token sequences that
/// share a concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibTuple {
    pub id: u64,
    pub concept: String,
    pub t_s: Vec<u32>,
    pub t_u: Vec<u32>,
    pub v_s: Vec<u32>,
    pub v_u: Vec<u32>,
}

impl CalibTuple {
    fn sequences(&self) -> [(&'static str, &[u32]); 4] {
        [
            ("t_s", &self.t_s),
            ("t_u", &self.t_u),
            ("v_s", &self.v_s),
            ("v_u", &self.v_u),
        ]
    }
}

/// An ordered tuple collection plus its concept label list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TupleSet {
    tuples: Vec<CalibTuple>,
    concepts: Vec<String>,
}

/// An (image, text) token-sequence pair, one side of a partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub image: Vec<u32>,
    pub text: Vec<u32>,
}

impl Pair {
    pub fn tokens(&self, modality: Modality) -> &[u32] {
        match modality {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }
}

impl TupleSet {
    /// Builds a set, validating id uniqueness and concept membership.
    pub fn new(tuples: Vec<CalibTuple>, concepts: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &tuples {
            if !seen.insert(t.id) {
                return Err(Error::DuplicateTupleId(t.id));
            }
            if !concepts.contains(&t.concept) {
                return Err(Error::UnknownConcept(t.concept.clone()));
            }
        }
        Ok(Self { tuples, concepts })
    }

    pub fn tuples(&self) -> &[CalibTuple] {
        &self.tuples
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }
}

/// Parses a line-delimited tuple file, validating sequence lengths and token
/// ranges against the encoder config. Order is preserved; concept labels are
/// collected in first-appearance order.
pub fn load_tuples<R: Read>(source: R, config: &EncoderConfig) -> Result<TupleSet> {
    let reader = BufReader::new(source);
    let mut tuples = Vec::new();
    let mut concepts: Vec<String> = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tuple: CalibTuple = serde_json::from_str(&line).map_err(|e| Error::TupleParse {
            line: line_no,
            msg: e.to_string(),
        })?;
        for (field, seq) in tuple.sequences() {
            if seq.len() != config.seq_len {
                return Err(Error::TupleParse {
                    line: line_no,
                    msg: format!(
                        "{field} has {} tokens, expected {}",
                        seq.len(),
                        config.seq_len
                    ),
                });
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= config.vocab_size) {
                return Err(Error::TupleParse {
                    line: line_no,
                    msg: format!(
                        "{field} token {bad} out of range for vocab {}",
                        config.vocab_size
                    ),
                });
            }
        }
        if !ids.insert(tuple.id) {
            return Err(Error::TupleParse {
                line: line_no,
                msg: format!("duplicate tuple id {}", tuple.id),
            });
        }
        if !concepts.contains(&tuple.concept) {
            concepts.push(tuple.concept.clone());
        }
        tuples.push(tuple);
    }
    TupleSet::new(tuples, concepts)
}

/// Writes a tuple set as line-delimited JSON.
pub fn save_tuples<W: Write>(set: &TupleSet, mut dest: W) -> Result<()> {
    for tuple in &set.tuples {
        serde_json::to_writer(&mut dest, tuple)?;
        dest.write_all(b"\n")?;
    }
    Ok(())
}

/// Uniformly samples up to `per_concept` tuples per concept without
/// replacement. Output is ordered by (concept, id) and is deterministic per
/// (input, seed); under-populated concepts are taken whole.
pub fn sample_calibration(tuples: &TupleSet, per_concept: usize, seed: u64) -> TupleSet {
    let mut by_concept: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in tuples.tuples.iter().enumerate() {
        by_concept.entry(&t.concept).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<CalibTuple> = Vec::new();
    for (_, idxs) in by_concept {
        if idxs.len() <= per_concept {
            picked.extend(idxs.iter().map(|&i| tuples.tuples[i].clone()));
        } else {
            let chosen = index_sample(&mut rng, idxs.len(), per_concept);
            picked.extend(chosen.iter().map(|k| tuples.tuples[idxs[k]].clone()));
        }
    }
    picked.sort_by(|a, b| (&a.concept, a.id).cmp(&(&b.concept, b.id)));
    TupleSet {
        tuples: picked,
        concepts: tuples.concepts.clone(),
    }
}

/// Splits into the safe partition {(v_s, t_s)} and unsafe partition
/// {(v_u, t_u)}; the i-th entries come from the i-th tuple.
pub fn split_partitions(calib: &TupleSet) -> (Vec<Pair>, Vec<Pair>) {
    let safe = calib
        .tuples
        .iter()
        .map(|t| Pair {
            image: t.v_s.clone(),
            text: t.t_s.clone(),
        })
        .collect();
    let unsafe_ = calib
        .tuples
        .iter()
        .map(|t| Pair {
            image: t.v_u.clone(),
            text: t.t_u.clone(),
        })
        .collect();
    (safe, unsafe_)
}

/// Class-labeled safe sequences plus per-class prototype text, for zero-shot
/// classification.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeSet {
    pub classes: Vec<String>,
    /// One prototype text sequence per class, index-aligned with `classes`.
    pub prototypes: Vec<Vec<u32>>,
    /// (image sequence, class index)
    pub samples: Vec<(Vec<u32>, usize)>,
}

#[derive(Serialize, Deserialize)]
struct KnowledgeRecord {
    id: u64,
    class: String,
    v: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct PrototypeRecord {
    class: String,
    t: Vec<u32>,
}

impl KnowledgeSet {
    /// Loads samples and prototypes from two JSONL readers. Prototype line
    /// order defines the class indices.
    pub fn load<R1: Read, R2: Read>(
        samples: R1,
        prototypes: R2,
        config: &EncoderConfig,
    ) -> Result<Self> {
        let check = |seq: &[u32], line: usize| -> Result<()> {
            if seq.len() != config.seq_len {
                return Err(Error::TupleParse {
                    line,
                    msg: format!("{} tokens, expected {}", seq.len(), config.seq_len),
                });
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= config.vocab_size) {
                return Err(Error::TupleParse {
                    line,
                    msg: format!("token {bad} out of range"),
                });
            }
            Ok(())
        };

        let mut classes = Vec::new();
        let mut protos = Vec::new();
        for (idx, line) in BufReader::new(prototypes).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PrototypeRecord =
                serde_json::from_str(&line).map_err(|e| Error::TupleParse {
                    line: idx + 1,
                    msg: e.to_string(),
                })?;
            check(&rec.t, idx + 1)?;
            if classes.contains(&rec.class) {
                return Err(Error::TupleParse {
                    line: idx + 1,
                    msg: format!("duplicate class {:?}", rec.class),
                });
            }
            classes.push(rec.class);
            protos.push(rec.t);
        }

        let mut samples_out = Vec::new();
        for (idx, line) in BufReader::new(samples).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: KnowledgeRecord =
                serde_json::from_str(&line).map_err(|e| Error::TupleParse {
                    line: idx + 1,
                    msg: e.to_string(),
                })?;
            check(&rec.v, idx + 1)?;
            let class_idx = classes
                .iter()
                .position(|c| c == &rec.class)
                .ok_or_else(|| Error::UnknownConcept(rec.class.clone()))?;
            samples_out.push((rec.v, class_idx));
        }

        Ok(KnowledgeSet {
            classes,
            prototypes: protos,
            samples: samples_out,
        })
    }

    pub fn save<W1: Write, W2: Write>(&self, mut samples: W1, mut prototypes: W2) -> Result<()> {
        for (i, (class, t)) in self.classes.iter().zip(&self.prototypes).enumerate() {
            debug_assert!(i < self.classes.len());
            serde_json::to_writer(
                &mut prototypes,
                &PrototypeRecord {
                    class: class.clone(),
                    t: t.clone(),
                },
            )?;
            prototypes.write_all(b"\n")?;
        }
        for (id, (v, class_idx)) in self.samples.iter().enumerate() {
            serde_json::to_writer(
                &mut samples,
                &KnowledgeRecord {
                    id: id as u64,
                    class: self.classes[*class_idx].clone(),
                    v: v.clone(),
                },
            )?;
            samples.write_all(b"\n")?;
        }
        Ok(())
    }
}
