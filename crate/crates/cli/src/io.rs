//! Filesystem plumbing: atomic writes, model directories, world manifests.

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use uwm_core::calibration::{load_tuples, KnowledgeSet, TupleSet};
use uwm_core::encoder::{EncoderConfig, EncoderWeights, Modality, ModelPair};
use uwm_core::tensorio::{read_archive, write_archive_bytes, TensorArchive};

use crate::CliError;

/// Writes through a temp file in the target directory plus rename, so an
/// interrupted run never leaves a partial file at the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".uwm-tmp")
        .tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| CliError::Io(format!("persisting {}: {}", path.display(), e.error)))?;
    Ok(())
}

pub fn write_archive_atomic(path: &Path, archive: &TensorArchive) -> Result<(), CliError> {
    let bytes = write_archive_bytes(archive).map_err(CliError::from_core)?;
    write_atomic(path, &bytes)
}

pub fn read_archive_file(path: &Path) -> Result<TensorArchive, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Io(format!("opening {}: {e}", path.display())))?;
    read_archive(BufReader::new(file)).map_err(CliError::from_core)
}

/// Sidecar describing a model directory: the encoder architecture shared by
/// `text.uwt` and `image.uwt`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelManifest {
    pub encoder: EncoderConfig,
}

pub const MODEL_MANIFEST: &str = "model.json";
pub const TEXT_WEIGHTS: &str = "text.uwt";
pub const IMAGE_WEIGHTS: &str = "image.uwt";

pub fn save_model(dir: &Path, model: &ModelPair) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let manifest = ModelManifest {
        encoder: model.text.config,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_atomic(&dir.join(MODEL_MANIFEST), &bytes)?;
    write_archive_atomic(
        &dir.join(TEXT_WEIGHTS),
        &model.text.to_archive().map_err(CliError::from_core)?,
    )?;
    write_archive_atomic(
        &dir.join(IMAGE_WEIGHTS),
        &model.image.to_archive().map_err(CliError::from_core)?,
    )?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<ModelPair, CliError> {
    let manifest_path = dir.join(MODEL_MANIFEST);
    let file = File::open(&manifest_path)
        .map_err(|e| CliError::Io(format!("opening {}: {e}", manifest_path.display())))?;
    let manifest: ModelManifest = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::Data(format!("{}: {e}", manifest_path.display())))?;
    let text = EncoderWeights::from_archive(
        &read_archive_file(&dir.join(TEXT_WEIGHTS))?,
        &manifest.encoder,
        Modality::Text,
    )
    .map_err(CliError::from_core)?;
    let image = EncoderWeights::from_archive(
        &read_archive_file(&dir.join(IMAGE_WEIGHTS))?,
        &manifest.encoder,
        Modality::Image,
    )
    .map_err(CliError::from_core)?;
    Ok(ModelPair { text, image })
}

pub fn load_tuple_file(path: &Path, config: &EncoderConfig) -> Result<TupleSet, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Io(format!("opening {}: {e}", path.display())))?;
    load_tuples(BufReader::new(file), config).map_err(CliError::from_core)
}

pub fn load_knowledge_files(
    samples: &Path,
    prototypes: &Path,
    config: &EncoderConfig,
) -> Result<KnowledgeSet, CliError> {
    let s = File::open(samples)
        .map_err(|e| CliError::Io(format!("opening {}: {e}", samples.display())))?;
    let p = File::open(prototypes)
        .map_err(|e| CliError::Io(format!("opening {}: {e}", prototypes.display())))?;
    KnowledgeSet::load(BufReader::new(s), BufReader::new(p), config).map_err(CliError::from_core)
}

/// The manifest tying a generated world's files together.
#[derive(Debug, Serialize, Deserialize)]
pub struct WorldManifest {
    pub seed: u64,
    pub config: uwm_core::synthbench::WorldConfig,
    pub concepts: Vec<String>,
    pub files: WorldFiles,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WorldFiles {
    pub text_weights: PathBuf,
    pub image_weights: PathBuf,
    pub truth_mask: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub knowledge: PathBuf,
    pub prototypes: PathBuf,
}
