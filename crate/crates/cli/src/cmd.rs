//! Subcommand bodies. Every output goes through an atomic write; worker
//! counts never change emitted bytes.

use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::Args;
use serde_json::json;

use uwm_core::calibration::{sample_calibration, save_tuples};
use uwm_core::encoder::{default_target_layers, LayerId, Modality};
use uwm_core::flowscore::{flow_scores, Prior, ScoreTable};
use uwm_core::gradbase::{gradient_scores, LossKind, LossSpec, DEFAULT_TEMPERATURE};
use uwm_core::safeground::{build_report, evaluate_model, weight_shapes};
use uwm_core::surgeon::{
    adaptive_select, apply_edit_pair, topk_select, EditPlan, SelectionMask, Selector,
};
use uwm_core::synthbench::{eval_localization, gen_world, GroundTruthMask, WorldConfig};

use crate::io::{
    load_knowledge_files, load_model, load_tuple_file, read_archive_file, save_model,
    write_archive_atomic, write_atomic, WorldFiles, WorldManifest, IMAGE_WEIGHTS, TEXT_WEIGHTS,
};
use crate::{seed_of, CliError, CommonOpts};

/// The layer set named by `--layers`, or the default manipulation targets.
/// Entries are full ids (`text.block0.out`) or block-less shorthands
/// (`text.out`) that expand across all blocks.
fn parse_layers(
    spec: &Option<String>,
    config: &uwm_core::encoder::EncoderConfig,
    modality: &ModalityFilter,
) -> Result<Vec<LayerId>, CliError> {
    let mut layers = Vec::new();
    match spec {
        None => layers = default_target_layers(config),
        Some(s) => {
            for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                if let Ok(id) = part.parse::<LayerId>() {
                    layers.push(id);
                    continue;
                }
                // Shorthand: <modality>.<kind> expands over blocks.
                let mut pieces = part.split('.');
                let (Some(m), Some(k), None) = (pieces.next(), pieces.next(), pieces.next())
                else {
                    return Err(CliError::Usage(format!("layers: cannot parse {part:?}")));
                };
                let modality: Modality = m
                    .parse()
                    .map_err(|_| CliError::Usage(format!("layers: cannot parse {part:?}")))?;
                let kind = k
                    .parse()
                    .map_err(|_| CliError::Usage(format!("layers: cannot parse {part:?}")))?;
                for block in 0..config.num_blocks {
                    layers.push(LayerId::new(modality, block, kind));
                }
            }
        }
    }
    for layer in &layers {
        if layer.block >= config.num_blocks {
            return Err(CliError::Usage(format!(
                "layers: {layer} exceeds {} blocks",
                config.num_blocks
            )));
        }
    }
    let filtered: Vec<LayerId> = layers
        .into_iter()
        .filter(|l| modality.keeps(l.modality))
        .collect();
    if filtered.is_empty() {
        return Err(CliError::Usage(
            "layers: no layers left after applying the modality filter".to_string(),
        ));
    }
    Ok(filtered)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModalityFilter {
    Text,
    Image,
    Both,
}

impl ModalityFilter {
    fn keeps(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (ModalityFilter::Both, _)
                | (ModalityFilter::Text, Modality::Text)
                | (ModalityFilter::Image, Modality::Image)
        )
    }
}

// ---------------------------------------------------------------------------
// gen-synth
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// Output directory for the world files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    concepts: usize,
    /// Training (calibration-source) tuples per concept.
    #[arg(long, default_value_t = 20)]
    train: usize,
    /// Held-out test tuples per concept.
    #[arg(long, default_value_t = 25)]
    test: usize,
    /// Knowledge samples per class.
    #[arg(long, default_value_t = 10)]
    knowledge: usize,
    /// Fraction of the vocab forming the unsafe band (top of the range).
    #[arg(long, default_value_t = 0.25)]
    unsafe_frac: f64,
    #[arg(long, default_value_t = 0.02)]
    plant_density: f64,
    #[arg(long, default_value_t = 5.0)]
    plant_scale: f64,
    #[command(flatten)]
    common: CommonOpts,
}

pub fn gen_synth(args: GenSynthArgs) -> Result<(), CliError> {
    if !(args.unsafe_frac > 0.0 && args.unsafe_frac < 1.0) {
        return Err(CliError::Usage(format!(
            "unsafe-frac must be in (0, 1), got {}",
            args.unsafe_frac
        )));
    }
    let mut config = WorldConfig {
        n_concepts: args.concepts,
        train_per_concept: args.train,
        test_per_concept: args.test,
        knowledge_per_class: args.knowledge,
        plant_density: args.plant_density,
        plant_scale: args.plant_scale,
        seed: seed_of(&args.common),
        ..WorldConfig::default()
    };
    let vocab = config.encoder.vocab_size;
    let start = (vocab as f64 * (1.0 - args.unsafe_frac)).round() as u32;
    config.unsafe_band_text = (start.clamp(1, vocab - 1), vocab);
    config.unsafe_band_image = config.unsafe_band_text;

    let world = gen_world(&config).map_err(CliError::from_core)?;

    let dir = &args.out;
    std::fs::create_dir_all(dir)?;
    save_model(dir, &world.model)?;
    let shapes = weight_shapes(&world.model);
    write_archive_atomic(
        &dir.join("truth.uwt"),
        &world.truth.0.to_archive(&shapes).map_err(CliError::from_core)?,
    )?;
    let mut buf = Vec::new();
    save_tuples(&world.train, &mut buf).map_err(CliError::from_core)?;
    write_atomic(&dir.join("train.jsonl"), &buf)?;
    let mut buf = Vec::new();
    save_tuples(&world.test, &mut buf).map_err(CliError::from_core)?;
    write_atomic(&dir.join("test.jsonl"), &buf)?;
    let mut samples = Vec::new();
    let mut protos = Vec::new();
    world
        .knowledge
        .save(&mut samples, &mut protos)
        .map_err(CliError::from_core)?;
    write_atomic(&dir.join("knowledge.jsonl"), &samples)?;
    write_atomic(&dir.join("prototypes.jsonl"), &protos)?;

    let manifest = WorldManifest {
        seed: config.seed,
        config,
        concepts: world.train.concepts().to_vec(),
        files: WorldFiles {
            text_weights: TEXT_WEIGHTS.into(),
            image_weights: IMAGE_WEIGHTS.into(),
            truth_mask: "truth.uwt".into(),
            train: "train.jsonl".into(),
            test: "test.jsonl".into(),
            knowledge: "knowledge.jsonl".into(),
            prototypes: "prototypes.jsonl".into(),
        },
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_atomic(&dir.join("world.json"), &bytes)?;
    println!("world written to {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Model directory (model.json + text.uwt + image.uwt).
    #[arg(long)]
    model: PathBuf,
    /// Calibration tuple file (JSONL).
    #[arg(long)]
    calib: PathBuf,
    /// Output score archive (.uwt).
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated layer ids or `<modality>.<kind>` shorthands.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, value_enum, default_value_t = ModalityFilter::Both)]
    modality: ModalityFilter,
    /// Magnitude prior: none or text-magnitude.
    #[arg(long, default_value = "text-magnitude")]
    prior: String,
    /// Calibration tuples sampled per concept.
    #[arg(long, default_value_t = 400)]
    per_concept: usize,
    #[command(flatten)]
    common: CommonOpts,
}

pub fn score(args: ScoreArgs) -> Result<(), CliError> {
    let prior: Prior = args
        .prior
        .parse()
        .map_err(|_| CliError::Usage(format!("prior: expected none|text-magnitude, got {:?}", args.prior)))?;
    if args.per_concept == 0 {
        return Err(CliError::Usage("per-concept must be >= 1".to_string()));
    }
    let model = load_model(&args.model)?;
    let tuples = load_tuple_file(&args.calib, &model.text.config)?;
    let calib = sample_calibration(&tuples, args.per_concept, seed_of(&args.common));
    let layers = parse_layers(&args.layers, &model.text.config, &args.modality)?;
    let scores = flow_scores(&model, &calib, &layers, prior, args.common.workers)
        .map_err(CliError::from_core)?;
    write_archive_atomic(&args.out, &scores.to_archive("score").map_err(CliError::from_core)?)?;
    println!("scores written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// manipulate
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct ManipulateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Score archive produced by `score`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = 0.02)]
    tau: f32,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    alpha: f32,
    /// Output directory for the edited model.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the selection mask archive.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Where to write the edit-plan JSON sidecar.
    #[arg(long)]
    plan_out: Option<PathBuf>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, value_enum, default_value_t = ModalityFilter::Both)]
    modality: ModalityFilter,
}

pub fn manipulate(args: ManipulateArgs) -> Result<(), CliError> {
    if !(args.tau > 0.0 && args.tau < 1.0) {
        return Err(CliError::Usage(format!("tau must be in (0, 1), got {}", args.tau)));
    }
    if !args.alpha.is_finite() {
        return Err(CliError::Usage(format!("alpha must be finite, got {}", args.alpha)));
    }
    let model = load_model(&args.model)?;
    let archive = read_archive_file(&args.scores)?;
    let scores = ScoreTable::from_archive(&archive, "score").map_err(CliError::from_core)?;
    let layers = parse_layers(&args.layers, &model.text.config, &args.modality)?;
    let keep: BTreeSet<LayerId> = layers.into_iter().collect();
    let mut filtered = ScoreTable::new();
    for (&layer, table) in scores.iter() {
        if keep.contains(&layer) {
            filtered.insert(layer, table.clone()).map_err(CliError::from_core)?;
        }
    }
    if filtered.is_empty() {
        return Err(CliError::Data(
            "score archive has no tables for the requested layers".to_string(),
        ));
    }

    let mask = adaptive_select(&filtered, args.tau).map_err(CliError::from_core)?;
    let plan = EditPlan {
        mask,
        alpha: args.alpha,
        selector: Selector::Tau(args.tau),
        provenance: args.scores.display().to_string(),
    };
    let edited = apply_edit_pair(&model, &plan).map_err(CliError::from_core)?;
    save_model(&args.out, &edited)?;

    if let Some(mask_out) = &args.mask_out {
        let shapes = weight_shapes(&model);
        write_archive_atomic(
            mask_out,
            &plan.mask.to_archive(&shapes).map_err(CliError::from_core)?,
        )?;
    }
    if let Some(plan_out) = &args.plan_out {
        let mut bytes = serde_json::to_vec_pretty(&plan.metadata_json())?;
        bytes.push(b'\n');
        write_atomic(plan_out, &bytes)?;
    }
    println!(
        "edited model written to {} ({} weights selected)",
        args.out.display(),
        plan.mask.total()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// baseline
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// g-unsafe or g-safeclip.
    #[arg(long)]
    method: String,
    /// Layer-wise fraction of weights to prune.
    #[arg(long)]
    sparsity: f32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scores_out: Option<PathBuf>,
    #[arg(long)]
    mask_out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f32,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, value_enum, default_value_t = ModalityFilter::Both)]
    modality: ModalityFilter,
    /// Calibration tuples sampled per concept.
    #[arg(long, default_value_t = 400)]
    per_concept: usize,
    #[command(flatten)]
    common: CommonOpts,
}

pub fn baseline(args: BaselineArgs) -> Result<(), CliError> {
    let kind = match args.method.as_str() {
        "g-unsafe" => LossKind::GUnsafe,
        "g-safeclip" => LossKind::GSafeclip,
        other => {
            return Err(CliError::Usage(format!(
                "method: expected g-unsafe|g-safeclip, got {other:?}"
            )))
        }
    };
    if !(args.sparsity > 0.0 && args.sparsity < 1.0) {
        return Err(CliError::Usage(format!(
            "sparsity must be in (0, 1), got {}",
            args.sparsity
        )));
    }
    if args.batch_size == 0 {
        return Err(CliError::Usage("batch-size must be >= 1".to_string()));
    }
    let model = load_model(&args.model)?;
    let tuples = load_tuple_file(&args.calib, &model.text.config)?;
    let calib = sample_calibration(&tuples, args.per_concept, seed_of(&args.common));
    let layers = parse_layers(&args.layers, &model.text.config, &args.modality)?;

    // Frozen snapshots are taken at scoring start; gradients flow only
    // through the live encoder of each modality.
    let frozen = model.clone();
    let mut all_scores = ScoreTable::new();
    for modality in [Modality::Text, Modality::Image] {
        let subset: Vec<LayerId> = layers
            .iter()
            .copied()
            .filter(|l| l.modality == modality)
            .collect();
        if subset.is_empty() {
            continue;
        }
        let spec = LossSpec {
            kind,
            modality,
            temperature: args.temperature,
        };
        let scores = gradient_scores(
            model.encoder(modality),
            &frozen,
            &calib,
            &spec,
            &subset,
            args.batch_size,
        )
        .map_err(CliError::from_core)?;
        for (&layer, table) in scores.iter() {
            all_scores.insert(layer, table.clone()).map_err(CliError::from_core)?;
        }
    }

    let mask = topk_select(&all_scores, args.sparsity).map_err(CliError::from_core)?;
    let plan = EditPlan {
        mask,
        alpha: 0.0,
        selector: Selector::Sparsity(args.sparsity),
        provenance: args.calib.display().to_string(),
    };
    let edited = apply_edit_pair(&model, &plan).map_err(CliError::from_core)?;
    save_model(&args.out, &edited)?;
    if let Some(path) = &args.scores_out {
        write_archive_atomic(
            path,
            &all_scores.to_archive("gradscore").map_err(CliError::from_core)?,
        )?;
    }
    if let Some(path) = &args.mask_out {
        let shapes = weight_shapes(&model);
        write_archive_atomic(path, &plan.mask.to_archive(&shapes).map_err(CliError::from_core)?)?;
    }
    println!(
        "pruned model written to {} ({} weights zeroed)",
        args.out.display(),
        plan.mask.total()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Test tuple file (JSONL).
    #[arg(long)]
    tuples: PathBuf,
    /// Knowledge sample file (JSONL).
    #[arg(long)]
    knowledge: PathBuf,
    /// Class prototype file (JSONL).
    #[arg(long)]
    prototypes: PathBuf,
    /// Output report path (JSON).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonOpts,
}

pub fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let tuples = load_tuple_file(&args.tuples, &model.text.config)?;
    let knowledge = load_knowledge_files(&args.knowledge, &args.prototypes, &model.text.config)?;
    let outputs = evaluate_model(&model, &tuples, &knowledge, args.common.workers)
        .map_err(CliError::from_core)?;
    // Inputs only: the worker count is an execution detail and must never
    // change the report bytes.
    let config_echo = json!({
        "model": args.model.display().to_string(),
        "tuples": args.tuples.display().to_string(),
        "knowledge": args.knowledge.display().to_string(),
        "prototypes": args.prototypes.display().to_string(),
    });
    let report = build_report(outputs, config_echo).map_err(CliError::from_core)?;
    write_atomic(&args.out, &report.to_json_bytes().map_err(CliError::from_core)?)?;
    println!("report written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    tuples: PathBuf,
    #[arg(long)]
    knowledge: PathBuf,
    #[arg(long)]
    prototypes: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated tau values to sweep (alpha fixed).
    #[arg(long, allow_hyphen_values = true)]
    tau_grid: Option<String>,
    /// Comma-separated alpha values to sweep (tau fixed).
    #[arg(long, allow_hyphen_values = true)]
    alpha_grid: Option<String>,
    /// Fixed tau when sweeping alpha.
    #[arg(long, default_value_t = 0.02)]
    tau: f32,
    /// Fixed alpha when sweeping tau.
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    alpha: f32,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, value_enum, default_value_t = ModalityFilter::Both)]
    modality: ModalityFilter,
    #[command(flatten)]
    common: CommonOpts,
}

fn parse_grid(s: &str, what: &str) -> Result<Vec<f32>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<f32>()
                .map_err(|_| CliError::Usage(format!("{what}: cannot parse {p:?}")))
        })
        .collect()
}

pub fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let (grid, sweeping_tau) = match (&args.tau_grid, &args.alpha_grid) {
        (Some(g), None) => (parse_grid(g, "tau-grid")?, true),
        (None, Some(g)) => (parse_grid(g, "alpha-grid")?, false),
        _ => {
            return Err(CliError::Usage(
                "exactly one of --tau-grid and --alpha-grid is required".to_string(),
            ))
        }
    };
    if grid.is_empty() {
        return Err(CliError::Usage("sweep grid is empty".to_string()));
    }
    let model = load_model(&args.model)?;
    let archive = read_archive_file(&args.scores)?;
    let scores = ScoreTable::from_archive(&archive, "score").map_err(CliError::from_core)?;
    let layers = parse_layers(&args.layers, &model.text.config, &args.modality)?;
    let keep: BTreeSet<LayerId> = layers.into_iter().collect();
    let mut filtered = ScoreTable::new();
    for (&layer, table) in scores.iter() {
        if keep.contains(&layer) {
            filtered.insert(layer, table.clone()).map_err(CliError::from_core)?;
        }
    }
    let tuples = load_tuple_file(&args.tuples, &model.text.config)?;
    let knowledge = load_knowledge_files(&args.knowledge, &args.prototypes, &model.text.config)?;

    let mut csv = String::from("param,value,vs_ts,txt_s,img_s,gs\n");
    for &value in &grid {
        let (tau, alpha) = if sweeping_tau {
            (value, args.alpha)
        } else {
            (args.tau, value)
        };
        if !(tau > 0.0 && tau < 1.0) {
            return Err(CliError::Usage(format!("tau must be in (0, 1), got {tau}")));
        }
        let mask = adaptive_select(&filtered, tau).map_err(CliError::from_core)?;
        let plan = EditPlan {
            mask,
            alpha,
            selector: Selector::Tau(tau),
            provenance: args.scores.display().to_string(),
        };
        let edited = apply_edit_pair(&model, &plan).map_err(CliError::from_core)?;
        let m = evaluate_model(&edited, &tuples, &knowledge, args.common.workers)
            .map_err(CliError::from_core)?;
        let param = if sweeping_tau { "tau" } else { "alpha" };
        csv.push_str(&format!(
            "{param},{value},{:.4},{:.4},{:.4},{:.4}\n",
            100.0 * m.vsts,
            100.0 * m.txts,
            100.0 * m.imgs,
            100.0 * m.gs
        ));
    }
    write_atomic(&args.out, csv.as_bytes())?;
    println!("sweep written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// localize-eval
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct LocalizeEvalArgs {
    /// Selection mask archive (mask.* tensors).
    #[arg(long)]
    selected: PathBuf,
    /// Ground-truth mask archive from gen-synth.
    #[arg(long)]
    truth: PathBuf,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
}

pub fn localize_eval(args: LocalizeEvalArgs) -> Result<(), CliError> {
    let selected =
        SelectionMask::from_archive(&read_archive_file(&args.selected)?).map_err(CliError::from_core)?;
    let truth =
        SelectionMask::from_archive(&read_archive_file(&args.truth)?).map_err(CliError::from_core)?;
    let loc = eval_localization(&selected, &GroundTruthMask(truth)).map_err(CliError::from_core)?;
    let mut bytes = serde_json::to_vec_pretty(&loc)?;
    bytes.push(b'\n');
    write_atomic(&args.out, &bytes)?;
    println!("localization written to {}", args.out.display());
    Ok(())
}
