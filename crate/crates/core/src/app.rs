//! Stage functions shared by the command-line tool, the C interface and
//! `run_pipeline`. Every stage reads and writes a run directory:
//!
//! ```text
//! config.toml            configuration snapshot
//! vocab.txt              vocabulary over X_L and X_U
//! data/manifest.json     class set and segment files
//! data/*.jsonl           labeled, unlabeled, dev, test, augmented_*, pseudo_labeled
//! checkpoints/*.params   encoder, teachers, student per iteration
//! metrics/*.jsonl        per-epoch and per-iteration metrics
//! predictions/*.jsonl    predicted label distributions
//! reports/*.json         per-strategy reports
//! report.json            final report
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::augment::{build_augmented_labeled, build_augmented_unlabeled};
use crate::checkpoint::{load_encoder, load_model, save_encoder};
use crate::config::{DataSource, PipelineConfig};
use crate::corpus::{
    generate_synthetic_corpus, load_jsonl_dataset, read_manifest, write_jsonl, write_manifest, ClassSet, DatasetBundle,
    DialogueInstance, Manifest, SoftLabel,
};
use crate::encoder::{pretrain_mlm, EncoderParams, MlmReport};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvaluationReport, MseDivisor};
use crate::pipeline::{Context, RunDir, RunSink, StrategyKind, StrategyOutcome};
use crate::seed::{rng_for, tags};

pub const SEGMENTS: [&str; 7] = [
    "labeled",
    "unlabeled",
    "dev",
    "test",
    "augmented_unlabeled",
    "augmented_labeled",
    "pseudo_labeled",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    Gold,
    Masked,
}

impl std::str::FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(TeacherKind::Gold),
            "masked" => Ok(TeacherKind::Masked),
            other => Err(Error::Config(format!(
                "unknown teacher kind `{other}`; expected gold or masked"
            ))),
        }
    }
}

/// Runs `f` on a pool of `threads` workers, or on the global pool for 0.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn segment_of<'a>(bundle: &'a mut DatasetBundle, name: &str) -> &'a mut Vec<DialogueInstance> {
    match name {
        "labeled" => &mut bundle.labeled,
        "unlabeled" => &mut bundle.unlabeled,
        "dev" => &mut bundle.dev,
        "test" => &mut bundle.test,
        "augmented_unlabeled" => &mut bundle.augmented_unlabeled,
        "augmented_labeled" => &mut bundle.augmented_labeled,
        "pseudo_labeled" => &mut bundle.pseudo_labeled,
        other => unreachable!("unknown segment {other}"),
    }
}

/// Loads every segment listed in the run directory's manifest.
pub fn load_data(dir: &RunDir) -> Result<DatasetBundle> {
    let manifest_path = dir.manifest_path();
    if !manifest_path.exists() {
        return Err(Error::Empty(format!(
            "no dataset in {}; run `gen-data` first",
            dir.root().display()
        )));
    }
    let manifest = read_manifest(&manifest_path)?;
    let classes = manifest.class_set()?;
    let mut bundle = DatasetBundle::new(classes.clone());
    for name in SEGMENTS {
        if let Some(path) = manifest.segment_path(&manifest_path, name) {
            *segment_of(&mut bundle, name) = load_jsonl_dataset(&path, &classes)?;
        }
    }
    Ok(bundle)
}

fn write_segments(dir: &RunDir, classes: &ClassSet, segments: &[(&str, &[DialogueInstance])]) -> Result<()> {
    let manifest_path = dir.manifest_path();
    let mut manifest = if manifest_path.exists() {
        read_manifest(&manifest_path)?
    } else {
        Manifest {
            classes: classes.names().to_vec(),
            segments: Default::default(),
        }
    };
    for (name, instances) in segments {
        let file = format!("{name}.jsonl");
        write_jsonl(&dir.data_dir().join(&file), instances)?;
        manifest.segments.insert(name.to_string(), file);
    }
    write_manifest(&manifest_path, &manifest)
}

/// Writes the configuration snapshot.
pub fn write_config_snapshot(config: &PipelineConfig, dir: &RunDir) -> Result<()> {
    write_text(&dir.config_path(), &config.to_toml())
}

/// Generates the synthetic corpus, or copies a JSONL dataset, into `data/`.
pub fn gen_data(config: &PipelineConfig, dir: &RunDir) -> Result<DatasetBundle> {
    let bundle = match config.data {
        DataSource::Synthetic => generate_synthetic_corpus(&config.synthetic_spec())?,
        DataSource::Jsonl => {
            let path = config
                .data_manifest
                .as_ref()
                .ok_or_else(|| Error::Config("missing required key `data_manifest`".into()))?;
            let manifest = read_manifest(path)?;
            let classes = manifest.class_set()?;
            let mut bundle = DatasetBundle::new(classes.clone());
            for name in ["labeled", "unlabeled", "dev", "test"] {
                if let Some(p) = manifest.segment_path(path, name) {
                    *segment_of(&mut bundle, name) = load_jsonl_dataset(&p, &classes)?;
                }
            }
            bundle
        }
    };
    bundle.validate()?;
    let manifest_path = dir.manifest_path();
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path)
            .map_err(|e| Error::io(format!("remove {}", manifest_path.display()), e))?;
    }
    write_segments(
        dir,
        &bundle.classes,
        &[
            ("labeled", &bundle.labeled),
            ("unlabeled", &bundle.unlabeled),
            ("dev", &bundle.dev),
            ("test", &bundle.test),
        ],
    )?;
    let vocab = crate::pipeline::build_vocabulary(&bundle, config.vocab_min_count);
    vocab.save(&dir.vocab_path())?;
    Ok(bundle)
}

/// Builds A_U from X_U and B_L from X_L.
pub fn augment(config: &PipelineConfig, dir: &RunDir) -> Result<DatasetBundle> {
    for warning in config.warnings() {
        log::warn!("{warning}");
    }
    let mut bundle = load_data(dir)?;
    if !bundle.unlabeled.is_empty() {
        bundle.augmented_unlabeled = build_augmented_unlabeled(&bundle.unlabeled, &config.unlabeled_augmentation())?;
    }
    bundle.augmented_labeled = build_augmented_labeled(&bundle.labeled, &config.labeled_augmentation())?;
    write_segments(
        dir,
        &bundle.classes.clone(),
        &[
            ("augmented_unlabeled", &bundle.augmented_unlabeled),
            ("augmented_labeled", &bundle.augmented_labeled),
        ],
    )?;
    Ok(bundle)
}

fn context(config: &PipelineConfig, dir: &RunDir) -> Result<Context> {
    Context::new(config.clone(), load_data(dir)?)
}

/// Masked-token pretraining of a fresh encoder on X_L and X_U.
pub fn pretrain_encoder(config: &PipelineConfig, dir: &RunDir) -> Result<(EncoderParams, MlmReport)> {
    let ctx = context(config, dir)?;
    let init = EncoderParams::init(ctx.encoder_config, &mut rng_for(config.seed, tags::INIT_ENCODER))?;
    let (params, report) = pretrain_mlm(&ctx.pretraining_corpus()?, init, &config.mlm_config())?;
    save_encoder(&dir.checkpoint_path("encoder"), &params)?;
    let lines: Vec<_> = report
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(epoch, loss)| json!({ "epoch": epoch, "mlm_loss": loss }))
        .collect();
    let mut sink = dir.clone();
    sink.metrics("pretrain", &lines)?;
    Ok((params, report))
}

/// The pretrained encoder when pretraining is enabled.
fn pretrained(config: &PipelineConfig, dir: &RunDir) -> Result<Option<EncoderParams>> {
    if config.pretrain_epochs == 0 {
        return Ok(None);
    }
    let path = dir.checkpoint_path("encoder");
    if !path.exists() {
        return Err(Error::Empty(format!(
            "{} is missing; run `pretrain-encoder` first",
            path.display()
        )));
    }
    load_encoder(&path).map(Some)
}

pub fn train_teacher(config: &PipelineConfig, dir: &RunDir, kind: TeacherKind) -> Result<()> {
    let ctx = context(config, dir)?;
    let pretrained = pretrained(config, dir)?;
    let mut sink = dir.clone();
    match kind {
        TeacherKind::Gold => ctx.train_gold(pretrained.as_ref(), &mut sink)?,
        TeacherKind::Masked => ctx.train_masked(pretrained.as_ref(), &mut sink)?,
    };
    Ok(())
}

fn load_checkpoint(dir: &RunDir, name: &str, stage: &str) -> Result<crate::classifier::ModelParams> {
    let path = dir.checkpoint_path(name);
    if !path.exists() {
        return Err(Error::Empty(format!(
            "{} is missing; run `{stage}` first",
            path.display()
        )));
    }
    load_model(&path)
}

/// Labels A_U with the joint teacher score and writes G_L.
pub fn pseudo_label(config: &PipelineConfig, dir: &RunDir) -> Result<Vec<DialogueInstance>> {
    let ctx = context(config, dir)?;
    let gold = load_checkpoint(dir, "gold_teacher", "train-teacher --kind gold")?;
    let masked = load_checkpoint(dir, "masked_teacher", "train-teacher --kind masked")?;
    let features = ctx.gold_features(&gold)?;
    let g_l = ctx.assign_pseudo_labels(
        &ctx.gold_scores(&gold, &features)?,
        &ctx.masked_scores(&masked)?,
        config.gamma,
    )?;
    write_segments(dir, ctx.classes(), &[("pseudo_labeled", &g_l)])?;
    Ok(g_l)
}

/// Trains or evaluates the model of one strategy and writes its predictions
/// and reports.
pub fn train_student(config: &PipelineConfig, dir: &RunDir, kind: StrategyKind) -> Result<StrategyOutcome> {
    let ctx = context(config, dir)?;
    let mut sink = dir.clone();
    let outcome = match kind {
        StrategyKind::GoldOnly => {
            let gold = load_checkpoint(dir, "gold_teacher", "train-teacher --kind gold")?;
            ctx.outcome_for_model(kind, gold, None)?
        }
        StrategyKind::MaskedOnly => {
            let masked = load_checkpoint(dir, "masked_teacher", "train-teacher --kind masked")?;
            ctx.outcome_for_model(kind, masked, None)?
        }
        StrategyKind::Combined => {
            let pretrained = pretrained(config, dir)?;
            let (model, records) = ctx.train_combined(pretrained.as_ref(), &mut sink)?;
            ctx.outcome_for_model(kind, model, Some(records))?
        }
        _ => {
            let gold = load_checkpoint(dir, "gold_teacher", "train-teacher --kind gold")?;
            let masked = load_checkpoint(dir, "masked_teacher", "train-teacher --kind masked")?;
            if ctx.bundle.pseudo_labeled.is_empty() {
                return Err(Error::Empty(
                    "pseudo-labeled set G_L is missing; run `pseudo-label` first".into(),
                ));
            }
            let pseudo: Vec<SoftLabel> = ctx
                .bundle
                .pseudo_labeled
                .iter()
                .map(|i| i.label().cloned())
                .collect::<Result<_>>()?;
            let features = ctx.gold_features(&gold)?;
            let gold_scores = ctx.gold_scores(&gold, &features)?;
            let masked_scores = ctx.masked_scores(&masked)?;
            ctx.train_student(kind, &gold, &features, &gold_scores, &masked_scores, &pseudo, &mut sink)?
        }
    };
    write_outcome(&ctx, dir, &outcome)?;
    Ok(outcome)
}

fn with_predictions(instances: &[DialogueInstance], preds: &[SoftLabel]) -> Vec<DialogueInstance> {
    instances
        .iter()
        .zip(preds)
        .map(|(i, p)| DialogueInstance {
            label: Some(p.clone()),
            ..i.clone()
        })
        .collect()
}

/// Writes predictions, the strategy report and `report.json`.
pub fn write_outcome(ctx: &Context, dir: &RunDir, outcome: &StrategyOutcome) -> Result<()> {
    let name = outcome.kind.as_str();
    write_jsonl(
        &dir.predictions_path(&format!("{name}-dev")),
        &with_predictions(&ctx.bundle.dev, &outcome.dev_predictions),
    )?;
    write_jsonl(
        &dir.predictions_path(&format!("{name}-test")),
        &with_predictions(&ctx.bundle.test, &outcome.test_predictions),
    )?;
    if let Some(bootstrap) = &outcome.bootstrap {
        let text = serde_json::to_string_pretty(bootstrap)? + "\n";
        write_text(&dir.report_path(&format!("{name}-bootstrap")), &text)?;
    }
    write_text(
        &dir.report_path(&format!("{name}-dev")),
        &outcome.dev_report.to_json_pretty(),
    )?;
    let report = outcome.report().to_json_pretty();
    write_text(&dir.report_path(name), &report)?;
    write_text(&dir.root().join("report.json"), &report)
}

/// Scores a predictions file against a gold file, matching instances by id.
pub fn evaluate_files(
    pred: &Path,
    gold: &Path,
    manifest: Option<&Path>,
    divisor: MseDivisor,
) -> Result<EvaluationReport> {
    let manifest_path: PathBuf = match manifest {
        Some(p) => p.to_path_buf(),
        None => gold.with_file_name("manifest.json"),
    };
    let classes = read_manifest(&manifest_path)?.class_set()?;
    let golds = load_jsonl_dataset(gold, &classes)?;
    let preds = load_jsonl_dataset(pred, &classes)?;
    let by_id: HashMap<&str, &DialogueInstance> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut pred_labels = Vec::with_capacity(golds.len());
    let mut gold_labels = Vec::with_capacity(golds.len());
    for g in &golds {
        let p = by_id.get(g.id.as_str()).ok_or_else(|| Error::Instance {
            id: g.id.clone(),
            message: "no prediction for this instance".into(),
        })?;
        pred_labels.push(p.label()?.clone());
        gold_labels.push(g.label()?.clone());
    }
    evaluate(&pred_labels, &gold_labels, &classes, divisor)
}

/// gen-data, augment, optional pretraining, teachers, pseudo-labeling and the
/// configured strategy, each as its own stage over `dir`.
pub fn run_pipeline(config: &PipelineConfig, dir: &RunDir) -> Result<StrategyOutcome> {
    let stage = |name: &'static str| move |e: Error| Error::in_stage(name, e);
    let kind = config.strategy;
    write_config_snapshot(config, dir).map_err(stage("config"))?;
    gen_data(config, dir).map_err(stage("gen-data"))?;
    augment(config, dir).map_err(stage("augment"))?;
    if config.pretrain_epochs > 0 {
        pretrain_encoder(config, dir).map_err(stage("pretrain-encoder"))?;
    }
    if kind.needs_gold() {
        train_teacher(config, dir, TeacherKind::Gold).map_err(stage("train-teacher"))?;
    }
    if kind.needs_masked() {
        train_teacher(config, dir, TeacherKind::Masked).map_err(stage("train-teacher"))?;
    }
    if kind.trains_student() {
        pseudo_label(config, dir).map_err(stage("pseudo-label"))?;
    }
    train_student(config, dir, kind).map_err(stage("train-student"))
}
