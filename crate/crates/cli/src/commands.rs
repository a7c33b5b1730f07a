use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cda_core::data::{self, Dataset, Sample, Split};
use cda_core::fsutil::{append_line, write_atomic};
use cda_core::model::ModelSnapshot;
use cda_core::phantom::{generate_phantoms, PhantomSpec};
use cda_core::pseudo::{run_pseudo_rounds, Candidate};
use cda_core::snapshot;
use cda_core::train::{evaluate_examples, examples, train, Evaluation, Example, SoftLabelStore, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const ROUND_LOG: &str = "rounds.jsonl";
pub const CONFIG_COPY: &str = "config.toml";
pub const LOCK_FILE: &str = ".lock";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LABELS_DIR: &str = "labels";
pub const PSEUDO_DIR: &str = "pseudo";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    #[serde(flatten)]
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub final_epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_validation_accuracy: Option<f64>,
    /// Test metrics of the snapshot the command started from (pseudo only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_test: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_confident: Option<usize>,
}

/// Summary of one command run, written atomically when the run ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub started_at: String,
    pub finished_at: String,
    pub metrics: Metrics,
    pub checkpoints: Vec<PathBuf>,
    pub epoch_log: PathBuf,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pseudo_label_files: Vec<PathBuf>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Exclusive claim on an output directory, released on drop.
pub struct RunLock(PathBuf);

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::new(
                "locked",
                format!("{} is in use by another run (remove {} if stale)", dir.display(), path.display()),
            )
            .into()),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Soft-label history stored beside a checkpoint: `last.snap` -> `last.soft.json`.
pub fn soft_label_path(snapshot_path: &Path) -> PathBuf {
    snapshot_path.with_extension("soft.json")
}

fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    snapshot::save(&state.snapshot, path)?;
    let soft = serde_json::to_vec(&state.soft_labels)?;
    write_atomic(&soft_label_path(path), &soft).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn reset_log(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e).with_context(|| format!("removing {}", path.display())),
    }
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes()).context("writing run manifest")
}

fn labeled_train(dataset: &Dataset) -> Result<Vec<Example<'_>>> {
    let train: Vec<&Sample> = dataset.split(Split::Train).into_iter().filter(|s| s.label.is_some()).collect();
    if train.is_empty() {
        return Err(CliError::new("data", "the labeled train split is empty").into());
    }
    Ok(examples(train)?)
}

fn split_examples(dataset: &Dataset, split: Split) -> Result<Vec<Example<'_>>> {
    Ok(examples(dataset.split(split))?)
}

fn test_report(snapshot: &ModelSnapshot, test: &[Example]) -> Result<Option<EvalReport>> {
    if test.is_empty() {
        return Ok(None);
    }
    Ok(Some(EvalReport { split: Split::Test, evaluation: evaluate_examples(snapshot, test)? }))
}

fn check_architecture(snapshot: &ModelSnapshot, config: &RunConfig) -> Result<()> {
    if snapshot.config() != &config.model {
        return Err(CliError::new(
            "config",
            "snapshot architecture does not match the configured model; use the config the snapshot was trained with",
        )
        .into());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub root: PathBuf,
    pub samples: usize,
    pub train: usize,
    pub unlabeled: usize,
    pub valid: usize,
    pub test: usize,
}

/// Writes a phantom dataset bundle to `config.dataset`.
pub fn cmd_generate(config: &RunConfig) -> Result<GenerateReport> {
    config.validate()?;
    let p = &config.phantom;
    let total = p.labeled + p.unlabeled + p.valid + p.test;
    let specs = PhantomSpec::random_batch(total, p.size, (p.vhs_min, p.vhs_max), config.seed);
    let name = config.dataset.file_name().and_then(|n| n.to_str()).unwrap_or("phantoms");
    let mut ds = generate_phantoms(name, &specs)?;
    for (i, s) in ds.samples.iter_mut().enumerate() {
        s.split = if i < p.labeled {
            Split::Train
        } else if i < p.labeled + p.unlabeled {
            s.label = None;
            s.annotator = None;
            Split::Unlabeled
        } else if i < p.labeled + p.unlabeled + p.valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    data::save_dataset(&ds, &config.dataset)?;
    log::info!("wrote {total} phantoms to {}", config.dataset.display());
    Ok(GenerateReport {
        root: config.dataset.clone(),
        samples: total,
        train: p.labeled,
        unlabeled: p.unlabeled,
        valid: p.valid,
        test: p.test,
    })
}

/// Supervised training from a fresh initialization.
pub fn cmd_train(config: &RunConfig) -> Result<RunManifest> {
    config.validate()?;
    let started_at = now();
    let dataset = data::load_dataset(&config.dataset)?;
    let out = &config.output;
    let _lock = RunLock::acquire(out)?;
    write_atomic(&out.join(CONFIG_COPY), config.to_toml().as_bytes())?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir)?;
    let epoch_log = out.join(EPOCH_LOG);
    reset_log(&epoch_log)?;

    let labeled = labeled_train(&dataset)?;
    let validation = split_examples(&dataset, Split::Valid)?;
    let test = split_examples(&dataset, Split::Test)?;

    let snapshot = ModelSnapshot::initialize(config.model.clone(), config.seed)?;
    let mut state =
        TrainState::new(snapshot, config.optimizer, config.train_schedule()?, config.train.loop_config())?;
    let initial = ckpt_dir.join("initial.snap");
    let last = ckpt_dir.join("last.snap");
    let best = ckpt_dir.join("best.snap");
    save_checkpoint(&state, &initial)?;
    save_checkpoint(&state, &last)?;
    let mut checkpoints = vec![initial, last.clone()];

    let mut periodic = Vec::new();
    let mut best_acc: Option<f64> = None;
    let mut failure: Option<anyhow::Error> = None;
    let reports = train(&mut state, &labeled, &validation, config.train.epochs, |st, report| {
        if failure.is_some() {
            return;
        }
        let mut step = || -> Result<()> {
            append_line(&epoch_log, &serde_json::to_string(report)?)?;
            save_checkpoint(st, &last)?;
            let every = config.train.checkpoint_every;
            if every > 0 && report.epoch % every == 0 {
                let path = ckpt_dir.join(format!("epoch-{:03}.snap", report.epoch));
                save_checkpoint(st, &path)?;
                periodic.push(path);
            }
            if let Some(acc) = report.validation_accuracy {
                if best_acc.is_none_or(|b| acc > b) {
                    best_acc = Some(acc);
                    save_checkpoint(st, &best)?;
                }
            }
            log::info!(
                "epoch {} lr {:.3e} loss {:.5} val_acc {}",
                report.epoch,
                report.learning_rate,
                report.train.total,
                report.validation_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
            );
            Ok(())
        };
        failure = step().err();
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    checkpoints.extend(periodic);
    if best_acc.is_some() {
        checkpoints.push(best);
    }

    let metrics = Metrics {
        final_epoch: state.snapshot.epoch,
        final_train_loss: reports.last().map(|r| r.train.total),
        best_validation_accuracy: best_acc,
        test: test_report(&state.snapshot, &test)?,
        ..Default::default()
    };
    let manifest = RunManifest {
        command: "train".into(),
        config: config.clone(),
        started_at,
        finished_at: now(),
        metrics,
        checkpoints,
        epoch_log,
        pseudo_label_files: Vec::new(),
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

/// MC-dropout pseudo-labeling continued from a trained snapshot. Outputs go
/// to `<output>/pseudo`.
pub fn cmd_pseudo(config: &RunConfig, snapshot_path: &Path) -> Result<RunManifest> {
    config.validate()?;
    let started_at = now();
    let snap = snapshot::load(snapshot_path)?;
    check_architecture(&snap, config)?;
    let dataset = data::load_dataset(&config.dataset)?;
    let out = config.output.join(PSEUDO_DIR);
    let _lock = RunLock::acquire(&out)?;
    write_atomic(&out.join(CONFIG_COPY), config.to_toml().as_bytes())?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let labels_dir = out.join(LABELS_DIR);
    fs::create_dir_all(&ckpt_dir)?;
    fs::create_dir_all(&labels_dir)?;
    let epoch_log = out.join(EPOCH_LOG);
    let round_log = out.join(ROUND_LOG);
    reset_log(&epoch_log)?;
    reset_log(&round_log)?;
    for entry in fs::read_dir(&labels_dir)? {
        fs::remove_file(entry?.path())?;
    }

    let labeled = labeled_train(&dataset)?;
    let validation = split_examples(&dataset, Split::Valid)?;
    let test = split_examples(&dataset, Split::Test)?;
    let pool: Vec<Candidate> =
        dataset.split(Split::Unlabeled).into_iter().map(|s| Candidate { id: &s.id, image: &s.image }).collect();
    if pool.is_empty() {
        log::info!("no unlabeled samples; the pseudo phase is plain training");
    }

    let baseline_test = test_report(&snap, &test)?;
    let mut state = TrainState::new(snap, config.optimizer, config.pseudo_schedule()?, config.train.loop_config())?;
    let soft_path = soft_label_path(snapshot_path);
    if soft_path.exists() {
        let text = fs::read_to_string(&soft_path).with_context(|| format!("reading {}", soft_path.display()))?;
        let mut soft: SoftLabelStore = serde_json::from_str(&text)?;
        soft.window = config.train.soft_label_window;
        state.soft_labels = soft;
    } else {
        log::warn!("no soft-label history beside {}; starting empty", snapshot_path.display());
    }

    let mut label_files = Vec::new();
    let mut round_failure: Option<anyhow::Error> = None;
    let mut epoch_failure: Option<anyhow::Error> = None;
    let run = run_pseudo_rounds(
        &mut state,
        &labeled,
        &pool,
        &validation,
        &config.pseudo.mc(),
        config.pseudo.epochs,
        |report, admitted| {
            if round_failure.is_some() {
                return;
            }
            let step = || -> Result<PathBuf> {
                append_line(&round_log, &serde_json::to_string(report)?)?;
                let path = labels_dir.join(format!("round-{:03}.jsonl", report.round));
                let mut text = String::new();
                for p in admitted {
                    text.push_str(&p.to_record().to_line());
                    text.push('\n');
                }
                write_atomic(&path, text.as_bytes())?;
                log::info!("round {}: {} of {} admitted", report.round, report.confident, report.pool);
                Ok(path)
            };
            match step() {
                Ok(p) => label_files.push(p),
                Err(e) => round_failure = Some(e),
            }
        },
        |_, report| {
            if epoch_failure.is_none() {
                epoch_failure = serde_json::to_string(report)
                    .map_err(anyhow::Error::from)
                    .and_then(|line| append_line(&epoch_log, &line).map_err(anyhow::Error::from))
                    .err();
            }
        },
    )?;
    if let Some(e) = round_failure.or(epoch_failure) {
        return Err(e);
    }
    let last = ckpt_dir.join("last.snap");
    save_checkpoint(&state, &last)?;

    let metrics = Metrics {
        final_epoch: state.snapshot.epoch,
        final_train_loss: run.epochs.last().map(|r| r.train.total),
        best_validation_accuracy: run.epochs.iter().filter_map(|r| r.validation_accuracy).reduce(f64::max),
        baseline_test,
        test: test_report(&state.snapshot, &test)?,
        rounds: Some(run.rounds.len()),
        final_confident: run.rounds.last().map(|r| r.confident),
    };
    let manifest = RunManifest {
        command: "pseudo".into(),
        config: config.clone(),
        started_at,
        finished_at: now(),
        metrics,
        checkpoints: vec![last],
        epoch_log,
        pseudo_label_files: label_files,
    };
    write_manifest(&out, &manifest)?;
    Ok(manifest)
}

/// Loss, accuracy and confusion matrix of a snapshot on one labeled split.
pub fn cmd_eval(dataset_root: &Path, snapshot_path: &Path, split: Split) -> Result<EvalReport> {
    let snap = snapshot::load(snapshot_path)?;
    let dataset = data::load_dataset(dataset_root)?;
    let ex = split_examples(&dataset, split)?;
    Ok(EvalReport { split, evaluation: evaluate_examples(&snap, &ex)? })
}
