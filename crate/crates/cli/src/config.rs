use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cda_core::model::ModelConfig;
use cda_core::optim::{AdamWConfig, CosineSchedule};
use cda_core::pseudo::McConfig;
use cda_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a run depends on. A run is reproducible from this file and the
/// code version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub train: TrainSection,
    pub pseudo: PseudoSection,
    pub phantom: PhantomSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data/phantoms"),
            output: PathBuf::from("runs/default"),
            seed: 1,
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            train: TrainSection::default(),
            pseudo: PseudoSection::default(),
            phantom: PhantomSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    /// Epochs of prediction history averaged into soft labels; all when unset.
    pub soft_label_window: Option<usize>,
    /// Keep `checkpoints/epoch-NNN.snap` every this many epochs; 0 keeps
    /// only `initial`, `last` and `best`.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let l = TrainConfig::default();
        TrainSection {
            epochs: 50,
            lr_max: 1e-3,
            lr_min: 1e-6,
            batch_size: l.batch_size,
            accumulation_steps: l.accumulation_steps,
            soft_label_window: l.soft_label_window,
            checkpoint_every: 0,
        }
    }
}

impl TrainSection {
    pub fn loop_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            accumulation_steps: self.accumulation_steps,
            soft_label_window: self.soft_label_window,
        }
    }
}

/// The pseudo-labeling phase continues from a trained snapshot with its own
/// cosine schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoSection {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub passes: usize,
    pub tau: f64,
    pub lambda: f64,
    pub refresh_every: usize,
}

impl Default for PseudoSection {
    fn default() -> Self {
        let mc = McConfig::default();
        PseudoSection {
            epochs: 20,
            lr_max: 5e-4,
            lr_min: 1e-6,
            passes: mc.passes,
            tau: mc.tau,
            lambda: mc.lambda,
            refresh_every: mc.refresh_every,
        }
    }
}

impl PseudoSection {
    pub fn mc(&self) -> McConfig {
        McConfig { passes: self.passes, tau: self.tau, lambda: self.lambda, refresh_every: self.refresh_every }
    }
}

/// Layout of a generated phantom bundle. Samples are assigned to splits in
/// the order train, unlabeled, valid, test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub labeled: usize,
    pub unlabeled: usize,
    pub valid: usize,
    pub test: usize,
    pub size: usize,
    pub vhs_min: f64,
    pub vhs_max: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection { labeled: 200, unlabeled: 400, valid: 0, test: 100, size: 64, vhs_min: 6.5, vhs_max: 11.5 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.pseudo.mc().validate()?;
        if self.train.batch_size == 0 || self.train.accumulation_steps == 0 {
            bail!("batch_size and accumulation_steps must be at least 1");
        }
        self.train_schedule()?;
        self.pseudo_schedule()?;
        let p = &self.phantom;
        if !(p.vhs_min.is_finite() && p.vhs_min > 0.0 && p.vhs_max > p.vhs_min) {
            bail!("phantom vhs range must satisfy 0 < vhs_min < vhs_max");
        }
        if p.size != self.model.input_size {
            bail!("phantom size {} differs from model input_size {}", p.size, self.model.input_size);
        }
        Ok(())
    }

    /// A zero-epoch run still gets a (never queried) one-epoch schedule.
    pub fn train_schedule(&self) -> Result<CosineSchedule> {
        Ok(CosineSchedule::new(self.train.lr_max, self.train.lr_min, self.train.epochs.max(1))?)
    }

    pub fn pseudo_schedule(&self) -> Result<CosineSchedule> {
        Ok(CosineSchedule::new(self.pseudo.lr_max, self.pseudo.lr_min, self.pseudo.epochs.max(1))?)
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Dataset root directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory for checkpoints, logs and manifests.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs (or pseudo-phase epochs for `pseudo`).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub accumulation_steps: Option<usize>,
    /// Peak learning rate of the command's schedule.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub passes: Option<usize>,
    #[arg(long)]
    pub refresh_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Pseudo,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig, phase: Phase) {
        if let Some(v) = &self.dataset {
            config.dataset = v.clone();
        }
        if let Some(v) = &self.output {
            config.output = v.clone();
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.batch_size {
            config.train.batch_size = v;
        }
        if let Some(v) = self.accumulation_steps {
            config.train.accumulation_steps = v;
        }
        match phase {
            Phase::Train => {
                if let Some(v) = self.epochs {
                    config.train.epochs = v;
                }
                if let Some(v) = self.lr {
                    config.train.lr_max = v;
                }
            }
            Phase::Pseudo => {
                if let Some(v) = self.epochs {
                    config.pseudo.epochs = v;
                }
                if let Some(v) = self.lr {
                    config.pseudo.lr_max = v;
                }
            }
        }
        if let Some(v) = self.tau {
            config.pseudo.tau = v;
        }
        if let Some(v) = self.lambda {
            config.pseudo.lambda = v;
        }
        if let Some(v) = self.passes {
            config.pseudo.passes = v;
        }
        if let Some(v) = self.refresh_every {
            config.pseudo.refresh_every = v;
        }
    }
}
