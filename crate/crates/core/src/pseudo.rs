//! Monte Carlo dropout uncertainty and confidence-filtered pseudo-labeling.
//!
//! For each unlabeled image the model is run `K` times with dropout active.
//! The per-coordinate mean `mu` becomes the candidate label and the population
//! standard deviation `sigma` (divisor `K`) its uncertainty. An image is
//! admitted when `max(sigma) < tau`. Training then continues from the current
//! snapshot on the labeled set plus the admitted images, with the pseudo term
//! weighted by `lambda`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AnnotationRecord, Provenance};
use crate::model::{Image, ModelError, ModelSnapshot};
use crate::rng::derived_rng;
use crate::train::{evaluate_examples, train_epoch, EpochReport, Example, TrainError, TrainState};
use crate::vhs::{KeypointSet, OUTPUT_DIM};

#[derive(Debug, Error)]
pub enum PseudoError {
    #[error("config error: {0}")]
    Config(String),
    #[error("no passes to summarize")]
    NoPasses,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    /// Stochastic passes per image.
    pub passes: usize,
    /// Admission threshold on `max_sigma`, in normalized coordinate units.
    pub tau: f64,
    /// Weight of the pseudo-label term.
    pub lambda: f64,
    /// Epochs between recomputations of the confident set.
    pub refresh_every: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { passes: 20, tau: 0.005, lambda: 1.0, refresh_every: 1 }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<(), PseudoError> {
        if self.passes < 2 {
            return Err(PseudoError::Config(format!("passes must be at least 2, got {}", self.passes)));
        }
        // tau = 0 is allowed and admits nothing
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(PseudoError::Config(format!("tau must be non-negative, got {}", self.tau)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(PseudoError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.refresh_every == 0 {
            return Err(PseudoError::Config("refresh_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean and population standard deviation over stochastic passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McStats {
    pub mu: [f64; OUTPUT_DIM],
    pub sigma: [f64; OUTPUT_DIM],
    pub max_sigma: f64,
}

impl McStats {
    pub fn from_passes(passes: &[[f64; OUTPUT_DIM]]) -> Result<Self, PseudoError> {
        if passes.is_empty() {
            return Err(PseudoError::NoPasses);
        }
        let k = passes.len() as f64;
        // mean as an offset from the first pass, so identical passes give
        // exactly that pass back and a sigma of exactly zero
        let first = passes[0];
        let mut offset = [0.0; OUTPUT_DIM];
        for p in passes {
            for i in 0..OUTPUT_DIM {
                offset[i] += p[i] - first[i];
            }
        }
        let mu: [f64; OUTPUT_DIM] = std::array::from_fn(|i| first[i] + offset[i] / k);
        let mut sigma = [0.0; OUTPUT_DIM];
        for p in passes {
            for i in 0..OUTPUT_DIM {
                sigma[i] += (p[i] - mu[i]).powi(2);
            }
        }
        sigma = sigma.map(|s| (s / k).sqrt());
        let max_sigma = sigma.iter().copied().fold(0.0, f64::max);
        Ok(McStats { mu, sigma, max_sigma })
    }

    pub fn is_confident(&self, tau: f64) -> bool {
        self.max_sigma < tau
    }
}

/// Raw outputs of `passes` dropout-active forward passes. Pass `k` draws
/// from a stream keyed by `(seed, key, k)`, so the result does not depend on
/// the order in which images are processed.
pub fn mc_passes(
    snapshot: &ModelSnapshot,
    image: &Image,
    passes: usize,
    seed: u64,
    key: &str,
) -> Result<Vec<[f64; OUTPUT_DIM]>, PseudoError> {
    if passes < 2 {
        return Err(PseudoError::Config(format!("passes must be at least 2, got {passes}")));
    }
    let mut rngs: Vec<_> = (0..passes).map(|k| derived_rng(seed, "mc-dropout", key, k as u64)).collect();
    Ok(snapshot.forward_stochastic(image, &mut rngs)?)
}

pub fn mc_predict(
    snapshot: &ModelSnapshot,
    image: &Image,
    passes: usize,
    seed: u64,
    key: &str,
) -> Result<McStats, PseudoError> {
    if snapshot.config().dropout_rate == 0.0 {
        log::warn!("dropout rate is 0: every sigma will be 0 and the confidence filter admits everything");
    }
    McStats::from_passes(&mc_passes(snapshot, image, passes, seed, key)?)
}

/// An unlabeled image awaiting a pseudo label.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub id: &'a str,
    pub image: &'a Image,
}

/// An admitted pseudo label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSample {
    pub id: String,
    pub label: KeypointSet,
    pub max_sigma: f64,
    pub round: usize,
}

impl PseudoSample {
    pub fn to_record(&self) -> AnnotationRecord {
        let mut r = AnnotationRecord::from_label(&self.id, &self.label);
        r.provenance = Some(Provenance::Pseudo);
        r.max_sigma = Some(self.max_sigma);
        r.round = Some(self.round);
        r
    }
}

/// Keeps the entries with `max_sigma < tau`, ordered by id.
pub fn select_confident(stats: &[(String, McStats)], tau: f64) -> Vec<&(String, McStats)> {
    let mut out: Vec<_> = stats.iter().filter(|(_, s)| s.is_confident(tau)).collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// `mean(labeled) + lambda * mean(pseudo)`; an empty side contributes 0.
pub fn pseudo_total_loss(labeled: &[f64], pseudo: &[f64], lambda: f64) -> Result<f64, PseudoError> {
    if labeled.is_empty() && pseudo.is_empty() {
        return Err(PseudoError::Config("both loss sets are empty".into()));
    }
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    Ok(mean(labeled) + lambda * mean(pseudo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// The epoch the round's pseudo labels are first trained on.
    pub epoch: usize,
    pub pool: usize,
    pub confident: usize,
    /// Mean of `max_sigma` over the whole unlabeled pool.
    pub mean_max_sigma: f64,
    /// Accuracy of the model that produced the pseudo labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PseudoRun {
    pub rounds: Vec<RoundReport>,
    pub epochs: Vec<EpochReport>,
    /// The confident set of the last round.
    pub admitted: Vec<PseudoSample>,
}

/// Computes MC statistics over the pool and returns the admitted samples.
pub fn pseudo_label_pool(
    snapshot: &ModelSnapshot,
    pool: &[Candidate],
    config: &McConfig,
    round: usize,
) -> Result<(Vec<PseudoSample>, f64), PseudoError> {
    let mut stats = Vec::with_capacity(pool.len());
    for c in pool {
        let s = mc_predict(snapshot, c.image, config.passes, snapshot.seed ^ round as u64, c.id)?;
        stats.push((c.id.to_string(), s));
    }
    let mean_max_sigma =
        if stats.is_empty() { 0.0 } else { stats.iter().map(|(_, s)| s.max_sigma).sum::<f64>() / stats.len() as f64 };
    let admitted = select_confident(&stats, config.tau)
        .into_iter()
        .map(|(id, s)| PseudoSample { id: id.clone(), label: KeypointSet::from_array(&s.mu), max_sigma: s.max_sigma, round })
        .collect();
    Ok((admitted, mean_max_sigma))
}

/// Continues training `state` for `epochs` epochs on the labeled set plus the
/// confident part of `pool`, recomputed every `refresh_every` epochs.
///
/// `on_round` sees each round's report and admitted set before it is trained
/// on; `on_epoch` sees every epoch report.
#[allow(clippy::too_many_arguments)]
pub fn run_pseudo_rounds(
    state: &mut TrainState,
    labeled: &[Example],
    pool: &[Candidate],
    validation: &[Example],
    config: &McConfig,
    epochs: usize,
    mut on_round: impl FnMut(&RoundReport, &[PseudoSample]),
    mut on_epoch: impl FnMut(&TrainState, &EpochReport),
) -> Result<PseudoRun, PseudoError> {
    config.validate()?;
    if pool.is_empty() {
        log::info!("unlabeled pool is empty; pseudo phase reduces to labeled training");
    }
    let images: std::collections::HashMap<&str, &Image> = pool.iter().map(|c| (c.id, c.image)).collect();
    let labeled_ids: std::collections::HashSet<&str> = labeled.iter().map(|e| e.id).collect();

    let mut run = PseudoRun { rounds: Vec::new(), epochs: Vec::new(), admitted: Vec::new() };
    for e in 0..epochs {
        if e % config.refresh_every == 0 {
            let round = run.rounds.len() + 1;
            let (admitted, mean_max_sigma) = pseudo_label_pool(&state.snapshot, pool, config, round)?;
            for p in &admitted {
                assert!(p.max_sigma < config.tau, "admitted {} with max_sigma {}", p.id, p.max_sigma);
                assert!(!labeled_ids.contains(p.id.as_str()), "pseudo label would replace human label {}", p.id);
            }
            let validation_accuracy = if validation.is_empty() {
                None
            } else {
                Some(evaluate_examples(&state.snapshot, validation)?.accuracy)
            };
            let report = RoundReport {
                round,
                epoch: state.next_epoch(),
                pool: pool.len(),
                confident: admitted.len(),
                mean_max_sigma,
                validation_accuracy,
            };
            on_round(&report, &admitted);
            run.rounds.push(report);
            run.admitted = admitted;
        }
        let pseudo: Vec<Example> = run
            .admitted
            .iter()
            .map(|p| Example { id: &p.id, image: images[p.id.as_str()], target: p.label })
            .collect();
        let report = train_epoch(state, labeled, &pseudo, config.lambda, validation)?;
        on_epoch(state, &report);
        run.epochs.push(report);
    }
    Ok(run)
}
