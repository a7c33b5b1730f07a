//! Supervised training with the composite keypoint loss.
//!
//! Per sample the loss is
//!
//! ```text
//! 10  * L1(pred, points)
//! 0.1 * |vhs(pred) - vhs(points)|
//! 1   * L1(pred, soft)            only when epoch > 10
//! ```
//!
//! where `L1` is the mean absolute error over the 12 coordinates and `soft` is
//! the mean of the model's own deterministic predictions for that sample over
//! previous epochs. Epochs are numbered from 1.
//!
//! Every random draw is keyed by (seed, purpose, sample id, epoch), so a run is
//! reproducible from its config and seed and does not depend on how batches
//! are split for gradient accumulation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Sample};
use crate::model::{Image, ModelError, ModelSnapshot, Tape};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule, GradAccumulator, OptimError};
use crate::rng::{derived_rng, RngState};
use crate::vhs::{calc_vhs, vhs_with_gradient, GeometryError, HeartClass, KeypointSet, OUTPUT_DIM};

pub const POINTS_WEIGHT: f64 = 10.0;
pub const VHS_WEIGHT: f64 = 0.1;
pub const SOFT_WEIGHT: f64 = 1.0;
/// The soft-label term is active for epochs strictly greater than this.
pub const SOFT_LABEL_START: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// The weighted terms of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub points_term: f64,
    pub vhs_term: f64,
    pub soft_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weights raw L1 values; the soft value is dropped for `epoch <= 10`.
    pub fn weighted(points_l1: f64, vhs_l1: f64, soft_l1: Option<f64>, epoch: usize) -> Self {
        let points_term = POINTS_WEIGHT * points_l1;
        let vhs_term = VHS_WEIGHT * vhs_l1;
        let soft_term = match soft_l1 {
            Some(s) if soft_active(epoch) => SOFT_WEIGHT * s,
            _ => 0.0,
        };
        LossBreakdown { points_term, vhs_term, soft_term, total: points_term + vhs_term + soft_term }
    }

    fn accumulate(&mut self, other: &LossBreakdown) {
        self.points_term += other.points_term;
        self.vhs_term += other.vhs_term;
        self.soft_term += other.soft_term;
        self.total += other.total;
    }

    fn scaled(&self, k: f64) -> Self {
        LossBreakdown {
            points_term: self.points_term * k,
            vhs_term: self.vhs_term * k,
            soft_term: self.soft_term * k,
            total: self.total * k,
        }
    }
}

pub fn soft_active(epoch: usize) -> bool {
    epoch > SOFT_LABEL_START
}

#[inline]
fn sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error over the coordinates and its subgradient (zero at ties).
pub fn l1_with_gradient(pred: &[f64; OUTPUT_DIM], target: &[f64; OUTPUT_DIM]) -> (f64, [f64; OUTPUT_DIM]) {
    let n = OUTPUT_DIM as f64;
    let mut loss = 0.0;
    let mut grad = [0.0; OUTPUT_DIM];
    for i in 0..OUTPUT_DIM {
        let r = pred[i] - target[i];
        loss += r.abs();
        grad[i] = sign(r) / n;
    }
    (loss / n, grad)
}

/// Composite loss of one prediction and its gradient with respect to the
/// prediction.
///
/// The target score is recomputed from the label points; a degenerate label is
/// an error so the caller can skip the sample. A degenerate *prediction*
/// contributes a zero score term.
pub fn composite_loss(
    pred: &[f64; OUTPUT_DIM],
    label: &KeypointSet,
    epoch: usize,
    soft: Option<&[f64; OUTPUT_DIM]>,
) -> Result<(LossBreakdown, [f64; OUTPUT_DIM]), GeometryError> {
    let target_vhs = calc_vhs(label)?.value();
    let target = label.to_array();
    let (points_l1, points_grad) = l1_with_gradient(pred, &target);
    let mut grad = points_grad.map(|g| POINTS_WEIGHT * g);

    let vhs_l1 = match vhs_with_gradient(pred) {
        Ok((vhs, vhs_grad)) => {
            let r = vhs - target_vhs;
            let s = sign(r);
            for i in 0..OUTPUT_DIM {
                grad[i] += VHS_WEIGHT * s * vhs_grad[i];
            }
            r.abs()
        }
        Err(GeometryError::NonFinite) => return Err(GeometryError::NonFinite),
        Err(_) => {
            log::warn!("degenerate predicted vertebral segment; score term skipped");
            0.0
        }
    };

    let soft_l1 = match soft {
        Some(soft) if soft_active(epoch) => {
            let (l, g) = l1_with_gradient(pred, soft);
            for i in 0..OUTPUT_DIM {
                grad[i] += SOFT_WEIGHT * g[i];
            }
            Some(l)
        }
        _ => None,
    };
    Ok((LossBreakdown::weighted(points_l1, vhs_l1, soft_l1, epoch), grad))
}

/// Per-sample history of deterministic predictions from completed epochs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelStore {
    /// Keep only the most recent `window` epochs; `None` keeps all.
    pub window: Option<usize>,
    history: BTreeMap<String, Vec<[f64; OUTPUT_DIM]>>,
}

impl SoftLabelStore {
    pub fn new(window: Option<usize>) -> Self {
        SoftLabelStore { window, history: BTreeMap::new() }
    }

    pub fn record(&mut self, id: &str, prediction: [f64; OUTPUT_DIM]) {
        let h = self.history.entry(id.to_string()).or_default();
        h.push(prediction);
        if let Some(w) = self.window {
            if h.len() > w {
                h.drain(..h.len() - w);
            }
        }
    }

    pub fn count(&self, id: &str) -> usize {
        self.history.get(id).map_or(0, Vec::len)
    }

    pub fn history(&self, id: &str) -> &[[f64; OUTPUT_DIM]] {
        self.history.get(id).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    /// Uniform mean of the retained predictions.
    pub fn soft_label(&self, id: &str) -> Option<[f64; OUTPUT_DIM]> {
        let h = self.history.get(id).filter(|h| !h.is_empty())?;
        let mut mean = [0.0; OUTPUT_DIM];
        for p in h {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        let n = h.len() as f64;
        Some(mean.map(|m| m / n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub soft_label_window: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 16, accumulation_steps: 1, soft_label_window: None }
    }
}

/// A training target bound to its image.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub id: &'a str,
    pub image: &'a Image,
    pub target: KeypointSet,
}

/// Borrows labeled samples as examples; an unlabeled sample is a data error.
pub fn examples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Vec<Example<'a>>, DataError> {
    samples
        .into_iter()
        .map(|s| {
            let target = s.label.ok_or_else(|| DataError::Unlabeled(s.id.clone()))?;
            Ok(Example { id: &s.id, image: &s.image, target })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean composite loss over the labeled samples that were used.
    pub train: LossBreakdown,
    /// Mean L1 against pseudo labels, when any were trained on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_accuracy: Option<f64>,
    pub optimizer_steps: usize,
    pub skipped_samples: usize,
}

/// Everything mutated by training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub snapshot: ModelSnapshot,
    pub optimizer: AdamW,
    pub schedule: CosineSchedule,
    pub soft_labels: SoftLabelStore,
    pub config: TrainConfig,
    /// Global epoch number at which this schedule started.
    pub first_epoch: usize,
}

impl TrainState {
    /// Fresh optimizer state; the schedule starts at the snapshot's next epoch.
    pub fn new(
        snapshot: ModelSnapshot,
        adamw: AdamWConfig,
        schedule: CosineSchedule,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        adamw.validate()?;
        if config.batch_size == 0 || config.accumulation_steps == 0 {
            return Err(TrainError::Config("batch_size and accumulation_steps must be at least 1".into()));
        }
        let optimizer = AdamW::with_decay_mask(adamw, snapshot.network().decay_mask());
        let first_epoch = snapshot.epoch + 1;
        Ok(TrainState {
            snapshot,
            optimizer,
            schedule,
            soft_labels: SoftLabelStore::new(config.soft_label_window),
            config,
            first_epoch,
        })
    }

    pub fn next_epoch(&self) -> usize {
        self.snapshot.epoch + 1
    }
}

#[derive(Default)]
struct BatchStats {
    breakdown: LossBreakdown,
    used: usize,
    skipped: usize,
    pseudo_loss: f64,
    pseudo_used: usize,
}

/// Gradient of `mean(labeled composite) + lambda * mean(pseudo L1)` for one micro-batch.
fn micro_batch_gradient(
    state: &TrainState,
    labeled: &[&Example],
    pseudo: &[&Example],
    lambda: f64,
    epoch: usize,
    stats: &mut BatchStats,
) -> Result<Vec<f64>, TrainError> {
    let snap = &state.snapshot;
    let seed = snap.seed;
    let mut grad = vec![0.0; snap.params.len()];

    let mut tape = Tape::new();
    let mut out_grads = Vec::with_capacity(labeled.len());
    for ex in labeled {
        let mut rng = derived_rng(seed, "dropout", ex.id, epoch as u64);
        let pred = snap.forward_train(ex.image, &mut rng, &mut tape)?;
        let soft = state.soft_labels.soft_label(ex.id);
        match composite_loss(&pred, &ex.target, epoch, soft.as_ref()) {
            Ok((loss, g)) => {
                stats.breakdown.accumulate(&loss);
                stats.used += 1;
                out_grads.push(Some(g));
            }
            Err(e) => {
                log::warn!("sample {} skipped: {e}", ex.id);
                stats.skipped += 1;
                out_grads.push(None);
            }
        }
    }
    let n_used = out_grads.iter().filter(|g| g.is_some()).count();
    if n_used > 0 {
        let inv = 1.0 / n_used as f64;
        let scaled: Vec<[f64; OUTPUT_DIM]> =
            out_grads.iter().map(|g| g.map_or([0.0; OUTPUT_DIM], |g| g.map(|v| v * inv))).collect();
        grad = snap.backward(&tape, &scaled)?;
    }

    if !pseudo.is_empty() {
        let mut tape = Tape::new();
        let mut out_grads = Vec::with_capacity(pseudo.len());
        let inv = 1.0 / pseudo.len() as f64;
        for ex in pseudo {
            let mut rng = derived_rng(seed, "pseudo-dropout", ex.id, epoch as u64);
            let pred = snap.forward_train(ex.image, &mut rng, &mut tape)?;
            let (l, g) = l1_with_gradient(&pred, &ex.target.to_array());
            stats.pseudo_loss += l;
            stats.pseudo_used += 1;
            out_grads.push(g.map(|v| v * inv));
        }
        let pseudo_grad = snap.backward(&tape, &out_grads)?;
        for (g, p) in grad.iter_mut().zip(&pseudo_grad) {
            *g += lambda * p;
        }
    }
    Ok(grad)
}

/// One epoch over `labeled` (and, optionally, pseudo-labeled examples weighted
/// by `lambda`), followed by the soft-label update and validation.
///
/// Pseudo examples are spread evenly over the labeled mini-batches and use
/// their own random streams, so with `lambda = 0` the parameter trajectory is
/// identical to labeled-only training.
pub fn train_epoch(
    state: &mut TrainState,
    labeled: &[Example],
    pseudo: &[Example],
    lambda: f64,
    validation: &[Example],
) -> Result<EpochReport, TrainError> {
    if labeled.is_empty() {
        return Err(TrainError::Config("labeled training set is empty".into()));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(TrainError::Config(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let epoch = state.next_epoch();
    let lr = state.schedule.lr_at(epoch - state.first_epoch)?;
    let seed = state.snapshot.seed;

    let mut rng = state
        .snapshot
        .rng
        .restore()
        .ok_or_else(|| TrainError::Config("snapshot rng state is unreadable".into()))?;
    let mut order: Vec<&Example> = labeled.iter().collect();
    order.shuffle(&mut rng);
    let mut pseudo_order: Vec<&Example> = pseudo.iter().collect();
    pseudo_order.shuffle(&mut derived_rng(seed, "pseudo-order", "", epoch as u64));

    let bs = state.config.batch_size;
    let n_batches = order.len().div_ceil(bs);
    let mut acc = GradAccumulator::new(state.snapshot.params.len(), state.config.accumulation_steps);
    let mut stats = BatchStats::default();
    let mut steps = 0;
    for (j, batch) in order.chunks(bs).enumerate() {
        let lo = j * pseudo_order.len() / n_batches;
        let hi = (j + 1) * pseudo_order.len() / n_batches;
        let grad = micro_batch_gradient(state, batch, &pseudo_order[lo..hi], lambda, epoch, &mut stats)?;
        if let Some(mean) = acc.push(&grad) {
            state.optimizer.step(&mut state.snapshot.params, &mean, lr)?;
            steps += 1;
        }
    }
    if let Some(mean) = acc.flush() {
        state.optimizer.step(&mut state.snapshot.params, &mean, lr)?;
        steps += 1;
    }

    for ex in labeled {
        let pred = state.snapshot.predict(ex.image)?;
        state.soft_labels.record(ex.id, pred);
    }
    state.snapshot.epoch = epoch;
    state.snapshot.rng = RngState::capture(&rng);

    let (validation_loss, validation_accuracy) = if validation.is_empty() {
        (None, None)
    } else {
        let eval = evaluate_examples(&state.snapshot, validation)?;
        (Some(eval.mean_loss), Some(eval.accuracy))
    };
    let train = if stats.used > 0 { stats.breakdown.scaled(1.0 / stats.used as f64) } else { LossBreakdown::default() };
    Ok(EpochReport {
        epoch,
        learning_rate: lr,
        train,
        pseudo_loss: (stats.pseudo_used > 0).then(|| stats.pseudo_loss / stats.pseudo_used as f64),
        validation_loss,
        validation_accuracy,
        optimizer_steps: steps,
        skipped_samples: stats.skipped,
    })
}

/// Runs `epochs` labeled-only epochs, calling `on_epoch` after each.
pub fn train(
    state: &mut TrainState,
    labeled: &[Example],
    validation: &[Example],
    epochs: usize,
    mut on_epoch: impl FnMut(&TrainState, &EpochReport),
) -> Result<Vec<EpochReport>, TrainError> {
    let mut reports = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let report = train_epoch(state, labeled, &[], 0.0, validation)?;
        on_epoch(state, &report);
        reports.push(report);
    }
    Ok(reports)
}

/// Metrics over a labeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub count: usize,
    /// Mean composite loss without the soft term.
    pub mean_loss: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; 3]; 3],
}

/// Class of a raw prediction: coordinates are clamped to the unit square
/// first. A vanishing predicted vertebral segment sends the score to
/// infinity, so it is read as the large class.
pub fn predicted_class(pred: &[f64; OUTPUT_DIM]) -> HeartClass {
    match calc_vhs(&KeypointSet::from_array(pred).clamped()) {
        Ok(v) => v.class(),
        Err(GeometryError::InvalidScore(0.0)) => HeartClass::Small,
        Err(_) => HeartClass::Large,
    }
}

pub fn evaluate_examples(snapshot: &ModelSnapshot, examples: &[Example]) -> Result<Evaluation, TrainError> {
    let mut confusion = [[0usize; 3]; 3];
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    let mut correct = 0usize;
    let mut counted = 0usize;
    for ex in examples {
        let pred = snapshot.predict(ex.image)?;
        if let Ok((loss, _)) = composite_loss(&pred, &ex.target, 0, None) {
            loss_sum += loss.total;
            loss_n += 1;
        }
        let Ok(truth) = calc_vhs(&ex.target).map(|v| v.class()) else {
            log::warn!("sample {} has degenerate label geometry; not scored", ex.id);
            continue;
        };
        let guess = predicted_class(&pred);
        confusion[truth.index()][guess.index()] += 1;
        counted += 1;
        if guess == truth {
            correct += 1;
        }
    }
    Ok(Evaluation {
        count: counted,
        mean_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 },
        accuracy: if counted > 0 { correct as f64 / counted as f64 } else { 0.0 },
        confusion,
    })
}

/// Evaluates samples, which must all be labeled.
pub fn evaluate(snapshot: &ModelSnapshot, samples: &[&Sample]) -> Result<Evaluation, TrainError> {
    let ex = examples(samples.iter().copied())?;
    evaluate_examples(snapshot, &ex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vhs::Keypoint;

    fn label() -> KeypointSet {
        KeypointSet::from_points([
            Keypoint::new(0.3, 0.4),
            Keypoint::new(0.6, 0.8),
            Keypoint::new(0.55, 0.5),
            Keypoint::new(0.35, 0.7),
            Keypoint::new(0.2, 0.2),
            Keypoint::new(0.55, 0.22),
        ])
    }

    #[test]
    fn weights_are_ten_tenth_one() {
        let b = LossBreakdown::weighted(0.1, 0.2, None, 5);
        assert!((b.total - 1.02).abs() < 1e-12);
        assert_eq!(b.soft_term, 0.0);
        let b = LossBreakdown::weighted(0.1, 0.2, Some(0.05), 11);
        assert!((b.total - 1.07).abs() < 1e-12);
        assert!((b.points_term - 1.0).abs() < 1e-15);
        assert!((b.vhs_term - 0.02).abs() < 1e-15);
        assert!((b.soft_term - 0.05).abs() < 1e-15);
        // gated at exactly 10
        assert_eq!(LossBreakdown::weighted(0.1, 0.2, Some(0.05), 10).soft_term, 0.0);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let l = label();
        let (b, g) = composite_loss(&l.to_array(), &l, 5, None).unwrap();
        assert_eq!(b, LossBreakdown::default());
        assert_eq!(g, [0.0; 12]);
    }

    #[test]
    fn translated_prediction_isolates_the_points_term() {
        let l = label();
        let pred = l.map(|p| Keypoint::new(p.x + 0.1, p.y + 0.1)).to_array();
        let (b, _) = composite_loss(&pred, &l, 5, None).unwrap();
        assert!((b.points_term - 1.0).abs() < 1e-12);
        assert!(b.vhs_term < 1e-12);
        let soft = l.map(|p| Keypoint::new(p.x + 0.05, p.y + 0.15)).to_array();
        let (b, _) = composite_loss(&pred, &l, 11, Some(&soft)).unwrap();
        assert!((b.soft_term - 0.05).abs() < 1e-12);
        assert!((b.total - 1.05).abs() < 1e-9);
    }

    #[test]
    fn soft_term_is_gated_for_early_epochs() {
        let l = label();
        let pred = l.map(|p| Keypoint::new(p.x + 0.03, p.y - 0.02)).to_array();
        let soft = [0.9; 12];
        for epoch in 0..=10 {
            let with = composite_loss(&pred, &l, epoch, Some(&soft)).unwrap();
            let without = composite_loss(&pred, &l, epoch, None).unwrap();
            assert_eq!(with, without);
            assert_eq!(with.0.soft_term, 0.0);
        }
        let active = composite_loss(&pred, &l, 11, Some(&soft)).unwrap();
        assert!(active.0.soft_term > 0.0);
    }

    #[test]
    fn degenerate_label_is_an_error() {
        let mut l = label();
        l.f = l.e;
        assert!(composite_loss(&[0.5; 12], &l, 1, None).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let l = label();
        let pred = [0.31, 0.43, 0.58, 0.77, 0.52, 0.47, 0.38, 0.73, 0.23, 0.17, 0.51, 0.26];
        let soft = [0.29, 0.41, 0.61, 0.79, 0.57, 0.52, 0.33, 0.68, 0.18, 0.24, 0.57, 0.2];
        let (_, g) = composite_loss(&pred, &l, 12, Some(&soft)).unwrap();
        let h = 1e-6;
        for i in 0..12 {
            let mut p = pred;
            p[i] += h;
            let mut m = pred;
            m[i] -= h;
            let fd = (composite_loss(&p, &l, 12, Some(&soft)).unwrap().0.total
                - composite_loss(&m, &l, 12, Some(&soft)).unwrap().0.total)
                / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn soft_store_mean_matches_brute_force() {
        let mut store = SoftLabelStore::new(None);
        let preds: Vec<[f64; 12]> = (0..5).map(|e| std::array::from_fn(|i| (e * 12 + i) as f64 * 0.013)).collect();
        for p in &preds {
            store.record("x", *p);
        }
        let mean = store.soft_label("x").unwrap();
        for i in 0..12 {
            let brute: f64 = preds.iter().map(|p| p[i]).sum::<f64>() / 5.0;
            assert!((mean[i] - brute).abs() < 1e-12);
        }
        assert_eq!(store.count("x"), 5);
        assert!(store.soft_label("y").is_none());

        let mut windowed = SoftLabelStore::new(Some(2));
        for p in &preds {
            windowed.record("x", *p);
        }
        assert_eq!(windowed.count("x"), 2);
        assert!((windowed.soft_label("x").unwrap()[0] - (preds[3][0] + preds[4][0]) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn predicted_class_clamps_and_handles_degenerate_output() {
        let l = label();
        let v = calc_vhs(&l).unwrap();
        assert_eq!(predicted_class(&l.to_array()), v.class());
        let mut collapsed = l.to_array();
        collapsed[10] = collapsed[8];
        collapsed[11] = collapsed[9];
        assert_eq!(predicted_class(&collapsed), HeartClass::Large);
    }
}
