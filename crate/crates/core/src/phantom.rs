//! Procedural thorax phantoms with exactly known keypoints.
//!
//! Each phantom renders a bright elliptical "heart" whose long-axis endpoints
//! are `A`, `B` and short-axis endpoints are `C`, `D`, plus a bar-shaped
//! "spine" segment from `E` to `F`. The spine length and the long/short axis
//! ratio are drawn from the phantom seed; the axis lengths are then solved so
//! that the keypoints reproduce the requested score exactly.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Provenance, Sample, Split};
use crate::model::Image;
use crate::rng::{derive_seed, derived_rng};
use crate::vhs::{Keypoint, KeypointSet, VHS_FACTOR};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhantomError {
    #[error("target vhs must be positive and finite, got {0}")]
    TargetVhs(f64),
    #[error("image side must be at least 8 pixels, got {0}")]
    Size(usize),
    #[error("noise amplitude must be finite and non-negative, got {0}")]
    Noise(f64),
    #[error("phantom geometry leaves the image (keypoint {0})")]
    OutOfFrame(char),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    pub target_vhs: f64,
    /// Heart center in normalized coordinates.
    pub center: (f64, f64),
    /// Long-axis direction in radians, measured from the +x axis towards +y.
    pub orientation: f64,
    /// Standard deviation of additive Gaussian pixel noise, in intensity units.
    pub noise: f64,
    pub seed: u64,
}

const SPINE_HALF_WIDTH: f64 = 0.022;
const BACKGROUND: f64 = 0.15;
const HEART_INTENSITY: f64 = 0.62;
const SPINE_INTENSITY: f64 = 0.95;
pub const DEFAULT_NOISE: f64 = 0.02;

/// Seed-derived nuisance geometry.
struct Hidden {
    spine_start: (f64, f64),
    spine_length: f64,
    spine_tilt: f64,
    axis_ratio: f64,
}

impl PhantomSpec {
    /// `count` specs with scores uniform over `vhs_range` and jittered pose.
    pub fn random_batch(count: usize, size: usize, vhs_range: (f64, f64), seed: u64) -> Vec<PhantomSpec> {
        let mut rng = derived_rng(seed, "phantom-batch", "", 0);
        (0..count)
            .map(|i| PhantomSpec {
                size,
                target_vhs: rng.random_range(vhs_range.0..vhs_range.1),
                center: (0.52 + rng.random_range(-0.04..0.04), 0.60 + rng.random_range(-0.04..0.04)),
                orientation: 0.8 + rng.random_range(-0.15..0.15),
                noise: DEFAULT_NOISE,
                seed: derive_seed(seed, "phantom", "", i as u64),
            })
            .collect()
    }

    fn hidden(&self) -> Hidden {
        let mut rng = derived_rng(self.seed, "phantom-geometry", "", 0);
        let mut u = || rng.random_range(-1.0..1.0);
        Hidden {
            spine_start: (0.17 + 0.03 * u(), 0.18 + 0.03 * u()),
            spine_length: 0.36 * (1.0 + 0.05 * u()),
            spine_tilt: 0.06 * u(),
            axis_ratio: 1.25 + 0.08 * u(),
        }
    }

    fn validate(&self) -> Result<(), PhantomError> {
        if !(self.target_vhs.is_finite() && self.target_vhs > 0.0) {
            return Err(PhantomError::TargetVhs(self.target_vhs));
        }
        if self.size < 8 {
            return Err(PhantomError::Size(self.size));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(PhantomError::Noise(self.noise));
        }
        Ok(())
    }

    /// Ground-truth keypoints; `calc_vhs` of the result equals `target_vhs`.
    pub fn keypoints(&self) -> Result<KeypointSet, PhantomError> {
        self.validate()?;
        let h = self.hidden();
        let e = Keypoint::new(h.spine_start.0, h.spine_start.1);
        let f = Keypoint::new(
            e.x + h.spine_length * h.spine_tilt.cos(),
            e.y + h.spine_length * h.spine_tilt.sin(),
        );
        // |AB| + |CD| = vhs * |EF| / 6, split by the axis ratio
        let heart = self.target_vhs * h.spine_length / VHS_FACTOR;
        let long = heart * h.axis_ratio / (1.0 + h.axis_ratio);
        let short = heart - long;
        let (ux, uy) = (self.orientation.cos(), self.orientation.sin());
        let (vx, vy) = (-uy, ux);
        let (cx, cy) = self.center;
        let a = Keypoint::new(cx - 0.5 * long * ux, cy - 0.5 * long * uy);
        let b = Keypoint::new(cx + 0.5 * long * ux, cy + 0.5 * long * uy);
        let c = Keypoint::new(cx - 0.5 * short * vx, cy - 0.5 * short * vy);
        let d = Keypoint::new(cx + 0.5 * short * vx, cy + 0.5 * short * vy);
        let set = KeypointSet::from_points([a, b, c, d, e, f]);
        for (name, p) in crate::vhs::KEYPOINT_NAMES.iter().zip(set.points()) {
            if !p.is_normalized() {
                return Err(PhantomError::OutOfFrame(*name));
            }
        }
        Ok(set)
    }

    pub fn render(&self) -> Result<(Image, KeypointSet), PhantomError> {
        let kp = self.keypoints()?;
        let n = self.size;
        let px = n as f64;
        let long_half = 0.5 * (kp.b.x - kp.a.x).hypot(kp.b.y - kp.a.y);
        let short_half = 0.5 * (kp.d.x - kp.c.x).hypot(kp.d.y - kp.c.y);
        let (ux, uy) = (self.orientation.cos(), self.orientation.sin());
        let (ex, ey) = (kp.e.x, kp.e.y);
        let spine_len = (kp.f.x - ex).hypot(kp.f.y - ey);
        let (sx, sy) = ((kp.f.x - ex) / spine_len, (kp.f.y - ey) / spine_len);

        let mut rng = derived_rng(self.seed, "phantom-noise", "", 0);
        let normal = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("valid std dev");
        let mut pixels = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                let x = (col as f64 + 0.5) / px;
                let y = (row as f64 + 0.5) / px;
                let mut v = BACKGROUND + 0.08 * y;

                // heart: signed distance to the ellipse boundary along the ray
                // from the center, in pixels, feeds a one-pixel soft edge
                let (dx, dy) = (x - self.center.0, y - self.center.1);
                let (lu, lv) = (dx * ux + dy * uy, -dx * uy + dy * ux);
                let r = lu.hypot(lv);
                let boundary = if r > 0.0 {
                    let (cu, cv) = (lu / r, lv / r);
                    1.0 / ((cu / long_half).powi(2) + (cv / short_half).powi(2)).sqrt()
                } else {
                    long_half
                };
                let heart_alpha = (0.5 - (r - boundary) * px).clamp(0.0, 1.0);
                v += heart_alpha * (HEART_INTENSITY - v);

                // spine: a flat-ended bar from E to F
                let (qx, qy) = (x - ex, y - ey);
                let along = qx * sx + qy * sy;
                let across = (-qx * sy + qy * sx).abs();
                let outside = (across - SPINE_HALF_WIDTH).max(-along).max(along - spine_len);
                let spine_alpha = (0.5 - outside * px).clamp(0.0, 1.0);
                v += spine_alpha * (SPINE_INTENSITY - v);

                if self.noise > 0.0 {
                    v += normal.sample(&mut rng);
                }
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Ok((Image::new(n, n, pixels), kp))
    }
}

/// Renders every spec into a labeled, phantom-provenance dataset. Ids are
/// `phantom-00000`, `phantom-00001`, ... and all samples start in the train
/// split.
pub fn generate_phantoms(name: &str, specs: &[PhantomSpec]) -> Result<Dataset, PhantomError> {
    let mut ds = Dataset::new(name);
    for (i, spec) in specs.iter().enumerate() {
        let (image, label) = spec.render()?;
        ds.samples.push(Sample {
            id: format!("phantom-{i:05}"),
            image,
            label: Some(label),
            provenance: Provenance::Phantom,
            split: Split::Train,
            annotator: Some("phantom".into()),
            annotated_at: None,
        });
    }
    Ok(ds)
}
