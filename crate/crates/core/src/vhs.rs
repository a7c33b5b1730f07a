//! Keypoint geometry, the vertebral heart score, and the three-class diagnosis.
//!
//! Six landmarks describe a lateral thoracic radiograph:
//!
//! * `A`, `B`: endpoints of the heart's long axis (carina to apex),
//! * `C`, `D`: endpoints of the short axis, perpendicular to the long axis at
//!   its widest point,
//! * `E`, `F`: the vertebral segment starting at T4.
//!
//! The score is `6 * (|AB| + |CD|) / |EF|`. Coordinates are normalized by
//! image width and height, which makes the score resolution-independent.
//!
//! Everything here is pure and thread-safe.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scale factor applied to the axis/vertebra ratio.
pub const VHS_FACTOR: f64 = 6.0;

/// Scores strictly below this are [`HeartClass::Small`].
pub const SMALL_UPPER_BOUND: f64 = 8.2;

/// Scores strictly above this are [`HeartClass::Large`].
pub const NORMAL_UPPER_BOUND: f64 = 10.0;

/// Minimum vertebral segment length, in normalized units, that the score will
/// divide by.
pub const EF_EPSILON: f64 = 1e-6;

/// Number of regression outputs: six points times two coordinates.
pub const OUTPUT_DIM: usize = 12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-finite keypoint coordinate")]
    NonFinite,
    #[error("degenerate vertebral segment: |EF| = {length:e} is not above {EF_EPSILON:e}")]
    DegenerateVertebra { length: f64 },
    #[error("invalid heart score {0}")]
    InvalidScore(f64),
    #[error("expected {OUTPUT_DIM} coordinates, got {0}")]
    WrongLength(usize),
    #[error("keypoint {name} = ({x}, {y}) lies outside the unit square")]
    OutOfRange { name: char, x: f64, y: f64 },
}

/// A point in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
}

impl Keypoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Keypoint { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn is_normalized(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }

    pub fn clamped(&self) -> Self {
        Keypoint::new(self.x.clamp(0.0, 1.0), self.y.clamp(0.0, 1.0))
    }
}

/// The six landmarks, in `A, B, C, D, E, F` order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KeypointSet {
    pub a: Keypoint,
    pub b: Keypoint,
    pub c: Keypoint,
    pub d: Keypoint,
    pub e: Keypoint,
    pub f: Keypoint,
}

pub const KEYPOINT_NAMES: [char; 6] = ['A', 'B', 'C', 'D', 'E', 'F'];

impl KeypointSet {
    pub fn from_points(points: [Keypoint; 6]) -> Self {
        let [a, b, c, d, e, f] = points;
        KeypointSet { a, b, c, d, e, f }
    }

    pub fn points(&self) -> [Keypoint; 6] {
        [self.a, self.b, self.c, self.d, self.e, self.f]
    }

    /// Flattens to `Ax, Ay, Bx, By, ..., Fy`.
    pub fn to_array(&self) -> [f64; OUTPUT_DIM] {
        let mut out = [0.0; OUTPUT_DIM];
        for (i, p) in self.points().iter().enumerate() {
            out[2 * i] = p.x;
            out[2 * i + 1] = p.y;
        }
        out
    }

    pub fn from_array(values: &[f64; OUTPUT_DIM]) -> Self {
        let mut pts = [Keypoint::default(); 6];
        for (i, p) in pts.iter_mut().enumerate() {
            *p = Keypoint::new(values[2 * i], values[2 * i + 1]);
        }
        KeypointSet::from_points(pts)
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, GeometryError> {
        let arr: &[f64; OUTPUT_DIM] = values
            .try_into()
            .map_err(|_| GeometryError::WrongLength(values.len()))?;
        Ok(Self::from_array(arr))
    }

    pub fn clamped(&self) -> Self {
        KeypointSet::from_points(self.points().map(|p| p.clamped()))
    }

    pub fn map(&self, f: impl Fn(Keypoint) -> Keypoint) -> Self {
        KeypointSet::from_points(self.points().map(f))
    }

    /// Checks the label-ingestion invariant: every coordinate finite and in `[0, 1]`.
    pub fn validate_normalized(&self) -> Result<(), GeometryError> {
        for (name, p) in KEYPOINT_NAMES.iter().zip(self.points()) {
            if !p.is_finite() {
                return Err(GeometryError::NonFinite);
            }
            if !p.is_normalized() {
                return Err(GeometryError::OutOfRange { name: *name, x: p.x, y: p.y });
            }
        }
        Ok(())
    }

    pub fn long_axis(&self) -> Result<f64, GeometryError> {
        distance(self.a, self.b)
    }

    pub fn short_axis(&self) -> Result<f64, GeometryError> {
        distance(self.c, self.d)
    }

    pub fn vertebral_segment(&self) -> Result<f64, GeometryError> {
        distance(self.e, self.f)
    }
}

/// A finite, strictly positive heart score.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct VhsScore(f64);

impl VhsScore {
    pub fn new(value: f64) -> Result<Self, GeometryError> {
        if value.is_finite() && value > 0.0 {
            Ok(VhsScore(value))
        } else {
            Err(GeometryError::InvalidScore(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn class(self) -> HeartClass {
        classify(self)
    }
}

impl TryFrom<f64> for VhsScore {
    type Error = GeometryError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        VhsScore::new(v)
    }
}

impl From<VhsScore> for f64 {
    fn from(v: VhsScore) -> f64 {
        v.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeartClass {
    Small = 0,
    Normal = 1,
    Large = 2,
}

impl HeartClass {
    pub const ALL: [HeartClass; 3] = [HeartClass::Small, HeartClass::Normal, HeartClass::Large];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Classifies a raw score, rejecting non-finite or non-positive values.
    pub fn from_score(value: f64) -> Result<Self, GeometryError> {
        Ok(classify(VhsScore::new(value)?))
    }
}

/// Euclidean distance between two keypoints.
pub fn distance(p: Keypoint, q: Keypoint) -> Result<f64, GeometryError> {
    if !p.is_finite() || !q.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    Ok((p.x - q.x).hypot(p.y - q.y))
}

/// `6 * (|AB| + |CD|) / |EF|`, refusing to divide by a vanishing vertebral segment.
pub fn calc_vhs(k: &KeypointSet) -> Result<VhsScore, GeometryError> {
    let ab = k.long_axis()?;
    let cd = k.short_axis()?;
    let ef = k.vertebral_segment()?;
    if ef <= EF_EPSILON {
        return Err(GeometryError::DegenerateVertebra { length: ef });
    }
    VhsScore::new(VHS_FACTOR * (ab + cd) / ef)
}

/// Both boundaries, 8.2 and 10, belong to the normal class.
pub fn classify(v: VhsScore) -> HeartClass {
    let v = v.value();
    if v < SMALL_UPPER_BOUND {
        HeartClass::Small
    } else if v <= NORMAL_UPPER_BOUND {
        HeartClass::Normal
    } else {
        HeartClass::Large
    }
}

/// Score and its gradient with respect to the flattened 12 coordinates.
///
/// The gradient of a zero-length axis is taken as zero.
pub fn vhs_with_gradient(
    coords: &[f64; OUTPUT_DIM],
) -> Result<(f64, [f64; OUTPUT_DIM]), GeometryError> {
    if coords.iter().any(|c| !c.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let seg = |i: usize| {
        let dx = coords[2 * i] - coords[2 * i + 2];
        let dy = coords[2 * i + 1] - coords[2 * i + 3];
        (dx, dy, dx.hypot(dy))
    };
    let (abx, aby, ab) = seg(0);
    let (cdx, cdy, cd) = seg(2);
    let (efx, efy, ef) = seg(4);
    if ef <= EF_EPSILON {
        return Err(GeometryError::DegenerateVertebra { length: ef });
    }
    let heart = ab + cd;
    let vhs = VHS_FACTOR * heart / ef;

    let mut grad = [0.0; OUTPUT_DIM];
    let scale = VHS_FACTOR / ef;
    for (start, dx, dy, len) in [(0, abx, aby, ab), (4, cdx, cdy, cd)] {
        if len > 0.0 {
            let (ux, uy) = (dx / len, dy / len);
            grad[start] = scale * ux;
            grad[start + 1] = scale * uy;
            grad[start + 2] = -scale * ux;
            grad[start + 3] = -scale * uy;
        }
    }
    // d/dEF of heart/EF
    let k = -VHS_FACTOR * heart / (ef * ef);
    let (ux, uy) = (efx / ef, efy / ef);
    grad[8] = k * ux;
    grad[9] = k * uy;
    grad[10] = -k * ux;
    grad[11] = -k * uy;
    Ok((vhs, grad))
}
