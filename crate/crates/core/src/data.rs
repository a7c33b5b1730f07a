//! Datasets, the on-disk annotation format, and stratified splitting.
//!
//! A dataset directory looks like
//!
//! ```text
//! <root>/manifest.json       name, format version, per-sample split/provenance
//! <root>/annotations.jsonl   one AnnotationRecord per line
//! <root>/images/<id>.png     8-bit grayscale
//! ```
//!
//! Images found under `images/` but absent from the manifest are admitted as
//! unlabeled samples.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::model::Image;
use crate::rng::derived_rng;
use crate::vhs::{calc_vhs, GeometryError, HeartClass, Keypoint, KeypointSet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Recorded scores must agree with the points to this tolerance.
pub const RECORDED_VHS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("{file}:{line}: {message}{}", sample.as_ref().map(|s| format!(" (sample {s})")).unwrap_or_default())]
    Parse { file: String, line: usize, sample: Option<String>, message: String },
    #[error("dataset failed validation: {}", issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid { issues: Vec<Issue> },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("sample {0} has no label")]
    Unlabeled(String),
    #[error("unknown sample {0}")]
    UnknownSample(String),
    #[error("config error: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Human,
    Pseudo,
    Phantom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
    Unlabeled,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "valid" | "validation" => Some(Split::Valid),
            "test" => Some(Split::Test),
            "unlabeled" => Some(Split::Unlabeled),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: Option<KeypointSet>,
    pub provenance: Provenance,
    pub split: Split,
    pub annotator: Option<String>,
    pub annotated_at: Option<String>,
}

impl Sample {
    pub fn image_path(&self, root: &Path) -> PathBuf {
        root.join(IMAGES_DIR).join(format!("{}.png", self.id))
    }

    pub fn heart_class(&self) -> Option<HeartClass> {
        self.label.and_then(|l| calc_vhs(&l).ok()).map(|v| v.class())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>) -> Self {
        Dataset { name: name.into(), samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Sample> {
        self.samples.iter_mut().find(|s| s.id == id)
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.split).or_insert(0) += 1;
        }
        counts
    }

    /// Checks the dataset-level invariants and returns every violation.
    pub fn validate(&self) -> Vec<Issue> {
        let mut issues = Vec::new();
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                issues.push(Issue::new(&s.id, "duplicate sample id"));
            }
            if matches!(s.split, Split::Valid | Split::Test) && s.label.is_none() {
                issues.push(Issue::new(&s.id, format!("{} samples must be labeled", s.split)));
            }
            if s.provenance == Provenance::Pseudo && s.split != Split::Train {
                issues.push(Issue::new(&s.id, "pseudo labels are only allowed in the train split"));
            }
            if let Some(label) = &s.label {
                if let Err(e) = label.validate_normalized() {
                    issues.push(Issue::new(&s.id, e.to_string()));
                }
            }
        }
        issues
    }
}

/// One validation problem, tied to a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub sample: String,
    pub message: String,
}

impl Issue {
    pub fn new(sample: &str, message: impl Into<String>) -> Self {
        Issue { sample: sample.to_string(), message: message.into() }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.sample, self.message)
    }
}

/// One line of `annotations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    /// `[x, y]` pairs in A, B, C, D, E, F order.
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vhs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    /// Only present on exported pseudo labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
}

impl AnnotationRecord {
    pub fn from_label(id: &str, label: &KeypointSet) -> Self {
        AnnotationRecord {
            id: id.to_string(),
            points: label.points().iter().map(|p| [p.x, p.y]).collect(),
            vhs: calc_vhs(label).ok().map(|v| v.value()),
            annotator: None,
            timestamp: None,
            provenance: None,
            max_sigma: None,
            round: None,
        }
    }

    pub fn keypoints(&self) -> Result<KeypointSet, String> {
        let points: [[f64; 2]; 6] = self
            .points
            .as_slice()
            .try_into()
            .map_err(|_| format!("expected 6 points, found {}", self.points.len()))?;
        Ok(KeypointSet::from_points(points.map(|[x, y]| Keypoint::new(x, y))))
    }

    /// Coordinates in range and, when a score is recorded, agreement with the points.
    pub fn validate(&self) -> Result<KeypointSet, String> {
        let label = self.keypoints()?;
        label.validate_normalized().map_err(|e| e.to_string())?;
        if let Some(recorded) = self.vhs {
            let computed = calc_vhs(&label).map_err(|e| e.to_string())?.value();
            if (computed - recorded).abs() > RECORDED_VHS_TOLERANCE {
                return Err(format!("recorded vhs {recorded} disagrees with points ({computed})"));
            }
        }
        Ok(label)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Parses `annotations.jsonl` content; blank lines are ignored.
pub fn parse_annotations(text: &str, file: &str) -> Result<Vec<(usize, AnnotationRecord)>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(line).map_err(|e| DataError::Parse {
            file: file.to_string(),
            line: line_no,
            sample: serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|id| id.as_str()).map(str::to_string)),
            message: e.to_string(),
        })?;
        if let Err(message) = record.keypoints() {
            return Err(DataError::Parse { file: file.to_string(), line: line_no, sample: Some(record.id), message });
        }
        out.push((line_no, record));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub format_version: u32,
    pub samples: Vec<ManifestEntry>,
}

/// Outcome of a lenient load.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub discovered: usize,
    pub loaded: usize,
    pub rejected: Vec<Issue>,
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<Image, DataError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| DataError::Image { path: path.to_path_buf(), message: e.to_string() })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Image::new(w as usize, h as usize, img.into_raw()))
}

pub fn encode_png(image: &Image) -> Vec<u8> {
    let buf = image::GrayImage::from_raw(image.width as u32, image.height as u32, image.pixels.clone())
        .expect("buffer matches dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).expect("png encoding into memory");
    out.into_inner()
}

/// Strict load: any violation fails the whole load.
pub fn load_dataset(root: &Path) -> Result<Dataset, DataError> {
    let (dataset, report) = load_dataset_with_report(root)?;
    if report.rejected.is_empty() {
        Ok(dataset)
    } else {
        Err(DataError::Invalid { issues: report.rejected })
    }
}

/// Lenient load: invalid samples are dropped and listed in the report, so
/// `loaded + rejected == discovered`. Malformed annotation lines still fail
/// the load.
pub fn load_dataset_with_report(root: &Path) -> Result<(Dataset, LoadReport), DataError> {
    if !root.is_dir() {
        return Err(DataError::MissingRoot(root.to_path_buf()));
    }
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest: Manifest = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        serde_json::from_str(&text).map_err(|e| DataError::Parse {
            file: MANIFEST_FILE.into(),
            line: e.line(),
            sample: None,
            message: e.to_string(),
        })?
    } else {
        Manifest { name: dir_name(root), format_version: DATASET_FORMAT_VERSION, samples: Vec::new() }
    };
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(DataError::Parse {
            file: MANIFEST_FILE.into(),
            line: 1,
            sample: None,
            message: format!("unsupported format_version {}", manifest.format_version),
        });
    }

    let ann_path = root.join(ANNOTATIONS_FILE);
    let records = if ann_path.exists() {
        parse_annotations(&fs::read_to_string(&ann_path).map_err(io_err(&ann_path))?, ANNOTATIONS_FILE)?
    } else {
        Vec::new()
    };

    let image_dir = root.join(IMAGES_DIR);
    let mut image_files: BTreeMap<String, PathBuf> = BTreeMap::new();
    if image_dir.is_dir() {
        for entry in fs::read_dir(&image_dir).map_err(io_err(&image_dir))? {
            let path = entry.map_err(io_err(&image_dir))?.path();
            if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    image_files.insert(stem.to_string(), path);
                }
            }
        }
    }

    let mut rejected: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut reject = |id: &str, msg: String| rejected.entry(id.to_string()).or_default().push(msg);

    let mut annotations: HashMap<&str, &AnnotationRecord> = HashMap::new();
    for (line, rec) in &records {
        if annotations.insert(rec.id.as_str(), rec).is_some() {
            reject(&rec.id, format!("duplicate annotation (line {line})"));
        }
    }

    // manifest order first, then unlisted images in id order
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut listed = BTreeSet::new();
    for entry in &manifest.samples {
        if !listed.insert(entry.id.clone()) {
            reject(&entry.id, "duplicate manifest entry".into());
            continue;
        }
        entries.push(entry.clone());
    }
    for id in image_files.keys() {
        if !listed.contains(id) {
            entries.push(ManifestEntry { id: id.clone(), split: Split::Unlabeled, provenance: Provenance::Human });
        }
    }
    for rec in annotations.keys() {
        if !listed.contains(*rec) && !image_files.contains_key(*rec) {
            reject(rec, "annotation refers to an unknown sample".into());
        }
    }

    let mut dataset = Dataset::new(manifest.name.clone());
    for entry in entries {
        let Some(path) = image_files.get(&entry.id) else {
            reject(&entry.id, "image file missing".into());
            continue;
        };
        let bytes = fs::read(path).map_err(io_err(path))?;
        let image = match decode_png(&bytes, path) {
            Ok(img) => img,
            Err(e) => {
                reject(&entry.id, e.to_string());
                continue;
            }
        };
        let record = annotations.get(entry.id.as_str()).copied();
        let label = match record.map(AnnotationRecord::validate) {
            None => None,
            Some(Ok(label)) => Some(label),
            Some(Err(msg)) => {
                reject(&entry.id, msg);
                continue;
            }
        };
        let sample = Sample {
            id: entry.id.clone(),
            image,
            label,
            provenance: entry.provenance,
            split: entry.split,
            annotator: record.and_then(|r| r.annotator.clone()),
            annotated_at: record.and_then(|r| r.timestamp.clone()),
        };
        dataset.samples.push(sample);
    }
    for issue in dataset.validate() {
        reject(&issue.sample, issue.message);
    }
    dataset.samples.retain(|s| !rejected.contains_key(&s.id));

    let rejected: Vec<Issue> = rejected
        .into_iter()
        .map(|(sample, msgs)| Issue { sample, message: msgs.join("; ") })
        .collect();
    let report = LoadReport { discovered: image_files.len(), loaded: dataset.len(), rejected };
    Ok((dataset, report))
}

fn dir_name(root: &Path) -> String {
    root.file_name().and_then(|n| n.to_str()).unwrap_or("dataset").to_string()
}

pub fn manifest_of(dataset: &Dataset) -> Manifest {
    Manifest {
        name: dataset.name.clone(),
        format_version: DATASET_FORMAT_VERSION,
        samples: dataset
            .samples
            .iter()
            .map(|s| ManifestEntry { id: s.id.clone(), split: s.split, provenance: s.provenance })
            .collect(),
    }
}

pub fn record_of(sample: &Sample) -> Option<AnnotationRecord> {
    let label = sample.label.as_ref()?;
    let mut rec = AnnotationRecord::from_label(&sample.id, label);
    rec.annotator = sample.annotator.clone();
    rec.timestamp = sample.annotated_at.clone();
    Some(rec)
}

pub fn annotations_text(dataset: &Dataset) -> String {
    let mut text = String::new();
    for rec in dataset.samples.iter().filter_map(record_of) {
        text.push_str(&rec.to_line());
        text.push('\n');
    }
    text
}

/// Writes manifest, annotations and images. Existing images are overwritten.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<(), DataError> {
    let issues = dataset.validate();
    if !issues.is_empty() {
        return Err(DataError::Invalid { issues });
    }
    let images = root.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    for s in &dataset.samples {
        let path = s.image_path(root);
        write_atomic(&path, &encode_png(&s.image)).map_err(io_err(&path))?;
    }
    save_annotations(dataset, root)?;
    save_manifest(dataset, root)
}

pub fn save_manifest(dataset: &Dataset, root: &Path) -> Result<(), DataError> {
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest_of(dataset)).expect("manifest serializes");
    write_atomic(&path, &json).map_err(io_err(&path))
}

pub fn save_annotations(dataset: &Dataset, root: &Path) -> Result<(), DataError> {
    let path = root.join(ANNOTATIONS_FILE);
    write_atomic(&path, annotations_text(dataset).as_bytes()).map_err(io_err(&path))
}

/// Assigns labeled, non-pseudo samples to train/valid/test.
///
/// Samples are grouped by heart class and shuffled within each class using
/// `seed`. Per-class counts are rounded so that every (class, split) cell is
/// within one sample of its exact proportional share while split totals match
/// the largest-remainder rounding of `fractions * n`. Unlabeled and pseudo
/// samples keep their split.
pub fn split_dataset(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Dataset, DataError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut by_class: [Vec<usize>; 3] = Default::default();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.label.is_none() || s.provenance == Provenance::Pseudo {
            continue;
        }
        let class = s
            .heart_class()
            .ok_or_else(|| DataError::Config(format!("sample {} has degenerate label geometry", s.id)))?;
        by_class[class.index()].push(i);
    }
    let n: usize = by_class.iter().map(Vec::len).sum();
    let class_sizes = [by_class[0].len(), by_class[1].len(), by_class[2].len()];
    let counts = stratified_counts(class_sizes, fractions);
    for (s, &f) in fractions.iter().enumerate() {
        let total: usize = counts.iter().map(|row| row[s]).sum();
        if f > 0.0 && total == 0 {
            return Err(DataError::Config(format!(
                "split {} would be empty ({n} labeled samples, fraction {f})",
                [Split::Train, Split::Valid, Split::Test][s]
            )));
        }
    }

    let mut out = dataset.clone();
    let splits = [Split::Train, Split::Valid, Split::Test];
    for (class, members) in by_class.iter().enumerate() {
        let mut order: Vec<usize> = members.clone();
        order.sort_by(|a, b| dataset.samples[*a].id.cmp(&dataset.samples[*b].id));
        order.shuffle(&mut derived_rng(seed, "split", "", class as u64));
        let mut cursor = 0;
        for (s, split) in splits.iter().enumerate() {
            for &idx in &order[cursor..cursor + counts[class][s]] {
                out.samples[idx].split = *split;
            }
            cursor += counts[class][s];
        }
    }
    Ok(out)
}

/// Largest-remainder apportionment of `n` into parts proportional to `fractions`.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact = fractions.map(|f| f * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &s in order.iter().cycle().take(3 * 3) {
        if left == 0 {
            break;
        }
        if fractions[s] > 0.0 {
            counts[s] += 1;
            left -= 1;
        }
    }
    counts
}

/// Controlled rounding of the 3x3 class/split table: every cell is the floor
/// or ceiling of its exact value, row sums are the class sizes, and column
/// sums are the apportioned split totals.
fn stratified_counts(class_sizes: [usize; 3], fractions: [f64; 3]) -> [[usize; 3]; 3] {
    let n: usize = class_sizes.iter().sum();
    let totals = apportion(n, &fractions);
    let exact: [[f64; 3]; 3] = class_sizes.map(|c| fractions.map(|f| f * c as f64));
    let floors: [[usize; 3]; 3] = exact.map(|row| row.map(|e| e.floor() as usize));
    let row_need: [usize; 3] = std::array::from_fn(|c| class_sizes[c] - floors[c].iter().sum::<usize>());
    let col_need: [isize; 3] =
        std::array::from_fn(|s| totals[s] as isize - (0..3).map(|c| floors[c][s] as isize).sum::<isize>());

    // Enumerate the 2^9 zero/one increment patterns; keep the feasible one
    // that adds the most fractional mass.
    let mut best: Option<(f64, u32)> = None;
    for pattern in 0u32..512 {
        let bit = |c: usize, s: usize| (pattern >> (3 * c + s)) & 1;
        let rows_ok = (0..3).all(|c| (0..3).map(|s| bit(c, s) as usize).sum::<usize>() == row_need[c]);
        let cols_ok = (0..3).all(|s| (0..3).map(|c| bit(c, s) as isize).sum::<isize>() == col_need[s]);
        let cells_ok = (0..3).all(|c| (0..3).all(|s| bit(c, s) == 0 || fractions[s] > 0.0));
        if !(rows_ok && cols_ok && cells_ok) {
            continue;
        }
        let mass: f64 = (0..3)
            .flat_map(|c| (0..3).map(move |s| (c, s)))
            .filter(|&(c, s)| bit(c, s) == 1)
            .map(|(c, s)| exact[c][s] - exact[c][s].floor())
            .sum();
        if best.is_none_or(|(m, _)| mass > m + 1e-12) {
            best = Some((mass, pattern));
        }
    }
    let pattern = best.map(|(_, p)| p).unwrap_or_else(|| {
        // Feasibility is guaranteed for consistent margins; fall back to row-wise rounding.
        let mut p = 0;
        for (c, &row) in row_need.iter().enumerate() {
            let mut need = row;
            for (s, &f) in fractions.iter().enumerate() {
                if need > 0 && f > 0.0 {
                    p |= 1 << (3 * c + s);
                    need -= 1;
                }
            }
        }
        p
    });
    std::array::from_fn(|c| std::array::from_fn(|s| floors[c][s] + ((pattern >> (3 * c + s)) & 1) as usize))
}

/// Labels for heart-class bookkeeping; degenerate geometry is an error.
pub fn label_class(label: &KeypointSet) -> Result<HeartClass, GeometryError> {
    Ok(calc_vhs(label)?.class())
}
