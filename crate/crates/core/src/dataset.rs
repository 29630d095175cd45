//! Labeled fundus-image manifests and deterministic stratified splits.
//!
//! A manifest is an ordered list of `(image_path, label, split)` records.
//! Record order is the ingestion order and is never changed by any operation
//! here, so every seeded operation downstream is reproducible.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed::{derive_seed, seeded_rng};

/// Number of severity grades.
pub const NUM_CLASSES: usize = 5;

/// Retinopathy severity grade.
///
/// The discriminant is the canonical class index, which follows the
/// alphabetical order of the class names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GradeLabel {
    #[serde(rename = "Mild DR")]
    MildDR = 0,
    #[serde(rename = "Moderate DR")]
    ModerateDR = 1,
    #[serde(rename = "No DR")]
    NoDR = 2,
    #[serde(rename = "Proliferate DR")]
    ProliferateDR = 3,
    #[serde(rename = "Severe DR")]
    SevereDR = 4,
}

impl GradeLabel {
    pub const ALL: [GradeLabel; NUM_CLASSES] = [
        GradeLabel::MildDR,
        GradeLabel::ModerateDR,
        GradeLabel::NoDR,
        GradeLabel::ProliferateDR,
        GradeLabel::SevereDR,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<GradeLabel> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            GradeLabel::MildDR => "Mild DR",
            GradeLabel::ModerateDR => "Moderate DR",
            GradeLabel::NoDR => "No DR",
            GradeLabel::ProliferateDR => "Proliferate DR",
            GradeLabel::SevereDR => "Severe DR",
        }
    }

    pub fn class_names() -> Vec<String> {
        Self::ALL.iter().map(|l| l.name().to_string()).collect()
    }
}

impl fmt::Display for GradeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradeLabel {
    type Err = DatasetError;

    /// Case-sensitive match against the five canonical names.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| DatasetError::UnknownLabel(s.to_string()))
    }
}

/// Split assignment of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Unassigned => "unassigned",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "unassigned" | "" => Ok(Split::Unassigned),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Which records `class_distribution` and `DatasetManifest::view` select.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSelector {
    All,
    Only(Split),
}

impl SplitSelector {
    fn matches(self, split: Split) -> bool {
        match self {
            SplitSelector::All => true,
            SplitSelector::Only(s) => s == split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_path: PathBuf,
    pub label: GradeLabel,
    pub split: Split,
}

/// Input layout accepted by [`load_manifest`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifestFormat {
    Csv,
    DirectoryTree,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("malformed manifest row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("manifest contains no records")]
    EmptyManifest,
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    DegenerateFraction(f64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl DatasetError {
    fn io(path: &Path, source: io::Error) -> Self {
        DatasetError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub class_names: Vec<String>,
    pub source_id: String,
}

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>, source_id: impl Into<String>) -> Self {
        DatasetManifest { records, class_names: GradeLabel::class_names(), source_id: source_id.into() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of the selected split, in manifest order.
    pub fn view(&self, selector: SplitSelector) -> Vec<&ImageRecord> {
        self.records.iter().filter(|r| selector.matches(r.split)).collect()
    }

    /// Sub-manifest holding only the selected records.
    pub fn subset(&self, selector: SplitSelector) -> DatasetManifest {
        DatasetManifest {
            records: self.view(selector).into_iter().cloned().collect(),
            class_names: self.class_names.clone(),
            source_id: self.source_id.clone(),
        }
    }

    /// SHA-256 over the ordered `(path, label)` pairs. Split assignments are
    /// excluded so a manifest and its split share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for r in &self.records {
            hasher.update(r.image_path.to_string_lossy().as_bytes());
            hasher.update([0u8]);
            hasher.update(r.label.name().as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// Persist as CSV with header `image_path,label,split`.
    pub fn write_split_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        writer.write_record(["image_path", "label", "split"]).map_err(|e| csv_io(path, e))?;
        for r in &self.records {
            writer
                .write_record([&*r.image_path.to_string_lossy(), r.label.name(), r.split.as_str()])
                .map_err(|e| csv_io(path, e))?;
        }
        writer.flush().map_err(|e| DatasetError::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> DatasetError {
    DatasetError::io(path, io::Error::other(e))
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Read a manifest from a CSV file (`image_path,label[,split]`) or from a
/// directory with one sub-folder per class name.
///
/// Without a `split` column every record is `Unassigned`.
pub fn load_manifest(path: &Path, format: ManifestFormat) -> Result<DatasetManifest, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingPath(path.to_path_buf()));
    }
    let records = match format {
        ManifestFormat::Csv => read_csv_records(path)?,
        ManifestFormat::DirectoryTree => read_tree_records(path)?,
    };
    if records.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    Ok(DatasetManifest::new(records, path.to_string_lossy()))
}

fn read_csv_records(path: &Path) -> Result<Vec<ImageRecord>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers = reader.headers().map_err(|e| malformed(1, e))?.clone();
    let has_split = match headers.iter().collect::<Vec<_>>().as_slice() {
        ["image_path", "label"] => false,
        ["image_path", "label", "split"] => true,
        other => {
            return Err(DatasetError::MalformedRow {
                line: 1,
                reason: format!("expected header `image_path,label`, found `{}`", other.join(",")),
            })
        }
    };
    let expected = if has_split { 3 } else { 2 };

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            malformed(line, e)
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != expected {
            return Err(DatasetError::MalformedRow {
                line,
                reason: format!("expected {expected} fields, found {}", row.len()),
            });
        }
        let image_path = row[0].trim();
        if image_path.is_empty() {
            return Err(DatasetError::MalformedRow { line, reason: "empty image_path".into() });
        }
        let label: GradeLabel = row[1].parse()?;
        let split = if has_split {
            row[2].parse().map_err(|reason| DatasetError::MalformedRow { line, reason })?
        } else {
            Split::Unassigned
        };
        records.push(ImageRecord { image_path: PathBuf::from(image_path), label, split });
    }
    Ok(records)
}

fn malformed(line: u64, e: csv::Error) -> DatasetError {
    DatasetError::MalformedRow { line, reason: e.to_string() }
}

/// Folders are visited in canonical class order and files sorted by name, so
/// ingestion order does not depend on the filesystem's listing order.
fn read_tree_records(root: &Path) -> Result<Vec<ImageRecord>, DatasetError> {
    let mut by_class: BTreeMap<GradeLabel, Vec<PathBuf>> = BTreeMap::new();
    for entry in fs::read_dir(root).map_err(|e| DatasetError::io(root, e))? {
        let entry = entry.map_err(|e| DatasetError::io(root, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let label: GradeLabel = name.parse()?;
        let mut files = Vec::new();
        let dir = entry.path();
        for file in fs::read_dir(&dir).map_err(|e| DatasetError::io(&dir, e))? {
            let file = file.map_err(|e| DatasetError::io(&dir, e))?.path();
            let is_image = file
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false);
            if file.is_file() && is_image {
                files.push(PathBuf::from(&name).join(file.file_name().expect("file has a name")));
            }
        }
        files.sort();
        by_class.insert(label, files);
    }
    Ok(by_class
        .into_iter()
        .flat_map(|(label, files)| {
            files.into_iter().map(move |image_path| ImageRecord { image_path, label, split: Split::Unassigned })
        })
        .collect())
}

/// `⌊n · fraction⌉` with halves rounded up.
pub fn train_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + 0.5).floor() as usize
}

/// Seeded Fisher-Yates over `0..n`.
pub(crate) fn seeded_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Assign every record to train or validation, class by class.
///
/// Within each class the member records are permuted with a generator seeded
/// from `(seed, class index)`; the first `⌊n_c · fraction⌉` members of the
/// permutation go to train and the rest to validation. Previous assignments
/// are discarded.
pub fn stratified_split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    if manifest.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::DegenerateFraction(train_fraction));
    }
    let mut out = manifest.clone();
    for label in GradeLabel::ALL {
        let members: Vec<usize> =
            out.records.iter().enumerate().filter(|(_, r)| r.label == label).map(|(i, _)| i).collect();
        let mut rng = seeded_rng(derive_seed(seed, &[label.index() as u64]));
        let order = seeded_permutation(members.len(), &mut rng);
        let n_train = train_count(members.len(), train_fraction);
        for (rank, &pos) in order.iter().enumerate() {
            out.records[members[pos]].split = if rank < n_train { Split::Train } else { Split::Validation };
        }
    }
    Ok(out)
}

/// Per-class record counts for the selected split; every grade is present,
/// with zero where the split has no records of that grade.
pub fn class_distribution(manifest: &DatasetManifest, selector: SplitSelector) -> BTreeMap<GradeLabel, usize> {
    let mut counts: BTreeMap<GradeLabel, usize> = GradeLabel::ALL.iter().map(|&l| (l, 0)).collect();
    for r in manifest.view(selector) {
        *counts.get_mut(&r.label).expect("all labels present") += 1;
    }
    counts
}

/// Writes a small class-coloured PNG corpus plus `manifest.csv` under `dir`
/// and returns the manifest path. Each grade has its own base colour and
/// every pixel carries seeded noise, so the classes are separable but no two
/// images are equal. Meant for demos and end-to-end tests.
pub fn write_synthetic_corpus(dir: &Path, per_class: usize, side: u32, seed: u64) -> Result<PathBuf, DatasetError> {
    const BASE: [[u8; 3]; NUM_CLASSES] = [[200, 60, 60], [60, 200, 60], [60, 60, 200], [200, 200, 60], [60, 200, 200]];
    let mut records = Vec::new();
    for label in GradeLabel::ALL {
        let class_dir = dir.join(label.name());
        fs::create_dir_all(&class_dir).map_err(|e| DatasetError::io(&class_dir, e))?;
        for i in 0..per_class {
            let mut rng = seeded_rng(derive_seed(seed, &[label.index() as u64, i as u64]));
            let base = BASE[label.index()];
            let img = image::RgbImage::from_fn(side, side, |_, _| {
                image::Rgb(base.map(|c| c.saturating_add(rng.gen_range(0..40)).saturating_sub(20)))
            });
            let rel = PathBuf::from(label.name()).join(format!("{i:04}.png"));
            let path = dir.join(&rel);
            img.save(&path)
                .map_err(|e| DatasetError::io(&path, io::Error::other(e)))?;
            records.push(ImageRecord { image_path: rel, label, split: Split::Unassigned });
        }
    }
    let manifest_path = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest_path).map_err(|e| csv_io(&manifest_path, e))?;
    writer.write_record(["image_path", "label"]).map_err(|e| csv_io(&manifest_path, e))?;
    for r in &records {
        writer
            .write_record([&*r.image_path.to_string_lossy(), r.label.name()])
            .map_err(|e| csv_io(&manifest_path, e))?;
    }
    writer.flush().map_err(|e| DatasetError::io(&manifest_path, e))?;
    Ok(manifest_path)
}
