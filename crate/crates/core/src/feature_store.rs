//! Portable feature-vector storage.
//!
//! # AFV1 layout
//!
//! ```text
//! offset  size            field
//! 0       4               magic  b"AFV1"
//! 4       4               dimension  u32 LE
//! 8       8               count      u64 LE
//! 16      count*dim*4     payload    f32 LE, row-major
//! ```
//!
//! Per-row metadata lives in a JSON-lines manifest: one header object
//! (`version`, `dimension`, `count`, `feature_file`, `checksum_alg`,
//! `checksum`) followed by one `{"source", "role", "label"}` object per row.
//! The checksum is SHA-256 over the complete feature file.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed;

pub const MAGIC: [u8; 4] = *b"AFV1";
pub const HEADER_LEN: usize = 16;
pub const MANIFEST_VERSION: u32 = 1;
pub const CHECKSUM_ALG: &str = "sha256";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not an AFV1 file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated feature file: expected {expected} bytes, found {actual}")]
    Truncated { path: PathBuf, expected: u64, actual: u64 },
    #[error("{path}: {extra} unexpected trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: u64 },
    #[error("{path}: checksum mismatch: manifest {expected}, file {actual}")]
    ChecksumMismatch { path: PathBuf, expected: String, actual: String },
    #[error("unsupported checksum algorithm {0:?}")]
    UnsupportedChecksum(String),
    #[error("manifest and feature file disagree: {0}")]
    ManifestMismatch(String),
    #[error("malformed manifest {path} line {line}: {detail}")]
    ManifestParse { path: PathBuf, line: usize, detail: String },
    #[error("row {row}: expected dimension {expected}, found {actual}")]
    DimensionMismatch { row: usize, expected: usize, actual: usize },
    #[error("row {row}, component {component}: non-finite feature value")]
    NonFinite { row: usize, component: usize },
    #[error("row {row}: {detail}")]
    InvalidRecord { row: usize, detail: String },
    #[error("invalid dimension {0}")]
    InvalidDimension(usize),
    #[error("invalid validation fraction {0}, must lie in (0, 1)")]
    InvalidFraction(f64),
    #[error("cannot stratify: {0}")]
    CannotStratify(String),
}

impl StoreError {
    /// Stable machine-readable code, printed by the CLI next to the message.
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::Io { .. } => "io",
            StoreError::BadMagic { .. } => "bad-magic",
            StoreError::Truncated { .. } => "truncated",
            StoreError::TrailingBytes { .. } => "trailing-bytes",
            StoreError::ChecksumMismatch { .. } => "checksum-mismatch",
            StoreError::UnsupportedChecksum(_) => "unsupported-checksum",
            StoreError::ManifestMismatch(_) => "manifest-mismatch",
            StoreError::ManifestParse { .. } => "manifest-parse",
            StoreError::DimensionMismatch { .. } => "dimension-mismatch",
            StoreError::NonFinite { .. } => "non-finite",
            StoreError::InvalidRecord { .. } => "invalid-record",
            StoreError::InvalidDimension(_) => "invalid-dimension",
            StoreError::InvalidFraction(_) => "invalid-fraction",
            StoreError::CannotStratify(_) => "cannot-stratify",
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Labeled,
    Wild,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Labeled => "labeled",
            Role::Wild => "wild",
            Role::Test => "test",
        })
    }
}

/// Binary attribution label: 0 for the target generator, 1 for anything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Target,
    NonTarget,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Target),
            1 => Some(Label::NonTarget),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Target => 0,
            Label::NonTarget => 1,
        }
    }

    /// The BCE target value.
    pub fn as_f64(self) -> f64 {
        f64::from(self.as_u8())
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Target => Label::NonTarget,
            Label::NonTarget => Label::Target,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_u8(v).ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, found {v}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub row_index: usize,
    pub features: Vec<f32>,
    pub source: String,
    pub role: Role,
    pub label: Option<Label>,
}

impl FeatureRecord {
    pub fn new(features: Vec<f32>, source: impl Into<String>, role: Role, label: Option<Label>) -> Self {
        FeatureRecord { row_index: 0, features, source: source.into(), role, label }
    }

    fn check(&self, row: usize, dimension: usize) -> Result<()> {
        if self.features.len() != dimension {
            return Err(StoreError::DimensionMismatch { row, expected: dimension, actual: self.features.len() });
        }
        if let Some(component) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite { row, component });
        }
        match (self.role, self.label) {
            (Role::Wild, Some(_)) => {
                Err(StoreError::InvalidRecord { row, detail: "wild rows must not carry a label".into() })
            }
            (Role::Labeled | Role::Test, None) => {
                Err(StoreError::InvalidRecord { row, detail: format!("{} rows require a label", self.role) })
            }
            _ => Ok(()),
        }
    }
}

/// An in-memory, validated set of feature records sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dimension: usize,
    records: Vec<FeatureRecord>,
}

impl Dataset {
    /// Validates every record and renumbers `row_index` in order.
    pub fn new(dimension: usize, mut records: Vec<FeatureRecord>) -> Result<Self> {
        if dimension == 0 || u32::try_from(dimension).is_err() {
            return Err(StoreError::InvalidDimension(dimension));
        }
        for (row, r) in records.iter_mut().enumerate() {
            r.check(row, dimension)?;
            r.row_index = row;
        }
        Ok(Dataset { dimension, records })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<FeatureRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Rows with the given role, renumbered.
    pub fn with_role(&self, role: Role) -> Dataset {
        self.filter(|r| r.role == role)
    }

    pub fn filter(&self, mut keep: impl FnMut(&FeatureRecord) -> bool) -> Dataset {
        let records = self
            .records
            .iter()
            .filter(|r| keep(r))
            .cloned()
            .enumerate()
            .map(|(i, mut r)| {
                r.row_index = i;
                r
            })
            .collect();
        Dataset { dimension: self.dimension, records }
    }

    /// Distinct source tags in first-appearance order.
    pub fn sources(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.iter().any(|s| s == &r.source) {
                out.push(r.source.clone());
            }
        }
        out
    }

    /// Labels of every row; errors on an unlabeled row.
    pub fn labels(&self) -> Result<Vec<Label>> {
        self.records
            .iter()
            .map(|r| {
                r.label.ok_or_else(|| StoreError::InvalidRecord { row: r.row_index, detail: "missing label".into() })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub dimension: usize,
    pub count: usize,
    pub feature_file: String,
    pub checksum_alg: String,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

/// Pairs one AFV1 file with its per-row metadata.
///
/// `feature_file` is stored as written in the manifest; relative paths are
/// resolved against `base_dir` (the manifest's directory once loaded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dimension: usize,
    pub count: usize,
    pub feature_file: String,
    pub checksum_alg: String,
    pub checksum: String,
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn feature_path(&self) -> PathBuf {
        let p = Path::new(&self.feature_file);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn header(&self) -> ManifestHeader {
        ManifestHeader {
            version: MANIFEST_VERSION,
            dimension: self.dimension,
            count: self.count,
            feature_file: self.feature_file.clone(),
            checksum_alg: self.checksum_alg.clone(),
            checksum: self.checksum.clone(),
        }
    }

    /// Serializes to JSON lines.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header()).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| StoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| StoreError::io(path, e))?;
        let parse_err =
            |line: usize, detail: String| StoreError::ManifestParse { path: path.to_path_buf(), line, detail };
        let mut lines = BufReader::new(file).lines();
        let first =
            lines.next().ok_or_else(|| parse_err(1, "empty manifest".into()))?.map_err(|e| StoreError::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
        if header.version != MANIFEST_VERSION {
            return Err(parse_err(1, format!("unsupported manifest version {}", header.version)));
        }
        let mut records = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| StoreError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
            records.push(rec);
        }
        if records.len() != header.count {
            return Err(StoreError::ManifestMismatch(format!(
                "header declares {} rows but manifest lists {} records",
                header.count,
                records.len()
            )));
        }
        Ok(DatasetManifest {
            dimension: header.dimension,
            count: header.count,
            feature_file: header.feature_file,
            checksum_alg: header.checksum_alg,
            checksum: header.checksum,
            records,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode(records: &[FeatureRecord], dimension: usize) -> Result<Vec<u8>> {
    let dim32 = u32::try_from(dimension).map_err(|_| StoreError::InvalidDimension(dimension))?;
    if dimension == 0 {
        return Err(StoreError::InvalidDimension(dimension));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + records.len() * dimension * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&dim32.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (row, r) in records.iter().enumerate() {
        r.check(row, dimension)?;
        for v in &r.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Writes records to `path` in AFV1 layout and returns the matching manifest.
///
/// The manifest's `feature_file` is the bare file name and its `base_dir`
/// the parent directory, so saving it beside the feature file keeps it portable.
pub fn write_feature_file(records: &[FeatureRecord], dimension: usize, path: &Path) -> Result<DatasetManifest> {
    let bytes = encode(records, dimension)?;
    {
        let file = fs::File::create(path).map_err(|e| StoreError::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| StoreError::io(path, e))?;
        w.flush().map_err(|e| StoreError::io(path, e))?;
    }
    let feature_file = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(DatasetManifest {
        dimension,
        count: records.len(),
        feature_file,
        checksum_alg: CHECKSUM_ALG.to_string(),
        checksum: sha256_hex(&bytes),
        records: records
            .iter()
            .map(|r| ManifestRecord { source: r.source.clone(), role: r.role, label: r.label.map(Label::as_u8) })
            .collect(),
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

/// Reads and validates the feature file a manifest points to.
///
/// Checks run in a fixed order so each failure has one error code: file
/// structure (magic, truncation, trailing bytes), then header against
/// manifest, then checksum, then per-row invariants.
pub fn read_feature_file(manifest: &DatasetManifest) -> Result<Vec<FeatureRecord>> {
    let path = manifest.feature_path();
    let bytes = fs::read(&path).map_err(|e| StoreError::io(&path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::Truncated { path, expected: HEADER_LEN as u64, actual: bytes.len() as u64 });
    }
    if bytes[..4] != MAGIC {
        return Err(StoreError::BadMagic { path });
    }
    let dimension = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let expected = (count as u128) * (dimension as u128) * 4 + HEADER_LEN as u128;
    let actual = bytes.len() as u128;
    if actual < expected {
        return Err(StoreError::Truncated { path, expected: expected as u64, actual: actual as u64 });
    }
    if actual > expected {
        return Err(StoreError::TrailingBytes { path, extra: (actual - expected) as u64 });
    }
    let count = count as usize;
    if dimension != manifest.dimension {
        return Err(StoreError::ManifestMismatch(format!(
            "file dimension {dimension}, manifest dimension {}",
            manifest.dimension
        )));
    }
    if count != manifest.count || count != manifest.records.len() {
        return Err(StoreError::ManifestMismatch(format!(
            "file rows {count}, manifest count {} with {} records",
            manifest.count,
            manifest.records.len()
        )));
    }
    if manifest.checksum_alg != CHECKSUM_ALG {
        return Err(StoreError::UnsupportedChecksum(manifest.checksum_alg.clone()));
    }
    let digest = sha256_hex(&bytes);
    if !digest.eq_ignore_ascii_case(&manifest.checksum) {
        return Err(StoreError::ChecksumMismatch { path, expected: manifest.checksum.clone(), actual: digest });
    }

    let payload = &bytes[HEADER_LEN..];
    let row_bytes = dimension * 4;
    let mut out = Vec::with_capacity(count);
    for (row, meta) in manifest.records.iter().enumerate() {
        let chunk = &payload[row * row_bytes..(row + 1) * row_bytes];
        let features: Vec<f32> =
            chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let label = match meta.label {
            None => None,
            Some(v) => Some(Label::from_u8(v).ok_or_else(|| StoreError::InvalidRecord {
                row,
                detail: format!("label must be 0 or 1, found {v}"),
            })?),
        };
        let rec = FeatureRecord { row_index: row, features, source: meta.source.clone(), role: meta.role, label };
        rec.check(row, dimension)?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes `<dir>/<stem>.afv` and `<dir>/<stem>.manifest.jsonl`; returns the
/// manifest and the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path, stem: &str) -> Result<(DatasetManifest, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    let manifest = write_feature_file(dataset.records(), dataset.dimension(), &dir.join(format!("{stem}.afv")))?;
    let manifest_path = dir.join(format!("{stem}.manifest.jsonl"));
    manifest.save(&manifest_path)?;
    Ok((manifest, manifest_path))
}

/// Loads a manifest from disk, verifies its feature file and returns the dataset.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let records = read_feature_file(&manifest)?;
    Dataset::new(manifest.dimension, records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { validation_fraction: 0.2, seed: 0 }
    }
}

/// Row indices (into the split input) of each part, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Stratified train/validation split of labeled rows.
///
/// The validation size is `round(fraction * n)`. Each class first gets
/// `floor(fraction * n_class)` validation rows; leftover slots go one per
/// class, larger classes first (ties: the class whose first row comes
/// earlier). Members are chosen by shuffling each class's row indices with a
/// stream derived from the seed and the class's first row, so the split
/// depends only on the partition of rows into classes, the seed and row
/// order. Renaming the classes (flipping every label) gives the same split.
pub fn split_labeled(labels: &[Label], spec: &SplitSpec) -> Result<Split> {
    let f = spec.validation_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(StoreError::InvalidFraction(f));
    }
    let classes = [Label::Target, Label::NonTarget];
    let members: Vec<Vec<usize>> =
        classes.iter().map(|c| labels.iter().enumerate().filter(|(_, l)| *l == c).map(|(i, _)| i).collect()).collect();
    for (c, m) in classes.iter().zip(&members) {
        if m.len() < 2 {
            return Err(StoreError::CannotStratify(format!(
                "class {} has {} rows; each class needs at least 2",
                c.as_u8(),
                m.len()
            )));
        }
    }

    let total = (f * labels.len() as f64).round() as usize;
    let mut quota: Vec<usize> = members.iter().map(|m| (f * m.len() as f64).floor() as usize).collect();
    let mut remainder = total.saturating_sub(quota.iter().sum());
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by(|&a, &b| members[b].len().cmp(&members[a].len()).then(members[a][0].cmp(&members[b][0])));
    for &c in order.iter().cycle() {
        if remainder == 0 {
            break;
        }
        quota[c] += 1;
        remainder -= 1;
    }
    for ((c, m), &q) in classes.iter().zip(&members).zip(&quota) {
        if q == 0 || q >= m.len() {
            return Err(StoreError::CannotStratify(format!(
                "class {} with {} rows would put {q} rows in validation",
                c.as_u8(),
                m.len()
            )));
        }
    }

    let mut train = Vec::with_capacity(labels.len());
    let mut validation = Vec::with_capacity(total);
    for (m, &q) in members.iter().zip(&quota) {
        let mut shuffled = m.clone();
        shuffled.shuffle(&mut seed::rng(seed::derive(spec.seed, &format!("class/{}", m[0]))));
        validation.extend_from_slice(&shuffled[..q]);
        train.extend_from_slice(&shuffled[q..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    Ok(Split { train, validation })
}

/// Unstratified seeded split for unlabeled rows. The validation part holds
/// `round(fraction * n)` rows clamped to `[1, n - 1]`; with fewer than two
/// rows everything goes to train.
pub fn split_unlabeled(n: usize, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(StoreError::InvalidFraction(fraction));
    }
    if n < 2 {
        return Ok(Split { train: (0..n).collect(), validation: Vec::new() });
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    let mut validation = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    validation.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, validation })
}
