//! Scan manifests, exclusion rules and patient-disjoint splitting.
//!
//! A manifest is a comma-separated file with the header
//! `scan_id,patient_id,label,image_path,view,artifact_flag,machine_id,age,sex`.
//! `age` and `sex` may be left empty.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_COLUMNS: [&str; 9] = [
    "scan_id",
    "patient_id",
    "label",
    "image_path",
    "view",
    "artifact_flag",
    "machine_id",
    "age",
    "sex",
];

/// Fraction of images held out for testing.
pub const DEFAULT_TEST_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    /// Class index used by the network output layer.
    pub fn class_index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Negative => "negative",
            Label::Positive => "positive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "positive" => Some(Label::Positive),
            "negative" => Some(Label::Negative),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Frontal,
    Lateral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub scan_id: String,
    pub patient_id: String,
    pub label: Label,
    pub image_path: PathBuf,
    pub view: View,
    pub artifact_flag: bool,
    pub machine_id: String,
    pub age: Option<u32>,
    pub sex: Sex,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ScanRecord>,
    pub source_note: String,
}

impl DatasetManifest {
    /// Builds a manifest, rejecting duplicate scan ids.
    pub fn new(records: Vec<ScanRecord>, source_note: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.scan_id.as_str()) {
                return Err(Error::DuplicateScanId(r.scan_id.clone()));
            }
        }
        Ok(Self {
            records,
            source_note: source_note.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, scan_id: &str) -> Option<&ScanRecord> {
        self.records.iter().find(|r| r.scan_id == scan_id)
    }

    /// Records whose ids are in `ids`, in manifest order.
    pub fn subset<'a>(&'a self, ids: &'a BTreeSet<String>) -> impl Iterator<Item = &'a ScanRecord> {
        self.records.iter().filter(move |r| ids.contains(&r.scan_id))
    }

    /// Resolves a record's image path; relative paths are taken relative to `base`.
    pub fn resolve_image_path(record: &ScanRecord, base: &Path) -> PathBuf {
        if record.image_path.is_absolute() {
            record.image_path.clone()
        } else {
            base.join(&record.image_path)
        }
    }
}

fn row_error(path: &Path, row: u64, message: impl Into<String>) -> Error {
    Error::ManifestRow {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

fn parse_record(path: &Path, row: u64, fields: &csv::StringRecord) -> Result<ScanRecord> {
    if fields.len() != MANIFEST_COLUMNS.len() {
        return Err(row_error(
            path,
            row,
            format!("expected {} columns, found {}", MANIFEST_COLUMNS.len(), fields.len()),
        ));
    }
    let get = |i: usize| fields.get(i).unwrap_or("").trim();
    let non_empty = |i: usize| -> Result<String> {
        let v = get(i);
        if v.is_empty() {
            Err(row_error(path, row, format!("`{}` is empty", MANIFEST_COLUMNS[i])))
        } else {
            Ok(v.to_string())
        }
    };

    let label = Label::parse(get(2))
        .ok_or_else(|| row_error(path, row, format!("invalid label `{}`", get(2))))?;
    let view = match get(4) {
        "frontal" => View::Frontal,
        "lateral" => View::Lateral,
        other => return Err(row_error(path, row, format!("invalid view `{other}`"))),
    };
    let artifact_flag = match get(5) {
        "true" => true,
        "false" => false,
        other => return Err(row_error(path, row, format!("invalid artifact_flag `{other}`"))),
    };
    let age = match get(7) {
        "" => None,
        v => Some(
            v.parse::<u32>()
                .map_err(|_| row_error(path, row, format!("invalid age `{v}`")))?,
        ),
    };
    let sex = match get(8) {
        "" | "unknown" => Sex::Unknown,
        "male" => Sex::Male,
        "female" => Sex::Female,
        other => return Err(row_error(path, row, format!("invalid sex `{other}`"))),
    };

    Ok(ScanRecord {
        scan_id: non_empty(0)?,
        patient_id: non_empty(1)?,
        label,
        image_path: PathBuf::from(non_empty(3)?),
        view,
        artifact_flag,
        machine_id: get(6).to_string(),
        age,
        sex,
    })
}

/// Reads a manifest file. Row numbers in errors are file line numbers (the
/// header is line 1).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);

    let header = reader.headers().map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let header: Vec<&str> = header.iter().map(str::trim).collect();
    if header != MANIFEST_COLUMNS {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            message: format!(
                "header must be `{}`, found `{}`",
                MANIFEST_COLUMNS.join(","),
                header.join(",")
            ),
        });
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| {
            let row = e.position().map(|p| p.line()).unwrap_or(line);
            row_error(path, row, e.to_string())
        })?;
        let row_no = row.position().map(|p| p.line()).unwrap_or(line);
        let record = parse_record(path, row_no, &row)?;
        if !seen.insert(record.scan_id.clone()) {
            return Err(Error::DuplicateScanId(record.scan_id));
        }
        records.push(record);
    }

    Ok(DatasetManifest {
        records,
        source_note: format!("loaded from {}", path.display()),
    })
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let to_err = |e: csv::Error| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    writer.write_record(MANIFEST_COLUMNS).map_err(to_err)?;
    for r in &manifest.records {
        let age = r.age.map(|a| a.to_string()).unwrap_or_default();
        let sex = match r.sex {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Unknown => "",
        };
        let view = match r.view {
            View::Frontal => "frontal",
            View::Lateral => "lateral",
        };
        writer
            .write_record([
                r.scan_id.as_str(),
                r.patient_id.as_str(),
                r.label.as_str(),
                &r.image_path.to_string_lossy(),
                view,
                if r.artifact_flag { "true" } else { "false" },
                r.machine_id.as_str(),
                &age,
                sex,
            ])
            .map_err(to_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    LateralView,
    RectangularArtifact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionEntry {
    pub scan_id: String,
    pub reasons: Vec<ExclusionReason>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionLog {
    pub entries: Vec<ExclusionEntry>,
}

impl ExclusionLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Drops lateral views and images flagged with rectangular artifacts.
pub fn apply_exclusions(manifest: &DatasetManifest) -> (DatasetManifest, ExclusionLog) {
    let mut kept = Vec::with_capacity(manifest.records.len());
    let mut log = ExclusionLog::default();
    for r in &manifest.records {
        let mut reasons = Vec::new();
        if r.view == View::Lateral {
            reasons.push(ExclusionReason::LateralView);
        }
        if r.artifact_flag {
            reasons.push(ExclusionReason::RectangularArtifact);
        }
        if reasons.is_empty() {
            kept.push(r.clone());
        } else {
            log.entries.push(ExclusionEntry {
                scan_id: r.scan_id.clone(),
                reasons,
            });
        }
    }
    (
        DatasetManifest {
            records: kept,
            source_note: manifest.source_note.clone(),
        },
        log,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub seed: u64,
    pub test_fraction: f64,
}

impl SplitAssignment {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Number of test images the greedy patient assignment aims for.
pub fn test_quota(n_images: usize, test_fraction: f64) -> usize {
    // Guard against 0.15 * 100 = 15.000000000000002 rounding up to 16.
    ((test_fraction * n_images as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Shuffles patients with `seed` and moves whole patients into the test set
/// until the test image count first reaches `ceil(test_fraction * N)`.
pub fn patient_level_split(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }

    let mut by_patient: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in &manifest.records {
        by_patient
            .entry(r.patient_id.as_str())
            .or_default()
            .push(r.scan_id.as_str());
    }
    let mut patients: Vec<&str> = by_patient.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);

    let quota = test_quota(manifest.len(), test_fraction);
    let mut test_ids = BTreeSet::new();
    let mut train_ids = BTreeSet::new();
    for patient in patients {
        let scans = &by_patient[patient];
        let target = if test_ids.len() < quota {
            &mut test_ids
        } else {
            &mut train_ids
        };
        target.extend(scans.iter().map(|s| s.to_string()));
    }

    Ok(SplitAssignment {
        train_ids,
        test_ids,
        seed,
        test_fraction,
    })
}
