//! EEG recordings, their channel layout, the concept/day manifest, and
//! train/test concept splits.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Canonical 16-channel order of the recording headset (10-20 layout).
pub const CANONICAL_16: [&str; 16] = [
    "Fp1", "Fp2", "F7", "F3", "F4", "F8", "T3", "C3", "C4", "T4", "T5", "P3", "P4", "T6", "O1",
    "O2",
];

/// Left-hemisphere channels referenced against O1.
pub const LEFT_CHANNELS: [&str; 7] = ["Fp1", "F7", "F3", "T3", "C3", "T5", "P3"];

/// Right-hemisphere channels referenced against O2.
pub const RIGHT_CHANNELS: [&str; 7] = ["Fp2", "F8", "F4", "T4", "C4", "T6", "P4"];

/// Recording days present in the data set.
pub const VALID_DAYS: [u8; 3] = [0, 1, 3];

pub fn validate_day(day: u8) -> Result<u8> {
    if VALID_DAYS.contains(&day) {
        Ok(day)
    } else {
        Err(Error::Manifest(format!(
            "invalid day {day}: must be one of {VALID_DAYS:?}"
        )))
    }
}

/// Which occipital channel a scalp channel is referenced against.
pub fn occipital_reference(label: &str) -> Option<&'static str> {
    if LEFT_CHANNELS.contains(&label) {
        Some("O1")
    } else if RIGHT_CHANNELS.contains(&label) {
        Some("O2")
    } else {
        None
    }
}

/// An ordered set of channel labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSet {
    labels: Vec<String>,
}

impl ChannelSet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::InvalidArg("channel set must not be empty".into()));
        }
        let mut seen = BTreeSet::new();
        for l in &labels {
            if !seen.insert(l.clone()) {
                return Err(Error::InvalidArg(format!("duplicate channel label {l}")));
            }
        }
        Ok(Self { labels })
    }

    /// The full 16-channel headset layout.
    pub fn canonical_16() -> Self {
        Self::new(CANONICAL_16).expect("canonical labels are unique")
    }

    /// The 14 scalp channels left after occipital re-referencing.
    pub fn canonical_14() -> Self {
        Self::new(CANONICAL_16.iter().take(14).copied()).expect("canonical labels are unique")
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }
}

/// One raw 75 s multichannel recording of one concept on one day,
/// in microvolts, before preprocessing.
#[derive(Debug, Clone)]
pub struct RawTrace<T: Scalar> {
    pub concept_id: String,
    pub day: u8,
    pub sample_rate_hz: f64,
    pub channels: ChannelSet,
    /// `[n_samples, n_channels]`
    pub samples: Array2<T>,
}

impl<T: Scalar> RawTrace<T> {
    pub fn new(
        concept_id: impl Into<String>,
        day: u8,
        sample_rate_hz: f64,
        channels: ChannelSet,
        samples: Array2<T>,
    ) -> Result<Self> {
        validate_day(day)?;
        if samples.nrows() == 0 {
            return Err(Error::Trace("trace has no samples".into()));
        }
        if samples.ncols() != channels.len() {
            return Err(Error::Shape(format!(
                "trace has {} columns but {} channel labels",
                samples.ncols(),
                channels.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Trace("trace contains non-finite values".into()));
        }
        Ok(Self {
            concept_id: concept_id.into(),
            day,
            sample_rate_hz,
            channels,
            samples,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.samples.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz
    }

    /// Identifier of this recording, unique per (concept, day).
    pub fn trace_id(&self) -> String {
        format!("{}_d{}", self.concept_id, self.day)
    }
}

/// One manifest row: a trace file plus its metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: PathBuf,
    pub concept_id: String,
    pub group_id: String,
    pub day: u8,
}

/// The contents of a `file,concept,group,day` manifest.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory trace file paths are resolved against.
    pub base_dir: PathBuf,
}

pub const MANIFEST_HEADER: [&str; 4] = ["file", "concept", "group", "day"];

impl Manifest {
    /// Loads and validates a manifest CSV.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)?;
        let headers = reader.headers()?.clone();
        let header_fields: Vec<&str> = headers.iter().collect();
        if header_fields != MANIFEST_HEADER {
            return Err(Error::Manifest(format!(
                "expected header {:?}, found {:?}",
                MANIFEST_HEADER.join(","),
                header_fields.join(",")
            )));
        }
        let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != 4 {
                return Err(Error::Manifest(format!(
                    "row {}: expected 4 fields, found {}",
                    i + 1,
                    record.len()
                )));
            }
            let day: u8 = record[3].trim().parse().map_err(|_| {
                Error::Manifest(format!("row {}: invalid day {:?}", i + 1, &record[3]))
            })?;
            validate_day(day)
                .map_err(|_| Error::Manifest(format!("row {}: invalid day {}", i + 1, day)))?;
            let concept_id = record[1].trim().to_string();
            if !seen.insert((concept_id.clone(), day)) {
                return Err(Error::Manifest(format!(
                    "duplicate (concept, day) pair ({concept_id}, {day})"
                )));
            }
            let file = PathBuf::from(record[0].trim());
            let resolved = base_dir.join(&file);
            if !resolved.exists() {
                return Err(Error::Manifest(format!(
                    "row {}: missing file {}",
                    i + 1,
                    resolved.display()
                )));
            }
            entries.push(ManifestEntry {
                file,
                concept_id,
                group_id: record[2].trim().to_string(),
                day,
            });
        }
        Ok(Self { entries, base_dir })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(MANIFEST_HEADER)?;
        for e in &self.entries {
            w.write_record([
                e.file.to_string_lossy().as_ref(),
                &e.concept_id,
                &e.group_id,
                &e.day.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn concepts(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.concept_id.clone()).collect()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.file)
    }
}

/// Loads one trace CSV (`timestamp` column plus one column per channel label)
/// and reorders columns to the order of `channels`.
pub fn load_trace<T: Scalar>(
    path: &Path,
    channels: &ChannelSet,
    sample_rate_hz: f64,
    concept_id: &str,
    day: u8,
) -> Result<RawTrace<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let mut mapping = Vec::with_capacity(channels.len());
    for label in channels.labels() {
        let idx = cols
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Trace(format!("{}: missing channel column {label}", path.display())))?;
        mapping.push(idx);
    }
    let mut values: Vec<T> = Vec::new();
    let mut n_rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        for &col in &mapping {
            let cell = record.get(col).ok_or_else(|| {
                Error::Trace(format!("{}: row {} too short", path.display(), i + 1))
            })?;
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Trace(format!(
                    "{}: non-numeric cell {:?} at row {}",
                    path.display(),
                    cell,
                    i + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Trace(format!(
                    "{}: non-finite value at row {}",
                    path.display(),
                    i + 1
                )));
            }
            values.push(T::of_f64(v));
        }
        n_rows += 1;
    }
    if n_rows < 2 {
        return Err(Error::Trace(format!(
            "{}: trace must have at least 2 rows, found {n_rows}",
            path.display()
        )));
    }
    let samples = Array2::from_shape_vec((n_rows, channels.len()), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    RawTrace::new(concept_id, day, sample_rate_hz, channels.clone(), samples)
}

/// Writes a trace CSV with a `timestamp` column (seconds) and one column per
/// channel, values formatted with 6 fractional digits.
pub fn save_trace<T: Scalar>(trace: &RawTrace<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write!(w, "timestamp")?;
    for label in trace.channels.labels() {
        write!(w, ",{label}")?;
    }
    writeln!(w)?;
    for (i, row) in trace.samples.rows().into_iter().enumerate() {
        write!(w, "{:.6}", i as f64 / trace.sample_rate_hz)?;
        for v in row.iter() {
            write!(w, ",{:.6}", v.as_f64())?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads every trace referenced by a manifest.
pub fn load_manifest_traces<T: Scalar>(
    manifest: &Manifest,
    channels: &ChannelSet,
    sample_rate_hz: f64,
) -> Result<Vec<RawTrace<T>>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            load_trace(
                &manifest.resolve(e),
                channels,
                sample_rate_hz,
                &e.concept_id,
                e.day,
            )
        })
        .collect()
}

/// A train/test partition of the concept set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptSplit {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub seed: u64,
}

/// Uniformly samples `test_size` held-out concepts, deterministically per seed.
pub fn split_concepts(
    concepts: &BTreeSet<String>,
    test_size: usize,
    seed: u64,
) -> Result<ConceptSplit> {
    if test_size >= concepts.len() {
        return Err(Error::InvalidArg(format!(
            "test_size {} must be smaller than the number of concepts {}",
            test_size,
            concepts.len()
        )));
    }
    let ordered: Vec<&String> = concepts.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, ordered.len(), test_size);
    let test: BTreeSet<String> = picks.iter().map(|i| ordered[i].clone()).collect();
    let train: BTreeSet<String> = concepts.difference(&test).cloned().collect();
    Ok(ConceptSplit { train, test, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    fn write_file(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, contents).unwrap();
        p
    }

    #[test]
    fn channel_set_rejects_duplicates() {
        assert!(ChannelSet::new(["F3", "F3"]).is_err());
    }

    #[test]
    fn occipital_mapping_is_total_over_the_14() {
        for label in CANONICAL_16.iter().take(14) {
            assert!(occipital_reference(label).is_some(), "{label} unmapped");
        }
        assert!(occipital_reference("O1").is_none());
        assert!(occipital_reference("O2").is_none());
    }

    #[test]
    fn raw_trace_rejects_bad_day() {
        let samples = array![[1.0f64, 2.0], [3.0, 4.0]];
        let chans = ChannelSet::new(["F3", "F4"]).unwrap();
        assert!(RawTrace::new("c", 2, 125.0, chans, samples).is_err());
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "a.csv", "x\n1\n");
        write_file(dir.path(), "b.csv", "x\n1\n");
        let manifest = write_file(
            dir.path(),
            "manifest.csv",
            "file,concept,group,day\na.csv,apple,g1,0\nb.csv,apple,g1,1\n",
        );
        let m = Manifest::load(&manifest).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.concepts().len(), 1);
    }

    #[test]
    fn manifest_empty_with_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_file(dir.path(), "manifest.csv", "file,concept,group,day\n");
        let m = Manifest::load(&manifest).unwrap();
        assert!(m.entries.is_empty());
    }

    #[test]
    fn manifest_rejects_invalid_day() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "a.csv", "x\n1\n");
        let manifest = write_file(
            dir.path(),
            "manifest.csv",
            "file,concept,group,day\na.csv,apple,g1,2\n",
        );
        let err = Manifest::load(&manifest).unwrap_err();
        assert!(err.to_string().contains("invalid day"));
    }

    #[test]
    fn manifest_rejects_duplicate_concept_day() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "a.csv", "x\n1\n");
        let manifest = write_file(
            dir.path(),
            "manifest.csv",
            "file,concept,group,day\na.csv,apple,g1,0\na.csv,apple,g2,0\n",
        );
        assert!(Manifest::load(&manifest).is_err());
    }

    #[test]
    fn manifest_rejects_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_file(
            dir.path(),
            "manifest.csv",
            "file,concept,group,day\nnope.csv,apple,g1,0\n",
        );
        let err = Manifest::load(&manifest).unwrap_err();
        assert!(err.to_string().contains("missing file"));
    }

    #[test]
    fn load_trace_reorders_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "t.csv",
            "timestamp,F4,F3\n0.0,2.0,1.0\n0.008,4.0,3.0\n",
        );
        let chans = ChannelSet::new(["F3", "F4"]).unwrap();
        let t: RawTrace<f64> = load_trace(&p, &chans, 125.0, "c", 0).unwrap();
        assert_eq!(t.samples, array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn load_trace_reports_nan_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "t.csv",
            "timestamp,F3\n0.0,1.0\n0.008,NaN\n0.016,2.0\n",
        );
        let chans = ChannelSet::new(["F3"]).unwrap();
        let err = load_trace::<f64>(&p, &chans, 125.0, "c", 0).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn load_trace_rejects_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "t.csv", "timestamp,F3\n0.0,1.0\n");
        let chans = ChannelSet::new(["F3"]).unwrap();
        assert!(load_trace::<f64>(&p, &chans, 125.0, "c", 0).is_err());
    }

    #[test]
    fn trace_csv_roundtrip_within_tolerance_then_exact() {
        let dir = tempfile::tempdir().unwrap();
        let chans = ChannelSet::new(["F3", "F4"]).unwrap();
        let samples = array![[1.234567891f64, -20.5], [0.000001, 99.999999]];
        let t = RawTrace::new("c", 0, 125.0, chans.clone(), samples).unwrap();
        let p = dir.path().join("t.csv");
        save_trace(&t, &p).unwrap();
        let t2: RawTrace<f64> = load_trace(&p, &chans, 125.0, "c", 0).unwrap();
        for (a, b) in t.samples.iter().zip(t2.samples.iter()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
        // A second round trip reproduces the quantized values bit-exactly.
        let p2 = dir.path().join("t2.csv");
        save_trace(&t2, &p2).unwrap();
        let t3: RawTrace<f64> = load_trace(&p2, &chans, 125.0, "c", 0).unwrap();
        assert_eq!(t2.samples, t3.samples);
    }

    #[test]
    fn split_sizes_and_partition() {
        let concepts: BTreeSet<String> = (0..103).map(|i| format!("c{i:03}")).collect();
        let split = split_concepts(&concepts, 25, 7).unwrap();
        assert_eq!(split.test.len(), 25);
        assert_eq!(split.train.len(), 78);
        assert!(split.train.is_disjoint(&split.test));
        let union: BTreeSet<String> = split.train.union(&split.test).cloned().collect();
        assert_eq!(union, concepts);
    }

    #[test]
    fn split_deterministic_and_seed_sensitive() {
        let concepts: BTreeSet<String> = (0..40).map(|i| format!("c{i}")).collect();
        let a = split_concepts(&concepts, 10, 3).unwrap();
        let b = split_concepts(&concepts, 10, 3).unwrap();
        assert_eq!(a, b);
        let mut distinct = BTreeSet::new();
        for seed in 0..20 {
            let s = split_concepts(&concepts, 10, seed).unwrap();
            distinct.insert(s.test);
        }
        assert!(distinct.len() >= 19, "only {} distinct splits", distinct.len());
    }

    #[test]
    fn split_test_size_zero_and_too_large() {
        let concepts: BTreeSet<String> = (0..5).map(|i| format!("c{i}")).collect();
        let s = split_concepts(&concepts, 0, 1).unwrap();
        assert!(s.test.is_empty());
        assert_eq!(s.train.len(), 5);
        assert!(split_concepts(&concepts, 5, 1).is_err());
    }

    #[test]
    fn duration_of_9375_samples() {
        let chans = ChannelSet::new(["F3"]).unwrap();
        let samples = Array2::<f64>::zeros((9375, 1));
        // zeros are finite; constructor accepts
        let t = RawTrace::new("c", 0, 125.0, chans, samples).unwrap();
        assert_abs_diff_eq!(t.duration_s(), 75.0);
    }
}
