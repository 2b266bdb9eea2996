//! Samples, datasets, budgets and seeded randomness, plus the ingestion
//! formats and the DO-side corruption transforms.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SampleId = usize;

/// Name of the CSV column holding the class label.
pub const LABEL_COLUMN: &str = "label";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub features: Vec<f64>,
    pub label: Option<usize>,
}

impl Sample {
    pub fn new(id: SampleId, features: Vec<f64>, label: Option<usize>) -> Self {
        Self { id, features, label }
    }
}

/// An ordered collection of samples sharing one feature dimension and label
/// space. Immutable once built; transforms return new datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    name: String,
    dim: usize,
    classes: Vec<usize>,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Builds a dataset whose label space is the sorted set of labels present.
    pub fn new(name: impl Into<String>, dim: usize, samples: Vec<Sample>) -> Result<Self> {
        Self::with_classes(name, dim, samples, &[])
    }

    /// Like [`Dataset::new`], with `declared` classes merged into the label space.
    pub fn with_classes(name: impl Into<String>, dim: usize, samples: Vec<Sample>, declared: &[usize]) -> Result<Self> {
        let name = name.into();
        let mut seen = HashSet::with_capacity(samples.len());
        let mut classes: BTreeSet<usize> = declared.iter().copied().collect();
        for s in &samples {
            if !seen.insert(s.id) {
                return Err(Error::Malformed(format!(
                    "dataset `{name}`: duplicate sample id {}",
                    s.id
                )));
            }
            if s.features.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "dataset `{name}`: sample {} has {} features, expected {dim}",
                    s.id,
                    s.features.len()
                )));
            }
            if let Some(y) = s.label {
                classes.insert(y);
            }
        }
        Ok(Self {
            name,
            dim,
            classes: classes.into_iter().collect(),
            samples,
        })
    }

    pub fn empty(name: impl Into<String>, dim: usize, classes: &[usize]) -> Self {
        let mut classes = classes.to_vec();
        classes.sort_unstable();
        classes.dedup();
        Self {
            name: name.into(),
            dim,
            classes,
            samples: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn ids(&self) -> Vec<SampleId> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn get(&self, id: SampleId) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// True when every sample carries a label (vacuously true when empty).
    pub fn is_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.label.is_some())
    }

    /// Distinct labels actually carried by samples, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.samples.iter().filter_map(|s| s.label).collect();
        set.into_iter().collect()
    }

    pub fn require_labeled(&self) -> Result<()> {
        if self.is_labeled() {
            Ok(())
        } else {
            Err(Error::UnlabeledDataset(self.name.clone()))
        }
    }

    pub fn feature_matrix(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.features.clone()).collect()
    }

    /// Samples whose id is in `ids`, in the order given by `ids`.
    pub fn subset(&self, name: impl Into<String>, ids: &[SampleId]) -> Result<Dataset> {
        let samples = ids
            .iter()
            .map(|&id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::Malformed(format!("dataset `{}` has no sample {id}", self.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::with_classes(name, self.dim, samples, &self.classes)
    }

    /// Samples satisfying `keep`, original order and ids preserved.
    pub fn filter(&self, name: impl Into<String>, keep: impl Fn(&Sample) -> bool) -> Dataset {
        Dataset {
            name: name.into(),
            dim: self.dim,
            classes: self.classes.clone(),
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    /// Concatenation with fresh dense ids `0..n`.
    pub fn concat(name: impl Into<String>, parts: &[&Dataset]) -> Result<Dataset> {
        let name = name.into();
        let dim = parts.first().map(|d| d.dim).unwrap_or(0);
        let mut classes = Vec::new();
        let mut samples = Vec::new();
        for part in parts {
            if part.dim != dim {
                return Err(Error::DimensionMismatch(format!(
                    "cannot concatenate `{}` (dim {}) with dim {dim}",
                    part.name, part.dim
                )));
            }
            classes.extend_from_slice(&part.classes);
            for s in &part.samples {
                samples.push(Sample::new(samples.len(), s.features.clone(), s.label));
            }
        }
        Dataset::with_classes(name, dim, samples, &classes)
    }

    /// Replaces the samples, keeping name, dimension and label space.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Result<Dataset> {
        Dataset::with_classes(self.name.clone(), self.dim, samples, &self.classes)
    }

    /// Writes the dataset as CSV: `f0..f{dim-1}` and, if any sample is
    /// labeled, a trailing `label` column (empty cell for missing labels).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        let labeled = self.samples.iter().any(|s| s.label.is_some());
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("f{j}")).collect();
        if labeled {
            header.push(LABEL_COLUMN.to_string());
        }
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.features.iter().map(|v| format!("{v:?}")).collect();
            if labeled {
                row.push(s.label.map(|y| y.to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for s in &self.samples {
            let line = JsonlRow {
                features: s.features.clone(),
                label: s.label,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

/// Loads a dataset, assigning ids `0..n` in file order.
pub fn load_dataset(path: &Path, format: Format) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match format {
        Format::Csv => load_csv(path, name),
        Format::Jsonl => load_jsonl(path, name),
    }
}

fn parse_finite(cell: &str, row: usize, column: &str) -> Result<f64> {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::NonNumericFeature {
            row,
            column: column.to_string(),
            value: cell.to_string(),
        }),
    }
}

fn load_csv(path: &Path, name: String) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_col = header.iter().position(|h| h == LABEL_COLUMN);
    let dim = header.len() - usize::from(label_col.is_some());
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::RaggedRows {
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        let mut features = Vec::with_capacity(dim);
        let mut label = None;
        for (j, cell) in record.iter().enumerate() {
            if Some(j) == label_col {
                let cell = cell.trim();
                if !cell.is_empty() {
                    label = Some(cell.parse::<usize>().map_err(|_| Error::NonNumericFeature {
                        row,
                        column: LABEL_COLUMN.to_string(),
                        value: cell.to_string(),
                    })?);
                }
            } else {
                features.push(parse_finite(cell, row, &header[j])?);
            }
        }
        samples.push(Sample::new(row, features, label));
    }
    Dataset::new(name, dim, samples)
}

fn load_jsonl(path: &Path, name: String) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    let mut dim = None;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line)?;
        let id = samples.len();
        match dim {
            None => dim = Some(row.features.len()),
            Some(d) if d != row.features.len() => {
                return Err(Error::RaggedRows {
                    row: id,
                    expected: d,
                    found: row.features.len(),
                })
            }
            _ => {}
        }
        if let Some(j) = row.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonNumericFeature {
                row: id,
                column: format!("features[{j}]"),
                value: row.features[j].to_string(),
            });
        }
        samples.push(Sample::new(id, row.features, row.label));
    }
    Dataset::new(name, dim.unwrap_or(0), samples)
}

/// Maximum number of samples a data owner may share.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Budget(usize);

impl Budget {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            Err(Error::InvalidBudget)
        } else {
            Ok(Self(k))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Enforces `k < n` for a pool of `n` samples.
    pub fn check_pool(self, n: usize) -> Result<()> {
        if self.0 >= n {
            Err(Error::BudgetTooLarge { k: self.0, n })
        } else {
            Ok(())
        }
    }
}

impl TryFrom<usize> for Budget {
    type Error = Error;
    fn try_from(k: usize) -> Result<Self> {
        Budget::new(k)
    }
}

impl From<Budget> for usize {
    fn from(b: Budget) -> usize {
        b.0
    }
}

/// A (seed, stream) pair naming one reproducible ChaCha8 draw sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeededRng {
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn with_stream(self, stream: u64) -> Self {
        Self {
            seed: self.seed,
            stream,
        }
    }

    /// Derives an independent stream from this one and a tag.
    pub fn fork(self, tag: u64) -> Self {
        // splitmix64 finalizer over (stream, tag)
        let mut z = self
            .stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(tag)
            .wrapping_add(0x632B_E59B_D9B4_E019);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        self.with_stream(z ^ (z >> 31))
    }

    pub fn fork_str(self, tag: &str) -> Self {
        // FNV-1a, stable across platforms
        let h = tag.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
        });
        self.fork(h)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// `floor(fraction * n)`, tolerant of representation error such as 0.29 * 100.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor().min(n as f64) as usize
}

fn check_fraction(fraction: f64) -> Result<()> {
    if (0.0..=1.0).contains(&fraction) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("fraction {fraction} outside [0, 1]")))
    }
}

/// Sample indices chosen for a transform, ascending.
fn chosen_positions(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked = index::sample(rng, n, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Corrupts `floor(fraction * |d|)` samples: every feature of a chosen
/// sample is zeroed with probability 0.5, otherwise shifted by uniform
/// noise in `[-magnitude, magnitude]`.
pub fn corrupt_features(d: &Dataset, fraction: f64, magnitude: f64, rng: SeededRng) -> Result<Dataset> {
    check_fraction(fraction)?;
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "magnitude {magnitude} must be finite and non-negative"
        )));
    }
    if d.is_empty() {
        return Err(Error::EmptyDataset(d.name().to_string()));
    }
    let mut rng = rng.rng();
    let chosen = chosen_positions(d.len(), fraction_count(fraction, d.len()), &mut rng);
    let mut samples = d.samples().to_vec();
    for &i in &chosen {
        for v in samples[i].features.iter_mut() {
            let mask: bool = rng.random_bool(0.5);
            let u: f64 = rng.random();
            if mask {
                *v = 0.0;
            } else {
                *v += (2.0 * u - 1.0) * magnitude;
            }
        }
    }
    d.with_samples(samples)
}

/// Reassigns `floor(fraction * |d|)` labels, each to a class drawn uniformly
/// from the label space minus the original label.
pub fn permute_labels(d: &Dataset, fraction: f64, rng: SeededRng) -> Result<Dataset> {
    check_fraction(fraction)?;
    d.require_labeled()?;
    if d.classes().len() < 2 {
        return Err(Error::SingleClass(d.name().to_string()));
    }
    let mut rng = rng.rng();
    let chosen = chosen_positions(d.len(), fraction_count(fraction, d.len()), &mut rng);
    let mut samples = d.samples().to_vec();
    for &i in &chosen {
        let original = samples[i].label.expect("checked labeled");
        let others: Vec<usize> = d.classes().iter().copied().filter(|&c| c != original).collect();
        samples[i].label = Some(others[rng.random_range(0..others.len())]);
    }
    d.with_samples(samples)
}

pub fn strip_labels(d: &Dataset) -> Dataset {
    let samples = d
        .samples()
        .iter()
        .map(|s| Sample::new(s.id, s.features.clone(), None))
        .collect();
    Dataset {
        name: d.name.clone(),
        dim: d.dim,
        classes: d.classes.clone(),
        samples,
    }
}
