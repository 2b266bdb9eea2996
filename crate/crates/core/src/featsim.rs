//! Feature-similarity selection: extractors, distance matrices, round-robin
//! coverage retrieval, adaptive equal-width binning with Hamming distance,
//! and nearest-hard-sample pseudo-labels.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fraction_count, Budget, Dataset, Sample, SampleId, SeededRng};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureExtractor {
    Identity {
        dim: usize,
    },
    /// `(x - mean) / std` per feature; zero-variance features pass through unscaled.
    Standardize {
        means: Vec<f64>,
        stds: Vec<f64>,
    },
    /// `x -> P x` with `P` of shape `out x in`.
    LinearProjection {
        matrix: Vec<Vec<f64>>,
    },
}

impl FeatureExtractor {
    pub fn identity(dim: usize) -> Self {
        FeatureExtractor::Identity { dim }
    }

    /// Fits per-feature population mean and standard deviation on `d`.
    pub fn fit_standardize(d: &Dataset) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::EmptyDataset(d.name().to_string()));
        }
        let n = d.len() as f64;
        let mut means = vec![0.0; d.dim()];
        for s in d.iter() {
            for (m, v) in means.iter_mut().zip(&s.features) {
                *m += v / n;
            }
        }
        let mut stds = vec![0.0; d.dim()];
        for s in d.iter() {
            for ((sd, v), m) in stds.iter_mut().zip(&s.features).zip(&means) {
                *sd += (v - m).powi(2) / n;
            }
        }
        stds.iter_mut().for_each(|v| *v = v.sqrt());
        Ok(FeatureExtractor::Standardize { means, stds })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureExtractor::Identity { dim } => *dim,
            FeatureExtractor::Standardize { means, .. } => means.len(),
            FeatureExtractor::LinearProjection { matrix } => matrix.first().map_or(0, Vec::len),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureExtractor::LinearProjection { matrix } => matrix.len(),
            _ => self.input_dim(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FeatureExtractor::Identity { .. } => x.to_vec(),
            FeatureExtractor::Standardize { means, stds } => x
                .iter()
                .zip(means.iter().zip(stds))
                .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { *v })
                .collect(),
            FeatureExtractor::LinearProjection { matrix } => matrix
                .iter()
                .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
        }
    }
}

/// Extracted feature rows keyed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<SampleId>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn dim(&self) -> Option<usize> {
        self.rows.first().map(Vec::len)
    }
}

pub fn extract_features(x: &FeatureExtractor, d: &Dataset) -> Result<FeatureMatrix> {
    if d.dim() != x.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "extractor expects {} features, dataset `{}` has {}",
            x.input_dim(),
            d.name(),
            d.dim()
        )));
    }
    Ok(FeatureMatrix {
        ids: d.ids(),
        rows: d.iter().map(|s| x.apply(&s.features)).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    L2,
    BinningHamming,
}

/// Hard-rows by owner-columns matrix of non-negative distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub entries: Vec<Vec<f64>>,
    pub row_ids: Vec<SampleId>,
    pub col_ids: Vec<SampleId>,
    pub metric: Metric,
}

impl DistanceMatrix {
    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn column_index(&self, id: SampleId) -> Option<usize> {
        self.col_ids.iter().position(|&c| c == id)
    }

    pub fn transpose(&self) -> DistanceMatrix {
        let entries = (0..self.cols())
            .map(|j| self.entries.iter().map(|row| row[j]).collect())
            .collect();
        DistanceMatrix {
            entries,
            row_ids: self.col_ids.clone(),
            col_ids: self.row_ids.clone(),
            metric: self.metric,
        }
    }

    /// Restriction to the given column ids, in that order.
    pub fn select_columns(&self, ids: &[SampleId]) -> Result<DistanceMatrix> {
        let idx = ids
            .iter()
            .map(|&id| {
                self.column_index(id)
                    .ok_or_else(|| Error::DimensionMismatch(format!("distance matrix has no column {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DistanceMatrix {
            entries: self
                .entries
                .iter()
                .map(|row| idx.iter().map(|&j| row[j]).collect())
                .collect(),
            row_ids: self.row_ids.clone(),
            col_ids: ids.to_vec(),
            metric: self.metric,
        })
    }

    /// CSV with the row id in the first column and column ids in the header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = std::iter::once("id".to_string())
            .chain(self.col_ids.iter().map(|c| c.to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (id, row) in self.row_ids.iter().zip(&self.entries) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{id},{}", cells.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn hamming<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64
}

/// `entries[a][b]` is the distance between hard row `a` and owner row `b`.
/// Rows are computed in parallel; the result does not depend on scheduling.
pub fn compute_distances(hard: &FeatureMatrix, own: &FeatureMatrix, metric: Metric) -> Result<DistanceMatrix> {
    if let (Some(a), Some(b)) = (hard.dim(), own.dim()) {
        if a != b {
            return Err(Error::DimensionMismatch(format!(
                "hard rows have {a} features, owner rows have {b}"
            )));
        }
    }
    let entries = hard
        .rows
        .par_iter()
        .map(|h| {
            own.rows
                .iter()
                .map(|o| match metric {
                    Metric::L2 => l2(h, o),
                    Metric::BinningHamming => hamming(h, o),
                })
                .collect()
        })
        .collect();
    Ok(DistanceMatrix {
        entries,
        row_ids: hard.ids.clone(),
        col_ids: own.ids.clone(),
        metric,
    })
}

/// Round-robin coverage retrieval: rows (ascending id) take turns claiming
/// their nearest unclaimed column until `k` columns are chosen. Ties within a
/// row go to the lowest column id. Returns column ids in claim order.
pub fn retrieve_topk(psi: &DistanceMatrix, k: Budget) -> Result<Vec<SampleId>> {
    let k = k.get();
    if k > psi.cols() {
        return Err(Error::BudgetTooLarge { k, n: psi.cols() });
    }
    if psi.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let mut row_order: Vec<usize> = (0..psi.rows()).collect();
    row_order.sort_by_key(|&r| psi.row_ids[r]);
    let preferences: Vec<Vec<usize>> = row_order
        .iter()
        .map(|&r| {
            let mut cols: Vec<usize> = (0..psi.cols()).collect();
            cols.sort_by(|&a, &b| {
                psi.entries[r][a]
                    .total_cmp(&psi.entries[r][b])
                    .then(psi.col_ids[a].cmp(&psi.col_ids[b]))
            });
            cols
        })
        .collect();
    let mut cursor = vec![0usize; preferences.len()];
    let mut taken = vec![false; psi.cols()];
    let mut out = Vec::with_capacity(k);
    'outer: while out.len() < k {
        for (r, prefs) in preferences.iter().enumerate() {
            if out.len() == k {
                break 'outer;
            }
            while cursor[r] < prefs.len() && taken[prefs[cursor[r]]] {
                cursor[r] += 1;
            }
            if let Some(&c) = prefs.get(cursor[r]) {
                taken[c] = true;
                out.push(psi.col_ids[c]);
            }
        }
    }
    Ok(out)
}

/// Per-feature equal-width grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBins {
    /// `bins + 1` strictly increasing edges, or a single value for a constant feature.
    pub edges: Vec<f64>,
    pub bins: usize,
}

impl FeatureBins {
    fn equal_width(min: f64, max: f64, n: usize) -> Self {
        if max <= min {
            return FeatureBins {
                edges: vec![min],
                bins: 1,
            };
        }
        let width = (max - min) / n as f64;
        let mut edges: Vec<f64> = (0..n).map(|i| min + i as f64 * width).collect();
        edges.push(max);
        FeatureBins { edges, bins: n }
    }

    /// Bin of `v`; bins are right-open except the last, and values outside
    /// the fitted range clamp to the boundary bins.
    pub fn index(&self, v: f64) -> usize {
        if self.bins <= 1 {
            return 0;
        }
        let interior = &self.edges[1..self.bins];
        interior.partition_point(|&e| e <= v)
    }
}

/// Chosen grid per binned feature, keyed by feature index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BinningGrid {
    pub features: BTreeMap<usize, FeatureBins>,
}

/// Integer bin index per binned feature, one row per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinCoordinates {
    pub ids: Vec<SampleId>,
    pub coords: Vec<Vec<usize>>,
}

impl BinCoordinates {
    pub fn arity(&self) -> Option<usize> {
        self.coords.first().map(Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinningParams {
    /// Fraction of the owner's samples pooled with the hard set to fit the grid.
    pub sample_fraction: f64,
    /// Minimum number of non-empty bins wanted per feature.
    pub min_filled: usize,
    /// Candidate bin counts, ascending.
    pub candidates: Vec<usize>,
    /// Feature indices to bin; empty means all.
    #[serde(default)]
    pub features: Vec<usize>,
}

impl Default for BinningParams {
    fn default() -> Self {
        Self {
            sample_fraction: 0.1,
            min_filled: 3,
            candidates: vec![2, 4, 8, 16, 32, 64],
            features: Vec::new(),
        }
    }
}

/// Number of distinct bins hit by `values` under an equal-width `n`-bin grid
/// over their own range.
pub fn count_nonempty_bins(values: &[f64], n: usize) -> usize {
    let (min, max) = min_max(values);
    let grid = FeatureBins::equal_width(min, max, n);
    let hit: HashSet<usize> = values.iter().map(|&v| grid.index(v)).collect();
    hit.len()
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Smallest candidate whose grid fills at least `min_filled` bins, else the
/// largest candidate.
pub fn choose_bin_count(values: &[f64], min_filled: usize, candidates: &[usize]) -> usize {
    candidates
        .iter()
        .copied()
        .find(|&n| count_nonempty_bins(values, n) >= min_filled)
        .unwrap_or_else(|| *candidates.last().expect("non-empty candidates"))
}

fn coordinates(d: &Dataset, grid: &BinningGrid) -> BinCoordinates {
    BinCoordinates {
        ids: d.ids(),
        coords: d
            .iter()
            .map(|s| {
                grid.features
                    .iter()
                    .map(|(&f, bins)| bins.index(s.features[f]))
                    .collect()
            })
            .collect(),
    }
}

/// Fits per-feature adaptive grids on the hard set pooled with a random
/// `sample_fraction` of the owner's data, then bins both datasets.
/// Returns `(owner coordinates, hard coordinates, grid)`.
pub fn extract_binning_features(
    hard: &Dataset,
    own: &Dataset,
    params: &BinningParams,
    rng: SeededRng,
) -> Result<(BinCoordinates, BinCoordinates, BinningGrid)> {
    if hard.dim() != own.dim() {
        return Err(Error::DimensionMismatch(format!(
            "hard set has {} features, owner has {}",
            hard.dim(),
            own.dim()
        )));
    }
    if !(params.sample_fraction > 0.0 && params.sample_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sample fraction {} outside (0, 1]",
            params.sample_fraction
        )));
    }
    if params.min_filled == 0 {
        return Err(Error::InvalidArgument("minimum filled bins must be >= 1".into()));
    }
    if params.candidates.is_empty() || params.candidates[0] == 0 || params.candidates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "bin candidates must be positive and strictly ascending".into(),
        ));
    }
    let features: Vec<usize> = if params.features.is_empty() {
        (0..own.dim()).collect()
    } else {
        params.features.clone()
    };
    if features.is_empty() {
        return Err(Error::EmptyFeatureList);
    }
    if let Some(&bad) = features.iter().find(|&&f| f >= own.dim()) {
        return Err(Error::InvalidArgument(format!("feature index {bad} out of range")));
    }

    let mut r = rng.rng();
    let take = fraction_count(params.sample_fraction, own.len());
    let mut picked = index::sample(&mut r, own.len(), take).into_vec();
    picked.sort_unstable();
    let union: Vec<&Sample> = hard.iter().chain(picked.iter().map(|&i| &own.samples()[i])).collect();
    if union.is_empty() {
        return Err(Error::EmptyInput);
    }

    let mut grid = BinningGrid {
        features: BTreeMap::new(),
    };
    for &f in &features {
        let values: Vec<f64> = union.iter().map(|s| s.features[f]).collect();
        let (min, max) = min_max(&values);
        let n = choose_bin_count(&values, params.min_filled, &params.candidates);
        grid.features.insert(f, FeatureBins::equal_width(min, max, n));
    }
    Ok((coordinates(own, &grid), coordinates(hard, &grid), grid))
}

/// Hamming distance between bin coordinates, oriented hard rows by owner columns.
pub fn binning_distance(own: &BinCoordinates, hard: &BinCoordinates) -> Result<DistanceMatrix> {
    if let (Some(a), Some(b)) = (own.arity(), hard.arity()) {
        if a != b {
            return Err(Error::ArityMismatch(a, b));
        }
    }
    let entries = hard
        .coords
        .par_iter()
        .map(|h| own.coords.iter().map(|o| hamming(h, o)).collect())
        .collect();
    Ok(DistanceMatrix {
        entries,
        row_ids: hard.ids.clone(),
        col_ids: own.ids.clone(),
        metric: Metric::BinningHamming,
    })
}

/// Labels each sample of `useful` with the label of the hard sample nearest
/// to it under `psi`; ties go to the lowest hard sample id.
pub fn pseudo_label(useful: &Dataset, hard: &Dataset, psi: &DistanceMatrix) -> Result<Dataset> {
    if !hard.is_labeled() || hard.is_empty() {
        return Err(Error::UnlabeledHardSet);
    }
    let hard_labels: Vec<usize> = psi
        .row_ids
        .iter()
        .map(|&id| hard.get(id).and_then(|s| s.label).ok_or(Error::UnlabeledHardSet))
        .collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(useful.len());
    for s in useful.iter() {
        let j = psi
            .column_index(s.id)
            .ok_or_else(|| Error::DimensionMismatch(format!("distance matrix has no column for sample {}", s.id)))?;
        let mut best = 0;
        for r in 1..psi.rows() {
            let (d, bd) = (psi.entries[r][j], psi.entries[best][j]);
            if d < bd || (d == bd && psi.row_ids[r] < psi.row_ids[best]) {
                best = r;
            }
        }
        samples.push(Sample::new(s.id, s.features.clone(), Some(hard_labels[best])));
    }
    let mut classes = useful.classes().to_vec();
    classes.extend_from_slice(hard.classes());
    Dataset::with_classes(useful.name(), useful.dim(), samples, &classes)
}
