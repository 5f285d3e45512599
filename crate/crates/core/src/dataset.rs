//! Sparse multi-label datasets: loading, writing, synthesis, and label statistics.
//!
//! The on-disk format is a pair of UTF-8 text files. The feature file starts
//! with a header line `N D L` (sample count, feature dimension, label count)
//! followed by `N` lines of space-separated `index:value` pairs with 0-based,
//! strictly increasing indices. The label file holds `N` lines of
//! comma-separated 0-based label indices; a blank line means the sample has
//! no labels.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::derive_seed;

/// Row-sparse real-valued feature matrix (e.g. TF-IDF vectors).
///
/// Each row is a sorted list of `(feature_index, value)` pairs with strictly
/// increasing indices and finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseFeatureMatrix {
    n_samples: usize,
    n_features: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseFeatureMatrix {
    /// Build a matrix from raw rows, validating the sparse-row invariants.
    pub fn from_rows(n_features: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            let mut prev: Option<usize> = None;
            for &(idx, val) in row {
                if idx >= n_features {
                    return Err(Error::InvalidArgument(format!(
                        "feature index {idx} out of range (dimension {n_features}) in row {i}"
                    )));
                }
                if let Some(p) = prev {
                    if idx <= p {
                        return Err(Error::InvalidArgument(format!(
                            "feature indices not strictly increasing in row {i}"
                        )));
                    }
                }
                if !val.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("feature value in row {i}"),
                    });
                }
                prev = Some(idx);
            }
        }
        Ok(Self {
            n_samples: rows.len(),
            n_features,
            rows,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Sparse row `i` as sorted `(index, value)` pairs.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// New matrix containing the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            n_samples: idx.len(),
            n_features: self.n_features,
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Euclidean norm of row `i`.
    pub fn row_norm(&self, i: usize) -> f64 {
        self.rows[i]
            .iter()
            .map(|&(_, v)| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Dot product of two sorted sparse rows.
    pub fn dot_rows(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
        let mut acc = 0.0;
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

/// Binary label assignments stored as sorted positive-index rows.
///
/// Rows may be empty: zero-label samples are legal and downstream signal
/// computations guard the corresponding divisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMatrix {
    n_samples: usize,
    n_labels: usize,
    rows: Vec<Vec<usize>>,
}

impl LabelMatrix {
    /// Build a matrix from raw rows, validating bounds and uniqueness.
    pub fn from_rows(n_labels: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            let mut prev: Option<usize> = None;
            for &l in row {
                if l >= n_labels {
                    return Err(Error::InvalidArgument(format!(
                        "label index {l} out of range ({n_labels} labels) in row {i}"
                    )));
                }
                if let Some(p) = prev {
                    if l == p {
                        return Err(Error::InvalidArgument(format!(
                            "duplicate label {l} in row {i}"
                        )));
                    }
                    if l < p {
                        return Err(Error::InvalidArgument(format!(
                            "label indices not sorted in row {i}"
                        )));
                    }
                }
                prev = Some(l);
            }
        }
        Ok(Self {
            n_samples: rows.len(),
            n_labels,
            rows,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    /// Sorted positive label indices of row `i`.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            n_samples: idx.len(),
            n_labels: self.n_labels,
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Total number of positive (sample, label) cells.
    pub fn total_positives(&self) -> u64 {
        self.rows.iter().map(|r| r.len() as u64).sum()
    }

    /// Dense 0/1 matrix for the given rows.
    pub fn dense_rows(&self, idx: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), self.n_labels));
        for (bi, &i) in idx.iter().enumerate() {
            for &l in &self.rows[i] {
                out[[bi, l]] = 1.0;
            }
        }
        out
    }

    /// Dense boolean matrix for the given rows.
    pub fn dense_rows_bool(&self, idx: &[usize]) -> Array2<bool> {
        let mut out = Array2::from_elem((idx.len(), self.n_labels), false);
        for (bi, &i) in idx.iter().enumerate() {
            for &l in &self.rows[i] {
                out[[bi, l]] = true;
            }
        }
        out
    }
}

/// Global label statistics: per-label frequencies and the cached IDF vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_samples: usize,
    pub label_freq: Vec<u64>,
    pub idf: Vec<f64>,
    pub epsilon: f64,
}

/// Parameters for the synthetic long-tailed corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_labels: usize,
    pub n_features: usize,
    /// Exponent of the Zipf rank-frequency profile; larger means heavier skew.
    pub zipf_exponent: f64,
    pub mean_labels_per_sample: f64,
    pub seed: u64,
}

/// Desk-scale default corpus: large enough that the label tail is genuinely
/// long, small enough that a four-variant training suite finishes in minutes.
impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 6000,
            n_labels: 256,
            n_features: 384,
            zipf_exponent: 1.3,
            mean_labels_per_sample: 3.0,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n_samples < 1 || self.n_labels < 1 || self.n_features < 1 {
            return Err(Error::InvalidArgument(
                "synthetic spec counts must be >= 1".into(),
            ));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::InvalidArgument(
                "zipf_exponent must be > 0".into(),
            ));
        }
        if !(self.mean_labels_per_sample > 0.0)
            || self.mean_labels_per_sample > self.n_labels as f64
        {
            return Err(Error::InvalidArgument(
                "mean_labels_per_sample must be in (0, n_labels]".into(),
            ));
        }
        Ok(())
    }
}

/// Load a dataset from the paired feature/label text files.
pub fn load_dataset(
    features_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<(SparseFeatureMatrix, LabelMatrix)> {
    let fpath = features_path.as_ref();
    let lpath = labels_path.as_ref();

    let file = File::open(fpath).map_err(|e| Error::io(fpath, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(fpath, 1, "missing header line"))?;
    let header = header.map_err(|e| Error::io(fpath, e))?;
    let mut dims = [0usize; 3];
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(Error::parse(
            fpath,
            1,
            format!("header must be \"N D L\", got {fields:?}"),
        ));
    }
    for (slot, field) in dims.iter_mut().zip(&fields) {
        *slot = field
            .parse()
            .map_err(|_| Error::parse(fpath, 1, format!("bad header field {field:?}")))?;
    }
    let [n_samples, n_features, n_labels] = dims;

    let mut feature_rows = Vec::with_capacity(n_samples);
    for (line_idx, line) in lines {
        let line_no = line_idx + 1;
        let line = line.map_err(|e| Error::io(fpath, e))?;
        if feature_rows.len() == n_samples {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::parse(
                fpath,
                line_no,
                format!("more than the declared {n_samples} sample rows"),
            ));
        }
        let mut row: Vec<(usize, f64)> = Vec::new();
        for tok in line.split_whitespace() {
            let (idx_s, val_s) = tok.split_once(':').ok_or_else(|| {
                Error::parse(fpath, line_no, format!("expected index:value, got {tok:?}"))
            })?;
            let idx: usize = idx_s.parse().map_err(|_| {
                Error::parse(fpath, line_no, format!("bad feature index {idx_s:?}"))
            })?;
            let val: f64 = val_s.parse().map_err(|_| {
                Error::parse(fpath, line_no, format!("bad feature value {val_s:?}"))
            })?;
            if idx >= n_features {
                return Err(Error::parse(
                    fpath,
                    line_no,
                    format!("feature index {idx} out of range (dimension {n_features})"),
                ));
            }
            if !val.is_finite() {
                return Err(Error::parse(fpath, line_no, "non-finite feature value"));
            }
            if let Some(&(prev, _)) = row.last() {
                if idx <= prev {
                    return Err(Error::parse(
                        fpath,
                        line_no,
                        format!("feature indices not strictly increasing at {idx}"),
                    ));
                }
            }
            row.push((idx, val));
        }
        feature_rows.push(row);
    }
    if feature_rows.len() != n_samples {
        return Err(Error::parse(
            fpath,
            feature_rows.len() + 1,
            format!(
                "feature file declares {n_samples} samples but has {}",
                feature_rows.len()
            ),
        ));
    }

    let file = File::open(lpath).map_err(|e| Error::io(lpath, e))?;
    let mut label_rows = Vec::with_capacity(n_samples);
    for (line_idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = line_idx + 1;
        let line = line.map_err(|e| Error::io(lpath, e))?;
        if label_rows.len() == n_samples {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::SampleCountMismatch {
                features: n_samples,
                labels: n_samples + 1,
            });
        }
        let trimmed = line.trim();
        let mut row: Vec<usize> = Vec::new();
        if !trimmed.is_empty() {
            for tok in trimmed.split(',') {
                let l: usize = tok.trim().parse().map_err(|_| {
                    Error::parse(lpath, line_no, format!("bad label index {tok:?}"))
                })?;
                if l >= n_labels {
                    return Err(Error::parse(
                        lpath,
                        line_no,
                        format!("label index {l} out of range ({n_labels} labels)"),
                    ));
                }
                row.push(l);
            }
            row.sort_unstable();
            if row.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::parse(lpath, line_no, "duplicate label index"));
            }
        }
        label_rows.push(row);
    }
    if label_rows.len() != n_samples {
        return Err(Error::SampleCountMismatch {
            features: n_samples,
            labels: label_rows.len(),
        });
    }

    let features = SparseFeatureMatrix {
        n_samples,
        n_features,
        rows: feature_rows,
    };
    let labels = LabelMatrix {
        n_samples,
        n_labels,
        rows: label_rows,
    };
    Ok((features, labels))
}

/// Write a dataset out in the paired text format accepted by [`load_dataset`].
pub fn save_dataset(
    features: &SparseFeatureMatrix,
    labels: &LabelMatrix,
    features_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let fpath = features_path.as_ref();
    if features.n_samples != labels.n_samples {
        return Err(Error::SampleCountMismatch {
            features: features.n_samples,
            labels: labels.n_samples,
        });
    }

    let mut w = BufWriter::new(File::create(fpath).map_err(|e| Error::io(fpath, e))?);
    (|| -> std::io::Result<()> {
        writeln!(
            w,
            "{} {} {}",
            features.n_samples, features.n_features, labels.n_labels
        )?;
        for row in &features.rows {
            let mut first = true;
            for &(idx, val) in row {
                if !first {
                    write!(w, " ")?;
                }
                write!(w, "{idx}:{val}")?;
                first = false;
            }
            writeln!(w)?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(fpath, e))?;

    let lpath = labels_path.as_ref();
    let mut w = BufWriter::new(File::create(lpath).map_err(|e| Error::io(lpath, e))?);
    (|| -> std::io::Result<()> {
        for row in &labels.rows {
            let strs: Vec<String> = row.iter().map(|l| l.to_string()).collect();
            writeln!(w, "{}", strs.join(","))?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(lpath, e))?;
    Ok(())
}

/// Count label frequencies and cache the IDF rarity vector
/// `idf[l] = ln(N / (f_l + epsilon))`.
pub fn compute_stats(labels: &LabelMatrix, epsilon: f64) -> Result<DatasetStats> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    if labels.n_samples == 0 {
        return Err(Error::Empty { what: "dataset" });
    }
    let mut label_freq = vec![0u64; labels.n_labels];
    for row in &labels.rows {
        for &l in row {
            label_freq[l] += 1;
        }
    }
    let n = labels.n_samples as f64;
    let idf = label_freq
        .iter()
        .map(|&f| (n / (f as f64 + epsilon)).ln())
        .collect();
    Ok(DatasetStats {
        n_samples: labels.n_samples,
        label_freq,
        idf,
        epsilon,
    })
}

// Internal knobs of the synthetic generator. Labels are grouped into
// co-occurrence clusters; every sample draws its labels from a single
// cluster, so shared labels carry real neighborhood information. Each
// cluster owns a strong base signature shared by all of its members, which
// makes sibling labels easy to confuse from features alone, while each
// regular label adds only a faint fingerprint spread over many
// coordinates. Cosine retrieval accumulates the fingerprint across its
// full width immediately; gradient training has to recover the same
// direction coordinate by coordinate from the label's (often few)
// positive examples.
//
// The last quarter of every cluster consists of shadow labels: a shadow
// fires (with high probability) exactly when its two designated host
// labels are both drawn, and it leaves no trace in the features. Per-label
// feature evidence says nothing about a shadow beyond its hosts' marks, so
// recovering one from features alone requires modeling a label-pair
// interaction, while the labels of feature-space neighbors expose it
// directly.
const LABELS_PER_CLUSTER: usize = 16;
const BASE_NNZ: usize = 8;
const FP_NNZ: usize = 48;
const FP_AMP: f64 = 0.12;
const NOISE_NNZ: usize = 12;
const NOISE_SCALE: f64 = 0.4;
const SHADOW_RATE: f64 = 0.8;

/// Sample `n` distinct sorted indices below `d`.
fn distinct_indices(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, d, n.min(d)).into_vec();
    idx.sort_unstable();
    idx
}

/// Generate a long-tailed synthetic corpus.
///
/// Label frequencies follow a Zipf profile with the given exponent. A
/// sample's feature row is the jittered sum of its cluster's base signature
/// and its labels' marks, plus sparse noise, so feature-space neighbors
/// reliably share labels while separating sibling labels from features
/// alone stays genuinely hard. Deterministic for a fixed seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(SparseFeatureMatrix, LabelMatrix)> {
    spec.validate()?;
    let l_total = spec.n_labels;
    let d = spec.n_features;

    // Zipf weights over rank (label index = rank - 1).
    let weights: Vec<f64> = (0..l_total)
        .map(|l| 1.0 / ((l + 1) as f64).powf(spec.zipf_exponent))
        .collect();

    // Round-robin cluster assignment keeps each cluster a head-to-tail mix.
    let n_clusters = (l_total / LABELS_PER_CLUSTER).max(1);
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for l in 0..l_total {
        clusters[l % n_clusters].push(l);
    }

    // Split each cluster into hosts (drawn directly) and shadows (implied
    // by a host pair). Shadow j of a cluster rides hosts 2j and 2j+1.
    let mut is_shadow = vec![false; l_total];
    let mut host_lists: Vec<Vec<usize>> = Vec::with_capacity(n_clusters);
    let mut shadow_lists: Vec<Vec<(usize, usize, usize)>> = Vec::with_capacity(n_clusters);
    for members in &clusters {
        let n_shadows = members.len() / 4;
        let hosts: Vec<usize> = members[..members.len() - n_shadows].to_vec();
        let mut shadows = Vec::with_capacity(n_shadows);
        for (j, &s) in members[members.len() - n_shadows..].iter().enumerate() {
            is_shadow[s] = true;
            shadows.push((s, hosts[2 * j], hosts[2 * j + 1]));
        }
        host_lists.push(hosts);
        shadow_lists.push(shadows);
    }

    let cluster_weight: Vec<f64> = host_lists
        .iter()
        .map(|m| m.iter().map(|&l| weights[l]).sum())
        .collect();
    let cluster_cum: Vec<f64> = cluster_weight
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let cluster_total = *cluster_cum.last().unwrap();

    // Cluster bases from cluster-specific streams, independent of sample
    // order.
    let bases: Vec<Vec<(usize, f64)>> = (0..n_clusters)
        .map(|c| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0xba5e_0000 + c as u64));
            distinct_indices(&mut rng, d, BASE_NNZ)
                .into_iter()
                .map(|i| (i, rng.random_range(0.8..1.2)))
                .collect()
        })
        .collect();

    // Per-label fingerprints from label-specific streams; shadows carry no
    // feature evidence of their own.
    let marks: Vec<Vec<(usize, f64)>> = (0..l_total)
        .map(|l| {
            if is_shadow[l] {
                return Vec::new();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x5167_0000 + l as u64));
            distinct_indices(&mut rng, d, FP_NNZ)
                .into_iter()
                .map(|i| (i, rng.random_range(-FP_AMP..FP_AMP)))
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0xda7a));
    let poisson = Poisson::new(spec.mean_labels_per_sample)
        .map_err(|e| Error::InvalidArgument(format!("poisson rate: {e}")))?;

    let mut label_rows = Vec::with_capacity(spec.n_samples);
    let mut feature_rows = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        // Pick a cluster, then a Poisson-sized label set inside it, weighted
        // by the Zipf profile (weighted sampling without replacement via
        // exponential keys).
        let u = rng.random::<f64>() * cluster_total;
        let c = cluster_cum.partition_point(|&cum| cum < u).min(n_clusters - 1);
        let hosts = &host_lists[c];
        let k = (poisson.sample(&mut rng) as usize).min(hosts.len());

        let mut keyed: Vec<(f64, usize)> = hosts
            .iter()
            .map(|&l| {
                let u: f64 = rng.random();
                (u.powf(1.0 / weights[l]), l)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

        // Fill the row host by host up to the Poisson budget; a shadow joins
        // the moment its host pair completes, and counts against the budget
        // so the per-sample label mean tracks the requested rate.
        let mut row: Vec<usize> = Vec::with_capacity(k + 1);
        let mut attempted = vec![false; shadow_lists[c].len()];
        for &(_, h) in &keyed {
            if row.len() >= k {
                break;
            }
            row.push(h);
            for (j, &(s, h1, h2)) in shadow_lists[c].iter().enumerate() {
                if !attempted[j] && row.contains(&h1) && row.contains(&h2) {
                    attempted[j] = true;
                    if rng.random::<f64>() < SHADOW_RATE {
                        row.push(s);
                    }
                }
            }
        }
        row.sort_unstable();

        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        let base_jitter = rng.random_range(0.9..1.1);
        for &(i, v) in &bases[c] {
            *acc.entry(i).or_insert(0.0) += base_jitter * v;
        }
        for &l in &row {
            let jitter = rng.random_range(0.8..1.2);
            for &(i, v) in &marks[l] {
                *acc.entry(i).or_insert(0.0) += jitter * v;
            }
        }
        for _ in 0..NOISE_NNZ.min(d) {
            let i = rng.random_range(0..d);
            *acc.entry(i).or_insert(0.0) += rng.random::<f64>() * NOISE_SCALE;
        }

        label_rows.push(row);
        feature_rows.push(acc.into_iter().collect());
    }

    let features = SparseFeatureMatrix {
        n_samples: spec.n_samples,
        n_features: d,
        rows: feature_rows,
    };
    let labels = LabelMatrix {
        n_samples: spec.n_samples,
        n_labels: l_total,
        rows: label_rows,
    };
    Ok((features, labels))
}

/// Split a dataset into disjoint train/eval parts.
///
/// The eval side gets `floor(n * eval_fraction)` rows, clamped so neither
/// side is empty. Row order within each side follows the original dataset.
pub fn train_eval_split(
    features: &SparseFeatureMatrix,
    labels: &LabelMatrix,
    eval_fraction: f64,
    seed: u64,
) -> Result<(
    (SparseFeatureMatrix, LabelMatrix),
    (SparseFeatureMatrix, LabelMatrix),
)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::InvalidArgument(
            "eval_fraction must be in (0, 1)".into(),
        ));
    }
    if features.n_samples != labels.n_samples {
        return Err(Error::SampleCountMismatch {
            features: features.n_samples,
            labels: labels.n_samples,
        });
    }
    let n = features.n_samples;
    if n < 2 {
        return Err(Error::InvalidArgument(
            "split would leave one side empty (need at least 2 samples)".into(),
        ));
    }
    let n_eval = ((n as f64 * eval_fraction).floor() as usize).clamp(1, n - 1);

    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x73706c69));
    idx.shuffle(&mut rng);
    let mut eval_idx = idx[..n_eval].to_vec();
    let mut train_idx = idx[n_eval..].to_vec();
    eval_idx.sort_unstable();
    train_idx.sort_unstable();

    Ok((
        (
            features.select_rows(&train_idx),
            labels.select_rows(&train_idx),
        ),
        (
            features.select_rows(&eval_idx),
            labels.select_rows(&eval_idx),
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_files(dir: &tempfile::TempDir, features: &str, labels: &str) -> (std::path::PathBuf, std::path::PathBuf) {
        let fpath = dir.path().join("features.txt");
        let lpath = dir.path().join("labels.txt");
        std::fs::write(&fpath, features).unwrap();
        std::fs::write(&lpath, labels).unwrap();
        (fpath, lpath)
    }

    #[test]
    fn load_small_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let (fpath, lpath) = write_files(&dir, "2 3 4\n0:1.5 2:0.5\n1:2.0\n", "0,3\n1\n");
        let (features, labels) = load_dataset(&fpath, &lpath).unwrap();
        assert_eq!(features.n_samples(), 2);
        assert_eq!(features.n_features(), 3);
        assert_eq!(features.row(0), &[(0, 1.5), (2, 0.5)]);
        assert_eq!(features.row(1), &[(1, 2.0)]);
        assert_eq!(labels.n_samples(), 2);
        assert_eq!(labels.n_labels(), 4);
        assert_eq!(labels.row(0), &[0, 3]);
        assert_eq!(labels.row(1), &[1]);
    }

    #[test]
    fn blank_label_line_means_zero_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (fpath, lpath) = write_files(&dir, "2 3 4\n0:1.0\n1:1.0\n", "\n2\n");
        let (_, labels) = load_dataset(&fpath, &lpath).unwrap();
        assert!(labels.row(0).is_empty());
        assert_eq!(labels.row(1), &[2]);
    }

    #[test]
    fn duplicate_label_is_a_line_numbered_error() {
        let dir = tempfile::tempdir().unwrap();
        let (fpath, lpath) = write_files(&dir, "1 3 4\n0:1.0\n", "0,0\n");
        match load_dataset(&fpath, &lpath) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 1);
                assert!(message.contains("duplicate"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_feature_index_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (fpath, lpath) = write_files(&dir, "1 3 4\n5:1.0\n", "0\n");
        match load_dataset(&fpath, &lpath) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("out of range"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_increasing_feature_indices_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (fpath, lpath) = write_files(&dir, "1 3 4\n1:1.0 1:2.0\n", "0\n");
        match load_dataset(&fpath, &lpath) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn sample_count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (fpath, lpath) = write_files(&dir, "2 3 4\n0:1.0\n1:1.0\n", "0\n");
        match load_dataset(&fpath, &lpath) {
            Err(Error::SampleCountMismatch { features, labels }) => {
                assert_eq!((features, labels), (2, 1));
            }
            other => panic!("expected mismatch error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (fpath, lpath) = write_files(&dir, "2 3\n0:1.0\n1:1.0\n", "0\n1\n");
        match load_dataset(&fpath, &lpath) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn idf_of_ubiquitous_label_is_nearly_zero() {
        let labels =
            LabelMatrix::from_rows(2, vec![vec![0], vec![0], vec![0], vec![0]]).unwrap();
        let stats = compute_stats(&labels, 1e-12).unwrap();
        assert_eq!(stats.label_freq, vec![4, 0]);
        assert!(stats.idf[0].abs() < 1e-9, "idf = {}", stats.idf[0]);
    }

    #[test]
    fn idf_matches_independent_evaluation() {
        // One label in 1 of 1000 rows, another in none. Expected values
        // computed with a high-precision calculator:
        //   ln(1000 / (1 + 1e-12)) = 6.907755278981137
        //   ln(1000 / 1e-12)       = 34.538776394910685
        let mut rows = vec![Vec::new(); 1000];
        rows[17] = vec![0];
        let labels = LabelMatrix::from_rows(2, rows).unwrap();
        let stats = compute_stats(&labels, 1e-12).unwrap();
        assert!((stats.idf[0] - 6.907755278981137).abs() < 1e-9);
        assert!((stats.idf[1] - 34.538776394910685).abs() < 1e-9);
    }

    #[test]
    fn idf_is_monotone_in_frequency() {
        let rows: Vec<Vec<usize>> = (0..10)
            .map(|i| (0..10).filter(|&l| i >= l).collect())
            .collect();
        let labels = LabelMatrix::from_rows(10, rows).unwrap();
        let stats = compute_stats(&labels, 1e-12).unwrap();
        // label l appears in 10 - l rows: strictly decreasing frequency, so
        // strictly increasing idf.
        for l in 1..10 {
            assert!(stats.label_freq[l] < stats.label_freq[l - 1]);
            assert!(stats.idf[l] > stats.idf[l - 1]);
        }
    }

    #[test]
    fn label_freq_sums_to_total_positives() {
        let labels =
            LabelMatrix::from_rows(5, vec![vec![0, 1], vec![], vec![2, 3, 4], vec![1]]).unwrap();
        let stats = compute_stats(&labels, 1e-12).unwrap();
        assert_eq!(
            stats.label_freq.iter().sum::<u64>(),
            labels.total_positives()
        );
    }

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_samples: 2000,
            n_labels: 100,
            n_features: 120,
            zipf_exponent: 1.2,
            mean_labels_per_sample: 3.0,
            seed: 7,
        }
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_frequencies_are_long_tailed() {
        let (_, labels) = generate_synthetic(&small_spec()).unwrap();
        let stats = compute_stats(&labels, 1e-12).unwrap();
        let mut sorted = stats.label_freq.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        // Rank-frequency curve is non-increasing by construction, and the
        // head outweighs the tail decisively.
        assert!(sorted.windows(2).all(|w| w[0] >= w[1]));
        let head: u64 = sorted[..10].iter().sum();
        let tail: u64 = sorted[90..].iter().sum();
        assert!(
            head > 2 * tail.max(1),
            "head {head} not dominant over tail {tail}"
        );
    }

    #[test]
    fn synthetic_positive_count_tracks_the_requested_mean() {
        let spec = small_spec();
        let (_, labels) = generate_synthetic(&spec).unwrap();
        let expected = spec.mean_labels_per_sample * spec.n_samples as f64;
        let got = labels.total_positives() as f64;
        assert!(
            (got - expected).abs() <= 0.15 * expected,
            "positives {got} outside 15% of {expected}"
        );
    }

    #[test]
    fn synthetic_features_correlate_with_labels() {
        let (features, labels) = generate_synthetic(&small_spec()).unwrap();
        // Two samples sharing a label should, on average, have larger cosine
        // similarity than two samples with disjoint labels.
        let cos = |i: usize, j: usize| {
            let d = SparseFeatureMatrix::dot_rows(features.row(i), features.row(j));
            let n = features.row_norm(i) * features.row_norm(j);
            if n > 0.0 {
                d / n
            } else {
                0.0
            }
        };
        let shares = |i: usize, j: usize| {
            labels
                .row(i)
                .iter()
                .any(|l| labels.row(j).binary_search(l).is_ok())
        };
        let (mut shared_sum, mut shared_n) = (0.0, 0);
        let (mut disjoint_sum, mut disjoint_n) = (0.0, 0);
        for i in 0..200 {
            for j in (i + 1)..200 {
                if labels.row(i).is_empty() || labels.row(j).is_empty() {
                    continue;
                }
                if shares(i, j) {
                    shared_sum += cos(i, j);
                    shared_n += 1;
                } else {
                    disjoint_sum += cos(i, j);
                    disjoint_n += 1;
                }
            }
        }
        let shared_mean = shared_sum / shared_n as f64;
        let disjoint_mean = disjoint_sum / disjoint_n as f64;
        assert!(
            shared_mean > disjoint_mean + 0.1,
            "shared {shared_mean} vs disjoint {disjoint_mean}"
        );
    }

    #[test]
    fn roundtrip_through_the_file_format() {
        let spec = SyntheticSpec {
            n_samples: 50,
            n_labels: 20,
            n_features: 30,
            zipf_exponent: 1.1,
            mean_labels_per_sample: 2.0,
            seed: 3,
        };
        let (features, labels) = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let fpath = dir.path().join("f.txt");
        let lpath = dir.path().join("l.txt");
        save_dataset(&features, &labels, &fpath, &lpath).unwrap();
        let (f2, l2) = load_dataset(&fpath, &lpath).unwrap();
        assert_eq!(features, f2);
        assert_eq!(labels, l2);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let spec = SyntheticSpec {
            n_samples: 10,
            n_labels: 5,
            n_features: 8,
            zipf_exponent: 1.1,
            mean_labels_per_sample: 1.5,
            seed: 11,
        };
        let (features, labels) = generate_synthetic(&spec).unwrap();
        let ((tf, tl), (ef, el)) = train_eval_split(&features, &labels, 0.2, 5).unwrap();
        assert_eq!((tf.n_samples(), ef.n_samples()), (8, 2));
        assert_eq!((tl.n_samples(), el.n_samples()), (8, 2));
        let ((tf2, _), (ef2, _)) = train_eval_split(&features, &labels, 0.2, 5).unwrap();
        assert_eq!(tf, tf2);
        assert_eq!(ef, ef2);
    }

    #[test]
    fn split_partition_is_disjoint_and_complete() {
        let spec = small_spec();
        let (features, labels) = generate_synthetic(&spec).unwrap();
        let ((tf, _), (ef, _)) = train_eval_split(&features, &labels, 0.3, 9).unwrap();
        assert_eq!(tf.n_samples() + ef.n_samples(), features.n_samples());
        // Rows were selected in sorted original order on both sides; verify
        // every original row appears exactly once across the two sides.
        let mut seen = std::collections::HashSet::new();
        for row in tf.rows().iter().chain(ef.rows()) {
            // Feature rows are (almost surely) unique under the generator's
            // noise, so the row content identifies the original sample.
            assert!(seen.insert(format!("{row:?}")));
        }
        assert_eq!(seen.len(), features.n_samples());
    }

    #[test]
    fn tiny_split_is_clamped_to_keep_both_sides_nonempty() {
        let features = SparseFeatureMatrix::from_rows(
            2,
            vec![vec![(0, 1.0)], vec![(1, 1.0)]],
        )
        .unwrap();
        let labels = LabelMatrix::from_rows(2, vec![vec![0], vec![1]]).unwrap();
        let ((tf, _), (ef, _)) = train_eval_split(&features, &labels, 0.999, 1).unwrap();
        assert_eq!((tf.n_samples(), ef.n_samples()), (1, 1));
    }

    #[test]
    fn split_rejects_single_sample() {
        let features = SparseFeatureMatrix::from_rows(1, vec![vec![(0, 1.0)]]).unwrap();
        let labels = LabelMatrix::from_rows(1, vec![vec![0]]).unwrap();
        assert!(train_eval_split(&features, &labels, 0.5, 1).is_err());
    }

    #[test]
    fn from_rows_validates_invariants() {
        assert!(SparseFeatureMatrix::from_rows(2, vec![vec![(2, 1.0)]]).is_err());
        assert!(SparseFeatureMatrix::from_rows(2, vec![vec![(0, 1.0), (0, 2.0)]]).is_err());
        assert!(SparseFeatureMatrix::from_rows(2, vec![vec![(0, f64::NAN)]]).is_err());
        assert!(LabelMatrix::from_rows(2, vec![vec![2]]).is_err());
        assert!(LabelMatrix::from_rows(2, vec![vec![0, 0]]).is_err());
        assert!(LabelMatrix::from_rows(2, vec![vec![1, 0]]).is_err());
    }

    proptest! {
        #[test]
        fn save_load_roundtrip(rows in proptest::collection::vec(
            proptest::collection::btree_map(0usize..12, -1e6f64..1e6, 0..6),
            1..12,
        )) {
            let feature_rows: Vec<Vec<(usize, f64)>> =
                rows.iter().map(|m| m.iter().map(|(&i, &v)| (i, v)).collect()).collect();
            let label_rows: Vec<Vec<usize>> =
                rows.iter().map(|m| m.keys().copied().collect()).collect();
            let features = SparseFeatureMatrix::from_rows(12, feature_rows).unwrap();
            let labels = LabelMatrix::from_rows(12, label_rows).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let fpath = dir.path().join("f.txt");
            let lpath = dir.path().join("l.txt");
            save_dataset(&features, &labels, &fpath, &lpath).unwrap();
            let (f2, l2) = load_dataset(&fpath, &lpath).unwrap();
            prop_assert_eq!(features, f2);
            prop_assert_eq!(labels, l2);
        }
    }
}
