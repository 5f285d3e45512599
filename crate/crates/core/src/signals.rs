//! Threshold input signals: the global IDF rarity vector and the batch-level
//! soft-KNN label-agreement matrix.

use ndarray::Array2;

use crate::dataset::{DatasetStats, LabelMatrix, SparseFeatureMatrix};
use crate::error::{Error, Result};

/// Dense per-instance, per-label local agreement scores.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnSignal {
    /// B x L score matrix aligned with model logits.
    pub values: Array2<f64>,
    /// Guard used in the row normalization.
    pub epsilon: f64,
}

/// Soft-KNN signal of a training batch from its own ground-truth labels.
///
/// Three steps: the shared-label count matrix `Y Y^T`, row normalization by
/// each sample's own label count (plus `epsilon`), and propagation back to
/// label space by multiplying with `Y`. Rows with zero labels come out
/// all-zero. Output is dense B x L.
pub fn knn_signal(batch_labels: &LabelMatrix, epsilon: f64) -> Result<KnnSignal> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    let b = batch_labels.n_samples();
    if b == 0 {
        return Err(Error::Empty { what: "batch" });
    }
    let l = batch_labels.n_labels();
    let rows = batch_labels.rows();

    let mut values = Array2::zeros((b, l));
    for i in 0..b {
        let denom = rows[i].len() as f64 + epsilon;
        for row_j in rows {
            let shared = count_shared(&rows[i], row_j);
            if shared == 0 {
                continue;
            }
            let norm = shared as f64 / denom;
            for &lab in row_j {
                values[[i, lab]] += norm;
            }
        }
    }
    Ok(KnnSignal { values, epsilon })
}

fn count_shared(a: &[usize], b: &[usize]) -> usize {
    let mut n = 0;
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Indices of batch rows that had zero feature norm and therefore produced
/// an all-zero signal row.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReferenceDiagnostics {
    pub zero_norm_rows: Vec<usize>,
}

/// Evaluation-time substitute for [`knn_signal`]: labels of the evaluated
/// batch are unknown, so each batch row is matched against a fixed reference
/// set by cosine similarity over features.
///
/// The `k` most similar reference rows (ties broken toward the lower
/// reference index) contribute a similarity-weighted average of their binary
/// label vectors, with the weights normalized to `sum + epsilon`. Negative
/// cosines are treated as zero similarity so scores stay non-negative.
pub fn knn_signal_reference(
    batch_features: &SparseFeatureMatrix,
    reference: &(SparseFeatureMatrix, LabelMatrix),
    k: usize,
    epsilon: f64,
) -> Result<(KnnSignal, ReferenceDiagnostics)> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    let (ref_features, ref_labels) = reference;
    let r = ref_features.n_samples();
    if r == 0 {
        return Err(Error::Empty { what: "reference set" });
    }
    if ref_labels.n_samples() != r {
        return Err(Error::SampleCountMismatch {
            features: r,
            labels: ref_labels.n_samples(),
        });
    }
    if batch_features.n_features() != ref_features.n_features() {
        return Err(Error::shape(
            "knn_signal_reference",
            format!("feature dim {}", ref_features.n_features()),
            format!("feature dim {}", batch_features.n_features()),
        ));
    }

    let ref_norms: Vec<f64> = (0..r).map(|j| ref_features.row_norm(j)).collect();
    let b = batch_features.n_samples();
    let l = ref_labels.n_labels();
    let mut values = Array2::zeros((b, l));
    let mut diagnostics = ReferenceDiagnostics::default();

    let k = k.min(r);
    for i in 0..b {
        let row = batch_features.row(i);
        let norm = batch_features.row_norm(i);
        if norm == 0.0 {
            diagnostics.zero_norm_rows.push(i);
            continue;
        }
        let mut sims: Vec<(f64, usize)> = Vec::with_capacity(r);
        for j in 0..r {
            let s = if ref_norms[j] == 0.0 {
                0.0
            } else {
                (SparseFeatureMatrix::dot_rows(row, ref_features.row(j)) / (norm * ref_norms[j]))
                    .max(0.0)
            };
            sims.push((s, j));
        }
        // Highest similarity first; equal similarities prefer the lower index.
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let top = &sims[..k];
        let denom: f64 = top.iter().map(|&(s, _)| s).sum::<f64>() + epsilon;
        for &(s, j) in top {
            if s == 0.0 {
                continue;
            }
            let w = s / denom;
            for &lab in ref_labels.row(j) {
                values[[i, lab]] += w;
            }
        }
    }
    Ok((KnnSignal { values, epsilon }, diagnostics))
}

/// The cached global rarity vector; single entry point for threshold code.
pub fn idf_signal(stats: &DatasetStats) -> &[f64] {
    &stats.idf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::compute_stats;
    use proptest::prelude::*;

    fn labels(n_labels: usize, rows: Vec<Vec<usize>>) -> LabelMatrix {
        LabelMatrix::from_rows(n_labels, rows).unwrap()
    }

    /// Literal transcription of the three signal steps, kept deliberately
    /// naive so it can serve as an oracle for the production path.
    fn brute_force_signal(batch: &LabelMatrix, epsilon: f64) -> Array2<f64> {
        let b = batch.n_samples();
        let l = batch.n_labels();
        let mut dense = Array2::<f64>::zeros((b, l));
        for i in 0..b {
            for &lab in batch.row(i) {
                dense[[i, lab]] = 1.0;
            }
        }
        let mut raw = Array2::<f64>::zeros((b, b));
        for i in 0..b {
            for j in 0..b {
                for lab in 0..l {
                    raw[[i, j]] += dense[[i, lab]] * dense[[j, lab]];
                }
            }
        }
        let mut norm = Array2::<f64>::zeros((b, b));
        for i in 0..b {
            let count: f64 = (0..l).map(|lab| dense[[i, lab]]).sum();
            for j in 0..b {
                norm[[i, j]] = raw[[i, j]] / (count + epsilon);
            }
        }
        let mut out = Array2::<f64>::zeros((b, l));
        for i in 0..b {
            for lab in 0..l {
                for j in 0..b {
                    out[[i, lab]] += norm[[i, j]] * dense[[j, lab]];
                }
            }
        }
        out
    }

    #[test]
    fn single_row_reproduces_its_own_labels() {
        let signal = knn_signal(&labels(3, vec![vec![0, 2]]), 1e-12).unwrap();
        assert!((signal.values[[0, 0]] - 1.0).abs() < 1e-9);
        assert_eq!(signal.values[[0, 1]], 0.0);
        assert!((signal.values[[0, 2]] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_row_example_matches_hand_computation() {
        // Y = [[1,1,0],[0,1,1]]: raw = [[2,1],[1,2]], norm -> [[1,.5],[.5,1]],
        // propagated -> [[1,1.5,0.5],[0.5,1.5,1]].
        let signal = knn_signal(&labels(3, vec![vec![0, 1], vec![1, 2]]), 1e-12).unwrap();
        let expected = [[1.0, 1.5, 0.5], [0.5, 1.5, 1.0]];
        for i in 0..2 {
            for l in 0..3 {
                assert!(
                    (signal.values[[i, l]] - expected[i][l]).abs() < 1e-9,
                    "({i},{l}): {} vs {}",
                    signal.values[[i, l]],
                    expected[i][l]
                );
            }
        }
    }

    #[test]
    fn zero_label_row_produces_zero_output_row() {
        let signal = knn_signal(&labels(3, vec![vec![0, 1], vec![], vec![1]]), 1e-12).unwrap();
        for l in 0..3 {
            assert_eq!(signal.values[[1, l]], 0.0);
        }
        // The zero-label row also contributes nothing to other rows.
        assert!(signal.values[[0, 0]] > 0.0);
    }

    #[test]
    fn matches_brute_force_on_seeded_batches() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let b = rng.random_range(1..=8);
            let l = rng.random_range(1..=10);
            let rows: Vec<Vec<usize>> = (0..b)
                .map(|_| (0..l).filter(|_| rng.random::<f64>() < 0.4).collect())
                .collect();
            let batch = labels(l, rows);
            let signal = knn_signal(&batch, 1e-12).unwrap();
            let oracle = brute_force_signal(&batch, 1e-12);
            for (a, e) in signal.values.iter().zip(oracle.iter()) {
                assert!((a - e).abs() < 1e-9, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn output_entries_are_bounded_by_max_label_count() {
        let batch = labels(4, vec![vec![0, 1, 2, 3], vec![0, 1], vec![2]]);
        let signal = knn_signal(&batch, 1e-12).unwrap();
        let bound = 4.0; // max row sum of Y
        for &v in signal.values.iter() {
            assert!((0.0..=bound).contains(&v));
        }
    }

    proptest! {
        #[test]
        fn row_permutation_equivariance(perm_seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let rows = vec![vec![0, 1], vec![1, 2], vec![], vec![0, 3], vec![2]];
            let batch = labels(4, rows.clone());
            let base = knn_signal(&batch, 1e-12).unwrap();

            let mut order: Vec<usize> = (0..rows.len()).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
            order.shuffle(&mut rng);
            let permuted_batch = batch.select_rows(&order);
            let permuted = knn_signal(&permuted_batch, 1e-12).unwrap();

            for (new_i, &old_i) in order.iter().enumerate() {
                for l in 0..4 {
                    prop_assert!(
                        (permuted.values[[new_i, l]] - base.values[[old_i, l]]).abs() < 1e-12
                    );
                }
            }
        }
    }

    fn features(n: usize, rows: Vec<Vec<(usize, f64)>>) -> SparseFeatureMatrix {
        SparseFeatureMatrix::from_rows(n, rows).unwrap()
    }

    #[test]
    fn exact_reference_match_dominates_with_k_one() {
        let reference = (
            features(3, vec![vec![(0, 2.0)], vec![(1, 1.0)]]),
            labels(4, vec![vec![1, 3], vec![0]]),
        );
        let batch = features(3, vec![vec![(0, 5.0)]]); // colinear with reference row 0
        let (signal, diag) = knn_signal_reference(&batch, &reference, 1, 1e-12).unwrap();
        assert!(diag.zero_norm_rows.is_empty());
        let expected = [0.0, 1.0, 0.0, 1.0];
        for l in 0..4 {
            assert!((signal.values[[0, l]] - expected[l]).abs() < 1e-9);
        }
    }

    #[test]
    fn orthogonal_references_produce_zero_row() {
        let reference = (
            features(3, vec![vec![(0, 1.0)], vec![(1, 1.0)]]),
            labels(2, vec![vec![0], vec![1]]),
        );
        let batch = features(3, vec![vec![(2, 1.0)]]);
        let (signal, _) = knn_signal_reference(&batch, &reference, 2, 1e-12).unwrap();
        for l in 0..2 {
            assert_eq!(signal.values[[0, l]], 0.0);
        }
    }

    #[test]
    fn weighted_average_matches_hand_computation() {
        // Unit-norm batch row engineered for cosines of exactly 0.8 and 0.2
        // against the two unit reference rows.
        let reference = (
            features(3, vec![vec![(0, 1.0)], vec![(1, 1.0)]]),
            labels(2, vec![vec![0], vec![1]]),
        );
        let batch = features(3, vec![vec![(0, 0.8), (1, 0.2), (2, 0.32f64.sqrt())]]);
        let (signal, _) = knn_signal_reference(&batch, &reference, 2, 1e-12).unwrap();
        assert!((signal.values[[0, 0]] - 0.8).abs() < 1e-9);
        assert!((signal.values[[0, 1]] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn similarity_ties_prefer_the_lower_reference_index() {
        // Both references are identical, so similarities tie at 1; k=1 must
        // pick reference row 0.
        let reference = (
            features(2, vec![vec![(0, 1.0)], vec![(0, 2.0)]]),
            labels(2, vec![vec![0], vec![1]]),
        );
        let batch = features(2, vec![vec![(0, 3.0)]]);
        let (signal, _) = knn_signal_reference(&batch, &reference, 1, 1e-12).unwrap();
        assert!((signal.values[[0, 0]] - 1.0).abs() < 1e-9);
        assert_eq!(signal.values[[0, 1]], 0.0);
    }

    #[test]
    fn zero_norm_batch_row_is_flagged_and_zeroed() {
        let reference = (
            features(2, vec![vec![(0, 1.0)]]),
            labels(2, vec![vec![0]]),
        );
        let batch = features(2, vec![vec![], vec![(0, 1.0)]]);
        let (signal, diag) = knn_signal_reference(&batch, &reference, 1, 1e-12).unwrap();
        assert_eq!(diag.zero_norm_rows, vec![0]);
        assert_eq!(signal.values[[0, 0]], 0.0);
        assert!(signal.values[[1, 0]] > 0.9);
    }

    #[test]
    fn negative_cosines_are_clamped_to_zero() {
        let reference = (
            features(2, vec![vec![(0, 1.0)]]),
            labels(1, vec![vec![0]]),
        );
        let batch = features(2, vec![vec![(0, -1.0)]]);
        let (signal, _) = knn_signal_reference(&batch, &reference, 1, 1e-12).unwrap();
        assert_eq!(signal.values[[0, 0]], 0.0);
    }

    #[test]
    fn idf_signal_returns_the_cached_vector() {
        let batch = labels(3, vec![vec![0], vec![0, 1]]);
        let stats = compute_stats(&batch, 1e-12).unwrap();
        assert_eq!(idf_signal(&stats), stats.idf.as_slice());
        // Rarer labels score higher.
        assert!(stats.idf[1] > stats.idf[0]);
        assert!(stats.idf[2] > stats.idf[1]);
    }
}
