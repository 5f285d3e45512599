//! Benchmarks for the hot paths of a training epoch: the train-time and
//! reference-set neighbor signals, threshold blending, the composite loss,
//! and the sparse MLP forward/backward pair.
//!
//! Run with `cargo bench --package threshmix-bench`.

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use threshmix::{
    backward, composite_loss, compute_stats, compute_threshold, forward, generate_synthetic,
    init_mlp, init_params, knn_signal, knn_signal_reference, threshold_backward, LabelMatrix,
    LossConfig, SparseFeatureMatrix, SyntheticSpec, ThresholdParams,
};

const EPSILON: f64 = 1e-12;
const BATCH: usize = 128;
const LABELS: usize = 256;
const FEATURES: usize = 384;
const HIDDEN: usize = 64;

/// A corpus sized like one batch of the default training configuration.
fn corpus(n_samples: usize, seed: u64) -> (SparseFeatureMatrix, LabelMatrix) {
    let spec = SyntheticSpec {
        n_samples,
        n_labels: LABELS,
        n_features: FEATURES,
        zipf_exponent: 1.3,
        mean_labels_per_sample: 3.0,
        seed,
    };
    generate_synthetic(&spec).expect("synthetic corpus")
}

fn dense_targets(labels: &LabelMatrix, rows: &[usize]) -> Array2<f64> {
    labels.dense_rows(rows)
}

fn random_matrix(shape: (usize, usize), seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn(shape, |_| rng.random_range(-2.0..2.0))
}

fn seeded_params(n_labels: usize) -> ThresholdParams {
    let mut params = init_params(n_labels, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for l in 0..n_labels {
        params.alpha[l] = rng.random_range(0.5..1.5);
        params.beta[l] = rng.random_range(0.5..1.5);
        params.bias[l] = rng.random_range(-0.2..0.2);
    }
    params.lambda_raw = 0.3;
    params
}

fn bench_signals(c: &mut Criterion) {
    let (features, labels) = corpus(BATCH, 11);
    let reference = corpus(2048, 13);
    let batch_labels = LabelMatrix::from_rows(
        labels.n_labels(),
        (0..BATCH).map(|i| labels.row(i).to_vec()).collect(),
    )
    .expect("batch labels");

    c.bench_function("knn_signal_batch_128x256", |b| {
        b.iter(|| knn_signal(black_box(&batch_labels), EPSILON).unwrap())
    });
    c.bench_function("knn_reference_128_rows_vs_2048", |b| {
        b.iter(|| knn_signal_reference(black_box(&features), &reference, 10, EPSILON).unwrap())
    });
}

fn bench_thresholds(c: &mut Criterion) {
    let (_, labels) = corpus(BATCH, 17);
    let params = seeded_params(LABELS);
    let stats = compute_stats(&labels, EPSILON).expect("stats");
    let idf = stats.idf.clone();
    let knn = knn_signal(&labels, EPSILON).expect("knn");
    let upstream = random_matrix((BATCH, LABELS), 19);

    c.bench_function("threshold_compute_128x256", |b| {
        b.iter(|| compute_threshold(black_box(&params), &idf, &knn).unwrap())
    });
    c.bench_function("threshold_backward_128x256", |b| {
        b.iter(|| threshold_backward(black_box(&params), &idf, &knn, &upstream).unwrap())
    });
}

fn bench_loss(c: &mut Criterion) {
    let (_, labels) = corpus(BATCH, 23);
    let logits = random_matrix((BATCH, LABELS), 29);
    let thresholds = random_matrix((BATCH, LABELS), 31);
    let targets = dense_targets(&labels, &(0..BATCH).collect::<Vec<_>>());
    let config = LossConfig::default();

    c.bench_function("composite_loss_128x256", |b| {
        b.iter(|| {
            composite_loss(
                black_box(&logits),
                &thresholds,
                &targets,
                &config,
                EPSILON,
            )
            .unwrap()
        })
    });
}

fn bench_model(c: &mut Criterion) {
    let (features, _) = corpus(BATCH, 37);
    let mlp = init_mlp(FEATURES, LABELS, HIDDEN, 41);
    let batch: Vec<usize> = (0..BATCH).collect();
    let d_logits = random_matrix((BATCH, LABELS), 43);

    c.bench_function("mlp_forward_128x384x64x256", |b| {
        b.iter(|| forward(black_box(&mlp), &features, &batch).unwrap())
    });
    c.bench_function("mlp_backward_128x384x64x256", |b| {
        let (_, cache) = forward(&mlp, &features, &batch).expect("forward");
        b.iter(|| backward(black_box(&mlp), &features, &cache, &d_logits).unwrap())
    });
}

criterion_group!(
    benches,
    bench_signals,
    bench_thresholds,
    bench_loss,
    bench_model
);
criterion_main!(benches);
