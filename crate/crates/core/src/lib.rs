//! Multi-label classification with learned per-label, per-instance decision
//! thresholds.
//!
//! Instead of cutting every label's sigmoid at 0.5, each label `l` of each
//! instance `x` gets its own threshold
//!
//! ```text
//! theta[l](x) = lambda * alpha[l] * idf[l]
//!             + (1 - lambda) * beta[l] * knn[l](x)
//!             + bias[l]
//! ```
//!
//! blending a global rarity signal (inverse document frequency of the label)
//! with a local agreement signal (soft K-nearest-neighbor label prevalence).
//! `alpha`, `beta`, `bias`, and the blend weight `lambda` are trained jointly
//! with the classifier by gradient descent; thresholds enter the loss by
//! shifting the logits, so the whole construction stays differentiable.
//!
//! The crate provides the full desk-scale training stack around that idea:
//!
//! - [`dataset`]: sparse feature/label matrices, a text file format, IDF
//!   statistics, and a synthetic long-tailed corpus generator;
//! - [`signals`]: the soft-KNN and IDF threshold signals;
//! - [`threshold`]: threshold parameters, the four model variants, and
//!   analytic gradients;
//! - [`losses`]: stable BCE-with-logits plus a threshold-margin hinge;
//! - [`model`]: a shallow sparse-input MLP with hand-rolled backprop and
//!   SGD/Adam updates;
//! - [`metrics`]: streaming macro/micro-F1 and positive-rate accounting;
//! - [`trainer`]: seeded, resumable training with early stopping and the
//!   four-variant ablation suite;
//! - [`artifacts`]: CSV tables and SVG line plots for run inspection.
//!
//! Determinism is a design constraint throughout: every random choice flows
//! from an explicit seed, training is single-threaded, and identical
//! (config, data, seed) triples reproduce results bit for bit.

pub mod artifacts;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod signals;
pub mod threshold;
pub mod trainer;
mod util;

pub use artifacts::{emit_artifacts, plot_series_keys, read_csv, CsvTable};
pub use dataset::{
    compute_stats, generate_synthetic, load_dataset, save_dataset, train_eval_split, DatasetStats,
    LabelMatrix, SparseFeatureMatrix, SyntheticSpec,
};
pub use error::{Error, Result};
pub use losses::{bce_with_logits, composite_loss, margin_loss, LossConfig, LossOutput};
pub use metrics::ConfusionCounts;
pub use model::{
    backward, forward, init_mlp, param_count, sgd_step, Checkpoint, ForwardCache, MlpGrads,
    MlpParams, OptimizerKind, OptimizerState,
};
pub use signals::{idf_signal, knn_signal, knn_signal_reference, KnnSignal, ReferenceDiagnostics};
pub use threshold::{
    compute_threshold, compute_threshold_variant, init_params, standardize_logits,
    threshold_backward, threshold_backward_variant, StandardizedLogits, ThresholdGrad,
    ThresholdParams, Variant, WeightStats,
};
pub use trainer::{
    eval_checkpoint, run_ablation_suite, run_variant, EpochRecord, EvalReport, TrainConfig,
    Trainer, TrainerState, VariantRun,
};
pub use util::{sigmoid, softplus};
