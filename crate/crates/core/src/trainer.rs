//! Training orchestration: epoch loop, early stopping, the four-variant
//! ablation suite, and standalone checkpoint evaluation.
//!
//! Everything here is deliberately single-threaded and seeded so that a run
//! is a pure function of (config, data): rerunning reproduces every float,
//! and a run restored from a saved [`TrainerState`] continues bitwise
//! identically to one that never stopped.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{compute_stats, LabelMatrix, SparseFeatureMatrix};
use crate::error::{Error, Result};
use crate::losses::{composite_loss, LossConfig};
use crate::metrics::ConfusionCounts;
use crate::model::{
    backward, forward, init_mlp, sgd_step, Checkpoint, MlpParams, OptimizerKind, OptimizerState,
    CHECKPOINT_VERSION,
};
use crate::signals::{knn_signal, knn_signal_reference, KnnSignal};
use crate::threshold::{
    compute_threshold_variant, init_params, standardize_logits, threshold_backward_variant,
    ThresholdParams, Variant,
};
use crate::util::derive_seed;

/// Everything a training run depends on besides the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without an eval macro-F1 improvement.
    pub early_stop_patience: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    /// Shared numerical-stability constant (IDF, signal normalization,
    /// standardization).
    pub epsilon: f64,
    /// Neighbors consulted by the evaluation-time local signal.
    pub knn_k: usize,
    /// Size of the training subsample that backs the evaluation-time local
    /// signal (clamped to the training-set size).
    pub knn_ref_size: usize,
    /// Evaluate every `eval_stride`-th epoch (1 = every epoch). Epochs
    /// without an evaluation emit no record.
    pub eval_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Adaptive,
            hidden_dim: 64,
            batch_size: 128,
            max_epochs: 1500,
            early_stop_patience: 20,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Sgd,
            loss: LossConfig::default(),
            epsilon: 1e-12,
            knn_k: 10,
            knn_ref_size: 2048,
            eval_stride: 1,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("hidden_dim must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("max_epochs must be >= 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::InvalidArgument(
                "early_stop_patience must be >= 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate must be finite and positive".into(),
            ));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(
                "epsilon must be finite and positive".into(),
            ));
        }
        if self.knn_k == 0 {
            return Err(Error::InvalidArgument("knn_k must be >= 1".into()));
        }
        if self.knn_ref_size == 0 {
            return Err(Error::InvalidArgument("knn_ref_size must be >= 1".into()));
        }
        if self.eval_stride == 0 {
            return Err(Error::InvalidArgument("eval_stride must be >= 1".into()));
        }
        self.loss.validate()
    }

    /// SHA-256 over the canonical JSON encoding; stamped into checkpoints so
    /// a saved model can be traced back to the exact configuration.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// The loss the variant actually trains with. A static baseline has no
    /// threshold to margin against, so its margin term is dropped.
    fn effective_loss(&self) -> LossConfig {
        let mut loss = self.loss.clone();
        if self.variant == Variant::Static {
            loss.margin_weight = 0.0;
        }
        loss
    }
}

/// One evaluated epoch: training-loss components, eval metrics, and the
/// threshold-weight statistics that the weight-dynamics plots are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_total: f64,
    pub train_bce: f64,
    /// Unweighted margin component (multiply by margin_weight for its share
    /// of the total).
    pub train_margin: f64,
    pub train_macro_f1: f64,
    pub eval_macro_f1: f64,
    pub eval_micro_f1: f64,
    pub eval_bce: f64,
    pub eval_positive_ratio: f64,
    pub alpha_mean: f64,
    pub alpha_std: f64,
    pub beta_mean: f64,
    pub beta_std: f64,
    /// Effective blend weight: sigmoid of the raw parameter for the adaptive
    /// variant, the pinned constant (1 or 0) for the single-signal ablations.
    pub lambda: f64,
}

impl EpochRecord {
    fn is_finite(&self) -> bool {
        [
            self.train_total,
            self.train_bce,
            self.train_margin,
            self.train_macro_f1,
            self.eval_macro_f1,
            self.eval_micro_f1,
            self.eval_bce,
            self.eval_positive_ratio,
            self.alpha_mean,
            self.alpha_std,
            self.beta_mean,
            self.beta_std,
            self.lambda,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Completed training run for one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub config_hash: String,
    /// Every evaluated epoch, in order.
    pub history: Vec<EpochRecord>,
    /// Epoch number whose checkpoint was kept.
    pub best_epoch: usize,
    /// The best epoch's record; reported as the run's final result so early
    /// stopping never degrades the outcome.
    pub final_record: EpochRecord,
    pub checkpoint: Checkpoint,
    pub stopped_early: bool,
    /// Evaluation rows with zero feature norm (no local signal available).
    pub eval_zero_norm_rows: usize,
}

/// Serializable snapshot of a paused run; restoring and continuing matches
/// an uninterrupted run bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub config_hash: String,
    /// Epochs completed so far.
    pub epoch: usize,
    pub mlp: MlpParams,
    pub thresholds: ThresholdParams,
    pub optimizer: OptimizerState,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub best_mlp: MlpParams,
    pub best_thresholds: ThresholdParams,
    pub history: Vec<EpochRecord>,
}

impl TrainerState {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)
            .map_err(|e| Error::Checkpoint(format!("{path:?}: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{path:?}: {e}")))
    }
}

struct TrainPass {
    total: f64,
    bce: f64,
    margin: f64,
    confusion: ConfusionCounts,
}

/// Owns one variant's parameters, optimizer, and early-stopping bookkeeping.
pub struct Trainer {
    config: TrainConfig,
    loss: LossConfig,
    train_features: SparseFeatureMatrix,
    train_labels: LabelMatrix,
    eval_features: SparseFeatureMatrix,
    eval_labels: LabelMatrix,
    idf: Vec<f64>,
    /// Training subsample backing the evaluation-time local signal; only
    /// built for variants that consult it.
    reference: Option<(SparseFeatureMatrix, LabelMatrix)>,
    /// The evaluation set's local signal is independent of the parameters,
    /// so it is computed once and sliced per batch.
    eval_knn: Option<KnnSignal>,
    eval_zero_norm_rows: usize,
    mlp: MlpParams,
    thresholds: ThresholdParams,
    optimizer: OptimizerState,
    epoch: usize,
    best_epoch: usize,
    best_metric: f64,
    best_mlp: MlpParams,
    best_thresholds: ThresholdParams,
    history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        train_features: SparseFeatureMatrix,
        train_labels: LabelMatrix,
        eval_features: SparseFeatureMatrix,
        eval_labels: LabelMatrix,
    ) -> Result<Self> {
        config.validate()?;
        check_pair("training", &train_features, &train_labels)?;
        check_pair("evaluation", &eval_features, &eval_labels)?;
        if train_features.n_features() != eval_features.n_features() {
            return Err(Error::shape(
                "trainer",
                format!("{} features", train_features.n_features()),
                format!("{} eval features", eval_features.n_features()),
            ));
        }
        if train_labels.n_labels() != eval_labels.n_labels() {
            return Err(Error::shape(
                "trainer",
                format!("{} labels", train_labels.n_labels()),
                format!("{} eval labels", eval_labels.n_labels()),
            ));
        }

        let stats = compute_stats(&train_labels, config.epsilon)?;
        let mlp = init_mlp(
            train_features.n_features(),
            train_labels.n_labels(),
            config.hidden_dim,
            config.seed,
        );
        let thresholds = init_params(train_labels.n_labels(), config.seed);
        let optimizer = OptimizerState::new(config.optimizer, config.learning_rate);

        let (reference, eval_knn, eval_zero_norm_rows) = if config.variant.uses_knn() {
            let reference = reference_subsample(
                &train_features,
                &train_labels,
                config.knn_ref_size,
                derive_seed(config.seed, 0x7265_665f),
            );
            let (signal, diag) = knn_signal_reference(
                &eval_features,
                &reference,
                config.knn_k,
                config.epsilon,
            )?;
            (Some(reference), Some(signal), diag.zero_norm_rows.len())
        } else {
            (None, None, 0)
        };

        let loss = config.effective_loss();
        Ok(Self {
            config,
            loss,
            train_features,
            train_labels,
            eval_features,
            eval_labels,
            idf: stats.idf,
            reference,
            eval_knn,
            eval_zero_norm_rows,
            best_mlp: mlp.clone(),
            best_thresholds: thresholds.clone(),
            mlp,
            thresholds,
            optimizer,
            epoch: 0,
            best_epoch: 0,
            best_metric: -1.0,
            history: Vec::new(),
        })
    }

    /// Rebuild a trainer from a saved state. The config and data must be the
    /// ones the state was produced with; the config hash guards the former.
    pub fn restore(
        config: TrainConfig,
        train_features: SparseFeatureMatrix,
        train_labels: LabelMatrix,
        eval_features: SparseFeatureMatrix,
        eval_labels: LabelMatrix,
        state: TrainerState,
    ) -> Result<Self> {
        if state.config_hash != config.config_hash() {
            return Err(Error::Checkpoint(
                "saved state was produced under a different configuration".into(),
            ));
        }
        let mut trainer = Self::new(
            config,
            train_features,
            train_labels,
            eval_features,
            eval_labels,
        )?;
        if state.mlp.input_dim() != trainer.mlp.input_dim()
            || state.mlp.n_labels() != trainer.mlp.n_labels()
        {
            return Err(Error::Checkpoint(
                "saved state does not match the dataset dimensions".into(),
            ));
        }
        trainer.mlp = state.mlp;
        trainer.thresholds = state.thresholds;
        trainer.optimizer = state.optimizer;
        trainer.epoch = state.epoch;
        trainer.best_epoch = state.best_epoch;
        trainer.best_metric = state.best_metric;
        trainer.best_mlp = state.best_mlp;
        trainer.best_thresholds = state.best_thresholds;
        trainer.history = state.history;
        Ok(trainer)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            config_hash: self.config.config_hash(),
            epoch: self.epoch,
            mlp: self.mlp.clone(),
            thresholds: self.thresholds.clone(),
            optimizer: self.optimizer.clone(),
            best_epoch: self.best_epoch,
            best_metric: self.best_metric,
            best_mlp: self.best_mlp.clone(),
            best_thresholds: self.best_thresholds.clone(),
            history: self.history.clone(),
        }
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.max_epochs
            || (self.epoch > 0 && self.epoch - self.best_epoch >= self.config.early_stop_patience)
    }

    /// Run one training epoch; returns the epoch record when this epoch was
    /// evaluated (per `eval_stride`), `None` otherwise.
    pub fn step_epoch(&mut self) -> Result<Option<EpochRecord>> {
        let epoch = self.epoch + 1;
        let pass = self.train_epoch(epoch)?;
        self.epoch = epoch;

        let evaluate = epoch % self.config.eval_stride == 0 || epoch == self.config.max_epochs;
        if !evaluate {
            return Ok(None);
        }

        let (eval_counts, eval_bce) = self.eval_pass()?;
        let stats = self.thresholds.weight_stats();
        let lambda = match self.config.variant {
            Variant::IdfOnly => 1.0,
            Variant::KnnOnly => 0.0,
            Variant::Adaptive | Variant::Static => stats.lambda,
        };
        let record = EpochRecord {
            epoch,
            train_total: pass.total,
            train_bce: pass.bce,
            train_margin: pass.margin,
            train_macro_f1: pass.confusion.macro_f1(),
            eval_macro_f1: eval_counts.macro_f1(),
            eval_micro_f1: eval_counts.micro_f1(),
            eval_bce,
            eval_positive_ratio: eval_counts.positive_ratio(),
            alpha_mean: stats.alpha_mean,
            alpha_std: stats.alpha_std,
            beta_mean: stats.beta_mean,
            beta_std: stats.beta_std,
            lambda,
        };
        if !record.is_finite() {
            return Err(Error::NonFinite {
                context: format!("epoch {epoch} record"),
            });
        }

        if record.eval_macro_f1 > self.best_metric {
            self.best_metric = record.eval_macro_f1;
            self.best_epoch = epoch;
            self.best_mlp = self.mlp.clone();
            self.best_thresholds = self.thresholds.clone();
        }
        self.history.push(record.clone());
        Ok(Some(record))
    }

    /// Run until `max_epochs` or the early-stopping patience is exhausted,
    /// then package the best checkpoint.
    pub fn run_to_completion(&mut self) -> Result<VariantRun> {
        while !self.is_finished() {
            self.step_epoch()?;
        }
        self.finish_run()
    }

    /// Package the run as completed so far (best checkpoint, full history).
    pub fn finish_run(&self) -> Result<VariantRun> {
        let final_record = self
            .history
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .cloned()
            .ok_or(Error::Empty {
                what: "training history",
            })?;
        Ok(VariantRun {
            variant: self.config.variant,
            config_hash: self.config.config_hash(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            final_record,
            checkpoint: self.make_checkpoint(),
            stopped_early: self.epoch < self.config.max_epochs,
            eval_zero_norm_rows: self.eval_zero_norm_rows,
        })
    }

    fn make_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            variant: self.config.variant,
            config_hash: self.config.config_hash(),
            epsilon: self.config.epsilon,
            knn_k: self.config.knn_k,
            loss: self.loss.clone(),
            mlp: self.best_mlp.clone(),
            thresholds: self.best_thresholds.clone(),
            idf: self.idf.clone(),
            reference: self.reference.clone(),
        }
    }

    fn idf_arg(&self) -> Option<&[f64]> {
        self.config
            .variant
            .uses_idf()
            .then(|| self.idf.as_slice())
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<TrainPass> {
        let n = self.train_features.n_samples();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, 0x6570_0000 + epoch as u64));
        order.shuffle(&mut rng);

        let mut total = 0.0;
        let mut bce = 0.0;
        let mut margin = 0.0;
        let mut cells = 0.0;
        let mut confusion = ConfusionCounts::new(self.train_labels.n_labels());

        for batch in order.chunks(self.config.batch_size) {
            let targets = self.train_labels.dense_rows(batch);
            let (logits, cache) = forward(&self.mlp, &self.train_features, batch)?;
            let knn = if self.config.variant.uses_knn() {
                Some(knn_signal(
                    &self.train_labels.select_rows(batch),
                    self.config.epsilon,
                )?)
            } else {
                None
            };
            let theta = compute_threshold_variant(
                self.config.variant,
                &self.thresholds,
                self.idf_arg(),
                knn.as_ref(),
                batch.len(),
            )?;
            let out = composite_loss(&logits, &theta, &targets, &self.loss, self.config.epsilon)?;
            if !out.total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}"),
                });
            }

            let margins = self.decision_margins(&logits, &theta)?;
            confusion.accumulate(&margins, &targets)?;
            let batch_cells = (batch.len() * self.train_labels.n_labels()) as f64;
            total += out.total * batch_cells;
            bce += out.bce_component * batch_cells;
            margin += out.margin_component * batch_cells;
            cells += batch_cells;

            let grads = backward(&self.mlp, &self.train_features, &cache, &out.d_logits)?;
            let tgrad = threshold_backward_variant(
                self.config.variant,
                &self.thresholds,
                self.idf_arg(),
                knn.as_ref(),
                &out.d_threshold,
            )?;
            sgd_step(
                &mut self.mlp,
                &mut self.thresholds,
                &grads,
                &tgrad,
                &mut self.optimizer,
            )?;
        }

        Ok(TrainPass {
            total: total / cells,
            bce: bce / cells,
            margin: margin / cells,
            confusion,
        })
    }

    fn eval_pass(&self) -> Result<(ConfusionCounts, f64)> {
        let n = self.eval_features.n_samples();
        let mut confusion = ConfusionCounts::new(self.eval_labels.n_labels());
        let mut bce = 0.0;
        let mut cells = 0.0;

        let mut start = 0;
        while start < n {
            let end = (start + self.config.batch_size).min(n);
            let batch: Vec<usize> = (start..end).collect();
            let targets = self.eval_labels.dense_rows(&batch);
            let (logits, _) = forward(&self.mlp, &self.eval_features, &batch)?;
            let knn = self.eval_knn.as_ref().map(|sig| KnnSignal {
                values: sig.values.slice(s![start..end, ..]).to_owned(),
                epsilon: sig.epsilon,
            });
            let theta = compute_threshold_variant(
                self.config.variant,
                &self.thresholds,
                self.idf_arg(),
                knn.as_ref(),
                batch.len(),
            )?;
            let out = composite_loss(&logits, &theta, &targets, &self.loss, self.config.epsilon)?;
            let margins = self.decision_margins(&logits, &theta)?;
            confusion.accumulate(&margins, &targets)?;
            let batch_cells = (batch.len() * self.eval_labels.n_labels()) as f64;
            bce += out.bce_component * batch_cells;
            cells += batch_cells;
            start = end;
        }
        Ok((confusion, bce / cells))
    }

    /// `z - theta` under the same logit treatment the loss saw; a cell is
    /// predicted positive iff this is strictly positive.
    fn decision_margins(
        &self,
        logits: &Array2<f64>,
        theta: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        if self.loss.use_standardization {
            let standardized = standardize_logits(logits, self.config.epsilon)?;
            Ok(&standardized.values - theta)
        } else {
            Ok(logits - theta)
        }
    }
}

fn check_pair(
    what: &'static str,
    features: &SparseFeatureMatrix,
    labels: &LabelMatrix,
) -> Result<()> {
    if features.n_samples() == 0 {
        return Err(Error::Empty { what });
    }
    if features.n_samples() != labels.n_samples() {
        return Err(Error::SampleCountMismatch {
            features: features.n_samples(),
            labels: labels.n_samples(),
        });
    }
    Ok(())
}

/// Fixed random subsample of the training set (without replacement), rows
/// kept in ascending order for reproducibility.
fn reference_subsample(
    features: &SparseFeatureMatrix,
    labels: &LabelMatrix,
    size: usize,
    seed: u64,
) -> (SparseFeatureMatrix, LabelMatrix) {
    let n = features.n_samples();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(size.min(n));
    idx.sort_unstable();
    (features.select_rows(&idx), labels.select_rows(&idx))
}

/// Train one variant to completion.
pub fn run_variant(
    config: TrainConfig,
    train_features: SparseFeatureMatrix,
    train_labels: LabelMatrix,
    eval_features: SparseFeatureMatrix,
    eval_labels: LabelMatrix,
) -> Result<VariantRun> {
    let mut trainer = Trainer::new(
        config,
        train_features,
        train_labels,
        eval_features,
        eval_labels,
    )?;
    trainer.run_to_completion()
}

/// Train all four variants on the same data with the same seeds. Each run is
/// fully independent — nothing learned by one variant leaks into the next.
pub fn run_ablation_suite(
    base_config: &TrainConfig,
    train_features: &SparseFeatureMatrix,
    train_labels: &LabelMatrix,
    eval_features: &SparseFeatureMatrix,
    eval_labels: &LabelMatrix,
) -> Result<Vec<VariantRun>> {
    let mut runs = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut config = base_config.clone();
        config.variant = variant;
        runs.push(run_variant(
            config,
            train_features.clone(),
            train_labels.clone(),
            eval_features.clone(),
            eval_labels.clone(),
        )?);
    }
    Ok(runs)
}

/// Metrics of a checkpoint on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub n_samples: usize,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub bce: f64,
    pub positive_ratio: f64,
    pub zero_norm_rows: usize,
}

/// Evaluate a saved checkpoint on a labeled dataset. Self-contained: the
/// IDF vector and the local-signal reference set travel inside the
/// checkpoint, so nothing from the original training run is needed.
pub fn eval_checkpoint(
    checkpoint: &Checkpoint,
    features: &SparseFeatureMatrix,
    labels: &LabelMatrix,
    batch_size: usize,
) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    check_pair("evaluation", features, labels)?;
    if features.n_features() != checkpoint.mlp.input_dim() {
        return Err(Error::shape(
            "eval",
            format!("{} features", checkpoint.mlp.input_dim()),
            format!("{} features", features.n_features()),
        ));
    }
    if labels.n_labels() != checkpoint.mlp.n_labels() {
        return Err(Error::shape(
            "eval",
            format!("{} labels", checkpoint.mlp.n_labels()),
            format!("{} labels", labels.n_labels()),
        ));
    }

    let variant = checkpoint.variant;
    let (full_knn, zero_norm_rows) = if variant.uses_knn() {
        let reference = checkpoint.reference.as_ref().ok_or_else(|| {
            Error::Checkpoint(format!(
                "{variant} checkpoint is missing its local-signal reference set"
            ))
        })?;
        let (signal, diag) =
            knn_signal_reference(features, reference, checkpoint.knn_k, checkpoint.epsilon)?;
        (Some(signal), diag.zero_norm_rows.len())
    } else {
        (None, 0)
    };
    let idf_arg = variant.uses_idf().then(|| checkpoint.idf.as_slice());

    let n = features.n_samples();
    let mut confusion = ConfusionCounts::new(labels.n_labels());
    let mut bce = 0.0;
    let mut cells = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let batch: Vec<usize> = (start..end).collect();
        let targets = labels.dense_rows(&batch);
        let (logits, _) = forward(&checkpoint.mlp, features, &batch)?;
        let knn = full_knn.as_ref().map(|sig| KnnSignal {
            values: sig.values.slice(s![start..end, ..]).to_owned(),
            epsilon: sig.epsilon,
        });
        let theta = compute_threshold_variant(
            variant,
            &checkpoint.thresholds,
            idf_arg,
            knn.as_ref(),
            batch.len(),
        )?;
        let out = composite_loss(&logits, &theta, &targets, &checkpoint.loss, checkpoint.epsilon)?;
        let margins = if checkpoint.loss.use_standardization {
            &standardize_logits(&logits, checkpoint.epsilon)?.values - &theta
        } else {
            &logits - &theta
        };
        confusion.accumulate(&margins, &targets)?;
        let batch_cells = (batch.len() * labels.n_labels()) as f64;
        bce += out.bce_component * batch_cells;
        cells += batch_cells;
        start = end;
    }

    Ok(EvalReport {
        variant,
        n_samples: n,
        macro_f1: confusion.macro_f1(),
        micro_f1: confusion.micro_f1(),
        bce: bce / cells,
        positive_ratio: confusion.positive_ratio(),
        zero_norm_rows,
    })
}
