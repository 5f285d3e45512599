//! Shallow MLP backbone with explicit forward/backward passes and the
//! optimizer that updates both the network and the threshold parameters.
//!
//! One hidden relu layer: `logits = W2 * relu(W1 * x + b1) + b2`. The first
//! layer exploits feature sparsity; everything downstream is dense.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelMatrix, SparseFeatureMatrix};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::threshold::{ThresholdGrad, ThresholdParams, Variant};
use crate::util::derive_seed;

/// MLP weights. `w1` is hidden x D, `w2` is L x hidden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpParams {
    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_labels(&self) -> usize {
        self.w2.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// Total parameter count for a given architecture, so configs can target a
/// parameter budget before allocating anything.
pub fn param_count(input_dim: usize, n_labels: usize, hidden_dim: usize) -> usize {
    input_dim * hidden_dim + hidden_dim + hidden_dim * n_labels + n_labels
}

/// Scaled uniform initialization with bound `1/sqrt(fan_in)` on the weights
/// and zero biases. Deterministic per seed.
pub fn init_mlp(input_dim: usize, n_labels: usize, hidden_dim: usize, seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6d6c70));
    let bound1 = 1.0 / (input_dim as f64).sqrt();
    let w1 = Array2::from_shape_fn((hidden_dim, input_dim), |_| {
        rng.random_range(-bound1..bound1)
    });
    let bound2 = 1.0 / (hidden_dim as f64).sqrt();
    let w2 = Array2::from_shape_fn((n_labels, hidden_dim), |_| {
        rng.random_range(-bound2..bound2)
    });
    MlpParams {
        w1,
        b1: Array1::zeros(hidden_dim),
        w2,
        b2: Array1::zeros(n_labels),
    }
}

/// Activations retained by [`forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Post-relu hidden activations, B x hidden.
    hidden: Array2<f64>,
    /// Dataset row indices the batch was built from.
    batch: Vec<usize>,
}

/// Forward pass over the given dataset rows. Returns B x L logits and the
/// cache for [`backward`].
pub fn forward(
    params: &MlpParams,
    features: &SparseFeatureMatrix,
    batch: &[usize],
) -> Result<(Array2<f64>, ForwardCache)> {
    if features.n_features() != params.input_dim() {
        return Err(Error::shape(
            "forward",
            format!("feature dim {}", params.input_dim()),
            format!("feature dim {}", features.n_features()),
        ));
    }
    let b = batch.len();
    let h = params.hidden_dim();

    let mut hidden = Array2::zeros((b, h));
    for (bi, &row_idx) in batch.iter().enumerate() {
        if row_idx >= features.n_samples() {
            return Err(Error::InvalidArgument(format!(
                "batch row {row_idx} out of range ({} samples)",
                features.n_samples()
            )));
        }
        let mut pre = params.b1.clone();
        for &(j, v) in features.row(row_idx) {
            for (slot, &w) in pre.iter_mut().zip(params.w1.column(j)) {
                *slot += v * w;
            }
        }
        for (slot, p) in hidden.row_mut(bi).iter_mut().zip(pre.iter()) {
            *slot = p.max(0.0);
        }
    }

    let mut logits = hidden.dot(&params.w2.t());
    for mut row in logits.rows_mut() {
        row += &params.b2;
    }
    Ok((
        logits,
        ForwardCache {
            hidden,
            batch: batch.to_vec(),
        },
    ))
}

/// Gradients for [`MlpParams`], shape-matched.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Backward pass under the relu subgradient-zero-at-zero convention.
pub fn backward(
    params: &MlpParams,
    features: &SparseFeatureMatrix,
    cache: &ForwardCache,
    d_logits: &Array2<f64>,
) -> Result<MlpGrads> {
    let b = cache.batch.len();
    let expected = (b, params.n_labels());
    if d_logits.dim() != expected {
        return Err(Error::shape(
            "backward",
            format!("{expected:?}"),
            format!("{:?}", d_logits.dim()),
        ));
    }
    if cache.hidden.dim() != (b, params.hidden_dim()) {
        return Err(Error::shape(
            "backward",
            format!("{:?}", (b, params.hidden_dim())),
            format!("{:?}", cache.hidden.dim()),
        ));
    }

    let w2_grad = d_logits.t().dot(&cache.hidden);
    let b2_grad = d_logits.sum_axis(ndarray::Axis(0));

    // Through the relu: post-activation zero means the pre-activation was
    // clamped (or exactly zero), so no gradient flows.
    let mut d_pre = d_logits.dot(&params.w2);
    for (slot, &hval) in d_pre.iter_mut().zip(cache.hidden.iter()) {
        if hval <= 0.0 {
            *slot = 0.0;
        }
    }

    let b1_grad = d_pre.sum_axis(ndarray::Axis(0));
    let mut w1_grad = Array2::zeros(params.w1.raw_dim());
    for (bi, &row_idx) in cache.batch.iter().enumerate() {
        let d_row = d_pre.row(bi);
        for &(j, v) in features.row(row_idx) {
            for (slot, &d) in w1_grad.column_mut(j).iter_mut().zip(d_row.iter()) {
                *slot += v * d;
            }
        }
    }

    Ok(MlpGrads {
        w1: w1_grad,
        b1: b1_grad,
        w2: w2_grad,
        b2: b2_grad,
    })
}

/// Optimizer selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

// Order of the flattened tensors in the moment buffers.
const TENSOR_NAMES: [&str; 8] = [
    "w1", "b1", "w2", "b2", "alpha", "beta", "bias", "lambda_raw",
];

/// Optimizer state covering every trainable tensor (MLP + thresholds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub kind: OptimizerKind,
    pub step: u64,
    /// First/second moment buffers, one pair per tensor; empty until the
    /// first adaptive step.
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            kind,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One descent step over all trainable tensors.
///
/// Plain SGD by default; Adam-style adaptive moments with bias correction
/// when selected. Rejects non-finite gradients, naming the offending tensor.
pub fn sgd_step(
    mlp: &mut MlpParams,
    thresholds: &mut ThresholdParams,
    mlp_grads: &MlpGrads,
    threshold_grad: &ThresholdGrad,
    state: &mut OptimizerState,
) -> Result<()> {
    let mut lambda_param = [thresholds.lambda_raw];
    let lambda_grad = [threshold_grad.d_lambda_raw];
    let mut tensors: [(&mut [f64], &[f64]); 8] = [
        (grab_mut(&mut mlp.w1), grab(&mlp_grads.w1)),
        (mlp.b1.as_slice_mut().unwrap(), mlp_grads.b1.as_slice().unwrap()),
        (grab_mut(&mut mlp.w2), grab(&mlp_grads.w2)),
        (mlp.b2.as_slice_mut().unwrap(), mlp_grads.b2.as_slice().unwrap()),
        (&mut thresholds.alpha, &threshold_grad.d_alpha),
        (&mut thresholds.beta, &threshold_grad.d_beta),
        (&mut thresholds.bias, &threshold_grad.d_bias),
        (&mut lambda_param, &lambda_grad),
    ];

    for (name, (param, grad)) in TENSOR_NAMES.iter().zip(&tensors) {
        if param.len() != grad.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} values for {name}", param.len()),
                format!("{} gradient values", grad.len()),
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
            });
        }
    }

    state.step += 1;
    let lr = state.learning_rate;
    match state.kind {
        OptimizerKind::Sgd => {
            for (param, grad) in tensors.iter_mut() {
                for (p, &g) in param.iter_mut().zip(grad.iter()) {
                    *p -= lr * g;
                }
            }
        }
        OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } => {
            if state.m.is_empty() {
                state.m = tensors.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
                state.v = tensors.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            }
            let t = state.step as i32;
            let corr1 = 1.0 - beta1.powi(t);
            let corr2 = 1.0 - beta2.powi(t);
            for (ti, (param, grad)) in tensors.iter_mut().enumerate() {
                let (m, v) = (&mut state.m[ti], &mut state.v[ti]);
                for i in 0..param.len() {
                    let g = grad[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let m_hat = m[i] / corr1;
                    let v_hat = v[i] / corr2;
                    param[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
    }
    thresholds.lambda_raw = lambda_param[0];
    Ok(())
}

fn grab(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn grab_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Self-contained trained model: everything evaluation needs on new data.
///
/// Versioned JSON on disk; see `README.md` for the exact layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub variant: Variant,
    /// SHA-256 of the canonical training-config JSON.
    pub config_hash: String,
    pub epsilon: f64,
    pub knn_k: usize,
    pub loss: LossConfig,
    pub mlp: MlpParams,
    pub thresholds: ThresholdParams,
    /// IDF vector of the training set.
    pub idf: Vec<f64>,
    /// Training subsample backing the evaluation-time local signal; absent
    /// for variants that never consult it.
    pub reference: Option<(SparseFeatureMatrix, LabelMatrix)>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)
            .map_err(|e| Error::Checkpoint(format!("{path:?}: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{path:?}: {e}")))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        if !ckpt.thresholds.is_finite() {
            return Err(Error::Checkpoint(
                "non-finite threshold parameters".into(),
            ));
        }
        Ok(ckpt)
    }
}
