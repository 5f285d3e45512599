//! Learnable per-label, per-instance decision thresholds.
//!
//! The threshold for sample `i` and label `l` blends a global rarity signal
//! with a local agreement signal:
//!
//! ```text
//! theta[i,l] = blend * alpha[l] * idf[l] + (1 - blend) * beta[l] * knn[i,l] + bias[l]
//! ```
//!
//! where `blend = sigmoid(lambda_raw)` is a single learnable scalar. Storing
//! the blend pre-sigmoid keeps it structurally inside (0, 1), so the
//! threshold is always a convex mixture of the two signals. The signals
//! themselves are treated as constants: gradients flow only into `alpha`,
//! `beta`, `bias`, and `lambda_raw`.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::KnnSignal;
use crate::util::sigmoid;

/// Which threshold formulation a model trains and evaluates with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full blend of both signals with a learnable mixing weight.
    Adaptive,
    /// Global signal only: `theta[l] = alpha[l] * idf[l] + bias[l]`, blend pinned at 1.
    IdfOnly,
    /// Local signal only: `theta[i,l] = beta[l] * knn[i,l] + bias[l]`, blend pinned at 0.
    KnnOnly,
    /// No threshold at all; plain 0.5-on-sigmoid decisions.
    Static,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Adaptive,
        Variant::IdfOnly,
        Variant::KnnOnly,
        Variant::Static,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Adaptive => "adaptive",
            Variant::IdfOnly => "idf_only",
            Variant::KnnOnly => "knn_only",
            Variant::Static => "static",
        }
    }

    /// True when training/evaluating this variant requires the local
    /// agreement signal.
    pub fn uses_knn(&self) -> bool {
        matches!(self, Variant::Adaptive | Variant::KnnOnly)
    }

    pub fn uses_idf(&self) -> bool {
        matches!(self, Variant::Adaptive | Variant::IdfOnly)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "adaptive" => Ok(Variant::Adaptive),
            "idf_only" => Ok(Variant::IdfOnly),
            "knn_only" => Ok(Variant::KnnOnly),
            "static" => Ok(Variant::Static),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant {other:?} (expected adaptive, idf_only, knn_only, or static)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Learnable threshold parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub bias: Vec<f64>,
    /// Blend weight stored pre-sigmoid.
    pub lambda_raw: f64,
}

impl ThresholdParams {
    pub fn n_labels(&self) -> usize {
        self.alpha.len()
    }

    /// Effective blend weight, always strictly inside (0, 1).
    pub fn lambda(&self) -> f64 {
        sigmoid(self.lambda_raw)
    }

    pub fn is_finite(&self) -> bool {
        self.lambda_raw.is_finite()
            && self.alpha.iter().all(|v| v.is_finite())
            && self.beta.iter().all(|v| v.is_finite())
            && self.bias.iter().all(|v| v.is_finite())
    }

    fn check_labels(&self, l: usize, context: &'static str) -> Result<()> {
        if self.alpha.len() != l || self.beta.len() != l || self.bias.len() != l {
            return Err(Error::shape(
                context,
                format!("{l} labels"),
                format!(
                    "alpha {}, beta {}, bias {}",
                    self.alpha.len(),
                    self.beta.len(),
                    self.bias.len()
                ),
            ));
        }
        Ok(())
    }

    /// Per-epoch weight-dynamics summary: mean/std of the signal weights and
    /// the effective blend value.
    pub fn weight_stats(&self) -> WeightStats {
        WeightStats {
            alpha_mean: mean(&self.alpha),
            alpha_std: std_dev(&self.alpha),
            beta_mean: mean(&self.beta),
            beta_std: std_dev(&self.beta),
            lambda: self.lambda(),
        }
    }

    /// Write the flat text checkpoint (see `README.md` for the layout).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str("threshmix-thresholds v1\n");
        out.push_str(&format!("{}\n", self.n_labels()));
        for vec in [&self.alpha, &self.beta, &self.bias] {
            let vals: Vec<String> = vec.iter().map(|v| format!("{v}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out.push_str(&format!("{}\n", self.lambda_raw));
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Load a checkpoint written by [`ThresholdParams::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty checkpoint"))?;
        if header != "threshmix-thresholds v1" {
            return Err(Error::parse(path, 1, format!("unknown header {header:?}")));
        }
        let l: usize = lines
            .next()
            .ok_or_else(|| Error::parse(path, 2, "missing label count"))?
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, 2, "bad label count"))?;
        let mut parse_vec = |line_no: usize| -> Result<Vec<f64>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(path, line_no, "missing parameter row"))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, line_no, "bad parameter value"))?;
            if vals.len() != l {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("expected {l} values, got {}", vals.len()),
                ));
            }
            Ok(vals)
        };
        let alpha = parse_vec(3)?;
        let beta = parse_vec(4)?;
        let bias = parse_vec(5)?;
        let lambda_raw: f64 = lines
            .next()
            .ok_or_else(|| Error::parse(path, 6, "missing blend weight"))?
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, 6, "bad blend weight"))?;
        Ok(Self {
            alpha,
            beta,
            bias,
            lambda_raw,
        })
    }
}

/// Mean/std of the learned signal weights plus the blend value, logged per
/// epoch for weight-dynamics plots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub alpha_mean: f64,
    pub alpha_std: f64,
    pub beta_mean: f64,
    pub beta_std: f64,
    pub lambda: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Gradients for [`ThresholdParams`], shape-matched.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdGrad {
    pub d_alpha: Vec<f64>,
    pub d_beta: Vec<f64>,
    pub d_bias: Vec<f64>,
    pub d_lambda_raw: f64,
}

impl ThresholdGrad {
    pub fn zeros(n_labels: usize) -> Self {
        Self {
            d_alpha: vec![0.0; n_labels],
            d_beta: vec![0.0; n_labels],
            d_bias: vec![0.0; n_labels],
            d_lambda_raw: 0.0,
        }
    }
}

/// Neutral starting point: unit signal weights, zero bias, blend at 0.5.
/// Deterministic; the seed parameter is kept for interface stability.
pub fn init_params(n_labels: usize, _seed: u64) -> ThresholdParams {
    ThresholdParams {
        alpha: vec![1.0; n_labels],
        beta: vec![1.0; n_labels],
        bias: vec![0.0; n_labels],
        lambda_raw: 0.0,
    }
}

fn check_knn(knn: &KnnSignal, l: usize) -> Result<()> {
    if knn.values.ncols() != l {
        return Err(Error::shape(
            "compute_threshold",
            format!("{l} labels"),
            format!("knn with {} columns", knn.values.ncols()),
        ));
    }
    Ok(())
}

/// Full blended threshold matrix, B x L.
pub fn compute_threshold(
    params: &ThresholdParams,
    idf: &[f64],
    knn: &KnnSignal,
) -> Result<Array2<f64>> {
    let l = params.n_labels();
    params.check_labels(l, "compute_threshold")?;
    if idf.len() != l {
        return Err(Error::shape(
            "compute_threshold",
            format!("{l} labels"),
            format!("idf of length {}", idf.len()),
        ));
    }
    check_knn(knn, l)?;

    let blend = params.lambda();
    let b = knn.values.nrows();
    let mut theta = Array2::zeros((b, l));
    for i in 0..b {
        for lab in 0..l {
            theta[[i, lab]] = blend * params.alpha[lab] * idf[lab]
                + (1.0 - blend) * params.beta[lab] * knn.values[[i, lab]]
                + params.bias[lab];
        }
    }
    Ok(theta)
}

/// Analytic gradients of the blended threshold wrt its parameters, given the
/// upstream gradient on the B x L threshold matrix.
pub fn threshold_backward(
    params: &ThresholdParams,
    idf: &[f64],
    knn: &KnnSignal,
    upstream: &Array2<f64>,
) -> Result<ThresholdGrad> {
    let l = params.n_labels();
    params.check_labels(l, "threshold_backward")?;
    if idf.len() != l {
        return Err(Error::shape(
            "threshold_backward",
            format!("{l} labels"),
            format!("idf of length {}", idf.len()),
        ));
    }
    check_knn(knn, l)?;
    if upstream.dim() != knn.values.dim() {
        return Err(Error::shape(
            "threshold_backward",
            format!("{:?}", knn.values.dim()),
            format!("{:?}", upstream.dim()),
        ));
    }

    let blend = params.lambda();
    let blend_deriv = blend * (1.0 - blend);
    let b = upstream.nrows();
    let mut grad = ThresholdGrad::zeros(l);
    for i in 0..b {
        for lab in 0..l {
            let up = upstream[[i, lab]];
            if up == 0.0 {
                continue;
            }
            let knn_val = knn.values[[i, lab]];
            grad.d_alpha[lab] += up * blend * idf[lab];
            grad.d_beta[lab] += up * (1.0 - blend) * knn_val;
            grad.d_bias[lab] += up;
            grad.d_lambda_raw +=
                blend_deriv * up * (params.alpha[lab] * idf[lab] - params.beta[lab] * knn_val);
        }
    }
    Ok(grad)
}

/// Variant-aware threshold computation.
///
/// The signals a variant does not use may be absent entirely; passing them
/// anyway changes nothing, which is what makes the ablations honest.
pub fn compute_threshold_variant(
    variant: Variant,
    params: &ThresholdParams,
    idf: Option<&[f64]>,
    knn: Option<&KnnSignal>,
    batch_size: usize,
) -> Result<Array2<f64>> {
    let l = params.n_labels();
    match variant {
        Variant::Adaptive => {
            let idf = idf.ok_or_else(|| missing_signal("idf"))?;
            let knn = knn.ok_or_else(|| missing_signal("knn"))?;
            compute_threshold(params, idf, knn)
        }
        Variant::IdfOnly => {
            let idf = idf.ok_or_else(|| missing_signal("idf"))?;
            if idf.len() != l {
                return Err(Error::shape(
                    "compute_threshold_variant",
                    format!("{l} labels"),
                    format!("idf of length {}", idf.len()),
                ));
            }
            let mut theta = Array2::zeros((batch_size, l));
            for i in 0..batch_size {
                for lab in 0..l {
                    theta[[i, lab]] = params.alpha[lab] * idf[lab] + params.bias[lab];
                }
            }
            Ok(theta)
        }
        Variant::KnnOnly => {
            let knn = knn.ok_or_else(|| missing_signal("knn"))?;
            check_knn(knn, l)?;
            let mut theta = Array2::zeros((knn.values.nrows(), l));
            for i in 0..knn.values.nrows() {
                for lab in 0..l {
                    theta[[i, lab]] = params.beta[lab] * knn.values[[i, lab]] + params.bias[lab];
                }
            }
            Ok(theta)
        }
        Variant::Static => Ok(Array2::zeros((batch_size, l))),
    }
}

/// Variant-aware backward pass; pinned parameters receive zero gradient.
pub fn threshold_backward_variant(
    variant: Variant,
    params: &ThresholdParams,
    idf: Option<&[f64]>,
    knn: Option<&KnnSignal>,
    upstream: &Array2<f64>,
) -> Result<ThresholdGrad> {
    let l = params.n_labels();
    match variant {
        Variant::Adaptive => {
            let idf = idf.ok_or_else(|| missing_signal("idf"))?;
            let knn = knn.ok_or_else(|| missing_signal("knn"))?;
            threshold_backward(params, idf, knn, upstream)
        }
        Variant::IdfOnly => {
            let idf = idf.ok_or_else(|| missing_signal("idf"))?;
            let mut grad = ThresholdGrad::zeros(l);
            for i in 0..upstream.nrows() {
                for lab in 0..l {
                    let up = upstream[[i, lab]];
                    grad.d_alpha[lab] += up * idf[lab];
                    grad.d_bias[lab] += up;
                }
            }
            Ok(grad)
        }
        Variant::KnnOnly => {
            let knn = knn.ok_or_else(|| missing_signal("knn"))?;
            let mut grad = ThresholdGrad::zeros(l);
            for i in 0..upstream.nrows() {
                for lab in 0..l {
                    let up = upstream[[i, lab]];
                    grad.d_beta[lab] += up * knn.values[[i, lab]];
                    grad.d_bias[lab] += up;
                }
            }
            Ok(grad)
        }
        Variant::Static => Ok(ThresholdGrad::zeros(l)),
    }
}

fn missing_signal(which: &str) -> Error {
    Error::InvalidArgument(format!("variant requires the {which} signal"))
}

/// Logits after optional batch standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedLogits {
    pub values: Array2<f64>,
    pub mean: f64,
    pub std: f64,
    pub epsilon: f64,
}

impl StandardizedLogits {
    /// Scale applied to upstream gradients; the mean and std are treated as
    /// constants in backprop.
    pub fn grad_scale(&self) -> f64 {
        1.0 / (self.std + self.epsilon)
    }
}

/// Standardize logits over the full batch x label tensor (population std).
/// A constant tensor maps to all zeros thanks to the epsilon guard.
pub fn standardize_logits(logits: &Array2<f64>, epsilon: f64) -> Result<StandardizedLogits> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    let n = logits.len();
    if n == 0 {
        return Err(Error::Empty { what: "logits" });
    }
    let mean = logits.sum() / n as f64;
    let var = logits.iter().map(|&z| (z - mean) * (z - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    let values = logits.mapv(|z| (z - mean) / (std + epsilon));
    Ok(StandardizedLogits {
        values,
        mean,
        std,
        epsilon,
    })
}
