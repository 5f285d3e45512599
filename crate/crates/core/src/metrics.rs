//! Multi-label evaluation metrics over streamed prediction batches.
//!
//! Counts accumulate per label so macro-F1, micro-F1, and the positive-rate
//! diagnostic can be computed after a single pass, and partial counts from
//! disjoint shards merge exactly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-label confusion tallies plus global cell counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    predicted_positive: u64,
    total_cells: u64,
}

impl ConfusionCounts {
    pub fn new(n_labels: usize) -> Self {
        Self {
            tp: vec![0; n_labels],
            fp: vec![0; n_labels],
            fn_: vec![0; n_labels],
            predicted_positive: 0,
            total_cells: 0,
        }
    }

    pub fn n_labels(&self) -> usize {
        self.tp.len()
    }

    /// Tally one batch. `margins` holds `logit - threshold`; a cell is
    /// predicted positive iff its margin is strictly greater than zero.
    pub fn accumulate(&mut self, margins: &Array2<f64>, targets: &Array2<f64>) -> Result<()> {
        if margins.dim() != targets.dim() {
            return Err(Error::shape(
                "metrics accumulate",
                format!("{:?}", margins.dim()),
                format!("{:?}", targets.dim()),
            ));
        }
        if margins.ncols() != self.n_labels() {
            return Err(Error::shape(
                "metrics accumulate",
                format!("{} labels", self.n_labels()),
                format!("{} columns", margins.ncols()),
            ));
        }
        for (m_row, t_row) in margins.rows().into_iter().zip(targets.rows()) {
            for (l, (&m, &t)) in m_row.iter().zip(t_row.iter()).enumerate() {
                let predicted = m > 0.0;
                let actual = t > 0.5;
                match (predicted, actual) {
                    (true, true) => self.tp[l] += 1,
                    (true, false) => self.fp[l] += 1,
                    (false, true) => self.fn_[l] += 1,
                    (false, false) => {}
                }
                if predicted {
                    self.predicted_positive += 1;
                }
                self.total_cells += 1;
            }
        }
        Ok(())
    }

    /// Fold counts from a disjoint shard into this one.
    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.n_labels() != self.n_labels() {
            return Err(Error::shape(
                "metrics merge",
                format!("{} labels", self.n_labels()),
                format!("{} labels", other.n_labels()),
            ));
        }
        for l in 0..self.n_labels() {
            self.tp[l] += other.tp[l];
            self.fp[l] += other.fp[l];
            self.fn_[l] += other.fn_[l];
        }
        self.predicted_positive += other.predicted_positive;
        self.total_cells += other.total_cells;
        Ok(())
    }

    /// Unweighted mean of per-label F1 over **all** labels; a label with no
    /// positives and no predictions contributes zero rather than being
    /// skipped, so unsupported labels drag the average down.
    pub fn macro_f1(&self) -> f64 {
        if self.tp.is_empty() {
            return 0.0;
        }
        let mut sum = 0.0;
        for l in 0..self.n_labels() {
            let denom = 2 * self.tp[l] + self.fp[l] + self.fn_[l];
            if denom > 0 {
                sum += 2.0 * self.tp[l] as f64 / denom as f64;
            }
        }
        sum / self.n_labels() as f64
    }

    /// F1 over globally pooled counts.
    pub fn micro_f1(&self) -> f64 {
        let tp: u64 = self.tp.iter().sum();
        let fp: u64 = self.fp.iter().sum();
        let fn_: u64 = self.fn_.iter().sum();
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    }

    /// Fraction of all cells predicted positive. Diagnoses thresholding
    /// pathologies (predict-everything or predict-nothing collapses) that F1
    /// alone can mask.
    pub fn positive_ratio(&self) -> f64 {
        if self.total_cells == 0 {
            0.0
        } else {
            self.predicted_positive as f64 / self.total_cells as f64
        }
    }

    pub fn total_cells(&self) -> u64 {
        self.total_cells
    }
}
