use crate::scalar::Element;

use super::FusionError;

/// An `N × V` row-stochastic matrix: one next-token distribution per position.
#[derive(Debug, Clone, PartialEq)]
pub struct DistMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Element> DistMatrix<T> {
    /// Validates shape, non-negativity and that each row sums to one within
    /// the element type's tolerance.
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self, FusionError> {
        if values.len() != rows * cols {
            return Err(FusionError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if cols == 0 && rows > 0 {
            return Err(FusionError::DimensionMismatch("vocabulary size is zero".into()));
        }
        let m = DistMatrix { rows, cols, values };
        for i in 0..rows {
            let row = m.row(i);
            if let Some(bad) = row.iter().find(|v| !v.is_finite() || v.widen() < 0.0) {
                return Err(FusionError::NotStochastic {
                    row: i,
                    detail: format!("entry {bad:?} is negative or non-finite"),
                });
            }
            let sum: f64 = row.iter().map(|v| v.widen()).sum();
            if (sum - 1.0).abs() > T::ROW_SUM_TOL {
                return Err(FusionError::NotStochastic {
                    row: i,
                    detail: format!("row sums to {sum}"),
                });
            }
        }
        Ok(m)
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        let p = T::narrow(1.0 / cols as f64);
        DistMatrix {
            rows,
            cols,
            values: vec![p; rows * cols],
        }
    }

    pub fn one_hot(cols: usize, ids: &[usize]) -> Result<Self, FusionError> {
        let mut values = vec![T::zero(); ids.len() * cols];
        for (i, &id) in ids.iter().enumerate() {
            if id >= cols {
                return Err(FusionError::OutOfVocab { id, vocab: cols });
            }
            values[i * cols + id] = T::one();
        }
        Ok(DistMatrix {
            rows: ids.len(),
            cols,
            values,
        })
    }

    /// Row-wise softmax of a logit matrix, computed in f64.
    pub fn softmax(rows: usize, cols: usize, logits: &[f64]) -> Self {
        assert_eq!(logits.len(), rows * cols, "logit buffer size");
        let mut values = Vec::with_capacity(rows * cols);
        for row in logits.chunks_exact(cols.max(1)).take(rows) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            values.extend(exps.into_iter().map(|e| T::narrow(e / total)));
        }
        DistMatrix { rows, cols, values }
    }

    pub(crate) fn from_rows_unchecked(rows: usize, cols: usize, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        DistMatrix { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, v: usize) -> T {
        self.values[i * self.cols + v]
    }

    /// Largest `|row sum − 1|` over all rows.
    pub fn max_row_error(&self) -> f64 {
        (0..self.rows)
            .map(|i| (self.row(i).iter().map(|v| v.widen()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Element>(&self) -> DistMatrix<U> {
        DistMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| U::narrow(v.widen())).collect(),
        }
    }
}

/// Gold token per row plus which rows contribute to losses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldLabels {
    pub token_ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl GoldLabels {
    pub fn new(token_ids: Vec<usize>, loss_mask: Vec<bool>) -> Result<Self, FusionError> {
        if token_ids.len() != loss_mask.len() {
            return Err(FusionError::DimensionMismatch(format!(
                "{} gold tokens but {} mask entries",
                token_ids.len(),
                loss_mask.len()
            )));
        }
        Ok(GoldLabels { token_ids, loss_mask })
    }

    /// Every row contributes.
    pub fn all(token_ids: Vec<usize>) -> Self {
        let n = token_ids.len();
        GoldLabels {
            token_ids,
            loss_mask: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn active(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}
