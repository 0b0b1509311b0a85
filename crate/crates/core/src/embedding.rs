//! Feature matrices, label vectors and the three pairwise similarity measures
//! used for neighbor mining: semantic (label equality), appearance (rescaled
//! cosine) and their product.

use crate::error::{Error, Result};

/// Rows with norm at or below this are rejected by [`EmbeddingMatrix::l2_normalize_rows`].
pub const ZERO_NORM: f64 = 1e-12;

/// Allowed deviation from unit norm for inputs that must be normalized.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Inner product with four independent accumulators.
///
/// Every similarity, mining and loss kernel goes through this function, so two
/// code paths that compute the same pair always get bit-identical results.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row-major `n x d` matrix of 64-bit features.
///
/// Zero-row matrices are allowed so that empty banks and empty files have a
/// representation; `d` is always at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::BadShape("feature dimension must be >= 1".into()));
        }
        if values.len() != n * d {
            return Err(Error::BadShape(format!(
                "{} values for a {n}x{d} matrix",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            n,
            d,
            values,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), d, values)
    }

    pub fn zeros(n: usize, d: usize) -> Result<Self> {
        Self::new(n, d, vec![0.0; n * d])
    }

    /// Wraps values that the caller guarantees are unit rows. Used by kernels
    /// that normalize internally (encoder output, bank snapshots).
    pub(crate) fn from_normalized_unchecked(n: usize, d: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), n * d);
        Self {
            n,
            d,
            values,
            normalized: true,
        }
    }

    /// Marks the matrix as normalized after checking every row is unit norm
    /// within [`UNIT_TOLERANCE`].
    pub fn assume_normalized(mut self) -> Result<Self> {
        for i in 0..self.n {
            check_unit(self.row(i))?;
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.d)
    }

    /// Copies the selected rows, preserving the normalized flag.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            if i >= self.n {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.n,
                });
            }
            values.extend_from_slice(self.row(i));
        }
        Ok(Self {
            n: idx.len(),
            d: self.d,
            values,
            normalized: self.normalized,
        })
    }

    pub fn l2_normalize_rows(&self) -> Result<Self> {
        let mut values = self.values.clone();
        for (i, row) in values.chunks_exact_mut(self.d).enumerate() {
            let nrm = norm(row);
            if nrm <= ZERO_NORM {
                return Err(Error::ZeroRow(i));
            }
            for v in row.iter_mut() {
                *v /= nrm;
            }
        }
        Ok(Self {
            n: self.n,
            d: self.d,
            values,
            normalized: true,
        })
    }
}

/// Class ids, plus latent mode ids when the data comes from the synthetic
/// generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    pub labels: Vec<u32>,
    pub modes: Option<Vec<u32>>,
}

impl LabelVector {
    pub fn new(labels: Vec<u32>) -> Self {
        Self {
            labels,
            modes: None,
        }
    }

    pub fn with_modes(labels: Vec<u32>, modes: Vec<u32>) -> Result<Self> {
        if labels.len() != modes.len() {
            return Err(Error::LabelMismatch {
                labels: modes.len(),
                rows: labels.len(),
            });
        }
        Ok(Self {
            labels,
            modes: Some(modes),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn check_aligned(&self, m: &EmbeddingMatrix) -> Result<()> {
        if self.labels.len() != m.rows() {
            return Err(Error::LabelMismatch {
                labels: self.labels.len(),
                rows: m.rows(),
            });
        }
        Ok(())
    }
}

fn check_unit(a: &[f64]) -> Result<()> {
    let nrm = norm(a);
    if (nrm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NotNormalized { norm: nrm });
    }
    Ok(())
}

/// 1 when the labels agree, 0 otherwise.
pub fn semantic_similarity(y_i: u32, y_j: u32) -> f64 {
    if y_i == y_j {
        1.0
    } else {
        0.0
    }
}

/// Rescaled cosine `(a.b + 1) / 2` for unit vectors.
pub fn appearance_similarity(a_i: &[f64], a_j: &[f64]) -> Result<f64> {
    if a_i.len() != a_j.len() {
        return Err(Error::DimensionMismatch {
            expected: a_i.len(),
            got: a_j.len(),
        });
    }
    check_unit(a_i)?;
    check_unit(a_j)?;
    Ok(appearance_from_dot(dot(a_i, a_j)))
}

#[inline]
pub(crate) fn appearance_from_dot(d: f64) -> f64 {
    (d + 1.0) / 2.0
}

/// Product of semantic and appearance similarity; zero across classes.
pub fn combined_similarity(x_i: (&[f64], u32), x_j: (&[f64], u32)) -> Result<f64> {
    let app = appearance_similarity(x_i.0, x_j.0)?;
    Ok(semantic_similarity(x_i.1, x_j.1) * app)
}

/// Combined scores of a set of queries against every gallery row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub queries: Vec<usize>,
    pub gallery_len: usize,
    /// `queries.len() x gallery_len`, row-major.
    pub scores: Vec<f64>,
}

impl ScoreTable {
    pub fn scores_for(&self, q: usize) -> &[f64] {
        &self.scores[q * self.gallery_len..(q + 1) * self.gallery_len]
    }

    /// True when gallery row `j` is the query of row `q` itself.
    pub fn is_self(&self, q: usize, j: usize) -> bool {
        self.queries[q] == j
    }
}

pub fn pairwise_combined(
    matrix: &EmbeddingMatrix,
    labels: &LabelVector,
    queries: &[usize],
) -> Result<ScoreTable> {
    labels.check_aligned(matrix)?;
    if !matrix.is_normalized() {
        // Surface the first offending row.
        for i in 0..matrix.rows() {
            check_unit(matrix.row(i))?;
        }
    }
    let n = matrix.rows();
    let mut scores = Vec::with_capacity(queries.len() * n);
    for &q in queries {
        if q >= n {
            return Err(Error::IndexOutOfRange { index: q, len: n });
        }
        let (aq, yq) = (matrix.row(q), labels.labels[q]);
        for j in 0..n {
            let app = appearance_from_dot(dot(aq, matrix.row(j)));
            scores.push(semantic_similarity(yq, labels.labels[j]) * app);
        }
    }
    Ok(ScoreTable {
        queries: queries.to_vec(),
        gallery_len: n,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_three_four_five() {
        let m = EmbeddingMatrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0]]).unwrap();
        let u = m.l2_normalize_rows().unwrap();
        assert!(u.is_normalized());
        assert_eq!(u.row(0), &[0.6, 0.8]);
        assert_eq!(u.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_zero_row() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(m.l2_normalize_rows(), Err(Error::ZeroRow(1))));
        let m = EmbeddingMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(m.l2_normalize_rows(), Err(Error::ZeroRow(0))));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            EmbeddingMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(1))
        ));
        assert!(EmbeddingMatrix::new(1, 0, vec![]).is_err());
    }

    #[test]
    fn semantic_cases() {
        assert_eq!(semantic_similarity(5, 5), 1.0);
        assert_eq!(semantic_similarity(5, 7), 0.0);
        assert_eq!(semantic_similarity(0, 0), 1.0);
    }

    #[test]
    fn appearance_cases() {
        let a = [0.6, 0.8];
        let neg = [-0.6, -0.8];
        let orth = [-0.8, 0.6];
        assert!((appearance_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!(appearance_similarity(&a, &neg).unwrap().abs() < 1e-15);
        assert!((appearance_similarity(&a, &orth).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn appearance_errors() {
        assert!(matches!(
            appearance_similarity(&[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            appearance_similarity(&[1.0, 0.0], &[1.0, 1e-2]),
            Err(Error::NotNormalized { .. })
        ));
        // inside the 1e-6 tolerance
        assert!(appearance_similarity(&[1.0, 0.0], &[1.0 + 5e-7, 0.0]).is_ok());
    }

    #[test]
    fn combined_cases() {
        let a = [0.6, 0.8];
        let orth = [-0.8, 0.6];
        assert!((combined_similarity((&a, 1), (&a, 1)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(combined_similarity((&a, 1), (&a, 2)).unwrap(), 0.0);
        assert!((combined_similarity((&a, 3), (&orth, 3)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pairwise_single_self() {
        let m = EmbeddingMatrix::from_rows(&[vec![0.0, 1.0]])
            .unwrap()
            .l2_normalize_rows()
            .unwrap();
        let t = pairwise_combined(&m, &LabelVector::new(vec![4]), &[0]).unwrap();
        assert_eq!(t.scores, vec![1.0]);
        assert!(t.is_self(0, 0));
    }

    #[test]
    fn pairwise_matches_scalar_loop() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![s, s], vec![0.0, -1.0]])
            .unwrap()
            .l2_normalize_rows()
            .unwrap();
        let labels = LabelVector::new(vec![0, 0, 1]);
        let t = pairwise_combined(&m, &labels, &[0, 1, 2]).unwrap();
        for q in 0..3 {
            for j in 0..3 {
                let want =
                    combined_similarity((m.row(q), labels.labels[q]), (m.row(j), labels.labels[j]))
                        .unwrap();
                assert_eq!(t.scores_for(q)[j], want);
                assert_eq!(t.is_self(q, j), q == j);
            }
        }
        // hand values: row0.row1 = s, same class
        assert!((t.scores_for(0)[1] - (s + 1.0) / 2.0).abs() < 1e-15);
        assert_eq!(t.scores_for(0)[2], 0.0);
    }

    #[test]
    fn pairwise_distinct_labels_zero() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]])
            .unwrap()
            .l2_normalize_rows()
            .unwrap();
        let t = pairwise_combined(&m, &LabelVector::new(vec![0, 1, 2]), &[0, 1, 2]).unwrap();
        for q in 0..3 {
            for j in 0..3 {
                if q != j {
                    assert_eq!(t.scores_for(q)[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn pairwise_out_of_range() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]])
            .unwrap()
            .l2_normalize_rows()
            .unwrap();
        assert!(matches!(
            pairwise_combined(&m, &LabelVector::new(vec![0]), &[1]),
            Err(Error::IndexOutOfRange { index: 1, len: 1 })
        ));
    }
}
