//! Small dense row-major matrices.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::real::{sum, Real};

/// Dense row-major matrix over any [`Real`] scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<S = f64> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Real> Matrix<S> {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: format!("{} entries", rows * cols),
                found: format!("{} entries", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| S::zero())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| S::constant(if i == j { 1.0 } else { 0.0 }))
    }

    /// The uniform doubly stochastic matrix `J = 11ᵀ / n`.
    pub fn uniform(n: usize) -> Self {
        Self::from_fn(n, n, |_, _| S::constant(1.0 / n as f64))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].clone())
    }

    pub fn row_sums(&self) -> Vec<S> {
        (0..self.rows)
            .map(|i| sum(self.row(i).iter().cloned()))
            .collect()
    }

    pub fn col_sums(&self) -> Vec<S> {
        (0..self.cols)
            .map(|j| sum((0..self.rows).map(|i| self[(i, j)].clone())))
            .collect()
    }

    pub fn matmul(&self, rhs: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch {
                expected: format!("{} rows on the right", self.cols),
                found: format!("{}", rhs.rows),
            });
        }
        Ok(Matrix::from_fn(self.rows, rhs.cols, |i, j| {
            sum((0..self.cols).map(|k| self[(i, k)].clone() * rhs[(k, j)].clone()))
        }))
    }

    /// Kronecker product `self ⊗ rhs`.
    pub fn kron(&self, rhs: &Matrix<S>) -> Matrix<S> {
        Matrix::from_fn(self.rows * rhs.rows, self.cols * rhs.cols, |i, j| {
            self[(i / rhs.rows, j / rhs.cols)].clone() * rhs[(i % rhs.rows, j % rhs.cols)].clone()
        })
    }

    pub fn map<T: Real>(&self, f: impl FnMut(&S) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Entrywise values, dropping any tangent information.
    pub fn values(&self) -> Matrix<f64> {
        self.map(Real::value)
    }

    /// Entrywise `a·self + b·other`.
    pub fn affine_combine(&self, a: f64, other: &Matrix<S>, b: f64) -> Matrix<S> {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            self[(i, j)].scale(a) + other[(i, j)].scale(b)
        })
    }

    /// Conjugation `Pᵀ A P` by the permutation matrix with `P[i][perm[i]] = 1`,
    /// i.e. entry `(i, j)` of the result is `A[perm⁻¹(i)][perm⁻¹(j)]`.
    pub fn conjugate_by_permutation(&self, perm: &[usize]) -> Matrix<S> {
        let n = perm.len();
        let mut inverse = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Matrix::from_fn(n, n, |i, j| self[(inverse[i], inverse[j])].clone())
    }
}

impl Matrix<f64> {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::DimensionMismatch {
                expected: format!("{c} columns in every row"),
                found: "ragged rows".into(),
            });
        }
        Ok(Self {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn max_abs_diff(&self, other: &Matrix<f64>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_distance(&self, other: &Matrix<f64>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest deviation of any row sum from `row_targets` and of any column sum
    /// from `col_targets`, returned as `(row_dev, col_dev)`.
    pub fn margin_deviation(&self, row_targets: &[f64], col_targets: &[f64]) -> (f64, f64) {
        let dev = |sums: Vec<f64>, targets: &[f64]| {
            sums.iter()
                .zip(targets)
                .map(|(s, t)| (s - t).abs())
                .fold(0.0, f64::max)
        };
        (
            dev(self.row_sums(), row_targets),
            dev(self.col_sums(), col_targets),
        )
    }

    /// Largest deviation of any row or column sum from 1.
    pub fn stochastic_deviation(&self) -> f64 {
        let (r, c) = self.margin_deviation(&vec![1.0; self.rows], &vec![1.0; self.cols]);
        r.max(c)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

impl<S> Index<(usize, usize)> for Matrix<S> {
    type Output = S;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S> IndexMut<(usize, usize)> for Matrix<S> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

impl Serialize for Matrix<f64> {
    fn serialize<Z: Serializer>(&self, serializer: Z) -> std::result::Result<Z::Ok, Z::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Matrix<f64> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_of_identity_and_uniform() {
        let a = Matrix::<f64>::identity(2);
        let b = Matrix::<f64>::uniform(2);
        let k = a.kron(&b);
        let expected = Matrix::from_rows(&[
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 0.5, 0.5],
            vec![0.0, 0.0, 0.5, 0.5],
        ])
        .unwrap();
        assert_eq!(k, expected);
    }

    #[test]
    fn conjugation_by_reverse_flips_both_axes() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let c = a.conjugate_by_permutation(&[1, 0]);
        assert_eq!(c.to_rows(), vec![vec![4.0, 3.0], vec![2.0, 1.0]]);
    }

    #[test]
    fn conjugation_matches_explicit_product() {
        let a = Matrix::from_fn(3, 3, |i, j| (3 * i + j) as f64);
        let perm = [2, 0, 1];
        let p = Matrix::from_fn(3, 3, |i, j| if perm[i] == j { 1.0 } else { 0.0 });
        let explicit = p.transpose().matmul(&a).unwrap().matmul(&p).unwrap();
        assert_eq!(a.conjugate_by_permutation(&perm), explicit);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn json_is_nested_rows() {
        let a = Matrix::from_rows(&[vec![0.1, 0.9], vec![0.9, 0.1]]).unwrap();
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, "[[0.1,0.9],[0.9,0.1]]");
        let back: Matrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, a);
    }
}
