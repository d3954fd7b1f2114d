//! Transportation polytope instances and the sequential north-west corner
//! chart (TBP) together with its inverse and Jacobian.
//!
//! The chart fills an `n × m` matrix row by row, left to right. At cell
//! `(i, j)` the remaining budgets determine an interval `[L, U]` in which the
//! entry must lie for the rest of the matrix to stay feasible; one free
//! parameter picks a point inside it. The last entry of each row and the whole
//! last row are forced by the budgets, so the chart consumes exactly
//! `(n − 1)(m − 1)` parameters and every output has exact margins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::{max_of, min_of, sum, Dual, Real};
use crate::variants::squash::SquashSpec;

/// Tolerance on margin sums.
pub const MARGIN_TOL: f64 = 1e-12;

/// Intervals narrower than this carry no freedom: the entry is pinned to the
/// lower bound and its parameter is ignored.
pub const DEGENERATE_WIDTH: f64 = 1e-14;

/// Row and column sums of a transportation polytope `T(r, c)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Margins {
    row_sums: Vec<f64>,
    col_sums: Vec<f64>,
}

impl Margins {
    pub fn new(row_sums: Vec<f64>, col_sums: Vec<f64>) -> Result<Self> {
        if row_sums.is_empty() || col_sums.is_empty() {
            return Err(Error::InvalidMargins("margins must be non-empty".into()));
        }
        if let Some(v) = row_sums
            .iter()
            .chain(&col_sums)
            .find(|v| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::InvalidMargins(format!(
                "every margin must be positive and finite, found {v}"
            )));
        }
        let r: f64 = row_sums.iter().sum();
        let c: f64 = col_sums.iter().sum();
        if (r - c).abs() > MARGIN_TOL {
            return Err(Error::InvalidMargins(format!(
                "row total {r} differs from column total {c}"
            )));
        }
        Ok(Self { row_sums, col_sums })
    }

    /// All-ones margins of the Birkhoff polytope `B_n`.
    pub fn uniform(n: usize) -> Self {
        Self {
            row_sums: vec![1.0; n],
            col_sums: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.row_sums.len()
    }

    pub fn cols(&self) -> usize {
        self.col_sums.len()
    }

    pub fn row_sums(&self) -> &[f64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[f64] {
        &self.col_sums
    }

    /// Total mass `M`.
    pub fn total(&self) -> f64 {
        self.row_sums.iter().sum()
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }
}

impl<'de> Deserialize<'de> for Margins {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            row_sums: Vec<f64>,
            col_sums: Vec<f64>,
        }
        let raw = Raw::deserialize(d)?;
        Margins::new(raw.row_sums, raw.col_sums).map_err(serde::de::Error::custom)
    }
}

/// A nonnegative matrix whose margins match its [`Margins`].
#[derive(Clone, Debug, PartialEq)]
pub struct TransportMatrix {
    entries: Matrix,
    margins: Margins,
}

/// On-disk layout of a [`TransportMatrix`].
#[derive(Serialize, Deserialize)]
struct TransportMatrixJson {
    n: usize,
    m: usize,
    row_sums: Vec<f64>,
    col_sums: Vec<f64>,
    entries: Matrix,
}

impl TransportMatrix {
    /// Validates nonnegativity and margins within [`MARGIN_TOL`].
    pub fn new(entries: Matrix, margins: Margins) -> Result<Self> {
        if entries.rows() != margins.rows() || entries.cols() != margins.cols() {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", margins.rows(), margins.cols()),
                found: format!("{}x{}", entries.rows(), entries.cols()),
            });
        }
        for i in 0..entries.rows() {
            for j in 0..entries.cols() {
                let v = entries[(i, j)];
                if !(v >= -MARGIN_TOL) || !v.is_finite() {
                    return Err(Error::InvalidEntry {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
        }
        let tm = Self { entries, margins };
        let dev = tm.max_margin_deviation();
        if dev > MARGIN_TOL {
            return Err(Error::InvalidMargins(format!(
                "entries miss their margins by {dev:e}"
            )));
        }
        Ok(tm)
    }

    /// Doubly stochastic matrix with all-ones margins.
    pub fn doubly_stochastic(entries: Matrix) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::NotSquare {
                rows: entries.rows(),
                cols: entries.cols(),
            });
        }
        let n = entries.rows();
        Self::new(entries, Margins::uniform(n))
    }

    pub(crate) fn from_parts_unchecked(entries: Matrix, margins: Margins) -> Self {
        Self { entries, margins }
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn into_entries(self) -> Matrix {
        self.entries
    }

    pub fn margins(&self) -> &Margins {
        &self.margins
    }

    pub fn rows(&self) -> usize {
        self.entries.rows()
    }

    pub fn cols(&self) -> usize {
        self.entries.cols()
    }

    /// Largest absolute deviation of any row or column sum from its margin.
    pub fn max_margin_deviation(&self) -> f64 {
        let (r, c) = self
            .entries
            .margin_deviation(&self.margins.row_sums, &self.margins.col_sums);
        r.max(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&TransportMatrixJson {
            n: self.rows(),
            m: self.cols(),
            row_sums: self.margins.row_sums.clone(),
            col_sums: self.margins.col_sums.clone(),
            entries: self.entries.clone(),
        })
        .expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: TransportMatrixJson =
            serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        let margins = Margins::new(raw.row_sums, raw.col_sums)?;
        if raw.n != margins.rows() || raw.m != margins.cols() {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", raw.n, raw.m),
                found: format!("{}x{} margins", margins.rows(), margins.cols()),
            });
        }
        Self::new(raw.entries, margins)
    }
}

/// The free parameters of a chart, row-major over the leading
/// `(n − 1) × (m − 1)` cells. Serializes as a flat JSON array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChartParams {
    values: Vec<f64>,
}

impl ChartParams {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self::new(vec![0.0; Self::expected_len(n, m)])
    }

    /// `(n − 1)(m − 1)`, the dimension of `T(r, c)`.
    pub fn expected_len(n: usize, m: usize) -> usize {
        n.saturating_sub(1) * m.saturating_sub(1)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl From<Vec<f64>> for ChartParams {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

/// Feasible range `[lower, upper]` of one cell given the remaining budgets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibleInterval {
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
}

/// Bounds for the next cell.
///
/// `row_tail` is the remaining capacity of the columns to the right of the
/// cell, `col_tail` the remaining supply of the rows below it.
pub fn feasible_interval(
    row_budget: f64,
    col_budget: f64,
    row_tail: f64,
    col_tail: f64,
) -> Result<FeasibleInterval> {
    let (lower, upper) = interval_bounds(row_budget, col_budget, row_tail, col_tail)?;
    Ok(FeasibleInterval {
        lower,
        upper,
        width: upper - lower,
    })
}

pub(crate) fn interval_bounds<S: Real>(
    row_budget: S,
    col_budget: S,
    row_tail: S,
    col_tail: S,
) -> Result<(S, S)> {
    let lower = max_of(
        max_of(S::zero(), row_budget.clone() - row_tail),
        col_budget.clone() - col_tail,
    );
    let upper = min_of(row_budget, col_budget);
    let (lo, up) = (lower.value(), upper.value());
    if lo > up + MARGIN_TOL {
        return Err(Error::InfeasibleState {
            lower: lo,
            upper: up,
        });
    }
    // Rounding can leave the bounds a hair out of order; collapse the interval.
    if lo > up {
        return Ok((lower.clone(), lower));
    }
    Ok((lower, upper))
}

/// Places one entry inside `[lower, upper]`.
pub(crate) fn place<S: Real>(lower: S, upper: S, t: S, squash: &SquashSpec) -> S {
    let width = upper - lower.clone();
    if width.value() < DEGENERATE_WIDTH {
        lower
    } else {
        lower + width.clone() * squash.fraction(t, width)
    }
}

fn check_len(n: usize, m: usize, found: usize) -> Result<()> {
    let expected = ChartParams::expected_len(n, m);
    if found != expected {
        return Err(Error::ParamCount { expected, found });
    }
    Ok(())
}

/// Sequential chart over arbitrary scalar budgets.
pub(crate) fn tbp_fill<S: Real>(
    row_sums: &[S],
    col_sums: &[S],
    params: &[S],
    squash: &SquashSpec,
) -> Result<Matrix<S>> {
    let (n, m) = (row_sums.len(), col_sums.len());
    check_len(n, m, params.len())?;
    let mut r = row_sums.to_vec();
    let mut c = col_sums.to_vec();
    // Rows below the current one are untouched until reached, so their
    // suffix sums can be taken once up front.
    let mut below = vec![S::zero(); n];
    for i in (0..n.saturating_sub(1)).rev() {
        below[i] = below[i + 1].clone() + r[i + 1].clone();
    }
    let mut x = Matrix::zeros(n, m);
    let mut right = vec![S::zero(); m];
    let mut k = 0;
    for i in 0..n - 1 {
        // Cells to the right of (i, j) are untouched within row i.
        for j in (0..m - 1).rev() {
            right[j] = right[j + 1].clone() + c[j + 1].clone();
        }
        for j in 0..m - 1 {
            let (lower, upper) = interval_bounds(
                r[i].clone(),
                c[j].clone(),
                right[j].clone(),
                below[i].clone(),
            )?;
            let v = place(lower, upper, params[k].clone(), squash);
            k += 1;
            r[i] = r[i].clone() - v.clone();
            c[j] = c[j].clone() - v.clone();
            x[(i, j)] = v;
        }
        let last = r[i].clone();
        c[m - 1] = c[m - 1].clone() - last.clone();
        x[(i, m - 1)] = last;
    }
    for j in 0..m {
        x[(n - 1, j)] = c[j].clone();
    }
    Ok(x)
}

fn constants(values: &[f64]) -> Vec<Dual> {
    values.iter().map(|&v| Dual::constant(v)).collect()
}

/// Maps parameters to a matrix in `T(r, c)`.
pub fn tbp_forward(
    margins: &Margins,
    params: &ChartParams,
    squash: &SquashSpec,
) -> Result<TransportMatrix> {
    let x = tbp_fill(
        &margins.row_sums,
        &margins.col_sums,
        params.values(),
        squash,
    )?;
    Ok(TransportMatrix::from_parts_unchecked(x, margins.clone()))
}

/// Recovers the parameters of an interior point by replaying the sweep.
pub fn tbp_inverse(matrix: &TransportMatrix, squash: &SquashSpec) -> Result<ChartParams> {
    let (n, m) = (matrix.rows(), matrix.cols());
    let x = matrix.entries();
    let mut r = matrix.margins().row_sums.clone();
    let mut c = matrix.margins().col_sums.clone();
    let mut below = vec![0.0; n];
    for i in (0..n.saturating_sub(1)).rev() {
        below[i] = below[i + 1] + r[i + 1];
    }
    let mut right = vec![0.0; m];
    let mut params = Vec::with_capacity(ChartParams::expected_len(n, m));
    for i in 0..n - 1 {
        for j in (0..m - 1).rev() {
            right[j] = right[j + 1] + c[j + 1];
        }
        for j in 0..m - 1 {
            let iv = feasible_interval(r[i], c[j], right[j], below[i])?;
            if iv.width < DEGENERATE_WIDTH {
                return Err(Error::DegenerateInterval {
                    row: i,
                    col: j,
                    width: iv.width,
                });
            }
            let v = x[(i, j)];
            let fraction = (v - iv.lower) / iv.width;
            let t = squash
                .inverse_fraction(fraction, iv.width)
                .ok_or(Error::BoundaryPoint {
                    row: i,
                    col: j,
                    fraction,
                })?;
            params.push(t);
            r[i] -= v;
            c[j] -= v;
        }
        c[m - 1] -= x[(i, m - 1)];
    }
    Ok(ChartParams::new(params))
}

/// `∂x_ij / ∂t_kl` as an `nm × (n−1)(m−1)` matrix, rows in row-major cell
/// order, columns in parameter order.
pub fn tbp_jacobian(
    margins: &Margins,
    params: &ChartParams,
    squash: &SquashSpec,
) -> Result<Matrix> {
    let t = Dual::variables(params.values());
    let x = tbp_fill(
        &constants(&margins.row_sums),
        &constants(&margins.col_sums),
        &t,
        squash,
    )?;
    Ok(tangent_matrix(&x, params.len()))
}

/// Stacks the tangents of a dual-valued matrix into a Jacobian.
pub(crate) fn tangent_matrix(x: &Matrix<Dual>, dim: usize) -> Matrix {
    let cells = x.data();
    Matrix::from_fn(cells.len(), dim, |row, col| cells[row].d(col))
}

/// Sum of a margin slice, used by the recursive chart.
pub(crate) fn total<S: Real>(xs: &[S]) -> S {
    sum(xs.iter().cloned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variants::squash::SquashKind;

    /// Algorithm 1 with tails recomputed from scratch at every cell.
    fn literal_nw_corner(r0: &[f64], c0: &[f64], t: &[f64]) -> Vec<Vec<f64>> {
        let (n, m) = (r0.len(), c0.len());
        let (mut r, mut c) = (r0.to_vec(), c0.to_vec());
        let mut x = vec![vec![0.0; m]; n];
        let mut k = 0;
        for i in 0..n - 1 {
            for j in 0..m - 1 {
                let rt: f64 = c[j + 1..].iter().sum();
                let ct: f64 = r[i + 1..].iter().sum();
                let lo = 0f64.max(r[i] - rt).max(c[j] - ct);
                let up = r[i].min(c[j]);
                x[i][j] = lo + (up - lo) / (1.0 + (-t[k]).exp());
                k += 1;
                r[i] -= x[i][j];
                c[j] -= x[i][j];
            }
            x[i][m - 1] = r[i];
            c[m - 1] -= r[i];
        }
        for j in 0..m {
            x[n - 1][j] = c[j];
        }
        x
    }

    #[test]
    fn interval_fresh_instance() {
        let iv = feasible_interval(1.0, 1.0, 2.0, 2.0).unwrap();
        assert_eq!((iv.lower, iv.upper, iv.width), (0.0, 1.0, 1.0));
    }

    #[test]
    fn interval_after_first_step() {
        let iv = feasible_interval(0.5, 1.0, 1.0, 2.0).unwrap();
        assert_eq!((iv.lower, iv.upper), (0.0, 0.5));
    }

    #[test]
    fn interval_infeasible() {
        let err = feasible_interval(1.0, 0.2, 0.1, 5.0).unwrap_err();
        assert!(matches!(err, Error::InfeasibleState { .. }));
    }

    #[test]
    fn two_by_two_midpoint() {
        let x = tbp_forward(
            &Margins::uniform(2),
            &ChartParams::new(vec![0.0]),
            &SquashSpec::sigmoid(),
        )
        .unwrap();
        assert_eq!(x.entries().to_rows(), vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
    }

    #[test]
    fn two_by_two_saturates_to_identity() {
        let x = tbp_forward(
            &Margins::uniform(2),
            &ChartParams::new(vec![20.0]),
            &SquashSpec::sigmoid(),
        )
        .unwrap();
        let id = Matrix::<f64>::identity(2);
        assert!(x.entries().max_abs_diff(&id) < 1e-8);
    }

    #[test]
    fn three_by_three_zero_params() {
        // Hand trace of the sweep at t = 0.
        let expected = vec![
            vec![0.5, 0.25, 0.25],
            vec![0.25, 0.375, 0.375],
            vec![0.25, 0.375, 0.375],
        ];
        assert_eq!(literal_nw_corner(&[1.0; 3], &[1.0; 3], &[0.0; 4]), expected);
        let x = tbp_forward(
            &Margins::uniform(3),
            &ChartParams::zeros(3, 3),
            &SquashSpec::sigmoid(),
        )
        .unwrap();
        assert_eq!(x.entries().to_rows(), expected);
    }

    #[test]
    fn incremental_tails_match_recomputed_tails() {
        let margins = Margins::new(vec![0.7, 1.9, 0.4, 1.0], vec![1.1, 0.5, 2.4]).unwrap();
        let t: Vec<f64> = (0..6).map(|k| (k as f64 * 1.3).sin() * 3.0).collect();
        let x = tbp_forward(
            &margins,
            &ChartParams::new(t.clone()),
            &SquashSpec::sigmoid(),
        )
        .unwrap();
        let oracle = literal_nw_corner(margins.row_sums(), margins.col_sums(), &t);
        let oracle = Matrix::from_rows(&oracle).unwrap();
        assert!(x.entries().max_abs_diff(&oracle) < 1e-15);
    }

    #[test]
    fn inverse_of_midpoint() {
        let x = TransportMatrix::doubly_stochastic(Matrix::uniform(2)).unwrap();
        let t = tbp_inverse(&x, &SquashSpec::sigmoid()).unwrap();
        assert_eq!(t.values(), &[0.0]);
    }

    #[test]
    fn inverse_of_three_by_three_zero_chart() {
        let x = tbp_forward(
            &Margins::uniform(3),
            &ChartParams::zeros(3, 3),
            &SquashSpec::sigmoid(),
        )
        .unwrap();
        let t = tbp_inverse(&x, &SquashSpec::sigmoid()).unwrap();
        assert!(t.values().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn inverse_rejects_vertex() {
        let x = TransportMatrix::doubly_stochastic(Matrix::identity(3)).unwrap();
        let err = tbp_inverse(&x, &SquashSpec::sigmoid()).unwrap_err();
        assert!(matches!(err, Error::BoundaryPoint { row: 0, col: 0, .. }));
    }

    fn tiny_row_margins() -> Margins {
        // Row 0 carries 1e-15 of mass, so cell (0, 0) has interval [0, 1e-15].
        Margins::new(vec![1e-15, 1.0], vec![0.5, 0.5 + 1e-15]).unwrap()
    }

    #[test]
    fn inverse_reports_degenerate_cell() {
        let x = TransportMatrix::new(
            Matrix::from_rows(&[vec![0.5e-15, 0.5e-15], vec![0.5, 0.5]]).unwrap(),
            tiny_row_margins(),
        )
        .unwrap();
        let err = tbp_inverse(&x, &SquashSpec::sigmoid()).unwrap_err();
        assert!(
            matches!(err, Error::DegenerateInterval { row: 0, col: 0, .. }),
            "{err:?}"
        );
    }

    #[test]
    fn degenerate_cell_is_pinned_with_zero_gradient() {
        let margins = tiny_row_margins();
        let p = ChartParams::new(vec![5.0]);
        let x = tbp_forward(&margins, &p, &SquashSpec::sigmoid()).unwrap();
        assert_eq!(x.entries()[(0, 0)], 0.0);
        assert!(x.max_margin_deviation() < MARGIN_TOL);
        let jac = tbp_jacobian(&margins, &p, &SquashSpec::sigmoid()).unwrap();
        assert!(jac.data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn wrong_param_count() {
        let err = tbp_forward(
            &Margins::uniform(3),
            &ChartParams::new(vec![0.0; 3]),
            &SquashSpec::sigmoid(),
        )
        .unwrap_err();
        assert_eq!(
            err,
            Error::ParamCount {
                expected: 4,
                found: 3
            }
        );
    }

    #[test]
    fn jacobian_two_by_two() {
        let jac = tbp_jacobian(
            &Margins::uniform(2),
            &ChartParams::new(vec![0.0]),
            &SquashSpec::sigmoid(),
        )
        .unwrap();
        assert_eq!(jac.data(), &[0.25, -0.25, -0.25, 0.25]);
    }

    #[test]
    fn jacobian_rows_of_x_sum_to_zero() {
        let margins = Margins::uniform(4);
        let p = ChartParams::new((0..9).map(|k| (k as f64).cos()).collect());
        for kind in [
            SquashKind::Sigmoid,
            SquashKind::Scaled,
            SquashKind::MarginedScaled,
        ] {
            let jac = tbp_jacobian(&margins, &p, &SquashSpec::of_kind(kind)).unwrap();
            for i in 0..4 {
                for col in 0..9 {
                    let s: f64 = (0..4).map(|j| jac[(4 * i + j, col)]).sum();
                    assert!(s.abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn margins_validation() {
        assert!(Margins::new(vec![1.0, 1.0], vec![2.0]).is_ok());
        assert!(Margins::new(vec![1.0, 0.0], vec![1.0]).is_err());
        assert!(Margins::new(vec![1.0, 1.0], vec![2.1]).is_err());
        assert!(Margins::new(vec![], vec![]).is_err());
    }

    #[test]
    fn json_layout() {
        let x = tbp_forward(
            &Margins::uniform(2),
            &ChartParams::new(vec![0.0]),
            &SquashSpec::sigmoid(),
        )
        .unwrap();
        assert_eq!(
            x.to_json(),
            r#"{"n":2,"m":2,"row_sums":[1.0,1.0],"col_sums":[1.0,1.0],"entries":[[0.5,0.5],[0.5,0.5]]}"#
        );
        assert_eq!(TransportMatrix::from_json(&x.to_json()).unwrap(), x);
        assert_eq!(
            serde_json::to_string(&ChartParams::new(vec![0.5, -1.0])).unwrap(),
            "[0.5,-1.0]"
        );
    }

    #[test]
    fn json_rejects_bad_margins() {
        let text = r#"{"n":2,"m":2,"row_sums":[1.0,1.0],"col_sums":[1.0,1.0],"entries":[[0.6,0.5],[0.5,0.5]]}"#;
        assert!(TransportMatrix::from_json(text).is_err());
    }
}
