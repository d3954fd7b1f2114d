//! Chart variants: alternative squash functions, spectral shaping of a
//! doubly stochastic matrix, and averaging over conjugated charts.

pub mod squash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::{sigmoid, softmax, Real};
use crate::rtbp::rtbp_fill;
use crate::transport::{tbp_fill, ChartParams, Margins, TransportMatrix, MARGIN_TOL};
use squash::SquashSpec;

/// Post-minorization weight at initialization, `σ(−8)`.
pub fn post_minorization_init() -> f64 {
    sigmoid(-8.0)
}

/// Which exact chart to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    Tbp,
    Rtbp,
}

impl ChartKind {
    pub(crate) fn fill<S: Real>(
        self,
        row_sums: &[S],
        col_sums: &[S],
        params: &[S],
        squash: &SquashSpec,
    ) -> Result<Matrix<S>> {
        match self {
            ChartKind::Tbp => tbp_fill(row_sums, col_sums, params, squash),
            ChartKind::Rtbp => rtbp_fill(row_sums, col_sums, params, squash, false).map(|(x, _)| x),
        }
    }

    pub fn forward(
        self,
        margins: &Margins,
        params: &ChartParams,
        squash: &SquashSpec,
    ) -> Result<TransportMatrix> {
        let x = self.fill(
            margins.row_sums(),
            margins.col_sums(),
            params.values(),
            squash,
        )?;
        Ok(TransportMatrix::from_parts_unchecked(x, margins.clone()))
    }
}

/// Identity and uniform mixing applied after a chart:
/// `H ← (1 − λ − μ) H + λ I + μ J`, then `H ← (1 − δ) H + δ J`,
/// where `λ = 1 − lazy_alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralShaping {
    /// Weight kept on `H` by lazyfication; `1` disables it.
    pub lazy_alpha: f64,
    /// Weight on the uniform matrix `J`.
    pub minorize_mu: f64,
    /// Post-minorization weight.
    pub post_delta: f64,
}

impl Default for SpectralShaping {
    fn default() -> Self {
        Self {
            lazy_alpha: 1.0,
            minorize_mu: 0.0,
            post_delta: 0.0,
        }
    }
}

impl SpectralShaping {
    /// Only post-minorization, at its initial weight.
    pub fn post_minorized() -> Self {
        Self {
            post_delta: post_minorization_init(),
            ..Self::default()
        }
    }

    /// Maps three unconstrained logits for `(H, I, J)` through a softmax, and a
    /// post-minorization logit through a sigmoid.
    pub fn from_logits(h_i_j: [f64; 3], delta_logit: f64) -> Self {
        let w = softmax(&h_i_j);
        Self {
            lazy_alpha: w[0] + w[2],
            minorize_mu: w[2],
            post_delta: sigmoid(delta_logit),
        }
    }

    pub fn identity_weight(&self) -> f64 {
        1.0 - self.lazy_alpha
    }

    pub fn chart_weight(&self) -> f64 {
        self.lazy_alpha - self.minorize_mu
    }

    pub fn is_identity(&self) -> bool {
        self.lazy_alpha == 1.0 && self.minorize_mu == 0.0 && self.post_delta == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lazy_alpha > 0.0 && self.lazy_alpha <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "lazy_alpha must lie in (0, 1], got {}",
                self.lazy_alpha
            )));
        }
        if !(0.0..1.0).contains(&self.minorize_mu) {
            return Err(Error::InvalidSpec(format!(
                "minorize_mu must lie in [0, 1), got {}",
                self.minorize_mu
            )));
        }
        if !(0.0..1.0).contains(&self.post_delta) {
            return Err(Error::InvalidSpec(format!(
                "post_delta must lie in [0, 1), got {}",
                self.post_delta
            )));
        }
        if self.chart_weight() < 0.0 {
            return Err(Error::InvalidSpec(format!(
                "weights leave {} on the chart",
                self.chart_weight()
            )));
        }
        Ok(())
    }

    pub(crate) fn apply_generic<S: Real>(&self, h: &Matrix<S>) -> Matrix<S> {
        if self.is_identity() {
            return h.clone();
        }
        let n = h.rows();
        let (lam, mu, delta) = (self.identity_weight(), self.minorize_mu, self.post_delta);
        let w = self.chart_weight();
        let inv_n = 1.0 / n as f64;
        Matrix::from_fn(n, n, |i, j| {
            let eye = if i == j { lam } else { 0.0 };
            let mixed = h[(i, j)].scale(w) + S::constant(eye + mu * inv_n);
            mixed.scale(1.0 - delta) + S::constant(delta * inv_n)
        })
    }

    pub fn apply(&self, h: &TransportMatrix) -> Result<TransportMatrix> {
        require_square(h)?;
        self.validate()?;
        let out = self.apply_generic(h.entries());
        Ok(TransportMatrix::from_parts_unchecked(
            out,
            h.margins().clone(),
        ))
    }
}

fn require_square(h: &TransportMatrix) -> Result<()> {
    if !h.entries().is_square() {
        return Err(Error::NotSquare {
            rows: h.rows(),
            cols: h.cols(),
        });
    }
    Ok(())
}

/// `(1 − α) I + α H`.
pub fn lazyfy(h: &TransportMatrix, alpha: f64) -> Result<TransportMatrix> {
    require_square(h)?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidSpec(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let eye = Matrix::identity(h.rows());
    let out = eye.affine_combine(1.0 - alpha, h.entries(), alpha);
    Ok(TransportMatrix::from_parts_unchecked(
        out,
        h.margins().clone(),
    ))
}

/// `(1 − ε) H + ε J`.
pub fn minorize(h: &TransportMatrix, eps: f64) -> Result<TransportMatrix> {
    require_square(h)?;
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidSpec(format!(
            "eps must lie in [0, 1), got {eps}"
        )));
    }
    let j = Matrix::uniform(h.rows());
    let out = h.entries().affine_combine(1.0 - eps, &j, eps);
    Ok(TransportMatrix::from_parts_unchecked(
        out,
        h.margins().clone(),
    ))
}

/// Conjugating permutations and their convex weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragingSpec {
    /// Each entry maps position `i` to `perm[i]`, zero-based.
    pub permutations: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl AveragingSpec {
    /// Weights from a softmax over `logits`.
    pub fn from_logits(permutations: Vec<Vec<usize>>, logits: &[f64]) -> Result<Self> {
        let spec = Self {
            permutations,
            weights: softmax(logits),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Identity and reverse orders with equal weight.
    pub fn identity_and_reverse(n: usize) -> Self {
        Self {
            permutations: vec![(0..n).collect(), (0..n).rev().collect()],
            weights: vec![0.5, 0.5],
        }
    }

    pub fn len(&self) -> usize {
        self.permutations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutations.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.permutations.is_empty() || self.permutations.len() != self.weights.len() {
            return Err(Error::InvalidSpec(format!(
                "{} permutations with {} weights",
                self.permutations.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidSpec("weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > MARGIN_TOL {
            return Err(Error::InvalidSpec(format!("weights sum to {total}, not 1")));
        }
        for perm in &self.permutations {
            if !is_permutation(perm) {
                return Err(Error::InvalidSpec(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(())
    }
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter()
        .all(|&p| p < perm.len() && !std::mem::replace(&mut seen[p], true))
}

pub(crate) fn average_generic<S: Real>(
    row_sums: &[f64],
    col_sums: &[f64],
    per_chart: &[&[S]],
    spec: &AveragingSpec,
    base: ChartKind,
    squash: &SquashSpec,
) -> Result<Matrix<S>> {
    spec.validate()?;
    let n = row_sums.len();
    if col_sums.len() != n {
        return Err(Error::NotSquare {
            rows: n,
            cols: col_sums.len(),
        });
    }
    if per_chart.len() != spec.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} parameter vectors", spec.len()),
            found: format!("{}", per_chart.len()),
        });
    }
    let mut acc = Matrix::<S>::zeros(n, n);
    for ((perm, &w), params) in spec.permutations.iter().zip(&spec.weights).zip(per_chart) {
        if perm.len() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("permutation of length {n}"),
                found: format!("{}", perm.len()),
            });
        }
        // The chart is built on permuted margins so that conjugation restores
        // the original ones.
        let r: Vec<S> = perm.iter().map(|&p| S::constant(row_sums[p])).collect();
        let c: Vec<S> = perm.iter().map(|&p| S::constant(col_sums[p])).collect();
        let h = base.fill(&r, &c, params, squash)?;
        let conj = h.conjugate_by_permutation(perm);
        acc = Matrix::from_fn(n, n, |i, j| acc[(i, j)].clone() + conj[(i, j)].scale(w));
    }
    Ok(acc)
}

/// `Σ_k w_k P_kᵀ H_k P_k` with `H_k` the base chart at the `k`-th parameters.
pub fn average_charts(
    margins: &Margins,
    per_chart_params: &[ChartParams],
    spec: &AveragingSpec,
    base: ChartKind,
    squash: &SquashSpec,
) -> Result<TransportMatrix> {
    let params: Vec<&[f64]> = per_chart_params.iter().map(ChartParams::values).collect();
    let x = average_generic(
        margins.row_sums(),
        margins.col_sums(),
        &params,
        spec,
        base,
        squash,
    )?;
    Ok(TransportMatrix::from_parts_unchecked(x, margins.clone()))
}
