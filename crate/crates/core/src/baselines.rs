//! Prior parameterizations of doubly stochastic mixers: Sinkhorn–Knopp
//! normalization, convex combinations of permutation matrices, and Kronecker
//! products of such combinations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::{softmax, sum, Real};

/// Largest size accepted by [`bvn_combination`].
pub const MAX_BVN_SIZE: usize = 6;

/// Iteration count used by the reference mixer.
pub const DEFAULT_SINKHORN_ITERATIONS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornReport {
    pub row_residual: f64,
    pub col_residual: f64,
    pub iterations: usize,
}

impl SinkhornReport {
    pub fn max_residual(&self) -> f64 {
        self.row_residual.max(self.col_residual)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornOutput {
    pub matrix: Matrix,
    pub report: SinkhornReport,
}

pub(crate) fn sinkhorn_generic<S: Real>(
    logits: &Matrix<S>,
    iterations: usize,
) -> Result<Matrix<S>> {
    if iterations == 0 {
        return Err(Error::InvalidSpec(
            "sinkhorn needs at least one iteration".into(),
        ));
    }
    if !logits.is_square() {
        return Err(Error::NotSquare {
            rows: logits.rows(),
            cols: logits.cols(),
        });
    }
    let n = logits.rows();
    let mut a = Matrix::from_fn(n, n, |i, j| {
        let shift = logits
            .row(i)
            .iter()
            .map(Real::value)
            .fold(f64::NEG_INFINITY, f64::max);
        (logits[(i, j)].clone() - S::constant(shift)).exp()
    });
    if a.data().iter().any(|v| !v.value().is_finite()) {
        return Err(Error::NonFinite("sinkhorn kernel"));
    }
    for _ in 0..iterations {
        let rs = a.row_sums();
        a = Matrix::from_fn(n, n, |i, j| a[(i, j)].clone() / rs[i].clone());
        let cs = a.col_sums();
        a = Matrix::from_fn(n, n, |i, j| a[(i, j)].clone() / cs[j].clone());
    }
    Ok(a)
}

/// `iterations` rounds of row then column normalization of `exp(logits)`.
pub fn sinkhorn(logits: &Matrix, iterations: usize) -> Result<SinkhornOutput> {
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sinkhorn logits"));
    }
    let matrix = sinkhorn_generic(logits, iterations)?;
    let (row_residual, col_residual) =
        matrix.margin_deviation(&vec![1.0; matrix.rows()], &vec![1.0; matrix.cols()]);
    Ok(SinkhornOutput {
        matrix,
        report: SinkhornReport {
            row_residual,
            col_residual,
            iterations,
        },
    })
}

/// Logits `0` on the diagonal and `off` elsewhere.
pub fn identity_biased_logits(n: usize, off: f64) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { off })
}

/// Logit layouts that slow Sinkhorn convergence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialPattern {
    /// `s` at `(0, 0)`, zero elsewhere.
    SingleEntry,
    /// `−s` strictly below the diagonal, zero elsewhere.
    LowerTriangular,
}

impl AdversarialPattern {
    pub fn logits(self, n: usize, scale: f64) -> Matrix {
        match self {
            AdversarialPattern::SingleEntry => {
                Matrix::from_fn(n, n, |i, j| if i == 0 && j == 0 { scale } else { 0.0 })
            }
            AdversarialPattern::LowerTriangular => {
                Matrix::from_fn(n, n, |i, j| if i > j { -scale } else { 0.0 })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornGap {
    pub pattern: AdversarialPattern,
    pub scale: f64,
    pub logits: Matrix,
    pub report: SinkhornReport,
}

/// First `(pattern, scale)` whose Sinkhorn residual after `iterations`
/// rounds exceeds `threshold`, trying every scale of one pattern before the
/// next pattern.
pub fn find_sinkhorn_gap(
    n: usize,
    iterations: usize,
    scales: &[f64],
    threshold: f64,
) -> Result<Option<SinkhornGap>> {
    for pattern in [
        AdversarialPattern::SingleEntry,
        AdversarialPattern::LowerTriangular,
    ] {
        for &scale in scales {
            let logits = pattern.logits(n, scale);
            let out = sinkhorn(&logits, iterations)?;
            if out.report.max_residual() > threshold {
                return Ok(Some(SinkhornGap {
                    pattern,
                    scale,
                    logits,
                    report: out.report,
                }));
            }
        }
    }
    Ok(None)
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        // Next permutation, lexicographically.
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
    }
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

/// Size `n` with `n! == len`, if any.
pub fn bvn_size_for(len: usize) -> Option<usize> {
    (1..=MAX_BVN_SIZE).find(|&n| factorial(n) == len)
}

pub(crate) fn bvn_generic<S: Real>(n: usize, logits: &[S]) -> Result<Matrix<S>> {
    if n > MAX_BVN_SIZE {
        return Err(Error::TooLarge {
            n,
            max: MAX_BVN_SIZE,
        });
    }
    let perms = permutations(n);
    if logits.len() != perms.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} logits for n = {n}", perms.len()),
            found: format!("{}", logits.len()),
        });
    }
    let w = softmax(logits);
    let mut x = Matrix::<S>::zeros(n, n);
    for (perm, wk) in perms.iter().zip(&w) {
        for (i, &p) in perm.iter().enumerate() {
            x[(i, p)] = x[(i, p)].clone() + wk.clone();
        }
    }
    Ok(x)
}

/// `Σ_k softmax(logits)_k P_k`, where `P_k` has ones at `(i, π_k(i))` and the
/// permutations are enumerated lexicographically.
pub fn bvn_combination(n: usize, logits: &[f64]) -> Result<Matrix> {
    bvn_generic(n, logits)
}

/// Factor sizes and per-factor permutation logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KroneckerFactors {
    pub factor_sizes: Vec<usize>,
    pub logits: Vec<Vec<f64>>,
}

impl KroneckerFactors {
    pub fn new(factor_sizes: Vec<usize>, logits: Vec<Vec<f64>>) -> Result<Self> {
        let f = Self {
            factor_sizes,
            logits,
        };
        f.validate()?;
        Ok(f)
    }

    /// Zero logits, i.e. every factor uniform.
    pub fn uniform(factor_sizes: Vec<usize>) -> Self {
        let logits = factor_sizes
            .iter()
            .map(|&s| vec![0.0; factorial(s)])
            .collect();
        Self {
            factor_sizes,
            logits,
        }
    }

    pub fn size(&self) -> usize {
        self.factor_sizes.iter().product()
    }

    pub fn logit_count(factor_sizes: &[usize]) -> usize {
        factor_sizes.iter().map(|&s| factorial(s)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        validate_sizes(&self.factor_sizes)?;
        if self.logits.len() != self.factor_sizes.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} logit vectors", self.factor_sizes.len()),
                found: format!("{}", self.logits.len()),
            });
        }
        for (&s, l) in self.factor_sizes.iter().zip(&self.logits) {
            if l.len() != factorial(s) {
                return Err(Error::DimensionMismatch {
                    expected: format!("{} logits for a factor of size {s}", factorial(s)),
                    found: format!("{}", l.len()),
                });
            }
        }
        Ok(())
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() || sizes.iter().any(|&s| s < 2) {
        return Err(Error::InvalidSpec(format!(
            "factor sizes {sizes:?} must all be at least 2"
        )));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s > MAX_BVN_SIZE) {
        return Err(Error::TooLarge {
            n: s,
            max: MAX_BVN_SIZE,
        });
    }
    Ok(())
}

/// `U_1 ⊗ U_2 ⊗ … ⊗ U_K` over a flat logit vector, factors consecutive.
pub(crate) fn kron_generic<S: Real>(factor_sizes: &[usize], logits: &[S]) -> Result<Matrix<S>> {
    validate_sizes(factor_sizes)?;
    let expected = KroneckerFactors::logit_count(factor_sizes);
    if logits.len() != expected {
        return Err(Error::DimensionMismatch {
            expected: format!("{expected} logits"),
            found: format!("{}", logits.len()),
        });
    }
    let mut offset = 0;
    let mut acc: Option<Matrix<S>> = None;
    for &s in factor_sizes {
        let len = factorial(s);
        let u = bvn_generic(s, &logits[offset..offset + len])?;
        offset += len;
        acc = Some(match acc {
            None => u,
            Some(a) => a.kron(&u),
        });
    }
    Ok(acc.expect("at least one factor"))
}

pub fn kronecker_mix(factors: &KroneckerFactors) -> Result<Matrix> {
    factors.validate()?;
    kron_generic(&factors.factor_sizes, &factors.logits.concat())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KronFit {
    pub distance: f64,
    pub factors: KroneckerFactors,
}

/// Smallest Frobenius distance from `target` to the Kronecker family over
/// `factor_sizes`, found by a coarse grid over each factor's leading logit
/// followed by compass search on all logits.
pub fn kron_best_fit(target: &Matrix, factor_sizes: &[usize]) -> Result<KronFit> {
    validate_sizes(factor_sizes)?;
    let n: usize = factor_sizes.iter().product();
    if target.rows() != n || target.cols() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n}×{n} target"),
            found: format!("{}×{}", target.rows(), target.cols()),
        });
    }
    let dim = KroneckerFactors::logit_count(factor_sizes);
    let distance = |x: &[f64]| -> f64 {
        kron_generic(factor_sizes, x)
            .map(|k| k.frobenius_distance(target))
            .unwrap_or(f64::INFINITY)
    };
    // Coarse start: the first logit of each factor on a grid, the rest zero.
    let heads: Vec<usize> = factor_sizes
        .iter()
        .scan(0, |off, &s| {
            let h = *off;
            *off += factorial(s);
            Some(h)
        })
        .collect();
    let grid: Vec<f64> = (0..=12).map(|k| -6.0 + k as f64).collect();
    let mut starts = vec![vec![0.0; dim]];
    for &h in &heads {
        starts = starts
            .into_iter()
            .flat_map(|s| {
                grid.iter().map(move |&g| {
                    let mut s = s.clone();
                    s[h] = g;
                    s
                })
            })
            .collect();
    }
    starts.sort_by(|a, b| distance(a).total_cmp(&distance(b)));
    let mut best = (f64::INFINITY, vec![0.0; dim]);
    for start in starts.into_iter().take(8) {
        let (d, x) = compass_search(&distance, start, 1.0, 1e-9, 20_000);
        if d < best.0 {
            best = (d, x);
        }
    }
    let mut offset = 0;
    let logits = factor_sizes
        .iter()
        .map(|&s| {
            let l = best.1[offset..offset + factorial(s)].to_vec();
            offset += factorial(s);
            l
        })
        .collect();
    Ok(KronFit {
        distance: best.0,
        factors: KroneckerFactors::new(factor_sizes.to_vec(), logits)?,
    })
}

fn compass_search(
    f: &dyn Fn(&[f64]) -> f64,
    mut x: Vec<f64>,
    mut step: f64,
    min_step: f64,
    max_evals: usize,
) -> (f64, Vec<f64>) {
    let mut fx = f(&x);
    let mut evals = 1;
    while step > min_step && evals < max_evals {
        let mut improved = false;
        for i in 0..x.len() {
            for dir in [1.0, -1.0] {
                let mut y = x.clone();
                y[i] += dir * step;
                let fy = f(&y);
                evals += 1;
                if fy < fx {
                    x = y;
                    fx = fy;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (fx, x)
}

/// Sum of softmax weights, for checking normalization.
pub fn softmax_total(logits: &[f64]) -> f64 {
    sum(softmax(logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinkhorn_zero_logits() {
        let out = sinkhorn(&Matrix::zeros(2, 2), 1).unwrap();
        assert_eq!(out.matrix.to_rows(), vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(out.report.max_residual(), 0.0);
    }

    #[test]
    fn sinkhorn_identity_bias() {
        let out = sinkhorn(&identity_biased_logits(4, -8.0), 20).unwrap();
        assert!(out.report.max_residual() < 1e-6);
        assert!(out.matrix.max_abs_diff(&Matrix::identity(4)) < 1e-2);
    }

    #[test]
    fn sinkhorn_rejects_zero_iterations_and_nan() {
        assert!(sinkhorn(&Matrix::zeros(2, 2), 0).is_err());
        let bad = Matrix::from_rows(&[vec![f64::NAN, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(sinkhorn(&bad, 3), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sinkhorn_huge_logits_do_not_overflow() {
        let l = Matrix::from_rows(&[vec![800.0, 0.0], vec![0.0, 800.0]]).unwrap();
        let out = sinkhorn(&l, 5).unwrap();
        assert!(out.matrix.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rank_one_kernel_converges_in_one_round() {
        let mut l = Matrix::zeros(4, 4);
        for j in 0..4 {
            l[(0, j)] = 16.0;
        }
        assert!(sinkhorn(&l, 1).unwrap().report.max_residual() < 1e-15);
    }

    #[test]
    fn adversarial_search_finds_gap() {
        let gap = find_sinkhorn_gap(4, 20, &[4.0, 8.0, 16.0], 1e-4)
            .unwrap()
            .unwrap();
        assert!(gap.report.max_residual() > 1e-4);
        assert_eq!(gap.pattern, AdversarialPattern::SingleEntry);
        assert_eq!(gap.scale, 8.0);
    }

    #[test]
    fn report_json_fields() {
        let r = SinkhornReport {
            row_residual: 0.5,
            col_residual: 0.0,
            iterations: 20,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"row_residual":0.5,"col_residual":0.0,"iterations":20}"#
        );
    }

    #[test]
    fn permutations_lexicographic() {
        let p = permutations(3);
        assert_eq!(
            p,
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
        assert_eq!(permutations(1), vec![vec![0]]);
    }

    #[test]
    fn permutations_unique() {
        for n in 1..=5 {
            let p = permutations(n);
            assert_eq!(p.len(), factorial(n));
            let set: std::collections::BTreeSet<_> = p.iter().collect();
            assert_eq!(set.len(), p.len());
            assert!(p.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn bvn_near_identity() {
        let x = bvn_combination(2, &[0.0, -8.0]).unwrap();
        let w = 1.0 / (1.0 + (-8f64).exp());
        assert!((x[(0, 0)] - w).abs() < 1e-15);
        assert!((x[(0, 1)] - (1.0 - w)).abs() < 1e-15);
        assert!((x[(0, 0)] - 0.999_664_649).abs() < 1e-9);
    }

    #[test]
    fn bvn_uniform_is_j() {
        let x = bvn_combination(3, &[0.0; 6]).unwrap();
        assert!(x.max_abs_diff(&Matrix::uniform(3)) < 1e-15);
    }

    #[test]
    fn bvn_saturates_to_transposition() {
        let mut logits = vec![0.0; 6];
        logits[1] = 40.0;
        let x = bvn_combination(3, &logits).unwrap();
        let p = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        assert!(x.max_abs_diff(&p) < 1e-8);
    }

    #[test]
    fn bvn_errors() {
        assert!(matches!(
            bvn_combination(7, &[]),
            Err(Error::TooLarge { .. })
        ));
        assert!(matches!(
            bvn_combination(3, &[0.0; 5]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert_eq!(bvn_size_for(24), Some(4));
        assert_eq!(bvn_size_for(5), None);
    }

    #[test]
    fn kron_identity_and_uniform() {
        let id = KroneckerFactors::new(vec![2, 2], vec![vec![30.0, 0.0], vec![30.0, 0.0]]).unwrap();
        assert!(
            kronecker_mix(&id)
                .unwrap()
                .max_abs_diff(&Matrix::identity(4))
                < 1e-8
        );
        let u = KroneckerFactors::uniform(vec![2, 2]);
        assert!(kronecker_mix(&u).unwrap().max_abs_diff(&Matrix::uniform(4)) < 1e-16);
    }

    #[test]
    fn kron_order_is_first_factor_outermost() {
        let f = KroneckerFactors::new(vec![2, 2], vec![vec![40.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let block = Matrix::from_rows(&[
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 0.5, 0.5],
            vec![0.0, 0.0, 0.5, 0.5],
        ])
        .unwrap();
        assert!(kronecker_mix(&f).unwrap().max_abs_diff(&block) < 1e-12);
        assert!(kron_best_fit(&block, &[2, 2]).unwrap().distance < 1e-6);
    }

    #[test]
    fn kron_validation() {
        assert!(KroneckerFactors::new(vec![1, 4], vec![vec![0.0], vec![0.0; 24]]).is_err());
        assert!(KroneckerFactors::new(vec![2, 2], vec![vec![0.0; 2]]).is_err());
        assert!(KroneckerFactors::new(vec![2, 3], vec![vec![0.0; 2], vec![0.0; 2]]).is_err());
    }

    #[test]
    fn cycle_is_far_from_kron_family() {
        let c4 = Matrix::from_fn(4, 4, |i, j| if j == (i + 1) % 4 { 1.0 } else { 0.0 });
        let target = c4.affine_combine(0.9, &Matrix::uniform(4), 0.1);
        let fit = kron_best_fit(&target, &[2, 2]).unwrap();
        assert!(fit.distance > 0.1, "{}", fit.distance);
    }
}
