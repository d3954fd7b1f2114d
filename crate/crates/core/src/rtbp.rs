//! Recursive block-decomposition chart (RTBP).
//!
//! An `n × m` instance is cut into a 2×2 block grid at `k = ⌈n/2⌉`,
//! `l = ⌈m/2⌉`. One parameter picks the mass `M11` of the top-left block,
//! which fixes the other three block masses. Bounded sequential fills then
//! split every row margin into a left and a right share and every column
//! margin into a top and a bottom share so the four blocks balance, and each
//! block is solved recursively. 2×2 instances are built directly from a single
//! feasibility interval.
//!
//! When the top-level instance has an odd number of rows (columns), the last
//! row (column) is filled first and the recursion runs on the even remainder.
//!
//! Parameters are consumed in pre-order: the `M11` parameter, the row splits
//! for `I1` then `I2`, the column splits for `J1` then `J2`, then blocks
//! 11, 12, 21, 22. The total is `(n − 1)(m − 1)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::{max_of, min_of, Dual, Real};
use crate::transport::{
    interval_bounds, place, tangent_matrix, total, ChartParams, Margins, TransportMatrix,
    MARGIN_TOL,
};
use crate::variants::squash::SquashSpec;

/// The masses and margin shares chosen at one split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockSplit {
    /// Rows in the top group.
    pub k: usize,
    /// Columns in the left group.
    pub l: usize,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    pub m11: f64,
    pub m12: f64,
    pub m21: f64,
    pub m22: f64,
    /// Share of each row sent to the left column group.
    pub r_prime: Vec<f64>,
    /// Share of each row sent to the right column group.
    pub r_dprime: Vec<f64>,
    /// Share of each column received from the top row group.
    pub c_prime: Vec<f64>,
    /// Share of each column received from the bottom row group.
    pub c_dprime: Vec<f64>,
}

impl BlockSplit {
    /// Largest violation among the margin decomposition, the eight block
    /// balance equalities and the admissible range of `M11`.
    pub fn max_violation(&self) -> f64 {
        let (k, l) = (self.k, self.l);
        let s = |v: &[f64]| v.iter().sum::<f64>();
        let mut worst: f64 = 0.0;
        for (i, r) in self.row_sums.iter().enumerate() {
            worst = worst.max((self.r_prime[i] + self.r_dprime[i] - r).abs());
        }
        for (j, c) in self.col_sums.iter().enumerate() {
            worst = worst.max((self.c_prime[j] + self.c_dprime[j] - c).abs());
        }
        let checks = [
            (s(&self.r_prime[..k]), self.m11),
            (s(&self.c_prime[..l]), self.m11),
            (s(&self.r_dprime[..k]), self.m12),
            (s(&self.c_prime[l..]), self.m12),
            (s(&self.r_prime[k..]), self.m21),
            (s(&self.c_dprime[..l]), self.m21),
            (s(&self.r_dprime[k..]), self.m22),
            (s(&self.c_dprime[l..]), self.m22),
        ];
        for (a, b) in checks {
            worst = worst.max((a - b).abs());
        }
        let (r1, r2) = (s(&self.row_sums[..k]), s(&self.row_sums[k..]));
        let (c1, c2) = (s(&self.col_sums[..l]), s(&self.col_sums[l..]));
        let lower = 0f64.max(r1 - c2).max(c1 - r2);
        let upper = r1.min(c1);
        worst = worst.max(lower - self.m11).max(self.m11 - upper);
        worst
    }
}

/// Record of how the recursion built a matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum RtbpTrace {
    /// A single row, column or explicit 2×2 instance.
    Leaf { rows: usize, cols: usize },
    /// Last row filled first (odd row count).
    ChipRow {
        values: Vec<f64>,
        rest: Box<RtbpTrace>,
    },
    /// Last column filled first (odd column count).
    ChipCol {
        values: Vec<f64>,
        rest: Box<RtbpTrace>,
    },
    Split {
        split: BlockSplit,
        blocks: Box<[RtbpTrace; 4]>,
    },
}

impl RtbpTrace {
    /// Every split in the tree, pre-order.
    pub fn splits(&self) -> Vec<&BlockSplit> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a BlockSplit>) {
        match self {
            RtbpTrace::Leaf { .. } => {}
            RtbpTrace::ChipRow { rest, .. } | RtbpTrace::ChipCol { rest, .. } => rest.collect(out),
            RtbpTrace::Split { split, blocks } => {
                out.push(split);
                for b in blocks.iter() {
                    b.collect(out);
                }
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }
}

trait ParamSource<S> {
    fn next(&mut self) -> Result<S>;
}

struct SliceSource<'a, S> {
    params: &'a [S],
    pos: usize,
}

impl<S: Real> ParamSource<S> for SliceSource<'_, S> {
    fn next(&mut self) -> Result<S> {
        let v = self
            .params
            .get(self.pos)
            .cloned()
            .ok_or(Error::ParamCount {
                expected: self.pos + 1,
                found: self.params.len(),
            })?;
        self.pos += 1;
        Ok(v)
    }
}

/// Hands out zeros and counts how many were requested.
#[derive(Default)]
struct Counter {
    count: usize,
}

impl ParamSource<f64> for Counter {
    fn next(&mut self) -> Result<f64> {
        self.count += 1;
        Ok(0.0)
    }
}

/// `(M11, M12, M21, M22)` for row groups of mass `R1, R2` and column groups of
/// mass `C1, C2`.
pub fn split_mass(
    r1: f64,
    r2: f64,
    c1: f64,
    c2: f64,
    t0: f64,
    squash: &SquashSpec,
) -> Result<(f64, f64, f64, f64)> {
    if ((r1 + r2) - (c1 + c2)).abs() > MARGIN_TOL {
        return Err(Error::InvalidMargins(format!(
            "row mass {} differs from column mass {}",
            r1 + r2,
            c1 + c2
        )));
    }
    let [a, b, c, d] = block_masses(r1, r2, c1, c2, t0, squash)?;
    Ok((a, b, c, d))
}

fn block_masses<S: Real>(r1: S, r2: S, c1: S, c2: S, t0: S, squash: &SquashSpec) -> Result<[S; 4]> {
    let lower = max_of(max_of(S::zero(), r1.clone() - c2), c1.clone() - r2.clone());
    let upper = min_of(r1.clone(), c1.clone());
    if lower.value() > upper.value() + MARGIN_TOL {
        return Err(Error::InfeasibleState {
            lower: lower.value(),
            upper: upper.value(),
        });
    }
    let upper = max_of(upper, lower.clone());
    let m11 = place(lower, upper, t0, squash);
    let m12 = r1 - m11.clone();
    let m21 = c1 - m11.clone();
    let m22 = r2 - m21.clone();
    Ok([m11, m12, m21, m22])
}

/// Splits `target_mass` across slots with capacities `caps` by a bounded
/// sequential fill; consumes `caps.len() − 1` parameters.
pub fn split_margins(
    caps: &[f64],
    target_mass: f64,
    params: &[f64],
    squash: &SquashSpec,
) -> Result<Vec<f64>> {
    if caps.is_empty() {
        return Err(Error::InvalidSpec("no slots to split into".into()));
    }
    if params.len() != caps.len() - 1 {
        return Err(Error::ParamCount {
            expected: caps.len() - 1,
            found: params.len(),
        });
    }
    let mut src = SliceSource { params, pos: 0 };
    bounded_fill(caps, target_mass, &mut src, squash)
}

fn bounded_fill<S: Real>(
    caps: &[S],
    target: S,
    src: &mut impl ParamSource<S>,
    squash: &SquashSpec,
) -> Result<Vec<S>> {
    let g = caps.len();
    let capacity = total(caps).value();
    if target.value() < -MARGIN_TOL || target.value() > capacity + MARGIN_TOL {
        return Err(Error::InfeasibleState {
            lower: target.value(),
            upper: capacity,
        });
    }
    let mut tail = vec![S::zero(); g];
    for i in (0..g - 1).rev() {
        tail[i] = tail[i + 1].clone() + caps[i + 1].clone();
    }
    let mut remaining = target;
    let mut out = Vec::with_capacity(g);
    for i in 0..g - 1 {
        let lower = max_of(S::zero(), remaining.clone() - tail[i].clone());
        let upper = min_of(caps[i].clone(), remaining.clone());
        if lower.value() > upper.value() + MARGIN_TOL {
            return Err(Error::InfeasibleState {
                lower: lower.value(),
                upper: upper.value(),
            });
        }
        let upper = max_of(upper, lower.clone());
        let v = place(lower, upper, src.next()?, squash);
        remaining = remaining - v.clone();
        out.push(v);
    }
    out.push(remaining);
    Ok(out)
}

fn values<S: Real>(xs: &[S]) -> Vec<f64> {
    xs.iter().map(Real::value).collect()
}

fn minus<S: Real>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.clone() - y.clone())
        .collect()
}

fn half_up(n: usize) -> usize {
    n.div_ceil(2)
}

struct Recursion<'a, P> {
    src: P,
    squash: &'a SquashSpec,
    trace: bool,
}

type Built<S> = (Matrix<S>, Option<RtbpTrace>);

impl<P> Recursion<'_, P> {
    fn leaf(&self, rows: usize, cols: usize) -> Option<RtbpTrace> {
        self.trace.then_some(RtbpTrace::Leaf { rows, cols })
    }

    fn solve<S: Real>(&mut self, r: &[S], c: &[S], top: bool) -> Result<Built<S>>
    where
        P: ParamSource<S>,
    {
        let (n, m) = (r.len(), c.len());
        if n == 1 {
            return Ok((Matrix::from_fn(1, m, |_, j| c[j].clone()), self.leaf(1, m)));
        }
        if m == 1 {
            return Ok((Matrix::from_fn(n, 1, |i, _| r[i].clone()), self.leaf(n, 1)));
        }
        if top && n % 2 == 1 {
            return self.chip_row(r, c);
        }
        if top && m % 2 == 1 {
            return self.chip_col(r, c);
        }
        if n == 2 && m == 2 {
            return self.two_by_two(r, c);
        }
        self.split(r, c)
    }

    fn chip_row<S: Real>(&mut self, r: &[S], c: &[S]) -> Result<Built<S>>
    where
        P: ParamSource<S>,
    {
        let (n, m) = (r.len(), c.len());
        let last = bounded_fill(c, r[n - 1].clone(), &mut self.src, self.squash)?;
        let rest_cols = minus(c, &last);
        // Continue at top level so an odd column count is chipped as well.
        let (rest, rest_trace) = self.solve(&r[..n - 1], &rest_cols, m % 2 == 1)?;
        let x = Matrix::from_fn(n, m, |i, j| {
            if i == n - 1 {
                last[j].clone()
            } else {
                rest[(i, j)].clone()
            }
        });
        let trace = rest_trace.map(|rest| RtbpTrace::ChipRow {
            values: values(&last),
            rest: Box::new(rest),
        });
        Ok((x, trace))
    }

    fn chip_col<S: Real>(&mut self, r: &[S], c: &[S]) -> Result<Built<S>>
    where
        P: ParamSource<S>,
    {
        let (n, m) = (r.len(), c.len());
        let last = bounded_fill(r, c[m - 1].clone(), &mut self.src, self.squash)?;
        let rest_rows = minus(r, &last);
        let (rest, rest_trace) = self.solve(&rest_rows, &c[..m - 1], false)?;
        let x = Matrix::from_fn(n, m, |i, j| {
            if j == m - 1 {
                last[i].clone()
            } else {
                rest[(i, j)].clone()
            }
        });
        let trace = rest_trace.map(|rest| RtbpTrace::ChipCol {
            values: values(&last),
            rest: Box::new(rest),
        });
        Ok((x, trace))
    }

    fn two_by_two<S: Real>(&mut self, r: &[S], c: &[S]) -> Result<Built<S>>
    where
        P: ParamSource<S>,
    {
        let (lower, upper) =
            interval_bounds(r[0].clone(), c[0].clone(), c[1].clone(), r[1].clone())?;
        let x11 = place(lower, upper, self.src.next()?, self.squash);
        let x12 = r[0].clone() - x11.clone();
        let x21 = c[0].clone() - x11.clone();
        let x22 = r[1].clone() - x21.clone();
        let x = Matrix::from_vec(2, 2, vec![x11, x12, x21, x22])?;
        Ok((x, self.leaf(2, 2)))
    }

    fn split<S: Real>(&mut self, r: &[S], c: &[S]) -> Result<Built<S>>
    where
        P: ParamSource<S>,
    {
        let (n, m) = (r.len(), c.len());
        let (k, l) = (half_up(n), half_up(m));
        let (r_top, r_bot) = r.split_at(k);
        let (c_left, c_right) = c.split_at(l);
        let t0 = self.src.next()?;
        let [m11, m12, m21, m22] = block_masses(
            total(r_top),
            total(r_bot),
            total(c_left),
            total(c_right),
            t0,
            self.squash,
        )?;
        let masses = [m11.value(), m12.value(), m21.value(), m22.value()];

        let rp_top = bounded_fill(r_top, m11.clone(), &mut self.src, self.squash)?;
        let rp_bot = bounded_fill(r_bot, m21, &mut self.src, self.squash)?;
        let cp_left = bounded_fill(c_left, m11, &mut self.src, self.squash)?;
        let cp_right = bounded_fill(c_right, m12, &mut self.src, self.squash)?;
        let rpp_top = minus(r_top, &rp_top);
        let rpp_bot = minus(r_bot, &rp_bot);
        let cpp_left = minus(c_left, &cp_left);
        let cpp_right = minus(c_right, &cp_right);

        let (x11, t11) = self.solve(&rp_top, &cp_left, false)?;
        let (x12, t12) = self.solve(&rpp_top, &cp_right, false)?;
        let (x21, t21) = self.solve(&rp_bot, &cpp_left, false)?;
        let (x22, t22) = self.solve(&rpp_bot, &cpp_right, false)?;

        let x = Matrix::from_fn(n, m, |i, j| match (i < k, j < l) {
            (true, true) => x11[(i, j)].clone(),
            (true, false) => x12[(i, j - l)].clone(),
            (false, true) => x21[(i - k, j)].clone(),
            (false, false) => x22[(i - k, j - l)].clone(),
        });

        let trace = match (t11, t12, t21, t22) {
            (Some(a), Some(b), Some(c2), Some(d)) => {
                let cat = |a: &[S], b: &[S]| values(a).into_iter().chain(values(b)).collect();
                Some(RtbpTrace::Split {
                    split: BlockSplit {
                        k,
                        l,
                        row_sums: values(r),
                        col_sums: values(c),
                        m11: masses[0],
                        m12: masses[1],
                        m21: masses[2],
                        m22: masses[3],
                        r_prime: cat(&rp_top, &rp_bot),
                        r_dprime: cat(&rpp_top, &rpp_bot),
                        c_prime: cat(&cp_left, &cp_right),
                        c_dprime: cat(&cpp_left, &cpp_right),
                    },
                    blocks: Box::new([a, b, c2, d]),
                })
            }
            _ => None,
        };
        Ok((x, trace))
    }
}

pub(crate) fn rtbp_fill<S: Real>(
    row_sums: &[S],
    col_sums: &[S],
    params: &[S],
    squash: &SquashSpec,
    trace: bool,
) -> Result<Built<S>> {
    let expected = ChartParams::expected_len(row_sums.len(), col_sums.len());
    if params.len() != expected {
        return Err(Error::ParamCount {
            expected,
            found: params.len(),
        });
    }
    let mut rec = Recursion {
        src: SliceSource { params, pos: 0 },
        squash,
        trace,
    };
    let built = rec.solve(row_sums, col_sums, true)?;
    debug_assert_eq!(rec.src.pos, expected);
    Ok(built)
}

pub fn rtbp_forward(
    margins: &Margins,
    params: &ChartParams,
    squash: &SquashSpec,
) -> Result<TransportMatrix> {
    let (x, _) = rtbp_fill(
        margins.row_sums(),
        margins.col_sums(),
        params.values(),
        squash,
        false,
    )?;
    Ok(TransportMatrix::from_parts_unchecked(x, margins.clone()))
}

/// Like [`rtbp_forward`], also returning the tree of splits.
pub fn rtbp_forward_traced(
    margins: &Margins,
    params: &ChartParams,
    squash: &SquashSpec,
) -> Result<(TransportMatrix, RtbpTrace)> {
    let (x, trace) = rtbp_fill(
        margins.row_sums(),
        margins.col_sums(),
        params.values(),
        squash,
        true,
    )?;
    let trace = trace.expect("tracing was requested");
    Ok((
        TransportMatrix::from_parts_unchecked(x, margins.clone()),
        trace,
    ))
}

/// Same layout as [`crate::transport::tbp_jacobian`].
pub fn rtbp_jacobian(
    margins: &Margins,
    params: &ChartParams,
    squash: &SquashSpec,
) -> Result<Matrix> {
    let t = Dual::variables(params.values());
    let consts = |v: &[f64]| v.iter().map(|&x| Dual::constant(x)).collect::<Vec<_>>();
    let (x, _) = rtbp_fill(
        &consts(margins.row_sums()),
        &consts(margins.col_sums()),
        &t,
        squash,
        false,
    )?;
    Ok(tangent_matrix(&x, params.len()))
}

/// Number of parameters the recursion requests on an `n × m` instance,
/// obtained by running it with a counting parameter source.
pub fn count_params(n: usize, m: usize) -> usize {
    if n == 0 || m == 0 {
        return 0;
    }
    let r = vec![m as f64; n];
    let c = vec![n as f64; m];
    let squash = SquashSpec::sigmoid();
    let mut rec = Recursion {
        src: Counter::default(),
        squash: &squash,
        trace: false,
    };
    rec.solve(&r, &c, true)
        .expect("uniform margins are always feasible");
    rec.src.count
}

/// Settings for [`rtbp_inverse_numeric`].
#[derive(Clone, Copy, Debug)]
pub struct InversionOptions {
    pub max_iterations: usize,
    /// Stop once every entry is within this distance of the target.
    pub tolerance: f64,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Inversion {
    pub params: ChartParams,
    pub max_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Finds RTBP parameters reproducing `target` by damped Gauss–Newton
/// (Levenberg–Marquardt) on the entrywise residuals, starting from zero.
pub fn rtbp_inverse_numeric(
    target: &TransportMatrix,
    squash: &SquashSpec,
    options: InversionOptions,
) -> Result<Inversion> {
    let margins = target.margins();
    let p = ChartParams::expected_len(margins.rows(), margins.cols());
    let goal = target.entries().data();
    let residual = |t: &[f64]| -> Result<(Vec<f64>, f64)> {
        let x = rtbp_forward(margins, &ChartParams::new(t.to_vec()), squash)?;
        let r: Vec<f64> = x
            .entries()
            .data()
            .iter()
            .zip(goal)
            .map(|(a, b)| a - b)
            .collect();
        let cost = r.iter().map(|v| v * v).sum::<f64>();
        Ok((r, cost))
    };
    let max_abs = |r: &[f64]| r.iter().fold(0f64, |a, v| a.max(v.abs()));

    let mut t = vec![0.0; p];
    let (mut r, mut cost) = residual(&t)?;
    let mut damping = 1e-3;
    let mut iterations = 0;
    while iterations < options.max_iterations && max_abs(&r) > options.tolerance {
        iterations += 1;
        let jac = rtbp_jacobian(margins, &ChartParams::new(t.clone()), squash)?;
        let rows = jac.rows();
        let jtj = Matrix::from_fn(p, p, |a, b| {
            (0..rows).map(|i| jac[(i, a)] * jac[(i, b)]).sum()
        });
        let jtr: Vec<f64> = (0..p)
            .map(|a| (0..rows).map(|i| jac[(i, a)] * r[i]).sum())
            .collect();
        let mut improved = false;
        for _ in 0..30 {
            let mut system = jtj.clone();
            for a in 0..p {
                system[(a, a)] += damping * (1.0 + jtj[(a, a)]);
            }
            let Some(step) = solve_spd(&system, &jtr) else {
                damping *= 10.0;
                continue;
            };
            let candidate: Vec<f64> = t.iter().zip(&step).map(|(a, s)| a - s).collect();
            let (rc, cc) = residual(&candidate)?;
            if cc < cost {
                t = candidate;
                r = rc;
                cost = cc;
                damping = (damping * 0.3).max(1e-15);
                improved = true;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let max_residual = max_abs(&r);
    Ok(Inversion {
        params: ChartParams::new(t),
        max_residual,
        iterations,
        converged: max_residual <= options.tolerance,
    })
}

/// Cholesky solve of a symmetric positive definite system.
fn solve_spd(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows();
    let mut l = Matrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
            if i == j {
                let d = a[(i, i)] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[(i, k)] * y[k]).sum();
        y[i] = (b[i] - s) / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[(k, i)] * x[k]).sum();
        x[i] = (y[i] - s) / l[(i, i)];
    }
    Some(x)
}
