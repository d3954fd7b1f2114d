//! Eigenvalues and spectral gaps of small dense mixing matrices, and
//! products of mixer chains.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Largest matrix the dense solver accepts.
pub const MAX_SPECTRAL_SIZE: usize = 64;

/// Tolerance for treating an input as doubly stochastic or symmetric.
pub const SPECTRAL_TOL: f64 = 1e-10;

const MAX_QR_SWEEPS: usize = 60;

/// Householder reduction to upper Hessenberg form.
fn hessenberg(a: &mut [Vec<f64>]) {
    let n = a.len();
    for k in 0..n.saturating_sub(2) {
        let norm = (k + 1..n).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a[k + 1][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k + 1..n).map(|i| a[i][k]).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        // A ← (I − 2vvᵀ) A
        for j in 0..n {
            let dot: f64 = v
                .iter()
                .enumerate()
                .map(|(r, vr)| vr * a[k + 1 + r][j])
                .sum();
            for (r, vr) in v.iter().enumerate() {
                a[k + 1 + r][j] -= 2.0 * vr * dot;
            }
        }
        // A ← A (I − 2vvᵀ)
        for row in a.iter_mut() {
            let dot: f64 = v
                .iter()
                .enumerate()
                .map(|(c, vc)| vc * row[k + 1 + c])
                .sum();
            for (c, vc) in v.iter().enumerate() {
                row[k + 1 + c] -= 2.0 * vc * dot;
            }
        }
        a[k + 1][k] = alpha;
        for row in a.iter_mut().skip(k + 2) {
            row[k] = 0.0;
        }
    }
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix, deflating 1×1 and
/// 2×2 blocks from the bottom.
fn hessenberg_eigenvalues(a: &mut [Vec<f64>]) -> Result<Vec<Complex64>> {
    let n = a.len();
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];
    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[i][j].abs();
        }
    }
    let eps = f64::EPSILON;
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    while nn >= 0 {
        let mut its = 0;
        let mut l;
        loop {
            let nu = nn as usize;
            l = nu;
            while l > 0 {
                let mut s = a[l - 1][l - 1].abs() + a[l][l].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[l][l - 1].abs() <= eps * s {
                    a[l][l - 1] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a[nu][nu];
            if l == nu {
                wr[nu] = x + t;
                wi[nu] = 0.0;
                nn -= 1;
            } else {
                let mut y = a[nu - 1][nu - 1];
                let mut w = a[nu][nu - 1] * a[nu - 1][nu];
                if l == nu - 1 {
                    let p = 0.5 * (y - x);
                    let q = p * p + w;
                    let mut z = q.abs().sqrt();
                    x += t;
                    if q >= 0.0 {
                        z = p + sign(z, p);
                        wr[nu - 1] = x + z;
                        wr[nu] = x + z;
                        if z != 0.0 {
                            wr[nu] = x - w / z;
                        }
                        wi[nu - 1] = 0.0;
                        wi[nu] = 0.0;
                    } else {
                        wr[nu - 1] = x + p;
                        wr[nu] = x + p;
                        wi[nu - 1] = -z;
                        wi[nu] = z;
                    }
                    nn -= 2;
                } else {
                    if its == MAX_QR_SWEEPS {
                        return Err(Error::NonFinite("eigenvalue iteration did not converge"));
                    }
                    if its == 10 || its == 20 {
                        // Exceptional shift.
                        t += x;
                        for (i, row) in a.iter_mut().enumerate().take(nu + 1) {
                            row[i] -= x;
                        }
                        let s = a[nu][nu - 1].abs() + a[nu - 1][nu - 2].abs();
                        x = 0.75 * s;
                        y = x;
                        w = -0.4375 * s * s;
                    }
                    its += 1;
                    let (mut p, mut q, mut r, mut z);
                    let mut m = nu - 2;
                    loop {
                        z = a[m][m];
                        r = x - z;
                        let s = y - z;
                        p = (r * s - w) / a[m + 1][m] + a[m][m + 1];
                        q = a[m + 1][m + 1] - z - r - s;
                        r = a[m + 2][m + 1];
                        let s = p.abs() + q.abs() + r.abs();
                        p /= s;
                        q /= s;
                        r /= s;
                        if m == l {
                            break;
                        }
                        let u = a[m][m - 1].abs() * (q.abs() + r.abs());
                        let v = p.abs() * (a[m - 1][m - 1].abs() + z.abs() + a[m + 1][m + 1].abs());
                        if u <= eps * v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in m..nu - 1 {
                        a[i + 2][i] = 0.0;
                        if i != m {
                            a[i + 2][i - 1] = 0.0;
                        }
                    }
                    for k in m..nu {
                        if k != m {
                            p = a[k][k - 1];
                            q = a[k + 1][k - 1];
                            r = 0.0;
                            if k + 1 != nu {
                                r = a[k + 2][k - 1];
                            }
                            x = p.abs() + q.abs() + r.abs();
                            if x != 0.0 {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        let s = sign((p * p + q * q + r * r).sqrt(), p);
                        if s == 0.0 {
                            continue;
                        }
                        if k == m {
                            if l != m {
                                a[k][k - 1] = -a[k][k - 1];
                            }
                        } else {
                            a[k][k - 1] = -s * x;
                        }
                        p += s;
                        x = p / s;
                        y = q / s;
                        z = r / s;
                        q /= p;
                        r /= p;
                        for j in k..=nu {
                            let mut pp = a[k][j] + q * a[k + 1][j];
                            if k + 1 != nu {
                                pp += r * a[k + 2][j];
                                a[k + 2][j] -= pp * z;
                            }
                            a[k + 1][j] -= pp * y;
                            a[k][j] -= pp * x;
                        }
                        let mmin = nu.min(k + 3);
                        for row in a.iter_mut().take(mmin + 1).skip(l) {
                            let mut pp = x * row[k] + y * row[k + 1];
                            if k + 1 != nu {
                                pp += z * row[k + 2];
                                row[k + 2] -= pp * r;
                            }
                            row[k + 1] -= pp * q;
                            row[k] -= pp;
                        }
                    }
                }
            }
            if l as isize + 1 >= nn {
                break;
            }
        }
    }
    Ok(wr
        .into_iter()
        .zip(wi)
        .map(|(re, im)| Complex64::new(re, im))
        .collect())
}

/// All eigenvalues of a square matrix, in no particular order.
pub fn eigenvalues(h: &Matrix) -> Result<Vec<Complex64>> {
    if !h.is_square() {
        return Err(Error::NotSquare {
            rows: h.rows(),
            cols: h.cols(),
        });
    }
    if h.rows() > MAX_SPECTRAL_SIZE {
        return Err(Error::TooLarge {
            n: h.rows(),
            max: MAX_SPECTRAL_SIZE,
        });
    }
    if h.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix entries"));
    }
    let mut a = h.to_rows();
    hessenberg(&mut a);
    hessenberg_eigenvalues(&mut a)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    /// Eigenvalues sorted by decreasing modulus, each as `[re, im]`.
    pub eigenvalues: Vec<Complex64>,
    pub eigenvalue_moduli: Vec<f64>,
    /// `1 − λ₂` over real parts; only for symmetric inputs.
    pub spectral_gap: Option<f64>,
    /// `1 − max_{i≥2} |λ_i|`.
    pub absolute_gap: f64,
    /// Every entry strictly positive.
    pub is_ergodic: bool,
    pub is_doubly_stochastic: bool,
}

impl SpectralReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn analyze(h: &Matrix) -> Result<SpectralReport> {
    let mut eig = eigenvalues(h)?;
    let is_doubly_stochastic =
        h.min_entry() >= -SPECTRAL_TOL && h.stochastic_deviation() <= SPECTRAL_TOL;
    if !is_doubly_stochastic {
        log::warn!(
            "analyzing a matrix that is not doubly stochastic (margin deviation {:.3e}, min entry {:.3e})",
            h.stochastic_deviation(),
            h.min_entry()
        );
    }
    eig.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(b.re.total_cmp(&a.re)));
    let eigenvalue_moduli: Vec<f64> = eig.iter().map(|z| z.norm()).collect();
    let absolute_gap = 1.0 - eigenvalue_moduli.get(1).copied().unwrap_or(0.0);
    let spectral_gap = h.is_symmetric(SPECTRAL_TOL).then(|| {
        let mut re: Vec<f64> = eig.iter().map(|z| z.re).collect();
        re.sort_by(|a, b| b.total_cmp(a));
        1.0 - re.get(1).copied().unwrap_or(0.0)
    });
    Ok(SpectralReport {
        eigenvalues: eig,
        eigenvalue_moduli,
        spectral_gap,
        absolute_gap,
        is_ergodic: h.min_entry() > 0.0,
        is_doubly_stochastic,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainStep {
    pub step: usize,
    pub row_dev: f64,
    pub col_dev: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainTrace {
    pub product: Matrix,
    pub steps: Vec<ChainStep>,
}

impl ChainTrace {
    pub fn final_deviation(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.row_dev.max(s.col_dev))
    }

    /// `step,row_dev,col_dev` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,row_dev,col_dev\n");
        for s in &self.steps {
            out.push_str(&format!("{},{:e},{:e}\n", s.step, s.row_dev, s.col_dev));
        }
        out
    }
}

/// Running product `H_1 H_2 ⋯ H_L` with the margin deviation after each step.
pub fn compose_chain(mixers: &[Matrix]) -> Result<ChainTrace> {
    let first = mixers
        .first()
        .ok_or_else(|| Error::InvalidSpec("empty mixer chain".into()))?;
    let n = first.rows();
    let mut product = Matrix::identity(n);
    let mut steps = Vec::with_capacity(mixers.len());
    let ones = vec![1.0; n];
    for (k, h) in mixers.iter().enumerate() {
        if h.rows() != n || h.cols() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("{n}×{n} mixer"),
                found: format!("{}×{} at step {}", h.rows(), h.cols(), k + 1),
            });
        }
        product = product.matmul(h)?;
        let (row_dev, col_dev) = product.margin_deviation(&ones, &ones);
        steps.push(ChainStep {
            step: k + 1,
            row_dev,
            col_dev,
        });
    }
    Ok(ChainTrace { product, steps })
}
