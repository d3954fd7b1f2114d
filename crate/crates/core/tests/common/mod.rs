#![allow(dead_code)]

use birkhoff_core::{tbp_forward, ChartParams, Margins, Matrix, SquashSpec, TransportMatrix};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type TestRng = Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> TestRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn normals(rng: &mut TestRng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn uniforms(rng: &mut TestRng, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// Positive margins with equal totals.
pub fn random_margins(rng: &mut TestRng, n: usize, m: usize) -> Margins {
    let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
    let mut c: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..2.0)).collect();
    let scale = r.iter().sum::<f64>() / c.iter().sum::<f64>();
    c.iter_mut().for_each(|v| *v *= scale);
    // Absorb rounding into the last column.
    let gap = r.iter().sum::<f64>() - c.iter().sum::<f64>();
    *c.last_mut().unwrap() += gap;
    Margins::new(r, c).unwrap()
}

/// An interior doubly stochastic matrix from the sequential chart.
pub fn random_ds(rng: &mut TestRng, n: usize) -> TransportMatrix {
    let t = normals(rng, (n - 1) * (n - 1), 1.0);
    tbp_forward(
        &Margins::uniform(n),
        &ChartParams::new(t),
        &SquashSpec::sigmoid(),
    )
    .unwrap()
}

/// `|a − b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Central differences of `f` at `t`, one column per coordinate.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, t: &[f64], h: f64) -> Matrix {
    let cols: Vec<Vec<f64>> = (0..t.len())
        .map(|k| {
            let mut p = t.to_vec();
            let mut m = t.to_vec();
            p[k] += h;
            m[k] -= h;
            f(&p)
                .iter()
                .zip(f(&m))
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect()
        })
        .collect();
    let rows = cols.first().map_or(0, Vec::len);
    Matrix::from_fn(rows, t.len(), |i, k| cols[k][i])
}

pub fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max)
}

/// Largest distance after greedily pairing each eigenvalue of `a` with its
/// nearest unused eigenvalue of `b`.
pub fn spectrum_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for z in a {
        let (k, d) = b
            .iter()
            .enumerate()
            .filter(|(k, _)| !used[*k])
            .map(|(k, w)| (k, (z - w).norm()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        used[k] = true;
        worst = worst.max(d);
    }
    worst
}

pub fn to_nalgebra(m: &Matrix) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}
