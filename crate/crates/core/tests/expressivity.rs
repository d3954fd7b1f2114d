mod common;

use birkhoff_core::baselines::kron_best_fit;
use birkhoff_core::rtbp::InversionOptions;
use birkhoff_core::*;

fn rank(m: &Matrix, tol: f64) -> usize {
    common::to_nalgebra(m)
        .singular_values()
        .iter()
        .filter(|s| **s > tol)
        .count()
}

#[test]
fn rtbp_reaches_tbp_outputs() {
    let mut rng = common::rng(17);
    let squash = SquashSpec::sigmoid();
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let target = common::random_ds(&mut rng, 3);
        let inv = rtbp_inverse_numeric(&target, &squash, InversionOptions::default()).unwrap();
        let back = rtbp_forward(target.margins(), &inv.params, &squash).unwrap();
        let err = back.entries().max_abs_diff(target.entries());
        assert!(
            err <= 1e-6,
            "case {case}: {err:e} after {} iterations",
            inv.iterations
        );
        worst = worst.max(err);
    }
    assert!(worst <= 1e-6);
}

#[test]
fn chart_jacobians_have_full_rank() {
    let mut rng = common::rng(23);
    for n in 2..=7 {
        let p = (n - 1) * (n - 1);
        for _ in 0..5 {
            let t = ChartParams::new(common::normals(&mut rng, p, 1.0));
            let m = Margins::uniform(n);
            assert_eq!(
                rank(
                    &tbp_jacobian(&m, &t, &SquashSpec::sigmoid()).unwrap(),
                    1e-10
                ),
                p
            );
            assert_eq!(
                rank(
                    &rtbp_jacobian(&m, &t, &SquashSpec::sigmoid()).unwrap(),
                    1e-10
                ),
                p,
                "n = {n}"
            );
        }
    }
}

#[test]
fn cycle_mixture_is_outside_the_kronecker_family() {
    let c4 = Matrix::from_fn(4, 4, |i, j| if j == (i + 1) % 4 { 1.0 } else { 0.0 });
    let target = c4.affine_combine(0.9, &Matrix::uniform(4), 0.1);
    let fit = kron_best_fit(&target, &[2, 2]).unwrap();
    assert!(fit.distance > 0.1, "{}", fit.distance);
    let tm = TransportMatrix::doubly_stochastic(target).unwrap();
    let t = tbp_inverse(&tm, &SquashSpec::sigmoid()).unwrap();
    let back = tbp_forward(tm.margins(), &t, &SquashSpec::sigmoid()).unwrap();
    assert!(back.entries().max_abs_diff(tm.entries()) <= 1e-10);
}

#[test]
fn kronecker_family_contains_block_matrices() {
    let target = Matrix::identity(2).kron(&Matrix::uniform(2));
    assert!(kron_best_fit(&target, &[2, 2]).unwrap().distance < 1e-6);
}
