mod common;

use birkhoff_core::baselines::{bvn_combination, kronecker_mix, KroneckerFactors};
use birkhoff_core::hc_layer::{layer_forward, LayerWeights, ResidualParams, RmsNorm, ZeroSublayer};
use birkhoff_core::transport::MARGIN_TOL;
use birkhoff_core::*;
use proptest::prelude::*;

/// Replays the sweep on `x` and returns `(x_ij, L_ij, U_ij)` for every free cell.
fn replay_intervals(x: &TransportMatrix) -> Vec<(f64, f64, f64)> {
    let (n, m) = (x.rows(), x.cols());
    let mut r = x.margins().row_sums().to_vec();
    let mut c = x.margins().col_sums().to_vec();
    let mut out = Vec::new();
    for i in 0..n - 1 {
        for j in 0..m - 1 {
            let right: f64 = c[j + 1..].iter().sum();
            let below: f64 = r[i + 1..].iter().sum();
            let iv = feasible_interval(r[i], c[j], right, below).unwrap();
            let v = x.entries()[(i, j)];
            out.push((v, iv.lower, iv.upper));
            r[i] -= v;
            c[j] -= v;
        }
        c[m - 1] -= x.entries()[(i, m - 1)];
    }
    out
}

/// Which argument attains `L = max(0, r − right, c − below)` and
/// `U = min(r, c)` at every free cell; the chart is linear in `t` while
/// these stay fixed.
fn active_branches(x: &TransportMatrix) -> Vec<(usize, usize)> {
    let (n, m) = (x.rows(), x.cols());
    let mut r = x.margins().row_sums().to_vec();
    let mut c = x.margins().col_sums().to_vec();
    let mut out = Vec::new();
    for i in 0..n - 1 {
        for j in 0..m - 1 {
            let right: f64 = c[j + 1..].iter().sum();
            let below: f64 = r[i + 1..].iter().sum();
            let lows = [0.0, r[i] - right, c[j] - below];
            let lo = (0..3).max_by(|a, b| lows[*a].total_cmp(&lows[*b])).unwrap();
            let up = usize::from(c[j] < r[i]);
            out.push((lo, up));
            let v = x.entries()[(i, j)];
            r[i] -= v;
            c[j] -= v;
        }
        c[m - 1] -= x.entries()[(i, m - 1)];
    }
    out
}

fn margins_strategy() -> impl Strategy<Value = (Margins, u64)> {
    (2usize..=8, 2usize..=8, any::<u64>()).prop_map(|(n, m, seed)| {
        let mut rng = common::rng(seed);
        (common::random_margins(&mut rng, n, m), seed)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tbp_is_exact_and_within_intervals((margins, seed) in margins_strategy(), scale in 0.1f64..10.0) {
        let mut rng = common::rng(seed ^ 1);
        let t = common::normals(&mut rng, ChartParams::expected_len(margins.rows(), margins.cols()), scale);
        let x = tbp_forward(&margins, &ChartParams::new(t), &SquashSpec::sigmoid()).unwrap();
        prop_assert!(x.max_margin_deviation() <= MARGIN_TOL);
        prop_assert!(x.entries().min_entry() >= -MARGIN_TOL);
        for (v, lo, up) in replay_intervals(&x) {
            prop_assert!(v >= lo - 1e-12 && v <= up + 1e-12);
        }
    }

    #[test]
    fn rtbp_is_exact((margins, seed) in margins_strategy(), scale in 0.1f64..10.0) {
        let mut rng = common::rng(seed ^ 2);
        let t = common::normals(&mut rng, ChartParams::expected_len(margins.rows(), margins.cols()), scale);
        let (x, trace) = rtbp_forward_traced(&margins, &ChartParams::new(t), &SquashSpec::sigmoid()).unwrap();
        prop_assert!(x.max_margin_deviation() <= MARGIN_TOL);
        prop_assert!(x.entries().min_entry() >= -MARGIN_TOL);
        for split in trace.splits() {
            prop_assert!(split.max_violation() <= 1e-12);
        }
    }

    #[test]
    fn tbp_round_trips(n in 2usize..=8, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let t = common::uniforms(&mut rng, (n - 1) * (n - 1), 5.0);
        let x = tbp_forward(&Margins::uniform(n), &ChartParams::new(t.clone()), &SquashSpec::sigmoid()).unwrap();
        let back = tbp_inverse(&x, &SquashSpec::sigmoid()).unwrap();
        for (a, b) in back.values().iter().zip(&t) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
        let again = tbp_forward(&Margins::uniform(n), &back, &SquashSpec::sigmoid()).unwrap();
        prop_assert!(again.entries().max_abs_diff(x.entries()) <= 1e-10);
    }

    #[test]
    fn margined_entries_keep_their_distance(n in 2usize..=6, seed in any::<u64>()) {
        let spec = SquashSpec::of_kind(SquashKind::MarginedScaled);
        let mut rng = common::rng(seed);
        let t = common::normals(&mut rng, (n - 1) * (n - 1), 50.0);
        let x = tbp_forward(&Margins::uniform(n), &ChartParams::new(t), &spec).unwrap();
        for (v, lo, up) in replay_intervals(&x) {
            let slack = spec.rho * (up - lo);
            prop_assert!(v >= lo + slack - 1e-13 && v <= up - slack + 1e-13, "{v} in [{lo}, {up}]");
        }
    }

    #[test]
    fn singular_values_at_most_one(n in 2usize..=8, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        for kind in [ChartKind::Tbp, ChartKind::Rtbp] {
            let t = common::normals(&mut rng, (n - 1) * (n - 1), 2.0);
            let x = kind.forward(&Margins::uniform(n), &ChartParams::new(t), &SquashSpec::sigmoid()).unwrap();
            let sv = common::to_nalgebra(x.entries()).singular_values();
            prop_assert!(sv.iter().all(|s| *s <= 1.0 + 1e-10));
        }
    }

    #[test]
    fn shaping_and_averaging_preserve_double_stochasticity(n in 2usize..=7, seed in any::<u64>(), alpha in 0.01f64..=1.0, eps in 0.0f64..0.99) {
        let mut rng = common::rng(seed);
        let h = common::random_ds(&mut rng, n);
        prop_assert!(lazyfy(&h, alpha).unwrap().entries().stochastic_deviation() <= 1e-12);
        let m = minorize(&h, eps).unwrap();
        prop_assert!(m.entries().stochastic_deviation() <= 1e-12);
        prop_assert!(m.entries().min_entry() >= eps / n as f64 - 1e-15);
        let perms = vec![(0..n).collect(), (0..n).rev().collect(), (1..n).chain([0]).collect()];
        let spec = AveragingSpec::from_logits(perms, &common::normals(&mut rng, 3, 1.0)).unwrap();
        let ps: Vec<ChartParams> = (0..3).map(|_| ChartParams::new(common::normals(&mut rng, (n - 1) * (n - 1), 1.0))).collect();
        for kind in [ChartKind::Tbp, ChartKind::Rtbp] {
            let avg = average_charts(&Margins::uniform(n), &ps, &spec, kind, &SquashSpec::sigmoid()).unwrap();
            prop_assert!(avg.entries().stochastic_deviation() <= 1e-12);
        }
    }

    #[test]
    fn linear_chart_is_linear_along_each_axis(n in 2usize..=5, seed in any::<u64>()) {
        let spec = SquashSpec::of_kind(SquashKind::LinearClipped);
        let mut rng = common::rng(seed);
        let p = (n - 1) * (n - 1);
        let t: Vec<f64> = (0..p).map(|_| rand::Rng::gen_range(&mut rng, 0.1..0.9)).collect();
        let f = |t: &[f64]| tbp_forward(&Margins::uniform(n), &ChartParams::new(t.to_vec()), &spec).unwrap();
        let h = 1e-4;
        for k in 0..p {
            let mut up = t.clone();
            let mut down = t.clone();
            up[k] += h;
            down[k] -= h;
            let (a, b, c) = (f(&up), f(&t), f(&down));
            let branches = active_branches(&b);
            if active_branches(&a) != branches || active_branches(&c) != branches {
                // A kink of the piecewise-linear map lies inside the stencil.
                continue;
            }
            for idx in 0..n * n {
                let second = a.entries().data()[idx] - 2.0 * b.entries().data()[idx] + c.entries().data()[idx];
                prop_assert!(second.abs() <= 1e-9, "axis {k}, cell {idx}: {second}");
            }
        }
    }

    #[test]
    fn kronecker_closure(a in 2usize..=4, b in 2usize..=4, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let fa = (1..=a).product();
        let fb = (1..=b).product();
        let u = bvn_combination(a, &common::normals(&mut rng, fa, 2.0)).unwrap();
        let v = bvn_combination(b, &common::normals(&mut rng, fb, 2.0)).unwrap();
        prop_assert!(u.kron(&v).stochastic_deviation() <= 1e-12);
        let f = KroneckerFactors::new(vec![a, b], vec![common::normals(&mut rng, fa, 1.0), common::normals(&mut rng, fb, 1.0)]).unwrap();
        prop_assert!(kronecker_mix(&f).unwrap().stochastic_deviation() <= 1e-12);
    }

    #[test]
    fn doubly_stochastic_products_keep_column_sums(n in 2usize..=6, c in 1usize..=5, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let h = common::random_ds(&mut rng, n);
        let x = Matrix::from_vec(n, c, common::normals(&mut rng, n * c, 3.0)).unwrap();
        let y = h.entries().matmul(&x).unwrap();
        for (a, b) in x.col_sums().iter().zip(y.col_sums()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    for n in 1..=16 {
        for m in 1..=16 {
            assert_eq!(count_params(n, m), (n - 1) * (m - 1), "n = {n}, m = {m}");
        }
    }
}

#[test]
fn residual_stream_mean_is_preserved_across_depth() {
    let mut rng = common::rng(11);
    let (n, c) = (4, 3);
    let mut x = Matrix::from_vec(n, c, common::normals(&mut rng, n * c, 1.0)).unwrap();
    let start = x.col_sums();
    for l in 0..32 {
        let mixer = if l % 2 == 0 {
            MixerSpec::tbp(n)
        } else {
            MixerSpec::rtbp(n)
        };
        let mut w = LayerWeights::init(c, mixer, l % n);
        if let ResidualParams::Dynamic { w_res, .. } = &mut w.residual {
            *w_res = Matrix::from_vec(n * c, 9, common::normals(&mut rng, n * c * 9, 0.5)).unwrap();
        }
        x = layer_forward(&x, &w, &RmsNorm::default(), &ZeroSublayer).unwrap();
        for (a, b) in start.iter().zip(x.col_sums()) {
            assert!((a - b).abs() <= 1e-12, "layer {l}: {a} vs {b}");
        }
    }
}

#[test]
fn permuted_margins_feed_each_averaged_chart() {
    let mut rng = common::rng(5);
    let margins = common::random_margins(&mut rng, 4, 4);
    let spec = AveragingSpec::identity_and_reverse(4);
    let ps = vec![ChartParams::new(common::normals(&mut rng, 9, 1.0)); 2];
    let avg = average_charts(
        &margins,
        &ps,
        &spec,
        ChartKind::Rtbp,
        &SquashSpec::sigmoid(),
    )
    .unwrap();
    assert!(avg.max_margin_deviation() <= 1e-12);
}

#[test]
fn linear_chart_curvature_only_at_branch_switches() {
    let spec = SquashSpec::of_kind(SquashKind::LinearClipped);
    let h = 1e-4;
    let (mut stencils, mut kinks) = (0, 0);
    for seed in 0..300u64 {
        let n = 2 + (seed % 4) as usize;
        let mut rng = common::rng(seed);
        let p = (n - 1) * (n - 1);
        let t: Vec<f64> = (0..p)
            .map(|_| rand::Rng::gen_range(&mut rng, 0.1..0.9))
            .collect();
        let f = |t: &[f64]| {
            tbp_forward(&Margins::uniform(n), &ChartParams::new(t.to_vec()), &spec).unwrap()
        };
        for k in 0..p {
            let mut up = t.clone();
            let mut down = t.clone();
            up[k] += h;
            down[k] -= h;
            let (a, b, c) = (f(&up), f(&t), f(&down));
            let curvature = (0..n * n)
                .map(|i| {
                    (a.entries().data()[i] - 2.0 * b.entries().data()[i] + c.entries().data()[i])
                        .abs()
                })
                .fold(0.0, f64::max);
            let same = active_branches(&a) == active_branches(&b)
                && active_branches(&c) == active_branches(&b);
            stencils += 1;
            if same {
                assert!(curvature <= 1e-9, "seed {seed}, axis {k}: {curvature:e}");
            } else {
                kinks += 1;
            }
        }
    }
    assert!(
        kinks * 20 < stencils,
        "{kinks} of {stencils} stencils straddle a kink"
    );
}

#[test]
fn linear_chart_kink_is_a_branch_switch() {
    let spec = SquashSpec::of_kind(SquashKind::LinearClipped);
    let mut rng = common::rng(13928748768877363231);
    let t: Vec<f64> = (0..4)
        .map(|_| rand::Rng::gen_range(&mut rng, 0.1..0.9))
        .collect();
    let f = |t: &[f64]| {
        tbp_forward(&Margins::uniform(3), &ChartParams::new(t.to_vec()), &spec).unwrap()
    };
    let mut up = t.clone();
    let mut down = t.clone();
    up[1] += 1e-4;
    down[1] -= 1e-4;
    let (a, b, c) = (f(&up), f(&t), f(&down));
    let second = a.entries()[(1, 1)] - 2.0 * b.entries()[(1, 1)] + c.entries()[(1, 1)];
    assert!(second.abs() > 1e-9);
    assert!(
        active_branches(&a) != active_branches(&b) || active_branches(&c) != active_branches(&b)
    );
}
