use proptest::prelude::*;
use qrgmm::datagen::{Covariate, Dataset, Field, FieldSchema};
use qrgmm::quantreg::{
    fit_grid, fit_grid_levels, pinball_loss, solve_quantile, total_pinball, QuantileGrid,
    SolverConfig, SolverMethod,
};
use qrgmm::rng;

mod common;
use common::{tiny_instance, vertex_oracle};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn tiny_instances_match_vertex_enumeration() {
    let grid = QuantileGrid::new(10).unwrap();
    for (inst, method) in (0..6u64).flat_map(|i| [(i, SolverMethod::Auto), (i, SolverMethod::Irls)])
    {
        let data = tiny_instance(100 + inst, inst as usize % 3);
        let x = data.to_dense();
        let p = data.p();
        let cfg = SolverConfig {
            method,
            ..Default::default()
        };
        let model = fit_grid(&data, &grid, &cfg).unwrap();
        // Oracle on the nonzero columns.
        let keep: Vec<usize> = (0..p)
            .filter(|&c| (0..data.n()).any(|i| x[i * p + c] != 0.0))
            .collect();
        let q = keep.len();
        let xr: Vec<f64> = (0..data.n())
            .flat_map(|i| keep.iter().map(move |&c| (i, c)))
            .map(|(i, c)| x[i * p + c])
            .collect();
        for j in 0..grid.len() {
            let tau = grid.tau(j);
            let oracle = vertex_oracle(&xr, data.response(), q, tau);
            let got = total_pinball(&x, data.response(), p, model.coefficients(j), tau);
            assert!(
                got <= oracle + 1e-6,
                "instance {inst} {method:?} tau {tau}: {got} > {oracle}"
            );
            assert!((model.fit_report.levels[j].loss - got).abs() <= 1e-9 * got.max(1.0));
        }
    }
}

#[test]
fn interior_point_matches_vertex_enumeration() {
    let grid = QuantileGrid::new(10).unwrap();
    let cfg = SolverConfig {
        method: SolverMethod::InteriorPoint,
        polish: false,
        ..Default::default()
    };
    for inst in 0..6u64 {
        let data = tiny_instance(300 + inst, inst as usize % 3);
        let x = data.to_dense();
        let p = data.p();
        let model = fit_grid(&data, &grid, &cfg).unwrap();
        assert!(
            model.fit_report.warnings.is_empty(),
            "{:?}",
            model.fit_report.warnings
        );
        let keep: Vec<usize> = (0..p)
            .filter(|&c| (0..data.n()).any(|i| x[i * p + c] != 0.0))
            .collect();
        let q = keep.len();
        let xr: Vec<f64> = (0..data.n())
            .flat_map(|i| keep.iter().map(move |&c| (i, c)))
            .map(|(i, c)| x[i * p + c])
            .collect();
        for j in 0..grid.len() {
            let tau = grid.tau(j);
            let oracle = vertex_oracle(&xr, data.response(), q, tau);
            let got = total_pinball(&x, data.response(), p, model.coefficients(j), tau);
            assert!(
                got <= oracle * (1.0 + 1e-8) + 1e-9,
                "instance {inst} tau {tau}: {got} > {oracle}"
            );
        }
    }
}

#[test]
fn optimality_certificate_against_perturbations() {
    let data = tiny_instance(7, 2);
    let x = data.to_dense();
    let p = data.p();
    let grid = QuantileGrid::new(8).unwrap();
    let model = fit_grid(&data, &grid, &SolverConfig::default()).unwrap();
    for j in 0..grid.len() {
        let tau = grid.tau(j);
        let beta = model.coefficients(j).to_vec();
        let base = total_pinball(&x, data.response(), p, &beta, tau);
        for c in 0..p {
            for d in [-1e-3, 1e-3] {
                let mut b = beta.clone();
                b[c] += d;
                assert!(total_pinball(&x, data.response(), p, &b, tau) >= base - 1e-9);
            }
        }
    }
}

#[test]
fn median_regression_recovers_location_model() {
    let schema =
        FieldSchema::new(vec![Field::categorical_n("one", 2), Field::continuous("x")]).unwrap();
    let mut r = rng::seeded(3);
    let n = 20_000;
    let mut cov = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = r.random::<f64>() * 2.0;
        let e: f64 = StandardNormal.sample(&mut r);
        cov.push(Covariate::Level(0));
        cov.push(Covariate::Value(x));
        y.push(3.0 - 1.5 * x + e);
    }
    let data = Dataset::new(schema, cov, y).unwrap();
    let grid = QuantileGrid::new(4).unwrap();
    let (beta, _) = fit_grid_levels(&data, &grid, &[1], &SolverConfig::default()).unwrap();
    // Standard errors are about 0.015 and 0.013 here.
    assert!((beta[0] - 3.0).abs() < 0.06, "{beta:?}");
    assert!((beta[2] + 1.5).abs() < 0.06, "{beta:?}");
}

#[test]
fn level_subsets_match_full_fit() {
    let data = tiny_instance(11, 2);
    let grid = QuantileGrid::new(7).unwrap();
    let cfg = SolverConfig::default();
    let full = fit_grid(&data, &grid, &cfg).unwrap();
    let (sub, _) = fit_grid_levels(&data, &grid, &[4, 1], &cfg).unwrap();
    let p = data.p();
    assert_eq!(&sub[..p], full.coefficients(4));
    assert_eq!(&sub[p..], full.coefficients(1));
    let serial = fit_grid(
        &data,
        &grid,
        &SolverConfig {
            parallel: false,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(serial.beta, full.beta);
}

#[test]
fn scale_equivariance() {
    let data = tiny_instance(21, 2);
    let c = 3.5;
    let scaled = Dataset::new(
        data.schema().clone(),
        data.rows().flatten().copied().collect(),
        data.response().iter().map(|y| c * y).collect(),
    )
    .unwrap();
    let grid = QuantileGrid::new(6).unwrap();
    let cfg = SolverConfig::default();
    let a = fit_grid(&data, &grid, &cfg).unwrap();
    let b = fit_grid(&scaled, &grid, &cfg).unwrap();
    let x = data.to_dense();
    for j in 0..grid.len() {
        let tau = grid.tau(j);
        let la = total_pinball(&x, data.response(), data.p(), a.coefficients(j), tau);
        let lb = total_pinball(&x, scaled.response(), data.p(), b.coefficients(j), tau);
        // Optima may be non-unique, so compare losses.
        assert!((c * la - lb).abs() <= 1e-8 * lb.max(1.0), "{la} {lb}");
    }
}

#[test]
fn underdetermined_fit_warns() {
    let schema = FieldSchema::new(vec![Field::categorical_n("g", 4)]).unwrap();
    let data = Dataset::new(
        schema,
        vec![
            Covariate::Level(0),
            Covariate::Level(1),
            Covariate::Level(2),
        ],
        vec![1.0, 2.0, 3.0],
    )
    .unwrap();
    let model = fit_grid(
        &data,
        &QuantileGrid::new(3).unwrap(),
        &SolverConfig::default(),
    )
    .unwrap();
    assert!(!model.fit_report.warnings.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn constant_fit_minimizes_pinball(ys in prop::collection::vec(-100.0f64..100.0, 5..40), t in 1usize..9) {
        let tau = t as f64 / 10.0;
        let n = ys.len();
        let x = vec![1.0; n];
        let sol = solve_quantile(&x, &ys, 1, tau, &SolverConfig::default()).unwrap();
        let best = ys.iter().map(|&c| ys.iter().map(|y| pinball_loss(y - c, tau)).sum::<f64>()).fold(f64::INFINITY, f64::min);
        prop_assert!(sol.loss <= best + 1e-9 * best.max(1.0));
    }
}
