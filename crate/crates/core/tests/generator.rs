use proptest::prelude::*;
use qrgmm::datagen::{Covariate, Field, FieldSchema};
use qrgmm::dist::std_normal_quantile;
use qrgmm::error::Error;
use qrgmm::eval::{ks_against, ks_statistic};
use qrgmm::generator::{ConditionalSampler, PiecewiseCdf};
use qrgmm::quantreg::{FitReport, LinearQuantileModel, QuantileGrid};
use qrgmm::rng;

/// Location-scale linear model: Q_tau(g, x) = (1 + g) + 2x + (1 + g) z_tau.
fn linear_model(m: usize) -> LinearQuantileModel {
    let schema =
        FieldSchema::new(vec![Field::categorical_n("g", 2), Field::continuous("x")]).unwrap();
    let grid = QuantileGrid::new(m).unwrap();
    let mut beta = Vec::new();
    for j in 0..grid.len() {
        let z = std_normal_quantile(grid.tau(j));
        beta.extend([1.0 + z, 2.0 + 2.0 * z, 2.0]);
    }
    LinearQuantileModel {
        grid,
        schema,
        beta,
        fit_report: FitReport::default(),
    }
}

fn x() -> Vec<Covariate> {
    vec![Covariate::Level(1), Covariate::Value(0.25)]
}

#[test]
fn draws_match_cdf_eval() {
    let sampler = ConditionalSampler::new(linear_model(50));
    let draws = sampler.sample(&x(), 1_000_000, 11).unwrap();
    let curve = sampler.curve(&x()).unwrap();
    let ks = ks_against(&draws, &curve).unwrap();
    assert!(ks <= 0.002, "KS {ks}");
    let (lo, hi) = (curve.lower(), curve.upper());
    assert!(draws.iter().all(|&d| lo <= d && d <= hi));
}

#[test]
fn monte_carlo_cdf_within_binomial_bound() {
    let sampler = ConditionalSampler::new(linear_model(30));
    let k = 1_000_000;
    let mut draws = sampler.sample(&x(), k, 5).unwrap();
    draws.sort_by(f64::total_cmp);
    let curve = sampler.curve(&x()).unwrap();
    let mut r = rng::seeded(99);
    for _ in 0..20 {
        let y = curve.lower() + (curve.upper() - curve.lower()) * rng::unit_f64(&mut r);
        let f = sampler.cdf_eval(&x(), y).unwrap();
        let emp = draws.partition_point(|&d| d <= y) as f64 / k as f64;
        let bound = 3.0 * (f * (1.0 - f) / k as f64).sqrt();
        assert!((emp - f).abs() <= bound.max(1e-12), "y {y}: {emp} vs {f}");
    }
}

#[test]
fn galois_inequality_over_u_grid() {
    // Flat segment in the middle.
    let c = PiecewiseCdf::new(8, vec![0.0, 1.0, 2.0, 2.0, 2.0, 3.5, 5.0]).unwrap();
    for i in 1..2000 {
        let u = i as f64 / 2000.0;
        let y = c.quantile(u).unwrap();
        let f = c.cdf(y);
        assert!(f >= u - 1e-12, "u {u}: F(Q(u)) = {f}");
        let on_atom = y == c.lower() || y == c.upper() || y == 2.0;
        if !on_atom {
            assert!((f - u).abs() < 1e-12, "u {u}: {f}");
        }
    }
}

#[test]
fn sample_equals_quantile_of_uniforms() {
    let sampler = ConditionalSampler::new(linear_model(40));
    let a = sampler.sample(&x(), 100_000, 1).unwrap();
    let mut r = rng::stream(2, 0);
    let b: Vec<f64> = (0..100_000)
        .map(|_| {
            let u = loop {
                let u = rng::unit_f64(&mut r);
                if u > 0.0 {
                    break u;
                }
            };
            sampler.quantile_fn(&x(), u).unwrap()
        })
        .collect();
    assert!(ks_statistic(&a, &b).unwrap() <= 0.01);
    // Same stream, same draws.
    let c = sampler.sample_stream(&x(), 1000, 1, 0).unwrap();
    assert_eq!(&a[..1000], &c[..]);
    let d = sampler.sample_stream(&x(), 1000, 1, 1).unwrap();
    assert_ne!(c, d);
}

#[test]
fn sampler_errors() {
    let sampler = ConditionalSampler::new(linear_model(10));
    assert!(matches!(sampler.sample(&x(), 0, 1), Err(Error::Domain(_))));
    assert!(sampler.sample(&[Covariate::Level(1)], 5, 1).is_err());
    assert!(sampler
        .sample(&[Covariate::Level(7), Covariate::Value(0.0)], 5, 1)
        .is_err());
    assert!(matches!(
        sampler.quantile_fn(&x(), 1.0),
        Err(Error::Domain(_))
    ));
}

#[test]
fn cached_curve_is_sorted_and_stable() {
    let mut model = linear_model(6);
    // Cross two levels so rearrangement has work to do.
    let p = 3;
    let (a, b) = (
        model.beta[p..2 * p].to_vec(),
        model.beta[2 * p..3 * p].to_vec(),
    );
    model.beta[p..2 * p].copy_from_slice(&b);
    model.beta[2 * p..3 * p].copy_from_slice(&a);
    let sampler = ConditionalSampler::new(model);
    let c1 = sampler.curve(&x()).unwrap();
    let c2 = sampler.curve(&x()).unwrap();
    assert!(std::sync::Arc::ptr_eq(&c1, &c2));
    assert!(c1.knots().windows(2).all(|w| w[0] <= w[1]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantile_is_monotone_and_bounded(
        raw in prop::collection::vec(-50.0f64..50.0, 2..30),
        us in prop::collection::vec(0.0f64..1.0, 2..50),
    ) {
        let m = raw.len() + 1;
        let c = PiecewiseCdf::new(m, raw).unwrap();
        let mut us = us;
        us.sort_by(f64::total_cmp);
        let ys: Vec<f64> = us.iter().map(|&u| c.transform(u)).collect();
        prop_assert!(ys.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(ys.iter().all(|&y| c.lower() <= y && y <= c.upper()));
        // The CDF is a distribution function.
        let mut prev = 0.0;
        for i in 0..=100 {
            let y = c.lower() - 1.0 + (c.upper() - c.lower() + 2.0) * i as f64 / 100.0;
            let f = c.cdf(y);
            prop_assert!((0.0..=1.0).contains(&f) && f >= prev);
            prop_assert!(c.cdf_left(y) <= f);
            prev = f;
        }
        prop_assert_eq!(c.cdf(c.upper()), 1.0);
    }
}
