use proptest::prelude::*;
use qrgmm::datagen::*;
use qrgmm::error::Error;
use qrgmm::eval::*;
use qrgmm::model::{OracleModel, QuantileModel};
use qrgmm::quantreg::{fit_grid, FitReport, LinearQuantileModel, QuantileGrid, SolverConfig};
use qrgmm::rng;
use rand::seq::SliceRandom;

/// Minimum-cost perfect matching (Hungarian method, O(n^3)).
fn assignment_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let (mut p, mut way) = (vec![0usize; n + 1], vec![0usize; n + 1]);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[p[j] - 1][j - 1]).sum()
}

/// W1 between two empirical measures as an assignment problem: each point
/// is replicated so that both sides carry equal unit masses.
fn transport_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len(), b.len());
    let left: Vec<f64> = a.iter().flat_map(|&x| std::iter::repeat_n(x, nb)).collect();
    let right: Vec<f64> = b.iter().flat_map(|&x| std::iter::repeat_n(x, na)).collect();
    let cost: Vec<Vec<f64>> = left
        .iter()
        .map(|x| right.iter().map(|y| (x - y).abs()).collect())
        .collect();
    assignment_cost(&cost) / (na * nb) as f64
}

fn random_points(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..n).map(|_| 10.0 * rng::unit_f64(&mut r) - 3.0).collect()
}

#[test]
fn wasserstein_matches_transport_oracle() {
    for s in 0..5 {
        let a = random_points(s, 20);
        let b = random_points(100 + s, 20);
        let got = wasserstein1(&a, &b).unwrap();
        assert!((got - transport_oracle(&a, &b)).abs() <= 1e-9, "seed {s}");
    }
    // Unequal sizes go through the ECDF integral.
    let a = random_points(7, 20);
    let b = random_points(8, 12);
    let got = wasserstein1(&a, &b).unwrap();
    assert!((got - transport_oracle(&a, &b)).abs() <= 1e-9);
}

#[test]
fn ks_matches_brute_force() {
    for s in 0..5 {
        let a = random_points(s, 50);
        let mut b = random_points(200 + s, 37);
        b[3] = a[5];
        let mut brute: f64 = 0.0;
        for &t in a.iter().chain(&b) {
            let fa = a.iter().filter(|&&x| x <= t).count() as f64 / a.len() as f64;
            let fb = b.iter().filter(|&&x| x <= t).count() as f64 / b.len() as f64;
            brute = brute.max((fa - fb).abs());
        }
        assert_eq!(ks_statistic(&a, &b).unwrap(), brute);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_symmetric_and_order_free(
        a in prop::collection::vec(-100.0f64..100.0, 1..40),
        b in prop::collection::vec(-100.0f64..100.0, 1..40),
        seed in 0u64..1000,
    ) {
        let w = wasserstein1(&a, &b).unwrap();
        let k = ks_statistic(&a, &b).unwrap();
        prop_assert!((w - wasserstein1(&b, &a).unwrap()).abs() <= 1e-9 * w.max(1.0));
        prop_assert_eq!(k, ks_statistic(&b, &a).unwrap());
        let mut sa = a.clone();
        sa.shuffle(&mut rng::seeded(seed));
        prop_assert!((w - wasserstein1(&sa, &b).unwrap()).abs() <= 1e-9 * w.max(1.0));
        prop_assert_eq!(k, ks_statistic(&sa, &b).unwrap());
        prop_assert_eq!(wasserstein1(&a, &sa).unwrap(), 0.0);
        prop_assert_eq!(ks_statistic(&a, &sa).unwrap(), 0.0);
        prop_assert!((0.0..=1.0).contains(&k));
    }
}

fn linear_setup() -> (FieldSchema, FmLocationScaleParams) {
    let schema = FieldSchema::new(vec![
        Field::categorical_n("g", 3),
        Field::continuous("x1"),
        Field::continuous("x2"),
    ])
    .unwrap();
    let params = FmLocationScaleParams::linear(
        10.0,
        vec![0.0, 2.0, -1.0, 3.0, 1.5],
        1.0,
        vec![0.0, 0.5, 1.0, 0.8, 0.2],
        Noise::Normal,
    );
    (schema, params)
}

#[test]
fn oracle_quantiles_are_calibrated() {
    let (schema, params) = linear_setup();
    let test = synth_generate(&params, &schema, 30_000, 5).unwrap();
    let grid = QuantileGrid::new(100).unwrap();
    let oracle = OracleModel {
        params,
        schema,
        grid,
    };
    let tau_hat = calibration(&oracle, &test).unwrap();
    assert_eq!(tau_hat.len(), 99);
    assert!(max_calibration_error(&grid, &tau_hat, 0.05, 0.95) <= 0.01);
}

#[test]
fn constant_model_above_data_covers_everything() {
    let (schema, params) = linear_setup();
    let test = synth_generate(&params, &schema, 500, 1).unwrap();
    let top = test.response().iter().copied().fold(f64::MIN, f64::max) + 1.0;
    let grid = QuantileGrid::new(10).unwrap();
    let p = schema.width();
    let mut beta = vec![0.0; 9 * p];
    for j in 0..9 {
        // The categorical field is one-hot, so its columns act as an intercept.
        for c in 0..3 {
            beta[j * p + c] = top;
        }
    }
    let model = LinearQuantileModel {
        grid,
        schema,
        beta,
        fit_report: FitReport::default(),
    };
    assert!(calibration(&model, &test)
        .unwrap()
        .iter()
        .all(|&t| t == 1.0));
}

#[test]
fn degenerate_response_gives_zero_distances() {
    let schema =
        FieldSchema::new(vec![Field::categorical_n("g", 2), Field::continuous("x")]).unwrap();
    let mut r = rng::seeded(2);
    let n = 200;
    let mut cov = Vec::new();
    for i in 0..n {
        cov.push(Covariate::Level(i % 2));
        cov.push(Covariate::Value(rng::unit_f64(&mut r)));
    }
    let data = Dataset::new(schema, cov, vec![5.0; n as usize]).unwrap();
    let (train, test) = data.split(0.8, 1).unwrap();
    let grid = QuantileGrid::new(8).unwrap();
    let model = fit_grid(&train, &grid, &SolverConfig::default()).unwrap();
    let plan = ReplicationPlan {
        replications: 3,
        ..Default::default()
    };
    let report = unconditional_test(&model, &test, &plan).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.aggregate.replications, 3);
    for row in &report.rows {
        assert!(row.wd < 1e-9, "{row:?}");
        assert_eq!(row.ks, 0.0);
    }
}

#[test]
fn conditional_test_needs_truth_and_matching_schema() {
    let (schema, params) = linear_setup();
    let grid = QuantileGrid::new(20).unwrap();
    let oracle = OracleModel {
        params: params.clone(),
        schema: schema.clone(),
        grid,
    };
    let x = vec![
        Covariate::Level(1),
        Covariate::Value(0.5),
        Covariate::Value(0.5),
    ];
    let plan = ReplicationPlan::default();
    assert!(matches!(
        conditional_test(&oracle, None, &x, &plan, 100),
        Err(Error::Unsupported(_))
    ));
    let other = synth_generate(
        &FmLocationScaleParams::linear(1.0, vec![0.0; 3], 1.0, vec![0.0; 3], Noise::Normal),
        &FieldSchema::new(vec![Field::categorical_n("h", 3)]).unwrap(),
        50,
        1,
    )
    .unwrap();
    assert!(matches!(
        unconditional_test(&oracle, &other, &plan),
        Err(Error::Schema(_))
    ));
}

#[test]
fn oracle_conditional_test_sits_at_the_noise_floor() {
    let (schema, params) = linear_setup();
    let x = vec![
        Covariate::Level(2),
        Covariate::Value(0.3),
        Covariate::Value(0.9),
    ];
    let grid = QuantileGrid::new(2000).unwrap();
    let oracle = OracleModel {
        params: params.clone(),
        schema: schema.clone(),
        grid,
    };
    let plan = ReplicationPlan {
        replications: 20,
        ..Default::default()
    };
    let k = 10_000;
    let report = conditional_test(&oracle, Some(&params), &x, &plan, k).unwrap();
    // Two independent truth samples give the floor.
    let law = params.truth_at(&schema, &x).unwrap();
    let floor: f64 = (0..20)
        .map(|i| {
            let a = law.sample(k, &mut rng::stream(1000 + i, 0));
            let b = law.sample(k, &mut rng::stream(2000 + i, 0));
            wasserstein1(&a, &b).unwrap()
        })
        .sum::<f64>()
        / 20.0;
    assert!(
        report.aggregate.wd <= 1.25 * floor,
        "{} vs floor {floor}",
        report.aggregate.wd
    );
    assert!(report.aggregate.mean_rel_error() < 0.01);
}

#[test]
fn replications_do_not_depend_on_order() {
    let plan = ReplicationPlan {
        replications: 5,
        base_seed: 9,
        ..Default::default()
    };
    let forward: Vec<u64> = (0..5).map(|i| plan.seed(i)).collect();
    let backward: Vec<u64> = (0..5).rev().map(|i| plan.seed(i)).collect();
    assert_eq!(forward, backward.into_iter().rev().collect::<Vec<_>>());
    let (schema, params) = linear_setup();
    let test = synth_generate(&params, &schema, 300, 4).unwrap();
    let oracle = OracleModel {
        params,
        schema,
        grid: QuantileGrid::new(30).unwrap(),
    };
    let full = unconditional_test(&oracle, &test, &plan).unwrap();
    let one = generate_for_rows(&oracle, &test, plan.seed(3)).unwrap();
    let (m, _) = mean_sd(&one);
    assert_eq!(full.rows[3].generated_mean, m);
}

#[test]
fn report_tables_have_expected_shape() {
    let (schema, params) = linear_setup();
    let data = synth_generate(&params, &schema, 400, 2).unwrap();
    let oracle = OracleModel {
        params: params.clone(),
        schema,
        grid: QuantileGrid::new(10).unwrap(),
    };
    let plan = ReplicationPlan {
        replications: 2,
        ..Default::default()
    };
    let unc = unconditional_test(&oracle, &data, &plan).unwrap();
    let x = vec![
        Covariate::Level(0),
        Covariate::Value(0.1),
        Covariate::Value(0.2),
    ];
    let cond = conditional_test(&oracle, Some(&params), &x, &plan, 500).unwrap();
    let mut buf = Vec::new();
    write_summary_table(&mut buf, "QRGMM", &unc, Some(&cond)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(2).unwrap().starts_with("QRGMM,"));
    let mut rows = Vec::new();
    unc.write_rows_csv(&mut rows).unwrap();
    assert_eq!(String::from_utf8(rows).unwrap().lines().count(), 3);
    let mut hist = Vec::new();
    unc.histogram.write_csv(&mut hist).unwrap();
    assert_eq!(String::from_utf8(hist).unwrap().lines().count(), 61);
    assert_eq!(oracle.grid().m(), 10);
}
