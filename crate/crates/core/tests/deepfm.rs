use qrgmm::datagen::{Covariate, Dataset, Field, FieldSchema};
use qrgmm::deepfm::{self, Activation, DeepFmConfig, DeepFmQuantileModel};
use qrgmm::model::QuantileModel;
use qrgmm::quantreg::{fit_grid, pinball_loss, QuantileGrid, SolverConfig};
use qrgmm::rng;
use rand::Rng as _;
use rand_distr::{Distribution, Exp, StandardNormal};

fn mixed_schema() -> FieldSchema {
    FieldSchema::new(vec![
        Field::categorical_n("a", 3),
        Field::categorical_n("b", 4),
        Field::continuous("x"),
        Field::continuous("z"),
    ])
    .unwrap()
}

fn random_rows(schema: &FieldSchema, n: usize, seed: u64) -> Vec<Covariate> {
    let mut r = rng::seeded(seed);
    let mut out = Vec::new();
    for _ in 0..n {
        for f in schema.fields() {
            match &f.kind {
                qrgmm::datagen::FieldKind::Categorical { levels } => {
                    out.push(Covariate::Level(r.random_range(0..levels.len() as u32)))
                }
                qrgmm::datagen::FieldKind::Continuous => {
                    out.push(Covariate::Value(r.random::<f64>() * 4.0 - 1.0))
                }
            }
        }
    }
    out
}

fn mixed_data(n: usize, seed: u64) -> Dataset {
    let schema = mixed_schema();
    let cov = random_rows(&schema, n, seed);
    let mut r = rng::seeded(seed ^ 0xabcd);
    let y = cov
        .chunks(4)
        .map(|row| {
            let (a, b) = match (row[0], row[1]) {
                (Covariate::Level(a), Covariate::Level(b)) => (a as f64, b as f64),
                _ => unreachable!(),
            };
            let x = match row[2] {
                Covariate::Value(v) => v,
                _ => unreachable!(),
            };
            let e: f64 = StandardNormal.sample(&mut r);
            10.0 + a * b + 3.0 * x + (1.0 + 0.5 * x.abs()) * e
        })
        .collect();
    Dataset::new(schema, cov, y).unwrap()
}

fn group(m: &DeepFmQuantileModel, name: &str) -> std::ops::Range<usize> {
    m.parameter_groups()
        .into_iter()
        .find(|g| g.0 == name)
        .unwrap()
        .1
}

#[test]
fn fm_identity_matches_double_loop() {
    let schema = mixed_schema();
    let cfg = DeepFmConfig {
        embed_dim: 5,
        channels: 1,
        use_deep: false,
        ..Default::default()
    };
    let mut m =
        DeepFmQuantileModel::zeros(schema.clone(), QuantileGrid::new(3).unwrap(), cfg).unwrap();
    let emb = group(&m, "embedding");
    let mut r = rng::seeded(5);
    for i in group(&m, "fm_gain").chain(group(&m, "mix")) {
        m.params_mut()[i] = 1.0;
    }
    for i in emb.clone() {
        m.params_mut()[i] = r.random::<f64>() * 2.0 - 1.0;
    }
    let rows = random_rows(&schema, 50, 9);
    for row in rows.chunks(4) {
        let active = schema.active(row);
        let v = |c: usize, d: usize| m.params()[emb.start + c * 5 + d];
        let mut brute = 0.0;
        for i in 0..active.len() {
            for j in i + 1..active.len() {
                let (ci, xi) = active[i];
                let (cj, xj) = active[j];
                let dot: f64 = (0..5).map(|d| v(ci, d) * v(cj, d)).sum();
                brute += dot * xi * xj;
            }
        }
        let out = m.forward(row).unwrap();
        assert!(
            (out[0] - brute).abs() <= 1e-10 * brute.abs().max(1.0),
            "{} vs {brute}",
            out[0]
        );
    }
}

fn check_gradients(activation: Activation) {
    let data = mixed_data(200, 3);
    let cfg = DeepFmConfig {
        embed_dim: 3,
        hidden_sizes: vec![6, 4],
        activation,
        epochs: 1,
        batch_size: 32,
        learning_rate: 1e-2,
        seed: 17,
        ..Default::default()
    };
    // One epoch moves every group away from its initial value.
    let model = deepfm::train(&data, &QuantileGrid::new(5).unwrap(), &cfg).unwrap();
    let batch = [0, 1, 2, 3, 4];
    let delta = 1e-3;
    let (_, grad) = model.objective_and_gradient(&data, &batch, delta);
    let h = 1e-5;
    for (name, range) in model.parameter_groups() {
        let mut worst: f64 = 0.0;
        for i in range {
            let mut plus = model.clone();
            plus.params_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut()[i] -= h;
            let fd = (plus.objective_and_gradient(&data, &batch, delta).0
                - minus.objective_and_gradient(&data, &batch, delta).0)
                / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-5);
            worst = worst.max(err);
        }
        assert!(worst <= 1e-4, "group {name}: relative error {worst}");
    }
}

#[test]
fn gradients_match_finite_differences_relu() {
    check_gradients(Activation::Relu);
}

#[test]
fn gradients_match_finite_differences_tanh() {
    check_gradients(Activation::Tanh);
}

#[test]
fn intercept_only_recovers_empirical_quantiles() {
    let schema = FieldSchema::new(vec![Field::categorical_n("const", 2)]).unwrap();
    let n = 10_000;
    let mut r = rng::seeded(11);
    let exp = Exp::new(1.0).unwrap();
    let y: Vec<f64> = (0..n).map(|_| exp.sample(&mut r)).collect();
    let data = Dataset::new(schema, vec![Covariate::Level(0); n], y.clone()).unwrap();
    let grid = QuantileGrid::new(20).unwrap();
    let cfg = DeepFmConfig {
        epochs: 5,
        seed: 2,
        ..Default::default()
    };
    let model = deepfm::train(&data, &grid, &cfg).unwrap();
    let pred = model
        .predict_quantiles(&[Covariate::Level(0)], None)
        .unwrap();
    let mut sorted = y;
    sorted.sort_by(f64::total_cmp);
    for (j, q) in pred.iter().enumerate() {
        let emp = sorted[(grid.tau(j) * n as f64).ceil() as usize - 1];
        assert!(
            (q - emp).abs() <= 0.05,
            "level {}: {q} vs {emp}",
            grid.tau(j)
        );
    }
}

#[test]
fn training_is_deterministic() {
    let data = mixed_data(500, 4);
    let cfg = DeepFmConfig {
        epochs: 3,
        batch_size: 64,
        seed: 8,
        ..Default::default()
    };
    let grid = QuantileGrid::new(6).unwrap();
    let a = deepfm::train(&data, &grid, &cfg).unwrap();
    let b = deepfm::train(&data, &grid, &cfg).unwrap();
    assert_eq!(a.train_report, b.train_report);
    assert_eq!(a.params(), b.params());
}

#[test]
fn training_reduces_loss() {
    let data = mixed_data(3000, 6);
    let cfg = DeepFmConfig {
        epochs: 15,
        learning_rate: 3e-3,
        seed: 1,
        ..Default::default()
    };
    let m = deepfm::train(&data, &QuantileGrid::new(10).unwrap(), &cfg).unwrap();
    let rep = &m.train_report;
    assert_eq!(rep.epoch_losses.len(), 15);
    assert!(
        rep.epoch_losses.last().unwrap() < &(0.8 * rep.initial_loss),
        "{rep:?}"
    );
}

fn holdout_loss(model: &dyn QuantileModel, data: &Dataset, sorted: bool) -> f64 {
    let grid = model.grid();
    data.rows()
        .zip(data.response())
        .map(|(row, &y)| {
            let q = if sorted {
                model.predict_quantiles(row, None).unwrap()
            } else {
                model.predict_raw(row).unwrap()
            };
            q.iter()
                .enumerate()
                .map(|(j, q)| pinball_loss(y - q, grid.tau(j)))
                .sum::<f64>()
        })
        .sum()
}

fn linear_data(n: usize, seed: u64) -> Dataset {
    let schema =
        FieldSchema::new(vec![Field::categorical_n("g", 3), Field::continuous("x")]).unwrap();
    let mut r = rng::seeded(seed);
    let mut cov = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n {
        let g = r.random_range(0..3u32);
        let x: f64 = r.random();
        let e: f64 = StandardNormal.sample(&mut r);
        cov.push(Covariate::Level(g));
        cov.push(Covariate::Value(x));
        y.push(5.0 + 2.0 * g as f64 + 4.0 * x + (1.0 + x) * e);
    }
    Dataset::new(schema, cov, y).unwrap()
}

#[test]
fn linear_reduction_is_close_to_quantile_regression() {
    let train = linear_data(4000, 1);
    let test = linear_data(4000, 2);
    let grid = QuantileGrid::new(10).unwrap();
    let cfg = DeepFmConfig {
        use_deep: false,
        use_interactions: false,
        epochs: 40,
        batch_size: 128,
        learning_rate: 1e-2,
        smoothing: 0.0,
        seed: 3,
        ..Default::default()
    };
    let net = deepfm::train(&train, &grid, &cfg).unwrap();
    let lin = fit_grid(&train, &grid, &SolverConfig::default()).unwrap();
    let a = holdout_loss(&net, &test, false);
    let b = holdout_loss(&lin, &test, false);
    assert!(a <= 1.05 * b, "network {a} vs linear {b}");
}

#[test]
fn rearrangement_never_increases_holdout_loss() {
    let train = mixed_data(600, 12);
    let test = mixed_data(2000, 13);
    let cfg = DeepFmConfig {
        epochs: 2,
        learning_rate: 5e-2,
        seed: 4,
        ..Default::default()
    };
    let net = deepfm::train(&train, &QuantileGrid::new(12).unwrap(), &cfg).unwrap();
    let raw = holdout_loss(&net, &test, false);
    let sorted = holdout_loss(&net, &test, true);
    assert!(sorted <= raw + 1e-9, "{sorted} > {raw}");
}

#[test]
fn artifact_fields_round_trip_through_json() {
    let data = mixed_data(100, 1);
    let cfg = DeepFmConfig {
        epochs: 1,
        ..Default::default()
    };
    let m = deepfm::train(&data, &QuantileGrid::new(4).unwrap(), &cfg).unwrap();
    let back: DeepFmQuantileModel =
        serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    back.validate().unwrap();
    assert_eq!(back, m);
    for row in data.rows().take(20) {
        assert_eq!(back.forward(row).unwrap(), m.forward(row).unwrap());
    }
}
