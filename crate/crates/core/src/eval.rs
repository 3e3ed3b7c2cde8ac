//! Evaluation: quantile calibration, two-sample distances, and replicated
//! unconditional/conditional generation studies.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::{synth_generate, Covariate, Dataset, FmLocationScaleParams};
use crate::deepfm::{self, DeepFmConfig};
use crate::error::{Error, Result};
use crate::generator::PiecewiseCdf;
use crate::model::{AnyModel, QuantileModel};
use crate::quantreg::{default_m, fit_grid, QuantileGrid, SolverConfig};
use crate::rng;

/// Empirical coverage `mean_i 1{y_i <= Q_j(x_i)}` of each (rearranged)
/// predicted quantile on a test set.
pub fn calibration(model: &dyn QuantileModel, test: &Dataset) -> Result<Vec<f64>> {
    let levels = model.grid().len();
    let mut hits = vec![0usize; levels];
    for (row, &y) in test.rows().zip(test.response()) {
        let q = model.predict_quantiles(row, None)?;
        for (h, q) in hits.iter_mut().zip(&q) {
            if y <= *q {
                *h += 1;
            }
        }
    }
    let n = test.n() as f64;
    Ok(hits.into_iter().map(|h| h as f64 / n).collect())
}

/// `max |tau_hat_j - tau_j|` over levels with `tau_j` in `[lo, hi]`.
pub fn max_calibration_error(grid: &QuantileGrid, tau_hat: &[f64], lo: f64, hi: f64) -> f64 {
    grid.levels()
        .iter()
        .zip(tau_hat)
        .filter(|(t, _)| **t >= lo - 1e-12 && **t <= hi + 1e-12)
        .map(|(t, h)| (t - h).abs())
        .fold(0.0, f64::max)
}

fn sorted(a: &[f64]) -> Vec<f64> {
    let mut v = a.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn nonempty(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("samples must be nonempty".into()));
    }
    Ok(())
}

/// One-dimensional Wasserstein-1 distance between two empirical
/// distributions: the mean absolute difference of order statistics when
/// the sizes match, otherwise the integral of `|F_a - F_b|`.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    nonempty(a, b)?;
    let (a, b) = (sorted(a), sorted(b));
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut prev = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    nonempty(a, b)?;
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// One-sample KS distance between draws and a generated distribution,
/// accounting for atoms: both one-sided limits are checked at every
/// sample point.
pub fn ks_against(samples: &[f64], cdf: &PiecewiseCdf) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("samples must be nonempty".into()));
    }
    let s = sorted(samples);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < s.len() {
        let v = s[i];
        let before = i as f64 / n;
        d = d.max((before - cdf.cdf_left(v)).abs());
        while i < s.len() && s[i] == v {
            i += 1;
        }
        d = d.max((i as f64 / n - cdf.cdf(v)).abs());
    }
    Ok(d)
}

pub fn mean_sd(a: &[f64]) -> (f64, f64) {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = if a.len() > 1 {
        a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Fixed-width histogram of two samples over their common range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub generated: Vec<u64>,
    pub reference: Vec<u64>,
}

impl Histogram {
    pub fn new(generated: &[f64], reference: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let lo = generated
            .iter()
            .chain(reference)
            .copied()
            .fold(f64::INFINITY, f64::min);
        let mut hi = generated
            .iter()
            .chain(reference)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            hi = lo + 1.0;
        }
        let w = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..=bins).map(|i| lo + w * i as f64).collect();
        edges[bins] = hi;
        let count = |s: &[f64]| {
            let mut c = vec![0u64; bins];
            for &v in s {
                let k = (((v - lo) / w) as usize).min(bins - 1);
                c[k] += 1;
            }
            c
        };
        Histogram {
            generated: count(generated),
            reference: count(reference),
            edges,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_lo", "bin_hi", "generated", "reference"])?;
        for i in 0..self.generated.len() {
            w.write_record([
                self.edges[i].to_string(),
                self.edges[i + 1].to_string(),
                self.generated[i].to_string(),
                self.reference[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    LinearQr {
        #[serde(default)]
        solver: SolverConfig,
    },
    DeepFm {
        #[serde(default)]
        config: DeepFmConfig,
    },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::LinearQr {
            solver: SolverConfig::default(),
        }
    }
}

impl ModelSpec {
    /// Fits on `train`; DeepFM training uses `seed` in place of the
    /// configured one so replications differ.
    pub fn fit(&self, train: &Dataset, grid: &QuantileGrid, seed: u64) -> Result<AnyModel> {
        Ok(match self {
            ModelSpec::LinearQr { solver } => fit_grid(train, grid, solver)?.into(),
            ModelSpec::DeepFm { config } => {
                let cfg = DeepFmConfig {
                    seed,
                    ..config.clone()
                };
                deepfm::train(train, grid, &cfg)?.into()
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplicationPlan {
    pub replications: usize,
    /// Share of rows used for training.
    pub train_fraction: f64,
    pub base_seed: u64,
    /// Grid size; `None` uses `default_m` of the training size.
    pub m: Option<usize>,
    pub model: ModelSpec,
    pub histogram_bins: usize,
}

impl Default for ReplicationPlan {
    fn default() -> Self {
        ReplicationPlan {
            replications: 100,
            train_fraction: 0.8,
            base_seed: 0,
            m: None,
            model: ModelSpec::default(),
            histogram_bins: 60,
        }
    }
}

impl ReplicationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Parameter("replications must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Parameter("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Seed of replication `i`; depends only on the base seed and `i`.
    pub fn seed(&self, i: usize) -> u64 {
        rng::derive_seed(self.base_seed, i as u64)
    }

    pub fn grid_for(&self, n_train: usize) -> Result<QuantileGrid> {
        QuantileGrid::new(self.m.unwrap_or_else(|| default_m(n_train)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    pub replication: usize,
    pub seed: u64,
    pub generated_mean: f64,
    pub generated_sd: f64,
    pub reference_mean: f64,
    pub reference_sd: f64,
    pub wd: f64,
    pub ks: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_hat: Option<Vec<f64>>,
}

impl ReplicationMetrics {
    fn compare(
        replication: usize,
        seed: u64,
        generated: &[f64],
        reference: &[f64],
    ) -> Result<Self> {
        let (gm, gs) = mean_sd(generated);
        let (rm, rs) = mean_sd(reference);
        Ok(ReplicationMetrics {
            replication,
            seed,
            generated_mean: gm,
            generated_sd: gs,
            reference_mean: rm,
            reference_sd: rs,
            wd: wasserstein1(generated, reference)?,
            ks: ks_statistic(generated, reference)?,
            tau_hat: None,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub replications: usize,
    pub generated_mean: f64,
    pub generated_sd: f64,
    pub reference_mean: f64,
    pub reference_sd: f64,
    pub wd: f64,
    pub ks: f64,
}

impl Aggregate {
    fn of(rows: &[ReplicationMetrics]) -> Self {
        let n = rows.len() as f64;
        let avg = |f: fn(&ReplicationMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Aggregate {
            replications: rows.len(),
            generated_mean: avg(|r| r.generated_mean),
            generated_sd: avg(|r| r.generated_sd),
            reference_mean: avg(|r| r.reference_mean),
            reference_sd: avg(|r| r.reference_sd),
            wd: avg(|r| r.wd),
            ks: avg(|r| r.ks),
        }
    }

    /// `|generated mean - reference mean| / |reference mean|`.
    pub fn mean_rel_error(&self) -> f64 {
        (self.generated_mean - self.reference_mean).abs() / self.reference_mean.abs()
    }

    pub fn sd_rel_error(&self) -> f64 {
        (self.generated_sd - self.reference_sd).abs() / self.reference_sd.abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Unconditional,
    Conditional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test: TestKind,
    pub rows: Vec<ReplicationMetrics>,
    pub aggregate: Aggregate,
    /// Histogram of the first replication.
    pub histogram: Histogram,
}

impl EvalReport {
    fn from_rows(test: TestKind, rows: Vec<ReplicationMetrics>, histogram: Histogram) -> Self {
        EvalReport {
            test,
            aggregate: Aggregate::of(&rows),
            rows,
            histogram,
        }
    }

    pub fn write_rows_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "replication",
            "seed",
            "generated_mean",
            "generated_sd",
            "reference_mean",
            "reference_sd",
            "wd",
            "ks",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.replication.to_string(),
                r.seed.to_string(),
                r.generated_mean.to_string(),
                r.generated_sd.to_string(),
                r.reference_mean.to_string(),
                r.reference_sd.to_string(),
                r.wd.to_string(),
                r.ks.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Summary table with a reference row and a model row, columns mean/SD
/// (and WD/KS for the model) for each available test.
pub fn write_summary_table<W: Write>(
    out: W,
    method: &str,
    unconditional: &EvalReport,
    conditional: Option<&EvalReport>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "unconditional_mean",
        "unconditional_sd",
        "unconditional_wd",
        "unconditional_ks",
        "conditional_mean",
        "conditional_sd",
        "conditional_wd",
        "conditional_ks",
    ])?;
    let u = &unconditional.aggregate;
    let c = conditional.map(|c| &c.aggregate);
    let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    w.write_record([
        "truth".to_string(),
        u.reference_mean.to_string(),
        u.reference_sd.to_string(),
        String::new(),
        String::new(),
        f(c.map(|c| c.reference_mean)),
        f(c.map(|c| c.reference_sd)),
        String::new(),
        String::new(),
    ])?;
    w.write_record([
        method.to_string(),
        u.generated_mean.to_string(),
        u.generated_sd.to_string(),
        u.wd.to_string(),
        u.ks.to_string(),
        f(c.map(|c| c.generated_mean)),
        f(c.map(|c| c.generated_sd)),
        f(c.map(|c| c.wd)),
        f(c.map(|c| c.ks)),
    ])?;
    w.flush()?;
    Ok(())
}

/// One generated draw for every test covariate, each from its own
/// stream-split uniform.
pub fn generate_for_rows(model: &dyn QuantileModel, test: &Dataset, seed: u64) -> Result<Vec<f64>> {
    let m = model.grid().m();
    let mut r = rng::stream(seed, 2);
    test.rows()
        .map(|row| {
            let cdf = PiecewiseCdf::new(m, model.predict_raw(row)?)?;
            Ok(cdf.transform(rng::unit_f64(&mut r)))
        })
        .collect()
}

/// Unconditional test of a fitted model: each replication draws one
/// sample per test covariate and compares against the test responses.
pub fn unconditional_test(
    model: &dyn QuantileModel,
    test: &Dataset,
    plan: &ReplicationPlan,
) -> Result<EvalReport> {
    plan.validate()?;
    if model.schema() != test.schema() {
        return Err(Error::Schema("model and test set schemas differ".into()));
    }
    let mut rows = Vec::with_capacity(plan.replications);
    let mut hist = None;
    for i in 0..plan.replications {
        let seed = plan.seed(i);
        let gen = generate_for_rows(model, test, seed)?;
        rows.push(ReplicationMetrics::compare(i, seed, &gen, test.response())?);
        if hist.is_none() {
            hist = Some(Histogram::new(&gen, test.response(), plan.histogram_bins));
        }
    }
    Ok(EvalReport::from_rows(
        TestKind::Unconditional,
        rows,
        hist.expect("replications >= 1"),
    ))
}

/// Conditional test at a fixed covariate: `k` model draws against `k`
/// draws from the true conditional law, per replication.
pub fn conditional_test(
    model: &dyn QuantileModel,
    truth: Option<&FmLocationScaleParams>,
    x: &[Covariate],
    plan: &ReplicationPlan,
    k: usize,
) -> Result<EvalReport> {
    plan.validate()?;
    let truth = truth.ok_or_else(|| {
        Error::Unsupported("conditional test needs ground-truth parameters".into())
    })?;
    let law = truth.truth_at(model.schema(), x)?;
    let cdf = PiecewiseCdf::new(model.grid().m(), model.predict_raw(x)?)?;
    let mut rows = Vec::with_capacity(plan.replications);
    let mut hist = None;
    for i in 0..plan.replications {
        let seed = plan.seed(i);
        let gen = cdf.sample_with(&mut rng::stream(seed, 3), k);
        let reference = law.sample(k, &mut rng::stream(seed, 4));
        rows.push(ReplicationMetrics::compare(i, seed, &gen, &reference)?);
        if hist.is_none() {
            hist = Some(Histogram::new(&gen, &reference, plan.histogram_bins));
        }
    }
    Ok(EvalReport::from_rows(
        TestKind::Conditional,
        rows,
        hist.expect("replications >= 1"),
    ))
}

/// Results of a replicated synthetic study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub plan: ReplicationPlan,
    pub n: usize,
    pub m: usize,
    pub unconditional: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditional: Option<EvalReport>,
    /// Calibration `tau_hat` per replication.
    pub calibration: Vec<Vec<f64>>,
}

/// Replicated study on synthetic data: every replication regenerates `n`
/// rows from `params`, splits them, fits the planned model, and runs the
/// unconditional test (one generation pass) and, when `x` is given, the
/// conditional test with `k` draws.
pub fn synthetic_study(
    params: &FmLocationScaleParams,
    schema: &crate::datagen::FieldSchema,
    n: usize,
    plan: &ReplicationPlan,
    x: Option<&[Covariate]>,
    k: usize,
) -> Result<StudyReport> {
    plan.validate()?;
    let n_train = ((n as f64) * plan.train_fraction).round() as usize;
    let grid = plan.grid_for(n_train)?;
    let mut unc = Vec::new();
    let mut cond = Vec::new();
    let mut calib = Vec::new();
    let (mut uh, mut ch) = (None, None);
    for i in 0..plan.replications {
        let seed = plan.seed(i);
        let data = synth_generate(params, schema, n, seed)?;
        let (train, test) = data.split(plan.train_fraction, rng::derive_seed(seed, 1))?;
        let model = plan.model.fit(&train, &grid, rng::derive_seed(seed, 2))?;
        let gen = generate_for_rows(&model, &test, rng::derive_seed(seed, 3))?;
        let mut row = ReplicationMetrics::compare(i, seed, &gen, test.response())?;
        let tau_hat = calibration(&model, &test)?;
        row.tau_hat = Some(tau_hat.clone());
        calib.push(tau_hat);
        if uh.is_none() {
            uh = Some(Histogram::new(&gen, test.response(), plan.histogram_bins));
        }
        unc.push(row);
        if let Some(x) = x {
            let law = params.truth_at(schema, x)?;
            let cdf = PiecewiseCdf::new(grid.m(), model.predict_raw(x)?)?;
            let g = cdf.sample_with(&mut rng::stream(seed, 3), k);
            let reference = law.sample(k, &mut rng::stream(seed, 4));
            cond.push(ReplicationMetrics::compare(i, seed, &g, &reference)?);
            if ch.is_none() {
                ch = Some(Histogram::new(&g, &reference, plan.histogram_bins));
            }
        }
    }
    Ok(StudyReport {
        plan: plan.clone(),
        n,
        m: grid.m(),
        unconditional: EvalReport::from_rows(
            TestKind::Unconditional,
            unc,
            uh.expect("replications >= 1"),
        ),
        conditional: ch.map(|h| EvalReport::from_rows(TestKind::Conditional, cond, h)),
        calibration: calib,
    })
}
