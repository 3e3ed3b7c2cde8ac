//! FM location-scale synthetic ground truth.
//!
//! Sales follow `Y(x) = loc(x) + scale(x) * u`, where both `loc` and `scale`
//! are second-order factorization machines over the one-hot covariates and
//! `u` is standard log-normal (or standard normal). The conditional quantile
//! is therefore known exactly, which makes the model usable as an oracle.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::schema::{Covariate, FieldKind, FieldSchema};
use crate::dist::{std_normal_cdf, std_normal_quantile};
use crate::error::{check_probability, Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    /// `log(u) ~ N(0, 1)`.
    #[default]
    LogNormal,
    Normal,
}

impl Noise {
    pub fn quantile(self, tau: f64) -> f64 {
        let z = std_normal_quantile(tau);
        match self {
            Noise::LogNormal => z.exp(),
            Noise::Normal => z,
        }
    }

    pub fn cdf(self, u: f64) -> f64 {
        match self {
            Noise::LogNormal if u <= 0.0 => 0.0,
            Noise::LogNormal => std_normal_cdf(u.ln()),
            Noise::Normal => std_normal_cdf(u),
        }
    }

    pub fn sample(self, rng: &mut Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        match self {
            Noise::LogNormal => z.exp(),
            Noise::Normal => z,
        }
    }

    pub fn mean(self) -> f64 {
        match self {
            Noise::LogNormal => 0.5f64.exp(),
            Noise::Normal => 0.0,
        }
    }

    pub fn sd(self) -> f64 {
        match self {
            Noise::LogNormal => ((1f64.exp() - 1.0) * 1f64.exp()).sqrt(),
            Noise::Normal => 1.0,
        }
    }

    /// `E[u^k ; u < a]` for k = 0, 1, 2.
    fn partial_moments(self, a: f64) -> [f64; 3] {
        match self {
            Noise::LogNormal => {
                if a <= 0.0 {
                    return [0.0; 3];
                }
                let la = a.ln();
                [
                    std_normal_cdf(la),
                    0.5f64.exp() * std_normal_cdf(la - 1.0),
                    2f64.exp() * std_normal_cdf(la - 2.0),
                ]
            }
            Noise::Normal => {
                let phi = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
                let cdf = std_normal_cdf(a);
                [cdf, -phi, cdf - a * phi]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ContinuousLaw {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
}

impl Default for ContinuousLaw {
    fn default() -> Self {
        ContinuousLaw::Uniform {
            low: 0.0,
            high: 1.0,
        }
    }
}

impl ContinuousLaw {
    fn sample(self, rng: &mut Rng) -> f64 {
        match self {
            ContinuousLaw::Uniform { low, high } => low + (high - low) * rng::unit_f64(rng),
            ContinuousLaw::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmLocationScaleParams {
    /// Latent dimension of both interaction matrices.
    pub k: usize,
    pub w0: f64,
    pub w: Vec<f64>,
    /// p × k, row-major.
    pub v: Vec<f64>,
    pub r0: f64,
    pub rvec: Vec<f64>,
    /// p × k, row-major.
    pub z: Vec<f64>,
    #[serde(default)]
    pub noise: Noise,
}

/// Second-order FM value using the O(active · k) sum-of-squares identity.
fn fm_value(bias: f64, linear: &[f64], latent: &[f64], k: usize, active: &[(usize, f64)]) -> f64 {
    let mut out = bias;
    for &(c, x) in active {
        out += linear[c] * x;
    }
    let mut pair = 0.0;
    for d in 0..k {
        let (mut s, mut q) = (0.0, 0.0);
        for &(c, x) in active {
            let e = latent[c * k + d] * x;
            s += e;
            q += e * e;
        }
        pair += s * s - q;
    }
    out + 0.5 * pair
}

impl FmLocationScaleParams {
    /// Location-scale model with no interactions. Its conditional quantiles
    /// are linear in the one-hot covariates.
    pub fn linear(w0: f64, w: Vec<f64>, r0: f64, rvec: Vec<f64>, noise: Noise) -> Self {
        let p = w.len();
        FmLocationScaleParams {
            k: 1,
            w0,
            w,
            v: vec![0.0; p],
            r0,
            rvec,
            z: vec![0.0; p],
            noise,
        }
    }

    pub fn p(&self) -> usize {
        self.w.len()
    }

    pub fn check(&self, schema: &FieldSchema) -> Result<()> {
        let p = schema.width();
        if self.k == 0 {
            return Err(Error::Parameter(
                "latent dimension k must be at least 1".into(),
            ));
        }
        if self.w.len() != p
            || self.rvec.len() != p
            || self.v.len() != p * self.k
            || self.z.len() != p * self.k
        {
            return Err(Error::Parameter(format!(
                "parameter dimensions do not match schema width {p} with k = {}",
                self.k
            )));
        }
        let all = [self.w0, self.r0]
            .into_iter()
            .chain(self.w.iter().copied())
            .chain(self.v.iter().copied());
        if all
            .chain(self.rvec.iter().copied())
            .chain(self.z.iter().copied())
            .any(|x| !x.is_finite())
        {
            return Err(Error::Parameter("parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn location_active(&self, active: &[(usize, f64)]) -> f64 {
        fm_value(self.w0, &self.w, &self.v, self.k, active)
    }

    pub fn scale_active(&self, active: &[(usize, f64)]) -> f64 {
        fm_value(self.r0, &self.rvec, &self.z, self.k, active)
    }

    pub fn truth_at(&self, schema: &FieldSchema, row: &[Covariate]) -> Result<ConditionalTruth> {
        schema.check_row(row)?;
        let active = schema.active(row);
        let scale = self.scale_active(&active);
        if !(scale > 0.0) {
            return Err(Error::Parameter(format!(
                "scale term is {scale} at this covariate"
            )));
        }
        Ok(ConditionalTruth {
            location: self.location_active(&active),
            scale,
            noise: self.noise,
        })
    }

    /// Random parameters for `schema`, redrawn until the scale term is
    /// positive on a probe sample of covariate rows.
    pub fn random(schema: &FieldSchema, cfg: &FmParamConfig, seed: u64) -> Result<Self> {
        let p = schema.width();
        let k = cfg.k.max(1);
        let mut rng = rng::stream(seed, 0);
        let normal = |sd: f64, rng: &mut Rng| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        };
        for _ in 0..cfg.max_attempts.max(1) {
            let params = FmLocationScaleParams {
                k,
                w0: cfg.w0,
                w: (0..p).map(|_| normal(cfg.linear_sd, &mut rng)).collect(),
                v: (0..p * k)
                    .map(|_| normal(cfg.latent_sd, &mut rng))
                    .collect(),
                r0: cfg.r0,
                rvec: (0..p)
                    .map(|_| normal(cfg.scale_linear_sd, &mut rng))
                    .collect(),
                z: (0..p * k)
                    .map(|_| normal(cfg.scale_latent_sd, &mut rng))
                    .collect(),
                noise: cfg.noise,
            };
            let mut probe = rng::stream(seed, 1);
            let mut row = Vec::with_capacity(schema.len());
            let mut active = Vec::new();
            let ok = (0..cfg.probe_rows).all(|_| {
                draw_row(schema, cfg.continuous, &mut probe, &mut row);
                schema.active_into(&row, &mut active);
                params.scale_active(&active) > 0.0
            });
            if ok {
                return Ok(params);
            }
        }
        Err(Error::Parameter(format!(
            "no parameter draw with a positive scale term after {} attempts",
            cfg.max_attempts
        )))
    }
}

/// Defaults for [`FmLocationScaleParams::random`]. The magnitudes put sales
/// in the low thousands with interaction effects a few hundred units wide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FmParamConfig {
    pub k: usize,
    pub w0: f64,
    pub linear_sd: f64,
    /// Entry sd of the location latent vectors; `<v_i, v_j>` then has sd
    /// `latent_sd^2 * sqrt(k)`.
    pub latent_sd: f64,
    pub r0: f64,
    pub scale_linear_sd: f64,
    pub scale_latent_sd: f64,
    pub noise: Noise,
    pub continuous: ContinuousLaw,
    pub probe_rows: usize,
    pub max_attempts: usize,
}

impl Default for FmParamConfig {
    fn default() -> Self {
        FmParamConfig {
            k: 8,
            w0: 4000.0,
            linear_sd: 700.0,
            latent_sd: 6.0,
            r0: 150.0,
            scale_linear_sd: 10.0,
            scale_latent_sd: 1.0,
            noise: Noise::LogNormal,
            continuous: ContinuousLaw::default(),
            probe_rows: 20_000,
            max_attempts: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    pub continuous: ContinuousLaw,
    /// Covariate redraws allowed for a row whose scale term is not positive.
    pub max_attempts: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            continuous: ContinuousLaw::default(),
            max_attempts: 100,
        }
    }
}

fn draw_row(schema: &FieldSchema, law: ContinuousLaw, rng: &mut Rng, row: &mut Vec<Covariate>) {
    row.clear();
    for f in schema.fields() {
        row.push(match &f.kind {
            FieldKind::Categorical { levels } => {
                Covariate::Level(rng.random_range(0..levels.len() as u32))
            }
            FieldKind::Continuous => Covariate::Value(law.sample(rng)),
        });
    }
}

pub fn synth_generate(
    params: &FmLocationScaleParams,
    schema: &FieldSchema,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    synth_generate_with(params, schema, n, seed, &SynthOptions::default())
}

/// Categorical levels are drawn uniformly, continuous fields i.i.d. from
/// `opts.continuous`, and the response from the location-scale equation.
pub fn synth_generate_with(
    params: &FmLocationScaleParams,
    schema: &FieldSchema,
    n: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<Dataset> {
    params.check(schema)?;
    if n == 0 {
        return Err(Error::domain("n must be at least 1"));
    }
    let mut rng = rng::stream(seed, 0);
    let mut cov = Vec::with_capacity(n * schema.len());
    let mut resp = Vec::with_capacity(n);
    let mut row = Vec::with_capacity(schema.len());
    let mut active = Vec::with_capacity(schema.len());
    for _ in 0..n {
        let mut attempts = 0;
        let scale = loop {
            draw_row(schema, opts.continuous, &mut rng, &mut row);
            schema.active_into(&row, &mut active);
            let s = params.scale_active(&active);
            if s > 0.0 {
                break s;
            }
            attempts += 1;
            if attempts >= opts.max_attempts.max(1) {
                return Err(Error::Parameter(format!(
                    "scale term not positive (last value {s}) after {attempts} covariate draws"
                )));
            }
        };
        let u = params.noise.sample(&mut rng);
        resp.push(params.location_active(&active) + scale * u);
        cov.extend_from_slice(&row);
    }
    Dataset::new(schema.clone(), cov, resp)
}

/// `loc(x) + scale(x) * Q_u(tau)`.
pub fn true_conditional_quantile(
    params: &FmLocationScaleParams,
    schema: &FieldSchema,
    x: &[Covariate],
    tau: f64,
) -> Result<f64> {
    check_probability("tau", tau)?;
    params.check(schema)?;
    Ok(params.truth_at(schema, x)?.quantile(tau))
}

/// Exact conditional law of `Y(x) = location + scale * u`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTruth {
    pub location: f64,
    pub scale: f64,
    pub noise: Noise,
}

impl ConditionalTruth {
    pub fn quantile(&self, tau: f64) -> f64 {
        self.location + self.scale * self.noise.quantile(tau)
    }

    pub fn cdf(&self, y: f64) -> f64 {
        self.noise.cdf((y - self.location) / self.scale)
    }

    pub fn mean(&self) -> f64 {
        self.location + self.scale * self.noise.mean()
    }

    pub fn sd(&self) -> f64 {
        self.scale * self.noise.sd()
    }

    pub fn sample(&self, k: usize, rng: &mut Rng) -> Vec<f64> {
        (0..k)
            .map(|_| self.location + self.scale * self.noise.sample(rng))
            .collect()
    }

    /// `Pr{Y < l/r}`.
    pub fn default_probability(&self, l: f64, r: f64) -> f64 {
        self.cdf(l / r)
    }

    /// `E[(l - rY)^+]`.
    pub fn expected_loss(&self, l: f64, r: f64) -> f64 {
        let c = l / r - self.location;
        let [m0, m1, _] = self.noise.partial_moments(c / self.scale);
        r * (c * m0 - self.scale * m1)
    }

    /// `E[((l - rY)^+)^2]`.
    pub fn expected_squared_loss(&self, l: f64, r: f64) -> f64 {
        let c = l / r - self.location;
        let s = self.scale;
        let [m0, m1, m2] = self.noise.partial_moments(c / s);
        r * r * (c * c * m0 - 2.0 * c * s * m1 + s * s * m2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept_schema() -> FieldSchema {
        FieldSchema::new(vec![super::super::schema::Field::categorical_n("c", 2)]).unwrap()
    }

    fn constant(w0: f64, r0: f64) -> FmLocationScaleParams {
        FmLocationScaleParams::linear(w0, vec![0.0; 2], r0, vec![0.0; 2], Noise::LogNormal)
    }

    #[test]
    fn degenerate_scale_is_rejected() {
        let err = synth_generate(&constant(5.0, 0.0), &intercept_schema(), 10, 1).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn sample_mean_matches_lognormal_moment() {
        let n = 1_000_000;
        let d = synth_generate(&constant(5.0, 1.0), &intercept_schema(), n, 11).unwrap();
        let mean = d.response().iter().sum::<f64>() / n as f64;
        let expected = 5.0 + 0.5f64.exp();
        let se = Noise::LogNormal.sd() / (n as f64).sqrt();
        assert!(
            (mean - expected).abs() < 3.0 * se,
            "mean {mean} vs {expected} (se {se})"
        );
    }

    #[test]
    fn reproducible_for_fixed_seed() {
        let s = FieldSchema::sales_layout(5, 7, 2).unwrap();
        let cfg = FmParamConfig {
            probe_rows: 500,
            ..Default::default()
        };
        let p = FmLocationScaleParams::random(&s, &cfg, 3).unwrap();
        let a = synth_generate(&p, &s, 200, 9).unwrap();
        let b = synth_generate(&p, &s, 200, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_generate(&p, &s, 200, 10).unwrap());
    }

    #[test]
    fn sales_layout_has_410_columns() {
        let s = FieldSchema::sales_layout(100, 300, 10).unwrap();
        let p = FmLocationScaleParams::random(&s, &FmParamConfig::default(), 5).unwrap();
        let d = synth_generate(&p, &s, 150_000, 6).unwrap();
        assert_eq!(d.p(), 410);
        assert_eq!(d.n(), 150_000);
        for i in (0..d.n()).step_by(997) {
            let x = d.one_hot_row(i);
            assert_eq!(x[..100].iter().sum::<f64>(), 1.0);
            assert_eq!(x[100..400].iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn quantile_examples() {
        let s = intercept_schema();
        let mut p = constant(0.0, 1.0);
        let x = [Covariate::Level(0)];
        assert_eq!(true_conditional_quantile(&p, &s, &x, 0.5).unwrap(), 1.0);
        p.w = vec![2.0, 0.0];
        p.rvec = vec![0.5, 0.0];
        let q = true_conditional_quantile(&p, &s, &x, 0.841_344_746_068_542_9).unwrap();
        assert!((q - (2.0 + 1.5 * 1f64.exp())).abs() < 1e-9);
        assert!(true_conditional_quantile(&p, &s, &x, 1.0).is_err());
        assert!(true_conditional_quantile(&p, &s, &x, 0.0).is_err());
    }

    #[test]
    fn fm_identity_matches_double_loop() {
        let s = FieldSchema::sales_layout(4, 3, 3).unwrap();
        let cfg = FmParamConfig {
            probe_rows: 10,
            ..Default::default()
        };
        let p = FmLocationScaleParams::random(&s, &cfg, 8).unwrap();
        let mut rng = rng::seeded(1);
        let mut row = Vec::new();
        for _ in 0..20 {
            draw_row(&s, ContinuousLaw::default(), &mut rng, &mut row);
            let x = s.one_hot(&row);
            let mut brute = p.w0;
            for i in 0..x.len() {
                brute += p.w[i] * x[i];
                for j in i + 1..x.len() {
                    let dot: f64 = (0..p.k).map(|d| p.v[i * p.k + d] * p.v[j * p.k + d]).sum();
                    brute += dot * x[i] * x[j];
                }
            }
            let fast = p.location_active(&s.active(&row));
            assert!((fast - brute).abs() < 1e-9 * brute.abs().max(1.0));
        }
    }

    #[test]
    fn truth_risk_closed_forms_match_quadrature() {
        for noise in [Noise::LogNormal, Noise::Normal] {
            let t = ConditionalTruth {
                location: 10.0,
                scale: 2.0,
                noise,
            };
            let (l, r) = (26.0, 2.0);
            // midpoint rule over the quantile scale: E[h(Y)] = ∫ h(Q(u)) du
            let n = 400_000;
            let (mut e1, mut e2) = (0.0, 0.0);
            for i in 0..n {
                let u = (i as f64 + 0.5) / n as f64;
                let loss = (l - r * t.quantile(u)).max(0.0);
                e1 += loss;
                e2 += loss * loss;
            }
            e1 /= n as f64;
            e2 /= n as f64;
            assert!(
                (t.expected_loss(l, r) - e1).abs() < 1e-4 * e1.max(1.0),
                "{noise:?}"
            );
            assert!(
                (t.expected_squared_loss(l, r) - e2).abs() < 1e-4 * e2.max(1.0),
                "{noise:?}"
            );
        }
    }
}
