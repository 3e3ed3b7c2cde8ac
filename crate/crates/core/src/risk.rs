//! Loan-level credit-risk measures.
//!
//! A loan of size `l` is repaid from sales revenue `r * Y`, so the lender's
//! loss is `L(l) = (l - r Y)^+`. The engine evaluates
//!
//! * `r1(l) = P(Y < l / r)`, the default probability,
//! * `r2(l) = E[(l - r Y)^+]`, the expected loss,
//! * `r3(l) = E[g_l(Y) 1{Y < a(l)}]` for a pluggable loss `g_l` and
//!   threshold `a(l)`,
//!
//! either exactly under a generated distribution ([`PiecewiseCdf`]) or by
//! plain Monte Carlo averages over draws. The default event uses the strict
//! inequality everywhere, so atoms sitting exactly at `l / r` never count.

use std::fmt;
use std::io::Write;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Piece, PiecewiseCdf};

/// `(l - r y)^+`.
#[inline]
pub fn loss(l: f64, y: f64, r: f64) -> f64 {
    (l - r * y).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    /// Net revenue per unit sold.
    pub r: f64,
    pub l_bar: f64,
    pub loan_grid: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
}

impl RiskSpec {
    pub fn new(r: f64, l_bar: f64, loan_grid: Vec<f64>) -> Result<Self> {
        let spec = RiskSpec {
            r,
            l_bar,
            loan_grid,
            xi: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `points` equally spaced loan levels from `l_min` to `l_bar`.
    pub fn uniform(r: f64, l_min: f64, l_bar: f64, points: usize) -> Result<Self> {
        if points < 2 || !(l_bar > l_min) || l_min < 0.0 {
            return Err(Error::Parameter(format!(
                "need at least 2 points and 0 <= l_min < l_bar, got {points} points on [{l_min}, {l_bar}]"
            )));
        }
        let step = (l_bar - l_min) / (points - 1) as f64;
        let mut grid: Vec<f64> = (0..points).map(|i| l_min + step * i as f64).collect();
        grid[points - 1] = l_bar;
        Self::new(r, l_bar, grid)
    }

    /// The default grid: 100 levels from `l_min` to the 99th percentile of
    /// the generated revenue `r * Y`.
    pub fn auto(cdf: &PiecewiseCdf, r: f64, l_min: f64, points: usize) -> Result<Self> {
        let l_bar = r * cdf.quantile(0.99)?;
        Self::uniform(r, l_min, l_bar, points)
    }

    pub fn with_xi(mut self, xi: f64) -> Result<Self> {
        self.xi = Some(xi);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::Parameter(format!(
                "r must be positive, got {}",
                self.r
            )));
        }
        if !(self.l_bar > 0.0 && self.l_bar.is_finite()) {
            return Err(Error::Parameter(format!(
                "l_bar must be positive, got {}",
                self.l_bar
            )));
        }
        if self.loan_grid.is_empty() {
            return Err(Error::Parameter("loan grid is empty".into()));
        }
        if self.loan_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Parameter(
                "loan grid must be strictly increasing".into(),
            ));
        }
        if self.loan_grid[0] < 0.0 || *self.loan_grid.last().unwrap() > self.l_bar {
            return Err(Error::Parameter("loan grid must lie in [0, l_bar]".into()));
        }
        if let Some(xi) = self.xi {
            if !(xi > 0.0 && xi < self.l_bar) {
                return Err(Error::Parameter(format!(
                    "xi must lie in (0, l_bar), got {xi}"
                )));
            }
        }
        Ok(())
    }
}

pub type KernelFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type ThresholdFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// The loss `g_l(y)` charged on the default event.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kernel {
    /// `g = 1`.
    Indicator,
    /// `g = l - r y`.
    Shortfall,
    /// `g = ((l - r y)^+)^p`.
    ShortfallPower { p: f64 },
    /// `g = (l - r y)(1 + k y)`; unbounded in general, so the regularity
    /// checks usually reject it.
    PenalizedShortfall { k: f64 },
    /// Arbitrary `g(l, y)`, integrated numerically over segments.
    #[serde(skip)]
    Custom(KernelFn),
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Indicator => f.write_str("Indicator"),
            Kernel::Shortfall => f.write_str("Shortfall"),
            Kernel::ShortfallPower { p } => write!(f, "ShortfallPower({p})"),
            Kernel::PenalizedShortfall { k } => write!(f, "PenalizedShortfall({k})"),
            Kernel::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// The default boundary `a(l)`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Threshold {
    /// `a(l) = l / r`.
    DefaultPoint,
    /// `a(l) = slope * l`.
    Linear { slope: f64 },
    #[serde(skip)]
    Custom(ThresholdFn),
}

impl fmt::Debug for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::DefaultPoint => f.write_str("DefaultPoint"),
            Threshold::Linear { slope } => write!(f, "Linear({slope})"),
            Threshold::Custom(_) => f.write_str("Custom"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneralizedLoss {
    pub kernel: Kernel,
    pub threshold: Threshold,
    /// Declared Lipschitz constant of `g_l` in `l`, if known.
    #[serde(default)]
    pub lipschitz: Option<f64>,
    /// Declared bound on `|g_l|`, if known.
    #[serde(default)]
    pub bound: Option<f64>,
}

impl GeneralizedLoss {
    pub fn new(kernel: Kernel, threshold: Threshold) -> Self {
        GeneralizedLoss {
            kernel,
            threshold,
            lipschitz: None,
            bound: None,
        }
    }

    pub fn default_probability() -> Self {
        Self::new(Kernel::Indicator, Threshold::DefaultPoint)
    }

    pub fn expected_loss() -> Self {
        Self::new(Kernel::Shortfall, Threshold::DefaultPoint)
    }

    pub fn squared_loss() -> Self {
        Self::new(Kernel::ShortfallPower { p: 2.0 }, Threshold::DefaultPoint)
    }

    pub fn g(&self, l: f64, y: f64, r: f64) -> f64 {
        match &self.kernel {
            Kernel::Indicator => 1.0,
            Kernel::Shortfall => l - r * y,
            Kernel::ShortfallPower { p } => loss(l, y, r).powf(*p),
            Kernel::PenalizedShortfall { k } => (l - r * y) * (1.0 + k * y),
            Kernel::Custom(g) => g(l, y),
        }
    }

    pub fn a(&self, l: f64, r: f64) -> f64 {
        match &self.threshold {
            Threshold::DefaultPoint => l / r,
            Threshold::Linear { slope } => slope * l,
            Threshold::Custom(a) => a(l),
        }
    }

    /// `int_lo^hi g_l(y) dy`.
    fn integral(&self, l: f64, r: f64, lo: f64, hi: f64) -> f64 {
        match &self.kernel {
            Kernel::Indicator => hi - lo,
            Kernel::Shortfall => l * (hi - lo) - 0.5 * r * (hi * hi - lo * lo),
            Kernel::ShortfallPower { p } => {
                // Zero above l / r; antiderivative -(l - r y)^{p+1} / (r (p + 1)).
                let hi = hi.min(l / r);
                if hi <= lo {
                    return 0.0;
                }
                ((l - r * lo).powf(p + 1.0) - (l - r * hi).powf(p + 1.0)) / (r * (p + 1.0))
            }
            Kernel::PenalizedShortfall { k } => {
                // l + (l k - r) y - r k y^2
                let prim = |y: f64| l * y + 0.5 * (l * k - r) * y * y - r * k * y * y * y / 3.0;
                prim(hi) - prim(lo)
            }
            Kernel::Custom(g) => gauss_legendre(|y| g(l, y), lo, hi),
        }
    }

    /// Checks the regularity conditions used by the convergence theory on
    /// `[0, l_bar]`: `a` nondecreasing, `a(l) -> 0` as `l -> 0`, `a` finite
    /// and nonnegative, and `|g_l(y)| <= g_{l_bar}(0)` for `y` in
    /// `[0, a(l))`. The check is a dense scan, not a proof.
    pub fn check_assumptions(&self, r: f64, l_bar: f64) -> Result<()> {
        const STEPS: usize = 1000;
        let a0 = self.a(0.0, r);
        if !(a0.abs() <= 1e-12) {
            return Err(Error::Parameter(format!("a(0) = {a0}, expected 0")));
        }
        let cap = self.g(l_bar, 0.0, r);
        if !cap.is_finite() {
            return Err(Error::Parameter("g_{l_bar}(0) is not finite".into()));
        }
        let mut prev = a0;
        for i in 1..=STEPS {
            let l = l_bar * i as f64 / STEPS as f64;
            let a = self.a(l, r);
            if !a.is_finite() || a < 0.0 {
                return Err(Error::Parameter(format!(
                    "a({l}) = {a} is not finite and nonnegative"
                )));
            }
            if a < prev {
                return Err(Error::Parameter(format!("a is decreasing near l = {l}")));
            }
            prev = a;
            for s in 0..50 {
                let y = a * s as f64 / 50.0;
                let g = self.g(l, y, r);
                if !(g.abs() <= cap * (1.0 + 1e-12)) {
                    return Err(Error::Parameter(format!(
                        "|g_l(y)| = {} exceeds g_l_bar(0) = {cap} at l = {l}, y = {y}",
                        g.abs()
                    )));
                }
            }
        }
        if let Some(b) = self.bound {
            if b < cap {
                return Err(Error::Parameter(format!(
                    "declared bound {b} is below g_l_bar(0) = {cap}"
                )));
            }
        }
        Ok(())
    }
}

fn gauss_legendre(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    let rule = RULE.get_or_init(|| legendre_rule(20));
    let (c, h) = (0.5 * (lo + hi), 0.5 * (hi - lo));
    h * rule.iter().map(|&(x, w)| w * f(c + h * x)).sum::<f64>()
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on [-1, 1].
fn legendre_rule(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// `E[g_l(Y) 1{Y < a(l)}]` under the generated distribution.
pub fn r3_closed(cdf: &PiecewiseCdf, r: f64, gl: &GeneralizedLoss, l: f64) -> f64 {
    let a = gl.a(l, r);
    // Every piece carries mass 1/m; sum in units of pieces and divide once.
    let mut total = 0.0;
    for piece in cdf.pieces() {
        match piece {
            Piece::Atom { at, .. } => {
                if at < a {
                    total += gl.g(l, at, r);
                }
            }
            Piece::Segment { lo, hi, .. } => {
                if lo >= a {
                    continue;
                }
                let b = hi.min(a);
                total += gl.integral(l, r, lo, b) / (hi - lo);
            }
        }
    }
    total / cdf.m() as f64
}

/// `P(Y < l / r)`; the indicator case of [`r3_closed`].
pub fn r1_closed(cdf: &PiecewiseCdf, r: f64, l: f64) -> f64 {
    static G: OnceLock<GeneralizedLoss> = OnceLock::new();
    r3_closed(
        cdf,
        r,
        G.get_or_init(GeneralizedLoss::default_probability),
        l,
    )
}

/// `E[(l - r Y)^+]`: atoms contribute `mass * loss`, each segment the
/// trapezoid over its part below `l / r`.
pub fn r2_closed(cdf: &PiecewiseCdf, r: f64, l: f64) -> f64 {
    let cut = l / r;
    let mut total = 0.0;
    for piece in cdf.pieces() {
        match piece {
            Piece::Atom { at, .. } => total += loss(l, at, r),
            Piece::Segment { lo, hi, .. } => {
                if lo >= cut {
                    continue;
                }
                let b = hi.min(cut);
                let share = (b - lo) / (hi - lo);
                total += share * (l - r * 0.5 * (lo + b));
            }
        }
    }
    total / cdf.m() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lgd {
    pub value: f64,
    /// Set when `l * r1(l) = 0`, where the ratio is undefined and reported
    /// as zero.
    pub degenerate: bool,
}

/// Loss given default `r2 / (l r1)`.
pub fn lgd(l: f64, r1: f64, r2: f64) -> Lgd {
    let denom = l * r1;
    if denom > 0.0 {
        Lgd {
            value: r2 / denom,
            degenerate: false,
        }
    } else {
        Lgd {
            value: 0.0,
            degenerate: true,
        }
    }
}

/// `(P(L > xi), E[L 1{L > xi}])` through the shifted-loan identities.
pub fn threshold_measures(cdf: &PiecewiseCdf, r: f64, l: f64, xi: f64) -> Result<(f64, f64)> {
    if !(xi > 0.0 && xi < l) {
        return Err(Error::Domain(format!(
            "threshold {xi} must lie in (0, {l})"
        )));
    }
    let s = l - xi;
    let p = r1_closed(cdf, r, s);
    Ok((p, r2_closed(cdf, r, s) + xi * p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    R1,
    R2,
    R3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub se: f64,
    pub k: usize,
}

/// Mean and `sd / sqrt(K)` of per-draw values.
pub fn mean_and_se(values: impl ExactSizeIterator<Item = f64>) -> Result<McEstimate> {
    let k = values.len();
    if k == 0 {
        return Err(Error::Domain(
            "Monte Carlo estimate needs at least one draw".into(),
        ));
    }
    // Welford keeps the variance accurate when the mean is large; the
    // reported mean is the plain sum over K, exact for indicator draws.
    let (mut mean, mut m2, mut sum) = (0.0, 0.0, 0.0);
    for (i, v) in values.enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
        sum += v;
    }
    let var = if k > 1 { m2 / (k - 1) as f64 } else { 0.0 };
    Ok(McEstimate {
        value: sum / k as f64,
        se: (var / k as f64).sqrt(),
        k,
    })
}

/// Sample-mean estimate of a risk measure from draws of `Y`.
pub fn mc_estimate(
    samples: &[f64],
    r: f64,
    l: f64,
    which: Measure,
    gl: Option<&GeneralizedLoss>,
) -> Result<McEstimate> {
    match which {
        Measure::R1 => mean_and_se(samples.iter().map(|&y| if r * y < l { 1.0 } else { 0.0 })),
        Measure::R2 => mean_and_se(samples.iter().map(|&y| loss(l, y, r))),
        Measure::R3 => {
            let gl = gl.ok_or_else(|| Error::Parameter("r3 needs a generalized loss".into()))?;
            let a = gl.a(l, r);
            mean_and_se(
                samples
                    .iter()
                    .map(|&y| if y < a { gl.g(l, y, r) } else { 0.0 }),
            )
        }
    }
}

/// Direct Monte Carlo of `P(L > xi)` and `E[L 1{L > xi}]`.
pub fn mc_threshold(samples: &[f64], r: f64, l: f64, xi: f64) -> Result<(McEstimate, McEstimate)> {
    let exceed = mean_and_se(
        samples
            .iter()
            .map(|&y| if loss(l, y, r) > xi { 1.0 } else { 0.0 }),
    )?;
    let excess = mean_and_se(samples.iter().map(|&y| {
        let v = loss(l, y, r);
        if v > xi {
            v
        } else {
            0.0
        }
    }))?;
    Ok((exceed, excess))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Estimator {
    ClosedForm,
    MonteCarlo { k: usize, seed: u64 },
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::ClosedForm => f.write_str("closed_form"),
            Estimator::MonteCarlo { k, seed } => write!(f, "mc(k={k};seed={seed})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskCurve {
    pub r: f64,
    pub l_bar: f64,
    pub estimator: Estimator,
    pub loan_levels: Vec<f64>,
    pub r1: Vec<f64>,
    pub r2: Vec<f64>,
    pub lgd: Vec<f64>,
    pub lgd_degenerate: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r3: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_r1: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_r2: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_r3: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    /// `P(L > xi)` per level; `None` entries where `xi >= l`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exceed_prob: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_excess: Option<Vec<Option<f64>>>,
}

impl RiskCurve {
    pub fn len(&self) -> usize {
        self.loan_levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loan_levels.is_empty()
    }

    /// Columns `l, r1, r2, lgd, r3, estimator, se_r1, se_r2, se_r3`; absent
    /// values are left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "l",
            "r1",
            "r2",
            "lgd",
            "r3",
            "estimator",
            "se_r1",
            "se_r2",
            "se_r3",
        ])?;
        let opt = |v: &Option<Vec<f64>>, i: usize| {
            v.as_ref().map(|v| v[i].to_string()).unwrap_or_default()
        };
        let est = self.estimator.to_string();
        for i in 0..self.len() {
            w.write_record([
                self.loan_levels[i].to_string(),
                self.r1[i].to_string(),
                self.r2[i].to_string(),
                self.lgd[i].to_string(),
                opt(&self.r3, i),
                est.clone(),
                opt(&self.se_r1, i),
                opt(&self.se_r2, i),
                opt(&self.se_r3, i),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Evaluates the measures at every level of `spec.loan_grid`. Monte Carlo
/// curves reuse one set of `K` draws across levels.
pub fn risk_curve(
    cdf: &PiecewiseCdf,
    spec: &RiskSpec,
    estimator: Estimator,
    gl: Option<&GeneralizedLoss>,
) -> Result<RiskCurve> {
    spec.validate()?;
    let r = spec.r;
    let n = spec.loan_grid.len();
    let mut curve = RiskCurve {
        r,
        l_bar: spec.l_bar,
        estimator,
        loan_levels: spec.loan_grid.clone(),
        r1: Vec::with_capacity(n),
        r2: Vec::with_capacity(n),
        lgd: Vec::with_capacity(n),
        lgd_degenerate: Vec::with_capacity(n),
        r3: gl.map(|_| Vec::with_capacity(n)),
        se_r1: None,
        se_r2: None,
        se_r3: None,
        xi: spec.xi,
        exceed_prob: None,
        expected_excess: None,
    };
    match estimator {
        Estimator::ClosedForm => {
            for &l in &spec.loan_grid {
                curve.r1.push(r1_closed(cdf, r, l));
                curve.r2.push(r2_closed(cdf, r, l));
                if let (Some(gl), Some(r3)) = (gl, curve.r3.as_mut()) {
                    r3.push(r3_closed(cdf, r, gl, l));
                }
            }
            if let Some(xi) = spec.xi {
                let (p, e): (Vec<_>, Vec<_>) = spec
                    .loan_grid
                    .iter()
                    .map(|&l| match threshold_measures(cdf, r, l, xi) {
                        Ok((p, e)) => (Some(p), Some(e)),
                        Err(_) => (None, None),
                    })
                    .unzip();
                curve.exceed_prob = Some(p);
                curve.expected_excess = Some(e);
            }
        }
        Estimator::MonteCarlo { k, seed } => {
            if k == 0 {
                return Err(Error::Domain(
                    "Monte Carlo estimate needs at least one draw".into(),
                ));
            }
            let samples = cdf.sample(k, seed);
            let (mut s1, mut s2, mut s3) =
                (Vec::with_capacity(n), Vec::with_capacity(n), Vec::new());
            for &l in &spec.loan_grid {
                let e1 = mc_estimate(&samples, r, l, Measure::R1, None)?;
                let e2 = mc_estimate(&samples, r, l, Measure::R2, None)?;
                curve.r1.push(e1.value);
                curve.r2.push(e2.value);
                s1.push(e1.se);
                s2.push(e2.se);
                if let (Some(gl), Some(r3)) = (gl, curve.r3.as_mut()) {
                    let e3 = mc_estimate(&samples, r, l, Measure::R3, Some(gl))?;
                    r3.push(e3.value);
                    s3.push(e3.se);
                }
            }
            curve.se_r1 = Some(s1);
            curve.se_r2 = Some(s2);
            if gl.is_some() {
                curve.se_r3 = Some(s3);
            }
            if let Some(xi) = spec.xi {
                let (p, e): (Vec<_>, Vec<_>) = spec
                    .loan_grid
                    .iter()
                    .map(|&l| {
                        if xi > 0.0 && xi < l {
                            let (p, e) =
                                mc_threshold(&samples, r, l, xi).expect("samples are nonempty");
                            (Some(p.value), Some(e.value))
                        } else {
                            (None, None)
                        }
                    })
                    .unzip();
                curve.exceed_prob = Some(p);
                curve.expected_excess = Some(e);
            }
        }
    }
    for i in 0..n {
        let v = lgd(spec.loan_grid[i], curve.r1[i], curve.r2[i]);
        curve.lgd.push(v.value);
        curve.lgd_degenerate.push(v.degenerate);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert_eq!(loss(0.0, 3.0, 1.0), 0.0);
        assert_eq!(loss(10.0, 4.0, 1.0), 6.0);
        assert_eq!(loss(10.0, 6.0, 2.0), 0.0);
    }

    #[test]
    fn point_mass_measures() {
        let c = PiecewiseCdf::point_mass(10, 3.0).unwrap();
        for &l in &[0.0, 2.0, 3.0, 5.0, 9.0] {
            assert_eq!(r2_closed(&c, 1.5, l), loss(l, 3.0, 1.5));
            let want = if 1.5 * 3.0 < l { 1.0 } else { 0.0 };
            assert!((r1_closed(&c, 1.5, l) - want).abs() < 1e-15);
        }
        let z = PiecewiseCdf::point_mass(10, 0.0).unwrap();
        let (r1, r2) = (r1_closed(&z, 1.0, 7.0), r2_closed(&z, 1.0, 7.0));
        assert!((r1 - 1.0).abs() < 1e-15);
        assert!((lgd(7.0, r1, r2).value - 1.0).abs() < 1e-15);
        let (p, e) = threshold_measures(&z, 1.0, 7.0, 2.0).unwrap();
        assert!((p - 1.0).abs() < 1e-15 && (e - 7.0).abs() < 1e-12);
    }

    #[test]
    fn strict_inequality_excludes_boundary_atom() {
        let c = PiecewiseCdf::new(4, vec![1.0, 1.0, 2.0]).unwrap();
        // Atoms of 1/4 + 1/4 at 1.0: r1 at l = r * 1 excludes them.
        assert_eq!(r1_closed(&c, 2.0, 2.0), 0.0);
        assert!((r1_closed(&c, 2.0, 2.0 + 1e-9) - 0.5).abs() < 1e-8);
        assert!((r1_closed(&c, 1.0, 1.5) - c.cdf_left(1.5)).abs() < 1e-15);
    }

    #[test]
    fn lgd_degenerate_flag() {
        assert_eq!(
            lgd(5.0, 0.0, 0.0),
            Lgd {
                value: 0.0,
                degenerate: true
            }
        );
    }

    #[test]
    fn mc_examples() {
        let s = [0.0, 5.0];
        assert_eq!(
            mc_estimate(&s, 2.0, 10.0, Measure::R1, None).unwrap().value,
            0.5
        );
        let high = [6.0, 7.0, 100.0];
        assert_eq!(
            mc_estimate(&high, 2.0, 10.0, Measure::R1, None)
                .unwrap()
                .value,
            0.0
        );
        assert_eq!(
            mc_estimate(&high, 2.0, 10.0, Measure::R2, None)
                .unwrap()
                .value,
            0.0
        );
        assert!(matches!(
            mc_estimate(&[], 1.0, 1.0, Measure::R1, None),
            Err(Error::Domain(_))
        ));
        let g = GeneralizedLoss::default_probability();
        assert_eq!(
            mc_estimate(&s, 2.0, 10.0, Measure::R3, Some(&g))
                .unwrap()
                .value,
            0.5
        );
    }

    #[test]
    fn threshold_domain() {
        let c = PiecewiseCdf::point_mass(4, 1.0).unwrap();
        assert!(threshold_measures(&c, 1.0, 5.0, 0.0).is_err());
        assert!(threshold_measures(&c, 1.0, 5.0, 5.0).is_err());
    }

    #[test]
    fn legendre_rule_integrates_polynomials() {
        let v = gauss_legendre(|x| x.powi(7) - 3.0 * x * x + 1.0, -1.0, 2.0);
        let exact = (2f64.powi(8) - 1.0) / 8.0 - (8.0 + 1.0) + 3.0;
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn assumption_checks() {
        assert!(GeneralizedLoss::squared_loss()
            .check_assumptions(1.0, 100.0)
            .is_ok());
        assert!(GeneralizedLoss::expected_loss()
            .check_assumptions(1.0, 100.0)
            .is_ok());
        let fixed = GeneralizedLoss::new(Kernel::Indicator, Threshold::Custom(Arc::new(|_| 5.0)));
        assert!(fixed.check_assumptions(1.0, 10.0).is_err());
        let pen = GeneralizedLoss::new(
            Kernel::PenalizedShortfall { k: 1.0 },
            Threshold::DefaultPoint,
        );
        assert!(pen.check_assumptions(1.0, 10.0).is_err());
    }

    #[test]
    fn csv_layout() {
        let c = PiecewiseCdf::new(5, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec = RiskSpec::uniform(1.0, 0.0, 4.0, 5).unwrap();
        let curve = risk_curve(
            &c,
            &spec,
            Estimator::ClosedForm,
            Some(&GeneralizedLoss::squared_loss()),
        )
        .unwrap();
        let s = curve.to_csv_string().unwrap();
        let mut lines = s.lines();
        assert_eq!(
            lines.next().unwrap(),
            "l,r1,r2,lgd,r3,estimator,se_r1,se_r2,se_r3"
        );
        assert_eq!(lines.count(), 5);
        assert!(curve.lgd_degenerate[0]);
    }
}
