//! Linear quantile regression over a grid of levels.
//!
//! Each level is fitted independently. The solver minimizes a Huber-smoothed
//! pinball loss by iteratively reweighted least squares, shrinking the
//! smoothing width geometrically, and then walks vertices of the exact
//! linear program (basis exchange over interpolated observations) until no
//! edge direction decreases the unsmoothed loss.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Covariate, Dataset, FieldSchema};
use crate::error::{check_probability, Error, Result};

/// Levels `tau_j = j / m` for `j = 1, ..., m - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct QuantileGrid {
    m: usize,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    m: usize,
}

impl TryFrom<GridRepr> for QuantileGrid {
    type Error = Error;
    fn try_from(r: GridRepr) -> Result<Self> {
        QuantileGrid::new(r.m)
    }
}

impl From<QuantileGrid> for GridRepr {
    fn from(g: QuantileGrid) -> Self {
        GridRepr { m: g.m }
    }
}

impl QuantileGrid {
    pub fn new(m: usize) -> Result<Self> {
        if m < 3 {
            return Err(Error::domain(format!(
                "grid size m must be at least 3, got {m}"
            )));
        }
        Ok(QuantileGrid { m })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of levels, `m - 1`.
    pub fn len(&self) -> usize {
        self.m - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Level at zero-based index `i`, i.e. `tau_{i+1}`.
    pub fn tau(&self, i: usize) -> f64 {
        (i + 1) as f64 / self.m as f64
    }

    pub fn levels(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.tau(i)).collect()
    }

    /// Zero-based index of a level on the grid.
    pub fn index_of(&self, tau: f64) -> Option<usize> {
        let j = (tau * self.m as f64).round();
        if j >= 1.0 && j <= (self.m - 1) as f64 && (j / self.m as f64 - tau).abs() <= 1e-12 {
            Some(j as usize - 1)
        } else {
            None
        }
    }
}

/// `[tau - I(u <= 0)] * u`.
#[inline]
pub fn pinball_loss(u: f64, tau: f64) -> f64 {
    if u <= 0.0 {
        (tau - 1.0) * u
    } else {
        tau * u
    }
}

/// `round(sqrt(n))` clamped to `[3, n - 1]`.
pub fn default_m(n: usize) -> usize {
    let m = (n as f64).sqrt().round() as usize;
    m.clamp(3, n.saturating_sub(1).max(3))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    /// Interior point, followed by the exact vertex walk for narrow designs.
    #[default]
    Auto,
    Irls,
    InteriorPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// IRLS iterations allowed per smoothing stage, or interior-point
    /// iterations in total.
    pub max_iter: usize,
    /// Relative coefficient change that ends a smoothing stage.
    pub tol: f64,
    /// Initial smoothing width, relative to the spread of y.
    pub smoothing_start: f64,
    /// Final smoothing width, relative to the spread of y.
    pub smoothing_min: f64,
    /// Ridge penalty on all coefficients. Zero (the default) fits the plain
    /// pinball objective; a positive value disables the exact vertex walk.
    pub ridge: f64,
    pub polish: bool,
    /// Skip the vertex walk for designs wider than this.
    pub polish_max_columns: usize,
    pub max_pivots: usize,
    pub method: SolverMethod,
    /// Relative duality gap that ends the interior-point method.
    pub gap_tol: f64,
    /// Fit levels on the rayon pool. Results do not depend on this.
    pub parallel: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 100,
            tol: 1e-9,
            smoothing_start: 0.1,
            smoothing_min: 1e-6,
            ridge: 0.0,
            polish: true,
            polish_max_columns: 64,
            max_pivots: 20_000,
            method: SolverMethod::Auto,
            gap_tol: 1e-9,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub tau: f64,
    /// Sum of pinball losses over the training rows.
    pub loss: f64,
    pub iterations: usize,
    pub pivots: usize,
    pub converged: bool,
    /// True when the vertex walk certified optimality.
    pub exact: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub levels: Vec<LevelReport>,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn failed_levels(&self) -> Vec<f64> {
        self.levels
            .iter()
            .filter(|l| !l.converged)
            .map(|l| l.tau)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelSolution {
    pub beta: Vec<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub pivots: usize,
    pub converged: bool,
    pub exact: bool,
}

/// Design matrix layout for a schema. The first categorical field keeps all
/// of its one-hot columns (acting as the intercept); later categorical
/// fields drop their first level so the design has full column rank.
#[derive(Clone, Debug)]
struct DesignMap {
    cols: Vec<Option<usize>>,
    q: usize,
}

impl DesignMap {
    fn new(schema: &FieldSchema) -> Self {
        let mut cols = vec![None; schema.width()];
        let mut q = 0;
        let mut seen_categorical = false;
        for (fi, f) in schema.fields().iter().enumerate() {
            let off = schema.offset(fi);
            let skip = usize::from(f.is_categorical() && seen_categorical);
            for (c, slot) in cols.iter_mut().skip(off).take(f.width()).enumerate() {
                if c >= skip {
                    *slot = Some(q);
                    q += 1;
                }
            }
            seen_categorical |= f.is_categorical();
        }
        DesignMap { cols, q }
    }

    fn design(&self, data: &Dataset) -> Design {
        let mut d =
            Design::with_capacity(data.n(), self.q, data.n() * data.schema().fields().len());
        for row in data.rows() {
            for (c, v) in data.schema().active(row) {
                if let Some(col) = self.cols[c] {
                    if v != 0.0 {
                        d.idx.push(col);
                        d.val.push(v);
                    }
                }
            }
            d.ptr.push(d.idx.len());
        }
        d
    }

    fn expand(&self, beta: &[f64]) -> Vec<f64> {
        self.cols
            .iter()
            .map(|c| c.map_or(0.0, |d| beta[d]))
            .collect()
    }
}

/// Fitted linear quantile functions `Q_tau(x) = beta(tau)' x` on one-hot
/// covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearQuantileModel {
    pub grid: QuantileGrid,
    pub schema: FieldSchema,
    /// (m - 1) × p, row-major; row j holds beta(tau_{j+1}).
    pub beta: Vec<f64>,
    pub fit_report: FitReport,
}

impl LinearQuantileModel {
    pub fn coefficients(&self, level: usize) -> &[f64] {
        let p = self.schema.width();
        &self.beta[level * p..(level + 1) * p]
    }

    /// Unsorted per-level predictions.
    pub fn predict_raw(&self, row: &[Covariate]) -> Result<Vec<f64>> {
        self.schema.check_row(row)?;
        let p = self.schema.width();
        let active = self.schema.active(row);
        Ok(self
            .beta
            .chunks(p)
            .map(|b| active.iter().map(|&(c, v)| b[c] * v).sum())
            .collect())
    }
}

pub fn fit_grid(
    data: &Dataset,
    grid: &QuantileGrid,
    cfg: &SolverConfig,
) -> Result<LinearQuantileModel> {
    let all: Vec<usize> = (0..grid.len()).collect();
    let (beta, report) = fit_grid_levels(data, grid, &all, cfg)?;
    Ok(LinearQuantileModel {
        grid: *grid,
        schema: data.schema().clone(),
        beta,
        fit_report: report,
    })
}

/// Fits the listed zero-based grid levels. Returns the one-hot coefficient
/// rows (concatenated in the order given) and the report.
pub fn fit_grid_levels(
    data: &Dataset,
    grid: &QuantileGrid,
    levels: &[usize],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, FitReport)> {
    if let Some(&bad) = levels.iter().find(|&&j| j >= grid.len()) {
        return Err(Error::domain(format!(
            "level index {bad} outside grid of {} levels",
            grid.len()
        )));
    }
    let map = DesignMap::new(data.schema());
    let x = map.design(data);
    let y = data.response();
    let mut warnings = Vec::new();
    if data.n() <= map.q {
        warnings.push(format!(
            "n = {} does not exceed the number of design columns {}",
            data.n(),
            map.q
        ));
    }
    let dense = (cfg.polish && map.q <= cfg.polish_max_columns).then(|| x.to_dense());
    let solve = |&j: &usize| solve_design(&x, dense.as_deref(), y, grid.tau(j), cfg);
    let sols: Vec<Result<LevelSolution>> = if cfg.parallel {
        levels.par_iter().map(solve).collect()
    } else {
        levels.iter().map(solve).collect()
    };
    let mut beta = Vec::with_capacity(levels.len() * data.p());
    let mut report = FitReport {
        levels: Vec::with_capacity(levels.len()),
        warnings,
    };
    for (&j, sol) in levels.iter().zip(sols) {
        let sol = sol?;
        beta.extend(map.expand(&sol.beta));
        if !sol.converged {
            report
                .warnings
                .push(format!("level {} did not converge", grid.tau(j)));
        }
        report.levels.push(LevelReport {
            tau: grid.tau(j),
            loss: sol.loss,
            iterations: sol.iterations,
            pivots: sol.pivots,
            converged: sol.converged,
            exact: sol.exact,
        });
    }
    if !report.levels.is_empty() && report.levels.iter().all(|l| !l.converged) {
        return Err(Error::Fit("no quantile level converged".into()));
    }
    if report
        .levels
        .iter()
        .any(|l| !l.loss.is_finite() || l.loss < 0.0)
    {
        return Err(Error::Fit("non-finite loss".into()));
    }
    Ok((beta, report))
}

pub fn total_pinball(x: &[f64], y: &[f64], q: usize, beta: &[f64], tau: f64) -> f64 {
    y.iter()
        .zip(x.chunks(q))
        .map(|(&yi, xi)| pinball_loss(yi - dot(xi, beta), tau))
        .sum()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-compressed design matrix. One-hot rows have one entry per field, so
/// normal equations cost `n * nnz^2` rather than `n * q^2`.
#[derive(Clone, Debug)]
struct Design {
    q: usize,
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Design {
    fn with_capacity(n: usize, q: usize, nnz: usize) -> Self {
        let mut ptr = Vec::with_capacity(n + 1);
        ptr.push(0);
        Design {
            q,
            ptr,
            idx: Vec::with_capacity(nnz),
            val: Vec::with_capacity(nnz),
        }
    }

    fn from_dense(x: &[f64], n: usize, q: usize) -> Self {
        let mut d = Design::with_capacity(n, q, x.len());
        for xi in x.chunks(q) {
            for (c, &v) in xi.iter().enumerate() {
                if v != 0.0 {
                    d.idx.push(c);
                    d.val.push(v);
                }
            }
            d.ptr.push(d.idx.len());
        }
        d
    }

    fn n(&self) -> usize {
        self.ptr.len() - 1
    }

    fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.ptr[i], self.ptr[i + 1]);
        (&self.idx[a..b], &self.val[a..b])
    }

    fn dot_row(&self, i: usize, beta: &[f64]) -> f64 {
        let (idx, val) = self.row(i);
        idx.iter().zip(val).map(|(&c, v)| v * beta[c]).sum()
    }

    /// `X' v`.
    fn t_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.q];
        for (i, &vi) in v.iter().enumerate() {
            let (idx, val) = self.row(i);
            for (&c, x) in idx.iter().zip(val) {
                out[c] += x * vi;
            }
        }
        out
    }

    fn to_dense(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.n() * self.q];
        for i in 0..self.n() {
            let (idx, val) = self.row(i);
            for (&c, &v) in idx.iter().zip(val) {
                x[i * self.q + c] = v;
            }
        }
        x
    }

    fn total_pinball(&self, y: &[f64], beta: &[f64], tau: f64) -> f64 {
        y.iter()
            .enumerate()
            .map(|(i, &yi)| pinball_loss(yi - self.dot_row(i, beta), tau))
            .sum()
    }
}

fn spread(y: &[f64]) -> f64 {
    let mut s: Vec<f64> = y.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let iqr = s[(3 * n) / 4] - s[n / 4];
    if iqr > 0.0 {
        iqr
    } else {
        let max = s.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if max > 0.0 {
            max
        } else {
            1.0
        }
    }
}

/// `X' W X + ridge I`.
fn weighted_gram(x: &Design, weights: &[f64], ridge: f64) -> DMatrix<f64> {
    let q = x.q;
    let mut a = DMatrix::<f64>::zeros(q, q);
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let (idx, val) = x.row(i);
        for (s, (&r, &vr)) in idx.iter().zip(val).enumerate() {
            let wr = w * vr;
            for (&c, &vc) in idx[s..].iter().zip(&val[s..]) {
                // Upper triangle regardless of column order within the row.
                let (lo, hi) = if r <= c { (r, c) } else { (c, r) };
                a[(lo, hi)] += wr * vc;
            }
        }
    }
    for r in 0..q {
        for c in 0..r {
            a[(r, c)] = a[(c, r)];
        }
        a[(r, r)] += ridge;
    }
    a
}

/// Cholesky factor with an escalating diagonal jitter for rank-deficient
/// designs.
fn factor(a: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let q = a.nrows();
    let trace = (0..q)
        .map(|i| a[(i, i)])
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut m = a.clone();
        for i in 0..q {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            if ch.l_dirty().iter().all(|v| v.is_finite()) {
                return Some(ch);
            }
        }
        jitter = if jitter == 0.0 {
            1e-12 * trace / q as f64
        } else {
            jitter * 100.0
        };
    }
    None
}

fn chol_solve(ch: &Cholesky<f64, Dyn>, rhs: &[f64]) -> Option<Vec<f64>> {
    let sol = ch.solve(&DVector::from_column_slice(rhs));
    sol.iter()
        .all(|v| v.is_finite())
        .then(|| sol.as_slice().to_vec())
}

/// Solves `(X' W X + ridge I) beta = rhs`.
fn weighted_solve(x: &Design, weights: &[f64], rhs: &[f64], ridge: f64) -> Option<Vec<f64>> {
    chol_solve(&factor(&weighted_gram(x, weights, ridge))?, rhs)
}

/// Single-level fit on a dense design (`x` is n × q, row-major).
pub fn solve_quantile(
    x: &[f64],
    y: &[f64],
    q: usize,
    tau: f64,
    cfg: &SolverConfig,
) -> Result<LevelSolution> {
    let n = y.len();
    if n == 0 || x.len() != n * q || q == 0 {
        return Err(Error::domain("design and response dimensions disagree"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("data must be finite"));
    }
    solve_design(&Design::from_dense(x, n, q), Some(x), y, tau, cfg)
}

/// Majorize-minimize on the Huber-smoothed pinball loss with the smoothing
/// width shrunk tenfold per stage.
fn irls(x: &Design, y: &[f64], tau: f64, cfg: &SolverConfig) -> Result<(Vec<f64>, usize, bool)> {
    let n = y.len();
    let scale = spread(y);

    // Least-squares start.
    let ones = vec![1.0; n];
    let mut beta = weighted_solve(x, &ones, &x.t_mul(y), cfg.ridge)
        .ok_or_else(|| Error::Fit("singular design".into()))?;

    let mut eps = cfg.smoothing_start * scale;
    let eps_min = cfg.smoothing_min * scale;
    let mut iterations = 0;
    let converged;
    let mut weights = vec![0.0; n];
    let mut wy = vec![0.0; n];
    let xsum = x.t_mul(&ones);
    loop {
        let mut stage_converged = false;
        for _ in 0..cfg.max_iter {
            iterations += 1;
            for (i, (w, &yi)) in weights.iter_mut().zip(y).enumerate() {
                let r = yi - x.dot_row(i, &beta);
                *w = 0.5 / r.abs().max(eps);
                wy[i] = *w * yi;
            }
            let rhs: Vec<f64> = x
                .t_mul(&wy)
                .iter()
                .zip(&xsum)
                .map(|(a, s)| a + (tau - 0.5) * s)
                .collect();
            let Some(next) = weighted_solve(x, &weights, &rhs, cfg.ridge) else {
                break;
            };
            let delta = next
                .iter()
                .zip(&beta)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let size = next.iter().map(|v| v.abs()).fold(0.0, f64::max);
            beta = next;
            if delta <= cfg.tol * (1.0 + size) {
                stage_converged = true;
                break;
            }
        }
        if eps <= eps_min {
            converged = stage_converged;
            break;
        }
        eps = (eps * 0.1).max(eps_min);
    }

    Ok((beta, iterations, converged))
}

/// Fraction of the distance to the boundary taken per step.
const STEP: f64 = 0.9995;

/// Frisch-Newton primal-dual interior point on the dual linear program
/// `max y'a` subject to `X'a = (1 - tau) X'1`, `0 <= a <= 1`, with a
/// Mehrotra predictor-corrector step. The coefficients are the negated
/// equality multipliers. Stops when the duality gap, which bounds the
/// excess pinball loss, falls below `gap_tol` relative to the loss.
fn interior_point(
    x: &Design,
    y: &[f64],
    tau: f64,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, usize, bool)> {
    let n = y.len();
    let singular = || Error::Fit("singular design".into());
    let mut a = vec![1.0 - tau; n];
    let mut s = vec![tau; n];
    let b = x.t_mul(&a);
    let ones = vec![1.0; n];
    let neg_y: Vec<f64> = y.iter().map(|v| -v).collect();
    let mut dual = weighted_solve(x, &ones, &x.t_mul(&neg_y), 0.0).ok_or_else(singular)?;
    // Start the dual slacks from the residuals of the least-squares fit,
    // padded away from zero so no pair starts on the boundary.
    let resid: Vec<f64> = (0..n).map(|i| -y[i] - x.dot_row(i, &dual)).collect();
    let pad = (0.1 * resid.iter().map(|r| r.abs()).sum::<f64>() / n as f64).max(1e-3);
    let mut z: Vec<f64> = resid.iter().map(|r| r.max(0.0) + pad).collect();
    let mut w: Vec<f64> = resid.iter().map(|r| (-r).max(0.0) + pad).collect();
    let gap =
        |a: &[f64], dual: &[f64], w: &[f64]| -dot(y, a) - dot(dual, &b) + w.iter().sum::<f64>();
    let bound = |v: &[f64], dv: &[f64]| {
        v.iter()
            .zip(dv)
            .filter(|(_, d)| **d < 0.0)
            .map(|(v, d)| -v / d)
            .fold(f64::INFINITY, f64::min)
    };
    let steps = |a: &[f64],
                 da: &[f64],
                 s: &[f64],
                 ds: &[f64],
                 z: &[f64],
                 dz: &[f64],
                 w: &[f64],
                 dw: &[f64]| {
        let fp = (STEP * bound(a, da).min(bound(s, ds))).min(1.0);
        let fd = (STEP * bound(w, dw).min(bound(z, dz))).min(1.0);
        (fp, fd)
    };
    let mut qv = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut dx = vec![0.0; n];
    let mut ds = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut dw = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let beta: Vec<f64> = dual.iter().map(|v| -v).collect();
        let loss = x.total_pinball(y, &beta, tau);
        if gap(&a, &dual, &w) <= cfg.gap_tol * loss.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        iterations += 1;
        for i in 0..n {
            qv[i] = 1.0 / (z[i] / a[i] + w[i] / s[i]);
            r[i] = z[i] - w[i];
        }
        let ch = factor(&weighted_gram(x, &qv, 0.0)).ok_or_else(singular)?;
        let qr: Vec<f64> = qv.iter().zip(&r).map(|(q, r)| q * r).collect();
        let mut rhs = x.t_mul(&qr);
        let mut dy = chol_solve(&ch, &rhs).ok_or_else(singular)?;
        for i in 0..n {
            dx[i] = qv[i] * (x.dot_row(i, &dy) - r[i]);
            ds[i] = -dx[i];
            dz[i] = -z[i] * (dx[i] / a[i] + 1.0);
            dw[i] = -w[i] * (ds[i] / s[i] + 1.0);
        }
        let (mut fp, mut fd) = steps(&a, &dx, &s, &ds, &z, &dz, &w, &dw);
        if fp.min(fd) < 1.0 {
            // Corrector with a centering target from the predicted gap.
            let mu0 = dot(&z, &a) + dot(&w, &s);
            let g: f64 = (0..n)
                .map(|i| {
                    (z[i] + fd * dz[i]) * (a[i] + fp * dx[i])
                        + (w[i] + fd * dw[i]) * (s[i] + fp * ds[i])
                })
                .sum();
            let mu = mu0 * (g / mu0).powi(3) / (2.0 * n as f64);
            let mut extra = vec![0.0; n];
            let mut xi = vec![0.0; n];
            for i in 0..n {
                xi[i] = mu * (1.0 / a[i] - 1.0 / s[i]);
                extra[i] = qv[i] * (dx[i] * dz[i] - ds[i] * dw[i] - xi[i]);
            }
            for (r0, e) in rhs.iter_mut().zip(x.t_mul(&extra)) {
                *r0 += e;
            }
            dy = chol_solve(&ch, &rhs).ok_or_else(singular)?;
            for i in 0..n {
                let (dxdz, dsdw) = (dx[i] * dz[i], ds[i] * dw[i]);
                dx[i] = qv[i] * (x.dot_row(i, &dy) + xi[i] - r[i] - dxdz + dsdw);
                ds[i] = -dx[i];
                dz[i] = mu / a[i] - z[i] - z[i] * dx[i] / a[i] - dxdz;
                dw[i] = mu / s[i] - w[i] - w[i] * ds[i] / s[i] - dsdw;
            }
            (fp, fd) = steps(&a, &dx, &s, &ds, &z, &dz, &w, &dw);
        }
        for i in 0..n {
            a[i] += fp * dx[i];
            s[i] += fp * ds[i];
            w[i] += fd * dw[i];
            z[i] += fd * dz[i];
        }
        for (d, v) in dual.iter_mut().zip(&dy) {
            *d += fd * v;
        }
    }
    Ok((dual.iter().map(|v| -v).collect(), iterations, converged))
}

/// `dense`, when given, is the same design laid out row-major; it is only
/// needed for the exact polish.
fn solve_design(
    x: &Design,
    dense: Option<&[f64]>,
    y: &[f64],
    tau: f64,
    cfg: &SolverConfig,
) -> Result<LevelSolution> {
    check_probability("tau", tau)?;
    let (n, q) = (y.len(), x.q);
    if n == 0 || x.n() != n || q == 0 {
        return Err(Error::domain("design and response dimensions disagree"));
    }
    if x.val.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::domain("data must be finite"));
    }
    let use_ip = cfg.ridge == 0.0
        && match cfg.method {
            SolverMethod::Auto => true,
            SolverMethod::Irls => false,
            SolverMethod::InteriorPoint => true,
        };
    let (mut beta, iterations, converged) = if use_ip {
        interior_point(x, y, tau, cfg)?
    } else {
        irls(x, y, tau, cfg)?
    };
    let objective = |b: &[f64]| {
        x.total_pinball(y, b, tau) + cfg.ridge * 0.5 * b.iter().map(|v| v * v).sum::<f64>()
    };

    let mut loss = objective(&beta);
    let mut pivots = 0;
    let mut exact = false;
    if let Some(xd) =
        dense.filter(|_| cfg.polish && cfg.ridge == 0.0 && q <= cfg.polish_max_columns && n >= q)
    {
        if let Some(v) = vertex_walk(xd, y, q, tau, &beta, cfg.max_pivots) {
            pivots = v.pivots;
            let l = objective(&v.beta);
            if l <= loss * (1.0 + 1e-12) + 1e-12 {
                beta = v.beta;
                loss = l;
                exact = v.optimal;
            }
        }
    }
    Ok(LevelSolution {
        beta,
        loss,
        iterations,
        pivots,
        converged: converged || exact,
        exact,
    })
}

struct Vertex {
    beta: Vec<f64>,
    pivots: usize,
    optimal: bool,
}

/// Picks `q` linearly independent rows, preferring small |residual|.
fn initial_basis(x: &[f64], q: usize, resid: &[f64]) -> Option<Vec<usize>> {
    let mut order: Vec<usize> = (0..resid.len()).collect();
    order.sort_by(|&a, &b| resid[a].abs().total_cmp(&resid[b].abs()));
    let mut basis = Vec::with_capacity(q);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(q);
    for i in order {
        let xi = &x[i * q..(i + 1) * q];
        let norm = dot(xi, xi).sqrt();
        if norm == 0.0 {
            continue;
        }
        let mut v: Vec<f64> = xi.to_vec();
        for u in &ortho {
            let c = dot(&v, u);
            for (a, b) in v.iter_mut().zip(u) {
                *a -= c * b;
            }
        }
        let vn = dot(&v, &v).sqrt();
        if vn > 1e-8 * norm {
            v.iter_mut().for_each(|a| *a /= vn);
            ortho.push(v);
            basis.push(i);
            if basis.len() == q {
                return Some(basis);
            }
        }
    }
    None
}

/// Exact descent over vertices of the quantile-regression LP. At a vertex
/// the fit interpolates the `q` basis rows; each edge frees one basis row
/// to either side. The steepest improving edge is followed to the minimum
/// of the convex piecewise-linear loss along it, where the row whose
/// residual crosses zero enters the basis.
fn vertex_walk(
    x: &[f64],
    y: &[f64],
    q: usize,
    tau: f64,
    start: &[f64],
    max_pivots: usize,
) -> Option<Vertex> {
    let n = y.len();
    let mut resid: Vec<f64> = x
        .chunks(q)
        .zip(y)
        .map(|(xi, &yi)| yi - dot(xi, start))
        .collect();
    let mut basis = initial_basis(x, q, &resid)?;
    let mut in_basis = vec![false; n];
    let mut g = vec![0.0; n * q];
    let mut best_loss = f64::INFINITY;
    let mut stalls = 0;
    for pivots in 0..=max_pivots {
        in_basis.iter_mut().for_each(|b| *b = false);
        for &i in &basis {
            in_basis[i] = true;
        }
        let xb = DMatrix::from_fn(q, q, |r, c| x[basis[r] * q + c]);
        let lu = xb.lu();
        let inv = lu.try_inverse()?;
        let yb = DVector::from_iterator(q, basis.iter().map(|&i| y[i]));
        let beta: Vec<f64> = (&inv * yb).as_slice().to_vec();
        if beta.iter().any(|v| !v.is_finite()) {
            return None;
        }
        for (i, (r, (xi, &yi))) in resid.iter_mut().zip(x.chunks(q).zip(y)).enumerate() {
            *r = if in_basis[i] {
                0.0
            } else {
                yi - dot(xi, &beta)
            };
        }
        let loss: f64 = resid.iter().map(|&r| pinball_loss(r, tau)).sum();
        if loss < best_loss * (1.0 - 1e-15) {
            best_loss = loss;
            stalls = 0;
        } else {
            stalls += 1;
            if stalls > 4 * q + 50 {
                return Some(Vertex {
                    beta,
                    pivots,
                    optimal: false,
                });
            }
        }
        if pivots == max_pivots {
            return Some(Vertex {
                beta,
                pivots,
                optimal: false,
            });
        }
        // g[i, k] = x_i . d_k where column d_k of inv satisfies X_B d_k = e_k.
        for (xi, gi) in x.chunks(q).zip(g.chunks_mut(q)) {
            for (k, gk) in gi.iter_mut().enumerate() {
                *gk = (0..q).map(|c| xi[c] * inv[(c, k)]).sum();
            }
        }
        // Directional derivatives of the loss along +d_k and -d_k.
        let mut best: Option<(f64, usize, f64)> = None;
        for k in 0..q {
            let (mut plus, mut minus, mut mag) = (1.0 - tau, tau, 1.0);
            for i in 0..n {
                if in_basis[i] {
                    continue;
                }
                let gi = g[i * q + k];
                mag += gi.abs();
                let r = resid[i];
                plus += slope(r, gi, tau);
                minus += slope(r, -gi, tau);
            }
            for (s, sign) in [(plus, 1.0), (minus, -1.0)] {
                if s < -1e-11 * mag && best.is_none_or(|(b, _, _)| s < b) {
                    best = Some((s, k, sign));
                }
            }
        }
        let Some((s0, k, sign)) = best else {
            return Some(Vertex {
                beta,
                pivots,
                optimal: true,
            });
        };
        // Breakpoints t_i = r_i / g_i > 0 along the chosen edge.
        let mut bps: Vec<(f64, usize, f64)> = (0..n)
            .filter(|&i| !in_basis[i])
            .filter_map(|i| {
                let gi = sign * g[i * q + k];
                let r = resid[i];
                if gi != 0.0 && r != 0.0 && (r > 0.0) == (gi > 0.0) {
                    Some((r / gi, i, gi.abs()))
                } else {
                    None
                }
            })
            .collect();
        bps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut s = s0;
        let mut entering = None;
        for &(_, i, w) in &bps {
            s += w;
            if s >= 0.0 {
                entering = Some(i);
                break;
            }
        }
        basis[k] = entering?;
    }
    None
}

/// Right derivative in t of `rho_tau(r - t g)` at t = 0.
#[inline]
fn slope(r: f64, g: f64, tau: f64) -> f64 {
    if r > 0.0 || (r == 0.0 && g < 0.0) {
        -tau * g
    } else {
        (1.0 - tau) * g
    }
}
