//! Online stage: inverse-transform sampling from interpolated quantiles.
//!
//! For a covariate `x` with rearranged quantiles `Q_1 <= ... <= Q_{m-1}` at
//! levels `tau_j = j/m`, a uniform `u` maps to `Q_1` when `u < tau_1`, to
//! `Q_{m-1}` when `u >= tau_{m-1}`, and otherwise to the linear interpolation
//! `Q_j + m (u - tau_j) (Q_{j+1} - Q_j)` for `u` in `[tau_j, tau_{j+1})`.
//! The generated variable therefore has atoms of mass `1/m` at both ends,
//! mass `1/m` spread uniformly over each interior segment, and a point mass
//! wherever a segment is flat.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::datagen::Covariate;
use crate::error::{check_probability, Error, Result};
use crate::model::QuantileModel;
use crate::rng::{self, Rng};

/// Distribution of the generated variable for one covariate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseCdf {
    m: usize,
    knots: Vec<f64>,
}

/// A piece of the generated distribution: a point mass or mass spread
/// uniformly over `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Piece {
    Atom { at: f64, mass: f64 },
    Segment { lo: f64, hi: f64, mass: f64 },
}

impl PiecewiseCdf {
    /// Builds the distribution from raw per-level quantiles, sorting them
    /// (monotone rearrangement) first.
    pub fn new(m: usize, mut quantiles: Vec<f64>) -> Result<Self> {
        if m < 3 || quantiles.len() != m - 1 {
            return Err(Error::domain(format!(
                "expected {} quantiles for m = {m}, got {}",
                m.saturating_sub(1),
                quantiles.len()
            )));
        }
        if quantiles.iter().any(|q| !q.is_finite()) {
            return Err(Error::domain("quantiles must be finite"));
        }
        quantiles.sort_by(f64::total_cmp);
        Ok(PiecewiseCdf {
            m,
            knots: quantiles,
        })
    }

    /// Point mass at `y`, useful as a degenerate reference distribution.
    pub fn point_mass(m: usize, y: f64) -> Result<Self> {
        Self::new(m, vec![y; m.saturating_sub(1)])
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn lower(&self) -> f64 {
        self.knots[0]
    }

    pub fn upper(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    pub fn pieces(&self) -> impl Iterator<Item = Piece> + '_ {
        let w = 1.0 / self.m as f64;
        let first = Piece::Atom {
            at: self.knots[0],
            mass: w,
        };
        let last = Piece::Atom {
            at: self.upper(),
            mass: w,
        };
        let inner = self.knots.windows(2).map(move |s| {
            if s[1] > s[0] {
                Piece::Segment {
                    lo: s[0],
                    hi: s[1],
                    mass: w,
                }
            } else {
                Piece::Atom { at: s[0], mass: w }
            }
        });
        std::iter::once(first)
            .chain(inner)
            .chain(std::iter::once(last))
    }

    /// The deterministic map `u -> Y(x)`.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        check_probability("u", u)?;
        Ok(self.transform(u))
    }

    /// [`quantile`](Self::quantile) without the domain check; `u` in `[0, 1)`.
    #[inline]
    pub fn transform(&self, u: f64) -> f64 {
        let mf = self.m as f64;
        let mut j = (u * mf).floor() as i64;
        // Pin j so that j/m <= u < (j+1)/m with the same rounding as the grid.
        if j > 0 && j as f64 / mf > u {
            j -= 1;
        } else if ((j + 1) as f64 / mf) <= u {
            j += 1;
        }
        if j < 1 {
            self.knots[0]
        } else if j as usize >= self.m - 1 {
            self.knots[self.m - 2]
        } else {
            let j = j as usize;
            let lo = self.knots[j - 1];
            lo + mf * (u - j as f64 / mf) * (self.knots[j] - lo)
        }
    }

    /// `P(Y <= y)`.
    pub fn cdf(&self, y: f64) -> f64 {
        // Number of knots <= y.
        let c = self.knots.partition_point(|&q| q <= y);
        self.cdf_from(c, y)
    }

    /// `P(Y < y)`, the left limit of the CDF.
    pub fn cdf_left(&self, y: f64) -> f64 {
        let c = self.knots.partition_point(|&q| q < y);
        self.cdf_from(c, y)
    }

    /// With `c` knots counted below `y`, the atom at `Q_1` and the `c - 1`
    /// segments ending at or below `y` contribute `c/m`; the segment
    /// straddling `y` adds its linear share.
    fn cdf_from(&self, c: usize, y: f64) -> f64 {
        if c == 0 {
            return 0.0;
        }
        if c == self.knots.len() {
            return 1.0;
        }
        let (lo, hi) = (self.knots[c - 1], self.knots[c]);
        let frac = ((y - lo) / (hi - lo)).clamp(0.0, 1.0);
        (c as f64 + frac) / self.m as f64
    }

    pub fn sample(&self, k: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, 0);
        self.sample_with(&mut rng, k)
    }

    pub fn sample_with(&self, rng: &mut Rng, k: usize) -> Vec<f64> {
        (0..k).map(|_| self.transform(rng::unit_f64(rng))).collect()
    }

    pub fn mean(&self) -> f64 {
        self.pieces()
            .map(|p| match p {
                Piece::Atom { at, mass } => at * mass,
                Piece::Segment { lo, hi, mass } => 0.5 * (lo + hi) * mass,
            })
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.pieces()
            .map(|p| match p {
                Piece::Atom { at, mass } => (at - mu).powi(2) * mass,
                Piece::Segment { lo, hi, mass } => {
                    let (a, b) = (lo - mu, hi - mu);
                    mass * (a * a + a * b + b * b) / 3.0
                }
            })
            .sum()
    }
}

const CACHE_CAPACITY: usize = 4096;

fn cache_key(x: &[Covariate]) -> Vec<u8> {
    let mut key = Vec::with_capacity(x.len() * 9);
    for v in x {
        match v {
            Covariate::Level(l) => {
                key.push(0);
                key.extend_from_slice(&l.to_le_bytes());
            }
            Covariate::Value(f) => {
                key.push(1);
                key.extend_from_slice(&f.to_bits().to_le_bytes());
            }
        }
    }
    key
}

/// Conditional sampler over a fitted quantile model. The rearranged
/// quantile vector of each covariate is computed once and cached by the
/// covariate's exact bytes.
pub struct ConditionalSampler<M> {
    model: M,
    cache: RwLock<HashMap<Vec<u8>, Arc<PiecewiseCdf>>>,
}

impl<M: QuantileModel> ConditionalSampler<M> {
    pub fn new(model: M) -> Self {
        ConditionalSampler {
            model,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn into_model(self) -> M {
        self.model
    }

    pub fn curve(&self, x: &[Covariate]) -> Result<Arc<PiecewiseCdf>> {
        let key = cache_key(x);
        if let Some(c) = self.cache.read().expect("sampler cache poisoned").get(&key) {
            return Ok(Arc::clone(c));
        }
        let curve = Arc::new(PiecewiseCdf::new(
            self.model.grid().m(),
            self.model.predict_raw(x)?,
        )?);
        let mut cache = self.cache.write().expect("sampler cache poisoned");
        if cache.len() >= CACHE_CAPACITY {
            cache.clear();
        }
        cache.insert(key, Arc::clone(&curve));
        Ok(curve)
    }

    pub fn sample(&self, x: &[Covariate], k: usize, seed: u64) -> Result<Vec<f64>> {
        self.sample_stream(x, k, seed, 0)
    }

    /// Draws from ChaCha stream `stream` of `seed`; distinct streams are
    /// independent, so parallel workers use one stream each.
    pub fn sample_stream(
        &self,
        x: &[Covariate],
        k: usize,
        seed: u64,
        stream: u64,
    ) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(Error::domain("sample count must be at least 1"));
        }
        let curve = self.curve(x)?;
        Ok(curve.sample_with(&mut rng::stream(seed, stream), k))
    }

    pub fn cdf_eval(&self, x: &[Covariate], y: f64) -> Result<f64> {
        Ok(self.curve(x)?.cdf(y))
    }

    pub fn quantile_fn(&self, x: &[Covariate], u: f64) -> Result<f64> {
        self.curve(x)?.quantile(u)
    }
}

/// Provenance written above exported samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub model_id: String,
    pub x_hash: String,
    pub seed: u64,
    pub k: usize,
    pub rng: String,
}

pub fn covariate_hash(x: &[Covariate]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(&Sha256::digest(cache_key(x))[..8])
}

/// Single-column CSV preceded by `# key=value` metadata lines.
pub fn write_samples_csv<W: Write>(
    mut out: W,
    meta: &SampleMetadata,
    samples: &[f64],
) -> Result<()> {
    writeln!(out, "# model_id={}", meta.model_id)?;
    writeln!(out, "# x_hash={}", meta.x_hash)?;
    writeln!(out, "# seed={}", meta.seed)?;
    writeln!(out, "# k={}", meta.k)?;
    writeln!(out, "# rng={}", meta.rng)?;
    writeln!(out, "y")?;
    for s in samples {
        writeln!(out, "{s}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve() -> PiecewiseCdf {
        PiecewiseCdf::new(5, vec![1.0, 2.0, 4.0, 7.0]).unwrap()
    }

    #[test]
    fn transform_hits_knots_and_midpoints() {
        let c = curve();
        for j in 1..=4 {
            let u = j as f64 / 5.0;
            assert_eq!(c.transform(u), c.knots()[j - 1]);
        }
        assert!((c.transform(0.3) - 1.5).abs() < 1e-12);
        assert!((c.transform(0.5) - 3.0).abs() < 1e-12);
        assert_eq!(c.transform(0.0), 1.0);
        assert_eq!(c.transform(0.19), 1.0);
        assert_eq!(c.transform(0.9999), 7.0);
        assert!(c.quantile(0.0).is_err());
        assert!(c.quantile(1.0).is_err());
    }

    #[test]
    fn cdf_atoms_and_limits() {
        let c = curve();
        assert_eq!(c.cdf(0.999), 0.0);
        assert_eq!(c.cdf(1.0), 0.2);
        assert_eq!(c.cdf_left(1.0), 0.0);
        assert!((c.cdf(1.5) - 0.3).abs() < 1e-15);
        assert!((c.cdf(6.99) - (0.6 + 0.2 * 2.99 / 3.0)).abs() < 1e-12);
        assert_eq!(c.cdf(7.0), 1.0);
        assert_eq!(c.cdf_left(7.0), 0.8);
        assert_eq!(c.cdf(100.0), 1.0);
    }

    #[test]
    fn flat_segments_jump() {
        let c = PiecewiseCdf::new(5, vec![1.0, 3.0, 3.0, 4.0]).unwrap();
        assert_eq!(c.cdf_left(3.0), 0.4);
        assert_eq!(c.cdf(3.0), 0.6);
        assert_eq!(c.transform(0.5), 3.0);
        let total: f64 = c
            .pieces()
            .map(|p| match p {
                Piece::Atom { mass, .. } | Piece::Segment { mass, .. } => mass,
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rearranges_raw_quantiles() {
        let c = PiecewiseCdf::new(4, vec![3.0, 1.0, 2.0]).unwrap();
        assert_eq!(c.knots(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn moments_match_quadrature() {
        let c = curve();
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for i in 0..n {
            let y = c.transform((i as f64 + 0.5) / n as f64);
            s += y;
            s2 += y * y;
        }
        let mean = s / n as f64;
        assert!((c.mean() - mean).abs() < 1e-6);
        assert!((c.variance() - (s2 / n as f64 - mean * mean)).abs() < 1e-5);
    }

    #[test]
    fn sample_csv_has_metadata_header() {
        let meta = SampleMetadata {
            model_id: "abc".into(),
            x_hash: "00ff".into(),
            seed: 7,
            k: 2,
            rng: rng::RNG_ALGORITHM.into(),
        };
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &meta, &[1.0, 2.5]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("# model_id=abc\n"));
        assert!(s.ends_with("y\n1\n2.5\n"));
    }
}
