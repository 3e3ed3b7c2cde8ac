use qrgmm::datagen::{Covariate, Dataset, Field, FieldSchema};
use qrgmm::quantreg::total_pinball;
use qrgmm::rng;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Minimum pinball loss over all basic solutions: every `q`-subset of rows
/// interpolated exactly. For a full-rank design the linear-programming
/// optimum is attained at one of them.
pub fn vertex_oracle(x: &[f64], y: &[f64], q: usize, tau: f64) -> f64 {
    let n = y.len();
    let mut best = f64::INFINITY;
    let mut idx: Vec<usize> = (0..q).collect();
    loop {
        let mut a = vec![0.0; q * q];
        let mut b = vec![0.0; q];
        for (r, &i) in idx.iter().enumerate() {
            a[r * q..(r + 1) * q].copy_from_slice(&x[i * q..(i + 1) * q]);
            b[r] = y[i];
        }
        if let Some(beta) = solve_dense(a, b, q) {
            best = best.min(total_pinball(x, y, q, &beta, tau));
        }
        // Next combination.
        let mut k = q;
        loop {
            if k == 0 {
                return best;
            }
            k -= 1;
            if idx[k] < n - q + k {
                idx[k] += 1;
                for j in k + 1..q {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

pub fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, q: usize) -> Option<Vec<f64>> {
    for c in 0..q {
        let p = (c..q).max_by(|&i, &j| a[i * q + c].abs().total_cmp(&a[j * q + c].abs()))?;
        if a[p * q + c].abs() < 1e-10 {
            return None;
        }
        for k in 0..q {
            a.swap(c * q + k, p * q + k);
        }
        b.swap(c, p);
        for r in 0..q {
            if r != c {
                let f = a[r * q + c] / a[c * q + c];
                for k in 0..q {
                    a[r * q + k] -= f * a[c * q + k];
                }
                b[r] -= f * b[c];
            }
        }
    }
    Some((0..q).map(|i| b[i] / a[i * q + i]).collect())
}

/// Random n = 50 instance with at most three one-hot columns.
pub fn tiny_instance(seed: u64, shape: usize) -> Dataset {
    let mut r = rng::seeded(seed);
    let n = 50;
    let (schema, width) = match shape {
        0 => (
            FieldSchema::new(vec![Field::categorical_n("g", 2)]).unwrap(),
            1,
        ),
        1 => (
            FieldSchema::new(vec![Field::categorical_n("g", 3)]).unwrap(),
            1,
        ),
        _ => (
            FieldSchema::new(vec![Field::categorical_n("g", 2), Field::continuous("x")]).unwrap(),
            2,
        ),
    };
    let levels = if shape == 1 { 3 } else { 2 };
    let mut cov = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n {
        let g = r.random_range(0..levels);
        cov.push(Covariate::Level(g));
        let mut v = 1.0 + g as f64;
        if width == 2 {
            let x: f64 = r.random::<f64>() * 3.0;
            cov.push(Covariate::Value(x));
            v += 2.0 * x;
        }
        let e: f64 = StandardNormal.sample(&mut r);
        y.push(v + e * (1.0 + g as f64));
    }
    Dataset::new(schema, cov, y).unwrap()
}
