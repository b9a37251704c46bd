//! Exact mutual information of small discrete joints, and a sampling harness
//! that measures the InfoNCE bound `log k - L_k` against it.

use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::infonce;
use crate::math::Matrix;
use crate::rng::Rng;

pub const PRESETS: [&str; 3] = ["independent", "diagonal", "correlated"];
const CORRELATED_DIAGONAL: f64 = 0.4325;

/// Critic table with standard normal entries.
pub fn random_critic(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Joint distribution `p(x, y)` over a `|X| × |Y|` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    probs: Matrix,
}

impl DiscreteJoint {
    pub fn new(probs: Matrix) -> Result<Self> {
        if probs.rows() == 0 || probs.cols() == 0 {
            return Err(Error::Invalid("joint must be non-empty".into()));
        }
        if probs.as_slice().iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Invalid("joint probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.as_slice().iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("joint sums to {total}, not 1")));
        }
        Ok(DiscreteJoint { probs })
    }

    /// Outer product of two marginals.
    pub fn independent(px: &[f64], py: &[f64]) -> Result<Self> {
        let data = px.iter().flat_map(|a| py.iter().map(move |b| a * b)).collect();
        Self::new(Matrix::from_vec(px.len(), py.len(), data)?)
    }

    /// Built-in joints: `independent` (4×4 product, MI 0), `diagonal` (2×2,
    /// MI ln 2) and `correlated` (2×2 noisy diagonal, MI ≈ 0.3).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "independent" => Self::independent(&[0.1, 0.2, 0.3, 0.4], &[0.4, 0.3, 0.2, 0.1]),
            "diagonal" => Self::new(Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.5]])?),
            "correlated" => {
                let a = CORRELATED_DIAGONAL;
                Self::new(Matrix::from_rows(&[[a, 0.5 - a], [0.5 - a, a]])?)
            }
            other => Err(Error::Invalid(format!(
                "unknown joint {other:?}; expected independent, diagonal or correlated"
            ))),
        }
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        self.probs.iter_rows().map(|r| r.iter().sum()).collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        self.probs.sum_rows()
    }

    /// Log density ratio `log p(x,y) / (p(x) p(y))`; `-inf` where `p(x,y) = 0`.
    pub fn log_density_ratio(&self) -> Matrix {
        let (px, py) = (self.marginal_x(), self.marginal_y());
        let mut out = Matrix::zeros(self.probs.rows(), self.probs.cols());
        for x in 0..px.len() {
            for y in 0..py.len() {
                let p = self.probs.get(x, y);
                let v = if p > 0.0 {
                    (p / (px[x] * py[y])).ln()
                } else {
                    f64::NEG_INFINITY
                };
                out.set(x, y, v);
            }
        }
        out
    }

    /// Draws one `(x, y)` by inverse CDF over the row-major cells.
    pub fn sample(&self, rng: &mut Rng) -> (usize, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let cols = self.probs.cols();
        for (i, p) in self.probs.as_slice().iter().enumerate() {
            acc += p;
            if u < acc {
                return (i / cols, i % cols);
            }
        }
        // rounding left u above the final cumulative sum; take the last nonzero cell
        let last = self
            .probs
            .as_slice()
            .iter()
            .rposition(|&p| p > 0.0)
            .expect("joint has mass");
        (last / cols, last % cols)
    }
}

/// `Σ p(x,y) log(p(x,y) / (p(x) p(y)))` in nats, with `0 log 0 = 0`. Rounding
/// below zero is clamped.
pub fn exact_mi(joint: &DiscreteJoint) -> f64 {
    let (px, py) = (joint.marginal_x(), joint.marginal_y());
    let mut mi = 0.0;
    for (x, row) in joint.probs().iter_rows().enumerate() {
        for (y, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (px[x] * py[y])).ln();
            }
        }
    }
    mi.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundEstimate {
    pub exact_mi: f64,
    /// Mean over batches of `log k - L_k`.
    pub mean_bound: f64,
    pub std_err: f64,
    pub batches: usize,
    pub k: usize,
}

impl BoundEstimate {
    /// How many standard errors the bound estimate sits above the true MI.
    pub fn excess_in_se(&self) -> f64 {
        (self.mean_bound - self.exact_mi) / self.std_err.max(f64::MIN_POSITIVE)
    }
}

/// Samples `batches` batches of `k` pairs from `joint` and scores each with the
/// fixed `critic[x][y]`. In a batch every pair is a positive once, with the
/// other `k - 1` x's (drawn from `p(x)`) as its negatives.
pub fn infonce_bound(joint: &DiscreteJoint, critic: &Matrix, k: usize, batches: usize, rng: &mut Rng) -> Result<BoundEstimate> {
    if critic.shape() != joint.probs().shape() {
        return Err(Error::shape(
            "infonce_bound critic",
            format!("{:?}", joint.probs().shape()),
            format!("{:?}", critic.shape()),
        ));
    }
    if k < 2 || batches < 2 {
        return Err(Error::Invalid("need k >= 2 and at least 2 batches".into()));
    }
    let mut values = Vec::with_capacity(batches);
    let mut negs = Vec::with_capacity(k - 1);
    for _ in 0..batches {
        let pairs: Vec<(usize, usize)> = (0..k).map(|_| joint.sample(rng)).collect();
        let mut loss = 0.0;
        for (i, &(x, y)) in pairs.iter().enumerate() {
            negs.clear();
            negs.extend(pairs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &(xj, _))| critic.get(xj, y)));
            loss += infonce(critic.get(x, y), &negs);
        }
        values.push((k as f64).ln() - loss / k as f64);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(BoundEstimate {
        exact_mi: exact_mi(joint),
        mean_bound: mean,
        std_err: (var / n).sqrt(),
        batches,
        k,
    })
}
