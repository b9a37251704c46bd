//! One-hidden-layer MLP: `Linear → Norm → ReLU → Linear`, with a hand-written
//! backward pass.
//!
//! The hidden width always equals the input width. The normalization layer is
//! either batch normalization or a plain per-feature affine map; the latter
//! keeps examples independent, which the finite-difference suites rely on.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    Batch,
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub norm_gain: Vec<f64>,
    pub norm_bias: Vec<f64>,
    pub norm_running_mean: Vec<f64>,
    pub norm_running_var: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub mode: Mode,
    pub norm: NormMode,
}

/// Intermediates of one forward call, consumed by [`MlpParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Matrix,
    xhat: Matrix,
    act: Matrix,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    mode: Mode,
    norm: NormMode,
    fingerprint: u64,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.x.rows()
    }

    /// Normalized pre-activations (before gain/bias). In affine mode these are the
    /// raw first-layer outputs.
    pub fn normalized(&self) -> &Matrix {
        &self.xhat
    }

    pub fn hidden(&self) -> &Matrix {
        &self.act
    }
}

/// Gradients of the trainable tensors, laid out like [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub norm_gain: Vec<f64>,
    pub norm_bias: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases, unit gain.
    pub fn init(in_dim: usize, out_dim: usize, norm: NormMode, rng: &mut Rng) -> Self {
        let hidden = in_dim;
        let mut glorot = |fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            Matrix::from_vec(fan_in, fan_out, data).expect("sized by construction")
        };
        let w1 = glorot(in_dim, hidden);
        let w2 = glorot(hidden, out_dim);
        MlpParams {
            w1,
            b1: vec![0.0; hidden],
            norm_gain: vec![1.0; hidden],
            norm_bias: vec![0.0; hidden],
            norm_running_mean: vec![0.0; hidden],
            norm_running_var: vec![1.0; hidden],
            w2,
            b2: vec![0.0; out_dim],
            mode: Mode::Train,
            norm,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, norm: NormMode) -> Self {
        MlpParams {
            w1: Matrix::zeros(in_dim, in_dim),
            b1: vec![0.0; in_dim],
            norm_gain: vec![1.0; in_dim],
            norm_bias: vec![0.0; in_dim],
            norm_running_mean: vec![0.0; in_dim],
            norm_running_var: vec![1.0; in_dim],
            w2: Matrix::zeros(in_dim, out_dim),
            b2: vec![0.0; out_dim],
            mode: Mode::Train,
            norm,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (i, h, o) = (self.in_dim(), self.hidden_dim(), self.out_dim());
        if h != i {
            return Err(Error::shape("MlpParams", format!("hidden dim {i}"), h));
        }
        for (name, len, want) in [
            ("b1", self.b1.len(), h),
            ("norm_gain", self.norm_gain.len(), h),
            ("norm_bias", self.norm_bias.len(), h),
            ("norm_running_mean", self.norm_running_mean.len(), h),
            ("norm_running_var", self.norm_running_var.len(), h),
            ("w2 rows", self.w2.rows(), h),
            ("b2", self.b2.len(), o),
        ] {
            if len != want {
                return Err(Error::shape("MlpParams", format!("{name} of {want}"), len));
            }
        }
        if self.norm_running_var.iter().any(|&v| v <= 0.0) {
            return Err(Error::Invalid("running variance must be positive".into()));
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let tensors: [&[f64]; 8] = [
            self.w1.as_slice(),
            &self.b1,
            &self.norm_gain,
            &self.norm_bias,
            &self.norm_running_mean,
            &self.norm_running_var,
            self.w2.as_slice(),
            &self.b2,
        ];
        for t in tensors {
            for x in t {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("mlp_forward", self.in_dim(), x.cols()));
        }
        let batch = x.rows();
        let train_bn = self.mode == Mode::Train && self.norm == NormMode::Batch;
        if train_bn && batch < 2 {
            return Err(Error::DegenerateBatch(batch));
        }
        let hidden = self.hidden_dim();

        let mut pre = x.matmul(&self.w1)?;
        pre.add_row_vector(&self.b1)?;

        let (xhat, inv_std, batch_mean, batch_var) = match (self.norm, self.mode) {
            (NormMode::Affine, _) => (pre, Vec::new(), Vec::new(), Vec::new()),
            (NormMode::Batch, Mode::Train) => {
                let n = batch as f64;
                let mean: Vec<f64> = pre.sum_rows().into_iter().map(|s| s / n).collect();
                let mut var = vec![0.0; hidden];
                for row in pre.iter_rows() {
                    for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                        *v += (x - m) * (x - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = pre;
                for r in 0..batch {
                    for ((x, m), s) in xhat.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                        *x = (*x - m) * s;
                    }
                }
                (xhat, inv_std, mean, var)
            }
            (NormMode::Batch, Mode::Eval) => {
                let inv_std: Vec<f64> = self
                    .norm_running_var
                    .iter()
                    .map(|v| 1.0 / (v + BN_EPS).sqrt())
                    .collect();
                let mut xhat = pre;
                for r in 0..batch {
                    for ((x, m), s) in xhat
                        .row_mut(r)
                        .iter_mut()
                        .zip(&self.norm_running_mean)
                        .zip(&inv_std)
                    {
                        *x = (*x - m) * s;
                    }
                }
                (xhat, inv_std, Vec::new(), Vec::new())
            }
        };

        let mut act = xhat.clone();
        for r in 0..batch {
            for ((a, g), b) in act
                .row_mut(r)
                .iter_mut()
                .zip(&self.norm_gain)
                .zip(&self.norm_bias)
            {
                *a = (*a * g + b).max(0.0);
            }
        }

        let mut y = act.matmul(&self.w2)?;
        y.add_row_vector(&self.b2)?;

        let cache = ForwardCache {
            x: x.clone(),
            xhat,
            act,
            inv_std,
            batch_mean,
            batch_var,
            mode: self.mode,
            norm: self.norm,
            fingerprint: self.fingerprint(),
        };
        Ok((y, cache))
    }

    pub fn backward(&self, cache: &ForwardCache, grad_y: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if cache.fingerprint != self.fingerprint()
            || cache.mode != self.mode
            || cache.norm != self.norm
        {
            return Err(Error::Cache(
                "parameters or mode changed since the forward pass".into(),
            ));
        }
        if grad_y.shape() != (cache.x.rows(), self.out_dim()) {
            return Err(Error::shape(
                "mlp_backward",
                format!("({}, {})", cache.x.rows(), self.out_dim()),
                format!("{:?}", grad_y.shape()),
            ));
        }
        let batch = cache.x.rows();
        let hidden = self.hidden_dim();

        let b2 = grad_y.sum_rows();
        let w2 = cache.act.t_matmul(grad_y)?;
        let mut dz = grad_y.matmul_t(&self.w2)?;
        // ReLU gate, then split into gain/bias and the normalized input
        let mut norm_gain = vec![0.0; hidden];
        let mut norm_bias = vec![0.0; hidden];
        for r in 0..batch {
            let act = cache.act.row(r);
            let xhat = cache.xhat.row(r);
            for (c, d) in dz.row_mut(r).iter_mut().enumerate() {
                if act[c] <= 0.0 {
                    *d = 0.0;
                }
                norm_gain[c] += *d * xhat[c];
                norm_bias[c] += *d;
                *d *= self.norm_gain[c];
            }
        }
        let mut dpre = dz;
        match (cache.norm, cache.mode) {
            (NormMode::Affine, _) => {}
            (NormMode::Batch, Mode::Eval) => {
                for r in 0..batch {
                    for (d, s) in dpre.row_mut(r).iter_mut().zip(&cache.inv_std) {
                        *d *= s;
                    }
                }
            }
            (NormMode::Batch, Mode::Train) => {
                let n = batch as f64;
                let sum_d = dpre.sum_rows();
                let mut sum_dx = vec![0.0; hidden];
                for r in 0..batch {
                    for ((acc, d), x) in sum_dx.iter_mut().zip(dpre.row(r)).zip(cache.xhat.row(r)) {
                        *acc += d * x;
                    }
                }
                for r in 0..batch {
                    let xhat = cache.xhat.row(r);
                    for (c, d) in dpre.row_mut(r).iter_mut().enumerate() {
                        *d = cache.inv_std[c] / n * (n * *d - sum_d[c] - xhat[c] * sum_dx[c]);
                    }
                }
            }
        }
        let b1 = dpre.sum_rows();
        let w1 = cache.x.t_matmul(&dpre)?;
        let grad_x = dpre.matmul_t(&self.w1)?;
        Ok((
            MlpGrads {
                w1,
                b1,
                norm_gain,
                norm_bias,
                w2,
                b2,
            },
            grad_x,
        ))
    }

    /// Folds the batch statistics of a train-mode forward pass into the running
    /// estimates (momentum 0.1, unbiased variance). No-op in affine mode.
    pub fn absorb_batch_stats(&mut self, cache: &ForwardCache) {
        if cache.norm != NormMode::Batch || cache.mode != Mode::Train {
            return;
        }
        let n = cache.batch_size() as f64;
        let unbias = n / (n - 1.0);
        for i in 0..self.hidden_dim() {
            self.norm_running_mean[i] =
                (1.0 - BN_MOMENTUM) * self.norm_running_mean[i] + BN_MOMENTUM * cache.batch_mean[i];
            self.norm_running_var[i] = (1.0 - BN_MOMENTUM) * self.norm_running_var[i]
                + BN_MOMENTUM * cache.batch_var[i] * unbias;
        }
    }

    /// Trainable tensors in the canonical order `w1, b1, gain, bias, w2, b2`.
    pub fn trainable(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            &self.b1,
            &self.norm_gain,
            &self.norm_bias,
            self.w2.as_slice(),
            &self.b2,
        ]
    }

    pub fn trainable_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            &mut self.norm_gain,
            &mut self.norm_bias,
            self.w2.as_mut_slice(),
            &mut self.b2,
        ]
    }

    /// Every stored tensor with its checkpoint name suffix and shape.
    pub(crate) fn named_tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        vec![
            ("w1", vec![self.w1.rows(), self.w1.cols()], self.w1.as_slice()),
            ("b1", vec![self.b1.len()], &self.b1),
            ("norm_gain", vec![self.norm_gain.len()], &self.norm_gain),
            ("norm_bias", vec![self.norm_bias.len()], &self.norm_bias),
            ("norm_running_mean", vec![self.norm_running_mean.len()], &self.norm_running_mean),
            ("norm_running_var", vec![self.norm_running_var.len()], &self.norm_running_var),
            ("w2", vec![self.w2.rows(), self.w2.cols()], self.w2.as_slice()),
            ("b2", vec![self.b2.len()], &self.b2),
        ]
    }
}

impl MlpGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        MlpGrads {
            w1: Matrix::zeros(p.w1.rows(), p.w1.cols()),
            b1: vec![0.0; p.b1.len()],
            norm_gain: vec![0.0; p.norm_gain.len()],
            norm_bias: vec![0.0; p.norm_bias.len()],
            w2: Matrix::zeros(p.w2.rows(), p.w2.cols()),
            b2: vec![0.0; p.b2.len()],
        }
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            &self.b1,
            &self.norm_gain,
            &self.norm_bias,
            self.w2.as_slice(),
            &self.b2,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            &mut self.norm_gain,
            &mut self.norm_bias,
            self.w2.as_mut_slice(),
            &mut self.b2,
        ]
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.slices_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradcheck::{finite_diff_grad, max_relative_error};
    use crate::rng::substream;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn random_params(i: usize, o: usize, norm: NormMode, rng: &mut Rng) -> MlpParams {
        let mut p = MlpParams::init(i, o, norm, rng);
        for t in p.trainable_mut() {
            t.iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
        }
        p
    }

    /// Straight-line evaluation for a single row, no matrix kernels.
    fn reference_forward(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let h = p.hidden_dim();
        let mut act = vec![0.0; h];
        for c in 0..h {
            let mut s = p.b1[c];
            for (r, xr) in x.iter().enumerate() {
                s += xr * p.w1.get(r, c);
            }
            let xhat = match p.norm {
                NormMode::Affine => s,
                NormMode::Batch => {
                    (s - p.norm_running_mean[c]) / (p.norm_running_var[c] + BN_EPS).sqrt()
                }
            };
            act[c] = (p.norm_gain[c] * xhat + p.norm_bias[c]).max(0.0);
        }
        (0..p.out_dim())
            .map(|o| p.b2[o] + (0..h).map(|c| act[c] * p.w2.get(c, o)).sum::<f64>())
            .collect()
    }

    #[test]
    fn zero_map_gives_zero_output() {
        let p = MlpParams::zeros(3, 2, NormMode::Affine);
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]).unwrap();
        let (y, _) = p.forward(&x).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_identity_like_composition() {
        // eval mode, running mean 0, var 1 => xhat = pre / sqrt(1 + 1e-5)
        let mut p = MlpParams::zeros(3, 3, NormMode::Batch);
        p.mode = Mode::Eval;
        for i in 0..3 {
            p.w1.set(i, i, 1.0);
            p.w2.set(i, i, 2.0);
        }
        p.b1 = vec![0.5, 0.0, 1.0];
        p.b2 = vec![0.0, -1.0, 0.0];
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let (y, _) = p.forward(&x).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        let expected = [2.0 * 1.5 * s, 2.0 * 2.0 * s - 1.0, 2.0 * 4.0 * s];
        for (a, b) in y.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn matches_straight_line_reimplementation() {
        let mut rng = substream(11, "mlp-ref");
        for norm in [NormMode::Affine, NormMode::Batch] {
            let mut p = random_params(5, 4, norm, &mut rng);
            p.mode = Mode::Eval;
            p.norm_running_mean = (0..5).map(|_| rng.random_range(-0.5..0.5)).collect();
            p.norm_running_var = (0..5).map(|_| rng.random_range(0.5..2.0)).collect();
            let x = random_matrix(7, 5, &mut rng);
            let (y, _) = p.forward(&x).unwrap();
            for r in 0..7 {
                let want = reference_forward(&p, x.row(r));
                for (a, b) in y.row(r).iter().zip(want) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_and_degenerate_batch_errors() {
        let p = MlpParams::zeros(3, 2, NormMode::Batch);
        assert!(matches!(p.forward(&Matrix::zeros(2, 4)), Err(Error::Shape { .. })));
        assert!(matches!(p.forward(&Matrix::zeros(1, 3)), Err(Error::DegenerateBatch(1))));
        let mut p = p;
        p.mode = Mode::Eval;
        assert!(p.forward(&Matrix::zeros(1, 3)).is_ok());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = substream(3, "stale");
        let mut p = random_params(3, 2, NormMode::Affine, &mut rng);
        let x = random_matrix(4, 3, &mut rng);
        let (y, cache) = p.forward(&x).unwrap();
        p.w2.set(0, 0, p.w2.get(0, 0) + 1.0);
        assert!(matches!(p.backward(&cache, &y), Err(Error::Cache(_))));
    }

    #[test]
    fn zero_cotangent_and_linearity() {
        let mut rng = substream(5, "lin");
        let p = random_params(4, 3, NormMode::Batch, &mut rng);
        let x = random_matrix(6, 4, &mut rng);
        let (_, cache) = p.forward(&x).unwrap();
        let (g0, gx0) = p.backward(&cache, &Matrix::zeros(6, 3)).unwrap();
        assert!(g0.flatten().iter().all(|&v| v == 0.0));
        assert!(gx0.as_slice().iter().all(|&v| v == 0.0));

        let gy = random_matrix(6, 3, &mut rng);
        let mut gy2 = gy.clone();
        gy2.scale(2.0);
        let (g1, gx1) = p.backward(&cache, &gy).unwrap();
        let (g2, gx2) = p.backward(&cache, &gy2).unwrap();
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        for (a, b) in gx1.as_slice().iter().zip(gx2.as_slice()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    fn check_against_fd(norm: NormMode, seed: u64) {
        let mut rng = substream(seed, "mlp-fd");
        let p = random_params(3, 2, norm, &mut rng);
        let x = random_matrix(5, 3, &mut rng);
        let gy = random_matrix(5, 2, &mut rng);
        let loss = |p: &MlpParams, x: &Matrix| -> f64 {
            let (y, _) = p.forward(x).unwrap();
            y.as_slice().iter().zip(gy.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = p.forward(&x).unwrap();
        let (grads, gx) = p.backward(&cache, &gy).unwrap();

        let flat: Vec<f64> = p.trainable().concat();
        let numeric = finite_diff_grad(
            |theta| {
                let mut q = p.clone();
                let mut off = 0;
                for t in q.trainable_mut() {
                    t.copy_from_slice(&theta[off..off + t.len()]);
                    off += t.len();
                }
                Ok(loss(&q, &x))
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(&grads.flatten(), &numeric.grads, &numeric.nonsmooth);
        assert!(err <= 1e-6, "{norm:?} seed {seed}: param rel err {err}");

        let numeric_x = finite_diff_grad(
            |xs| Ok(loss(&p, &Matrix::from_vec(5, 3, xs.to_vec()).unwrap())),
            x.as_slice(),
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(gx.as_slice(), &numeric_x.grads, &numeric_x.nonsmooth);
        assert!(err <= 1e-6, "{norm:?} seed {seed}: input rel err {err}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..20 {
            check_against_fd(NormMode::Affine, seed);
            check_against_fd(NormMode::Batch, seed);
        }
    }

    #[test]
    fn batch_norm_normalizes_train_batch() {
        let mut rng = substream(9, "bn");
        let p = random_params(6, 2, NormMode::Batch, &mut rng);
        let mut x = random_matrix(32, 6, &mut rng);
        x.scale(50.0);
        let (_, cache) = p.forward(&x).unwrap();
        let xhat = cache.normalized();
        let n = xhat.rows() as f64;
        for c in 0..6 {
            let mean: f64 = (0..xhat.rows()).map(|r| xhat.get(r, c)).sum::<f64>() / n;
            let var: f64 = (0..xhat.rows()).map(|r| (xhat.get(r, c) - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            // eps in the denominator shrinks the variance by var/(var+eps)
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn eval_forward_is_pure_and_batch_independent() {
        let mut rng = substream(4, "eval");
        let mut p = random_params(4, 3, NormMode::Batch, &mut rng);
        let x = random_matrix(8, 4, &mut rng);
        let (_, cache) = p.forward(&x).unwrap();
        p.absorb_batch_stats(&cache);
        p.mode = Mode::Eval;
        let (y1, _) = p.forward(&x).unwrap();
        let (y2, _) = p.forward(&x).unwrap();
        assert_eq!(y1.as_slice(), y2.as_slice());
        let (single, _) = p.forward(&x.select_rows(&[3])).unwrap();
        assert_eq!(single.row(0), y1.row(3));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let p0 = MlpParams::zeros(2, 1, NormMode::Batch);
        let mut p = p0.clone();
        p.b1 = vec![1.0, 3.0];
        let x = Matrix::zeros(4, 2);
        let (_, cache) = p.forward(&x).unwrap();
        p.absorb_batch_stats(&cache);
        assert!((p.norm_running_mean[0] - 0.1).abs() < 1e-15);
        assert!((p.norm_running_mean[1] - 0.3).abs() < 1e-15);
        assert!((p.norm_running_var[0] - 0.9).abs() < 1e-15);
    }
}
