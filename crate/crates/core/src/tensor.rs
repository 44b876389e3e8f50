//! Dense tensors and the differentiable primitives the model is built from.
//!
//! There is no general autodiff graph: every composite layer in this crate
//! hand-writes its backward pass out of these pieces, and [`grad_check`] is
//! the finite-difference oracle that keeps the analytic gradients honest.
//! All reductions run in a fixed left-to-right order so results are
//! reproducible bit for bit.

use num_traits::Float;

use crate::error::{Error, Result};

/// Numeric precision tag for serialized data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Single,
    Double,
}

/// Element type of a [`Tensor`]: `f32` for training and serving, `f64` for
/// gradient checks.
pub trait Scalar:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::Single;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::Double;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Dense row-major numeric array. The single value carrier for all numerics
/// in the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                left: format!("{:?}", shape),
                right: format!("len {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut() -> E) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| f()).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn fill(&mut self, v: E) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor<E>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: E, other: &Tensor<E>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * *b;
        }
    }

    pub fn scale(&mut self, s: E) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn max_assign(&mut self, other: &Tensor<E>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = a.max(*b);
        }
    }

    pub fn frob_norm(&self) -> E {
        let mut acc = E::zero();
        for v in &self.data {
            acc += *v * *v;
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> E {
        debug_assert_eq!(self.shape, other.shape);
        let mut m = E::zero();
        for (a, b) in self.data.iter().zip(&other.data) {
            m = m.max((*a - *b).abs());
        }
        m
    }
}

/// A tensor paired with its accumulated gradient.
///
/// The gradient is additive across backward calls until explicitly zeroed;
/// only the optimizer and gradient accumulation mutate it.
#[derive(Debug, Clone)]
pub struct Parameter<E> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
}

impl<E: Scalar> Parameter<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        let grad = value.zeros_like();
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(E::zero());
    }
}

// ---------------------------------------------------------------------------
// Scalar nonlinearities shared by the layer math.
// ---------------------------------------------------------------------------

pub fn sigmoid<E: Scalar>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

/// Numerically stable ln(1 + e^x).
pub fn softplus<E: Scalar>(x: E) -> E {
    x.max(E::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn silu<E: Scalar>(x: E) -> E {
    x * sigmoid(x)
}

/// d silu(x)/dx = sigma(x) * (1 + x * (1 - sigma(x)))
pub fn silu_deriv<E: Scalar>(x: E) -> E {
    let s = sigmoid(x);
    s * (E::one() + x * (E::one() - s))
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// Standard matrix product of `a: [m,k]` and `b: [k,n]`.
pub fn matmul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(Error::ShapeMismatch {
            left: format!("{:?}", ash),
            right: format!("{:?}", bsh),
        });
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let mut out = Tensor::zeros(&[m, n]);
    let od = out.data_mut();
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data()[kk * n..(kk + 1) * n];
            let orow = &mut od[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Gradients of `c = a . b` given `dc`: `da = dc . b^T`, `db = a^T . dc`.
pub fn matmul_backward<E: Scalar>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    dc: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    debug_assert_eq!(dc.shape(), &[m, n]);
    let mut da = Tensor::zeros(&[m, k]);
    let mut db = Tensor::zeros(&[k, n]);
    for i in 0..m {
        let dcrow = &dc.data()[i * n..(i + 1) * n];
        let darow = &mut da.data_mut()[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b.data()[kk * n..(kk + 1) * n];
            let mut acc = E::zero();
            for (dv, bv) in dcrow.iter().zip(brow) {
                acc += *dv * *bv;
            }
            darow[kk] = acc;
        }
        let arow = &a.data()[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let dbrow = &mut db.data_mut()[kk * n..(kk + 1) * n];
            for (dbv, &dv) in dbrow.iter_mut().zip(dcrow) {
                *dbv += av * dv;
            }
        }
    }
    Ok((da, db))
}

// ---------------------------------------------------------------------------
// rmsnorm
// ---------------------------------------------------------------------------

/// `y = x / sqrt(mean(x^2) + eps) * gain`, applied along the last dimension.
pub fn rmsnorm<E: Scalar>(x: &Tensor<E>, gain: &[E], eps: E) -> Tensor<E> {
    let d = *x.shape().last().expect("rmsnorm on 0-d tensor");
    debug_assert_eq!(gain.len(), d);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        rmsnorm_row(row, gain, eps);
    }
    out
}

/// In-place rmsnorm of one vector.
pub fn rmsnorm_row<E: Scalar>(row: &mut [E], gain: &[E], eps: E) {
    let d = E::from_f64(row.len() as f64);
    let mut ms = E::zero();
    for v in row.iter() {
        ms += *v * *v;
    }
    ms = ms / d;
    let r = E::one() / (ms + eps).sqrt();
    for (v, g) in row.iter_mut().zip(gain) {
        *v = *v * r * *g;
    }
}

/// Backward of one rmsnorm row. Accumulates into `dx` and `dgain`.
pub fn rmsnorm_row_backward<E: Scalar>(
    x: &[E],
    gain: &[E],
    eps: E,
    dy: &[E],
    dx: &mut [E],
    dgain: &mut [E],
) {
    let d = E::from_f64(x.len() as f64);
    let mut ms = E::zero();
    for v in x {
        ms += *v * *v;
    }
    ms = ms / d;
    let r = E::one() / (ms + eps).sqrt();
    // s = sum_i dy_i * gain_i * x_i
    let mut s = E::zero();
    for i in 0..x.len() {
        s += dy[i] * gain[i] * x[i];
    }
    let r3_over_d = r * r * r / d;
    for i in 0..x.len() {
        dx[i] += dy[i] * gain[i] * r - x[i] * r3_over_d * s;
        dgain[i] += dy[i] * x[i] * r;
    }
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

/// Mean of `-log softmax(logits)[target]` over masked positions.
///
/// `logits` is `[T, V]`; `mask` selects the positions that contribute.
pub fn cross_entropy<E: Scalar>(logits: &Tensor<E>, targets: &[usize], mask: &[bool]) -> Result<E> {
    Ok(cross_entropy_with_grad(logits, targets, mask)?.0)
}

/// Like [`cross_entropy`] but also returns `dloss/dlogits`:
/// `(softmax - onehot) / count` at masked positions, zero elsewhere.
pub fn cross_entropy_with_grad<E: Scalar>(
    logits: &Tensor<E>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(E, Tensor<E>)> {
    let sh = logits.shape();
    if sh.len() != 2 || targets.len() != sh[0] || mask.len() != sh[0] {
        return Err(Error::ShapeMismatch {
            left: format!("logits {:?}", sh),
            right: format!("targets {} mask {}", targets.len(), mask.len()),
        });
    }
    let (t_len, v) = (sh[0], sh[1]);
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::InvalidExample("loss mask selects no positions".into()));
    }
    for (t, &tok) in targets.iter().enumerate() {
        if mask[t] && tok >= v {
            return Err(Error::Vocab(format!("target id {tok} >= vocab {v}")));
        }
    }
    let inv_count = E::one() / E::from_f64(count as f64);
    let mut grad = Tensor::zeros(&[t_len, v]);
    let mut loss = E::zero();
    for t in 0..t_len {
        if !mask[t] {
            continue;
        }
        let row = &logits.data()[t * v..(t + 1) * v];
        let mut mx = row[0];
        for &l in row {
            mx = mx.max(l);
        }
        let mut denom = E::zero();
        for &l in row {
            denom += (l - mx).exp();
        }
        let lse = mx + denom.ln();
        loss += lse - row[targets[t]];
        let grow = &mut grad.data_mut()[t * v..(t + 1) * v];
        for (g, &l) in grow.iter_mut().zip(row) {
            *g = (l - lse).exp() * inv_count;
        }
        grow[targets[t]] -= inv_count;
    }
    Ok((loss * inv_count, grad))
}

// ---------------------------------------------------------------------------
// finite-difference oracle
// ---------------------------------------------------------------------------

pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Number of coordinates to probe; the rest are skipped.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            max_coords: 200,
            seed: 0,
        }
    }
}

/// Compare an analytic gradient to central finite differences of `f` at
/// `point`, returning the max relative error over a sampled coordinate
/// subset. The denominator is floored at 1e-3 so coordinates whose true
/// gradient is near zero are judged on absolute error.
pub fn grad_check<F>(mut f: F, point: &[f64], analytic: &[f64], opts: &GradCheck) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    assert_eq!(point.len(), analytic.len());
    let mut coords: Vec<usize> = (0..point.len()).collect();
    if coords.len() > opts.max_coords {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
        coords.shuffle(&mut rng);
        coords.truncate(opts.max_coords);
        coords.sort_unstable();
    }

    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + opts.step;
        let fp = f(&x);
        x[i] = orig - opts.step;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * opts.step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller is plenty for test fixtures.
        let u1: f64 = rng.gen_range(1e-9..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&i2, &b).unwrap(), b);
        assert_eq!(matmul(&b, &i2).unwrap(), b);
    }

    #[test]
    fn matmul_hand_product() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::from_fn(&[4, 3], || randn(&mut rng));
        let b = Tensor::from_fn(&[3, 2], || randn(&mut rng));
        // scalar objective: sum of weighted entries of c
        let w = Tensor::from_fn(&[4, 2], || randn(&mut rng));

        let (da, db) = matmul_backward(&a, &b, &w).unwrap();
        let analytic: Vec<f64> = da.data().iter().chain(db.data()).copied().collect();
        let point: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        let f = |x: &[f64]| {
            let a = Tensor::from_vec(&[4, 3], x[..12].to_vec()).unwrap();
            let b = Tensor::from_vec(&[3, 2], x[12..].to_vec()).unwrap();
            let c = matmul(&a, &b).unwrap();
            c.data().iter().zip(w.data()).map(|(c, w)| c * w).sum()
        };
        let err = grad_check(f, &point, &analytic, &GradCheck::default());
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn rmsnorm_forced_by_formula() {
        let x = Tensor::from_vec(&[2], vec![3.0f64, 4.0]).unwrap();
        let y = rmsnorm(&x, &[1.0, 1.0], 0.0);
        let r = (12.5f64).sqrt();
        assert!((y.data()[0] - 3.0 / r).abs() < 1e-12);
        assert!((y.data()[1] - 4.0 / r).abs() < 1e-12);
    }

    #[test]
    fn rmsnorm_zero_input() {
        let x = Tensor::from_vec(&[4], vec![0.0f64; 4]).unwrap();
        let y = rmsnorm(&x, &[1.0; 4], 1e-5);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rmsnorm_gradient_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..8).map(|_| randn(&mut rng)).collect();
        let gain: Vec<f64> = (0..8).map(|_| 1.0 + 0.1 * randn(&mut rng)).collect();
        let w: Vec<f64> = (0..8).map(|_| randn(&mut rng)).collect();
        let eps = 1e-6;

        let mut dx = vec![0.0; 8];
        let mut dgain = vec![0.0; 8];
        rmsnorm_row_backward(&x, &gain, eps, &w, &mut dx, &mut dgain);
        let analytic: Vec<f64> = dx.iter().chain(&dgain).copied().collect();
        let point: Vec<f64> = x.iter().chain(&gain).copied().collect();
        let f = |p: &[f64]| {
            let xt = Tensor::from_vec(&[8], p[..8].to_vec()).unwrap();
            let y = rmsnorm(&xt, &p[8..], eps);
            y.data().iter().zip(&w).map(|(y, w)| y * w).sum()
        };
        let err = grad_check(f, &point, &analytic, &GradCheck::default());
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let logits = Tensor::from_vec(&[1, 4], vec![0.7f64; 4]).unwrap();
        let loss = cross_entropy(&logits, &[2], &[true]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_spike_goes_to_zero() {
        let mut v = vec![0.0f64; 5];
        v[3] = 1e4;
        let logits = Tensor::from_vec(&[1, 5], v).unwrap();
        let loss = cross_entropy(&logits, &[3], &[true]).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn cross_entropy_empty_mask_rejected() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.0f64; 6]).unwrap();
        let err = cross_entropy(&logits, &[0, 1], &[false, false]);
        assert!(matches!(err, Err(Error::InvalidExample(_))));
    }

    #[test]
    fn cross_entropy_gradient_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::from_fn(&[3, 5], || randn(&mut rng));
        let targets = [1usize, 4, 0];
        let mask = [true, false, true];
        let (_, grad) = cross_entropy_with_grad(&logits, &targets, &mask).unwrap();
        let f = |p: &[f64]| {
            let l = Tensor::from_vec(&[3, 5], p.to_vec()).unwrap();
            cross_entropy(&l, &targets, &mask).unwrap()
        };
        let err = grad_check(f, logits.data(), grad.data(), &GradCheck::default());
        assert!(err <= 1e-6, "rel err {err}");
        // masked-out rows get exactly zero gradient
        assert!(grad.data()[5..10].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn grad_check_quadratic() {
        let f = |x: &[f64]| x[0] * x[0];
        let err = grad_check(f, &[3.0], &[6.0], &GradCheck::default());
        assert!(err <= 1e-9, "rel err {err}");
    }

    #[test]
    fn grad_check_constant() {
        let f = |_: &[f64]| 42.0;
        let err = grad_check(f, &[1.0, 2.0], &[0.0, 0.0], &GradCheck::default());
        assert_eq!(err, 0.0);
    }

    #[test]
    fn primitives_keep_finite_inputs_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let a = Tensor::from_fn(&[3, 4], || randn(&mut rng));
            let b = Tensor::from_fn(&[4, 2], || randn(&mut rng));
            assert!(matmul(&a, &b).unwrap().all_finite());
            let gain: Vec<f64> = (0..4).map(|_| randn(&mut rng)).collect();
            assert!(rmsnorm(&a, &gain, 1e-6).all_finite());
        }
    }
}
