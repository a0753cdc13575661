//! Dense row-major arrays.

use crate::error::{Error, Result};
use crate::scalar::Float;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {n} scalars, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: F) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.len() / self.rows().max(1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Raw numeric kernels over row-major slices. Both the tape and the
/// tape-free inference paths call these, which keeps the two bit-identical.
pub(crate) mod kernels {
    use crate::scalar::{c, Float};

    /// `out[n,m] = a[n,k] · b[k,m]`, accumulating over `k` in ascending order.
    pub fn matmul<F: Float>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
        let mut out = vec![F::zero(); n * m];
        F::gemm(
            n,
            k,
            m,
            (a, k as isize, 1),
            (b, m as isize, 1),
            F::zero(),
            (&mut out, m as isize, 1),
        );
        out
    }

    /// `out[n,k] += g[n,m] · b[k,m]ᵀ`
    pub fn matmul_grad_lhs<F: Float>(
        g: &[F],
        b: &[F],
        out: &mut [F],
        n: usize,
        k: usize,
        m: usize,
    ) {
        F::gemm(
            n,
            m,
            k,
            (g, m as isize, 1),
            (b, 1, m as isize),
            F::one(),
            (out, k as isize, 1),
        );
    }

    /// `out[k,m] += a[n,k]ᵀ · g[n,m]`
    pub fn matmul_grad_rhs<F: Float>(
        a: &[F],
        g: &[F],
        out: &mut [F],
        n: usize,
        k: usize,
        m: usize,
    ) {
        F::gemm(
            k,
            n,
            m,
            (a, 1, k as isize),
            (g, m as isize, 1),
            F::one(),
            (out, m as isize, 1),
        );
    }

    pub fn sigmoid<F: Float>(x: F) -> F {
        if x >= F::zero() {
            F::one() / (F::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (F::one() + e)
        }
    }

    pub fn silu<F: Float>(x: F) -> F {
        x * sigmoid(x)
    }

    pub fn silu_grad<F: Float>(x: F) -> F {
        let s = sigmoid(x);
        s * (F::one() + x * (F::one() - s))
    }

    /// Exact GELU: `x·Φ(x)` with `Φ` the Gaussian CDF.
    pub fn gelu<F: Float>(x: F) -> F {
        x * c::<F>(0.5) * (F::one() + (x * c::<F>(std::f64::consts::FRAC_1_SQRT_2)).erf())
    }

    pub fn gelu_grad<F: Float>(x: F) -> F {
        let cdf = c::<F>(0.5) * (F::one() + (x * c::<F>(std::f64::consts::FRAC_1_SQRT_2)).erf());
        let pdf = (-(x * x) * c::<F>(0.5)).exp() * c::<F>(0.398_942_280_401_432_7);
        cdf + x * pdf
    }

    /// `ln(1 + eˣ)` without overflow.
    pub fn softplus<F: Float>(x: F) -> F {
        if x > c(20.0) {
            x
        } else if x < c(-20.0) {
            x.exp()
        } else {
            x.exp().ln_1p()
        }
    }

    /// Inverse of softplus for `y > 0`.
    pub fn softplus_inv<F: Float>(y: F) -> F {
        y + (-(-y).exp_m1()).ln()
    }

    /// Layer norm over rows of width `d`; writes normalized `x̂` and per-row
    /// `1/σ` for backward.
    pub fn layer_norm_rows<F: Float>(x: &[F], d: usize, eps: F, xhat: &mut [F], rstd: &mut [F]) {
        let inv_d = F::one() / F::from_usize(d).unwrap();
        for (r, row) in x.chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
    }

    /// Depthwise causal conv: `y[t,c] = bias[c] + Σ_j w[c,j]·x[t−j,c]`.
    /// Tap `j` is lag `j`; taps reaching before `t = 0` read zeros.
    pub fn causal_conv1d<F: Float>(
        x: &[F],
        w: &[F],
        bias: &[F],
        t_len: usize,
        ch: usize,
        k: usize,
    ) -> Vec<F> {
        let mut y = vec![F::zero(); t_len * ch];
        for t in 0..t_len {
            let out = &mut y[t * ch..(t + 1) * ch];
            out.copy_from_slice(bias);
            for j in 0..k.min(t + 1) {
                let src = &x[(t - j) * ch..(t - j + 1) * ch];
                for cc in 0..ch {
                    out[cc] += w[cc * k + j] * src[cc];
                }
            }
        }
        y
    }

    /// Zero-order-hold transition `exp(Δ·a)`.
    #[inline]
    pub fn zoh_a<F: Float>(delta: F, a: F) -> F {
        (delta * a).exp()
    }

    /// Threshold on `|Δ·a|` below which the ZOH input gain switches to its series.
    pub const ZOH_SERIES_THRESHOLD: f64 = 1e-6;

    /// Zero-order-hold input gain `φ(Δ, a) = (exp(Δa) − 1)/a` (so `B̄ = φ·B`),
    /// with the series `Δ(1 + Δa/2)` near the removable singularity.
    #[inline]
    pub fn zoh_gain<F: Float>(delta: F, a: F) -> F {
        if (delta * a).abs() < c(ZOH_SERIES_THRESHOLD) {
            zoh_gain_series(delta, a)
        } else {
            zoh_gain_exact(delta, a)
        }
    }

    #[inline]
    pub fn zoh_gain_series<F: Float>(delta: F, a: F) -> F {
        delta * (F::one() + delta * a * c::<F>(0.5))
    }

    #[inline]
    pub fn zoh_gain_exact<F: Float>(delta: F, a: F) -> F {
        (delta * a).exp_m1() / a
    }

    /// `(φ, ∂φ/∂Δ, ∂φ/∂a)` from a single `expm1`.
    #[inline]
    pub fn zoh_gain_with_grad<F: Float>(delta: F, a: F) -> (F, F, F) {
        let da = delta * a;
        if da.abs() < c(ZOH_SERIES_THRESHOLD) {
            (
                delta * (F::one() + da * c::<F>(0.5)),
                F::one() + da,
                delta * delta * c::<F>(0.5),
            )
        } else {
            let em1 = da.exp_m1();
            let e = em1 + F::one();
            (em1 / a, e, (da * e - em1) / (a * a))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::kernels::*;
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn odd_and_symmetry_points() {
        assert_eq!(silu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for &y in &[1e-3f64, 1e-2, 0.1, 1.0, 5.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn identity_conv_kernel() {
        let x: Vec<f64> = (0..12).map(|v| v as f64 * 0.3 - 1.0).collect();
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let y = causal_conv1d(&x, &w, &[0.0; 3], 4, 3, 4);
        assert_eq!(x, y);
    }

    #[test]
    fn zoh_closed_form() {
        let a = zoh_a(2f64.ln(), -1.0);
        let b = zoh_gain(2f64.ln(), -1.0);
        assert!((a - 0.5).abs() < 1e-12);
        assert!((b - 0.5).abs() < 1e-12);
    }
}
