//! Sequence-mixing blocks: the Mamba block, the position-wise FFN, and the
//! single-head causal attention block used as a scaling baseline.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Float;
use crate::scan::ScanMode;
use crate::ssm::{S6Config, S6Layer, S6Trace};
use crate::tensor::{kernels, Tensor};

/// `x̂ = SiLU(Conv(x·W_x))`, `ẑ = SiLU(x·W_z)`,
/// `out = LayerNorm((S6(x̂) ∘ ẑ)·W_out + x)`.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub d_model: usize,
    pub d_inner: usize,
    pub conv_kernel: usize,
    pub w_in_x: ParamId,
    pub w_in_z: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub s6: S6Layer,
    pub w_out: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

impl MambaBlock {
    pub fn new<F: Float>(
        d_model: usize,
        expand: usize,
        conv_kernel: usize,
        s6: S6Config,
        prefix: &str,
        store: &mut ParamStore<F>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d_inner = expand * d_model;
        if s6.d_inner != d_inner {
            return Err(Error::Config(format!(
                "S6 width {} != expand·d_model = {d_inner}",
                s6.d_inner
            )));
        }
        if conv_kernel == 0 {
            return Err(Error::Config("conv kernel must be at least 1".into()));
        }
        let w_in_x = store.add_linear(format!("{prefix}.w_in_x"), d_model, d_inner, rng);
        let w_in_z = store.add_linear(format!("{prefix}.w_in_z"), d_model, d_inner, rng);
        let conv_w = store.add_linear(format!("{prefix}.conv_w"), conv_kernel, d_inner, rng);
        // stored as (channels, taps)
        *store.get_mut(conv_w) = store
            .get(conv_w)
            .clone()
            .reshape(vec![d_inner, conv_kernel])?;
        let conv_b = store.add_bias(format!("{prefix}.conv_b"), conv_kernel, d_inner, rng);
        let s6 = S6Layer::new(s6, &format!("{prefix}.s6"), store, rng)?;
        let w_out = store.add_linear(format!("{prefix}.w_out"), d_inner, d_model, rng);
        let ln_g = store.add(
            format!("{prefix}.ln_g"),
            Tensor::full(vec![d_model], F::one()),
        );
        let ln_b = store.add(format!("{prefix}.ln_b"), Tensor::zeros(vec![d_model]));
        Ok(Self {
            d_model,
            d_inner,
            conv_kernel,
            w_in_x,
            w_in_z,
            conv_w,
            conv_b,
            s6,
            w_out,
            ln_g,
            ln_b,
        })
    }

    pub fn forward<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        x: Var,
        mode: ScanMode,
        trace: Option<&mut Option<S6Trace<F>>>,
    ) -> Result<Var> {
        let w_x = tape.param(store, self.w_in_x);
        let w_z = tape.param(store, self.w_in_z);
        let cw = tape.param(store, self.conv_w);
        let cb = tape.param(store, self.conv_b);
        let xin = tape.matmul(x, w_x)?;
        let conv = tape.causal_conv1d(xin, cw, cb)?;
        let xh = tape.silu(conv);
        let zin = tape.matmul(x, w_z)?;
        let z = tape.silu(zin);
        let y = self.s6.forward(store, tape, xh, mode, trace)?;
        let gated = tape.mul(y, z)?;
        let w_o = tape.param(store, self.w_out);
        let proj = tape.matmul(gated, w_o)?;
        let res = tape.add(proj, x)?;
        let g = tape.param(store, self.ln_g);
        let b = tape.param(store, self.ln_b);
        tape.layer_norm(res, Some(g), Some(b))
    }

    pub fn init_state<F: Float>(&self) -> BlockState<F> {
        BlockState {
            conv: vec![F::zero(); (self.conv_kernel - 1) * self.d_inner],
            filled: 0,
            h: vec![F::zero(); self.s6.state_len()],
        }
    }

    /// Recurrent single-token step; arithmetic mirrors [`Self::forward`] with
    /// a sequential scan.
    pub fn step<F: Float>(
        &self,
        store: &ParamStore<F>,
        state: &mut BlockState<F>,
        x: &[F],
    ) -> Result<Vec<F>> {
        let (d, di, k) = (self.d_model, self.d_inner, self.conv_kernel);
        let xin = kernels::matmul(x, store.get(self.w_in_x).data(), 1, d, di);
        let w = store.get(self.conv_w).data();
        let mut conv = store.get(self.conv_b).data().to_vec();
        // lag 0 first, then older rows; matches the batched kernel's order
        for j in 0..k.min(state.filled + 1) {
            let src = if j == 0 {
                &xin[..]
            } else {
                &state.conv[(j - 1) * di..j * di]
            };
            for c in 0..di {
                conv[c] += w[c * k + j] * src[c];
            }
        }
        if k > 1 {
            state.conv.copy_within(0..(k - 2) * di, di);
            state.conv[..di].copy_from_slice(&xin);
            state.filled = (state.filled + 1).min(k - 1);
        }
        let xh: Vec<F> = conv.iter().map(|&v| kernels::silu(v)).collect();
        let y = self.s6.step(store, &mut state.h, &xh)?;
        let zin = kernels::matmul(x, store.get(self.w_in_z).data(), 1, d, di);
        let gated: Vec<F> = y
            .iter()
            .zip(&zin)
            .map(|(&a, &b)| a * kernels::silu(b))
            .collect();
        let proj = kernels::matmul(&gated, store.get(self.w_out).data(), 1, di, d);
        let res: Vec<F> = proj.iter().zip(x).map(|(&a, &b)| a + b).collect();
        Ok(layer_norm_row(
            &res,
            Some(store.get(self.ln_g).data()),
            Some(store.get(self.ln_b).data()),
        ))
    }
}

/// Recurrent inference state of one [`MambaBlock`]: the last `k − 1` conv
/// inputs and the S6 state. Its size never depends on how many tokens were
/// consumed.
#[derive(Clone, Debug)]
pub struct BlockState<F> {
    conv: Vec<F>,
    filled: usize,
    h: Vec<F>,
}

impl<F> BlockState<F> {
    pub fn num_scalars(&self) -> usize {
        self.conv.len() + self.h.len()
    }
}

pub(crate) fn layer_norm_row<F: Float>(x: &[F], gamma: Option<&[F]>, beta: Option<&[F]>) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    let mut rstd = [F::zero()];
    kernels::layer_norm_rows(
        x,
        x.len(),
        F::from_f64_lossy(crate::autodiff::LAYER_NORM_EPS),
        &mut out,
        &mut rstd,
    );
    if let Some(g) = gamma {
        for (o, &k) in out.iter_mut().zip(g) {
            *o *= k;
        }
    }
    if let Some(b) = beta {
        for (o, &k) in out.iter_mut().zip(b) {
            *o += k;
        }
    }
    out
}

/// `FFN(H) = GELU(H·W₁ + b₁)·W₂ + b₂` with hidden width `4·D`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub d_model: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Ffn {
    pub fn new<F: Float>(
        d_model: usize,
        prefix: &str,
        store: &mut ParamStore<F>,
        rng: &mut Rng,
    ) -> Self {
        let hidden = 4 * d_model;
        Self {
            d_model,
            w1: store.add_linear(format!("{prefix}.w1"), d_model, hidden, rng),
            b1: store.add_bias(format!("{prefix}.b1"), d_model, hidden, rng),
            w2: store.add_linear(format!("{prefix}.w2"), hidden, d_model, rng),
            b2: store.add_bias(format!("{prefix}.b2"), hidden, d_model, rng),
        }
    }

    /// Number of scalars: `8D² + 5D`.
    pub fn num_params(d_model: usize) -> usize {
        8 * d_model * d_model + 5 * d_model
    }

    pub fn forward<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        h: Var,
    ) -> Result<Var> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let a = tape.matmul(h, w1)?;
        let a = tape.add_row(a, b1)?;
        let a = tape.gelu(a);
        let o = tape.matmul(a, w2)?;
        tape.add_row(o, b2)
    }

    /// `LayerNorm(FFN(H) + H)` with a parameter-free norm.
    pub fn forward_residual<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        h: Var,
    ) -> Result<Var> {
        let f = self.forward(store, tape, h)?;
        let r = tape.add(f, h)?;
        tape.layer_norm(r, None, None)
    }

    pub fn step_residual<F: Float>(&self, store: &ParamStore<F>, h: &[F]) -> Vec<F> {
        let d = self.d_model;
        let mut a = kernels::matmul(h, store.get(self.w1).data(), 1, d, 4 * d);
        for (v, &b) in a.iter_mut().zip(store.get(self.b1).data()) {
            *v = kernels::gelu(*v + b);
        }
        let mut o = kernels::matmul(&a, store.get(self.w2).data(), 1, 4 * d, d);
        for ((v, &b), &x) in o.iter_mut().zip(store.get(self.b2).data()).zip(h) {
            *v = *v + b + x;
        }
        layer_norm_row(&o, None, None)
    }
}

/// Single-head causal scaled-dot-product self-attention with a post-norm
/// residual. Materializes the full `(T, T)` score matrix.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub d_model: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

impl AttentionBlock {
    pub fn new<F: Float>(
        d_model: usize,
        prefix: &str,
        store: &mut ParamStore<F>,
        rng: &mut Rng,
    ) -> Self {
        Self {
            d_model,
            wq: store.add_linear(format!("{prefix}.wq"), d_model, d_model, rng),
            wk: store.add_linear(format!("{prefix}.wk"), d_model, d_model, rng),
            wv: store.add_linear(format!("{prefix}.wv"), d_model, d_model, rng),
            wo: store.add_linear(format!("{prefix}.wo"), d_model, d_model, rng),
            ln_g: store.add(
                format!("{prefix}.ln_g"),
                Tensor::full(vec![d_model], F::one()),
            ),
            ln_b: store.add(format!("{prefix}.ln_b"), Tensor::zeros(vec![d_model])),
        }
    }

    /// Attention-weighted values `softmax_causal(QKᵀ/√D)·V`.
    pub fn context<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        x: Var,
    ) -> Result<Var> {
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, F::one() / F::from_usize(self.d_model).unwrap().sqrt());
        let p = tape.causal_softmax(s)?;
        tape.matmul(p, v)
    }

    pub fn forward<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        x: Var,
    ) -> Result<Var> {
        let ctx = self.context(store, tape, x)?;
        let wo = tape.param(store, self.wo);
        let o = tape.matmul(ctx, wo)?;
        let r = tape.add(o, x)?;
        let g = tape.param(store, self.ln_g);
        let b = tape.param(store, self.ln_b);
        tape.layer_norm(r, Some(g), Some(b))
    }
}
