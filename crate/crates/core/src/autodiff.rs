//! Reverse-mode differentiation over a Wengert tape.
//!
//! A [`Tape`] records every primitive applied during one forward pass. Each
//! node keeps its forward value; ops whose backward needs more than their
//! inputs and output (layer norm, the selective scan, custom elementwise
//! maps, the clamped cross-entropy) keep extra buffers alongside. The tape
//! tracks the exact number of scalars it retains for backward, which is the
//! deterministic memory measure used by the benchmarks.
//!
//! Parameters enter as borrowed leaves, so building a tape never copies the
//! model. [`Tape::backward`] consumes the tape.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::{c, Float};
use crate::scan::{self, ScanMode};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probability clamp applied before logs in [`Tape::bce_sum`].
pub const PROB_CLAMP: f64 = 1e-7;

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, F),
    Exp(Var),
    Sigmoid(Var),
    Silu(Var),
    Gelu(Var),
    Softplus(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    ZohA {
        delta: Var,
        a: Var,
    },
    ZohB {
        delta: Var,
        a: Var,
        b: Var,
    },
    Scan {
        abar: Var,
        bbar: Var,
        c: Var,
        x: Var,
        h: Vec<F>,
        mode: ScanMode,
    },
    Bce {
        p: Var,
        target: Vec<F>,
    },
    Map {
        x: Var,
        deriv: Vec<F>,
    },
}

struct Node<'p, F: Float> {
    value: Cow<'p, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<'p, F: Float> {
    nodes: Vec<Node<'p, F>>,
    params: Vec<(Var, ParamId)>,
    saved_scalars: usize,
    grad_enabled: bool,
}

impl<'p, F: Float> Default for Tape<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Float> Tape<'p, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            saved_scalars: 0,
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing requires grad.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Scalars retained for backward so far: values of every recorded
    /// non-leaf node plus op-specific saved buffers.
    pub fn saved_scalars(&self) -> usize {
        self.saved_scalars
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf borrowed from a parameter store.
    pub fn param(&mut self, store: &'p ParamStore<F>, id: ParamId) -> Var {
        let requires_grad = self.grad_enabled && store.param(id).trainable;
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((v, id));
        v
    }

    /// Owned leaf; differentiable when `requires_grad` and the tape allows it.
    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var], extra_saved: usize) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad {
            self.saved_scalars += value.len() + extra_saved;
            op
        } else {
            Op::Leaf
        };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::invalid(
                op,
                format!("expected a matrix, got shape {s:?}"),
            )),
        }
    }

    // ---- primitives -------------------------------------------------------

    /// `(n,k) · (k,m) → (n,m)`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2("matmul", a)?;
        let (k2, m) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), &[a, b], 0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, cl) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); r * cl];
        for i in 0..r {
            for j in 0..cl {
                out[j * r + i] = src[i * cl + j];
            }
        }
        Ok(self.push(Tensor::new(vec![cl, r], out)?, Op::Transpose(a), &[a], 0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b], 0))
    }

    /// Adds a vector to every row: `(.., m) + (m)`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let m = self.value(x).cols();
        if self.value(b).len() != m {
            return Err(Error::shape("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &v) in row.iter_mut().zip(bv) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b), &[x, b], 0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b], 0))
    }

    /// Scales every row elementwise by a vector: `(.., m) ∘ (m)`.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let m = self.value(x).cols();
        if self.value(w).len() != m {
            return Err(Error::shape("mul_row", self.shape(x), self.shape(w)));
        }
        let wv = self.value(w).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &v) in row.iter_mut().zip(wv) {
                *o *= v;
            }
        }
        Ok(self.push(out, Op::MulRow(x, w), &[x, w], 0))
    }

    /// Scales row `i` of `(n, m)` by `s[i]`, `s` of shape `(n, 1)` or `(n)`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, m) = self.dims2("mul_col", x)?;
        if self.value(s).len() != n {
            return Err(Error::shape("mul_col", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).clone();
        for (row, &k) in out.data_mut().chunks_mut(m.max(1)).zip(sv) {
            for o in row {
                *o *= k;
            }
        }
        Ok(self.push(out, Op::MulCol(x, s), &[x, s], 0))
    }

    pub fn scale(&mut self, x: Var, k: F) -> Var {
        let out = map(self.value(x), |v| v * k);
        self.push(out, Op::Scale(x, k), &[x], 0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| v.exp());
        self.push(out, Op::Exp(x), &[x], 0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = map(self.value(x), kernels::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x], 0)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = map(self.value(x), kernels::silu);
        self.push(out, Op::Silu(x), &[x], 0)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = map(self.value(x), kernels::gelu);
        self.push(out, Op::Gelu(x), &[x], 0)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = map(self.value(x), kernels::softplus);
        self.push(out, Op::Softplus(x), &[x], 0)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let m = self.value(x).cols();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m.max(1)) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x), &[x], 0)
    }

    /// Row-wise softmax of a square `(T, T)` score matrix restricted to
    /// columns `j ≤ i`; entries above the diagonal come out as exact zeros
    /// and never influence the row.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, cl) = self.dims2("causal_softmax", x)?;
        if r != cl {
            return Err(Error::invalid(
                "causal_softmax",
                format!("expected a square matrix, got ({r}, {cl})"),
            ));
        }
        let mut out = self.value(x).clone();
        for (i, row) in out.data_mut().chunks_mut(cl.max(1)).enumerate() {
            softmax_in_place(&mut row[..=i]);
            for v in &mut row[i + 1..] {
                *v = F::zero();
            }
        }
        Ok(self.push(out, Op::CausalSoftmax(x), &[x], 0))
    }

    /// Layer norm over the last axis (population variance, eps 1e-5) with an
    /// optional learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let d = self.value(x).cols();
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).len() != d {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let rows = self.value(x).len() / d.max(1);
        let mut xhat = vec![F::zero(); rows * d];
        let mut rstd = vec![F::zero(); rows];
        kernels::layer_norm_rows(
            self.value(x).data(),
            d,
            c(LAYER_NORM_EPS),
            &mut xhat,
            &mut rstd,
        );
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = self.value(g).data();
            for row in out.chunks_mut(d) {
                for (o, &k) in row.iter_mut().zip(gv) {
                    *o *= k;
                }
            }
        }
        if let Some(b) = beta {
            let bv = self.value(b).data();
            for row in out.chunks_mut(d) {
                for (o, &k) in row.iter_mut().zip(bv) {
                    *o += k;
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let inputs: Vec<Var> = [Some(x), gamma, beta].into_iter().flatten().collect();
        let extra = xhat.len() + rstd.len();
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &inputs,
            extra,
        ))
    }

    /// Depthwise causal conv over `(T, C)` with kernel `(C, k)` and bias `(C)`;
    /// tap `j` reads lag `j`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t_len, ch) = self.dims2("causal_conv1d", x)?;
        let (wc, k) = self.dims2("causal_conv1d", w)?;
        if wc != ch || self.value(b).len() != ch {
            return Err(Error::shape("causal_conv1d", self.shape(x), self.shape(w)));
        }
        let out = kernels::causal_conv1d(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            t_len,
            ch,
            k,
        );
        Ok(self.push(
            Tensor::new(vec![t_len, ch], out)?,
            Op::Conv1d { x, w, b },
            &[x, w, b],
            0,
        ))
    }

    /// Rows `[start, start + len)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, cl) = self.dims2("slice_rows", x)?;
        if start + len > r {
            return Err(Error::invalid(
                "slice_rows",
                format!("rows {start}..{} out of {r}", start + len),
            ));
        }
        let data = self.value(x).data()[start * cl..(start + len) * cl].to_vec();
        Ok(self.push(
            Tensor::new(vec![len, cl], data)?,
            Op::SliceRows { x, start },
            &[x],
            0,
        ))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, cl) = self.dims2("slice_cols", x)?;
        if start + len > cl {
            return Err(Error::invalid(
                "slice_cols",
                format!("cols {start}..{} out of {cl}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * cl + start..i * cl + start + len]);
        }
        Ok(self.push(
            Tensor::new(vec![r, len], data)?,
            Op::SliceCols { x, start },
            &[x],
            0,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cl = self.dims2("concat_rows", parts[0])?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c2) = self.dims2("concat_rows", p)?;
            if c2 != cl {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::new(vec![rows, cl], data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
            0,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims2("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c2) = self.dims2("concat_cols", p)?;
            if r2 != r {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            widths.push(c2);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
            0,
        ))
    }

    /// Row lookup: `table (V, D)`, `idx` of length `n` → `(n, D)`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("gather_rows", table)?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(Error::invalid(
                    "gather_rows",
                    format!("index {i} out of {v} rows"),
                ));
            }
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            &[table],
            0,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], 0)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<F>() / F::from_usize(t.len().max(1)).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], 0)
    }

    /// `Ā[t,d,n] = exp(Δ[t,d]·a[d,n])` for `Δ (T, D)` and `a (D, N)`.
    pub fn zoh_a(&mut self, delta: Var, a: Var) -> Result<Var> {
        let (t_len, d) = self.dims2("zoh_a", delta)?;
        let (d2, n) = self.dims2("zoh_a", a)?;
        if d != d2 {
            return Err(Error::shape("zoh_a", self.shape(delta), self.shape(a)));
        }
        let dv = self.value(delta).data();
        let av = self.value(a).data();
        let mut out = vec![F::zero(); t_len * d * n];
        for t in 0..t_len {
            for ch in 0..d {
                let dt = dv[t * d + ch];
                for s in 0..n {
                    out[(t * d + ch) * n + s] = kernels::zoh_a(dt, av[ch * n + s]);
                }
            }
        }
        check_finite("zoh_a", &out, d * n)?;
        Ok(self.push(
            Tensor::new(vec![t_len, d, n], out)?,
            Op::ZohA { delta, a },
            &[delta, a],
            0,
        ))
    }

    /// `B̄[t,d,n] = φ(Δ[t,d], a[d,n])·B[t,n]` with the zero-order-hold gain φ.
    pub fn zoh_b(&mut self, delta: Var, a: Var, b: Var) -> Result<Var> {
        let (t_len, d) = self.dims2("zoh_b", delta)?;
        let (d2, n) = self.dims2("zoh_b", a)?;
        let (t2, n2) = self.dims2("zoh_b", b)?;
        if d != d2 || t2 != t_len || n2 != n {
            return Err(Error::shape("zoh_b", self.shape(delta), self.shape(b)));
        }
        let dv = self.value(delta).data();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![F::zero(); t_len * d * n];
        for t in 0..t_len {
            for ch in 0..d {
                let dt = dv[t * d + ch];
                for s in 0..n {
                    out[(t * d + ch) * n + s] =
                        kernels::zoh_gain(dt, av[ch * n + s]) * bv[t * n + s];
                }
            }
        }
        check_finite("zoh_b", &out, d * n)?;
        Ok(self.push(
            Tensor::new(vec![t_len, d, n], out)?,
            Op::ZohB { delta, a, b },
            &[delta, a, b],
            0,
        ))
    }

    /// Selective scan `y[t,d] = Σ_n C[t,n]·h[t,d,n]` with
    /// `h_t = Ā_t ∘ h_{t−1} + B̄_t·x[t,d]`, `h_{−1} = 0`.
    pub fn selective_scan(
        &mut self,
        abar: Var,
        bbar: Var,
        cm: Var,
        x: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        let sa = self.shape(abar).to_vec();
        let [t_len, d, n] = sa[..] else {
            return Err(Error::invalid(
                "selective_scan",
                format!("expected (T, D, N), got {sa:?}"),
            ));
        };
        if self.shape(bbar) != sa.as_slice()
            || self.shape(cm) != [t_len, n]
            || self.shape(x) != [t_len, d]
        {
            return Err(Error::shape("selective_scan", &sa, self.shape(x)));
        }
        let (y, h) = scan_forward(
            mode,
            self.value(abar).data(),
            self.value(bbar).data(),
            self.value(cm).data(),
            self.value(x).data(),
            t_len,
            d,
            n,
        );
        let extra = h.len();
        let op = Op::Scan {
            abar,
            bbar,
            c: cm,
            x,
            h,
            mode,
        };
        Ok(self.push(
            Tensor::new(vec![t_len, d], y)?,
            op,
            &[abar, bbar, cm, x],
            extra,
        ))
    }

    /// `−Σ [r·ln p + (1−r)·ln(1−p)]` over all entries of `p`, with `p`
    /// clamped to `[1e-7, 1 − 1e-7]`. Targets outside `{0,1}` are allowed;
    /// weight-zero positions should be dropped by the caller.
    pub fn bce_sum(&mut self, p: Var, target: &[F]) -> Result<Var> {
        if self.value(p).len() != target.len() {
            return Err(Error::shape("bce_sum", self.shape(p), &[target.len()]));
        }
        let lo = c::<F>(PROB_CLAMP);
        let hi = F::one() - lo;
        let mut s = F::zero();
        for (&pv, &r) in self.value(p).data().iter().zip(target) {
            let q = pv.max(lo).min(hi);
            s -= r * q.ln() + (F::one() - r) * (F::one() - q).ln();
        }
        if !s.is_finite() {
            return Err(Error::Diverged {
                what: "loss",
                detail: format!("cross-entropy evaluated to {s}"),
            });
        }
        let extra = target.len();
        Ok(self.push(
            Tensor::scalar(s),
            Op::Bce {
                p,
                target: target.to_vec(),
            },
            &[p],
            extra,
        ))
    }

    /// Custom elementwise map with a supplied derivative.
    pub fn map_elementwise(&mut self, x: Var, f: impl Fn(F) -> F, df: impl Fn(F) -> F) -> Var {
        let out = map(self.value(x), &f);
        let deriv: Vec<F> = self.value(x).data().iter().map(|&v| df(v)).collect();
        let extra = deriv.len();
        self.push(out, Op::Map { x, deriv }, &[x], extra)
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every differentiable leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let loss_shape = lt.shape().to_vec();
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_shape, F::one()));
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let g = g.data();
            let out = node.value.data();
            let val = |v: Var| nodes[v.0].value.data();
            let shape = |v: Var| nodes[v.0].value.shape();
            let mut acc = Acc {
                nodes: &nodes,
                grads: &mut grads,
            };

            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::MatMul(a, b) => {
                    let (n, k) = (shape(a)[0], shape(a)[1]);
                    let m = shape(b)[1];
                    if let Some(ga) = acc.get(a) {
                        kernels::matmul_grad_lhs(g, val(b), ga, n, k, m);
                    }
                    if let Some(gb) = acc.get(b) {
                        kernels::matmul_grad_rhs(val(a), g, gb, n, k, m);
                    }
                }
                &Op::Transpose(a) => {
                    let (r, cl) = (shape(a)[0], shape(a)[1]);
                    if let Some(ga) = acc.get(a) {
                        for i in 0..r {
                            for j in 0..cl {
                                ga[i * cl + j] += g[j * r + i];
                            }
                        }
                    }
                }
                &Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(gv) = acc.get(v) {
                            add_into(gv, g);
                        }
                    }
                }
                &Op::AddRow(x, b) => {
                    let m = shape(b).iter().product::<usize>();
                    if let Some(gx) = acc.get(x) {
                        add_into(gx, g);
                    }
                    if let Some(gb) = acc.get(b) {
                        for row in g.chunks(m) {
                            add_into(gb, row);
                        }
                    }
                }
                &Op::Mul(a, b) => {
                    if let Some(ga) = acc.get(a) {
                        for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(val(b)) {
                            *o += gv * bv;
                        }
                    }
                    if let Some(gb) = acc.get(b) {
                        for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(val(a)) {
                            *o += gv * av;
                        }
                    }
                }
                &Op::MulRow(x, w) => {
                    let m = val(w).len();
                    if let Some(gx) = acc.get(x) {
                        for (grow, orow) in g.chunks(m).zip(gx.chunks_mut(m)) {
                            for ((o, &gv), &wv) in orow.iter_mut().zip(grow).zip(val(w)) {
                                *o += gv * wv;
                            }
                        }
                    }
                    if let Some(gw) = acc.get(w) {
                        for (grow, xrow) in g.chunks(m).zip(val(x).chunks(m)) {
                            for ((o, &gv), &xv) in gw.iter_mut().zip(grow).zip(xrow) {
                                *o += gv * xv;
                            }
                        }
                    }
                }
                &Op::MulCol(x, s) => {
                    let m = shape(x)[1].max(1);
                    if let Some(gx) = acc.get(x) {
                        for ((orow, grow), &k) in gx.chunks_mut(m).zip(g.chunks(m)).zip(val(s)) {
                            for (o, &gv) in orow.iter_mut().zip(grow) {
                                *o += gv * k;
                            }
                        }
                    }
                    if let Some(gs) = acc.get(s) {
                        for ((o, grow), xrow) in
                            gs.iter_mut().zip(g.chunks(m)).zip(val(x).chunks(m))
                        {
                            *o += grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<F>();
                        }
                    }
                }
                &Op::Scale(x, k) => {
                    if let Some(gx) = acc.get(x) {
                        for (o, &gv) in gx.iter_mut().zip(g) {
                            *o += gv * k;
                        }
                    }
                }
                &Op::Exp(x) => {
                    if let Some(gx) = acc.get(x) {
                        for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(out) {
                            *o += gv * y;
                        }
                    }
                }
                &Op::Sigmoid(x) => {
                    if let Some(gx) = acc.get(x) {
                        for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(out) {
                            *o += gv * y * (F::one() - y);
                        }
                    }
                }
                &Op::Silu(x) => unary_grad(&mut acc, x, g, val(x), kernels::silu_grad),
                &Op::Gelu(x) => unary_grad(&mut acc, x, g, val(x), kernels::gelu_grad),
                &Op::Softplus(x) => unary_grad(&mut acc, x, g, val(x), kernels::sigmoid),
                &Op::Softmax(x) => {
                    let m = shape(x).last().copied().unwrap_or(1).max(1);
                    if let Some(gx) = acc.get(x) {
                        for ((orow, grow), yrow) in
                            gx.chunks_mut(m).zip(g.chunks(m)).zip(out.chunks(m))
                        {
                            softmax_backward_row(orow, grow, yrow);
                        }
                    }
                }
                &Op::CausalSoftmax(x) => {
                    let m = shape(x)[1].max(1);
                    if let Some(gx) = acc.get(x) {
                        for (i, ((orow, grow), yrow)) in gx
                            .chunks_mut(m)
                            .zip(g.chunks(m))
                            .zip(out.chunks(m))
                            .enumerate()
                        {
                            softmax_backward_row(&mut orow[..=i], &grow[..=i], &yrow[..=i]);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = shape(*x).last().copied().unwrap_or(1).max(1);
                    if let Some(b) = *beta {
                        if let Some(gb) = acc.get(b) {
                            for row in g.chunks(d) {
                                add_into(gb, row);
                            }
                        }
                    }
                    if let Some(gm) = *gamma {
                        if let Some(gg) = acc.get(gm) {
                            for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                                for ((o, &gv), &xh) in gg.iter_mut().zip(grow).zip(xrow) {
                                    *o += gv * xh;
                                }
                            }
                        }
                    }
                    if let Some(gx) = acc.get(*x) {
                        let inv_d = F::one() / F::from_usize(d).unwrap();
                        let gam = gamma.map(val);
                        let mut dxh = vec![F::zero(); d];
                        for (r, (grow, xrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            for j in 0..d {
                                dxh[j] = grow[j] * gam.map_or(F::one(), |gv| gv[j]);
                            }
                            let m1 = dxh.iter().copied().sum::<F>() * inv_d;
                            let m2 = dxh.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                            let orow = &mut gx[r * d..(r + 1) * d];
                            for j in 0..d {
                                orow[j] += rstd[r] * (dxh[j] - m1 - xrow[j] * m2);
                            }
                        }
                    }
                }
                &Op::Conv1d { x, w, b } => {
                    let (t_len, ch) = (shape(x)[0], shape(x)[1]);
                    let k = shape(w)[1];
                    if let Some(gb) = acc.get(b) {
                        for row in g.chunks(ch) {
                            add_into(gb, row);
                        }
                    }
                    if let Some(gw) = acc.get(w) {
                        let xv = val(x);
                        for t in 0..t_len {
                            for j in 0..k.min(t + 1) {
                                for cc in 0..ch {
                                    gw[cc * k + j] += g[t * ch + cc] * xv[(t - j) * ch + cc];
                                }
                            }
                        }
                    }
                    if let Some(gx) = acc.get(x) {
                        let wv = val(w);
                        for t in 0..t_len {
                            for j in 0..k.min(t + 1) {
                                for cc in 0..ch {
                                    gx[(t - j) * ch + cc] += g[t * ch + cc] * wv[cc * k + j];
                                }
                            }
                        }
                    }
                }
                &Op::SliceRows { x, start } => {
                    let cl = shape(x)[1];
                    if let Some(gx) = acc.get(x) {
                        add_into(&mut gx[start * cl..start * cl + g.len()], g);
                    }
                }
                &Op::SliceCols { x, start } => {
                    let cl = shape(x)[1];
                    let len = node.value.cols();
                    if let Some(gx) = acc.get(x) {
                        for (i, grow) in g.chunks(len.max(1)).enumerate() {
                            add_into(&mut gx[i * cl + start..i * cl + start + len], grow);
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if let Some(gp) = acc.get(p) {
                            add_into(gp, &g[off..off + n]);
                        }
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let w = shape(p)[1];
                        if let Some(gp) = acc.get(p) {
                            for (i, orow) in gp.chunks_mut(w.max(1)).enumerate() {
                                add_into(orow, &g[i * total + off..i * total + off + w]);
                            }
                        }
                        off += w;
                    }
                }
                Op::Gather { table, idx } => {
                    let d = shape(*table)[1];
                    if let Some(gt) = acc.get(*table) {
                        for (r, &i) in idx.iter().enumerate() {
                            add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    }
                }
                &Op::Sum(x) => {
                    if let Some(gx) = acc.get(x) {
                        for o in gx.iter_mut() {
                            *o += g[0];
                        }
                    }
                }
                &Op::Mean(x) => {
                    if let Some(gx) = acc.get(x) {
                        let k = g[0] / F::from_usize(gx.len().max(1)).unwrap();
                        for o in gx.iter_mut() {
                            *o += k;
                        }
                    }
                }
                &Op::ZohA { delta, a } => {
                    let (d, n) = (shape(a)[0], shape(a)[1]);
                    let (dv, av) = (val(delta), val(a));
                    if let Some(gd) = acc.get(delta) {
                        for (td, o) in gd.iter_mut().enumerate() {
                            let ch = td % d;
                            for s in 0..n {
                                let idx = td * n + s;
                                *o += g[idx] * out[idx] * av[ch * n + s];
                            }
                        }
                    }
                    if let Some(ga) = acc.get(a) {
                        for (td, &dt) in dv.iter().enumerate() {
                            let ch = td % d;
                            for s in 0..n {
                                let idx = td * n + s;
                                ga[ch * n + s] += g[idx] * out[idx] * dt;
                            }
                        }
                    }
                }
                &Op::ZohB { delta, a, b } => {
                    let (d, n) = (shape(a)[0], shape(a)[1]);
                    let (dv, av, bv) = (val(delta), val(a), val(b));
                    let t_len = dv.len() / d.max(1);
                    let want_d = acc.wants(delta);
                    let want_a = acc.wants(a);
                    let want_b = acc.wants(b);
                    let mut gd = vec![F::zero(); if want_d { dv.len() } else { 0 }];
                    let mut ga = vec![F::zero(); if want_a { av.len() } else { 0 }];
                    let mut gbv = vec![F::zero(); if want_b { bv.len() } else { 0 }];
                    for t in 0..t_len {
                        for ch in 0..d {
                            let dt = dv[t * d + ch];
                            for s in 0..n {
                                let idx = (t * d + ch) * n + s;
                                let gv = g[idx];
                                let aa = av[ch * n + s];
                                let bb = bv[t * n + s];
                                let (phi, pd, pa) = kernels::zoh_gain_with_grad(dt, aa);
                                if want_b {
                                    gbv[t * n + s] += gv * phi;
                                }
                                if want_d {
                                    gd[t * d + ch] += gv * bb * pd;
                                }
                                if want_a {
                                    ga[ch * n + s] += gv * bb * pa;
                                }
                            }
                        }
                    }
                    for (v, buf) in [(delta, gd), (a, ga), (b, gbv)] {
                        acc.add_owned(v, buf);
                    }
                }
                Op::Scan {
                    abar,
                    bbar,
                    c: cm,
                    x,
                    h,
                    mode,
                } => {
                    let (t_len, d, n) = (shape(*abar)[0], shape(*abar)[1], shape(*abar)[2]);
                    let grads_in = scan_backward(
                        *mode,
                        val(*abar),
                        val(*bbar),
                        val(*cm),
                        val(*x),
                        h,
                        g,
                        t_len,
                        d,
                        n,
                    );
                    for (v, buf) in [
                        (*abar, grads_in.abar),
                        (*bbar, grads_in.bbar),
                        (*cm, grads_in.c),
                        (*x, grads_in.x),
                    ] {
                        acc.add_owned(v, buf);
                    }
                }
                Op::Bce { p, target } => {
                    let lo = c::<F>(PROB_CLAMP);
                    let hi = F::one() - lo;
                    if let Some(gp) = acc.get(*p) {
                        for ((o, &pv), &r) in gp.iter_mut().zip(val(*p)).zip(target) {
                            if pv > lo && pv < hi {
                                *o -= g[0] * (r / pv - (F::one() - r) / (F::one() - pv));
                            }
                        }
                    }
                }
                Op::Map { x, deriv } => {
                    if let Some(gx) = acc.get(*x) {
                        for ((o, &gv), &dv) in gx.iter_mut().zip(g).zip(deriv) {
                            *o += gv * dv;
                        }
                    }
                }
            }
        }

        Ok(Gradients {
            grads,
            params: self.params,
        })
    }
}

/// Lazily allocated gradient buffers for the inputs of one node.
struct Acc<'a, 'p, F: Float> {
    nodes: &'a [Node<'p, F>],
    grads: &'a mut [Option<Tensor<F>>],
}

impl<F: Float> Acc<'_, '_, F> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn get(&mut self, v: Var) -> Option<&mut [F]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    /// Adds a full-size buffer, moving it in when the slot is still empty.
    fn add_owned(&mut self, v: Var, buf: Vec<F>) {
        if !self.nodes[v.0].requires_grad || buf.is_empty() {
            return;
        }
        match &mut self.grads[v.0] {
            Some(t) => add_into(t.data_mut(), &buf),
            slot => {
                *slot = Some(
                    Tensor::new(self.nodes[v.0].value.shape().to_vec(), buf)
                        .expect("gradient matches value shape"),
                )
            }
        }
    }
}

fn unary_grad<F: Float>(acc: &mut Acc<'_, '_, F>, x: Var, g: &[F], xv: &[F], d: fn(F) -> F) {
    if let Some(gx) = acc.get(x) {
        for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
            *o += gv * d(v);
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(Var, ParamId)>,
}

impl<F: Float> Gradients<F> {
    /// Gradient for a leaf; `None` if it received no gradient.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients summed per parameter (a parameter used through several
    /// leaves gets the sum).
    pub fn into_param_grads(mut self, n_params: usize) -> ParamGrads<F> {
        let mut out = ParamGrads::empty(n_params);
        let mut merged: Vec<Option<Tensor<F>>> = vec![None; n_params];
        for (v, id) in &self.params {
            if let Some(g) = self.grads[v.0].take() {
                match &mut merged[id.index()] {
                    Some(m) => add_into(m.data_mut(), g.data()),
                    slot => *slot = Some(g),
                }
            }
        }
        for (i, g) in merged.into_iter().enumerate() {
            if let Some(g) = g {
                out.set(ParamId(i), g);
            }
        }
        out
    }
}

// ---- helpers --------------------------------------------------------------

fn map<F: Float>(t: &Tensor<F>, f: impl Fn(F) -> F) -> Tensor<F> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn zip_map<F: Float>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn softmax_backward_row<F: Float>(out: &mut [F], g: &[F], y: &[F]) {
    let dot: F = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
    for ((o, &gv), &yv) in out.iter_mut().zip(g).zip(y) {
        *o += yv * (gv - dot);
    }
}

fn check_finite<F: Float>(what: &'static str, data: &[F], per_step: usize) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what,
            step: pos / per_step.max(1),
        });
    }
    Ok(())
}

/// Forward selective scan over raw buffers; returns `(y, h)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward<F: Float>(
    mode: ScanMode,
    abar: &[F],
    bbar: &[F],
    cm: &[F],
    x: &[F],
    t_len: usize,
    d: usize,
    n: usize,
) -> (Vec<F>, Vec<F>) {
    let mut bx = vec![F::zero(); t_len * d * n];
    for t in 0..t_len {
        for ch in 0..d {
            let xv = x[t * d + ch];
            let base = (t * d + ch) * n;
            for s in 0..n {
                bx[base + s] = bbar[base + s] * xv;
            }
        }
    }
    let h = scan::recurrence(mode, abar, &bx, d * n);
    let mut y = vec![F::zero(); t_len * d];
    for t in 0..t_len {
        let crow = &cm[t * n..(t + 1) * n];
        for ch in 0..d {
            let base = (t * d + ch) * n;
            let mut acc = F::zero();
            for s in 0..n {
                acc += crow[s] * h[base + s];
            }
            y[t * d + ch] = acc;
        }
    }
    (y, h)
}

struct ScanGrads<F> {
    abar: Vec<F>,
    bbar: Vec<F>,
    c: Vec<F>,
    x: Vec<F>,
}

#[allow(clippy::too_many_arguments)]
fn scan_backward<F: Float>(
    mode: ScanMode,
    abar: &[F],
    bbar: &[F],
    cm: &[F],
    x: &[F],
    h: &[F],
    gy: &[F],
    t_len: usize,
    d: usize,
    n: usize,
) -> ScanGrads<F> {
    let lanes = d * n;
    let mut cot = vec![F::zero(); t_len * lanes];
    let mut gc = vec![F::zero(); t_len * n];
    for t in 0..t_len {
        for ch in 0..d {
            let gv = gy[t * d + ch];
            let base = (t * d + ch) * n;
            for s in 0..n {
                cot[base + s] = cm[t * n + s] * gv;
                gc[t * n + s] += gv * h[base + s];
            }
        }
    }
    let gh = scan::adjoint_recurrence(mode, abar, &cot, lanes);
    let mut ga = vec![F::zero(); t_len * lanes];
    let mut gb = vec![F::zero(); t_len * lanes];
    let mut gx = vec![F::zero(); t_len * d];
    for t in 0..t_len {
        for ch in 0..d {
            let base = (t * d + ch) * n;
            let xv = x[t * d + ch];
            let mut acc = F::zero();
            for s in 0..n {
                let g = gh[base + s];
                if t > 0 {
                    ga[base + s] = g * h[base - lanes + s];
                }
                gb[base + s] = g * xv;
                acc += g * bbar[base + s];
            }
            gx[t * d + ch] = acc;
        }
    }
    ScanGrads {
        abar: ga,
        bbar: gb,
        c: gc,
        x: gx,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero_has_quarter_slope() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[1, 3], &[0.0, 0.0, 0.0]), true);
        let x = tape.constant(t(&[3, 1], &[1.0, -2.0, 3.0]));
        let z = tape.matmul(w, x).unwrap();
        let p = tape.sigmoid(z);
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[0.25, -0.5, 0.75]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = tape.constant(t(&[3], &[0.0; 3]));
        assert!(tape.add(a, c).unwrap_err().to_string().starts_with("add"));
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let g = tape.constant(t(&[3], &[1.0; 3]));
        let b = tape.constant(t(&[3], &[0.0; 3]));
        let y = tape.layer_norm(x, Some(g), Some(b)).unwrap();
        let v = tape.value(y).data();
        let mean: f64 = v.iter().sum::<f64>() / 3.0;
        let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        // eps = 1e-5 shrinks the variance slightly below one.
        assert!((var - 1.0).abs() < 2e-5, "{var}");
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 3], &[1.0, 9.0, 9.0, 2.0, 2.0, 9.0, 0.0, 0.0, 0.0]));
        let y = tape.causal_softmax(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
        assert!((v[6] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn saved_scalar_counter_skips_constants() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0; 4]));
        let b = tape.exp(a);
        assert_eq!(tape.saved_scalars(), 0);
        let w = tape.leaf(t(&[2, 2], &[1.0; 4]), true);
        let _ = tape.mul(b, w).unwrap();
        assert_eq!(tape.saved_scalars(), 4);
        let mut ng = Tape::<f64>::no_grad();
        let w = ng.leaf(t(&[2, 2], &[1.0; 4]), true);
        let _ = ng.exp(w);
        assert_eq!(ng.saved_scalars(), 0);
    }
}
