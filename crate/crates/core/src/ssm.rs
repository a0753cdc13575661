//! Selective state-space (S6) layer.
//!
//! Per channel `d` and state slot `n` the layer runs the diagonal recurrence
//!
//! ```text
//! h_t = Ā_t ∘ h_{t−1} + B̄_t · x_t
//! y_t = C_t · h_t
//! ```
//!
//! where `Δ_t`, `B_t`, `C_t` are computed from the input at step `t`, and the
//! continuous parameters are discretized by zero-order hold:
//! `Ā = exp(Δa)`, `B̄ = (exp(Δa) − 1)/a · B` (elementwise, since `A` is
//! diagonal). `A` is stored as `log(−A)` so it stays strictly negative.

use crate::autodiff::{scan_forward, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Float;
use crate::scan::ScanMode;
use crate::tensor::{kernels, Tensor};

pub use crate::tensor::kernels::{
    zoh_a, zoh_gain, zoh_gain_exact, zoh_gain_series, ZOH_SERIES_THRESHOLD,
};

#[derive(Clone, Debug, PartialEq)]
pub struct S6Config {
    pub d_inner: usize,
    pub n_state: usize,
    /// Rank of the Δ projection; `None` means `ceil(d_inner / 16)`.
    pub dt_rank: Option<usize>,
    pub use_skip: bool,
    /// Keep `A` fixed at its initialization.
    pub freeze_a: bool,
}

impl S6Config {
    pub fn new(d_inner: usize) -> Self {
        Self {
            d_inner,
            n_state: 16,
            dt_rank: None,
            use_skip: false,
            freeze_a: false,
        }
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_rank
            .unwrap_or_else(|| self.d_inner.div_ceil(16))
            .max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_inner == 0 || self.n_state == 0 {
            return Err(Error::Config(format!(
                "d_inner and n_state must be positive (got {} and {})",
                self.d_inner, self.n_state
            )));
        }
        Ok(())
    }
}

/// Range of the initial `Δ = softplus(bias)`, sampled log-uniformly.
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

/// Parameter handles of one S6 layer.
#[derive(Clone, Debug)]
pub struct S6Layer {
    pub config: S6Config,
    /// `log(−A)`, shape `(d_inner, n_state)`.
    pub a_log: ParamId,
    pub w_dt_down: ParamId,
    pub w_dt_up: ParamId,
    pub dt_bias: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub d_skip: Option<ParamId>,
}

/// Per-step quantities captured from one forward pass, for interpretation.
#[derive(Clone, Debug)]
pub struct S6Trace<F> {
    /// `(T, D, N)`
    pub abar: Tensor<F>,
    /// `(T, D, N)`
    pub bbar: Tensor<F>,
    /// `(T, N)`
    pub c: Tensor<F>,
    /// Layer input `(T, D)`.
    pub x: Tensor<F>,
    /// Layer output `(T, D)`.
    pub y: Tensor<F>,
    /// Per-channel skip weights when the layer has them.
    pub d_skip: Option<Vec<F>>,
}

/// Selective parameters as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct SelectiveVars {
    pub delta: Var,
    pub b: Var,
    pub c: Var,
}

impl S6Layer {
    pub fn new<F: Float>(
        config: S6Config,
        prefix: &str,
        store: &mut ParamStore<F>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (d, n, r) = (config.d_inner, config.n_state, config.dt_rank());
        // S4D-real: A[c, n] = −(n + 1).
        let a_log: Vec<F> = (0..d * n)
            .map(|i| F::from_f64_lossy(((i % n) + 1) as f64).ln())
            .collect();
        let a_log = store.add(format!("{prefix}.a_log"), Tensor::new(vec![d, n], a_log)?);
        if config.freeze_a {
            store.set_trainable(a_log, false);
        }
        let w_dt_down = store.add_linear(format!("{prefix}.w_dt_down"), d, r, rng);
        let w_dt_up = store.add_linear(format!("{prefix}.w_dt_up"), r, d, rng);
        let (lo, hi) = (DT_INIT_RANGE.0.ln(), DT_INIT_RANGE.1.ln());
        let bias: Vec<F> = (0..d)
            .map(|_| F::from_f64_lossy(kernels::softplus_inv(rng.uniform_range(lo, hi).exp())))
            .collect();
        let dt_bias = store.add(format!("{prefix}.dt_bias"), Tensor::new(vec![d], bias)?);
        let w_b = store.add_linear(format!("{prefix}.w_b"), d, n, rng);
        let w_c = store.add_linear(format!("{prefix}.w_c"), d, n, rng);
        let d_skip = config
            .use_skip
            .then(|| store.add(format!("{prefix}.d_skip"), Tensor::full(vec![d], F::one())));
        Ok(Self {
            config,
            a_log,
            w_dt_down,
            w_dt_up,
            dt_bias,
            w_b,
            w_c,
            d_skip,
        })
    }

    /// `Δ = softplus(x·W_down·W_up + bias)`, `B = x·W_B`, `C = x·W_C`.
    pub fn selective_params<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        x: Var,
    ) -> Result<SelectiveVars> {
        let w_down = tape.param(store, self.w_dt_down);
        let w_up = tape.param(store, self.w_dt_up);
        let bias = tape.param(store, self.dt_bias);
        let low = tape.matmul(x, w_down)?;
        let up = tape.matmul(low, w_up)?;
        let pre = tape.add_row(up, bias)?;
        let delta = tape.softplus(pre);
        let w_b = tape.param(store, self.w_b);
        let w_c = tape.param(store, self.w_c);
        let b = tape.matmul(x, w_b)?;
        let c = tape.matmul(x, w_c)?;
        Ok(SelectiveVars { delta, b, c })
    }

    /// `A = −exp(log(−A))` as a tape node.
    pub fn a_matrix<'a, F: Float>(&self, store: &'a ParamStore<F>, tape: &mut Tape<'a, F>) -> Var {
        let a_log = tape.param(store, self.a_log);
        let e = tape.exp(a_log);
        tape.scale(e, -F::one())
    }

    /// Full layer over a `(T, d_inner)` input.
    pub fn forward<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        x: Var,
        mode: ScanMode,
        trace: Option<&mut Option<S6Trace<F>>>,
    ) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.config.d_inner {
            return Err(Error::shape("s6", tape.shape(x), &[0, self.config.d_inner]));
        }
        let sel = self.selective_params(store, tape, x)?;
        let a = self.a_matrix(store, tape);
        let abar = tape.zoh_a(sel.delta, a)?;
        let bbar = tape.zoh_b(sel.delta, a, sel.b)?;
        let mut y = tape.selective_scan(abar, bbar, sel.c, x, mode)?;
        let mut skip = None;
        if let Some(d) = self.d_skip {
            let dv = tape.param(store, d);
            let dx = tape.mul_row(x, dv)?;
            y = tape.add(y, dx)?;
            skip = Some(store.get(d).data().to_vec());
        }
        if let Some(slot) = trace {
            *slot = Some(S6Trace {
                abar: tape.value(abar).clone(),
                bbar: tape.value(bbar).clone(),
                c: tape.value(sel.c).clone(),
                x: tape.value(x).clone(),
                y: tape.value(y).clone(),
                d_skip: skip,
            });
        }
        Ok(y)
    }

    /// Recurrent state size: `d_inner · n_state`.
    pub fn state_len(&self) -> usize {
        self.config.d_inner * self.config.n_state
    }

    /// One recurrence step for a single token: updates `h` in place and
    /// returns `y_t`. Streaming a sequence through `step` reproduces the
    /// sequential scan bit for bit.
    pub fn step<F: Float>(&self, store: &ParamStore<F>, h: &mut [F], x_t: &[F]) -> Result<Vec<F>> {
        let (d, n, r) = (
            self.config.d_inner,
            self.config.n_state,
            self.config.dt_rank(),
        );
        if x_t.len() != d || h.len() != d * n {
            return Err(Error::shape("s6 step", &[x_t.len(), h.len()], &[d, d * n]));
        }
        let low = kernels::matmul(x_t, store.get(self.w_dt_down).data(), 1, d, r);
        let mut delta = kernels::matmul(&low, store.get(self.w_dt_up).data(), 1, r, d);
        for (v, &b) in delta.iter_mut().zip(store.get(self.dt_bias).data()) {
            *v = kernels::softplus(*v + b);
        }
        let b = kernels::matmul(x_t, store.get(self.w_b).data(), 1, d, n);
        let c = kernels::matmul(x_t, store.get(self.w_c).data(), 1, d, n);
        let a_log = store.get(self.a_log).data();
        let mut y = vec![F::zero(); d];
        for ch in 0..d {
            let dt = delta[ch];
            let mut acc = F::zero();
            for s in 0..n {
                let a = a_log[ch * n + s].exp() * -F::one();
                let abar = kernels::zoh_a(dt, a);
                let bbar = kernels::zoh_gain(dt, a) * b[s];
                let idx = ch * n + s;
                h[idx] = abar * h[idx] + bbar * x_t[ch];
                acc += c[s] * h[idx];
            }
            if !acc.is_finite() {
                return Err(Error::NonFinite {
                    what: "s6 step",
                    step: 0,
                });
            }
            y[ch] = acc;
        }
        if let Some(dp) = self.d_skip {
            for (yv, (&dv, &xv)) in y.iter_mut().zip(store.get(dp).data().iter().zip(x_t)) {
                *yv += xv * dv;
            }
        }
        Ok(y)
    }
}

/// Zero-order-hold discretization for diagonal `A`.
///
/// `a`: `(D, N)` strictly negative; `b`: `(T, N)`; `delta`: `(T, D)` positive.
/// Returns `(Ā, B̄)`, each `(T, D, N)`.
pub fn discretize<F: Float>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    delta: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let [d, n] = a.shape()[..] else {
        return Err(Error::invalid(
            "discretize",
            format!("A must be (D, N), got {:?}", a.shape()),
        ));
    };
    let t_len = delta.rows();
    if delta.shape() != [t_len, d] || b.shape() != [t_len, n] {
        return Err(Error::shape("discretize", delta.shape(), b.shape()));
    }
    let mut abar = vec![F::zero(); t_len * d * n];
    let mut bbar = vec![F::zero(); t_len * d * n];
    for t in 0..t_len {
        for ch in 0..d {
            let dt = delta.data()[t * d + ch];
            for s in 0..n {
                let av = a.data()[ch * n + s];
                let idx = (t * d + ch) * n + s;
                abar[idx] = kernels::zoh_a(dt, av);
                bbar[idx] = kernels::zoh_gain(dt, av) * b.data()[t * n + s];
                if !abar[idx].is_finite() || !bbar[idx].is_finite() {
                    return Err(Error::NonFinite {
                        what: "discretize",
                        step: t,
                    });
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![t_len, d, n], abar)?,
        Tensor::new(vec![t_len, d, n], bbar)?,
    ))
}

fn scan_dims<F: Float>(
    abar: &Tensor<F>,
    bbar: &Tensor<F>,
    c: &Tensor<F>,
    x: &Tensor<F>,
) -> Result<(usize, usize, usize)> {
    let [t_len, d, n] = abar.shape()[..] else {
        return Err(Error::invalid(
            "scan",
            format!("Ā must be (T, D, N), got {:?}", abar.shape()),
        ));
    };
    if bbar.shape() != abar.shape() || c.shape() != [t_len, n] || x.shape() != [t_len, d] {
        return Err(Error::shape("scan", abar.shape(), x.shape()));
    }
    Ok((t_len, d, n))
}

fn scan_with<F: Float>(
    mode: ScanMode,
    abar: &Tensor<F>,
    bbar: &Tensor<F>,
    c: &Tensor<F>,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (t_len, d, n) = scan_dims(abar, bbar, c, x)?;
    let (y, _) = scan_forward(
        mode,
        abar.data(),
        bbar.data(),
        c.data(),
        x.data(),
        t_len,
        d,
        n,
    );
    Tensor::new(vec![t_len, d], y)
}

/// Left-to-right evaluation of the selective recurrence; returns `y (T, D)`.
pub fn scan_sequential<F: Float>(
    abar: &Tensor<F>,
    bbar: &Tensor<F>,
    c: &Tensor<F>,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    scan_with(ScanMode::Sequential, abar, bbar, c, x)
}

/// Tree-scan evaluation of the same recurrence.
pub fn scan_parallel<F: Float>(
    abar: &Tensor<F>,
    bbar: &Tensor<F>,
    c: &Tensor<F>,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    scan_with(ScanMode::Parallel, abar, bbar, c, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(d: usize, n: usize, seed: u64) -> (ParamStore<f64>, S6Layer) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let cfg = S6Config {
            n_state: n,
            ..S6Config::new(d)
        };
        let l = S6Layer::new(cfg, "s6", &mut store, &mut rng).unwrap();
        (store, l)
    }

    fn random_x(t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        Tensor::new(
            vec![t, d],
            (0..t * d).map(|_| rng.standard_normal()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_input_gives_softplus_of_bias() {
        let (store, l) = layer(4, 3, 1);
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::zeros(vec![5, 4]));
        let sel = l.selective_params(&store, &mut tape, x).unwrap();
        let bias = store.get(l.dt_bias).data();
        for row in tape.value(sel.delta).data().chunks(4) {
            for (v, &b) in row.iter().zip(bias) {
                assert_eq!(*v, kernels::softplus(b));
            }
        }
    }

    #[test]
    fn delta_is_positive() {
        let (store, l) = layer(6, 4, 2);
        let mut tape = Tape::no_grad();
        let x = tape.constant(random_x(20, 6, 3).cast::<f64>());
        let x = tape.scale(x, 30.0);
        let sel = l.selective_params(&store, &mut tape, x).unwrap();
        assert!(tape.value(sel.delta).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_b_projection_silences_layer() {
        let (mut store, l) = layer(4, 3, 4);
        store.get_mut(l.w_b).data_mut().fill(0.0);
        let mut tape = Tape::no_grad();
        let x = tape.constant(random_x(7, 4, 5));
        let y = l
            .forward(&store, &mut tape, x, ScanMode::Parallel, None)
            .unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discretize_closed_form_and_limit() {
        let a = Tensor::<f64>::from_f64(vec![1, 1], &[-1.0]).unwrap();
        let b = Tensor::from_f64(vec![1, 1], &[1.0]).unwrap();
        let dt = Tensor::from_f64(vec![1, 1], &[2f64.ln()]).unwrap();
        let (ab, bb) = discretize(&a, &b, &dt).unwrap();
        assert!((ab.item() - 0.5).abs() < 1e-12);
        assert!((bb.item() - 0.5).abs() < 1e-12);

        let dt = Tensor::from_f64(vec![1, 1], &[1e-12]).unwrap();
        let (ab, bb) = discretize(&a, &b, &dt).unwrap();
        assert!((ab.item() - 1.0).abs() < 1e-11);
        assert!(bb.item().abs() < 1e-11);
    }

    #[test]
    fn discretize_reports_timestep_of_overflow() {
        let a = Tensor::<f64>::from_f64(vec![1, 1], &[-1.0]).unwrap();
        let b = Tensor::from_f64(vec![3, 1], &[1.0, 1.0, 1.0]).unwrap();
        let dt = Tensor::from_f64(vec![3, 1], &[0.1, 0.1, -1e6]).unwrap();
        match discretize(&a, &b, &dt) {
            Err(Error::NonFinite { step, .. }) => assert_eq!(step, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn memoryless_and_zero_input() {
        let (t, d, n) = (4, 2, 3);
        let mut rng = Rng::new(8);
        let mut r = |k: usize| {
            Tensor::new(
                vec![k],
                (0..k).map(|_| rng.standard_normal()).collect::<Vec<f64>>(),
            )
            .unwrap()
        };
        let bbar = r(t * d * n).reshape(vec![t, d, n]).unwrap();
        let c = r(t * n).reshape(vec![t, n]).unwrap();
        let x = r(t * d).reshape(vec![t, d]).unwrap();
        let zero_a = Tensor::zeros(vec![t, d, n]);
        let y = scan_sequential(&zero_a, &bbar, &c, &x).unwrap();
        for tt in 0..t {
            for ch in 0..d {
                let want: f64 = (0..n)
                    .map(|s| {
                        c.data()[tt * n + s]
                            * bbar.data()[(tt * d + ch) * n + s]
                            * x.data()[tt * d + ch]
                    })
                    .sum();
                assert!((y.data()[tt * d + ch] - want).abs() < 1e-14);
            }
        }
        let y0 = scan_parallel(
            &Tensor::full(vec![t, d, n], 0.9),
            &bbar,
            &c,
            &Tensor::zeros(vec![t, d]),
        )
        .unwrap();
        assert!(y0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_recurrence_scalar() {
        let a = Tensor::<f64>::from_f64(vec![3, 1, 1], &[0.5; 3]).unwrap();
        let b = Tensor::from_f64(vec![3, 1, 1], &[1.0; 3]).unwrap();
        let c = Tensor::from_f64(vec![3, 1], &[1.0; 3]).unwrap();
        let x = Tensor::from_f64(vec![3, 1], &[1.0; 3]).unwrap();
        assert_eq!(
            scan_sequential(&a, &b, &c, &x).unwrap().data(),
            &[1.0, 1.5, 1.75]
        );
        assert_eq!(
            scan_parallel(&a, &b, &c, &x).unwrap().data(),
            &[1.0, 1.5, 1.75]
        );
    }

    #[test]
    fn streaming_step_matches_sequential_scan_bitwise() {
        let (store, l) = layer(8, 4, 12);
        let x = random_x(32, 8, 13);
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let y = l
            .forward(&store, &mut tape, xv, ScanMode::Sequential, None)
            .unwrap();
        let want = tape.value(y).data().to_vec();
        let mut h = vec![0.0; l.state_len()];
        let mut got = Vec::new();
        for t in 0..32 {
            got.extend(l.step(&store, &mut h, x.row(t)).unwrap());
        }
        assert_eq!(
            got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            want.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(h.len(), 8 * 4);
    }

    #[test]
    fn long_sequence_stays_bounded() {
        let (store, l) = layer(8, 16, 21);
        let x = random_x(4096, 8, 22);
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x);
        let y = l
            .forward(&store, &mut tape, xv, ScanMode::Parallel, None)
            .unwrap();
        let max = tape
            .value(y)
            .data()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max.is_finite() && max < 1e3, "{max}");
    }
}
