//! First-order linear recurrences `h_t = a_t·h_{t−1} + b_t` (with `h_{−1} = 0`)
//! evaluated either left to right or with a work-efficient tree scan.
//!
//! Inputs are `(T, lanes)` row-major buffers; every lane is an independent
//! recurrence. The tree scan treats each step as the affine map
//! `h ↦ a·h + b` and composes maps with
//!
//! ```text
//! (a₂, b₂) ∘ (a₁, b₁) = (a₂·a₁, a₂·b₁ + b₂)      // apply (a₁,b₁) first
//! ```
//!
//! which is associative, so prefixes can be formed in any bracketing. The
//! bracketing used here is the fixed up-sweep/down-sweep tree over the
//! sequence padded to a power of two; it does not depend on thread count or
//! input values, so results are reproducible bit for bit.

use crate::scalar::Float;

/// How a recurrence is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScanMode {
    Sequential,
    #[default]
    Parallel,
}

impl std::str::FromStr for ScanMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(ScanMode::Sequential),
            "parallel" => Ok(ScanMode::Parallel),
            other => Err(format!("unknown scan mode {other:?}")),
        }
    }
}

impl std::fmt::Display for ScanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScanMode::Sequential => "sequential",
            ScanMode::Parallel => "parallel",
        })
    }
}

/// `later ∘ earlier`.
#[inline]
pub fn combine<F: Float>(later: (F, F), earlier: (F, F)) -> (F, F) {
    (later.0 * earlier.0, later.0 * earlier.1 + later.1)
}

pub fn recurrence<F: Float>(mode: ScanMode, a: &[F], b: &[F], lanes: usize) -> Vec<F> {
    match mode {
        ScanMode::Sequential => recurrence_sequential(a, b, lanes),
        ScanMode::Parallel => recurrence_tree(a, b, lanes),
    }
}

pub fn recurrence_sequential<F: Float>(a: &[F], b: &[F], lanes: usize) -> Vec<F> {
    assert_eq!(a.len(), b.len());
    let t_len = a.len().checked_div(lanes).unwrap_or(0);
    let mut h = vec![F::zero(); a.len()];
    if t_len == 0 {
        return h;
    }
    h[..lanes].copy_from_slice(&b[..lanes]);
    for t in 1..t_len {
        let (prev, cur) = h.split_at_mut(t * lanes);
        let prev = &prev[(t - 1) * lanes..];
        let cur = &mut cur[..lanes];
        let at = &a[t * lanes..(t + 1) * lanes];
        let bt = &b[t * lanes..(t + 1) * lanes];
        for l in 0..lanes {
            cur[l] = at[l] * prev[l] + bt[l];
        }
    }
    h
}

/// Blelloch up-sweep/down-sweep scan, vectorized across lanes.
pub fn recurrence_tree<F: Float>(a: &[F], b: &[F], lanes: usize) -> Vec<F> {
    assert_eq!(a.len(), b.len());
    let t_len = a.len().checked_div(lanes).unwrap_or(0);
    if t_len == 0 {
        return Vec::new();
    }
    let n = t_len.next_power_of_two();
    // Padding slots hold the identity map (1, 0).
    let mut sa = vec![F::one(); n * lanes];
    let mut sb = vec![F::zero(); n * lanes];
    sa[..a.len()].copy_from_slice(a);
    sb[..b.len()].copy_from_slice(b);

    // Up-sweep: slot i accumulates the composition of its subtree.
    let mut half = 1;
    while half < n {
        let stride = 2 * half;
        let mut i = stride - 1;
        while i < n {
            let left = i - half;
            for l in 0..lanes {
                let (na, nb) = combine(
                    (sa[i * lanes + l], sb[i * lanes + l]),
                    (sa[left * lanes + l], sb[left * lanes + l]),
                );
                sa[i * lanes + l] = na;
                sb[i * lanes + l] = nb;
            }
            i += stride;
        }
        half = stride;
    }

    // Down-sweep: turn subtree totals into exclusive prefixes.
    for l in 0..lanes {
        sa[(n - 1) * lanes + l] = F::one();
        sb[(n - 1) * lanes + l] = F::zero();
    }
    let mut half = n / 2;
    while half >= 1 {
        let stride = 2 * half;
        let mut i = stride - 1;
        while i < n {
            let left = i - half;
            for l in 0..lanes {
                let li = left * lanes + l;
                let ii = i * lanes + l;
                let left_total = (sa[li], sb[li]);
                let prefix = (sa[ii], sb[ii]);
                sa[li] = prefix.0;
                sb[li] = prefix.1;
                let (na, nb) = combine(left_total, prefix);
                sa[ii] = na;
                sb[ii] = nb;
            }
            i += stride;
        }
        half /= 2;
    }

    // Exclusive prefix applied to h_{−1} = 0 is its offset; step t finishes it.
    let mut h = vec![F::zero(); t_len * lanes];
    for t in 0..t_len {
        for l in 0..lanes {
            let idx = t * lanes + l;
            h[idx] = a[idx] * sb[idx] + b[idx];
        }
    }
    h
}

/// Adjoint of a recurrence: `g_t = c_t + a_{t+1}·g_{t+1}` (with `g_T = 0`),
/// evaluated in reverse time with the same strategy as the forward pass.
pub fn adjoint_recurrence<F: Float>(mode: ScanMode, a: &[F], cot: &[F], lanes: usize) -> Vec<F> {
    let t_len = a.len().checked_div(lanes).unwrap_or(0);
    let mut ra = vec![F::one(); a.len()];
    let mut rc = vec![F::zero(); a.len()];
    for s in 0..t_len {
        let t = t_len - 1 - s;
        rc[s * lanes..(s + 1) * lanes].copy_from_slice(&cot[t * lanes..(t + 1) * lanes]);
        if s > 0 {
            ra[s * lanes..(s + 1) * lanes].copy_from_slice(&a[(t + 1) * lanes..(t + 2) * lanes]);
        }
    }
    let rg = recurrence(mode, &ra, &rc, lanes);
    let mut g = vec![F::zero(); a.len()];
    for s in 0..t_len {
        let t = t_len - 1 - s;
        g[t * lanes..(t + 1) * lanes].copy_from_slice(&rg[s * lanes..(s + 1) * lanes]);
    }
    g
}
