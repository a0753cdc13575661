//! Hidden attention of a selective SSM layer: the influence tensor
//! `α[m,i,j] = C_i·(Π_{k=j+1..i} Ā_k[m])·B̄_j[m]`, its per-channel row
//! normalization, the channel-summed softmax over one target step, and
//! CSV/SVG exports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::ssm::S6Trace;

/// `M·T²` above which materialization needs `force` (256 channels at T=1024).
pub const MAX_ALPHA_SCALARS: usize = 256 * 1024 * 1024;

/// Denominators smaller than this leave a normalized row undefined.
pub const DENOM_EPS: f64 = 1e-12;

/// `α` with shape `(M, T, T)`; entries with `j > i` are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceTensor {
    pub channels: usize,
    pub t_len: usize,
    data: Vec<f64>,
}

impl InfluenceTensor {
    pub fn get(&self, m: usize, i: usize, j: usize) -> f64 {
        self.data[(m * self.t_len + i) * self.t_len + j]
    }

    /// Row `i` of channel `m`, all `T` columns.
    pub fn row(&self, m: usize, i: usize) -> &[f64] {
        let t = self.t_len;
        &self.data[(m * t + i) * t..(m * t + i + 1) * t]
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        let tt = self.t_len * self.t_len;
        &self.data[m * tt..(m + 1) * tt]
    }

    /// `Σ_{j≤i} α[m,i,j]·x[j,m]` for every `(i, m)`, `x` of shape `(T, M)`
    /// row-major.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (t, mm) = (self.t_len, self.channels);
        let mut y = vec![0.0; t * mm];
        for m in 0..mm {
            for i in 0..t {
                y[i * mm + m] = self.row(m, i)[..=i]
                    .iter()
                    .enumerate()
                    .map(|(j, &a)| a * x[j * mm + m])
                    .sum();
            }
        }
        y
    }
}

/// Materializes `α` from a captured S6 pass. A layer with a skip term `D`
/// contributes `D[m]` on the diagonal so that `apply` still reproduces the
/// layer output.
pub fn materialize_alpha<F: Float>(trace: &S6Trace<F>, force: bool) -> Result<InfluenceTensor> {
    let shape = trace.abar.shape();
    if shape.len() != 3 || trace.bbar.shape() != shape {
        return Err(Error::invalid(
            "materialize_alpha",
            format!(
                "Ā {:?} and B̄ {:?} must both be (T, M, N)",
                shape,
                trace.bbar.shape()
            ),
        ));
    }
    let (t, mm, n) = (shape[0], shape[1], shape[2]);
    if trace.c.shape() != [t, n] {
        return Err(Error::shape("materialize_alpha", shape, trace.c.shape()));
    }
    if let Some(d) = &trace.d_skip {
        if d.len() != mm {
            return Err(Error::invalid(
                "materialize_alpha",
                format!("skip has {} channels, trace has {mm}", d.len()),
            ));
        }
    }
    let scalars = mm.saturating_mul(t).saturating_mul(t);
    if scalars > MAX_ALPHA_SCALARS && !force {
        return Err(Error::TooLarge {
            scalars,
            limit: MAX_ALPHA_SCALARS,
        });
    }
    let abar = trace.abar.to_f64_vec();
    let bbar = trace.bbar.to_f64_vec();
    let c = trace.c.to_f64_vec();
    let skip: Option<Vec<f64>> = trace
        .d_skip
        .as_ref()
        .map(|d| d.iter().map(|v| v.as_f64()).collect());

    let mut data = vec![0.0; scalars];
    data.par_chunks_mut(t * t)
        .enumerate()
        .for_each(|(m, grid)| {
            let mut prod = vec![0.0; n];
            for i in 0..t {
                let ci = &c[i * n..(i + 1) * n];
                prod.fill(1.0);
                // walk j downwards, extending Π Ā_k by one factor per column
                for j in (0..=i).rev() {
                    let base = (j * mm + m) * n;
                    let mut s = 0.0;
                    for k in 0..n {
                        s += ci[k] * prod[k] * bbar[base + k];
                    }
                    grid[i * t + j] = s;
                    for k in 0..n {
                        prod[k] *= abar[base + k];
                    }
                }
                if let Some(d) = &skip {
                    grid[i * t + i] += d[m];
                }
            }
        });
    Ok(InfluenceTensor {
        channels: mm,
        t_len: t,
        data,
    })
}

/// Row-normalized influence `γ[m,i,j] = α[m,i,j] / Σ_{k<i} α[m,i,k]` for
/// `j < i`. Row 0 and rows whose denominator is within `DENOM_EPS` of zero
/// are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceWeights {
    pub channels: usize,
    pub t_len: usize,
    /// Indexed `[m][i]`; a defined row has exactly `i` entries.
    pub rows: Vec<Vec<Option<Vec<f64>>>>,
}

pub fn normalize_row(alpha_row: &[f64]) -> Option<Vec<f64>> {
    if alpha_row.is_empty() {
        return None;
    }
    let den: f64 = alpha_row.iter().sum();
    if !den.is_finite() || den.abs() < DENOM_EPS {
        return None;
    }
    Some(alpha_row.iter().map(|a| a / den).collect())
}

pub fn sequence_weights(alpha: &InfluenceTensor) -> SequenceWeights {
    let rows = (0..alpha.channels)
        .map(|m| {
            (0..alpha.t_len)
                .map(|i| normalize_row(&alpha.row(m, i)[..i]))
                .collect()
        })
        .collect();
    SequenceWeights {
        channels: alpha.channels,
        t_len: alpha.t_len,
        rows,
    }
}

/// Channel-summed influence `β_j` on target `i` and its softmax `γ_j`, both
/// over `j < i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExerciseWeights {
    pub target: usize,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl ExerciseWeights {
    pub fn from_beta(target: usize, beta: Vec<f64>) -> Self {
        let gamma = softmax(&beta);
        Self {
            target,
            beta,
            gamma,
        }
    }

    /// Indices `j` sorted by decreasing weight, at most `k` of them.
    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<usize> = (0..self.gamma.len()).collect();
        idx.sort_by(|&a, &b| self.gamma[b].total_cmp(&self.gamma[a]).then(a.cmp(&b)));
        idx.into_iter()
            .take(k)
            .map(|j| (j, self.gamma[j]))
            .collect()
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn exercise_weights(alpha: &InfluenceTensor, target: usize) -> Result<ExerciseWeights> {
    if target == 0 || target >= alpha.t_len {
        return Err(Error::invalid(
            "exercise_weights",
            format!("target step must be in 1..{}, got {target}", alpha.t_len),
        ));
    }
    let beta = (0..target)
        .map(|j| (0..alpha.channels).map(|m| alpha.get(m, target, j)).sum())
        .collect();
    Ok(ExerciseWeights::from_beta(target, beta))
}

/// `%g`-style formatting with six significant digits.
pub fn fmt_sig6(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-5..6).contains(&exp) {
        let mant = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mant}e{sign}{:02}", exp.abs())
    } else {
        trim_zeros(&format!("{:.*}", (5 - exp) as usize, v)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// CSV grid with header `j0..j{T−1}` and one line per target `i`; cells
/// outside a row's defined range are empty, undefined rows are all empty.
pub fn grid_csv(rows: &[Option<Vec<f64>>], t_len: usize) -> String {
    let mut s = (0..t_len)
        .map(|j| format!("j{j}"))
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    for row in rows {
        let cells: Vec<String> = (0..t_len)
            .map(|j| match row {
                Some(r) if j < r.len() => fmt_sig6(r[j]),
                _ => String::new(),
            })
            .collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Top-`k` table `rank,j,label,weight`.
pub fn top_k_csv(w: &ExerciseWeights, k: usize, labels: &[String]) -> String {
    let mut s = String::from("rank,j,label,weight\n");
    for (rank, (j, g)) in w.top_k(k).into_iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{j},{},{}",
            rank + 1,
            labels.get(j).map_or("", String::as_str),
            fmt_sig6(g)
        );
    }
    s
}

const CELL: f64 = 18.0;
const MARGIN: f64 = 90.0;

/// Blue for negative, white for zero, red for positive; `v` in `[−1, 1]`.
fn diverging(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    let (r, g, b) = if v >= 0.0 {
        (255, fade(v), fade(v))
    } else {
        (fade(v), fade(v), 255)
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Standalone SVG of a lower-triangular grid; row `i` holds the weights on
/// columns `j < row.len()`. Labels read `concept(response)`.
pub fn heatmap_svg(title: &str, rows: &[Option<Vec<f64>>], labels: &[String]) -> String {
    let n_rows = rows.len();
    let n_cols = rows
        .iter()
        .flatten()
        .map(Vec::len)
        .max()
        .unwrap_or(0)
        .max(1);
    let scale = rows
        .iter()
        .flatten()
        .flatten()
        .fold(0.0f64, |a, &v| a.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let width = MARGIN * 2.0 + CELL * n_cols as f64 + 60.0;
    let height = MARGIN * 2.0 + CELL * n_rows as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="9">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="20" font-size="13">{}</text>"#,
        xml_escape(title)
    );
    for (i, row) in rows.iter().enumerate() {
        let y = MARGIN + CELL * i as f64;
        let label = labels.get(i).map_or(String::new(), |l| xml_escape(l));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{label}</text>"#,
            MARGIN - 4.0,
            y + CELL * 0.7
        );
        match row {
            Some(r) => {
                for (j, &v) in r.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="rgb(221,221,221)" stroke-width="0.5"><title>i={i} j={j} {}</title></rect>"#,
                        MARGIN + CELL * j as f64,
                        diverging(v / scale),
                        fmt_sig6(v)
                    );
                }
            }
            None if i > 0 => {
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" fill="gray">undefined</text>"#,
                    MARGIN + 2.0,
                    y + CELL * 0.7
                );
            }
            None => {}
        }
    }
    let y_axis = MARGIN + CELL * n_rows as f64 + 4.0;
    for j in 0..n_cols {
        let x = MARGIN + CELL * j as f64 + CELL * 0.6;
        let label = labels.get(j).map_or(String::new(), |l| xml_escape(l));
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y_axis}" transform="rotate(60 {x} {y_axis})">{label}</text>"#
        );
    }
    // color bar
    let bx = MARGIN + CELL * n_cols as f64 + 20.0;
    for k in 0..=20 {
        let v = 1.0 - k as f64 / 10.0;
        let _ = writeln!(
            s,
            r#"<rect x="{bx}" y="{}" width="12" height="6" fill="{}"/>"#,
            MARGIN + 6.0 * k as f64,
            diverging(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}">{}</text>"#,
        bx + 16.0,
        MARGIN + 6.0,
        fmt_sig6(scale)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}">0</text>"#,
        bx + 16.0,
        MARGIN + 66.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}">{}</text>"#,
        bx + 16.0,
        MARGIN + 126.0,
        fmt_sig6(-scale)
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn trace(t: usize, m: usize, n: usize, seed: u64) -> S6Trace<f64> {
        let mut rng = crate::Rng::new(seed);
        let mut r = |len: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..len).map(|_| rng.uniform_range(lo, hi)).collect()
        };
        let abar = Tensor::new(vec![t, m, n], r(t * m * n, 0.5, 0.99)).unwrap();
        let bbar = Tensor::new(vec![t, m, n], r(t * m * n, -1.0, 1.0)).unwrap();
        let c = Tensor::new(vec![t, n], r(t * n, -1.0, 1.0)).unwrap();
        let x = Tensor::new(vec![t, m], r(t * m, -1.0, 1.0)).unwrap();
        let y = crate::ssm::scan_sequential(&abar, &bbar, &c, &x).unwrap();
        S6Trace {
            abar,
            bbar,
            c,
            x,
            y,
            d_skip: None,
        }
    }

    #[test]
    fn zero_pattern_and_diagonal() {
        let tr = trace(7, 3, 4, 1);
        let a = materialize_alpha(&tr, false).unwrap();
        for m in 0..3 {
            for i in 0..7 {
                for j in i + 1..7 {
                    assert_eq!(a.get(m, i, j), 0.0);
                }
                let diag: f64 = (0..4)
                    .map(|k| tr.c.data()[i * 4 + k] * tr.bbar.data()[(i * 3 + m) * 4 + k])
                    .sum();
                assert!((a.get(m, i, i) - diag).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_direct_product_formula() {
        let tr = trace(6, 2, 3, 2);
        let a = materialize_alpha(&tr, false).unwrap();
        let (ab, bb, c) = (tr.abar.data(), tr.bbar.data(), tr.c.data());
        for m in 0..2 {
            for i in 0..6 {
                for j in 0..=i {
                    let want: f64 = (0..3)
                        .map(|k| {
                            let p: f64 = (j + 1..=i).map(|q| ab[(q * 2 + m) * 3 + k]).product();
                            c[i * 3 + k] * p * bb[(j * 2 + m) * 3 + k]
                        })
                        .sum();
                    assert!((a.get(m, i, j) - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn reconstructs_layer_output() {
        let tr = trace(20, 5, 4, 3);
        let y = materialize_alpha(&tr, false).unwrap().apply(tr.x.data());
        for (a, b) in y.iter().zip(tr.y.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn memory_guard() {
        let tr = S6Trace::<f64> {
            abar: Tensor::zeros(vec![1025, 256, 1]),
            bbar: Tensor::zeros(vec![1025, 256, 1]),
            c: Tensor::zeros(vec![1025, 1]),
            x: Tensor::zeros(vec![1025, 256]),
            y: Tensor::zeros(vec![1025, 256]),
            d_skip: None,
        };
        assert!(matches!(
            materialize_alpha(&tr, false),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn equal_weights_normalize_to_half() {
        assert_eq!(normalize_row(&[2.0, 2.0]), Some(vec![0.5, 0.5]));
        assert_eq!(normalize_row(&[]), None);
        assert_eq!(normalize_row(&[1.0, -1.0 + 1e-14]), None);
    }

    #[test]
    fn uniform_beta_is_uniform_gamma() {
        let w = ExerciseWeights::from_beta(4, vec![0.3; 4]);
        assert!(w.gamma.iter().all(|&g| (g - 0.25).abs() < 1e-15));
        let big = softmax(&[1000.0, 1000.0]);
        assert_eq!(big, vec![0.5, 0.5]);
    }

    #[test]
    fn top_k_orders_by_weight() {
        let w = ExerciseWeights::from_beta(3, vec![0.0, 2.0, 1.0]);
        let top: Vec<usize> = w.top_k(2).into_iter().map(|(j, _)| j).collect();
        assert_eq!(top, [1, 2]);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.5), "0.5");
        assert_eq!(fmt_sig6(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_sig6(123456789.0), "1.23457e+08");
        assert_eq!(fmt_sig6(-2.5e-7), "-2.5e-07");
        assert_eq!(fmt_sig6(999999.7), "1e+06");
        assert_eq!(fmt_sig6(0.0001), "0.0001");
    }

    #[test]
    fn two_by_two_grid_has_one_defined_row() {
        let a = InfluenceTensor {
            channels: 1,
            t_len: 2,
            data: vec![1.0, 0.0, 3.0, 2.0],
        };
        let g = sequence_weights(&a);
        let csv = grid_csv(&g.rows[0], 2);
        assert_eq!(csv, "j0,j1\n,\n1,\n");
    }

    #[test]
    fn svg_is_self_contained() {
        let rows = vec![None, Some(vec![1.0]), Some(vec![-0.5, 1.5])];
        let labels: Vec<String> = ["3(1)", "7(0)", "3(0)"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let svg = heatmap_svg("layer 0 channel 1", &rows, &labels);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("7(0)"));
        assert!(!svg.contains("href"));
    }
}
