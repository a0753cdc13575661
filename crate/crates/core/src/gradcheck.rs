//! Central finite-difference checks of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub len: usize,
    /// `max|analytic − numeric| / max(max|analytic|, max|numeric|)` over the group.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<32} n={:<6} rel={:.3e} abs={:.3e} {}",
                g.name,
                g.len,
                g.rel_err,
                g.max_abs_err,
                if g.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Central difference `(f(θ+h) − f(θ−h)) / 2h` for every scalar of `id`.
pub fn numeric_gradient<L>(
    store: &ParamStore<f64>,
    loss: &L,
    id: ParamId,
    h: f64,
) -> Result<Vec<f64>>
where
    L: for<'a> Fn(&'a ParamStore<f64>, &mut Tape<'a, f64>) -> Result<Var>,
{
    let mut work = store.clone();
    let n = work.get(id).len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + h;
        let plus = eval(&work, loss)?;
        work.get_mut(id).data_mut()[i] = orig - h;
        let minus = eval(&work, loss)?;
        work.get_mut(id).data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

fn eval<L>(store: &ParamStore<f64>, loss: &L) -> Result<f64>
where
    L: for<'a> Fn(&'a ParamStore<f64>, &mut Tape<'a, f64>) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let v = loss(store, &mut tape)?;
    Ok(tape.value(v).item())
}

/// Compares tape gradients of `loss` against central differences for every
/// trainable parameter in `store`. Report-only: failures show up in the
/// returned report, not as errors.
pub fn grad_check<L>(store: &ParamStore<f64>, loss: L, h: f64, tol: f64) -> Result<GradCheckReport>
where
    L: for<'a> Fn(&'a ParamStore<f64>, &mut Tape<'a, f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = loss(store, &mut tape)?;
    let analytic = tape.backward(v)?.into_param_grads(store.len());

    let mut groups = Vec::new();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let numeric = numeric_gradient(store, &loss, id, h)?;
        let zeros = vec![0.0; numeric.len()];
        let a = analytic.get(id).map_or(&zeros[..], |t| t.data());
        let mut max_abs_err = 0.0f64;
        let mut scale = 0.0f64;
        for (&x, &y) in a.iter().zip(&numeric) {
            max_abs_err = max_abs_err.max((x - y).abs());
            scale = scale.max(x.abs()).max(y.abs());
        }
        let rel_err = if scale > 1e-12 {
            max_abs_err / scale
        } else {
            max_abs_err
        };
        groups.push(GroupReport {
            name: p.name.clone(),
            len: numeric.len(),
            rel_err,
            max_abs_err,
            passed: rel_err <= tol,
        });
    }
    Ok(GradCheckReport { tol, groups })
}
