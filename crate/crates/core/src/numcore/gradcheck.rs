//! Central-difference verification of reverse-mode gradients.

use std::fmt;

use super::graph::{Graph, Var};
use super::params::{ParamGrads, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation half-width.
    pub eps: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Magnitude floor in the relative-error denominator, so entries whose
    /// true gradient is ~0 are judged on absolute error against this scale.
    pub floor: f64,
    /// Test hook: distort the backward pass for this parameter.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    /// False when re-evaluating the function at unchanged parameters gave a different value.
    pub deterministic: bool,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.deterministic && self.params.iter().all(|p| p.max_rel_error < self.tol)
    }

    /// Parameters sorted by decreasing error, failing ones only.
    pub fn failures(&self) -> Vec<&ParamCheck> {
        let mut bad: Vec<_> = self.params.iter().filter(|p| !(p.max_rel_error < self.tol)).collect();
        bad.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        bad
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            let mark = if p.max_rel_error < self.tol { "ok  " } else { "FAIL" };
            writeln!(
                f,
                "{mark} {:<40} entries={:<6} max_rel={:.3e} (idx {} analytic {:.6e} numeric {:.6e})",
                p.name, p.entries, p.max_rel_error, p.worst_index, p.analytic, p.numeric
            )?;
        }
        if !self.deterministic {
            writeln!(f, "FAIL function is not deterministic")?;
        }
        write!(
            f,
            "{} max relative error {:.3e} (tol {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tol
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = f(&mut g, store)?;
    Ok(g.scalar(v))
}

/// Step ratio for the second estimate taken when the first one disagrees,
/// which separates a kink crossed by the wide step from a wrong gradient.
const REFINE: f64 = 0.1;

fn central_difference<F>(f: &F, store: &mut ParamStore, id: ParamId, i: usize, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let orig = store.get(id).data()[i];
    store.get_mut(id).data_mut()[i] = orig + eps;
    let plus = evaluate(f, store);
    store.get_mut(id).data_mut()[i] = orig - eps;
    let minus = evaluate(f, store);
    store.get_mut(id).data_mut()[i] = orig;
    Ok((plus? - minus?) / (2.0 * eps))
}

/// Compares reverse-mode gradients of `f` against `(f(p+eps) - f(p-eps)) / 2eps`
/// for every entry of every trainable parameter. Entries that disagree are
/// re-estimated once with a step ten times smaller and keep the better match.
pub fn finite_diff_check<F>(store: &mut ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::InvalidInput(format!("eps must be positive, got {}", opts.eps)));
    }
    let mut g = Graph::new();
    if let Some(name) = &opts.corrupt {
        let id = store
            .id(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))?;
        g.corrupt_param_grad(id);
    }
    let loss = f(&mut g, store)?;
    let base = g.scalar(loss);
    let grads = g.backward(loss)?;
    let analytic: ParamGrads = g.param_grads(&grads, store.len());
    drop(g);

    let deterministic = evaluate(&f, store)?.to_bits() == base.to_bits();

    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        if !store.get(id).requires_grad() {
            continue;
        }
        let n = store.get(id).len();
        let zeros = vec![0.0; n];
        let an = analytic.get(id).unwrap_or(&zeros).to_vec();
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            entries: n,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..n {
            let mut numeric = central_difference(&f, store, id, i, opts.eps)?;
            let mut err = relative_error(an[i], numeric, opts.floor);
            if !(err < opts.tol) {
                let fine = central_difference(&f, store, id, i, opts.eps * REFINE)?;
                let fine_err = relative_error(an[i], fine, opts.floor);
                if fine_err < err {
                    numeric = fine;
                    err = fine_err;
                }
            }
            if err > check.max_rel_error || (i == 0 && err.is_nan()) || err.is_nan() {
                check.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                check.worst_index = i;
                check.analytic = an[i];
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        params,
        deterministic,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let mut s = ParamStore::new(1);
        let w = s.uniform("w", vec![5], 5).unwrap();
        let x = Tensor::vector(vec![0.3, -1.2, 2.0, 0.7, -0.1]);
        let r = finite_diff_check(
            &mut s,
            |g, st| {
                let wv = g.param(st, w);
                let xv = g.constant(&x);
                g.inner_product(wv, xv)
            },
            &GradCheckOptions { eps: 1e-4, ..Default::default() },
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-8, "{r}");
        assert!(r.passed());
    }

    #[test]
    fn square_at_one() {
        let mut s = ParamStore::new(0);
        let p = s.constant("p", vec![1], 1.0).unwrap();
        let r = finite_diff_check(
            &mut s,
            |g, st| {
                let v = g.param(st, p);
                let sq = g.square(v);
                Ok(g.sum(sq))
            },
            &GradCheckOptions { eps: 1e-4, ..Default::default() },
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-6);
    }

    #[test]
    fn kink_inside_the_step_is_refined() {
        let mut s = ParamStore::new(0);
        let p = s.constant("p", vec![1], 0.3e-5).unwrap();
        let r = finite_diff_check(
            &mut s,
            |g, st| {
                let v = g.param(st, p);
                let r = g.relu(v);
                Ok(g.sum(r))
            },
            &GradCheckOptions { eps: 1e-5, ..Default::default() },
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut s = ParamStore::new(0);
        s.uniform("p", vec![3], 3).unwrap();
        let r = finite_diff_check(&mut s, |g, _| Ok(g.constant(&Tensor::scalar(2.0))), &GradCheckOptions::default()).unwrap();
        assert!(r.passed());
        assert_eq!(r.max_rel_error(), 0.0);
    }

    #[test]
    fn nondeterminism_is_flagged() {
        use std::cell::Cell;
        let mut s = ParamStore::new(0);
        s.uniform("p", vec![1], 1).unwrap();
        let counter = Cell::new(0.0);
        let r = finite_diff_check(
            &mut s,
            |g, _| {
                counter.set(counter.get() + 1.0);
                Ok(g.constant(&Tensor::scalar(counter.get())))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.deterministic);
        assert!(!r.passed());
    }

    #[test]
    fn corrupted_backward_names_the_parameter() {
        let mut s = ParamStore::new(2);
        let a = s.uniform("a", vec![3], 3).unwrap();
        let b = s.uniform("b", vec![3], 3).unwrap();
        let r = finite_diff_check(
            &mut s,
            |g, st| {
                let av = g.param(st, a);
                let bv = g.param(st, b);
                g.inner_product(av, bv)
            },
            &GradCheckOptions { corrupt: Some("b".into()), ..Default::default() },
        )
        .unwrap();
        assert!(!r.passed());
        let fails = r.failures();
        assert_eq!(fails.len(), 1);
        assert_eq!(fails[0].name, "b");
    }
}
