use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the component with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error with a small absolute floor, so components whose true
/// gradient is zero are compared absolutely.
pub(crate) fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Checks the gradient of a scalar function `f` at `x` against central differences.
///
/// `f` records its computation on the supplied graph, reading the input from
/// the given leaf, and returns a scalar node.
pub fn grad_check<F, Fun>(f: Fun, x: &Tensor<F>, eps: f64) -> Result<GradCheckReport>
where
    F: Real,
    Fun: Fn(&mut Graph<F>, Var) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-5, 1e-2]")));
    }
    let eval = |t: &Tensor<F>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t, false);
        let out = f(&mut g, v)?;
        Ok(g.scalar(out).f64())
    };

    let mut g = Graph::new();
    let leaf = g.param(x);
    let out = f(&mut g, leaf)?;
    let base = g.scalar(out).f64();
    if eval(x)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }
    let grads = g.backward(out)?;
    let analytic: Vec<f64> = match grads.get(leaf) {
        Some(gr) => gr.iter().map(|v| v.f64()).collect(),
        None => vec![0.0; x.len()],
    };

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = F::of(orig.f64() + eps);
        let plus = eval(&probe)?;
        probe.data_mut()[i] = F::of(orig.f64() - eps);
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        analytic,
        numeric,
    };
    for (i, (&a, &n)) in report.analytic.iter().zip(&report.numeric).enumerate() {
        let rel = rel_error(a, n);
        report.max_abs_error = report.max_abs_error.max((a - n).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::<f64>::from_fn(vec![7], |i| (i as f64 * 0.37).sin());
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v, v);
                Ok(g.sum(sq))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn eps_range_enforced() {
        let x = Tensor::<f64>::zeros(vec![2]);
        assert!(grad_check(|g, v| Ok(g.sum(v)), &x, 1e-1).is_err());
        assert!(grad_check(|g, v| Ok(g.sum(v)), &x, 1e-7).is_err());
    }

    #[test]
    fn non_deterministic_function_rejected() {
        let calls = Cell::new(0u32);
        let x = Tensor::<f64>::from_fn(vec![3], |i| i as f64 + 1.0);
        let res = grad_check(
            |g, v| {
                calls.set(calls.get() + 1);
                let s = g.sum(v);
                Ok(g.scale(s, 1.0 + calls.get() as f64))
            },
            &x,
            1e-3,
        );
        assert!(matches!(res, Err(Error::NonDeterministic)));
    }
}
