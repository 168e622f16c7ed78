//! Central-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: Scalar = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: Scalar,
    /// `(parameter, flat index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Scalar,
    pub numeric: Scalar,
    pub entries_checked: usize,
}

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: Scalar, numeric: Scalar) -> Scalar {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(loss_fn: &F, params: &[Tensor]) -> Result<(Scalar, Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let value = g.value(loss);
    if value.len() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("loss must be scalar, got {:?}", value.shape()),
        ));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    Ok((v, g, vars, loss))
}

/// Reverse-mode gradients of `loss_fn` with respect to `params`.
pub fn gradients<F>(loss_fn: &F, params: &[Tensor]) -> Result<(Scalar, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (value, mut g, vars, loss) = evaluate(loss_fn, params)?;
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, grads))
}

/// Compares every reverse-mode gradient entry against the central difference
/// `(f(x + h) − f(x − h)) / 2h` with `h = epsilon · max(1, |x|)`.
///
/// `params` is perturbed in place and restored before returning.
pub fn grad_check<F>(loss_fn: F, params: &mut [Tensor], epsilon: Scalar) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Argument(format!("epsilon must be positive, got {epsilon}")));
    }
    let (_, analytic) = gradients(&loss_fn, params)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let x = params[p].data()[i];
            let h = epsilon * x.abs().max(1.0);
            params[p].data_mut()[i] = x + h;
            let plus = evaluate(&loss_fn, params).map(|r| r.0);
            params[p].data_mut()[i] = x - h;
            let minus = evaluate(&loss_fn, params).map(|r| r.0);
            params[p].data_mut()[i] = x;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic[p].data()[i];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_relative_error || report.entries_checked == 1 {
                report.max_relative_error = err;
                report.worst = (p, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        let mut params = vec![Tensor::new(&[2], vec![1.0, 2.0]).unwrap()];
        let f = |g: &mut Graph, p: &[Var]| {
            let sq = g.mul(p[0], p[0])?;
            Ok(g.sum(sq))
        };
        let (_, grads) = gradients(&f, &params).unwrap();
        assert_eq!(grads[0].data(), &[2.0, 4.0]);
        let report = grad_check(f, &mut params, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
        assert_eq!(params[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut params = vec![Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap()];
        let f = |g: &mut Graph, p: &[Var]| {
            let z = g.scale(p[0], 0.0);
            let s = g.sum(z);
            Ok(g.add_scalar(s, 3.0))
        };
        let (value, grads) = gradients(&f, &params).unwrap();
        assert_eq!(value, 3.0);
        assert!(grads[0].data().iter().all(|&v| v == 0.0));
        let report = grad_check(f, &mut params, 1e-5).unwrap();
        assert_eq!(report.max_relative_error, 0.0);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut params = vec![Tensor::new(&[1], vec![1.0]).unwrap()];
        let f = |g: &mut Graph, p: &[Var]| {
            let s = g.scale(p[0], Scalar::INFINITY);
            Ok(g.sum(s))
        };
        assert!(matches!(grad_check(f, &mut params, 1e-5), Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let mut params = vec![Tensor::scalar(1.0)];
        let f = |g: &mut Graph, p: &[Var]| Ok(g.sum(p[0]));
        assert!(grad_check(f, &mut params, 0.0).is_err());
    }
}
