use super::{Graph, Value};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate holding `max_rel_err`.
    pub worst: Option<usize>,
    /// Coordinates where one-sided differences disagree (a kink lies inside
    /// `[x - eps, x + eps]`); left out of `max_rel_err`.
    pub excluded: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<(f64, Option<Tensor>)>
where
    F: for<'g> Fn(&'g Graph, Value<'g>) -> Result<Value<'g>>,
{
    let g = Graph::new();
    let v = g.param(x.clone());
    let y = f(&g, v)?;
    let out = y.tensor();
    if !out.is_scalar() {
        return Err(Error::shape("grad_check", format!("f returned shape {:?}", out.shape())));
    }
    let val = out.item();
    if !val.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    g.backward(y)?;
    Ok((val, g.grad(v)))
}

fn eval_value<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Value<'g>) -> Result<Value<'g>>,
{
    let g = Graph::new();
    let v = g.constant(x.clone());
    let y = f(&g, v)?.item();
    if !y.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(y)
}

/// Checks every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Value<'g>) -> Result<Value<'g>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, &coords, eps, tol)
}

/// Checks the listed coordinates of `x`. Relative error per coordinate is
/// `|a - n| / max(|a|, |n|, 1e-6 * max|n|, 1e-12, eps_mach * |f| / (eps * tol))`.
pub fn grad_check_coords<F>(f: F, x: &Tensor, coords: &[usize], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Value<'g>) -> Result<Value<'g>>,
{
    if !(eps > 0.0 && tol > 0.0) {
        return Err(Error::invalid(format!("grad_check eps and tol must be positive, got {eps}, {tol}")));
    }
    let (f0, grad) = eval(&f, x)?;
    let grad = grad.unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut excluded = Vec::new();
    let kink_tol = eps.sqrt();
    for &i in coords {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let fp = eval_value(&f, &xp)?;
        let fm = eval_value(&f, &xm)?;
        let fwd = (fp - f0) / eps;
        let bwd = (f0 - fm) / eps;
        if (fwd - bwd).abs() > kink_tol * (1.0 + fwd.abs() + bwd.abs()) {
            excluded.push(i);
        }
        analytic.push(grad.data()[i]);
        numeric.push((fp - fm) / (2.0 * eps));
    }
    let scale = numeric.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    // rounding in f limits central differences to about eps_mach * |f| / eps;
    // slopes below noise / tol cannot be resolved to tol relative accuracy
    let noise = f64::EPSILON * f0.abs().max(1.0) / eps;
    let floor = (1e-6 * scale).max(1e-12).max(noise / tol);
    let mut max_rel_err = 0.0;
    let mut worst = None;
    for (k, &i) in coords.iter().enumerate() {
        if excluded.contains(&i) {
            continue;
        }
        let (a, n) = (analytic[k], numeric[k]);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = Some(i);
        }
    }
    Ok(GradCheckReport { max_rel_err, worst, excluded, analytic, numeric, passed: max_rel_err < tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.01]);
        let r = grad_check(|_, v| Ok(v.square().sum()), &x, 1e-4, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_err < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let r = grad_check(|g, _| Ok(g.constant(Tensor::scalar(4.0))), &x, 1e-4, 1e-6).unwrap();
        assert!(r.analytic.iter().chain(&r.numeric).all(|&v| v == 0.0));
        assert!(r.passed);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let x = Tensor::from_vec(vec![0.0, 1.0, -2.0]);
        let r = grad_check(|_, v| Ok(v.relu().sum()), &x, 1e-4, 1e-6).unwrap();
        assert_eq!(r.excluded, vec![0]);
        assert!(r.passed);
    }

    #[test]
    fn non_finite_aborts() {
        let x = Tensor::from_vec(vec![-1.0]);
        assert!(matches!(
            grad_check(|_, v| Ok(v.log().sum()), &x, 1e-4, 1e-6),
            Err(Error::NonFinite(_))
        ));
    }
}
