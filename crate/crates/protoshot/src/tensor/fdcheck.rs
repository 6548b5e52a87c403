//! Central-difference gradient oracle used to validate the backward pass.

use super::{GradMap, NamedTensors, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Numerical gradient of `f` at `params` by central differences with step
/// `eps`, one coordinate at a time. `f` must return a scalar tensor; the
/// function is re-evaluated 2 x numel times per parameter, so this is strictly
/// a verification tool.
pub fn finite_difference_grad<R, F>(
    f: F,
    params: &NamedTensors<R>,
    eps: R,
) -> Result<GradMap<R>>
where
    R: Real,
    F: Fn(&NamedTensors<R>) -> Result<Tensor<R>>,
{
    if eps <= R::zero() {
        return Err(Error::contract("finite_difference_grad: eps must be positive"));
    }
    let two_eps = eps + eps;
    let mut out = std::collections::BTreeMap::new();
    for (name, p) in params {
        let base = p.data().to_vec();
        let mut g = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] = plus[i] + eps;
            let mut minus = base.clone();
            minus[i] = minus[i] - eps;
            let f_plus = eval_at(&f, params, name, p.shape(), plus)?;
            let f_minus = eval_at(&f, params, name, p.shape(), minus)?;
            let d = (f_plus - f_minus) / two_eps;
            if !d.is_finite() {
                return Err(Error::numeric(
                    "finite_difference_grad",
                    format!("non-finite difference quotient at '{name}'[{i}]"),
                ));
            }
            g.push(d);
        }
        out.insert(name.clone(), Tensor::from_vec(p.shape(), g)?);
    }
    Ok(GradMap::from_map(out))
}

fn eval_at<R, F>(
    f: &F,
    params: &NamedTensors<R>,
    name: &str,
    shape: &[usize],
    data: Vec<R>,
) -> Result<R>
where
    R: Real,
    F: Fn(&NamedTensors<R>) -> Result<Tensor<R>>,
{
    let mut modified = params.clone();
    modified.insert(name.to_string(), Tensor::leaf(shape, data)?);
    let v = f(&modified)?;
    if v.numel() != 1 {
        return Err(Error::contract(format!(
            "finite_difference_grad: objective returned shape {:?}, expected scalar",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Worst-case relative disagreement between two gradient maps, with the
/// denominator floored at 1e-6 so near-zero coordinates compare absolutely.
pub fn max_rel_err<R: Real>(analytic: &GradMap<R>, numeric: &GradMap<R>) -> f64 {
    let mut worst = 0.0f64;
    for (name, a) in analytic.iter() {
        let Some(n) = numeric.get(name) else { continue };
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let av = av.to_f64_lossy();
            let nv = nv.to_f64_lossy();
            let denom = av.abs().max(nv.abs()).max(1e-6);
            let rel = (av - nv).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
