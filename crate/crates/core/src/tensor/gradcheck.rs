use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Compares reverse-mode gradients of the scalar function `f` at `point`
/// against central finite differences. Returns the largest
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn gradcheck<Fun>(f: Fun, point: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    gradcheck_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), epsilon)
}

/// Multi-input version of [`gradcheck`]. Coordinates are numbered across all
/// inputs in order.
pub fn gradcheck_many<Fun>(f: Fun, points: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = points.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.take_grad(v)).collect();

    let evaluate = |pts: &[Tensor<f64>], index: usize| -> Result<f64> {
        let mut g = Graph::<f64>::no_grad();
        let vars: Vec<Var> = pts.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g
            .value(out)
            .item()
            .ok_or_else(|| Error::NotScalar(g.shape(out).to_vec()))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { index })
        }
    };

    let mut work = points.to_vec();
    let mut worst = 0.0f64;
    let mut index = 0;
    for (p, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[p].data()[j];
            work[p].data_mut()[j] = orig + epsilon;
            let plus = evaluate(&work, index)?;
            work[p].data_mut()[j] = orig - epsilon;
            let minus = evaluate(&work, index)?;
            work[p].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite { index });
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            index += 1;
        }
    }
    Ok(worst)
}
