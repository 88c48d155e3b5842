//! Central-difference oracle for checking backward rules.

use super::{Graph, Primitive, Result, Tensor, TensorError, Var};

/// `|a - n| / (|a| + |n| + 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], i: usize, h: f64) -> Result<f64> {
    let mut xp = x.to_vec();
    xp[i] = x[i] + h;
    let fp = f(&xp)?;
    xp[i] = x[i] - h;
    let fm = f(&xp)?;
    if !fp.is_finite() || !fm.is_finite() {
        return Err(TensorError::NonFinite {
            op: Primitive::Leaf,
            node: i,
        });
    }
    Ok((fp - fm) / (2.0 * h))
}

/// Max relative error between the reverse-mode gradient of the scalar built by
/// `f` and central differences at `theta`, over `coords` (all coordinates when
/// `None`).
pub fn gradient_check<F>(f: F, theta: &Tensor, h: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(TensorError::InvalidArgument {
            op: Primitive::Leaf,
            reason: format!("finite-difference step {h} outside [1e-6, 1e-4]"),
        });
    }
    let mut g = Graph::new();
    let x = g.param(theta);
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g.grad(x).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; theta.len()]);

    let shape = theta.shape().to_vec();
    let eval = |data: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(shape.clone(), data.to_vec())?);
        let y = f(&mut g, x)?;
        Ok(g.item(y))
    };
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..theta.len()).collect();
            &all
        }
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let numeric = central_difference(eval, theta.data(), i, h)?;
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
