//! Central-difference gradient checks.

use crate::error::{Error, Result};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub numeric: Vec<f64>,
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("finite-difference step {h}")));
    }
    let mut point = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point)?;
        point[i] = orig - h;
        let minus = f(&point)?;
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Max of `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
pub fn finite_diff_check<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<GradientCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != x.len() {
        return Err(Error::Shape {
            op: "finite_diff_check",
            detail: format!("{} analytic entries for {} parameters", analytic.len(), x.len()),
        });
    }
    let numeric = numeric_gradient(f, x, h)?;
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        if !a.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient at coordinate {i}")));
        }
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradientCheck {
        max_rel_error,
        worst_index,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let g = numeric_gradient(|p| Ok(p[0].powi(3) + 2.0 * p[1]), &[2.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 12.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn detects_wrong_gradient() {
        let c = finite_diff_check(|p| Ok(p[0] * p[0]), &[3.0], &[5.0], 1e-6).unwrap();
        assert!(c.max_rel_error > 0.1);
        let c = finite_diff_check(|p| Ok(p[0] * p[0]), &[3.0], &[6.0], 1e-6).unwrap();
        assert!(c.max_rel_error < 1e-6);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(numeric_gradient(|_| Ok(f64::NAN), &[1.0], 1e-6).is_err());
        assert!(finite_diff_check(|p| Ok(p[0]), &[1.0], &[f64::INFINITY], 1e-6).is_err());
        assert!(numeric_gradient(|p| Ok(p[0]), &[1.0], 0.0).is_err());
    }
}
