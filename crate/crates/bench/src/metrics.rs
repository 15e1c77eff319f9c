//! Misfit, rate and solution-error metrics.

use anyhow::{ensure, Result};
use deki::forward::KLField;
use nalgebra::DVector;

/// `e_n = max(0, l_n − l_min) / ‖y‖²`.
pub fn relative_misfit(l_n: f64, l_min: f64, ynorm2: f64) -> Result<f64> {
    ensure!(ynorm2 > 0.0, "relative misfit needs nonzero data");
    Ok((l_n - l_min).max(0.0) / ynorm2)
}

/// `(log e_m − log e_n)/(m − n)`; `None` when either misfit is not positive
/// or `m = n`. Negative for a decaying series.
pub fn convergence_rate(e: &[f64], m: usize, n: usize) -> Option<f64> {
    let (em, en) = (*e.get(m)?, *e.get(n)?);
    if m == n || !(em > 0.0 && en > 0.0) {
        return None;
    }
    Some((em.ln() - en.ln()) / (m as f64 - n as f64))
}

/// Fit window: `m` is the first step with `e < e_0/2`, `n` the last step
/// with `e > 1e-12`.
pub fn rate_window(e: &[f64]) -> Option<(usize, usize)> {
    let e0 = *e.first()?;
    let m = e.iter().position(|&x| x < 0.5 * e0)?;
    let n = e.iter().rposition(|&x| x > 1e-12)?;
    (n > m).then_some((m, n))
}

/// Reported decay rate `|r|` over the default window.
pub fn decay_rate(e: &[f64]) -> Option<f64> {
    let (m, n) = rate_window(e)?;
    convergence_rate(e, m, n).map(f64::abs)
}

/// `‖a_n − a_true‖_{L²} / ‖a_true‖_{L²}` with the grid quadrature of `kl`.
pub fn relative_solution_error(kl: &KLField, a_n: &DVector<f64>, a_true: &DVector<f64>) -> Result<f64> {
    ensure!(a_n.len() == a_true.len(), "field sizes differ: {} vs {}", a_n.len(), a_true.len());
    let denom = kl.l2_norm(a_true);
    ensure!(denom > 0.0, "relative solution error needs a nonzero truth");
    Ok(kl.l2_norm(&(a_n - a_true)) / denom)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Least-squares line `y ≈ a + b x`; returns `(a, b, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (my - slope * mx, slope, r2)
}
