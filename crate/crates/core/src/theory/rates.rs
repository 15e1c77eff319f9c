//! Constants of the linear convergence rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs of the rate formulas. `c` is the PL constant, `l` the Lipschitz
/// constant of the gradient, `m` and `gamma` the curvature bounds of the
/// linearized map, `hessian_bound` the Hessian bound `H` of the map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateInputs {
    pub c: f64,
    pub l: f64,
    pub m: f64,
    pub gamma: f64,
    pub theta: f64,
    pub mu: f64,
    pub lambda: f64,
    pub kappa_bar: f64,
    pub min_p: f64,
    pub c0_norm: f64,
    pub j: usize,
    pub hessian_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateConstants {
    pub beta0: f64,
    /// `(J−1)^{3/2} H`.
    pub big_c: f64,
    /// Coefficients `(a, b)` of `Δ_n = a ‖C_n‖^{1/2} + b ‖C_n‖`.
    pub delta_coeffs: (f64, f64),
    pub c1: f64,
    pub delta: f64,
    pub n0: u64,
    pub beta: f64,
    pub c2: f64,
}

impl RateConstants {
    pub fn delta_n(&self, cov_norm: f64) -> f64 {
        self.delta_coeffs.0 * cov_norm.sqrt() + self.delta_coeffs.1 * cov_norm
    }
}

fn positive(name: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive and finite, got {x}")))
    }
}

fn nonnegative(name: &'static str, x: f64) -> Result<()> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be nonnegative and finite, got {x}")))
    }
}

/// Evaluates `β_0`, `Δ_n`, `C_1`, `δ`, `n_0`, `β` and `C_2`.
///
/// `H = 0` (linear maps) and `‖C_0‖ = 0` are accepted: then `C_1 = 0` and
/// `n_0 = 0`, so `C_2 = 0`.
pub fn rate_constants(p: &RateInputs) -> Result<RateConstants> {
    positive("c", p.c)?;
    positive("L", p.l)?;
    positive("M", p.m)?;
    positive("gamma", p.gamma)?;
    positive("theta", p.theta)?;
    positive("mu", p.mu)?;
    positive("kappa_bar", p.kappa_bar)?;
    positive("min_p", p.min_p)?;
    nonnegative("C0 norm", p.c0_norm)?;
    nonnegative("hessian_bound", p.hessian_bound)?;
    if !(p.lambda > 0.0 && p.lambda < 1.0) {
        return Err(Error::invalid("lambda", format!("must lie in (0, 1), got {}", p.lambda)));
    }
    if p.j < 2 {
        return Err(Error::EnsembleTooSmall(p.j));
    }
    let m2 = p.m * p.m;
    if p.theta * m2 > 1.0 + 1e-12 {
        return Err(Error::invalid("theta", format!("must not exceed M^-2 = {}, got {}", 1.0 / m2, p.theta)));
    }
    if p.mu * p.l > 1.0 + 1e-12 {
        return Err(Error::invalid("mu", format!("must not exceed 1/L = {}, got {}", 1.0 / p.l, p.mu)));
    }
    let mu = p.mu;
    let beta0 = p.c * p.lambda * (1.0 - p.lambda) / p.kappa_bar * p.min_p * mu * (1.0 + 2.0 * mu * m2)
        / (4.0 * (1.0 + mu * m2).powi(2));
    let big_c = (p.j as f64 - 1.0).powf(1.5) * p.hessian_bound;
    let a = 2.0 * big_c * mu * (p.m + p.l * mu.sqrt());
    let b = p.l * big_c * big_c * mu * mu;
    let c1 = a * p.c0_norm.sqrt() + b * p.c0_norm;
    let g2t = p.gamma * p.gamma * p.theta;
    let delta = 1.0 / (1.0 + g2t);
    let n0 = if c1 <= beta0 {
        0
    } else {
        ((c1 / beta0).ln() / (1.0 / delta).ln()).ceil() as u64
    };
    let beta = beta0.min(g2t / (2.0 * (1.0 + g2t)));
    let c2 = (1.0 - beta).powf(n0 as f64) * c1 / (1.0 - beta - delta);
    Ok(RateConstants {
        beta0,
        big_c,
        delta_coeffs: (a, b),
        c1,
        delta,
        n0,
        beta,
        c2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> RateInputs {
        RateInputs {
            c: 1.0,
            l: 1.0,
            m: 1.0,
            gamma: 1.0,
            theta: 1.0,
            mu: 1.0,
            lambda: 0.5,
            kappa_bar: 1.0,
            min_p: 1.0,
            c0_norm: 1.0,
            j: 3,
            hessian_bound: 0.0,
        }
    }

    #[test]
    fn beta0_example() {
        let r = rate_constants(&unit()).unwrap();
        assert!((r.beta0 - 3.0 / 64.0).abs() < 1e-16);
        // γ²θ = 1: second candidate is 1/4
        assert!((r.beta - (3.0f64 / 64.0).min(0.25)).abs() < 1e-16);
        assert_eq!(r.delta, 0.5);
        assert_eq!((r.c1, r.n0, r.c2), (0.0, 0, 0.0));
    }

    #[test]
    fn lambda_limits_vanish() {
        for lam in [1e-9, 1.0 - 1e-9] {
            let r = rate_constants(&RateInputs { lambda: lam, ..unit() }).unwrap();
            assert!(r.beta0 < 1e-9);
        }
        assert!(rate_constants(&RateInputs { lambda: 1.0, ..unit() }).is_err());
    }

    #[test]
    fn rejects_constraint_violations() {
        assert!(rate_constants(&RateInputs { theta: 2.0, ..unit() }).is_err());
        assert!(rate_constants(&RateInputs { mu: 2.0, ..unit() }).is_err());
        assert!(rate_constants(&RateInputs { c: 0.0, ..unit() }).is_err());
        assert!(rate_constants(&RateInputs { j: 1, ..unit() }).is_err());
    }

    #[test]
    fn n0_and_c2_with_curvature() {
        let p = RateInputs {
            hessian_bound: 0.5,
            theta: 0.5,
            mu: 0.5,
            c0_norm: 4.0,
            ..unit()
        };
        let r = rate_constants(&p).unwrap();
        let big_c = 2f64.powf(1.5) * 0.5;
        let c1 = 2.0 * big_c * 0.5 * (1.0 + 0.5f64.sqrt()) * 2.0 + big_c * big_c * 0.25 * 4.0;
        assert!((r.c1 - c1).abs() < 1e-12);
        assert!((r.delta_n(4.0) - c1).abs() < 1e-12);
        let delta: f64 = 1.0 / 1.5;
        assert!(r.c1 * delta.powi(r.n0 as i32) <= r.beta0 * (1.0 + 1e-12));
        assert!(r.c1 * delta.powi(r.n0 as i32 - 1) > r.beta0);
        assert!(r.beta > 0.0 && r.beta < 1.0 && r.delta < 1.0);
        assert!(1.0 - r.beta > r.delta);
        let c2 = (1.0 - r.beta).powi(r.n0 as i32) * r.c1 / (1.0 - r.beta - r.delta);
        assert!((r.c2 - c2).abs() < 1e-12 * c2);
    }

    proptest! {
        #[test]
        fn beta0_scaling_invariance(c in 0.1f64..2.0, m in 0.5f64..2.0, lam in 0.05f64..0.95, kb in 1.0f64..50.0, mp in 0.01f64..1.0) {
            let m2 = m * m;
            let base = RateInputs { c, l: m2, m, gamma: 0.5 * m, theta: 0.5 / m2, mu: 0.5 / m2, lambda: lam, kappa_bar: kb, min_p: mp, c0_norm: 1.0, j: 5, hessian_bound: 0.0 };
            let b0 = rate_constants(&base).unwrap().beta0;
            for s in [0.5, 2.0, 10.0] {
                let scaled = RateInputs { c: s * c, l: s * m2, m: (s * m2).sqrt(), gamma: (s).sqrt() * base.gamma, theta: base.theta / s, mu: base.mu / s, ..base };
                let b = rate_constants(&scaled).unwrap().beta0;
                prop_assert!((b - b0).abs() <= 1e-12 * b0);
            }
        }
    }
}
