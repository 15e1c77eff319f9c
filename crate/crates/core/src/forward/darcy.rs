//! Steady Darcy flow `−∇·(exp(a)∇v) = f` on the unit square with `v = 0`
//! on the boundary, discretized by cell-centred finite differences.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DVector;

use super::kl::{grid_point, KLField};
use super::ForwardMap;
use crate::error::{check_dim, Error, Result};

/// Symmetric positive definite matrix stored as its lower band.
struct BandMatrix {
    n: usize,
    bw: usize,
    // band[i * (bw + 1) + k] holds entry (i, i - k)
    band: Vec<f64>,
}

impl BandMatrix {
    fn new(n: usize, bw: usize) -> Self {
        BandMatrix {
            n,
            bw,
            band: vec![0.0; n * (bw + 1)],
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        // caller guarantees j <= i <= j + bw
        self.band[i * (self.bw + 1) + (i - j)]
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        self.band[i * (self.bw + 1) + (i - j)] += v;
    }

    fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..=i {
                let a = self.at(i, j);
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    /// In-place banded Cholesky; returns `None` if a pivot is not positive.
    fn cholesky(mut self) -> Option<BandMatrix> {
        let bw = self.bw;
        for i in 0..self.n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut s = self.at(i, j);
                let klo = lo.max(j.saturating_sub(bw));
                for k in klo..j {
                    s -= self.at(i, k) * self.at(j, k);
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    self.band[i * (bw + 1)] = s.sqrt();
                } else {
                    self.band[i * (bw + 1) + (i - j)] = s / self.at(j, j);
                }
            }
        }
        Some(self)
    }

    fn cholesky_solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(self.bw);
            let mut s = y[i];
            for k in lo..i {
                s -= self.at(i, k) * y[k];
            }
            y[i] = s / self.at(i, i);
        }
        for i in (0..n).rev() {
            let hi = (i + self.bw).min(n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= self.at(k, i) * y[k];
            }
            y[i] = s / self.at(i, i);
        }
        y
    }
}

fn assemble(log_perm: &DVector<f64>, n: usize) -> BandMatrix {
    let h2 = (n * n) as f64;
    let k: Vec<f64> = log_perm.iter().map(|a| a.exp()).collect();
    let mut m = BandMatrix::new(n * n, n);
    let harmonic = |a: f64, b: f64| 2.0 * a * b / (a + b);
    for row in 0..n {
        for col in 0..n {
            let p = row * n + col;
            let kp = k[p];
            let mut diag = 0.0;
            // east and north neighbours couple; west and south are handled by symmetry
            for (dr, dc) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                let r = row as i64 + dr;
                let c = col as i64 + dc;
                if r < 0 || c < 0 || r >= n as i64 || c >= n as i64 {
                    diag += 2.0 * kp * h2;
                    continue;
                }
                let q = r as usize * n + c as usize;
                let coef = harmonic(kp, k[q]) * h2;
                diag += coef;
                if q < p {
                    m.add(p, q, -coef);
                }
            }
            m.add(p, p, diag);
        }
    }
    m
}

/// Solves the discrete problem for cell values of `v`. `log_perm` and `f` are
/// tabulated at the `n × n` cell centres in row-major order.
pub fn darcy_solve(log_perm: &DVector<f64>, f: &DVector<f64>, n: usize) -> Result<DVector<f64>> {
    if n < 4 {
        return Err(Error::invalid("grid", format!("N must be at least 4, got {n}")));
    }
    check_dim("log-permeability", n * n, log_perm.len())?;
    check_dim("source", n * n, f.len())?;
    if log_perm.iter().any(|a| !a.is_finite()) {
        return Err(Error::invalid("log-permeability", "values must be finite"));
    }
    let a = assemble(log_perm, n);
    let a_copy = BandMatrix {
        n: a.n,
        bw: a.bw,
        band: a.band.clone(),
    };
    let chol = a.cholesky().ok_or(Error::Singular {
        context: "Darcy stiffness matrix",
    })?;
    let v = chol.cholesky_solve(f.as_slice());
    let fnorm = f.norm();
    if fnorm > 0.0 {
        let av = a_copy.mul(&v);
        let res = av
            .iter()
            .zip(f.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        if !(res <= 1e-10 * fnorm) {
            return Err(Error::Singular {
                context: "Darcy solve residual above tolerance",
            });
        }
    }
    Ok(DVector::from_vec(v))
}

/// `13π² sin(2πx) sin(3πy)` at the cell centres.
pub fn default_source(n: usize) -> DVector<f64> {
    DVector::from_fn(n * n, |p, _| {
        let (x, y) = grid_point(p, n);
        13.0 * PI * PI * (2.0 * PI * x).sin() * (3.0 * PI * y).sin()
    })
}

/// Centres of the `b × b` sub-blocks of the unit square.
pub fn block_centres(b: usize) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(b * b);
    for r in 0..b {
        for c in 0..b {
            pts.push(((c as f64 + 0.5) / b as f64, (r as f64 + 0.5) / b as f64));
        }
    }
    pts
}

// bracketing nodes along one axis: cell centres plus the two walls
fn bracket(x: f64, n: usize) -> (Option<usize>, Option<usize>, f64) {
    let s = x * n as f64 - 0.5;
    if s < 0.0 {
        // between wall at 0 and centre 0
        let w = x / (0.5 / n as f64);
        return (None, Some(0), w);
    }
    if s >= (n - 1) as f64 {
        let w = (x - (n as f64 - 0.5) / n as f64) / (0.5 / n as f64);
        return (Some(n - 1), None, w);
    }
    let i = s.floor() as usize;
    (Some(i), Some(i + 1), s - i as f64)
}

/// Bilinear interpolation of cell values, with zero on the walls.
pub fn sample_field(v: &DVector<f64>, n: usize, pt: (f64, f64)) -> f64 {
    let (x0, x1, wx) = bracket(pt.0, n);
    let (y0, y1, wy) = bracket(pt.1, n);
    let val = |r: Option<usize>, c: Option<usize>| match (r, c) {
        (Some(r), Some(c)) => v[r * n + c],
        _ => 0.0,
    };
    (1.0 - wy) * ((1.0 - wx) * val(y0, x0) + wx * val(y0, x1)) + wy * ((1.0 - wx) * val(y1, x0) + wx * val(y1, x1))
}

/// KL coefficients `â ↦` observations of the Darcy solution.
#[derive(Debug, Clone)]
pub struct DarcyMap {
    kl: Arc<KLField>,
    source: DVector<f64>,
    obs: Vec<(f64, f64)>,
}

impl DarcyMap {
    pub fn with_source(mut self, source: DVector<f64>) -> Result<Self> {
        check_dim("source", self.kl.grid_points(), source.len())?;
        self.source = source;
        Ok(self)
    }

    pub fn kl(&self) -> &KLField {
        &self.kl
    }

    /// Solution field for a given log-permeability field.
    pub fn solve_field(&self, log_perm: &DVector<f64>) -> Result<DVector<f64>> {
        darcy_solve(log_perm, &self.source, self.kl.n)
    }

    /// Observations for a log-permeability field given on the grid.
    pub fn observe_field(&self, log_perm: &DVector<f64>) -> Result<DVector<f64>> {
        let v = self.solve_field(log_perm)?;
        Ok(DVector::from_iterator(
            self.obs.len(),
            self.obs.iter().map(|&pt| sample_field(&v, self.kl.n, pt)),
        ))
    }
}

impl ForwardMap for DarcyMap {
    fn input_dim(&self) -> usize {
        self.kl.d_u()
    }
    fn output_dim(&self) -> usize {
        self.obs.len()
    }
    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let a = self.kl.field(u)?;
        self.observe_field(&a)
    }
}

/// Darcy forward model with the default source term.
pub fn darcy_model(kl: Arc<KLField>, obs_points: Vec<(f64, f64)>) -> Result<DarcyMap> {
    if kl.n < 4 {
        return Err(Error::invalid("grid", "N must be at least 4"));
    }
    if obs_points
        .iter()
        .any(|&(x, y)| !(x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0))
    {
        return Err(Error::invalid("observation points", "must lie inside the unit square"));
    }
    let source = default_source(kl.n);
    Ok(DarcyMap {
        kl,
        source,
        obs: obs_points,
    })
}
