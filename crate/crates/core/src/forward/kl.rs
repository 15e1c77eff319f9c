//! Truncated Karhunen–Loève expansion of a squared-exponential field on the
//! unit square, plus the grid-field text format.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_eigen_desc;
use crate::rng::{Purpose, RngStream};

/// `K(x1, x2) = σ² exp(−(x1−x2)²/2l_x² − (y1−y2)²/2l_y²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma: f64,
    pub lx: f64,
    pub ly: f64,
}

impl KernelParams {
    pub fn eval(&self, p: (f64, f64), q: (f64, f64)) -> f64 {
        let dx = p.0 - q.0;
        let dy = p.1 - q.1;
        self.sigma * self.sigma * (-dx * dx / (2.0 * self.lx * self.lx) - dy * dy / (2.0 * self.ly * self.ly)).exp()
    }
}

/// Cell-centred coordinates of grid point `p` (row-major, `x` fastest).
pub fn grid_point(p: usize, n: usize) -> (f64, f64) {
    let col = p % n;
    let row = p / n;
    ((col as f64 + 0.5) / n as f64, (row as f64 + 0.5) / n as f64)
}

/// Smallest `d` with `Σ_{i>d} λ_i ≤ ε Σ_i λ_i` for descending `λ`.
pub fn truncation_dim(eigvals: &[f64], eps: f64) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::invalid("epsilon", format!("must be positive, got {eps}")));
    }
    let total: f64 = eigvals.iter().sum();
    let mut tail = total;
    for (d, &l) in eigvals.iter().enumerate() {
        if tail <= eps * total {
            return Ok(d);
        }
        tail -= l;
    }
    Ok(eigvals.len())
}

#[derive(Debug, Clone)]
pub struct KLField {
    pub mean: f64,
    pub kernel: KernelParams,
    pub n: usize,
    pub eps: f64,
    /// All discrete eigenvalues, descending and clamped at zero.
    pub eigvals: DVector<f64>,
    /// `φ_i = √λ_i ψ_i` for every eigenpair, one column each.
    phi: DMatrix<f64>,
    d_u: usize,
}

impl KLField {
    pub fn d_u(&self) -> usize {
        self.d_u
    }

    pub fn grid_points(&self) -> usize {
        self.n * self.n
    }

    pub fn weight(&self) -> f64 {
        1.0 / (self.n * self.n) as f64
    }

    /// Truncated basis, `N² × d_u`.
    pub fn basis(&self) -> DMatrix<f64> {
        self.phi.columns(0, self.d_u).into_owned()
    }

    /// `ψ_i` for the retained modes (zero where `λ_i = 0`).
    pub fn eigenfunctions(&self) -> DMatrix<f64> {
        let mut psi = self.basis();
        for (i, mut col) in psi.column_iter_mut().enumerate() {
            let l = self.eigvals[i];
            if l > 0.0 {
                col /= l.sqrt();
            }
        }
        psi
    }

    pub fn trace(&self) -> f64 {
        self.eigvals.sum()
    }

    /// `ā + Σ_{i≤d_u} â_i φ_i` on the grid.
    pub fn field(&self, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
        crate::error::check_dim("KL coefficients", self.d_u, coeffs.len())?;
        let mut a = self.phi.columns(0, self.d_u) * coeffs;
        a.add_scalar_mut(self.mean);
        Ok(a)
    }

    /// A draw of the field using every discrete mode.
    pub fn sample_full(&self, seed: u64) -> DVector<f64> {
        let mut s = RngStream::new(seed, Purpose::Truth, 0);
        let xi = DVector::from_fn(self.phi.ncols(), |_, _| s.normal());
        let mut a = &self.phi * xi;
        a.add_scalar_mut(self.mean);
        a
    }

    /// Kernel Gram matrix on the grid.
    pub fn kernel_matrix(&self) -> DMatrix<f64> {
        kernel_matrix(&self.kernel, self.n)
    }

    /// Quadrature `L²` norm of a grid field.
    pub fn l2_norm(&self, f: &DVector<f64>) -> f64 {
        (self.weight() * f.norm_squared()).sqrt()
    }
}

fn kernel_matrix(k: &KernelParams, n: usize) -> DMatrix<f64> {
    let m = n * n;
    DMatrix::from_fn(m, m, |p, q| k.eval(grid_point(p, n), grid_point(q, n)))
}

/// Builds the KL basis on an `n × n` cell-centred grid with quadrature
/// weight `1/n²` and truncation threshold `eps`.
pub fn kl_basis(kernel: KernelParams, mean: f64, n: usize, eps: f64) -> Result<KLField> {
    if !(kernel.sigma > 0.0 && kernel.lx > 0.0 && kernel.ly > 0.0) {
        return Err(Error::invalid("kernel", "σ, l_x and l_y must be positive"));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::invalid("epsilon", format!("must lie in (0, 1], got {eps}")));
    }
    if n == 0 {
        return Err(Error::invalid("grid", "N must be positive"));
    }
    let w = 1.0 / (n * n) as f64;
    let (vals, vecs) = sym_eigen_desc(&(kernel_matrix(&kernel, n) * w));
    let eigvals = vals.map(|v| v.max(0.0));
    let d_u = truncation_dim(eigvals.as_slice(), eps)?;
    let mut phi = vecs;
    for (i, mut col) in phi.column_iter_mut().enumerate() {
        col *= (eigvals[i] / w).sqrt();
    }
    Ok(KLField {
        mean,
        kernel,
        n,
        eps,
        eigvals,
        phi,
        d_u,
    })
}

/// Writes `n` on the first line, then `n` rows of `n` comma-separated values.
pub fn write_grid_field<W: Write>(mut w: W, n: usize, values: &DVector<f64>) -> Result<()> {
    crate::error::check_dim("grid field", n * n, values.len())?;
    let io = |e: std::io::Error| Error::MissingData(format!("grid field write failed: {e}"));
    writeln!(w, "{n}").map_err(io)?;
    for row in 0..n {
        let line: Vec<String> = (0..n).map(|c| format!("{:.17e}", values[row * n + c])).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    Ok(())
}

pub fn read_grid_field<R: BufRead>(r: R) -> Result<(usize, DVector<f64>)> {
    let mut lines = r.lines();
    let bad = |msg: String| Error::MissingData(format!("grid field: {msg}"));
    let header = lines
        .next()
        .ok_or_else(|| bad("empty input".into()))?
        .map_err(|e| bad(e.to_string()))?;
    let n: usize = header.trim().parse().map_err(|_| bad(format!("bad header `{header}`")))?;
    let mut values = Vec::with_capacity(n * n);
    for line in lines {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        for tok in line.split(',') {
            values.push(tok.trim().parse::<f64>().map_err(|_| bad(format!("bad value `{tok}`")))?);
        }
    }
    if values.len() != n * n {
        return Err(bad(format!("expected {} values, found {}", n * n, values.len())));
    }
    Ok((n, DVector::from_vec(values)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SETUP1: KernelParams = KernelParams {
        sigma: 0.1,
        lx: 0.1,
        ly: 0.1,
    };

    #[test]
    fn truncation_examples() {
        assert_eq!(truncation_dim(&[1.0, 1.0, 1.0, 1.0], 1.0).unwrap(), 0);
        assert_eq!(truncation_dim(&[1.0, 1.0, 1.0, 1.0], 0.5).unwrap(), 2);
        assert!(truncation_dim(&[1.0], 0.0).is_err());
        assert!(kl_basis(SETUP1, 0.0, 4, 0.0).is_err());
    }

    #[test]
    fn eps_one_keeps_nothing() {
        let kl = kl_basis(SETUP1, 0.0, 6, 1.0).unwrap();
        assert_eq!(kl.d_u(), 0);
    }

    #[test]
    fn orthonormal_and_reconstructs_kernel() {
        let kl = kl_basis(SETUP1, 0.0, 12, 1e-3).unwrap();
        assert!(kl.eigvals.iter().zip(kl.eigvals.iter().skip(1)).all(|(a, b)| a >= b));
        let psi = kl.eigenfunctions();
        let gram = psi.transpose() * &psi * kl.weight();
        assert!((gram - DMatrix::identity(kl.d_u(), kl.d_u())).amax() < 1e-8);
        let phi = kl.basis();
        let k = kl.kernel_matrix();
        let diff = &phi * phi.transpose() - &k;
        // trace norm obeys the threshold exactly; Frobenius only approximately
        let (dv, _) = sym_eigen_desc(&diff);
        let nuclear = dv.iter().map(|x| x.abs()).sum::<f64>() / k.trace();
        assert!(nuclear <= kl.eps + 1e-10, "trace-norm error {nuclear}");
        let rel = diff.norm() / k.norm();
        assert!(rel <= 2.0 * kl.eps, "relative error {rel}");
        // tail bound holds and is tight
        let tail: f64 = kl.eigvals.iter().skip(kl.d_u()).sum();
        let tail_prev = tail + kl.eigvals[kl.d_u() - 1];
        assert!(tail <= kl.eps * kl.trace());
        assert!(tail_prev > kl.eps * kl.trace());
    }

    #[test]
    fn setup1_at_16() {
        let kl = kl_basis(SETUP1, 0.0, 16, 1e-3).unwrap();
        assert_eq!(kl.d_u(), 129);
        assert!((kl.trace() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn grid_field_roundtrip() {
        let v = DVector::from_fn(9, |i, _| i as f64 * 0.1 - 0.3);
        let mut buf = Vec::new();
        write_grid_field(&mut buf, 3, &v).unwrap();
        let (n, back) = read_grid_field(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(n, 3);
        assert_eq!(back, v);
        assert!(read_grid_field(std::io::Cursor::new(b"2\n1,2,3\n".to_vec())).is_err());
    }
}
