//! Forward maps, query metering and the Tikhonov-regularized stacked problem.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{is_symmetric, sym_eigen_desc, PSD_RTOL};

pub mod darcy;
pub mod kl;
pub mod transport;

pub use darcy::{darcy_model, darcy_solve, DarcyMap};
pub use kl::{kl_basis, read_grid_field, write_grid_field, KLField, KernelParams};
pub use transport::{generate_transport_data, transport_model, TransportMap};

/// A deterministic map `G: R^{d_u} → R^{d_y}`.
pub trait ForwardMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// Explicit matrix when the map is linear.
    fn matrix(&self) -> Option<DMatrix<f64>> {
        None
    }

    /// Analytic Jacobian, if available.
    fn jacobian(&self, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.matrix()
    }

    /// Whether batches may be evaluated concurrently. Maps that record their
    /// inputs return `false` so the record order is deterministic.
    fn parallel_safe(&self) -> bool {
        true
    }
}

/// Inputs of metered evaluations, in call order.
pub type QueryLog = Arc<Mutex<Vec<DVector<f64>>>>;

/// A forward map together with a shared query counter. Clones share the
/// counter; [`ForwardModel::fork`] starts a fresh one.
#[derive(Clone)]
pub struct ForwardModel {
    map: Arc<dyn ForwardMap>,
    queries: Arc<AtomicU64>,
    log: Option<QueryLog>,
}

impl std::fmt::Debug for ForwardModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardModel")
            .field("d_u", &self.input_dim())
            .field("d_y", &self.output_dim())
            .field("queries", &self.query_count())
            .finish()
    }
}

impl ForwardModel {
    pub fn new(map: impl ForwardMap + 'static) -> Self {
        Self::from_arc(Arc::new(map))
    }

    pub fn from_arc(map: Arc<dyn ForwardMap>) -> Self {
        ForwardModel {
            map,
            queries: Arc::new(AtomicU64::new(0)),
            log: None,
        }
    }

    /// Model that also records every metered query point. Forks do not
    /// record.
    pub fn logged(map: Arc<dyn ForwardMap>) -> (Self, QueryLog) {
        let log: QueryLog = Arc::new(Mutex::new(Vec::new()));
        let mut m = Self::from_arc(map);
        m.log = Some(Arc::clone(&log));
        (m, log)
    }

    fn record(&self, us: impl Iterator<Item = DVector<f64>>) {
        if let Some(log) = &self.log {
            log.lock().expect("query log poisoned").extend(us);
        }
    }

    /// Same map, independent counter. Used for diagnostics that must not
    /// count as algorithm queries.
    pub fn fork(&self) -> Self {
        Self::from_arc(Arc::clone(&self.map))
    }

    pub fn map(&self) -> &dyn ForwardMap {
        self.map.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        self.map.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.map.output_dim()
    }

    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    pub fn reset_queries(&self) {
        self.queries.store(0, Ordering::SeqCst);
    }

    pub fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("forward input", self.input_dim(), u.len())?;
        self.queries.fetch_add(1, Ordering::SeqCst);
        self.record(std::iter::once(u.clone()));
        let out = self.map.evaluate(u)?;
        check_dim("forward output", self.output_dim(), out.len())?;
        Ok(out)
    }

    /// Evaluates every column; counts one query per column.
    pub fn evaluate_columns(&self, us: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("forward input", self.input_dim(), us.nrows())?;
        let cols: Vec<DVector<f64>> = us.column_iter().map(|c| c.into_owned()).collect();
        let outs: Vec<Result<DVector<f64>>> = if self.map.parallel_safe() {
            cols.par_iter().map(|u| self.map.evaluate(u)).collect()
        } else {
            cols.iter().map(|u| self.map.evaluate(u)).collect()
        };
        self.queries.fetch_add(cols.len() as u64, Ordering::SeqCst);
        self.record(cols.into_iter());
        let mut images = DMatrix::zeros(self.output_dim(), us.ncols());
        for (j, out) in outs.into_iter().enumerate() {
            let out = out?;
            check_dim("forward output", self.output_dim(), out.len())?;
            images.set_column(j, &out);
        }
        Ok(images)
    }
}

/// `y = A u`.
#[derive(Debug, Clone)]
pub struct LinearMap {
    a: DMatrix<f64>,
}

impl LinearMap {
    pub fn new(a: DMatrix<f64>) -> Self {
        LinearMap { a }
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl ForwardMap for LinearMap {
    fn input_dim(&self) -> usize {
        self.a.ncols()
    }
    fn output_dim(&self) -> usize {
        self.a.nrows()
    }
    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("linear map input", self.a.ncols(), u.len())?;
        Ok(&self.a * u)
    }
    fn matrix(&self) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }
}

/// `G_k(u) = (A u)_k + ½ uᵀ B_k u` with symmetric `B_k`. The Hessians are
/// constant, so the bound `(Σ_k ‖B_k‖²)^{1/2}` is exact.
#[derive(Debug, Clone)]
pub struct QuadraticMap {
    a: DMatrix<f64>,
    hessians: Vec<DMatrix<f64>>,
}

impl QuadraticMap {
    pub fn new(a: DMatrix<f64>, hessians: Vec<DMatrix<f64>>) -> Result<Self> {
        check_dim("quadratic map hessian count", a.nrows(), hessians.len())?;
        for b in &hessians {
            check_dim("quadratic map hessian size", a.ncols(), b.nrows())?;
            if !is_symmetric(b, PSD_RTOL) {
                return Err(Error::NotSymmetric {
                    context: "quadratic map hessian",
                });
            }
        }
        Ok(QuadraticMap { a, hessians })
    }

    pub fn hessian_bound(&self) -> f64 {
        self.hessians
            .iter()
            .map(|b| {
                let (v, _) = sym_eigen_desc(b);
                let s = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                s * s
            })
            .sum::<f64>()
            .sqrt()
    }
}

impl ForwardMap for QuadraticMap {
    fn input_dim(&self) -> usize {
        self.a.ncols()
    }
    fn output_dim(&self) -> usize {
        self.a.nrows()
    }
    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("quadratic map input", self.a.ncols(), u.len())?;
        let mut y = &self.a * u;
        for (k, b) in self.hessians.iter().enumerate() {
            y[k] += 0.5 * u.dot(&(b * u));
        }
        Ok(y)
    }
    fn jacobian(&self, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut jac = self.a.clone();
        for (k, b) in self.hessians.iter().enumerate() {
            let g = b * u;
            for i in 0..jac.ncols() {
                jac[(k, i)] += g[i];
            }
        }
        Some(jac)
    }
}

/// The operator `C0^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub enum Regularizer {
    ScaledIdentity { dim: usize, scale: f64 },
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl Regularizer {
    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::invalid("regularizer scale", format!("must be finite and nonnegative, got {scale}")));
        }
        Ok(Regularizer::ScaledIdentity { dim, scale })
    }

    pub fn diagonal(d: DVector<f64>) -> Result<Self> {
        if d.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::invalid("regularizer diagonal", "entries must be finite and nonnegative"));
        }
        Ok(Regularizer::Diagonal(d))
    }

    /// Dense symmetric positive semidefinite operator.
    pub fn dense(m: DMatrix<f64>) -> Result<Self> {
        if !is_symmetric(&m, PSD_RTOL) {
            return Err(Error::NotSymmetric {
                context: "regularization operator",
            });
        }
        let (vals, _) = sym_eigen_desc(&m);
        let scale = m.amax().max(f64::MIN_POSITIVE);
        if vals.iter().any(|&v| v < -PSD_RTOL * scale) {
            return Err(Error::invalid("regularizer", "operator must be positive semidefinite"));
        }
        Ok(Regularizer::Dense(m))
    }

    pub fn dim(&self) -> usize {
        match self {
            Regularizer::ScaledIdentity { dim, .. } => *dim,
            Regularizer::Diagonal(d) => d.len(),
            Regularizer::Dense(m) => m.nrows(),
        }
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Regularizer::ScaledIdentity { scale, .. } => u * *scale,
            Regularizer::Diagonal(d) => d.component_mul(u),
            Regularizer::Dense(m) => m * u,
        }
    }

    /// Applies the operator to every column.
    pub fn apply_columns(&self, t: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Regularizer::ScaledIdentity { scale, .. } => t * *scale,
            Regularizer::Diagonal(d) => {
                let mut out = t.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= d[i];
                }
                out
            }
            Regularizer::Dense(m) => m * t,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Regularizer::ScaledIdentity { dim, scale } => DMatrix::identity(*dim, *dim) * *scale,
            Regularizer::Diagonal(d) => DMatrix::from_diagonal(d),
            Regularizer::Dense(m) => m.clone(),
        }
    }

    /// `C0^{-1} = (C0^{-1/2})²`.
    pub fn precision(&self) -> DMatrix<f64> {
        let r = self.to_dense();
        &r * &r
    }

    /// Extreme eigenvalues `(min, max)` of `C0^{-1}`.
    pub fn precision_bounds(&self) -> (f64, f64) {
        match self {
            Regularizer::ScaledIdentity { scale, .. } => (scale * scale, scale * scale),
            Regularizer::Diagonal(d) => {
                let sq = d.map(|x| x * x);
                (sq.min(), sq.max())
            }
            Regularizer::Dense(_) => {
                let (v, _) = sym_eigen_desc(&self.precision());
                (v[v.len() - 1].max(0.0), v[0].max(0.0))
            }
        }
    }
}

/// `H(u) = [G(u); C0^{-1/2} u]` with target `z = [y; 0]`.
#[derive(Debug, Clone)]
pub struct RegularizedProblem {
    model: ForwardModel,
    reg: Regularizer,
    data: DVector<f64>,
}

impl RegularizedProblem {
    pub fn new(model: ForwardModel, reg: Regularizer, data: DVector<f64>) -> Result<Self> {
        check_dim("regularizer", model.input_dim(), reg.dim())?;
        check_dim("data", model.output_dim(), data.len())?;
        Ok(RegularizedProblem { model, reg, data })
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    pub fn regularizer(&self) -> &Regularizer {
        &self.reg
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn d_u(&self) -> usize {
        self.model.input_dim()
    }

    pub fn d_y(&self) -> usize {
        self.model.output_dim()
    }

    pub fn d_z(&self) -> usize {
        self.d_u() + self.d_y()
    }

    pub fn query_count(&self) -> u64 {
        self.model.query_count()
    }

    /// Same problem with an unmetered model.
    pub fn unmetered(&self) -> Self {
        RegularizedProblem {
            model: self.model.fork(),
            reg: self.reg.clone(),
            data: self.data.clone(),
        }
    }

    pub fn target(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.d_z());
        z.rows_mut(0, self.d_y()).copy_from(&self.data);
        z
    }

    fn stack(&self, g: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.d_z());
        out.rows_mut(0, self.d_y()).copy_from(g);
        out.rows_mut(self.d_y(), self.d_u()).copy_from(&self.reg.apply(u));
        out
    }

    /// `H(u)`; one query.
    pub fn apply(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("regularized input", self.d_u(), u.len())?;
        let g = self.model.evaluate(u)?;
        Ok(self.stack(&g, u))
    }

    /// `H` applied to every column; one query per column.
    pub fn apply_columns(&self, us: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let g = self.model.evaluate_columns(us)?;
        Ok(self.stack_columns(&g, us))
    }

    /// Stacks model images over regularization images.
    pub fn stack_columns(&self, g: &DMatrix<f64>, us: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.d_z(), us.ncols());
        out.rows_mut(0, self.d_y()).copy_from(g);
        out.rows_mut(self.d_y(), self.d_u())
            .copy_from(&self.reg.apply_columns(us));
        out
    }

    /// `½‖z − H(u)‖²`; one query.
    pub fn loss(&self, u: &DVector<f64>) -> Result<f64> {
        let h = self.apply(u)?;
        Ok(self.loss_from_image(&h))
    }

    pub fn loss_from_image(&self, h: &DVector<f64>) -> f64 {
        0.5 * (self.target() - h).norm_squared()
    }

    /// Jacobian of `H`: analytic when the map provides one, central
    /// differences with step `fd_step` otherwise. Unmetered.
    pub fn jacobian(&self, u: &DVector<f64>, fd_step: f64) -> Result<DMatrix<f64>> {
        let map = self.model.map();
        let jg = match map.jacobian(u) {
            Some(j) => j,
            None => central_difference(map, u, fd_step)?,
        };
        let mut jac = DMatrix::zeros(self.d_z(), self.d_u());
        jac.rows_mut(0, self.d_y()).copy_from(&jg);
        jac.rows_mut(self.d_y(), self.d_u())
            .copy_from(&self.reg.to_dense());
        Ok(jac)
    }

    /// Global minimizer of the loss and the minimal value. Exact for linear
    /// maps; Gauss–Newton with finite-difference Jacobians otherwise.
    /// Unmetered.
    pub fn optimal_solution(&self) -> Result<(DVector<f64>, f64)> {
        let map = self.model.map();
        let prec = self.reg.precision();
        if let Some(g) = map.matrix() {
            let mut normal = g.transpose() * &g + &prec;
            normal = crate::linalg::symmetrize(&normal);
            let rhs = g.transpose() * &self.data;
            let u = match normal.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => normal.lu().solve(&rhs).ok_or(Error::Singular {
                    context: "normal equations of the reference solution",
                })?,
            };
            let loss = self.unmetered_loss(&u)?;
            return Ok((u, loss));
        }
        self.gauss_newton(DVector::zeros(self.d_u()), 200)
    }

    fn unmetered_loss(&self, u: &DVector<f64>) -> Result<f64> {
        let g = self.model.map().evaluate(u)?;
        Ok(0.5 * (&self.data - g).norm_squared() + 0.5 * self.reg.apply(u).norm_squared())
    }

    fn gauss_newton(&self, mut u: DVector<f64>, max_iter: usize) -> Result<(DVector<f64>, f64)> {
        let map = self.model.map();
        let prec = self.reg.precision();
        let tol = 1e-10 * (1.0 + self.data.norm());
        let mut loss = self.unmetered_loss(&u)?;
        let mut grad_norm = f64::INFINITY;
        for _ in 0..max_iter {
            let g = map.evaluate(&u)?;
            let jac = match map.jacobian(&u) {
                Some(j) => j,
                None => central_difference(map, &u, 1e-6)?,
            };
            let grad = jac.transpose() * (&g - &self.data) + &prec * &u;
            grad_norm = grad.norm();
            if grad_norm <= tol {
                return Ok((u, loss));
            }
            let normal = crate::linalg::symmetrize(&(jac.transpose() * &jac + &prec));
            let step = match normal.clone().cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => normal.lu().solve(&(-&grad)).ok_or(Error::Singular {
                    context: "Gauss-Newton normal equations",
                })?,
            };
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &u + &step * t;
                let l = self.unmetered_loss(&cand)?;
                if l < loss {
                    u = cand;
                    loss = l;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // no representable decrease left: stationary up to roundoff
                let predicted = -0.5 * grad.dot(&step);
                if predicted <= 64.0 * f64::EPSILON * loss.max(f64::MIN_POSITIVE) {
                    return Ok((u, loss));
                }
                break;
            }
        }
        Err(Error::NotConverged {
            iterations: max_iter,
            gradient_norm: grad_norm,
            best: u.iter().cloned().collect(),
        })
    }
}

/// Central-difference Jacobian of `map` at `u`.
pub fn central_difference(map: &dyn ForwardMap, u: &DVector<f64>, step: f64) -> Result<DMatrix<f64>> {
    let n = u.len();
    let cols: Vec<Result<DVector<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut up = u.clone();
            let mut um = u.clone();
            up[i] += step;
            um[i] -= step;
            Ok((map.evaluate(&up)? - map.evaluate(&um)?) / (2.0 * step))
        })
        .collect();
    let mut jac = DMatrix::zeros(map.output_dim(), n);
    for (i, c) in cols.into_iter().enumerate() {
        jac.set_column(i, &c?);
    }
    Ok(jac)
}
