//! Ensemble container, empirical statistics and the dropout mechanism.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{is_symmetric, PSD_RTOL};
use crate::rng::{Purpose, RngStream};

/// `J` members of dimension `d_u`, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::EnsembleTooSmall(members.ncols()));
        }
        if members.nrows() == 0 {
            return Err(Error::invalid("d_u", "parameter dimension must be positive"));
        }
        Ok(Ensemble { members })
    }

    /// Rebuilds an ensemble as `mean + deviations[:, j]`.
    pub fn from_parts(mean: &DVector<f64>, deviations: &DMatrix<f64>) -> Result<Self> {
        check_dim("ensemble mean", deviations.nrows(), mean.len())?;
        let mut members = deviations.clone();
        for mut col in members.column_iter_mut() {
            col += mean;
        }
        Ensemble::new(members)
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn member(&self, j: usize) -> DVector<f64> {
        self.members.column(j).into_owned()
    }

    pub fn into_members(self) -> DMatrix<f64> {
        self.members
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    /// Ensemble mean and the deviations `u⁽ʲ⁾ − ū` as columns.
    pub fn mean_and_deviations(&self) -> (DVector<f64>, DMatrix<f64>) {
        let mean = self.mean();
        let mut dev = self.members.clone();
        for mut col in dev.column_iter_mut() {
            col -= &mean;
        }
        (mean, dev)
    }
}

/// Draws `J` members i.i.d. from `N(0, scale² I)`.
pub fn gaussian_init(dim: usize, size: usize, scale: f64, seed: u64) -> Result<Ensemble> {
    if size < 2 {
        return Err(Error::EnsembleTooSmall(size));
    }
    if dim == 0 {
        return Err(Error::invalid("d_u", "parameter dimension must be positive"));
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::invalid("scale", format!("must be finite and nonnegative, got {scale}")));
    }
    let mut stream = RngStream::new(seed, Purpose::Init, 0);
    // column-major fill: member j is drawn as a block
    let members = DMatrix::from_fn(dim, size, |_, _| 0.0);
    let mut members = members;
    for j in 0..size {
        for i in 0..dim {
            members[(i, j)] = scale * stream.normal();
        }
    }
    Ensemble::new(members)
}

/// Shared Bernoulli keep-mask over parameter coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutMask {
    keep: Vec<bool>,
    keep_rate: f64,
}

impl DropoutMask {
    pub fn from_keep(keep: Vec<bool>, keep_rate: f64) -> Self {
        DropoutMask { keep, keep_rate }
    }

    pub fn ones(dim: usize) -> Self {
        DropoutMask {
            keep: vec![true; dim],
            keep_rate: 1.0,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        DropoutMask {
            keep: vec![false; dim],
            keep_rate: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep_rate(&self) -> f64 {
        self.keep_rate
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.keep.len(), self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }))
    }

    /// `ρ ∘ τ` applied to every column.
    pub fn apply_to_columns(&self, deviations: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("dropout mask", deviations.nrows(), self.keep.len())?;
        let mut out = deviations.clone();
        for (i, &k) in self.keep.iter().enumerate() {
            if !k {
                out.row_mut(i).fill(0.0);
            }
        }
        Ok(out)
    }
}

/// Samples i.i.d. Bernoulli(`keep_rate`) entries from `stream`.
pub fn sample_mask(keep_rate: f64, dim: usize, stream: &mut RngStream) -> Result<DropoutMask> {
    if !(keep_rate > 0.0 && keep_rate < 1.0) {
        return Err(Error::invalid("keep_rate", format!("must lie in (0, 1), got {keep_rate}")));
    }
    let keep = (0..dim).map(|_| stream.bernoulli(keep_rate)).collect();
    Ok(DropoutMask { keep, keep_rate })
}

/// Dropout ensemble `ū + ρ ∘ τ⁽ʲ⁾`. The mean is unchanged.
pub fn apply_dropout(ensemble: &Ensemble, mask: &DropoutMask) -> Result<Ensemble> {
    let (mean, dev) = ensemble.mean_and_deviations();
    let dropped = mask.apply_to_columns(&dev)?;
    Ensemble::from_parts(&mean, &dropped)
}

/// Empirical covariance blocks of an ensemble and its images.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBundle {
    pub cuu: DMatrix<f64>,
    pub cuz: DMatrix<f64>,
    pub czz: DMatrix<f64>,
}

impl CovarianceBundle {
    /// Builds the blocks from deviation tables `T` (`d_u × J`) and `Y`
    /// (`d_z × J`), both already centred.
    pub fn from_deviations(t: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        check_dim("covariance members vs images", t.ncols(), y.ncols())?;
        let j = t.ncols();
        if j < 2 {
            return Err(Error::EnsembleTooSmall(j));
        }
        let s = 1.0 / (j as f64 - 1.0);
        Ok(CovarianceBundle {
            cuu: t * t.transpose() * s,
            cuz: t * y.transpose() * s,
            czz: y * y.transpose() * s,
        })
    }
}

/// Centres the columns of `images` around their mean.
pub fn centred(images: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = images.column_mean();
    let mut out = images.clone();
    for mut col in out.column_iter_mut() {
        col -= &mean;
    }
    out
}

/// `C^{uu}`, `C^{uz}`, `C^{zz}` of the ensemble and its images
/// (`images[:, j] = H(u⁽ʲ⁾)`).
pub fn empirical_covariances(ensemble: &Ensemble, images: &DMatrix<f64>) -> Result<CovarianceBundle> {
    check_dim("member/image count", ensemble.size(), images.ncols())?;
    let (_, t) = ensemble.mean_and_deviations();
    CovarianceBundle::from_deviations(&t, &centred(images))
}

/// Conditional expectation of the dropout covariance,
/// `λ(1−λ) diag(C) + λ² C`.
pub fn expected_dropout_covariance(cuu: &DMatrix<f64>, keep_rate: f64) -> Result<DMatrix<f64>> {
    if !is_symmetric(cuu, PSD_RTOL) {
        return Err(Error::NotSymmetric {
            context: "expected dropout covariance",
        });
    }
    if !(0.0..=1.0).contains(&keep_rate) {
        return Err(Error::invalid("keep_rate", format!("must lie in [0, 1], got {keep_rate}")));
    }
    let lam = keep_rate;
    let mut out = cuu * (lam * lam);
    for i in 0..cuu.nrows() {
        out[(i, i)] += lam * (1.0 - lam) * cuu[(i, i)];
    }
    Ok(out)
}
