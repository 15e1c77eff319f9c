//! Periodic linear transport observed at a final time.

use nalgebra::{DMatrix, DVector};

use super::ForwardMap;
use crate::error::{check_dim, Error, Result};
use crate::rng::{Purpose, RngStream};

/// `u0 ↦ (U0({x_i^D − aT}))_i` where `U0` is the periodic piecewise-linear
/// interpolant of `u0` on the nodes `x_k = k/d_u`, `k = 1..d_u`, and the
/// observation points are `x_i^D = i/d_y`, `i = 1..d_y`.
#[derive(Debug, Clone)]
pub struct TransportMap {
    d_u: usize,
    speed: f64,
    time: f64,
    // (left index, right index, right weight) per observation
    stencil: Vec<(usize, usize, f64)>,
}

fn node_index(m: usize, d_u: usize) -> usize {
    // node m sits at x = m/d_u; node 0 coincides with node d_u
    (m + d_u - 1) % d_u
}

impl TransportMap {
    pub fn new(d_u: usize, d_y: usize, speed: f64, time: f64) -> Result<Self> {
        if d_u == 0 || d_y == 0 {
            return Err(Error::invalid("transport grid", "d_u and d_y must be positive"));
        }
        if !(time >= 0.0) || !time.is_finite() || !speed.is_finite() {
            return Err(Error::invalid("transport", "speed must be finite and time nonnegative"));
        }
        let shift = speed * time;
        let stencil = (1..=d_y)
            .map(|i| {
                let x = i as f64 / d_y as f64 - shift;
                let frac = x - x.floor();
                let p = frac * d_u as f64;
                let mut m = p.floor() as usize;
                let mut w = p - m as f64;
                if m >= d_u {
                    m = 0;
                    w = 0.0;
                }
                (node_index(m, d_u), node_index(m + 1, d_u), w)
            })
            .collect();
        Ok(TransportMap {
            d_u,
            speed,
            time,
            stencil,
        })
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Parameter index nearest to the departure point of each observation.
    pub fn departure_indices(&self) -> Vec<usize> {
        self.stencil
            .iter()
            .map(|&(l, r, w)| if w < 0.5 { l } else { r })
            .collect()
    }
}

impl ForwardMap for TransportMap {
    fn input_dim(&self) -> usize {
        self.d_u
    }
    fn output_dim(&self) -> usize {
        self.stencil.len()
    }
    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("transport input", self.d_u, u.len())?;
        Ok(DVector::from_iterator(
            self.stencil.len(),
            self.stencil.iter().map(|&(l, r, w)| (1.0 - w) * u[l] + w * u[r]),
        ))
    }
    fn matrix(&self) -> Option<DMatrix<f64>> {
        let mut a = DMatrix::zeros(self.stencil.len(), self.d_u);
        for (i, &(l, r, w)) in self.stencil.iter().enumerate() {
            a[(i, l)] += 1.0 - w;
            a[(i, r)] += w;
        }
        Some(a)
    }
}

pub fn transport_model(d_u: usize, d_y: usize, speed: f64, time: f64) -> Result<TransportMap> {
    TransportMap::new(d_u, d_y, speed, time)
}

/// `y = G(u_true) + σ ξ` with `ξ ~ N(0, I)` drawn from the data-noise stream.
pub fn generate_transport_data(
    map: &dyn ForwardMap,
    u_true: &DVector<f64>,
    sigma: f64,
    seed: u64,
) -> Result<DVector<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("noise level", format!("must be nonnegative, got {sigma}")));
    }
    let mut y = map.evaluate(u_true)?;
    if sigma > 0.0 {
        let mut stream = RngStream::new(seed, Purpose::DataNoise, 0);
        for v in y.iter_mut() {
            *v += sigma * stream.normal();
        }
    }
    Ok(y)
}
