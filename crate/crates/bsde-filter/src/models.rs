//! State dynamics and observation models shared by all filters.
//!
//! Each state model supplies the drift `b`, its exact divergence
//! `sum_i db_i/dx_i` (the zeroth-order coefficient of the backward equation),
//! and a constant diagonal diffusion. Observation models supply the map `h`
//! and a discrete Gaussian likelihood `m = h(x) + xi`, `xi ~ N(0, diag(std^2))`.

use std::sync::Arc;

use crate::error::{Error, Result};

pub type DriftFn = Arc<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>;
pub type DivergenceFn = Arc<dyn Fn(&[f64]) -> Result<f64> + Send + Sync>;
pub type ObservationFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Immutable description of the state equation `dS = b(S) dt + diag(sigma) dW`.
#[derive(Clone)]
pub struct StateModel {
    pub name: String,
    pub dim: usize,
    /// Diagonal diffusion, constant in time; entries strictly positive.
    pub sigma: Vec<f64>,
    drift: DriftFn,
    divergence: DivergenceFn,
}

impl StateModel {
    pub fn new(
        name: &str,
        dim: usize,
        sigma: Vec<f64>,
        drift: DriftFn,
        divergence: DivergenceFn,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "state dimension must be positive".into(),
            ));
        }
        if sigma.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "sigma has {} entries, expected {}",
                sigma.len(),
                dim
            )));
        }
        if sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(
                "sigma entries must be strictly positive".into(),
            ));
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            sigma,
            drift,
            divergence,
        })
    }

    /// Custom model with the divergence supplied by central finite differences.
    pub fn with_fd_divergence(
        name: &str,
        dim: usize,
        sigma: Vec<f64>,
        drift: DriftFn,
    ) -> Result<Self> {
        let fd_drift = drift.clone();
        let divergence: DivergenceFn =
            Arc::new(move |x: &[f64]| fd_divergence_of(&fd_drift, x, 1e-5));
        Self::new(name, dim, sigma, drift, divergence)
    }

    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let b = (self.drift)(x)?;
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("drift of model '{}'", self.name),
            });
        }
        Ok(b)
    }

    pub fn divergence(&self, x: &[f64]) -> Result<f64> {
        let d = (self.divergence)(x)?;
        if !d.is_finite() {
            return Err(Error::NonFinite {
                context: format!("divergence of model '{}'", self.name),
            });
        }
        Ok(d)
    }

    /// Central finite-difference estimate of the drift divergence; test oracle
    /// and fallback for user models.
    pub fn fd_divergence(&self, x: &[f64], step: f64) -> Result<f64> {
        fd_divergence_of(&self.drift, x, step)
    }
}

fn fd_divergence_of(drift: &DriftFn, x: &[f64], step: f64) -> Result<f64> {
    let mut acc = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let fp = drift(&xp)?[i];
        xp[i] = x[i] - step;
        let fm = drift(&xp)?[i];
        xp[i] = x[i];
        acc += (fp - fm) / (2.0 * step);
    }
    Ok(acc)
}

/// Discrete Gaussian observation model `m = h(x) + xi`.
#[derive(Clone)]
pub struct ObservationModel {
    pub name: String,
    pub obs_dim: usize,
    /// Per-component standard deviation of the observation noise.
    pub obs_std: Vec<f64>,
    h: ObservationFn,
}

impl ObservationModel {
    pub fn new(name: &str, obs_dim: usize, obs_std: Vec<f64>, h: ObservationFn) -> Result<Self> {
        if obs_dim == 0 {
            return Err(Error::InvalidArgument(
                "observation dimension must be positive".into(),
            ));
        }
        if obs_std.len() != obs_dim || obs_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(
                "obs_std must have obs_dim strictly positive entries".into(),
            ));
        }
        Ok(Self {
            name: name.to_string(),
            obs_dim,
            obs_std,
            h,
        })
    }

    pub fn observe(&self, x: &[f64]) -> Vec<f64> {
        (self.h)(x)
    }

    /// Sum over components of the log of the univariate Gaussian density with
    /// mean `h(x)_j` and std `obs_std_j` evaluated at `m_j`.
    pub fn log_likelihood(&self, m: &[f64], x: &[f64]) -> f64 {
        let hx = self.observe(x);
        let mut ll = 0.0;
        for j in 0..self.obs_dim {
            let s = self.obs_std[j];
            let z = (m[j] - hx[j]) / s;
            ll += -0.5 * z * z - (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
        }
        ll
    }
}

/// 2-D benchmark dynamics `b(S) = alpha (sin(x2) + x1/(1+x1), cos(x1) + x2/(1+x2))`.
pub fn synthetic_model(alpha: f64, sigma_scalar: f64) -> Result<StateModel> {
    if !alpha.is_finite() {
        return Err(Error::InvalidArgument("alpha must be finite".into()));
    }
    let drift: DriftFn = Arc::new(move |x: &[f64]| {
        let (d1, d2) = (1.0 + x[0], 1.0 + x[1]);
        if d1 == 0.0 || d2 == 0.0 {
            return Err(Error::Domain {
                model: "synthetic".into(),
                reason: "drift singular at x_i = -1".into(),
            });
        }
        Ok(vec![
            alpha * (x[1].sin() + x[0] / d1),
            alpha * (x[0].cos() + x[1] / d2),
        ])
    });
    let divergence: DivergenceFn = Arc::new(move |x: &[f64]| {
        let (d1, d2) = (1.0 + x[0], 1.0 + x[1]);
        if d1 == 0.0 || d2 == 0.0 {
            return Err(Error::Domain {
                model: "synthetic".into(),
                reason: "divergence singular at x_i = -1".into(),
            });
        }
        Ok(alpha / (d1 * d1) + alpha / (d2 * d2))
    });
    StateModel::new("synthetic", 2, vec![sigma_scalar; 2], drift, divergence)
}

/// 2-D atom in the AB-form Lennard-Jones potential `V = A/r^12 - B/r^6` with
/// the platform atom fixed at the origin; drift is `-grad V`.
pub fn lennard_jones_model(a: f64, b: f64, sigma_scalar: f64) -> Result<StateModel> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::InvalidArgument(
            "Lennard-Jones parameters A, B must be positive".into(),
        ));
    }
    let radius = |x: &[f64]| -> Result<f64> {
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        if r == 0.0 {
            Err(Error::Domain {
                model: "lennard-jones".into(),
                reason: "potential singular at the origin".into(),
            })
        } else {
            Ok(r)
        }
    };
    let drift: DriftFn = Arc::new(move |x: &[f64]| {
        let r = radius(x)?;
        // V'(r) = -12 A / r^13 + 6 B / r^7
        let vp = -12.0 * a / r.powi(13) + 6.0 * b / r.powi(7);
        Ok(vec![-vp * x[0] / r, -vp * x[1] / r])
    });
    let divergence: DivergenceFn = Arc::new(move |x: &[f64]| {
        let r = radius(x)?;
        let vp = -12.0 * a / r.powi(13) + 6.0 * b / r.powi(7);
        let vpp = 156.0 * a / r.powi(14) - 42.0 * b / r.powi(8);
        // div(-grad V) = -laplacian(V) = -(V'' + V'/r) in d = 2
        Ok(-(vpp + vp / r))
    });
    StateModel::new("lennard-jones", 2, vec![sigma_scalar; 2], drift, divergence)
}

/// Lorenz-96: `b_i = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F` with cyclic indices.
pub fn lorenz96_model(dim: usize, forcing: f64, sigma_scalar: f64) -> Result<StateModel> {
    if dim < 4 {
        return Err(Error::InvalidArgument("Lorenz-96 requires d >= 4".into()));
    }
    let drift: DriftFn = Arc::new(move |x: &[f64]| {
        let d = x.len();
        let mut b = Vec::with_capacity(d);
        for i in 0..d {
            let ip1 = (i + 1) % d;
            let im1 = (i + d - 1) % d;
            let im2 = (i + d - 2) % d;
            b.push((x[ip1] - x[im2]) * x[im1] - x[i] + forcing);
        }
        Ok(b)
    });
    // db_i/dx_i = -1 for every i
    let divergence: DivergenceFn = Arc::new(move |x: &[f64]| Ok(-(x.len() as f64)));
    StateModel::new("lorenz96", dim, vec![sigma_scalar; dim], drift, divergence)
}

/// Linear drift `b(x) = -theta x`; the linear-Gaussian instance used by the
/// exact Kalman oracle.
pub fn linear_model(dim: usize, theta: f64, sigma_scalar: f64) -> Result<StateModel> {
    if !theta.is_finite() {
        return Err(Error::InvalidArgument("theta must be finite".into()));
    }
    let drift: DriftFn = Arc::new(move |x: &[f64]| Ok(x.iter().map(|xi| -theta * xi).collect()));
    let divergence: DivergenceFn = Arc::new(move |x: &[f64]| Ok(-theta * x.len() as f64));
    StateModel::new("ou", dim, vec![sigma_scalar; dim], drift, divergence)
}

/// Direct observations `h = identity`.
pub fn linear_observation(dim: usize, r_std: f64) -> Result<ObservationModel> {
    ObservationModel::new(
        "linear",
        dim,
        vec![r_std; dim],
        Arc::new(|x: &[f64]| x.to_vec()),
    )
}

/// Componentwise signed cube root `h_j(x) = sign(x_j) |x_j|^{1/3}`.
pub fn cubic_root_observation(dim: usize, r_std: f64) -> Result<ObservationModel> {
    ObservationModel::new(
        "cubic-root",
        dim,
        vec![r_std; dim],
        Arc::new(|x: &[f64]| x.iter().map(|v| v.cbrt()).collect()),
    )
}
