//! Comparison filters: auxiliary particle filter and stochastic ensemble
//! Kalman filter. Both share the model catalog and the Euler-Maruyama
//! propagation of the sde module.

use rayon::prelude::*;

use crate::density::GaussianMixture;
use crate::error::{Error, Result};
use crate::models::{ObservationModel, StateModel};
use crate::sde::{euler_forward, stream_id, Purpose, RngStream};

/// Weighted particle approximation of the filtering density.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub particles: Vec<Vec<f64>>,
    /// Nonnegative, sums to 1.
    pub weights: Vec<f64>,
}

impl ParticleSet {
    pub fn uniform(particles: Vec<Vec<f64>>) -> Self {
        let n = particles.len();
        Self {
            particles,
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn weighted_mean(&self) -> Vec<f64> {
        let d = self.particles[0].len();
        let mut mean = vec![0.0; d];
        for (p, w) in self.particles.iter().zip(self.weights.iter()) {
            for j in 0..d {
                mean[j] += w * p[j];
            }
        }
        mean
    }

    /// Effective sample size `1 / sum w^2`; lies in `[1, P]`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Ensemble of equally weighted state realizations.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<Vec<f64>>,
}

impl Ensemble {
    pub fn new(members: Vec<Vec<f64>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidArgument(
                "ensemble needs at least 2 members".into(),
            ));
        }
        Ok(Self { members })
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.members[0].len();
        let e = self.members.len() as f64;
        let mut mean = vec![0.0; d];
        for m in &self.members {
            for j in 0..d {
                mean[j] += m[j] / e;
            }
        }
        mean
    }
}

/// Systematic resampling: returns parent indices for `n` children drawn with
/// a single uniform offset.
pub fn systematic_resample(weights: &[f64], n: usize, rng: &mut RngStream) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let u0 = rng.uniform();
    let mut indices = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for k in 0..n {
        let target = (k as f64 + u0) / n as f64 * total;
        while cum < target && i + 1 < weights.len() {
            i += 1;
            cum += weights[i];
        }
        indices.push(i);
    }
    indices
}

/// Normalizes shifted log-weights into a probability vector.
fn normalize_log_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::FilterDiverged {
            step: 0,
            reason: "all particle weights vanished".into(),
        });
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::FilterDiverged {
            step: 0,
            reason: "particle weights not normalizable".into(),
        });
    }
    Ok(w.iter().map(|v| v / total).collect())
}

/// One auxiliary particle filter step (Pitt-Shephard). The auxiliary point of
/// each particle is the mean of `n_aux` forward simulations; parents are
/// chosen by systematic resampling on first-stage weights, then propagated
/// once and reweighted by the likelihood ratio against their auxiliary point.
#[allow(clippy::too_many_arguments)]
pub fn apf_step(
    ps: &ParticleSet,
    model: &StateModel,
    obs_model: &ObservationModel,
    observation: &[f64],
    dt: f64,
    n_aux: usize,
    step: u64,
    seed: u64,
) -> Result<ParticleSet> {
    if n_aux == 0 {
        return Err(Error::InvalidArgument("APF needs n_aux >= 1".into()));
    }
    let p_count = ps.particles.len();
    let d = ps.particles[0].len();

    // stage 1: auxiliary predictive points
    let aux: Result<Vec<Vec<f64>>> = ps
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = RngStream::new(seed, stream_id(Purpose::ApfAux, step, i as u64));
            let mut mu = vec![0.0; d];
            for _ in 0..n_aux {
                let sim = euler_forward(model, p, dt, &mut rng)?;
                for j in 0..d {
                    mu[j] += sim[j] / n_aux as f64;
                }
            }
            Ok(mu)
        })
        .collect();
    let aux = aux?;

    // stage 2: first-stage weights in log space
    let first_stage_log: Vec<f64> = ps
        .weights
        .iter()
        .zip(aux.iter())
        .map(|(w, mu)| w.max(f64::MIN_POSITIVE).ln() + obs_model.log_likelihood(observation, mu))
        .collect();
    let first_stage = normalize_log_weights(&first_stage_log)?;

    // stage 3: systematic resampling of parent indices
    let mut resample_rng = RngStream::new(seed, stream_id(Purpose::ApfResample, step, 0));
    let parents = systematic_resample(&first_stage, p_count, &mut resample_rng);

    // stage 4: propagate each chosen parent once
    let children: Result<Vec<Vec<f64>>> = parents
        .par_iter()
        .enumerate()
        .map(|(i, &parent)| {
            let mut rng = RngStream::new(seed, stream_id(Purpose::ApfPropagate, step, i as u64));
            euler_forward(model, &ps.particles[parent], dt, &mut rng)
        })
        .collect();
    let children = children?;

    // stage 5: second-stage weights, likelihood ratio child vs auxiliary point
    let second_stage_log: Vec<f64> = children
        .iter()
        .zip(parents.iter())
        .map(|(child, &parent)| {
            obs_model.log_likelihood(observation, child)
                - obs_model.log_likelihood(observation, &aux[parent])
        })
        .collect();
    let weights = normalize_log_weights(&second_stage_log)?;

    Ok(ParticleSet {
        particles: children,
        weights,
    })
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix;
/// `None` when the matrix is not positive definite.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Ensemble Kalman gain `G = C_xh (C_hh)^{-1}` from state/predicted-observation
/// cross covariance and predicted-observation covariance. Returns the gain and
/// whether ridge regularization had to be applied.
pub fn kalman_gain(states: &[Vec<f64>], pred_obs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, bool)> {
    let e = states.len();
    let d = states[0].len();
    let r = pred_obs[0].len();
    let ef = e as f64;
    let mut x_mean = vec![0.0; d];
    let mut h_mean = vec![0.0; r];
    for i in 0..e {
        for j in 0..d {
            x_mean[j] += states[i][j] / ef;
        }
        for j in 0..r {
            h_mean[j] += pred_obs[i][j] / ef;
        }
    }
    let mut c_xh = vec![vec![0.0; r]; d];
    let mut c_hh = vec![vec![0.0; r]; r];
    for i in 0..e {
        for a in 0..r {
            let ha = pred_obs[i][a] - h_mean[a];
            for b in 0..r {
                c_hh[a][b] += ha * (pred_obs[i][b] - h_mean[b]) / (ef - 1.0);
            }
            for jd in 0..d {
                c_xh[jd][a] += (states[i][jd] - x_mean[jd]) * ha / (ef - 1.0);
            }
        }
    }
    let (l, ridged) = match cholesky(&c_hh) {
        Some(l) => (l, false),
        None => {
            for (a, row) in c_hh.iter_mut().enumerate() {
                row[a] += 1e-8;
            }
            let l = cholesky(&c_hh).ok_or_else(|| Error::FilterDiverged {
                step: 0,
                reason: "predicted-observation covariance not factorizable".into(),
            })?;
            (l, true)
        }
    };
    // solve C_hh g_row = c_xh_row for each state dimension
    let gain: Vec<Vec<f64>> = c_xh.iter().map(|row| cholesky_solve(&l, row)).collect();
    Ok((gain, ridged))
}

/// One stochastic EnKF step with perturbed predicted observations. Returns
/// the analysis ensemble and whether the gain needed ridge regularization.
pub fn enkf_step(
    ensemble: &Ensemble,
    model: &StateModel,
    obs_model: &ObservationModel,
    observation: &[f64],
    dt: f64,
    step: u64,
    seed: u64,
) -> Result<(Ensemble, bool)> {
    let e = ensemble.members.len();
    let d = ensemble.members[0].len();
    let r = obs_model.obs_dim;

    // forecast
    let forecast: Result<Vec<Vec<f64>>> = ensemble
        .members
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let mut rng = RngStream::new(seed, stream_id(Purpose::EnkfForecast, step, i as u64));
            euler_forward(model, m, dt, &mut rng)
        })
        .collect();
    let forecast = forecast?;

    // predicted observations with fresh perturbations
    let pred_obs: Vec<Vec<f64>> = forecast
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut rng = RngStream::new(seed, stream_id(Purpose::EnkfPerturb, step, i as u64));
            let mut h = obs_model.observe(m);
            for j in 0..r {
                h[j] += obs_model.obs_std[j] * rng.standard_normal();
            }
            h
        })
        .collect();

    let (gain, ridged) = kalman_gain(&forecast, &pred_obs)?;

    // analysis
    let mut analysis = Vec::with_capacity(e);
    for i in 0..e {
        let mut member = forecast[i].clone();
        for jd in 0..d {
            for a in 0..r {
                member[jd] += gain[jd][a] * (observation[a] - pred_obs[i][a]);
            }
        }
        if member.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "EnKF analysis member".into(),
            });
        }
        analysis.push(member);
    }
    Ok((Ensemble::new(analysis)?, ridged))
}

/// Runs the APF across all observations; returns weighted-mean estimates per
/// step (entry 0 is the prior mean) and the failure step, if any.
#[allow(clippy::too_many_arguments)]
pub fn run_apf(
    model: &StateModel,
    obs_model: &ObservationModel,
    prior: &GaussianMixture,
    observations: &[Vec<f64>],
    n_particles: usize,
    n_aux: usize,
    dt: f64,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Option<usize>)> {
    let mut rng = RngStream::new(seed, stream_id(Purpose::InitCloud, 0, 1));
    let mut ps = ParticleSet::uniform(prior.sample(n_particles, &mut rng));
    let mut estimates = vec![ps.weighted_mean()];
    for (n, obs) in observations.iter().enumerate() {
        match apf_step(&ps, model, obs_model, obs, dt, n_aux, n as u64 + 1, seed) {
            Ok(next) => {
                estimates.push(next.weighted_mean());
                ps = next;
            }
            // A particle blowing up to a non-finite state or escaping the
            // model's domain is numerical divergence, not a caller error.
            Err(Error::FilterDiverged { .. } | Error::NonFinite { .. } | Error::Domain { .. }) => {
                return Ok((estimates, Some(n + 1)))
            }
            Err(e) => return Err(e),
        }
    }
    Ok((estimates, None))
}

/// Runs the EnKF across all observations; returns ensemble-mean estimates per
/// step (entry 0 is the prior mean) and the failure step, if any.
pub fn run_enkf(
    model: &StateModel,
    obs_model: &ObservationModel,
    prior: &GaussianMixture,
    observations: &[Vec<f64>],
    n_members: usize,
    dt: f64,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Option<usize>)> {
    let mut rng = RngStream::new(seed, stream_id(Purpose::InitCloud, 0, 2));
    let mut ensemble = Ensemble::new(prior.sample(n_members, &mut rng))?;
    let mut estimates = vec![ensemble.mean()];
    for (n, obs) in observations.iter().enumerate() {
        match enkf_step(&ensemble, model, obs_model, obs, dt, n as u64 + 1, seed) {
            Ok((next, _)) => {
                estimates.push(next.mean());
                ensemble = next;
            }
            Err(Error::FilterDiverged { .. } | Error::NonFinite { .. } | Error::Domain { .. }) => {
                return Ok((estimates, Some(n + 1)))
            }
            Err(e) => return Err(e),
        }
    }
    Ok((estimates, None))
}
