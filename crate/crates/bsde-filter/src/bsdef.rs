//! The kernel-learning backward SDE filter loop.
//!
//! One step: propagate the sample cloud forward, solve the time-inverse
//! backward equation at each propagated point by fixed-point iteration with
//! a stochastic-approximation expectation, apply the Bayesian update, fit a
//! Gaussian-kernel mixture to the updated density values, and resample the
//! cloud from the fitted mixture.

use rayon::prelude::*;

use crate::density::{
    fit_sgd, select_centers, BandScales, GaussianMixture, SelectionStatus, TrainingSet,
};
use crate::error::{Error, Result};
use crate::models::{ObservationModel, StateModel};
use crate::sde::{euler_forward, euler_time_inverse, stream_id, Purpose, RngStream};

/// How the conditional expectation inside the fixed-point iteration is
/// approximated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExpectationMode {
    /// Running mean over all samples generated so far (default).
    #[default]
    Batch,
    /// One fresh sample per iteration.
    Single,
    /// Fully computed Monte Carlo mean with the given sample count, frozen
    /// across iterations.
    FullMonteCarlo(usize),
}

/// Spatial samples with filtering-density values at those points.
#[derive(Debug, Clone)]
pub struct SampleCloud {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BsdefConfig {
    /// N, the number of spatial samples.
    pub n_samples: usize,
    /// K, the number of Gaussian kernels.
    pub n_kernels: usize,
    /// L, the fixed-point iteration count.
    pub fp_iterations: usize,
    /// J, the SGD iteration count per step.
    pub sgd_iterations: usize,
    /// Learning rate for both weights and bandwidths.
    pub lr: f64,
    pub dt: f64,
    pub seed: u64,
    /// Cold-start kernel weight when warm starting is unavailable.
    pub init_weight: f64,
    /// Cold-start kernel bandwidth (lambda) when warm starting is unavailable.
    pub init_bandwidth: f64,
    pub expectation: ExpectationMode,
    /// Data-driven bandwidth band applied during the kernel fit.
    pub band: BandScales,
    /// Degenerate-update threshold as a fraction of N: an update whose
    /// effective sample size falls below `ess_threshold * n_samples` widens
    /// the fitted mixture, and a long unbroken run of such updates is
    /// reported as divergence. Zero disables the mechanism.
    pub ess_threshold: f64,
}

impl BsdefConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0
            || self.n_kernels == 0
            || self.fp_iterations == 0
            || self.sgd_iterations == 0
        {
            return Err(Error::Config("bsdef counts must all be >= 1".into()));
        }
        if self.n_kernels > self.n_samples {
            return Err(Error::Config("bsdef needs K <= N".into()));
        }
        if !(self.dt > 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config("bsdef dt and lr must be positive".into()));
        }
        if !(self.init_weight > 0.0) || !(self.init_bandwidth > 0.0) {
            return Err(Error::Config(
                "bsdef initial guesses must be positive".into(),
            ));
        }
        self.band.validate()?;
        if !(self.ess_threshold >= 0.0 && self.ess_threshold < 1.0) {
            return Err(Error::Config(
                "bsdef ess_threshold must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// The loop state carried between steps.
#[derive(Debug, Clone)]
pub struct FilteringState {
    pub cloud: SampleCloud,
    pub density: GaussianMixture,
    pub step_index: usize,
}

impl FilteringState {
    /// Initial state: cloud drawn from the prior density.
    pub fn init(prior: &GaussianMixture, cfg: &BsdefConfig) -> Self {
        let mut rng = RngStream::new(cfg.seed, stream_id(Purpose::InitCloud, 0, 0));
        let points = prior.sample(cfg.n_samples, &mut rng);
        let values = points.iter().map(|p| prior.eval(p)).collect();
        Self {
            cloud: SampleCloud { points, values },
            density: prior.clone(),
            step_index: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub value: f64,
    /// Set when `|dt * divergence| >= 1`, i.e. the fixed-point iteration has
    /// no contraction guarantee at this point.
    pub contraction_warning: bool,
}

/// Predicted filtering-density value at one spatial point.
///
/// Runs the fixed-point iteration `Y^{l+1} = E^l - dt * div(x) * Y^l` with
/// `Y^0 = prev_density(x)`, where `E^l` approximates the expectation of the
/// previous density over the time-inverse Euler transition from `x`. The
/// result is clamped at zero.
///
/// Where `|dt * div| >= 1` the iteration is non-contractive and each sweep
/// amplifies the iterate geometrically, so the divergence correction is
/// dropped there and the plain expectation `E^l` is returned instead; the
/// point is flagged with `contraction_warning`.
pub fn predict_at_point(
    model: &StateModel,
    prev_density: &GaussianMixture,
    x: &[f64],
    dt: f64,
    l_iters: usize,
    mode: ExpectationMode,
    rng: &mut RngStream,
) -> Result<Prediction> {
    if l_iters == 0 {
        return Err(Error::InvalidArgument(
            "fixed-point iteration needs L >= 1".into(),
        ));
    }
    let div = model.divergence(x)?;
    let contraction_warning = (dt * div).abs() >= 1.0;
    let mut y = prev_density.eval(x);

    let mut frozen_expectation = None;
    if let ExpectationMode::FullMonteCarlo(m) = mode {
        if m == 0 {
            return Err(Error::InvalidArgument(
                "Monte Carlo sample count must be >= 1".into(),
            ));
        }
        let mut sum = 0.0;
        for _ in 0..m {
            let xt = euler_time_inverse(model, x, dt, rng)?;
            sum += prev_density.eval(&xt);
        }
        frozen_expectation = Some(sum / m as f64);
    }

    let mut running_sum = 0.0;
    for l in 0..l_iters {
        let expectation = match mode {
            ExpectationMode::FullMonteCarlo(_) => frozen_expectation.unwrap(),
            ExpectationMode::Single => {
                let xt = euler_time_inverse(model, x, dt, rng)?;
                prev_density.eval(&xt)
            }
            ExpectationMode::Batch => {
                let xt = euler_time_inverse(model, x, dt, rng)?;
                running_sum += prev_density.eval(&xt);
                running_sum / (l + 1) as f64
            }
        };
        y = if contraction_warning {
            expectation
        } else {
            expectation - dt * div * y
        };
        if !y.is_finite() {
            return Err(Error::NonFinite {
                context: "fixed-point iterate Y".into(),
            });
        }
    }
    Ok(Prediction {
        value: y.max(0.0),
        contraction_warning,
    })
}

/// Bayesian update of predicted density values: multiply by the observation
/// likelihood, then rescale so the mean of the output equals the mean of the
/// input (the sample-cloud stand-in for the intractable normalizing
/// constant of the exact update).
pub fn bayes_update(
    predicted: &[f64],
    obs_model: &ObservationModel,
    observation: &[f64],
    points: &[Vec<f64>],
) -> Result<Vec<f64>> {
    debug_assert_eq!(predicted.len(), points.len());
    let n = predicted.len();
    let pred_mean = predicted.iter().sum::<f64>() / n as f64;
    if !(pred_mean > 0.0) {
        return Err(Error::FilterDiverged {
            step: 0,
            reason: "no predicted density value is positive".into(),
        });
    }
    let raw: Vec<f64> = predicted
        .iter()
        .zip(points.iter())
        .map(|(p, x)| p * obs_model.log_likelihood(observation, x).exp())
        .collect();
    let raw_mean = raw.iter().sum::<f64>() / n as f64;
    if !(raw_mean > 0.0) || !raw_mean.is_finite() {
        return Err(Error::FilterDiverged {
            step: 0,
            reason: "observation is inconsistent with every sample".into(),
        });
    }
    let scale = pred_mean / raw_mean;
    if !scale.is_finite() {
        // raw_mean is denormal: the observation is all but inconsistent with
        // the cloud and the mean-preserving rescale would overflow
        return Err(Error::FilterDiverged {
            step: 0,
            reason: "likelihood underflow across the sample cloud".into(),
        });
    }
    Ok(raw.iter().map(|v| v * scale).collect())
}

#[derive(Debug, Clone)]
pub struct StepReport {
    /// Points where the fixed-point iteration had no contraction guarantee.
    pub contraction_warnings: usize,
    pub center_selection: SelectionStatus,
    /// Value-weighted mean of the updated sample cloud, before the kernel fit
    /// and resampling.
    pub posterior_mean: Vec<f64>,
    /// True when the Bayes update concentrated almost all value on a handful
    /// of points (low effective sample size). Isolated degenerate updates are
    /// recoverable; a long unbroken run of them means the track is lost.
    pub degenerate_update: bool,
}

/// Initial mixture for the SGD fit: selected centers with weights and
/// bandwidths warm-started from the previous fit when the kernel count is
/// unchanged (greedy nearest-center assignment), otherwise the configured
/// cold-start guesses.
fn initial_mixture(
    centers: Vec<Vec<f64>>,
    prev: &GaussianMixture,
    cfg: &BsdefConfig,
) -> Result<GaussianMixture> {
    let k = centers.len();
    let d = centers[0].len();
    if prev.num_kernels() == k {
        let mut used = vec![false; k];
        let mut weights = Vec::with_capacity(k);
        let mut bandwidths = Vec::with_capacity(k);
        for c in &centers {
            let mut best = None;
            let mut best_dist = f64::INFINITY;
            for (p, pc) in prev.centers.iter().enumerate() {
                if used[p] {
                    continue;
                }
                let dist: f64 = c
                    .iter()
                    .zip(pc.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = Some(p);
                }
            }
            let p = best.expect("unused previous kernel exists");
            used[p] = true;
            weights.push(prev.weights[p]);
            bandwidths.push(prev.bandwidths[p].clone());
        }
        GaussianMixture::new(centers, weights, bandwidths)
    } else {
        GaussianMixture::new(
            centers,
            vec![cfg.init_weight; k],
            vec![vec![cfg.init_bandwidth; d]; k],
        )
    }
}

/// One full filter step; see the module description for the stages.
pub fn filter_step(
    state: &FilteringState,
    model: &StateModel,
    obs_model: &ObservationModel,
    observation: &[f64],
    cfg: &BsdefConfig,
) -> Result<(FilteringState, StepReport)> {
    cfg.validate()?;
    let step = state.step_index as u64 + 1;
    let seed = cfg.seed;

    // stages 1-2: propagate each point and solve the backward equation there;
    // embarrassingly parallel, one stream per (step, point)
    let per_point: Result<Vec<(Vec<f64>, Prediction)>> = state
        .cloud
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut prop_rng = RngStream::new(seed, stream_id(Purpose::Propagate, step, i as u64));
            let propagated = euler_forward(model, p, cfg.dt, &mut prop_rng)?;
            let mut pred_rng = RngStream::new(seed, stream_id(Purpose::Predict, step, i as u64));
            let prediction = predict_at_point(
                model,
                &state.density,
                &propagated,
                cfg.dt,
                cfg.fp_iterations,
                cfg.expectation,
                &mut pred_rng,
            )?;
            Ok((propagated, prediction))
        })
        .collect();
    let per_point = per_point?;
    let contraction_warnings = per_point
        .iter()
        .filter(|(_, p)| p.contraction_warning)
        .count();
    let points: Vec<Vec<f64>> = per_point.iter().map(|(p, _)| p.clone()).collect();
    let predicted: Vec<f64> = per_point.iter().map(|(_, p)| p.value).collect();

    // stage 3: Bayesian update
    let updated =
        bayes_update(&predicted, obs_model, observation, &points).map_err(|e| match e {
            Error::FilterDiverged { reason, .. } => Error::FilterDiverged {
                step: state.step_index + 1,
                reason,
            },
            other => other,
        })?;

    // stages 4-5: select centers and fit the mixture. The training values
    // are normalized to mean 1 first: the filter is invariant to the overall
    // scale of the density, but the SGD step size is not, and the mean of the
    // updated values otherwise grows from step to step until the gradients
    // overwhelm the learning rate.
    let value_mean = updated.iter().sum::<f64>() / updated.len() as f64;
    let targets: Vec<f64> = updated.iter().map(|v| v / value_mean).collect();
    let training = TrainingSet::new(points, targets)?;
    let posterior_mean = {
        let d = training.points[0].len();
        let total: f64 = training.values.iter().sum();
        let mut mean = vec![0.0; d];
        for (p, v) in training.points.iter().zip(&training.values) {
            for j in 0..d {
                mean[j] += v * p[j];
            }
        }
        for m in &mut mean {
            *m /= total;
        }
        mean
    };
    let mut select_rng = RngStream::new(seed, stream_id(Purpose::CenterSelect, step, 0));
    let (centers, center_selection) = select_centers(&training, cfg.n_kernels, &mut select_rng)?;
    let m0 = initial_mixture(centers, &state.density, cfg)?;
    let mut sgd_rng = RngStream::new(seed, stream_id(Purpose::Sgd, step, 0));
    let mut density = fit_sgd(
        &m0,
        &training,
        cfg.lr,
        cfg.lr,
        cfg.sgd_iterations,
        cfg.band,
        &mut sgd_rng,
    )?;
    // A kernel narrower than the one-step process-noise width sigma*sqrt(2*dt)
    // is invisible to the next prediction step: essentially no time-inverse
    // draw lands inside it, so every predicted value degenerates to zero.
    for bw in &mut density.bandwidths {
        for (b, s) in bw.iter_mut().zip(&model.sigma) {
            *b = b.max(s * (2.0 * cfg.dt).sqrt());
        }
    }
    // When the observation invalidates nearly the whole cloud, the few
    // surviving rows pin the fit to an unreliable location; widen the
    // mixture so the resampled cloud can regain contact with the state.
    let (sum, sum_sq) = training
        .values
        .iter()
        .fold((0.0, 0.0), |(a, b), v| (a + v, b + v * v));
    // Effective number of points carrying the updated values. When it falls
    // below the configured fraction of the cloud, the observation has
    // invalidated nearly every sample and the fit is pinned to an unreliable
    // location; widen the mixture so the resampled cloud can regain contact.
    let ess_count = sum * sum / sum_sq;
    let ess_floor = cfg.ess_threshold * training.len() as f64;
    let degenerate_update = ess_count < ess_floor;
    if degenerate_update {
        let inflate = (ess_floor / ess_count).sqrt().min(8.0);
        for bw in &mut density.bandwidths {
            for b in bw.iter_mut() {
                *b *= inflate;
            }
        }
    }

    // stage 6: resample the cloud from the fitted mixture
    let mut resample_rng = RngStream::new(seed, stream_id(Purpose::Resample, step, 0));
    let new_points = density.sample(cfg.n_samples, &mut resample_rng);
    let new_values = new_points.iter().map(|p| density.eval(p)).collect();

    Ok((
        FilteringState {
            cloud: SampleCloud {
                points: new_points,
                values: new_values,
            },
            density,
            step_index: state.step_index + 1,
        },
        StepReport {
            contraction_warnings,
            center_selection,
            posterior_mean,
            degenerate_update,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Mixture-mean estimate per step; entry 0 is the prior mean.
    pub estimates: Vec<Vec<f64>>,
    /// Fitted density per step; entry 0 is the prior.
    pub densities: Vec<GaussianMixture>,
    /// Step at which the filter diverged, if it did; estimates up to that
    /// step are retained.
    pub failed_at: Option<usize>,
    pub contraction_warnings: usize,
}

/// Runs the filter across all observations, starting from a cloud drawn
/// from `prior`.
pub fn run_filter(
    model: &StateModel,
    obs_model: &ObservationModel,
    prior: &GaussianMixture,
    observations: &[Vec<f64>],
    cfg: &BsdefConfig,
) -> Result<RunOutput> {
    cfg.validate()?;
    let mut state = FilteringState::init(prior, cfg);
    let mut out = RunOutput {
        estimates: vec![prior.mixture_mean()],
        densities: vec![prior.clone()],
        failed_at: None,
        contraction_warnings: 0,
    };
    let mut degenerate_streak = 0usize;
    for (n, obs) in observations.iter().enumerate() {
        match filter_step(&state, model, obs_model, obs, cfg) {
            Ok((next, report)) => {
                out.contraction_warnings += report.contraction_warnings;
                // A single degenerate update is recoverable (the widened
                // mixture usually regains contact within a step or two), but
                // an unbroken run of them means the cloud has permanently
                // lost the state: report divergence instead of emitting
                // estimates that no longer track anything.
                if report.degenerate_update {
                    degenerate_streak += 1;
                    if degenerate_streak >= 20 {
                        out.failed_at = Some(n + 1);
                        return Ok(out);
                    }
                } else {
                    degenerate_streak = 0;
                }
                // Point-estimate convention: the value-weighted mean of the
                // updated sample cloud (the posterior mean estimated on all N
                // points) rather than the mean of the fitted K-kernel mixture;
                // it uses every sample instead of only the selected centers.
                out.estimates.push(report.posterior_mean.clone());
                out.densities.push(next.density.clone());
                state = next;
            }
            // A cloud point blowing up to a non-finite state or escaping the
            // model's domain is numerical divergence, not a caller error.
            Err(Error::FilterDiverged { .. } | Error::NonFinite { .. } | Error::Domain { .. }) => {
                out.failed_at = Some(n + 1);
                return Ok(out);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::kalman_diagonal;
    use crate::models::{linear_model, linear_observation, StateModel};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn frozen_model() -> StateModel {
        StateModel::new(
            "frozen",
            1,
            vec![1e-300],
            Arc::new(|x: &[f64]| Ok(vec![0.0; x.len()])),
            Arc::new(|_: &[f64]| Ok(0.0)),
        )
        .unwrap()
    }

    fn flat_density() -> GaussianMixture {
        // effectively constant 1 over any bounded region
        GaussianMixture::new(vec![vec![0.0]], vec![1.0], vec![vec![1e12]]).unwrap()
    }

    fn test_cfg(seed: u64) -> BsdefConfig {
        BsdefConfig {
            n_samples: 500,
            n_kernels: 3,
            fp_iterations: 10,
            sgd_iterations: 100,
            lr: 1e-2,
            dt: 0.1,
            seed,
            init_weight: 0.5,
            init_bandwidth: std::f64::consts::SQRT_2,
            expectation: ExpectationMode::Batch,
            band: BandScales::default(),
            ess_threshold: 0.0,
        }
    }

    #[test]
    fn predict_frozen_dynamics_returns_prior_value() {
        let model = frozen_model();
        let prior = GaussianMixture::new(vec![vec![0.3]], vec![0.8], vec![vec![1.0]]).unwrap();
        let mut rng = RngStream::new(0, 0);
        let x = [0.5];
        let p = predict_at_point(
            &model,
            &prior,
            &x,
            0.1,
            10,
            ExpectationMode::Batch,
            &mut rng,
        )
        .unwrap();
        assert_relative_eq!(p.value, prior.eval(&x), max_relative = 1e-12);
        assert!(!p.contraction_warning);
    }

    #[test]
    fn predict_affine_fixed_point() {
        // dt * div = -0.2 and expectation frozen at 1: Y converges to 1.25
        let model = StateModel::new(
            "lin",
            1,
            vec![1e-300],
            Arc::new(|x: &[f64]| Ok(vec![-2.0 * x[0]])),
            Arc::new(|_: &[f64]| Ok(-2.0)),
        )
        .unwrap();
        let prior = flat_density();
        let mut rng = RngStream::new(0, 0);
        let p = predict_at_point(
            &model,
            &prior,
            &[0.4],
            0.1,
            10,
            ExpectationMode::Batch,
            &mut rng,
        )
        .unwrap();
        assert!((p.value - 1.25).abs() < 1e-6, "Y = {}", p.value);
    }

    #[test]
    fn predict_is_linear_in_density_scale() {
        let model = linear_model(1, 1.0, 0.3).unwrap();
        let prior = GaussianMixture::new(vec![vec![0.2]], vec![0.7], vec![vec![1.1]]).unwrap();
        let mut scaled = prior.clone();
        scaled.weights[0] *= 3.0;
        let x = [0.9];
        let mut r1 = RngStream::new(5, 77);
        let mut r2 = RngStream::new(5, 77);
        let p1 =
            predict_at_point(&model, &prior, &x, 0.05, 8, ExpectationMode::Batch, &mut r1).unwrap();
        let p2 = predict_at_point(
            &model,
            &scaled,
            &x,
            0.05,
            8,
            ExpectationMode::Batch,
            &mut r2,
        )
        .unwrap();
        assert_relative_eq!(p2.value, 3.0 * p1.value, max_relative = 1e-12);
    }

    #[test]
    fn predict_flags_missing_contraction() {
        let model = StateModel::new(
            "stiff",
            1,
            vec![1e-300],
            Arc::new(|x: &[f64]| Ok(vec![-20.0 * x[0]])),
            Arc::new(|_: &[f64]| Ok(-20.0)),
        )
        .unwrap();
        let prior = flat_density();
        let mut rng = RngStream::new(0, 0);
        let p = predict_at_point(
            &model,
            &prior,
            &[0.1],
            0.1,
            3,
            ExpectationMode::Batch,
            &mut rng,
        )
        .unwrap();
        assert!(p.contraction_warning);
    }

    #[test]
    fn predict_iterates_converge_geometrically() {
        // frozen expectation via FullMonteCarlo with an identical stream:
        // successive iterate gaps shrink by the factor |dt * div| = 0.2
        let model = StateModel::new(
            "lin",
            1,
            vec![1e-300],
            Arc::new(|x: &[f64]| Ok(vec![-2.0 * x[0]])),
            Arc::new(|_: &[f64]| Ok(-2.0)),
        )
        .unwrap();
        let prior = flat_density();
        let value_at = |l: usize| {
            let mut rng = RngStream::new(9, 3);
            predict_at_point(
                &model,
                &prior,
                &[0.4],
                0.1,
                l,
                ExpectationMode::FullMonteCarlo(16),
                &mut rng,
            )
            .unwrap()
            .value
        };
        let mut prev_gap: Option<f64> = None;
        for l in 1..6 {
            let gap = (value_at(l + 1) - value_at(l)).abs();
            if let Some(pg) = prev_gap {
                let ratio = gap / pg;
                assert!((ratio - 0.2).abs() < 1e-6, "ratio {ratio}");
            }
            prev_gap = Some(gap);
        }
    }

    #[test]
    fn bayes_update_uninformative_likelihood_is_identity() {
        let obs = linear_observation(1, 1e6).unwrap();
        let predicted = vec![0.5, 1.5, 1.0];
        let points = vec![vec![0.0], vec![1.0], vec![2.0]];
        let updated = bayes_update(&predicted, &obs, &[0.5], &points).unwrap();
        for (u, p) in updated.iter().zip(predicted.iter()) {
            assert_relative_eq!(u, p, max_relative = 1e-6);
        }
    }

    #[test]
    fn bayes_update_flat_prior_follows_likelihood() {
        let obs = linear_observation(1, 0.5).unwrap();
        let predicted = vec![1.0, 1.0, 1.0];
        let points = vec![vec![0.0], vec![0.5], vec![2.0]];
        let updated = bayes_update(&predicted, &obs, &[0.5], &points).unwrap();
        let lik: Vec<f64> = points
            .iter()
            .map(|p| obs.log_likelihood(&[0.5], p).exp())
            .collect();
        // proportionality
        for i in 1..3 {
            assert_relative_eq!(
                updated[i] / updated[0],
                lik[i] / lik[0],
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn bayes_update_mean_normalization_arithmetic() {
        // predicted (1,1), likelihoods (0.2,0.6) -> (0.5, 1.5)
        let obs = linear_observation(1, 1.0).unwrap();
        // choose points whose Gaussian likelihood ratio is 3 and rescale:
        // likelihood values only matter up to a common factor
        let m = [0.0];
        let z0 = (2.0 * (3.0f64).ln()).sqrt(); // exp(-z0^2/2) = 1/3
        let points = vec![vec![z0], vec![0.0]];
        let updated = bayes_update(&[1.0, 1.0], &obs, &m, &points).unwrap();
        assert_relative_eq!(updated[0], 0.5, max_relative = 1e-10);
        assert_relative_eq!(updated[1], 1.5, max_relative = 1e-10);
    }

    #[test]
    fn bayes_update_invariant_to_predicted_rescaling() {
        let obs = linear_observation(1, 0.3).unwrap();
        let predicted = vec![0.1, 0.9, 0.4];
        let points = vec![vec![-0.2], vec![0.1], vec![0.4]];
        let a = bayes_update(&predicted, &obs, &[0.0], &points).unwrap();
        let scaled: Vec<f64> = predicted.iter().map(|p| p * 7.5).collect();
        let b = bayes_update(&scaled, &obs, &[0.0], &points).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_relative_eq!(7.5 * x, y, max_relative = 1e-12);
        }
    }

    #[test]
    fn bayes_update_all_zero_is_divergence() {
        let obs = linear_observation(1, 0.1).unwrap();
        let r = bayes_update(&[0.0, 0.0], &obs, &[0.0], &[vec![0.0], vec![1.0]]);
        assert!(matches!(r, Err(Error::FilterDiverged { .. })));
    }

    #[test]
    fn filter_step_is_bit_reproducible() {
        let model = linear_model(1, 1.0, 0.3).unwrap();
        let obs = linear_observation(1, 0.2).unwrap();
        let cfg = test_cfg(31);
        let prior = GaussianMixture::gaussian_prior(&[0.5], &[0.4]).unwrap();
        let run = || {
            let state = FilteringState::init(&prior, &cfg);
            let (next, _) = filter_step(&state, &model, &obs, &[0.3], &cfg).unwrap();
            next
        };
        let a = run();
        let b = run();
        assert_eq!(a.density, b.density);
        assert_eq!(a.cloud.points, b.cloud.points);
    }

    #[test]
    fn filter_step_matches_kalman_posterior_after_one_step() {
        // 1-D linear-Gaussian: posterior mean within 0.1 of the exact Kalman
        // posterior mean, averaged over 20 seeds
        let theta = 1.0;
        let sigma = 0.3;
        let r_std = 0.2;
        let dt = 0.1;
        let model = linear_model(1, theta, sigma).unwrap();
        let obs = linear_observation(1, r_std).unwrap();
        let m0 = 0.5;
        let p0_std = 0.4;
        let observation = 0.2;
        let prior = GaussianMixture::gaussian_prior(&[m0], &[p0_std]).unwrap();

        let (k_means, _) = kalman_diagonal(
            &[m0],
            &[p0_std * p0_std],
            1.0 - theta * dt,
            sigma * sigma * dt,
            &[r_std * r_std],
            &[vec![observation]],
        );
        let kalman_mean = k_means[0][0];

        let mut dev_sum = 0.0;
        let n_seeds = 20;
        for s in 0..n_seeds {
            let mut cfg = test_cfg(1000 + s);
            cfg.dt = dt;
            let state = FilteringState::init(&prior, &cfg);
            let (next, _) = filter_step(&state, &model, &obs, &[observation], &cfg).unwrap();
            dev_sum += (next.density.mixture_mean()[0] - kalman_mean).abs();
        }
        let avg_dev = dev_sum / n_seeds as f64;
        assert!(avg_dev < 0.1, "avg |bsdef - kalman| = {avg_dev}");
    }

    #[test]
    fn sharp_likelihood_pulls_mean_to_observation() {
        // likelihood much narrower than the prior: the posterior mean should
        // land within a few observation stds of the observed value
        let model = linear_model(1, 0.1, 1e-3).unwrap();
        let obs = linear_observation(1, 1e-3).unwrap();
        let mut cfg = test_cfg(3);
        cfg.n_samples = 200;
        cfg.n_kernels = 2;
        cfg.init_bandwidth = 0.02;
        let prior = GaussianMixture::gaussian_prior(&[0.02], &[0.01]).unwrap();
        let state = FilteringState::init(&prior, &cfg);
        let observed = 0.0199; // consistent with the propagated prior
        let (next, _) = filter_step(&state, &model, &obs, &[observed], &cfg).unwrap();
        let mean = next.density.mixture_mean()[0];
        assert!((mean - observed).abs() < 5e-3, "mean {mean}");
    }

    #[test]
    fn values_stay_nonnegative_over_steps() {
        let model = linear_model(1, 1.0, 0.3).unwrap();
        let obs = linear_observation(1, 0.2).unwrap();
        let mut cfg = test_cfg(77);
        cfg.n_samples = 100;
        let prior = GaussianMixture::gaussian_prior(&[0.0], &[0.5]).unwrap();
        let mut state = FilteringState::init(&prior, &cfg);
        for n in 0..5 {
            let obs_val = 0.1 * n as f64;
            let (next, _) = filter_step(&state, &model, &obs, &[obs_val], &cfg).unwrap();
            assert!(next.cloud.values.iter().all(|v| *v >= 0.0 && v.is_finite()));
            state = next;
        }
    }

    #[test]
    fn run_filter_zero_steps_returns_prior_estimate() {
        let model = linear_model(1, 1.0, 0.3).unwrap();
        let obs = linear_observation(1, 0.2).unwrap();
        let cfg = test_cfg(0);
        let prior = GaussianMixture::gaussian_prior(&[1.5], &[0.4]).unwrap();
        let out = run_filter(&model, &obs, &prior, &[], &cfg).unwrap();
        assert_eq!(out.estimates.len(), 1);
        assert_relative_eq!(out.estimates[0][0], 1.5);
        assert!(out.failed_at.is_none());
    }

    #[test]
    fn run_filter_records_divergence_with_partial_results() {
        let model = linear_model(1, 0.5, 1e-6).unwrap();
        // absurdly tight observation far from the prior forces zero likelihoods
        let obs = linear_observation(1, 1e-12).unwrap();
        let mut cfg = test_cfg(1);
        cfg.n_samples = 50;
        let prior = GaussianMixture::gaussian_prior(&[0.0], &[0.1]).unwrap();
        let out = run_filter(&model, &obs, &prior, &[vec![1e6]], &cfg).unwrap();
        assert_eq!(out.failed_at, Some(1));
        assert_eq!(out.estimates.len(), 1);
    }
}
