//! Experiment harness: truth/observation generation, repeated filter runs,
//! RMSE accounting and CSV output.
//!
//! Seed derivation is injective over (experiment, repeat, filter, step,
//! sample): each repeat gets its own seed, each filter within a repeat gets
//! its own child seed, and each filter consumes noise only through streams
//! keyed by step and sample index. Enabling or disabling one filter therefore
//! never changes another filter's draws.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::baselines::{run_apf, run_enkf};
use crate::bsdef::run_filter;
use crate::config::ExperimentConfig;
use crate::density::{format_f64, GaussianMixture};
use crate::error::{Error, Result};
use crate::kalman::kalman_diagonal;
use crate::models::{ObservationModel, StateModel};
use crate::sde::{derive_seed, euler_forward, stream_id, Purpose, RngStream};

/// Seed-derivation labels for the per-repeat filter seeds.
const LABEL_BSDEF: u64 = 101;
const LABEL_APF: u64 = 102;
const LABEL_ENKF: u64 = 103;

pub const FILTER_NAMES: [&str; 3] = ["bsdef", "apf", "enkf"];

/// Lennard-Jones trajectories are re-drawn when they come this close to the
/// origin, where the potential is singular.
const LJ_MIN_RADIUS: f64 = 0.1;
const LJ_MAX_REDRAWS: usize = 100;

/// Which of the configured filters to actually run.
#[derive(Debug, Clone)]
pub struct FilterSelection {
    pub names: Vec<String>,
}

impl FilterSelection {
    /// All filters configured in `cfg`.
    pub fn all(cfg: &ExperimentConfig) -> Self {
        let mut names = Vec::new();
        if cfg.filters.bsdef.is_some() {
            names.push("bsdef".into());
        }
        if cfg.filters.apf.is_some() {
            names.push("apf".into());
        }
        if cfg.filters.enkf.is_some() {
            names.push("enkf".into());
        }
        Self { names }
    }

    /// Restricts to a comma-separated subset; every requested filter must be
    /// configured.
    pub fn subset(cfg: &ExperimentConfig, spec: &str) -> Result<Self> {
        let all = Self::all(cfg);
        let mut names = Vec::new();
        for raw in spec.split(',') {
            let name = raw.trim();
            if !FILTER_NAMES.contains(&name) {
                return Err(Error::InvalidArgument(format!("unknown filter '{name}'")));
            }
            if !all.names.iter().any(|n| n == name) {
                return Err(Error::Config(format!(
                    "filter '{name}' requested but not configured"
                )));
            }
            if !names.iter().any(|n: &String| n == name) {
                names.push(name.to_string());
            }
        }
        if names.is_empty() {
            return Err(Error::InvalidArgument("empty filter selection".into()));
        }
        Ok(Self { names })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }
}

/// One simulated truth trajectory with its observations.
#[derive(Debug, Clone)]
pub struct TruthData {
    /// Truth states; entry 0 is the initial condition, then one per step.
    pub states: Vec<Vec<f64>>,
    /// One observation per step (none for the initial condition).
    pub observations: Vec<Vec<f64>>,
    /// The filters' initial guess (perturbed initial condition).
    pub guess: Vec<f64>,
}

/// Simulates the truth with `substeps` Euler sub-steps per observation gap
/// and generates noisy observations at the observation times.
pub fn generate_truth_and_obs(
    cfg: &ExperimentConfig,
    model: &StateModel,
    obs_model: &ObservationModel,
    rep_seed: u64,
) -> Result<TruthData> {
    let d = model.dim;
    let n_steps = cfg.n_steps();
    let sub_dt = cfg.time.dt / cfg.time.substeps as f64;
    let is_lj = model.name == "lennard-jones";

    let mut truth_rng = RngStream::new(rep_seed, stream_id(Purpose::Truth, 0, 0));
    let mut guess_rng = RngStream::new(rep_seed, stream_id(Purpose::Truth, 0, 1));
    let mut obs_rng = RngStream::new(rep_seed, stream_id(Purpose::Observation, 0, 0));

    let mean = cfg.init.truth_mean.expand(d)?;
    let mut x: Vec<f64> = mean
        .iter()
        .map(|m| m + cfg.init.truth_std * truth_rng.standard_normal())
        .collect();
    let guess: Vec<f64> = x
        .iter()
        .map(|xi| xi + cfg.init.guess_std * guess_rng.standard_normal())
        .collect();

    let mut states = vec![x.clone()];
    let mut observations = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        for _ in 0..cfg.time.substeps {
            x = if is_lj {
                // keep the truth away from the potential's singularity by
                // re-drawing the sub-step noise
                let mut next = None;
                for _ in 0..LJ_MAX_REDRAWS {
                    let cand = euler_forward(model, &x, sub_dt, &mut truth_rng)?;
                    let r = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if r >= LJ_MIN_RADIUS {
                        next = Some(cand);
                        break;
                    }
                }
                next.ok_or_else(|| Error::Domain {
                    model: model.name.clone(),
                    reason: "truth trajectory trapped at the origin".into(),
                })?
            } else {
                euler_forward(model, &x, sub_dt, &mut truth_rng)?
            };
        }
        let mut z = obs_model.observe(&x);
        for (zj, std) in z.iter_mut().zip(obs_model.obs_std.iter()) {
            *zj += std * obs_rng.standard_normal();
        }
        states.push(x.clone());
        observations.push(z);
    }
    Ok(TruthData {
        states,
        observations,
        guess,
    })
}

/// Output of one filter on one repeat.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub filter: String,
    /// One estimate per step; entry 0 is the prior mean.
    pub estimates: Vec<Vec<f64>>,
    pub failed_at: Option<usize>,
    pub seconds: f64,
    /// Fitted densities per step, kept only when checkpointing is enabled.
    pub densities: Option<Vec<GaussianMixture>>,
}

#[derive(Debug, Clone)]
pub struct RepeatRecord {
    pub repeat: usize,
    pub truth: TruthData,
    pub runs: Vec<FilterRun>,
}

fn prior_for(cfg: &ExperimentConfig, guess: &[f64]) -> Result<GaussianMixture> {
    let spread = cfg.init.prior_std.unwrap_or(cfg.init.guess_std).max(1e-6);
    GaussianMixture::gaussian_prior(guess, &vec![spread; guess.len()])
}

/// Runs every selected filter on one simulated repeat.
pub fn run_repeat(
    cfg: &ExperimentConfig,
    model: &StateModel,
    obs_model: &ObservationModel,
    selection: &FilterSelection,
    repeat: usize,
) -> Result<RepeatRecord> {
    let rep_seed = derive_seed(cfg.experiment.seed, repeat as u64 + 1);
    let truth = generate_truth_and_obs(cfg, model, obs_model, rep_seed)?;
    let prior = prior_for(cfg, &truth.guess)?;
    let obs = &truth.observations;

    let mut runs = Vec::new();
    if let Some(section) = cfg
        .filters
        .bsdef
        .as_ref()
        .filter(|_| selection.contains("bsdef"))
    {
        let bcfg = cfg.bsdef_config(section, derive_seed(rep_seed, LABEL_BSDEF))?;
        let start = Instant::now();
        let out = run_filter(model, obs_model, &prior, obs, &bcfg)?;
        runs.push(FilterRun {
            filter: "bsdef".into(),
            estimates: out.estimates,
            failed_at: out.failed_at,
            seconds: start.elapsed().as_secs_f64(),
            densities: cfg.experiment.checkpoints.then_some(out.densities),
        });
    }
    if let Some(section) = cfg
        .filters
        .apf
        .as_ref()
        .filter(|_| selection.contains("apf"))
    {
        let start = Instant::now();
        let (estimates, failed_at) = run_apf(
            model,
            obs_model,
            &prior,
            obs,
            section.particles,
            section.n_aux,
            cfg.time.dt,
            derive_seed(rep_seed, LABEL_APF),
        )?;
        runs.push(FilterRun {
            filter: "apf".into(),
            estimates,
            failed_at,
            seconds: start.elapsed().as_secs_f64(),
            densities: None,
        });
    }
    if let Some(section) = cfg
        .filters
        .enkf
        .as_ref()
        .filter(|_| selection.contains("enkf"))
    {
        let start = Instant::now();
        let (estimates, failed_at) = run_enkf(
            model,
            obs_model,
            &prior,
            obs,
            section.ensemble,
            cfg.time.dt,
            derive_seed(rep_seed, LABEL_ENKF),
        )?;
        runs.push(FilterRun {
            filter: "enkf".into(),
            estimates,
            failed_at,
            seconds: start.elapsed().as_secs_f64(),
            densities: None,
        });
    }
    Ok(RepeatRecord {
        repeat,
        truth,
        runs,
    })
}

/// Per-filter aggregate over the repeats.
#[derive(Debug, Clone)]
pub struct FilterSummary {
    pub filter: String,
    /// RMSE per step over successful repeats and dimensions; entry 0 is the
    /// prior error.
    pub rmse_trace: Vec<f64>,
    /// Sum of the RMSE trace over all steps.
    pub accumulated_rmse: f64,
    pub failed_repeats: usize,
    pub total_repeats: usize,
    pub mean_seconds: f64,
}

/// RMSE per step for one filter, pooled over successful repeats and all
/// dimensions. Failed repeats are excluded entirely.
pub fn rmse_trace(records: &[RepeatRecord], filter: &str) -> (Vec<f64>, usize) {
    let n_steps = records
        .iter()
        .map(|r| r.truth.states.len())
        .max()
        .unwrap_or(0);
    let mut sq_sum = vec![0.0; n_steps];
    let mut counts = vec![0usize; n_steps];
    let mut failed = 0;
    for rec in records {
        for run in rec.runs.iter().filter(|run| run.filter == filter) {
            if run.failed_at.is_some() {
                failed += 1;
                continue;
            }
            for (n, (est, truth)) in run
                .estimates
                .iter()
                .zip(rec.truth.states.iter())
                .enumerate()
            {
                for (e, t) in est.iter().zip(truth.iter()) {
                    sq_sum[n] += (e - t) * (e - t);
                    counts[n] += 1;
                }
            }
        }
    }
    let trace = sq_sum
        .iter()
        .zip(counts.iter())
        .map(|(s, &c)| {
            if c > 0 {
                (s / c as f64).sqrt()
            } else {
                f64::NAN
            }
        })
        .collect();
    (trace, failed)
}

/// Sum of a finite RMSE trace.
pub fn accumulated_rmse(trace: &[f64]) -> f64 {
    if trace.iter().all(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    trace.iter().filter(|v| v.is_finite()).sum()
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<RepeatRecord>,
    pub summaries: Vec<FilterSummary>,
}

impl ExperimentResult {
    /// True when any filter failed on more than 20% of its repeats.
    pub fn excess_failures(&self) -> bool {
        self.summaries
            .iter()
            .any(|s| 5 * s.failed_repeats > s.total_repeats)
    }
}

/// Runs all repeats of the experiment with the selected filters.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    selection: &FilterSelection,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    if selection.names.is_empty() {
        return Err(Error::InvalidArgument("no filters selected".into()));
    }
    let (model, obs_model) = cfg.build_models()?;
    let mut records = Vec::with_capacity(cfg.experiment.repeats);
    for rep in 0..cfg.experiment.repeats {
        records.push(run_repeat(cfg, &model, &obs_model, selection, rep)?);
    }
    let mut summaries = Vec::new();
    for name in &selection.names {
        let (trace, failed) = rmse_trace(&records, name);
        let times: Vec<f64> = records
            .iter()
            .flat_map(|r| r.runs.iter())
            .filter(|run| &run.filter == name)
            .map(|run| run.seconds)
            .collect();
        let mean_seconds = if times.is_empty() {
            0.0
        } else {
            times.iter().sum::<f64>() / times.len() as f64
        };
        summaries.push(FilterSummary {
            filter: name.clone(),
            accumulated_rmse: accumulated_rmse(&trace),
            rmse_trace: trace,
            failed_repeats: failed,
            total_repeats: cfg.experiment.repeats,
            mean_seconds,
        });
    }
    Ok(ExperimentResult { records, summaries })
}

fn join_fields(fields: &[String]) -> String {
    fields.join(",")
}

fn write_file(path: &Path, content: &str) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content)?;
    Ok(path.to_path_buf())
}

/// Writes all experiment outputs into `out_dir` and returns the file paths.
///
/// All data files are byte-deterministic for a fixed config and seed; wall
/// clock timings go into a separate `timings.csv` so they never perturb the
/// data files.
pub fn write_outputs(
    cfg: &ExperimentConfig,
    result: &ExperimentResult,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let name = &cfg.experiment.name;
    let d = result.records[0].truth.states[0].len();
    let dt = cfg.time.dt;
    let mut written = Vec::new();

    for summary in &result.summaries {
        let filter = &summary.filter;

        // estimates: repeat, step, time, truth, estimate
        let mut est = String::from("repeat,step,time");
        for j in 1..=d {
            let _ = write!(est, ",truth_{j}");
        }
        for j in 1..=d {
            let _ = write!(est, ",estimate_{j}");
        }
        est.push('\n');
        for rec in &result.records {
            for run in rec.runs.iter().filter(|r| &r.filter == filter) {
                for (n, e) in run.estimates.iter().enumerate() {
                    let mut fields = vec![
                        rec.repeat.to_string(),
                        n.to_string(),
                        format_f64(n as f64 * dt),
                    ];
                    fields.extend(rec.truth.states[n].iter().map(|v| format_f64(*v)));
                    fields.extend(e.iter().map(|v| format_f64(*v)));
                    est.push_str(&join_fields(&fields));
                    est.push('\n');
                }
            }
        }
        written.push(write_file(
            &out_dir.join(format!("{name}.{filter}.estimates.csv")),
            &est,
        )?);

        // rmse trace
        let mut rmse = String::from("step,time,rmse\n");
        for (n, v) in summary.rmse_trace.iter().enumerate() {
            let _ = writeln!(rmse, "{n},{},{}", format_f64(n as f64 * dt), format_f64(*v));
        }
        written.push(write_file(
            &out_dir.join(format!("{name}.{filter}.rmse.csv")),
            &rmse,
        )?);
    }

    // summary: one row per filter, no timing data
    let mut sum = String::from("filter,accumulated_rmse,failed_repeats,total_repeats\n");
    for s in &result.summaries {
        let _ = writeln!(
            sum,
            "{},{},{},{}",
            s.filter,
            format_f64(s.accumulated_rmse),
            s.failed_repeats,
            s.total_repeats
        );
    }
    written.push(write_file(
        &out_dir.join(format!("{name}.summary.csv")),
        &sum,
    )?);

    // timings live in their own non-CSV file: wall clock is the one output
    // that is not reproducible, and all CSV files stay byte-deterministic
    let mut tim = String::from("filter mean_wall_clock_s\n");
    for s in &result.summaries {
        let _ = writeln!(tim, "{} {}", s.filter, format_f64(s.mean_seconds));
    }
    written.push(write_file(
        &out_dir.join(format!("{name}.timings.txt")),
        &tim,
    )?);

    // per-step density checkpoints
    if cfg.experiment.checkpoints {
        for rec in &result.records {
            for run in &rec.runs {
                let Some(densities) = &run.densities else {
                    continue;
                };
                for (n, density) in densities.iter().enumerate() {
                    let path = out_dir.join(format!(
                        "{name}.{}.rep{}.step{n}.mixture.txt",
                        run.filter, rec.repeat
                    ));
                    written.push(write_file(&path, &density.to_text())?);
                }
            }
        }
    }
    Ok(written)
}

/// Runs the exact Kalman filter as an oracle on a linear-Gaussian config and
/// writes `<name>.kalman.estimates.csv` and `<name>.kalman.rmse.csv`.
///
/// Only valid for the "ou" model with linear observations; the transition is
/// the Euler-discretized one, `a = 1 - theta dt`, `q = sigma^2 dt`, which is
/// exactly the dynamics the Monte Carlo filters simulate.
pub fn run_kalman_oracle(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if cfg.model.name != "ou" || cfg.observation.kind != "linear" {
        return Err(Error::Config(
            "the Kalman oracle needs model \"ou\" with \"linear\" observations".into(),
        ));
    }
    let (model, obs_model) = cfg.build_models()?;
    let theta = cfg.model.theta.expect("validated");
    let dt = cfg.time.dt;
    let a = 1.0 - theta * dt;
    let q = cfg.model.sigma * cfg.model.sigma * dt;
    let r: Vec<f64> = obs_model.obs_std.iter().map(|s| s * s).collect();
    let d = model.dim;
    let prior_var = {
        let s = cfg.init.prior_std.unwrap_or(cfg.init.guess_std).max(1e-6);
        s * s
    };

    let name = &cfg.experiment.name;
    let mut est = String::from("repeat,step,time");
    for j in 1..=d {
        let _ = write!(est, ",truth_{j}");
    }
    for j in 1..=d {
        let _ = write!(est, ",estimate_{j}");
    }
    for j in 1..=d {
        let _ = write!(est, ",variance_{j}");
    }
    est.push('\n');

    let mut records = Vec::new();
    for rep in 0..cfg.experiment.repeats {
        let rep_seed = derive_seed(cfg.experiment.seed, rep as u64 + 1);
        let truth = generate_truth_and_obs(cfg, &model, &obs_model, rep_seed)?;
        let (means, vars) = kalman_diagonal(
            &truth.guess,
            &vec![prior_var; d],
            a,
            q,
            &r,
            &truth.observations,
        );
        // step 0: prior
        let mut estimates = vec![truth.guess.clone()];
        estimates.extend(means.iter().cloned());
        for (n, e) in estimates.iter().enumerate() {
            let mut fields = vec![rep.to_string(), n.to_string(), format_f64(n as f64 * dt)];
            fields.extend(truth.states[n].iter().map(|v| format_f64(*v)));
            fields.extend(e.iter().map(|v| format_f64(*v)));
            if n == 0 {
                fields.extend((0..d).map(|_| format_f64(prior_var)));
            } else {
                fields.extend(vars[n - 1].iter().map(|v| format_f64(*v)));
            }
            est.push_str(&join_fields(&fields));
            est.push('\n');
        }
        records.push(RepeatRecord {
            repeat: rep,
            truth,
            runs: vec![FilterRun {
                filter: "kalman".into(),
                estimates,
                failed_at: None,
                seconds: 0.0,
                densities: None,
            }],
        });
    }
    let (trace, _) = rmse_trace(&records, "kalman");
    let mut rmse = String::from("step,time,rmse\n");
    for (n, v) in trace.iter().enumerate() {
        let _ = writeln!(rmse, "{n},{},{}", format_f64(n as f64 * dt), format_f64(*v));
    }
    Ok(vec![
        write_file(&out_dir.join(format!("{name}.kalman.estimates.csv")), &est)?,
        write_file(&out_dir.join(format!("{name}.kalman.rmse.csv")), &rmse)?,
    ])
}
