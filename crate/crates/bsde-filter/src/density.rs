//! Gaussian-kernel mixture representation of the filtering density.
//!
//! The mixture is `p(x) = sum_k alpha_k exp(-sum_j (c_kj - x_j)^2 / l_kj^2)`,
//! i.e. each kernel is an unnormalized Gaussian with per-axis standard
//! deviation `l_kj / sqrt(2)`. Sampling and moment extraction use that
//! correspondence so the sampled law matches the normalized mixture exactly.

use crate::error::{Error, Result};
use crate::sde::RngStream;

/// Floors applied after every SGD update to keep parameters positive.
pub const WEIGHT_FLOOR: f64 = 1e-8;
pub const BANDWIDTH_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    /// Kernel centers, `K x d`.
    pub centers: Vec<Vec<f64>>,
    /// Kernel weights `alpha_k`, strictly positive.
    pub weights: Vec<f64>,
    /// Per-kernel per-dimension bandwidths `lambda_kj`, strictly positive.
    pub bandwidths: Vec<Vec<f64>>,
}

/// Spatial samples with approximated density values, used as training data
/// for the kernel fit.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl TrainingSet {
    pub fn new(points: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::InvalidArgument(
                "points/values length mismatch".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "training values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { points, values })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl GaussianMixture {
    pub fn new(
        centers: Vec<Vec<f64>>,
        weights: Vec<f64>,
        bandwidths: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let k = centers.len();
        if k == 0 {
            return Err(Error::InvalidArgument(
                "mixture needs at least one kernel".into(),
            ));
        }
        if weights.len() != k || bandwidths.len() != k {
            return Err(Error::InvalidArgument(
                "mixture component count mismatch".into(),
            ));
        }
        let d = centers[0].len();
        if centers.iter().any(|c| c.len() != d) || bandwidths.iter().any(|b| b.len() != d) {
            return Err(Error::InvalidArgument("mixture dimension mismatch".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) || bandwidths.iter().flatten().any(|l| !(*l > 0.0)) {
            return Err(Error::InvalidArgument(
                "mixture weights and bandwidths must be strictly positive".into(),
            ));
        }
        Ok(Self {
            centers,
            weights,
            bandwidths,
        })
    }

    /// Single Gaussian prior `N(mean, diag(std^2))` with unit peak weight.
    pub fn gaussian_prior(mean: &[f64], std: &[f64]) -> Result<Self> {
        let bw: Vec<f64> = std.iter().map(|s| s * std::f64::consts::SQRT_2).collect();
        Self::new(vec![mean.to_vec()], vec![1.0], vec![bw])
    }

    pub fn num_kernels(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    /// `phi_k(x) = exp(-sum_j (c_kj - x_j)^2 / l_kj^2)`.
    pub fn kernel_value(&self, k: usize, x: &[f64]) -> f64 {
        let mut e = 0.0;
        for j in 0..x.len() {
            let z = self.centers[k][j] - x[j];
            let l = self.bandwidths[k][j];
            e += z * z / (l * l);
        }
        (-e).exp()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (0..self.num_kernels())
            .map(|k| self.weights[k] * self.kernel_value(k, x))
            .sum()
    }

    /// Mass of kernel k up to the common factor `pi^{d/2}`.
    fn mass_weights(&self) -> Vec<f64> {
        (0..self.num_kernels())
            .map(|k| self.weights[k] * self.bandwidths[k].iter().product::<f64>())
            .collect()
    }

    /// Mean of the normalized mixture.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let w = self.mass_weights();
        let total: f64 = w.iter().sum();
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for k in 0..self.num_kernels() {
            for j in 0..d {
                mean[j] += w[k] * self.centers[k][j];
            }
        }
        for m in &mut mean {
            *m /= total;
        }
        mean
    }

    /// Per-dimension variance of the normalized mixture (law of total variance;
    /// each kernel has per-axis variance `l^2 / 2`).
    pub fn mixture_variance(&self) -> Vec<f64> {
        let w = self.mass_weights();
        let total: f64 = w.iter().sum();
        let mean = self.mixture_mean();
        let d = self.dim();
        let mut var = vec![0.0; d];
        for k in 0..self.num_kernels() {
            for j in 0..d {
                let l = self.bandwidths[k][j];
                let dc = self.centers[k][j] - mean[j];
                var[j] += w[k] * (l * l / 2.0 + dc * dc);
            }
        }
        for v in &mut var {
            *v /= total;
        }
        var
    }

    /// Draw one sample: pick a kernel by mass weight, then draw each
    /// coordinate from `N(c_kj, (l_kj/sqrt(2))^2)`.
    pub fn sample_one(&self, rng: &mut RngStream) -> Vec<f64> {
        let w = self.mass_weights();
        let total: f64 = w.iter().sum();
        let mut u = rng.uniform() * total;
        let mut k = 0;
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                k = i;
                break;
            }
            u -= wi;
            k = i;
        }
        (0..self.dim())
            .map(|j| {
                self.centers[k][j]
                    + self.bandwidths[k][j] / std::f64::consts::SQRT_2 * rng.standard_normal()
            })
            .collect()
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    /// Empirical central quantile band of one coordinate at the given level.
    pub fn marginal_band(
        &self,
        dim: usize,
        level: f64,
        n_mc: usize,
        rng: &mut RngStream,
    ) -> Result<(f64, f64)> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidArgument(
                "band level must lie in (0,1)".into(),
            ));
        }
        let mut coords: Vec<f64> = (0..n_mc).map(|_| self.sample_one(rng)[dim]).collect();
        coords.sort_by(|a, b| a.total_cmp(b));
        let q = |p: f64| -> f64 {
            let idx = (p * (n_mc - 1) as f64).round() as usize;
            coords[idx.min(n_mc - 1)]
        };
        Ok((q((1.0 - level) / 2.0), q((1.0 + level) / 2.0)))
    }

    /// Flat text record: `K d` header line, then one line per kernel holding
    /// the weight, the center row and the bandwidth row. Values round-trip
    /// binary64 exactly.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.num_kernels(), self.dim());
        for k in 0..self.num_kernels() {
            let mut row = vec![format_f64(self.weights[k])];
            row.extend(self.centers[k].iter().map(|v| format_f64(*v)));
            row.extend(self.bandwidths[k].iter().map(|v| format_f64(*v)));
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty mixture record".into()))?;
        let mut hdr = header.split_whitespace();
        let k: usize = parse_field(hdr.next(), "kernel count")?;
        let d: usize = parse_field(hdr.next(), "dimension")?;
        let mut centers = Vec::with_capacity(k);
        let mut weights = Vec::with_capacity(k);
        let mut bandwidths = Vec::with_capacity(k);
        for _ in 0..k {
            let line = lines
                .next()
                .ok_or_else(|| Error::InvalidArgument("truncated mixture record".into()))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("bad number '{t}'")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != 1 + 2 * d {
                return Err(Error::InvalidArgument("wrong mixture row length".into()));
            }
            weights.push(vals[0]);
            centers.push(vals[1..1 + d].to_vec());
            bandwidths.push(vals[1 + d..].to_vec());
        }
        Self::new(centers, weights, bandwidths)
    }
}

pub(crate) fn format_f64(v: f64) -> String {
    // `{:?}` emits the shortest representation that round-trips binary64.
    format!("{v:?}")
}

fn parse_field<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::InvalidArgument(format!("bad {what} in mixture record")))
}

/// Outcome of kernel-center selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStatus {
    Weighted,
    /// All training values were zero; fell back to uniform selection.
    UniformFallback,
}

/// Draws `k` distinct rows of `cloud.points` without replacement with
/// probability proportional to the density values.
pub fn select_centers(
    cloud: &TrainingSet,
    k: usize,
    rng: &mut RngStream,
) -> Result<(Vec<Vec<f64>>, SelectionStatus)> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= K <= N, got K={k}, N={n}"
        )));
    }
    let total: f64 = cloud.values.iter().sum();
    let status = if total > 0.0 {
        SelectionStatus::Weighted
    } else {
        SelectionStatus::UniformFallback
    };
    let mut remaining = if total > 0.0 {
        cloud.values.clone()
    } else {
        vec![1.0; n]
    };
    let mut taken = vec![false; n];
    let mut centers = Vec::with_capacity(k);
    for _ in 0..k {
        // zero-value rows can exhaust the mass before K draws; switch the
        // untaken rows to uniform weight when that happens
        if remaining.iter().sum::<f64>() <= 0.0 {
            for (w, t) in remaining.iter_mut().zip(taken.iter()) {
                if !*t {
                    *w = 1.0;
                }
            }
        }
        let mass: f64 = remaining.iter().sum();
        let mut u = rng.uniform() * mass;
        let mut chosen = None;
        for (i, w) in remaining.iter().enumerate() {
            if *w > 0.0 {
                if u < *w {
                    chosen = Some(i);
                    break;
                }
                u -= w;
            }
        }
        // fp rounding can leave u just past the last positive weight
        let chosen = chosen
            .or_else(|| remaining.iter().rposition(|w| *w > 0.0))
            .expect("at least one untaken row remains");
        centers.push(cloud.points[chosen].clone());
        remaining[chosen] = 0.0;
        taken[chosen] = true;
    }
    Ok((centers, status))
}

/// Mean-squared mismatch of the mixture against the training values.
pub fn loss(m: &GaussianMixture, t: &TrainingSet) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    let n = t.len() as f64;
    t.points
        .iter()
        .zip(t.values.iter())
        .map(|(x, v)| {
            let r = m.eval(x) - v;
            r * r
        })
        .sum::<f64>()
        / n
}

/// Gradients of the single-sample squared residual `(eval(x) - target)^2`
/// with respect to the weights (K-vector) and bandwidths (K x d).
pub fn grad_single(m: &GaussianMixture, x: &[f64], target: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k_count = m.num_kernels();
    let d = m.dim();
    let residual = m.eval(x) - target;
    let mut g_alpha = Vec::with_capacity(k_count);
    let mut g_lambda = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let phi = m.kernel_value(k, x);
        g_alpha.push(2.0 * residual * phi);
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            let z = m.centers[k][j] - x[j];
            let l = m.bandwidths[k][j];
            row.push(2.0 * residual * m.weights[k] * phi * 2.0 * z * z / (l * l * l));
        }
        g_lambda.push(row);
    }
    (g_alpha, g_lambda)
}

/// Scales of the data-driven bandwidth band applied during [`fit_sgd`],
/// expressed as multiples of the per-axis spread of the training points.
///
/// `lo` and `hi` bound the bandwidth relative to the value-weighted standard
/// deviation; `spread_floor` additionally keeps the bandwidth above that
/// fraction of the *unweighted* cloud spread, which protects against
/// overconfident collapse when the values degenerate onto a handful of
/// points. The right scales depend on the problem: high-dimensional states
/// with flat likelihoods need a tight band to stay competitive, while sharp
/// low-dimensional likelihoods need room for the posterior to be much
/// narrower than the cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandScales {
    /// Lower bound as a multiple of the value-weighted std. dev.
    pub lo: f64,
    /// Upper bound as a multiple of the value-weighted std. dev.
    pub hi: f64,
    /// Lower bound as a fraction of the unweighted cloud spread.
    pub spread_floor: f64,
}

impl Default for BandScales {
    fn default() -> Self {
        Self {
            lo: 0.25,
            hi: 4.0,
            spread_floor: 0.0,
        }
    }
}

impl BandScales {
    pub fn validate(&self) -> crate::error::Result<()> {
        if !(self.lo > 0.0) || !(self.hi >= self.lo) || !(self.spread_floor >= 0.0) {
            return Err(crate::error::Error::Config(
                "bandwidth band needs 0 < lo <= hi and spread_floor >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-axis bandwidth band for [`fit_sgd`], anchored to the value-weighted
/// standard deviation of the training points and scaled by `scales`.
/// `None` when the values carry no mass or there are fewer than two points;
/// an axis with zero spread is left unconstrained.
fn bandwidth_band(t: &TrainingSet, scales: BandScales) -> Option<Vec<(f64, f64)>> {
    let total: f64 = t.values.iter().sum();
    if t.len() < 2 || !(total > 0.0) {
        return None;
    }
    let d = t.points[0].len();
    let n = t.len() as f64;
    let mut w_mean = vec![0.0; d];
    let mut u_mean = vec![0.0; d];
    for (p, v) in t.points.iter().zip(&t.values) {
        for j in 0..d {
            w_mean[j] += v * p[j];
            u_mean[j] += p[j] / n;
        }
    }
    for mj in &mut w_mean {
        *mj /= total;
    }
    let mut w_var = vec![0.0; d];
    let mut u_var = vec![0.0; d];
    for (p, v) in t.points.iter().zip(&t.values) {
        for j in 0..d {
            w_var[j] += v * (p[j] - w_mean[j]).powi(2);
            u_var[j] += (p[j] - u_mean[j]).powi(2) / n;
        }
    }
    Some(
        (0..d)
            .map(|j| {
                let sw = (w_var[j] / total).sqrt();
                let su = u_var[j].sqrt();
                if !(sw > 0.0) && !(su > 0.0) {
                    return (0.0, f64::INFINITY);
                }
                // The floor stays below the pooled spread so that a mixture
                // of well-separated kernels (each narrower than the pooled
                // spread) remains representable. When the values degenerate
                // onto a handful of rows the weighted spread collapses far
                // below what one observation can justify, so the floor is
                // also held at a fraction of the unweighted cloud spread.
                let floor = (scales.lo * sw).max(scales.spread_floor * su);
                (floor, (scales.hi * sw).max(1.5 * floor))
            })
            .collect(),
    )
}

/// Stochastic gradient descent over the training set: at each of `j_iters`
/// iterations one row is drawn with probability proportional to its density
/// value (uniform when all values are zero) and the weights and bandwidths
/// are updated from the single-sample gradient. Positivity is enforced by
/// clipping to fixed floors.
///
/// Updates are kept inside relative trust regions: a weight moves by at most
/// a factor of 2 per iteration, a bandwidth by at most a factor of 1.005.
/// The bandwidth gradient carries a 1/lambda^3 factor, so an unrestricted
/// step can throw a kernel to the floor or double its width long before the
/// weights have caught up with the target scale. The bandwidth bound is
/// symmetric in log space (x1.005 up, /1.005 down): bandwidth gradients are
/// noisy and frequently saturate the bound in alternating directions, and
/// any log-asymmetry would turn that noise into a systematic geometric
/// drift that compounds across warm-started fits.
///
/// Bandwidths are additionally confined to a band around the data scale
/// (see [`BandScales`]), anchored to the value-weighted per-axis standard
/// deviation of the training points. Outside that band the bandwidth is
/// unidentifiable — a kernel much wider than the data evaluates every drawn
/// row at phi near 1, and a kernel much narrower evaluates every row off its
/// center at phi near 0 — so in either regime the gradient no longer informs
/// the parameter and drift compounds across warm-started fits. An over-wide
/// kernel is also actively harmful: it captures resampling mass proportional
/// to the product of its bandwidths and starves the region the data actually
/// occupies.
pub fn fit_sgd(
    m0: &GaussianMixture,
    t: &TrainingSet,
    lr_alpha: f64,
    lr_lambda: f64,
    j_iters: usize,
    band_scales: BandScales,
    rng: &mut RngStream,
) -> Result<GaussianMixture> {
    if j_iters > 0 && (!(lr_alpha > 0.0) || !(lr_lambda > 0.0)) {
        return Err(Error::InvalidArgument(
            "learning rates must be positive".into(),
        ));
    }
    let mut m = m0.clone();
    if j_iters == 0 || t.is_empty() {
        return Ok(m);
    }
    let total: f64 = t.values.iter().sum();
    let cumulative: Vec<f64> = if total > 0.0 {
        t.values
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect()
    } else {
        (1..=t.len()).map(|i| i as f64).collect()
    };
    let mass = *cumulative.last().unwrap();
    let band = bandwidth_band(t, band_scales);
    for _ in 0..j_iters {
        let u = rng.uniform() * mass;
        let idx = cumulative.partition_point(|c| *c <= u).min(t.len() - 1);
        let (g_alpha, g_lambda) = grad_single(&m, &t.points[idx], t.values[idx]);
        for k in 0..m.num_kernels() {
            if !g_alpha[k].is_finite() || g_lambda[k].iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    context: "kernel fit gradient".into(),
                });
            }
            let w = m.weights[k];
            m.weights[k] = (w - lr_alpha * g_alpha[k])
                .clamp(0.5 * w, 2.0 * w)
                .max(WEIGHT_FLOOR);
            for j in 0..m.dim() {
                let l = m.bandwidths[k][j];
                let mut next = (l - lr_lambda * g_lambda[k][j]).clamp(l / 1.005, 1.005 * l);
                if let Some(band) = band.as_ref() {
                    next = next.clamp(band[j].0, band[j].1);
                }
                m.bandwidths[k][j] = next.max(BANDWIDTH_FLOOR);
            }
        }
    }
    Ok(m)
}
