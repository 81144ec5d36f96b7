//! Ergodic and Monte Carlo estimators of the dimension of harmonic measure,
//! the resistance growth rate and the heat-kernel exponents, plus log-log
//! regression.
//!
//! Replicates run in parallel; replicate `i` uses tree seed
//! `derive_seed(seed, 2i)` and ray stream `derive_seed(seed, 2i + 1)`, and
//! results are reduced in index order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::boundary::{sample_ray_in, RayProfile};
use crate::electric::{escape_probability, Network, ResistancePolicy};
use crate::error::{Error, Result};
use crate::heat::{moments, p_diag, p_offdiag, Metric};
use crate::tree::{derive_seed, Branching};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentEstimate {
    pub value: f64,
    pub stderr: f64,
    pub replicates: usize,
    pub per_replicate: Vec<f64>,
    pub window: Option<(f64, f64)>,
    pub r2: Option<f64>,
}

impl ExponentEstimate {
    /// Mean and standard error of the mean.
    pub fn from_replicates(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::InvalidArgument("no replicates".into()));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        if !mean.is_finite() {
            return Err(Error::Numerical(format!("non-finite estimate {mean}")));
        }
        Ok(Self {
            value: mean,
            stderr,
            replicates: n,
            per_replicate: values,
            window: None,
            r2: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentTargets {
    pub beta: f64,
    pub log_lambda: f64,
    pub kappa: f64,
    pub walk_exponent: f64,
}

impl ExponentTargets {
    pub fn new(beta: f64, lambda: f64) -> Result<Self> {
        let log_lambda = lambda.ln();
        let gap = beta - log_lambda;
        if !(gap > 0.0) || !(beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need beta > max(0, log lambda), got beta={beta}, log lambda={log_lambda}"
            )));
        }
        Ok(Self {
            beta,
            log_lambda,
            kappa: beta / gap,
            walk_exponent: gap.max(1.0),
        })
    }

    /// `beta - log lambda`.
    pub fn gap(&self) -> f64 {
        self.beta - self.log_lambda
    }

    /// Displacement exponent in the metric `d`.
    pub fn displacement(&self, gamma: f64) -> f64 {
        (gamma / self.gap()).min(1.0)
    }

    /// Displacement exponent in the intrinsic metric.
    pub fn displacement_intrinsic(gamma: f64) -> f64 {
        gamma.min(1.0)
    }
}

fn replicate_seeds(seed: u64, i: usize) -> (u64, u64) {
    let i = i as u64;
    (derive_seed(seed, 2 * i), derive_seed(seed, 2 * i + 1))
}

/// Harmonic rays of `levels` levels, one per independent tree.
pub fn sample_rays(
    br: &Branching,
    lambda: f64,
    levels: usize,
    replicates: usize,
    policy: ResistancePolicy,
    seed: u64,
) -> Result<Vec<RayProfile>> {
    (0..replicates)
        .into_par_iter()
        .map(|i| {
            let (tree_seed, ray_seed) = replicate_seeds(seed, i);
            let mut net = Network::new(br.with_seed(tree_seed), lambda, policy)?;
            let mut rng = ChaCha8Rng::seed_from_u64(ray_seed);
            sample_ray_in(&mut net, levels, &mut rng)
        })
        .collect()
}

/// `-log H_n / n` averaged over rays.
pub fn beta_from_rays(rays: &[RayProfile]) -> Result<ExponentEstimate> {
    ExponentEstimate::from_replicates(
        rays.iter()
            .map(|p| -p.log_h[p.levels()] / p.levels() as f64)
            .collect(),
    )
}

pub fn estimate_beta_ray(
    br: &Branching,
    lambda: f64,
    levels: usize,
    replicates: usize,
    policy: ResistancePolicy,
    seed: u64,
) -> Result<ExponentEstimate> {
    beta_from_rays(&sample_rays(br, lambda, levels, replicates, policy, seed)?)
}

/// Least-squares slope of `ys` against `xs`, with intercept and R².
fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Slope of `log R_n` on `n` over `[levels/2, levels]`, averaged over rays.
pub fn resistance_exponent_from_rays(rays: &[RayProfile]) -> Result<ExponentEstimate> {
    let mut slopes = Vec::with_capacity(rays.len());
    let mut r2s = Vec::with_capacity(rays.len());
    let mut window = (0.0, 0.0);
    for p in rays {
        let l = p.levels();
        if l < 4 {
            return Err(Error::ProfileTooShort {
                needed: 4,
                available: l,
            });
        }
        let lo = l / 2;
        let xs: Vec<f64> = (lo..=l).map(|n| n as f64).collect();
        let (slope, _, r2) = linear_fit(&xs, &p.log_r[lo..=l]);
        slopes.push(slope);
        r2s.push(r2);
        window = (lo as f64, l as f64);
    }
    let mut est = ExponentEstimate::from_replicates(slopes)?;
    est.window = Some(window);
    est.r2 = Some(r2s.iter().sum::<f64>() / r2s.len() as f64);
    Ok(est)
}

pub fn estimate_resistance_exponent(
    br: &Branching,
    lambda: f64,
    levels: usize,
    replicates: usize,
    policy: ResistancePolicy,
    seed: u64,
) -> Result<ExponentEstimate> {
    resistance_exponent_from_rays(&sample_rays(br, lambda, levels, replicates, policy, seed)?)
}

/// Escape probabilities `alpha(T')` of `n` independent trees.
pub fn alpha_pool(
    br: &Branching,
    lambda: f64,
    n: usize,
    policy: ResistancePolicy,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut net = Network::new(br.with_seed(derive_seed(seed, i as u64)), lambda, policy)?;
            let root = net.root();
            Ok(escape_probability(net.resistance(root).mid(), lambda))
        })
        .collect()
}

/// Stationary weight of a tree with root conductance `ec`, averaged over the
/// escape probabilities in `alphas`.
pub fn estimate_theta(lambda: f64, ec: f64, alphas: &[f64]) -> Result<f64> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("empty escape-probability pool".into()));
    }
    let mut sum = 0.0;
    for &a in alphas {
        let den = lambda - 1.0 + a + ec;
        if !(den > 0.0) {
            return Err(Error::Numerical(format!(
                "nonpositive stationary-weight denominator {den} (alpha={a}, EC={ec})"
            )));
        }
        sum += a * ec / den;
    }
    Ok(sum / alphas.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryEstimate {
    pub estimate: ExponentEstimate,
    /// Mean stationary weight `h`.
    pub normalizer: f64,
    pub weights: Vec<f64>,
}

/// Weighted average of the first-step flow entropy
/// `-sum_i f_i log f_i` over `n_outer` trees, weights `theta(T) / h`. The
/// `n_inner` escape probabilities form one pool shared by every outer tree.
pub fn beta_stationary(
    br: &Branching,
    lambda: f64,
    n_outer: usize,
    n_inner: usize,
    policy: ResistancePolicy,
    seed: u64,
) -> Result<StationaryEstimate> {
    if n_outer < 2 {
        return Err(Error::InvalidArgument("need at least two outer trees".into()));
    }
    let alphas = alpha_pool(br, lambda, n_inner, policy, derive_seed(seed, u64::MAX))?;
    let per_tree: Vec<(f64, f64)> = (0..n_outer)
        .into_par_iter()
        .map(|i| {
            let mut net = Network::new(br.with_seed(derive_seed(seed, i as u64)), lambda, policy)?;
            let root = net.root();
            let ec = 1.0 / net.resistance(root).mid();
            let w = net.child_weights(root);
            let entropy: f64 = w
                .fractions
                .iter()
                .zip(&w.log_fractions)
                .map(|(f, lf)| -f * lf)
                .sum();
            Ok((estimate_theta(lambda, ec, &alphas)?, entropy))
        })
        .collect::<Result<_>>()?;
    let n = per_tree.len() as f64;
    let h = per_tree.iter().map(|p| p.0).sum::<f64>() / n;
    let beta = per_tree.iter().map(|(w, e)| w * e).sum::<f64>() / (n * h);
    // ratio-estimator standard error
    let var = per_tree
        .iter()
        .map(|(w, e)| (w * (e - beta) / h).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    let weights: Vec<f64> = per_tree.iter().map(|p| p.0).collect();
    Ok(StationaryEstimate {
        estimate: ExponentEstimate {
            value: beta,
            stderr: (var / n).sqrt(),
            replicates: n_outer,
            per_replicate: per_tree.iter().map(|p| p.1).collect(),
            window: None,
            r2: None,
        },
        normalizer: h,
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
    pub window: (f64, f64),
}

/// Least-squares fit of `log y` on `log t` over points with `t` inside `window`.
pub fn fit_loglog(points: &[(f64, f64)], window: Option<(f64, f64)>) -> Result<ExponentFit> {
    let (lo, hi) = window.unwrap_or((0.0, f64::INFINITY));
    let inside: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|&(t, _)| t >= lo && t <= hi)
        .collect();
    if inside.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 points in the fit window, got {}",
            inside.len()
        )));
    }
    if let Some(&(t, y)) = inside.iter().find(|&&(t, y)| !(t > 0.0) || !(y > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "nonpositive value in fit window at t={t}: {y}"
        )));
    }
    let xs: Vec<f64> = inside.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = inside.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept, r2) = linear_fit(&xs, &ys);
    Ok(ExponentFit {
        slope,
        intercept,
        r2,
        points: inside.len(),
        window: (inside[0].0, inside[inside.len() - 1].0),
    })
}

/// `points` log-spaced values from `tmin` to `tmax`.
pub fn log_grid(tmin: f64, tmax: f64, points: usize) -> Result<Vec<f64>> {
    if !(tmin > 0.0 && tmax > tmin) || points < 2 {
        return Err(Error::InvalidArgument(format!(
            "bad grid: tmin={tmin}, tmax={tmax}, points={points}"
        )));
    }
    let (a, b) = (tmin.ln(), tmax.ln());
    Ok((0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect())
}

/// Evaluates `f` on the grid, dropping points the profile cannot resolve.
fn resolved_points(
    grid: &[f64],
    mut f: impl FnMut(f64) -> Result<f64>,
) -> Result<(Vec<(f64, f64)>, Vec<f64>)> {
    let mut points = Vec::with_capacity(grid.len());
    let mut trimmed = Vec::new();
    for &t in grid {
        match f(t) {
            Ok(v) => points.push((t, v)),
            Err(e) if e.is_resolution() => trimmed.push(t),
            Err(e) => return Err(e),
        }
    }
    Ok((points, trimmed))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveFit {
    pub fit: ExponentFit,
    pub target: f64,
    pub points: Vec<(f64, f64)>,
    /// Grid times dropped as under-resolved.
    pub trimmed: Vec<f64>,
}

impl CurveFit {
    pub fn relative_error(&self) -> f64 {
        ((self.fit.slope - self.target) / self.target).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatScan {
    pub diagonal: CurveFit,
    pub off_diagonal: CurveFit,
    pub meet: usize,
}

pub const DIAG_TOL: f64 = 1e-12;

/// Log-log slopes of `p_t(omega, omega)` (target `-kappa`) and of
/// `p_t(omega, eta)` at meet level `meet` (target 1).
pub fn heat_exponent_scan(
    profile: &RayProfile,
    grid: &[f64],
    meet: usize,
    targets: &ExponentTargets,
) -> Result<HeatScan> {
    let (diag, diag_trim) = resolved_points(grid, |t| Ok(p_diag(profile, t, DIAG_TOL)?.value))?;
    let (off, off_trim) = resolved_points(grid, |t| Ok(p_offdiag(profile, meet, t)?.value))?;
    Ok(HeatScan {
        diagonal: CurveFit {
            fit: fit_loglog(&diag, None)?,
            target: -targets.kappa,
            points: diag,
            trimmed: diag_trim,
        },
        off_diagonal: CurveFit {
            fit: fit_loglog(&off, None)?,
            target: 1.0,
            points: off,
            trimmed: off_trim,
        },
        meet,
    })
}

/// Relative width of the residual bracket tolerated on each moment.
pub const MOMENT_TOL: f64 = 1e-3;

/// One displacement fit per `gamma`.
pub fn displacement_scan(
    profile: &RayProfile,
    gammas: &[f64],
    grid: &[f64],
    metric: Metric,
    targets: &ExponentTargets,
) -> Result<Vec<(f64, CurveFit)>> {
    gammas
        .iter()
        .map(|&g| {
            let (pts, trimmed) =
                resolved_points(grid, |t| Ok(moments(profile, t, g, metric, MOMENT_TOL)?.value))?;
            let target = match metric {
                Metric::Tree => targets.displacement(g),
                Metric::Intrinsic => ExponentTargets::displacement_intrinsic(g),
            };
            Ok((
                g,
                CurveFit {
                    fit: fit_loglog(&pts, None)?,
                    target,
                    points: pts,
                    trimmed,
                },
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricBridge {
    pub gamma: f64,
    pub tree_metric: CurveFit,
    pub intrinsic_metric: CurveFit,
    /// `log D_n / (-n)` for `n >= 1`; tends to `beta - log lambda`.
    pub ratio_trace: Vec<f64>,
    pub ratio_target: f64,
}

pub fn displacement_metric_bridge(
    profile: &RayProfile,
    gamma: f64,
    grid: &[f64],
    targets: &ExponentTargets,
) -> Result<MetricBridge> {
    let mut d = displacement_scan(profile, &[gamma], grid, Metric::Tree, targets)?;
    let mut big_d = displacement_scan(profile, &[gamma], grid, Metric::Intrinsic, targets)?;
    let ratio_trace = (1..=profile.levels())
        .map(|n| -profile.log_d[n] / n as f64)
        .collect();
    Ok(MetricBridge {
        gamma,
        tree_metric: d.pop().unwrap().1,
        intrinsic_metric: big_d.pop().unwrap().1,
        ratio_trace,
        ratio_target: targets.gap(),
    })
}

/// Small-budget policy for sampling root resistances in bulk; the bracket is
/// coarse but the tail of `R` is set by the top of the tree.
pub const TAIL_POLICY: ResistancePolicy = ResistancePolicy {
    target_gap: 1e-2,
    max_depth: 400,
    vertex_budget: 2_000,
};

/// Fewer exceedances than this in the fit window trigger a warning.
pub const MIN_EXCEEDANCES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TailShape {
    /// `log P(R > x)` linear in `x`.
    Exponential,
    /// `log P(R > x)` linear in `log x`.
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailScan {
    pub lambda: f64,
    /// Sorted root-resistance midpoints.
    pub samples: Vec<f64>,
    /// Largest rigorous upper bracket end, where one exists (`lambda < 1`).
    pub max_upper: Option<f64>,
    pub shape: TailShape,
    pub slope: f64,
    pub r2: f64,
    pub window: (f64, f64),
    pub exceedances: usize,
    pub warning: Option<String>,
}

impl TailScan {
    /// Empirical survival `P(R > x)` at each sample.
    pub fn survival(&self) -> Vec<(f64, f64)> {
        let n = self.samples.len() as f64;
        self.samples
            .iter()
            .enumerate()
            .map(|(i, &x)| (x, (self.samples.len() - 1 - i) as f64 / n))
            .collect()
    }
}

/// Root resistances of `replicates` independent trees with a fit of the
/// upper tail: the fit uses samples whose survival lies in
/// `[MIN_EXCEEDANCES / n, upper_quantile]`.
pub fn tail_scan(
    br: &Branching,
    lambda: f64,
    replicates: usize,
    policy: ResistancePolicy,
    upper_quantile: f64,
    seed: u64,
) -> Result<TailScan> {
    let intervals: Vec<(f64, f64)> = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let mut net = Network::new(br.with_seed(derive_seed(seed, i as u64)), lambda, policy)?;
            let root = net.root();
            let iv = net.resistance(root);
            Ok((iv.mid(), iv.hi()))
        })
        .collect::<Result<_>>()?;
    let mut samples: Vec<f64> = intervals.iter().map(|p| p.0).collect();
    samples.sort_by(f64::total_cmp);
    let max_upper = (lambda < 1.0).then(|| intervals.iter().map(|p| p.1).fold(0.0, f64::max));
    let shape = if lambda > 1.0 {
        TailShape::Power
    } else {
        TailShape::Exponential
    };
    let n = samples.len();
    let mut scan = TailScan {
        lambda,
        samples,
        max_upper,
        shape,
        slope: f64::NAN,
        r2: f64::NAN,
        window: (f64::NAN, f64::NAN),
        exceedances: 0,
        warning: None,
    };
    let surv: Vec<(f64, f64)> = scan
        .survival()
        .into_iter()
        .filter(|&(_, s)| s <= upper_quantile && s * n as f64 >= MIN_EXCEEDANCES as f64)
        .collect();
    if surv.len() < 3 {
        scan.warning = Some(format!(
            "only {} samples in the tail window; need more replicates",
            surv.len()
        ));
        return Ok(scan);
    }
    let xs: Vec<f64> = surv
        .iter()
        .map(|p| match shape {
            TailShape::Exponential => p.0,
            TailShape::Power => p.0.ln(),
        })
        .collect();
    let ys: Vec<f64> = surv.iter().map(|p| p.1.ln()).collect();
    let (slope, _, r2) = linear_fit(&xs, &ys);
    scan.slope = slope;
    scan.r2 = r2;
    scan.window = (surv[0].0, surv[surv.len() - 1].0);
    scan.exceedances = (surv[0].1 * n as f64).round() as usize;
    if surv[surv.len() - 1].0 - surv[0].0 <= 0.0 {
        scan.warning = Some("degenerate tail window".into());
    }
    Ok(scan)
}

/// Targets block of a JSON report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReportTargets {
    pub beta: f64,
    pub log_lambda: f64,
    pub kappa: f64,
    pub walk_exponent: f64,
}

impl From<ExponentTargets> for ReportTargets {
    fn from(t: ExponentTargets) -> Self {
        Self {
            beta: t.beta,
            log_lambda: t.log_lambda,
            kappa: t.kappa,
            walk_exponent: t.walk_exponent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorReport {
    pub estimator: String,
    pub value: f64,
    pub stderr: f64,
    pub replicates: usize,
    pub window: Option<(f64, f64)>,
    pub r2: Option<f64>,
    pub targets: Option<ReportTargets>,
    pub seed: u64,
    pub config_hash: String,
}
