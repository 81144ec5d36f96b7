//! The explicit heat kernel of the boundary jump process and what follows
//! from it.
//!
//! Along a ray with cylinder masses `H_n` and intrinsic-metric values `D_n`,
//! writing `e_n(t) = exp(-t / D_n)` and `e_{-1} = 1`,
//!
//! ```text
//! p_t(omega, eta) = sum_{n=0}^{N} (e_{n-1} - e_n) / H_n            N = N(omega, eta)
//! p_t(omega, omega) = 1 + sum_{n>=0} (1/H_{n+1} - 1/H_n) e_n
//! ```
//!
//! The kernel is constant on shells `{eta : N(omega, eta) = n}`, so the law of
//! `N(omega, X_t)` has masses `q_n = (H_n - H_{n+1}) p^(n)` where `p^(n)` is
//! the off-diagonal value at meet level `n`. Everything is evaluated from the
//! logs stored in a [`RayProfile`]; `H_n p^(n)` is carried through the stable
//! recursion `s_n = s_{n-1} H_n / H_{n-1} + (e_{n-1} - e_n)`.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::boundary::{ball_to_cylinder, meet_level, pick, RayProfile};
use crate::electric::Network;
use crate::error::{Error, Result};
use crate::tree::{Node, VertexId};

/// Arguments of `exp(-x)` beyond this snap to zero.
const EXP_CUTOFF: f64 = 700.0;

/// Consecutive negligible terms required before the diagonal series stops.
pub const DIAG_QUIET_TERMS: usize = 5;
/// `t / D_n` must exceed this before the diagonal series may stop.
pub const DIAG_MIN_RATIO: f64 = 50.0;

/// `t / D_n` from logs.
#[inline]
fn ratio(t: f64, log_d: f64) -> f64 {
    (t.ln() - log_d).exp()
}

/// `exp(-t / D)` with underflow snapped to zero.
#[inline]
fn decay(t: f64, log_d: f64) -> f64 {
    let x = ratio(t, log_d);
    if x > EXP_CUTOFF {
        0.0
    } else {
        (-x).exp()
    }
}

/// `e_{n-1} - e_n` without cancellation.
#[inline]
fn bracket(profile: &RayProfile, n: usize, t: f64) -> f64 {
    let a = if n == 0 { 0.0 } else { ratio(t, profile.log_d[n - 1]) };
    let b = ratio(t, profile.log_d[n]);
    if a > EXP_CUTOFF {
        return 0.0;
    }
    (-a).exp() * -(-(b - a)).exp_m1()
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("time must be positive, got {t}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelValue {
    pub value: f64,
    /// Estimated mass of the omitted tail (zero for finite sums).
    pub tail_bound: f64,
    pub terms: usize,
}

/// `s_n = H_n p^(n)` for `n = 0..=upto`.
fn scaled_offdiag(profile: &RayProfile, t: f64, upto: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(upto + 1);
    let mut s = 0.0;
    for n in 0..=upto {
        if n > 0 {
            s *= (profile.log_h[n] - profile.log_h[n - 1]).exp();
        }
        s += bracket(profile, n, t);
        out.push(s);
    }
    out
}

/// Off-diagonal kernel for a pair of rays meeting at level `meet`.
pub fn p_offdiag(profile: &RayProfile, meet: usize, t: f64) -> Result<KernelValue> {
    check_t(t)?;
    if meet > profile.levels() {
        return Err(Error::ProfileTooShort {
            needed: meet,
            available: profile.levels(),
        });
    }
    let s = *scaled_offdiag(profile, t, meet).last().unwrap();
    Ok(KernelValue {
        value: if s > 0.0 {
            (s.ln() - profile.log_h[meet]).exp()
        } else {
            0.0
        },
        tail_bound: 0.0,
        terms: meet + 1,
    })
}

/// Diagonal kernel; the series stops once `DIAG_QUIET_TERMS` consecutive terms
/// fall below `tol` times the partial sum with `t / D_n > DIAG_MIN_RATIO`.
pub fn p_diag(profile: &RayProfile, t: f64, tol: f64) -> Result<KernelValue> {
    check_t(t)?;
    let mut sum = 1.0;
    let mut quiet = 0;
    for n in 0..profile.levels() {
        let dh = profile.log_h[n + 1] - profile.log_h[n];
        let x = ratio(t, profile.log_d[n]);
        let term = if dh == 0.0 || x > EXP_CUTOFF {
            0.0
        } else {
            (-profile.log_h[n + 1] - x + (-dh.exp_m1()).ln()).exp()
        };
        sum += term;
        if term < tol * sum {
            quiet += 1;
        } else {
            quiet = 0;
        }
        if quiet >= DIAG_QUIET_TERMS && x > DIAG_MIN_RATIO {
            return Ok(KernelValue {
                value: sum,
                tail_bound: diag_tail(profile, n, t, term),
                terms: n + 1,
            });
        }
    }
    Err(Error::ProfileTooShort {
        needed: levels_for_ratio(profile, t, DIAG_MIN_RATIO) + DIAG_QUIET_TERMS,
        available: profile.levels(),
    })
}

/// Tail after level `n`, assuming `1/H` keeps growing by the largest ratio
/// seen over the last few levels and `1/D` by the smallest. Not rigorous for
/// random trees.
fn diag_tail(profile: &RayProfile, n: usize, t: f64, last_term: f64) -> f64 {
    let lo = n.saturating_sub(8);
    let mut grow_h: f64 = 0.0;
    let mut grow_d = f64::INFINITY;
    for k in lo..n.min(profile.levels()) {
        grow_h = grow_h.max(profile.log_h[k] - profile.log_h[k + 1]);
        grow_d = grow_d.min(profile.log_d[k] - profile.log_d[k + 1]);
    }
    let x = ratio(t, profile.log_d[n]);
    let mut tail = 0.0;
    let mut term = last_term.max(f64::MIN_POSITIVE);
    for j in 1..200 {
        let jump = x * ((grow_d * j as f64).exp() - (grow_d * (j - 1) as f64).exp());
        term *= (grow_h - jump).exp();
        tail += term;
        if term < 1e-300 || term < 1e-18 * tail {
            break;
        }
    }
    tail
}

/// Smallest level whose `t / D_n` exceeds `target`, extrapolating the average
/// decay of `D` past the end of the profile.
fn levels_for_ratio(profile: &RayProfile, t: f64, target: f64) -> usize {
    let want = t.ln() - target.ln();
    if let Some(n) = profile.log_d.iter().position(|&ld| ld < want) {
        return n;
    }
    let l = profile.levels().max(1);
    let slope = (profile.log_d[0] - profile.log_d[l]) / l as f64;
    if slope <= 0.0 {
        return 2 * l;
    }
    l + ((profile.log_d[l] - want) / slope).ceil() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShellDistribution {
    pub t: f64,
    /// `q_n = P(N(omega, X_t) = n)` for `n = 0..=M`.
    pub masses: Vec<f64>,
    /// `1 - sum q_n`: mass of shells deeper than `M`.
    pub residual: f64,
    pub tolerance: f64,
    pub under_resolved: bool,
}

impl ShellDistribution {
    pub fn max_level(&self) -> usize {
        self.masses.len() - 1
    }

    pub fn require_resolved(&self, profile: &RayProfile) -> Result<()> {
        if self.under_resolved {
            Err(Error::UnderResolved {
                residual: self.residual,
                tolerance: self.tolerance,
                suggested: levels_for_ratio(profile, self.t, (1.0 / self.tolerance).ln()),
            })
        } else {
            Ok(())
        }
    }
}

/// Shell law of `N(omega, X_t)` over `n = 0..=max_level`.
pub fn shell_distribution(
    profile: &RayProfile,
    t: f64,
    max_level: usize,
    tolerance: f64,
) -> Result<ShellDistribution> {
    check_t(t)?;
    if max_level + 1 > profile.levels() {
        return Err(Error::ProfileTooShort {
            needed: max_level + 1,
            available: profile.levels(),
        });
    }
    let s = scaled_offdiag(profile, t, max_level);
    let masses: Vec<f64> = (0..=max_level)
        .map(|n| {
            let dh = profile.log_h[n + 1] - profile.log_h[n];
            (-dh.exp_m1() * s[n]).max(0.0)
        })
        .collect();
    let total: f64 = masses.iter().sum();
    let residual = 1.0 - total;
    Ok(ShellDistribution {
        t,
        masses,
        residual,
        tolerance,
        under_resolved: residual > tolerance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Metric {
    /// `d = exp(-N)`.
    Tree,
    /// The intrinsic metric `D`.
    Intrinsic,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d" => Ok(Metric::Tree),
            "D" => Ok(Metric::Intrinsic),
            _ => Err(Error::InvalidArgument(format!("metric must be d or D, got {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moment {
    /// Sum over resolved shells (a lower bound).
    pub value: f64,
    /// `value` plus the residual mass at the scale of the first unresolved shell.
    pub upper: f64,
    pub residual: f64,
}

/// `E_omega[dist(omega, X_t)^gamma]` over every shell the profile resolves.
/// Fails when the residual bracket exceeds `rel_tol` of the value.
pub fn moments(
    profile: &RayProfile,
    t: f64,
    gamma: f64,
    metric: Metric,
    rel_tol: f64,
) -> Result<Moment> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let m = profile.levels() - 1;
    let shells = shell_distribution(profile, t, m, 1.0)?;
    let log_scale = |n: usize| match metric {
        Metric::Tree => -(n as f64),
        Metric::Intrinsic => profile.log_d[n],
    };
    let value: f64 = shells
        .masses
        .iter()
        .enumerate()
        .map(|(n, q)| q * (gamma * log_scale(n)).exp())
        .sum();
    let residual = shells.residual.max(0.0);
    let upper = value + residual * (gamma * log_scale(m + 1)).exp();
    if upper - value > rel_tol * value {
        return Err(Error::UnderResolved {
            residual,
            tolerance: rel_tol,
            suggested: levels_for_ratio(profile, t, 40.0) + 1,
        });
    }
    Ok(Moment {
        value,
        upper,
        residual,
    })
}

/// Comparison kernel `q_t`: `t / (D_N H_N)` while `t <= D_N`, otherwise
/// `1 / HARM(B_D(omega, t))`. `meet = None` is the diagonal.
pub fn q_t_reference(profile: &RayProfile, meet: Option<usize>, t: f64) -> Result<f64> {
    check_t(t)?;
    if let Some(n) = meet {
        if n > profile.levels() {
            return Err(Error::ProfileTooShort {
                needed: n,
                available: profile.levels(),
            });
        }
        if t <= profile.d(n) {
            return Ok((t.ln() - profile.log_d[n] - profile.log_h[n]).exp());
        }
    }
    let n = ball_to_cylinder(profile, t)?;
    Ok((-profile.log_h[n]).exp())
}

/// `(1/e) / HARM(B_D(omega, t))`, the lower bound on the diagonal.
pub fn diag_lower_bound(profile: &RayProfile, t: f64) -> Result<f64> {
    let n = ball_to_cylinder(profile, t)?;
    Ok((-1.0 - profile.log_h[n]).exp())
}

/// `t / (D_N H_N)`, the upper bound on the off-diagonal kernel for `t <= D_N`.
pub fn offdiag_upper_bound(profile: &RayProfile, meet: usize, t: f64) -> Option<f64> {
    if t <= profile.d(meet) {
        Some((t.ln() - profile.log_d[meet] - profile.log_h[meet]).exp())
    } else {
        None
    }
}

/// A vertex at the partition depth with its harmonic mass.
#[derive(Debug, Clone, Copy)]
struct Cell {
    node: Node,
    log_mass: f64,
}

/// Every vertex at depth `depth` with its cylinder mass, in DFS order, paired
/// with its path.
fn cells(net: &mut Network, depth: usize, cap: usize) -> Result<Vec<(VertexId, Cell)>> {
    let mut out = Vec::new();
    let mut stack = vec![(VertexId::root(), Cell {
        node: net.root(),
        log_mass: 0.0,
    })];
    while let Some((id, cell)) = stack.pop() {
        if id.height() == depth {
            out.push((id, cell));
            if out.len() > cap {
                return Err(Error::VertexCapExceeded { cap });
            }
            continue;
        }
        let w = net.child_weights(cell.node);
        for (i, lf) in w.log_fractions.iter().enumerate().rev() {
            let i = i as u32 + 1;
            stack.push((id.child(i), Cell {
                node: net.branching().child(cell.node, i),
                log_mass: cell.log_mass + lf,
            }));
        }
    }
    Ok(out)
}

/// Mass carried inside the depth-`depth` cell of `omega`:
/// `H_L p^(L) + exp(-t / D_L)`.
fn own_cell_integral(profile: &RayProfile, depth: usize, t: f64) -> f64 {
    let s = *scaled_offdiag(profile, t, depth).last().unwrap();
    s + decay(t, profile.log_d[depth])
}

pub const DEFAULT_CELL_CAP: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MassCheck {
    pub defect: f64,
    pub own_cell_mass: f64,
    pub cells: usize,
}

/// `|integral of p_t(omega, .) dHARM - 1|` using the partition into depth-`depth`
/// cylinders; the cell of `omega` itself is integrated in closed form.
pub fn verify_mass(
    net: &mut Network,
    profile: &RayProfile,
    t: f64,
    depth: usize,
) -> Result<MassCheck> {
    check_t(t)?;
    if profile.levels() < depth {
        return Err(Error::ProfileTooShort {
            needed: depth,
            available: profile.levels(),
        });
    }
    let own = own_cell_integral(profile, depth, t);
    if own > 0.5 {
        return Err(Error::TimeTooSmall {
            t,
            depth,
            mass: own,
        });
    }
    let kernel: Vec<f64> = (0..depth)
        .map(|n| p_offdiag(profile, n, t).map(|k| k.value))
        .collect::<Result<_>>()?;
    let all = cells(net, depth, DEFAULT_CELL_CAP)?;
    let mut total = own;
    for (id, cell) in &all {
        let n = meet_level(id, &profile.ray);
        if n < depth {
            total += kernel[n] * cell.log_mass.exp();
        }
    }
    Ok(MassCheck {
        defect: (total - 1.0).abs(),
        own_cell_mass: own,
        cells: all.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SemigroupCheck {
    pub integral: f64,
    pub direct: f64,
    pub rel_error: f64,
    /// Largest mass left inside either unresolved own cell.
    pub truncation: f64,
}

/// Compares `integral p_t(omega, xi) p_s(xi, eta) dHARM(xi)` over depth-`depth`
/// cells with `p_{t+s}(omega, eta)`.
pub fn verify_ck(
    net: &mut Network,
    omega: &RayProfile,
    eta: &RayProfile,
    t: f64,
    s: f64,
    depth: usize,
) -> Result<SemigroupCheck> {
    check_t(t)?;
    check_t(s)?;
    let meet = meet_level(&omega.ray, &eta.ray);
    if meet >= depth || omega.ray == eta.ray {
        return Err(Error::InvalidArgument(format!(
            "rays must separate above the partition depth (meet {meet}, depth {depth})"
        )));
    }
    for p in [omega, eta] {
        if p.levels() < depth {
            return Err(Error::ProfileTooShort {
                needed: depth,
                available: p.levels(),
            });
        }
    }
    let own_omega = own_cell_integral(omega, depth, t);
    let own_eta = own_cell_integral(eta, depth, s);
    for (own, time) in [(own_omega, t), (own_eta, s)] {
        if own > 0.5 {
            return Err(Error::TimeTooSmall {
                t: time,
                depth,
                mass: own,
            });
        }
    }
    let pt: Vec<f64> = (0..=depth)
        .map(|n| p_offdiag(omega, n, t).map(|k| k.value))
        .collect::<Result<_>>()?;
    let ps: Vec<f64> = (0..=depth)
        .map(|n| p_offdiag(eta, n, s).map(|k| k.value))
        .collect::<Result<_>>()?;
    let mut integral = own_omega * ps[meet] + own_eta * pt[meet];
    for (id, cell) in cells(net, depth, DEFAULT_CELL_CAP)? {
        let a = meet_level(&id, &omega.ray);
        let b = meet_level(&id, &eta.ray);
        if a < depth && b < depth {
            integral += cell.log_mass.exp() * pt[a] * ps[b];
        }
    }
    let direct = p_offdiag(omega, meet, t + s)?.value;
    Ok(SemigroupCheck {
        integral,
        direct,
        rel_error: ((integral - direct) / direct).abs(),
        truncation: own_omega.max(own_eta),
    })
}

/// One grid point of a sampled trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub time: f64,
    pub ray_prefix: VertexId,
    pub shell_drawn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryConfig {
    /// Prefix length reported at each grid time.
    pub report_depth: usize,
    /// Levels added at a time when a draw lands beyond the resolved shells.
    pub extend_step: usize,
    pub max_depth: usize,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            report_depth: 20,
            extend_step: 16,
            max_depth: 4000,
        }
    }
}

/// Draws the shell of one exact transition over time `dt` from `current`,
/// extending the ray by harmonic descent when the draw falls in the residual.
fn draw_shell<R: Rng + ?Sized>(
    net: &mut Network,
    current: &mut RayProfile,
    dt: f64,
    cfg: &TrajectoryConfig,
    rng: &mut R,
) -> Result<usize> {
    let u: f64 = rng.gen();
    loop {
        let m = current.levels() - 1;
        let shells = shell_distribution(current, dt, m, 1.0)?;
        let mut acc = 0.0;
        for (n, q) in shells.masses.iter().enumerate() {
            acc += q;
            if u < acc {
                return Ok(n);
            }
        }
        if current.levels() >= cfg.max_depth {
            return Err(Error::ProfileTooShort {
                needed: current.levels() + cfg.extend_step,
                available: cfg.max_depth,
            });
        }
        let target = (current.levels() + cfg.extend_step).min(cfg.max_depth);
        current.extend(net, target, rng)?;
    }
}

/// Moves `current` to a ray drawn from harmonic measure restricted to the
/// shell at level `n`: one step off the ray at `[omega]_n`, then free descent.
fn land<R: Rng + ?Sized>(
    net: &mut Network,
    current: &mut RayProfile,
    n: usize,
    depth: usize,
    rng: &mut R,
) -> Result<()> {
    let stay = current.ray.path()[n] as usize - 1;
    let w = net.child_weights(current.node(n));
    let mut fractions = w.fractions.clone();
    fractions[stay] = 0.0;
    let total: f64 = fractions.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical(format!("shell {n} drawn at a unary vertex")));
    }
    for f in &mut fractions {
        *f /= total;
    }
    let i = pick(&fractions, rng);
    current.truncate(n);
    current.extend_with(net, i as u32 + 1)?;
    current.extend(net, depth.max(n + 2), rng)
}

/// Grid-time sample path of the boundary process started from `start`.
pub fn sample_trajectory<R: Rng + ?Sized>(
    net: &mut Network,
    start: &RayProfile,
    times: &[f64],
    cfg: &TrajectoryConfig,
    rng: &mut R,
) -> Result<Vec<TrajectoryPoint>> {
    if times.windows(2).any(|w| !(w[1] > w[0])) || times.first().is_some_and(|&t| !(t > 0.0)) {
        return Err(Error::InvalidArgument(
            "time grid must be positive and strictly increasing".into(),
        ));
    }
    let mut current = start.clone();
    if current.levels() < cfg.report_depth + 1 {
        current.extend(net, cfg.report_depth + 1, rng)?;
    }
    let mut out = Vec::with_capacity(times.len());
    let mut prev = 0.0;
    for &t in times {
        let n = draw_shell(net, &mut current, t - prev, cfg, rng)?;
        land(net, &mut current, n, cfg.report_depth + 1, rng)?;
        out.push(TrajectoryPoint {
            time: t,
            ray_prefix: current.ray.prefix(cfg.report_depth),
            shell_drawn: n,
        });
        prev = t;
    }
    Ok(out)
}

/// Curve CSV: `t,value,tail_bound`.
pub fn write_curve_csv<W: Write>(rows: &[(f64, KernelValue)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "t,value,tail_bound")?;
    for (t, k) in rows {
        writeln!(out, "{t:.17e},{:.17e},{:.17e}", k.value, k.tail_bound)?;
    }
    Ok(())
}

/// Trajectory JSON lines: `{"time":..,"ray_prefix":[..],"shell_drawn":..}`.
pub fn write_trajectory_jsonl<W: Write>(
    points: &[TrajectoryPoint],
    mut out: W,
) -> std::io::Result<()> {
    for p in points {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
