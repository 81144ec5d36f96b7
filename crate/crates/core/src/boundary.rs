//! Rays, cylinder masses and the intrinsic metric along a ray.
//!
//! A [`RayProfile`] records, for every level `n` of a ray prefix,
//! `log H_n` (harmonic mass of the cylinder below `[omega]_n`), `log R_n`
//! (original-scale resistance of that vertex) and `log D_n = log H_n + log R_n`.
//! Masses are accumulated as sums of log flow fractions; `H_n` itself
//! underflows long before the rays used for ergodic averages end.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::electric::{Network, ResistancePolicy};
use crate::error::{Error, Result};
use crate::tree::{Branching, LazyTree, Node, VertexId};

/// Relative slack allowed before a non-decreasing `D_n` counts as a violation.
pub const D_DECREASE_TOL: f64 = 1e-9;

/// Length of the longest common prefix: the meet level `N(u, v)`.
pub fn meet_level(u: &VertexId, v: &VertexId) -> usize {
    u.path()
        .iter()
        .zip(v.path())
        .take_while(|(a, b)| a == b)
        .count()
}

/// `d(u, v) = exp(-N(u, v))`; zero for identical rays.
pub fn d_metric(u: &VertexId, v: &VertexId) -> f64 {
    if u == v {
        0.0
    } else {
        (-(meet_level(u, v) as f64)).exp()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RayProfile {
    pub lambda: f64,
    pub ray: VertexId,
    pub log_h: Vec<f64>,
    pub log_r: Vec<f64>,
    pub log_d: Vec<f64>,
    /// `log r_hi - log r_lo` of the resistance bracket at each level.
    pub spread: Vec<f64>,
    /// Worst-case flow-fraction shift from interval widths, per step taken.
    pub perturbation: Vec<f64>,
    #[serde(skip)]
    nodes: Vec<Node>,
}

impl RayProfile {
    /// Number of levels `L`; data is stored for `n = 0..=L`.
    pub fn levels(&self) -> usize {
        self.log_h.len() - 1
    }

    pub fn h(&self, n: usize) -> f64 {
        self.log_h[n].exp()
    }

    pub fn d(&self, n: usize) -> f64 {
        self.log_d[n].exp()
    }

    pub fn node(&self, n: usize) -> Node {
        self.nodes[n]
    }

    fn start(net: &mut Network) -> Self {
        let root = net.root();
        let iv = net.resistance(root);
        let log_r = iv.log_mid();
        Self {
            lambda: net.lambda(),
            ray: VertexId::root(),
            log_h: vec![0.0],
            log_r: vec![log_r],
            log_d: vec![log_r],
            spread: vec![iv.spread()],
            perturbation: Vec::new(),
            nodes: vec![root],
        }
    }

    /// Appends child `index` of the last vertex. The flow fraction comes from
    /// `weights` computed at that vertex.
    fn push(&mut self, net: &mut Network, index: u32, log_fraction: f64, perturbation: f64) {
        let last = *self.nodes.last().unwrap();
        let child = net.branching().child(last, index);
        let iv = net.resistance(child);
        let h = child.depth as usize;
        let log_h = self.log_h.last().unwrap() + log_fraction;
        let log_r = iv.log_original(h, net.lambda());
        self.ray = self.ray.child(index);
        self.log_h.push(log_h);
        self.log_r.push(log_r);
        self.log_d.push(log_h + log_r);
        self.spread.push(iv.spread());
        self.perturbation.push(perturbation);
        self.nodes.push(child);
    }

    /// Profile along a given ray prefix.
    pub fn along(net: &mut Network, ray: &VertexId) -> Result<Self> {
        net.resolve(ray)?;
        let mut p = Self::start(net);
        for &i in ray.path() {
            let w = net.child_weights(*p.nodes.last().unwrap());
            p.push(net, i, w.log_fractions[i as usize - 1], w.perturbation);
        }
        p.check_decreasing()?;
        Ok(p)
    }

    /// Continues the ray by harmonic-measure descent until it has `levels` levels.
    pub fn extend<R: Rng + ?Sized>(
        &mut self,
        net: &mut Network,
        levels: usize,
        rng: &mut R,
    ) -> Result<()> {
        let from = self.levels();
        while self.levels() < levels {
            let w = net.child_weights(*self.nodes.last().unwrap());
            let i = pick(&w.fractions, rng);
            self.push(net, i as u32 + 1, w.log_fractions[i], w.perturbation);
        }
        self.check_decreasing_from(from)
    }

    /// Appends child `index` (1-based) of the last vertex.
    pub fn extend_with(&mut self, net: &mut Network, index: u32) -> Result<()> {
        let last = *self.nodes.last().unwrap();
        let w = net.child_weights(last);
        if index == 0 || index as usize > w.fractions.len() {
            return Err(Error::InvalidVertex {
                path: self.ray.child(index).path().to_vec(),
                reason: format!("vertex has {} children", w.fractions.len()),
            });
        }
        let from = self.levels();
        self.push(net, index, w.log_fractions[index as usize - 1], w.perturbation);
        self.check_decreasing_from(from)
    }

    /// Drops every level below `levels`.
    pub fn truncate(&mut self, levels: usize) {
        let keep = levels + 1;
        if keep < self.log_h.len() {
            self.ray = self.ray.prefix(levels);
            self.log_h.truncate(keep);
            self.log_r.truncate(keep);
            self.log_d.truncate(keep);
            self.spread.truncate(keep);
            self.perturbation.truncate(levels);
            self.nodes.truncate(keep);
        }
    }

    pub fn check_decreasing(&self) -> Result<()> {
        self.check_decreasing_from(0)
    }

    fn check_decreasing_from(&self, from: usize) -> Result<()> {
        for n in from.max(1)..self.log_d.len() {
            // relative increase D_n / D_{n-1} - 1, taken in log space
            if self.log_d[n] - self.log_d[n - 1] > D_DECREASE_TOL.ln_1p() {
                return Err(Error::Numerical(format!(
                    "D not decreasing along {} at level {n}: log D = {} after {} (spreads {:.3e}, {:.3e})",
                    self.ray,
                    self.log_d[n],
                    self.log_d[n - 1],
                    self.spread[n - 1],
                    self.spread[n]
                )));
            }
        }
        Ok(())
    }

    /// Profile CSV: `n,child_index,log_H,log_R,log_D,spread`; the root row has
    /// child index 0.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "n,child_index,log_H,log_R,log_D,spread")?;
        for n in 0..self.log_h.len() {
            let idx = if n == 0 { 0 } else { self.ray.path()[n - 1] };
            writeln!(
                out,
                "{n},{idx},{:.17e},{:.17e},{:.17e},{:.17e}",
                self.log_h[n], self.log_r[n], self.log_d[n], self.spread[n]
            )?;
        }
        Ok(())
    }
}

pub(crate) fn pick<R: Rng + ?Sized>(fractions: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, f) in fractions.iter().enumerate() {
        acc += f;
        if u < acc {
            return i;
        }
    }
    fractions.len() - 1
}

/// Samples a ray from harmonic measure to `levels` levels.
pub fn sample_ray_in<R: Rng + ?Sized>(
    net: &mut Network,
    levels: usize,
    rng: &mut R,
) -> Result<RayProfile> {
    if levels == 0 {
        return Err(Error::InvalidArgument("a ray needs at least one level".into()));
    }
    let mut p = RayProfile::start(net);
    p.extend(net, levels, rng)?;
    Ok(p)
}

pub fn sample_ray<R: Rng + ?Sized>(
    tree: &LazyTree,
    lambda: f64,
    levels: usize,
    policy: ResistancePolicy,
    rng: &mut R,
) -> Result<RayProfile> {
    let mut net = Network::new(tree.branching().clone(), lambda, policy)?;
    sample_ray_in(&mut net, levels, rng)
}

/// The level `n` with `B_D(omega, r) = Sigma([omega]_n)`, i.e. the unique `n`
/// with `D_n < r <= D_{n-1}` (and `D_{-1} = infinity`).
pub fn ball_to_cylinder(profile: &RayProfile, r: f64) -> Result<usize> {
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {r}")));
    }
    // D is decreasing: first level with D_n < r
    match profile.log_d.iter().position(|&ld| ld.exp() < r) {
        Some(n) => Ok(n),
        None => Err(Error::ProfileTooShort {
            needed: profile.levels() + 1,
            available: profile.levels(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VdReport {
    /// A non-root vertex with exactly one child, if any was seen.
    pub el_witness: Option<VertexId>,
    pub max_branching: u32,
    pub depth_scanned: usize,
    pub vertices_scanned: usize,
}

/// Scans every vertex of height `<= depth` for a unary non-root vertex, which
/// rules out volume doubling of harmonic measure for both `d` and `D`.
pub fn vd_diagnostic(br: &Branching, depth: usize, vertex_cap: usize) -> Result<VdReport> {
    if depth == 0 {
        return Err(Error::InvalidArgument("depth must be at least 1".into()));
    }
    let mut level = vec![(VertexId::root(), br.root())];
    let mut report = VdReport {
        el_witness: None,
        max_branching: 0,
        depth_scanned: 0,
        vertices_scanned: 0,
    };
    for h in 0..=depth {
        let mut next = Vec::new();
        for (id, node) in level {
            report.vertices_scanned += 1;
            if report.vertices_scanned > vertex_cap {
                return Err(Error::VertexCapExceeded { cap: vertex_cap });
            }
            let k = br.child_count(node);
            report.max_branching = report.max_branching.max(k);
            if k == 1 && h > 0 && report.el_witness.is_none() {
                report.el_witness = Some(id.clone());
            }
            if h < depth {
                for i in 1..=k {
                    next.push((id.child(i), br.child(node, i)));
                }
            }
        }
        report.depth_scanned = h;
        level = next;
    }
    Ok(report)
}
