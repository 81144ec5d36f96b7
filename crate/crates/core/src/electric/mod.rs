//! The lambda-biased electric network on a tree.
//!
//! The edge between levels `n` and `n+1` has conductance `lambda^-n`. All
//! resistances are kept in normalized coordinates: `r(x)` is the resistance
//! from `x` to infinity in the subtree `T(x)` after rescaling so that the edges
//! leaving `x` have unit resistance. The original-scale value is
//! `R(x) = lambda^h(x) * r(x)` and is only ever handled as a logarithm.
//!
//! Series and parallel laws give
//!
//! ```text
//! 1 / r(x) = sum over children c of 1 / (1 + lambda * r(c))
//! ```
//!
//! evaluated bottom-up from a frontier `K` levels below `x`. Shorting the
//! frontier (`r = 0`) gives a lower bound. For `lambda < 1` a single ray has
//! resistance `1 / (1 - lambda)`, which bounds every subtree from above, so the
//! bracket is rigorous. For `lambda >= 1` no sure upper closure exists; the
//! upper end uses the regular-tree fixed point `1 / (m - lambda)` and is
//! labelled heuristic, and convergence is judged from successive grounded
//! values instead.

mod oracle;

use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tree::{Branching, LazyTree, Node, VertexId};

pub use oracle::{resistance_oracle, OracleClosure};

/// `lambda^-n`, the conductance of an edge from level `n` to `n + 1`.
pub fn conductance(lambda: f64, level: u32) -> f64 {
    log_conductance(lambda, level).exp()
}

pub fn log_conductance(lambda: f64, level: u32) -> f64 {
    -(level as f64) * lambda.ln()
}

/// `1 / (1 + lambda r)`: probability that the walk started at a vertex with
/// normalized resistance `r` never visits an extra parent attached above it.
pub fn escape_probability(r: f64, lambda: f64) -> f64 {
    1.0 / (1.0 + lambda * r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasConfig {
    pub lambda: f64,
    pub mean: f64,
}

impl BiasConfig {
    pub fn new(lambda: f64, mean: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        Ok(Self { lambda, mean })
    }

    pub fn is_transient(&self) -> bool {
        self.lambda < self.mean
    }

    pub fn require_transient(&self) -> Result<()> {
        if self.is_transient() {
            Ok(())
        } else {
            Err(Error::NonTransient {
                lambda: self.lambda,
                mean: self.mean,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Closure {
    Grounded,
    DeterministicBound,
    HeuristicRay,
    Converged,
    /// Regular subtree: the fixed point `1 / (b - lambda)` in closed form.
    Exact,
}

impl Closure {
    pub fn as_str(self) -> &'static str {
        match self {
            Closure::Grounded => "grounded",
            Closure::DeterministicBound => "deterministic-bound",
            Closure::HeuristicRay => "heuristic-ray",
            Closure::Converged => "converged",
            Closure::Exact => "exact",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResistancePolicy {
    /// Relative bracket width (`lambda < 1`) or relative step between
    /// successive grounded values (`lambda >= 1`) that ends deepening.
    pub target_gap: f64,
    pub max_depth: usize,
    /// Upper limit on vertices visited by a single deepening pass.
    pub vertex_budget: usize,
}

impl Default for ResistancePolicy {
    fn default() -> Self {
        Self {
            target_gap: 1e-6,
            max_depth: 400,
            vertex_budget: 4_000_000,
        }
    }
}

const MIN_DEPTH: usize = 3;

/// Bracket on the normalized resistance of one vertex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResistanceInterval {
    pub log_lo: f64,
    pub log_hi: f64,
    pub closure_lo: Closure,
    pub closure_hi: Closure,
    pub depth_used: usize,
    /// Depth cap or vertex budget reached before the gap target.
    pub capped: bool,
}

impl ResistanceInterval {
    pub fn lo(&self) -> f64 {
        self.log_lo.exp()
    }

    pub fn hi(&self) -> f64 {
        self.log_hi.exp()
    }

    /// Geometric midpoint in log space.
    pub fn log_mid(&self) -> f64 {
        0.5 * (self.log_lo + self.log_hi)
    }

    pub fn mid(&self) -> f64 {
        self.log_mid().exp()
    }

    /// `log hi - log lo`.
    pub fn spread(&self) -> f64 {
        self.log_hi - self.log_lo
    }

    /// Natural log of the original-scale resistance at height `h`.
    pub fn log_original(&self, h: usize, lambda: f64) -> f64 {
        h as f64 * lambda.ln() + self.log_mid()
    }
}

/// Grounded values at frontier depths `K, K-1, K-2` and the upper-closure
/// value at depth `K`.
#[derive(Debug, Clone, Copy)]
struct Pass {
    lo: [f64; 3],
    hi: f64,
    vertices: usize,
}

fn combine(acc: &mut [f64; 4], child: [f64; 4], lambda: f64) {
    for j in 0..4 {
        acc[j] += 1.0 / (1.0 + lambda * child[j]);
    }
}

/// Values for a subtree with `remaining` levels above its frontier:
/// `[lo_k, lo_{k-1}, lo_{k-2}, hi_k]`, counting visited vertices.
fn descend(
    br: &Branching,
    node: Node,
    lambda: f64,
    remaining: usize,
    frontier_hi: f64,
    visited: &mut usize,
) -> [f64; 4] {
    if let Some(b) = br.regular_subtree(node) {
        *visited += remaining + 1;
        return regular_values(b as f64, lambda, remaining, frontier_hi);
    }
    *visited += 1;
    if remaining == 0 {
        return [0.0, 0.0, 0.0, frontier_hi];
    }
    let k = br.child_count(node);
    let mut acc = [0.0; 4];
    for i in 1..=k {
        let c = br.child(node, i);
        let v = descend(br, c, lambda, remaining - 1, frontier_hi, visited);
        combine(&mut acc, v, lambda);
    }
    let mut out = [1.0 / acc[0], 1.0 / acc[1], 1.0 / acc[2], 1.0 / acc[3]];
    // frontier at or above this vertex: grounded at itself
    if remaining < 3 {
        out[2] = 0.0;
    }
    if remaining < 2 {
        out[1] = 0.0;
    }
    out
}

/// Scalar recursion `r_k = (1 + lambda r_{k-1}) / b` for a `b`-ary subtree.
fn regular_values(b: f64, lambda: f64, remaining: usize, frontier_hi: f64) -> [f64; 4] {
    let mut lo = [0.0f64; 3];
    let mut cur = 0.0;
    let mut hi = frontier_hi;
    for k in 1..=remaining {
        cur = (1.0 + lambda * cur) / b;
        hi = (1.0 + lambda * hi) / b;
        if k + 2 >= remaining {
            lo[remaining - k] = cur;
        }
    }
    [lo[0], lo[1], lo[2], hi]
}

fn run_pass(br: &Branching, node: Node, lambda: f64, depth: usize, frontier_hi: f64) -> Pass {
    let mut visited = 0;
    let v = descend(br, node, lambda, depth, frontier_hi, &mut visited);
    Pass {
        lo: [v[0], v[1], v[2]],
        hi: v[3],
        vertices: visited,
    }
}

/// Normalized resistance at `node` with the frontier fixed at `depth` levels
/// below it and every frontier vertex assigned resistance `frontier`.
pub fn resistance_fixed_depth(
    br: &Branching,
    node: Node,
    lambda: f64,
    depth: usize,
    frontier: f64,
) -> f64 {
    let mut visited = 0;
    descend(br, node, lambda, depth, frontier, &mut visited)[3]
}

fn upper_frontier(lambda: f64, mean: f64) -> f64 {
    if lambda < 1.0 {
        1.0 / (1.0 - lambda)
    } else {
        1.0 / (mean - lambda)
    }
}

fn adaptive(
    br: &Branching,
    node: Node,
    lambda: f64,
    policy: &ResistancePolicy,
    start_depth: usize,
) -> ResistanceInterval {
    let regular = br.regular_subtree(node);
    if let Some(b) = regular.filter(|&b| lambda < b as f64) {
        // exact, and identical for every copy of the subtree
        let log_r = -(b as f64 - lambda).ln();
        return ResistanceInterval {
            log_lo: log_r,
            log_hi: log_r,
            closure_lo: Closure::Exact,
            closure_hi: Closure::Exact,
            depth_used: 0,
            capped: false,
        };
    }
    let frontier_hi = upper_frontier(lambda, br.subtree_mean(node));
    let regular = regular.is_some();
    let mut depth = start_depth.clamp(MIN_DEPTH, policy.max_depth.max(MIN_DEPTH));
    let mut last_vertices = 0usize;
    loop {
        let pass = run_pass(br, node, lambda, depth, frontier_hi);
        let [lo, lo1, lo2] = pass.lo;
        let (hi, closure_hi, done) = if lambda < 1.0 {
            let hi = pass.hi.max(lo);
            (hi, Closure::DeterministicBound, hi / lo - 1.0 <= policy.target_gap)
        } else {
            let step = lo - lo1;
            if step <= policy.target_gap * lo {
                let prev = lo1 - lo2;
                let ratio = if prev > 0.0 {
                    (step / prev).clamp(0.0, 0.999)
                } else {
                    0.0
                };
                let tail = step.max(0.0) * ratio / (1.0 - ratio);
                (lo + tail, Closure::Converged, true)
            } else {
                (pass.hi.max(lo), Closure::HeuristicRay, false)
            }
        };
        let growth = if last_vertices > 0 {
            pass.vertices as f64 / last_vertices as f64
        } else {
            1.0
        };
        let step = if regular { 8 } else { 1 };
        let next_cost = pass.vertices as f64 * growth.powi(step as i32);
        let capped = !done
            && (depth + step > policy.max_depth || next_cost > policy.vertex_budget as f64);
        if done || capped {
            return ResistanceInterval {
                log_lo: lo.ln(),
                log_hi: hi.ln(),
                closure_lo: Closure::Grounded,
                closure_hi,
                depth_used: depth,
                capped,
            };
        }
        last_vertices = pass.vertices;
        depth += step;
    }
}

/// Child fractions of the unit current entering a vertex.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowSplit {
    pub parent_mass: f64,
    /// Cylinder mass of each child, in child-index order.
    pub masses: Vec<f64>,
    /// `masses / parent_mass`, computed directly.
    pub fractions: Vec<f64>,
    /// Largest change of any fraction when the child resistances range over
    /// their intervals.
    pub perturbation: f64,
    pub flagged: bool,
}

/// Branch weights `1 / (1 + lambda r(c))` and the derived split.
#[derive(Debug, Clone)]
pub struct ChildWeights {
    pub weights: Vec<f64>,
    pub fractions: Vec<f64>,
    pub log_fractions: Vec<f64>,
    pub perturbation: f64,
}

impl ChildWeights {
    fn from_intervals(children: &[ResistanceInterval], lambda: f64) -> Self {
        let weights: Vec<f64> = children
            .iter()
            .map(|iv| escape_probability(iv.mid(), lambda))
            .collect();
        let total: f64 = weights.iter().sum();
        let fractions: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log_fractions = fractions.iter().map(|f| f.ln()).collect();
        // extremes: one child at its end of the interval, all others at the opposite end
        let mut perturbation = 0.0f64;
        if children.len() > 1 {
            let lo_w: Vec<f64> = children.iter().map(|iv| escape_probability(iv.lo(), lambda)).collect();
            let hi_w: Vec<f64> = children.iter().map(|iv| escape_probability(iv.hi(), lambda)).collect();
            let sum_lo: f64 = lo_w.iter().sum();
            let sum_hi: f64 = hi_w.iter().sum();
            for (i, f) in fractions.iter().enumerate() {
                let fmax = lo_w[i] / (lo_w[i] + sum_hi - hi_w[i]);
                let fmin = hi_w[i] / (hi_w[i] + sum_lo - lo_w[i]);
                perturbation = perturbation.max((fmax - f).abs()).max((f - fmin).abs());
            }
        }
        Self {
            weights,
            fractions,
            log_fractions,
            perturbation,
        }
    }
}

/// Resistances, flows and warnings for one tree at one bias, with a per-tree
/// cache keyed by vertex key.
#[derive(Debug, Clone)]
pub struct Network {
    branching: Branching,
    lambda: f64,
    policy: ResistancePolicy,
    cache: HashMap<u64, ResistanceInterval>,
    last_depth: usize,
    warnings: Vec<String>,
}

impl Network {
    pub fn new(branching: Branching, lambda: f64, policy: ResistancePolicy) -> Result<Self> {
        BiasConfig::new(lambda, branching.mean())?.require_transient()?;
        if !(policy.target_gap > 0.0) {
            return Err(Error::InvalidArgument("target_gap must be positive".into()));
        }
        Ok(Self {
            branching,
            lambda,
            policy,
            cache: HashMap::new(),
            last_depth: MIN_DEPTH,
            warnings: Vec::new(),
        })
    }

    pub fn branching(&self) -> &Branching {
        &self.branching
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn policy(&self) -> &ResistancePolicy {
        &self.policy
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn take_warnings(&mut self) -> Vec<String> {
        std::mem::take(&mut self.warnings)
    }

    pub fn root(&self) -> Node {
        self.branching.root()
    }

    pub fn resolve(&self, v: &VertexId) -> Result<Node> {
        self.branching.resolve(v)
    }

    pub fn resistance(&mut self, node: Node) -> ResistanceInterval {
        if let Some(iv) = self.cache.get(&node.key) {
            return *iv;
        }
        // neighbouring vertices need similar depths; start a little shallower
        let start = self.last_depth.saturating_sub(2);
        let iv = adaptive(&self.branching, node, self.lambda, &self.policy, start);
        if iv.capped {
            self.warnings.push(format!(
                "resistance at key {:016x} (depth {}) capped at frontier depth {} with log-gap {:.3e}",
                node.key,
                node.depth,
                iv.depth_used,
                iv.spread()
            ));
        }
        if iv.closure_hi != Closure::Exact {
            self.last_depth = iv.depth_used;
        }
        self.cache.insert(node.key, iv);
        iv
    }

    pub fn children(&self, node: Node) -> Vec<Node> {
        (1..=self.branching.child_count(node))
            .map(|i| self.branching.child(node, i))
            .collect()
    }

    pub fn child_weights(&mut self, node: Node) -> ChildWeights {
        let ivs: Vec<ResistanceInterval> = self
            .children(node)
            .into_iter()
            .map(|c| self.resistance(c))
            .collect();
        ChildWeights::from_intervals(&ivs, self.lambda)
    }

    /// Drops cached intervals; trees explored once need not keep them.
    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

/// Adaptive resistance bracket at `v`.
pub fn resistance(
    tree: &LazyTree,
    v: &VertexId,
    lambda: f64,
    policy: ResistancePolicy,
) -> Result<ResistanceInterval> {
    let mut net = Network::new(tree.branching().clone(), lambda, policy)?;
    let node = net.resolve(v)?;
    Ok(net.resistance(node))
}

/// Harmonic-measure split at `x`: the parent mass is the product of the flow
/// fractions along the path from the root.
pub fn harmonic_flow(
    tree: &LazyTree,
    x: &VertexId,
    lambda: f64,
    policy: ResistancePolicy,
    tolerance: f64,
) -> Result<FlowSplit> {
    let mut net = Network::new(tree.branching().clone(), lambda, policy)?;
    harmonic_flow_in(&mut net, x, tolerance)
}

pub fn harmonic_flow_in(net: &mut Network, x: &VertexId, tolerance: f64) -> Result<FlowSplit> {
    let br = net.branching().clone();
    let target = br.resolve(x)?;
    let mut node = br.root();
    let mut log_mass = 0.0;
    for &i in x.path() {
        let w = net.child_weights(node);
        log_mass += w.log_fractions[i as usize - 1];
        node = br.child(node, i);
    }
    debug_assert_eq!(node, target);
    let parent_mass = log_mass.exp();
    let w = net.child_weights(node);
    Ok(FlowSplit {
        parent_mass,
        masses: w.fractions.iter().map(|f| f * parent_mass).collect(),
        flagged: w.perturbation > tolerance,
        fractions: w.fractions,
        perturbation: w.perturbation,
    })
}

/// Per-vertex resistance CSV: `path,h,log_r_lo,log_r_hi,closure_lo,closure_hi,depth_used`.
pub fn write_resistance_csv<W: Write>(
    rows: &[(VertexId, ResistanceInterval)],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "path,h,log_r_lo,log_r_hi,closure_lo,closure_hi,depth_used")?;
    for (v, iv) in rows {
        let path: Vec<String> = v.path().iter().map(|i| i.to_string()).collect();
        writeln!(
            out,
            "{},{},{:.17e},{:.17e},{},{},{}",
            path.join("."),
            v.height(),
            iv.log_lo,
            iv.log_hi,
            iv.closure_lo.as_str(),
            iv.closure_hi.as_str(),
            iv.depth_used
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::OffspringDistribution;

    fn regular(b: u32) -> Branching {
        Branching::galton_watson(OffspringDistribution::regular(b).unwrap(), 0)
    }

    fn tight() -> ResistancePolicy {
        ResistancePolicy {
            target_gap: 1e-13,
            ..Default::default()
        }
    }

    #[test]
    fn conductance_values() {
        assert_eq!(conductance(1.0, 17), 1.0);
        assert!((conductance(2.0, 3) - 0.125).abs() < 1e-15);
        assert!((log_conductance(0.5, 60) - 60.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn regular_fixed_points() {
        for (b, lambda, want) in [(2, 0.5, 2.0 / 3.0), (2, 1.0, 1.0), (2, 1.5, 2.0), (3, 1.0, 0.5)] {
            let mut net = Network::new(regular(b), lambda, tight()).unwrap();
            let iv = net.resistance(net.root());
            assert!((iv.mid() - want).abs() < 1e-10, "b={b} lambda={lambda}: {iv:?}");
            assert!(!iv.capped);
        }
    }

    #[test]
    fn regular_shortcut_matches_full_recursion() {
        let br = regular(2);
        for depth in 1..8 {
            for frontier in [0.0, 0.7, 2.0] {
                let fast = resistance_fixed_depth(&br, br.root(), 0.8, depth, frontier);
                let mut want = frontier;
                for _ in 0..depth {
                    want = 1.0 / (2.0 / (1.0 + 0.8 * want));
                }
                assert!((fast - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_level_parallel() {
        // two unit resistors in parallel
        let br = regular(2);
        assert!((resistance_fixed_depth(&br, br.root(), 1.0, 1, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bracket_orders_and_tightens() {
        let law = OffspringDistribution::parse("pmf:1=0.5,2=0.5").unwrap();
        let br = Branching::galton_watson(law, 11);
        let lambda = 0.7;
        let mut prev_lo = 0.0;
        let mut prev_gap = f64::INFINITY;
        for depth in 1..14 {
            let lo = resistance_fixed_depth(&br, br.root(), lambda, depth, 0.0);
            let hi = resistance_fixed_depth(&br, br.root(), lambda, depth, 1.0 / (1.0 - lambda));
            assert!(lo <= hi);
            assert!(lo >= prev_lo, "grounded value decreased at depth {depth}");
            assert!(hi <= 1.0 / (1.0 - lambda) + 1e-12);
            assert!(hi - lo <= prev_gap);
            prev_lo = lo;
            prev_gap = hi - lo;
        }
        assert!(prev_gap < 0.05);
    }

    #[test]
    fn escape_identity() {
        assert!((escape_probability(1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((escape_probability(2.0 / 3.0, 0.5) - 0.75).abs() < 1e-15);
        assert!(escape_probability(1e300, 1.0) < 1e-299);
    }

    #[test]
    fn non_transient_rejected() {
        assert!(matches!(
            Network::new(regular(2), 2.0, Default::default()),
            Err(Error::NonTransient { .. })
        ));
        assert!(Network::new(regular(2), 0.0, Default::default()).is_err());
    }

    #[test]
    fn binary_flow_is_symmetric() {
        for lambda in [0.3, 1.0, 1.7] {
            let tree = LazyTree::from_branching(regular(2));
            let f = harmonic_flow(&tree, &VertexId::root(), lambda, tight(), 1e-9).unwrap();
            assert_eq!(f.masses.len(), 2);
            assert!((f.masses[0] - 0.5).abs() < 1e-12);
            assert!((f.masses[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_root_flow() {
        let br = Branching::parse("splice:pmf:2=1;pmf:3=1", 0).unwrap();
        let tree = LazyTree::from_branching(br);
        let f = harmonic_flow(&tree, &VertexId::root(), 1.0, tight(), 1e-9).unwrap();
        assert!((f.masses[0] - 3.0 / 7.0).abs() < 1e-10);
        assert!((f.masses[1] - 4.0 / 7.0).abs() < 1e-10);
        let below = harmonic_flow(&tree, &VertexId::from_path(vec![2]), 1.0, tight(), 1e-9).unwrap();
        assert!((below.parent_mass - 4.0 / 7.0).abs() < 1e-10);
        let s: f64 = below.masses.iter().sum();
        assert!((s - below.parent_mass).abs() < 1e-12);
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        let mut net = Network::new(Branching::parse("pmf:1=0.5,2=0.5", 3).unwrap(), 0.5, tight())
            .unwrap();
        let iv = net.resistance(net.root());
        let mut exact = Network::new(regular(2), 0.5, tight()).unwrap();
        let jv = exact.resistance(exact.root());
        write_resistance_csv(&[(VertexId::root(), iv), (VertexId::root(), jv)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "path,h,log_r_lo,log_r_hi,closure_lo,closure_hi,depth_used"
        );
        assert!(lines.next().unwrap().contains(",grounded,deterministic-bound,"));
        assert!(lines.next().unwrap().ends_with(",exact,exact,0"));
    }
}
