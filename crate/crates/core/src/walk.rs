//! Direct simulation of the lambda-biased walk on a lazy tree.
//!
//! From a vertex with `k` children the walk moves to the parent with
//! probability `lambda / (lambda + k)` and to each child with `1 / (lambda + k)`.
//! At the root it picks a child uniformly unless an extra root sits above it,
//! in which case the root behaves like any other vertex.
//!
//! Every walk draws from its own stream seeded by `derive_seed(seed, index)`,
//! so results do not depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::electric::{escape_probability, BiasConfig, Network, ResistancePolicy};
use crate::error::{Error, Result};
use crate::tree::{derive_seed, Branching, Node, VertexId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WalkConfig {
    pub lambda: f64,
    /// Stop at the first visit to this level (0 disables).
    pub exit_level: usize,
    pub max_steps: u64,
    /// Attach an extra root above the root; hitting it ends the walk.
    pub extra_root: bool,
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.exit_level == 0 && self.max_steps == 0 {
            return Err(Error::InvalidArgument(
                "walk needs an exit level or a step budget".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum WalkOutcome {
    Exited { vertex: VertexId, steps: u64 },
    Stopped { steps: u64 },
    Returned { steps: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Up,
    Down(u32),
    /// Stepped from the root onto the extra root.
    Out,
}

/// Current position of a walk as the stack of vertices from the root.
#[derive(Debug, Clone)]
pub struct WalkState {
    nodes: Vec<Node>,
    path: Vec<u32>,
}

impl WalkState {
    pub fn at_root(br: &Branching) -> Self {
        Self {
            nodes: vec![br.root()],
            path: Vec::new(),
        }
    }

    pub fn level(&self) -> usize {
        self.path.len()
    }

    pub fn vertex(&self) -> VertexId {
        VertexId::from_path(self.path.clone())
    }

    fn current(&self) -> Node {
        *self.nodes.last().unwrap()
    }

    /// One transition. After `Move::Out` the state is left at the root.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        br: &Branching,
        lambda: f64,
        extra_root: bool,
        rng: &mut R,
    ) -> Move {
        let node = self.current();
        let k = br.child_count(node);
        let has_parent = !self.path.is_empty() || extra_root;
        let u: f64 = rng.gen();
        let pick_child = |u: f64| ((u * k as f64) as u32).min(k - 1) + 1;
        if !has_parent {
            let i = pick_child(u);
            self.descend(br, node, i);
            return Move::Down(i);
        }
        let total = lambda + k as f64;
        let x = u * total;
        if x < lambda {
            if self.path.is_empty() {
                return Move::Out;
            }
            self.path.pop();
            self.nodes.pop();
            Move::Up
        } else {
            let i = (((x - lambda) as u32).min(k - 1)) + 1;
            self.descend(br, node, i);
            Move::Down(i)
        }
    }

    fn descend(&mut self, br: &Branching, node: Node, i: u32) {
        self.nodes.push(br.child(node, i));
        self.path.push(i);
    }
}

pub fn run_walk<R: Rng + ?Sized>(br: &Branching, cfg: &WalkConfig, rng: &mut R) -> Result<WalkOutcome> {
    cfg.validate()?;
    let mut state = WalkState::at_root(br);
    let budget = if cfg.max_steps == 0 { u64::MAX } else { cfg.max_steps };
    let mut steps = 0;
    while steps < budget {
        let mv = state.step(br, cfg.lambda, cfg.extra_root, rng);
        steps += 1;
        if mv == Move::Out {
            return Ok(WalkOutcome::Returned { steps });
        }
        if cfg.exit_level > 0 && state.level() == cfg.exit_level {
            return Ok(WalkOutcome::Exited {
                vertex: state.vertex(),
                steps,
            });
        }
    }
    Ok(WalkOutcome::Stopped { steps })
}

/// Runs `n` independent walks, walk `i` seeded by `derive_seed(seed, i)`;
/// outcomes come back in index order.
pub fn run_walks(br: &Branching, cfg: &WalkConfig, n: usize, seed: u64) -> Result<Vec<WalkOutcome>> {
    cfg.validate()?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i));
            run_walk(br, cfg, &mut rng)
        })
        .collect()
}

/// Extra levels walked below the binning depth before a walk counts as
/// settled in its cylinder.
pub const SETTLE_LEVELS: usize = 30;
pub const DEFAULT_MAX_STEPS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HarmonicEstimate {
    pub depth: usize,
    pub exit_level: usize,
    pub cylinders: Vec<VertexId>,
    pub counts: Vec<u64>,
    pub frequencies: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n: usize,
    pub stopped_fraction: f64,
    /// Largest probability, over a few sampled exit vertices, of climbing
    /// back out of the binning cylinder afterwards.
    pub leak_bound: f64,
    pub seed: u64,
}

/// Depth-`depth` vertices in lexicographic order.
fn level_vertices(br: &Branching, depth: usize) -> Vec<VertexId> {
    let mut level = vec![(VertexId::root(), br.root())];
    for _ in 0..depth {
        level = level
            .into_iter()
            .flat_map(|(id, node)| {
                (1..=br.child_count(node)).map(move |i| (id.child(i), br.child(node, i)))
            })
            .collect();
    }
    level.into_iter().map(|(id, _)| id).collect()
}

/// Probability that a walk started at `v` ever climbs to level `level`:
/// the product of `1 - alpha` over the vertices strictly below `level`.
pub fn climb_probability(net: &mut Network, v: &VertexId, level: usize) -> Result<f64> {
    let br = net.branching().clone();
    let mut node = br.root();
    let mut p = 1.0;
    for (h, &i) in v.path().iter().enumerate() {
        node = br.child(node, i);
        if h + 1 > level {
            let r = net.resistance(node).mid();
            p *= 1.0 - escape_probability(r, net.lambda());
        }
    }
    Ok(p)
}

/// Exit-cylinder frequencies at depth `depth`, settling at `depth + SETTLE_LEVELS`.
pub fn mc_harmonic(
    br: &Branching,
    lambda: f64,
    depth: usize,
    n_walks: usize,
    seed: u64,
) -> Result<HarmonicEstimate> {
    BiasConfig::new(lambda, br.mean())?.require_transient()?;
    if n_walks == 0 {
        return Err(Error::InvalidArgument("need at least one walk".into()));
    }
    let exit_level = depth + SETTLE_LEVELS;
    let cfg = WalkConfig {
        lambda,
        exit_level,
        max_steps: DEFAULT_MAX_STEPS,
        extra_root: false,
    };
    let outcomes = run_walks(br, &cfg, n_walks, seed)?;
    let cylinders = level_vertices(br, depth);
    let mut counts = vec![0u64; cylinders.len()];
    let mut stopped = 0usize;
    let mut sample_exits = Vec::new();
    for o in &outcomes {
        match o {
            WalkOutcome::Exited { vertex, .. } => {
                let cyl = vertex.prefix(depth);
                let i = cylinders.binary_search(&cyl).expect("exit below a known cylinder");
                counts[i] += 1;
                if sample_exits.len() < 8 {
                    sample_exits.push(vertex.clone());
                }
            }
            _ => stopped += 1,
        }
    }
    let settled = (n_walks - stopped) as f64;
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / settled).collect();
    let stderr = frequencies
        .iter()
        .map(|p| (p * (1.0 - p) / settled).sqrt())
        .collect();
    let mut net = Network::new(
        br.clone(),
        lambda,
        ResistancePolicy {
            target_gap: 1e-3,
            ..Default::default()
        },
    )?;
    let mut leak_bound: f64 = 0.0;
    for v in &sample_exits {
        leak_bound = leak_bound.max(climb_probability(&mut net, v, depth.saturating_sub(1))?);
    }
    Ok(HarmonicEstimate {
        depth,
        exit_level,
        cylinders,
        counts,
        frequencies,
        stderr,
        n: n_walks,
        stopped_fraction: stopped as f64 / n_walks as f64,
        leak_bound,
        seed,
    })
}

/// Summary shared by the Monte Carlo oracles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McSummary {
    pub estimate: f64,
    pub stderr: f64,
    pub n: usize,
    pub censored_fraction: f64,
    pub seed: u64,
}

/// Censoring above this fraction is flagged.
pub const CENSOR_WARN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EscapeEstimate {
    #[serde(flatten)]
    pub summary: McSummary,
    pub escape_level: usize,
    pub flagged: bool,
}

/// Fraction of walks from the root of the extended tree that reach
/// `escape_level` before touching the extra root, among walks that did
/// either within `budget` steps.
pub fn mc_escape(
    br: &Branching,
    lambda: f64,
    escape_level: usize,
    n_walks: usize,
    budget: u64,
    seed: u64,
) -> Result<EscapeEstimate> {
    BiasConfig::new(lambda, br.mean())?.require_transient()?;
    if n_walks == 0 || escape_level == 0 {
        return Err(Error::InvalidArgument(
            "need at least one walk and a positive escape level".into(),
        ));
    }
    let cfg = WalkConfig {
        lambda,
        exit_level: escape_level,
        max_steps: budget,
        extra_root: true,
    };
    let outcomes = run_walks(br, &cfg, n_walks, seed)?;
    let (mut escaped, mut censored) = (0usize, 0usize);
    for o in &outcomes {
        match o {
            WalkOutcome::Exited { .. } => escaped += 1,
            WalkOutcome::Stopped { .. } => censored += 1,
            WalkOutcome::Returned { .. } => {}
        }
    }
    let resolved = (n_walks - censored).max(1) as f64;
    let p = escaped as f64 / resolved;
    let censored_fraction = censored as f64 / n_walks as f64;
    Ok(EscapeEstimate {
        summary: McSummary {
            estimate: p,
            stderr: (p * (1.0 - p) / resolved).sqrt(),
            n: n_walks,
            censored_fraction,
            seed,
        },
        escape_level,
        flagged: censored_fraction > CENSOR_WARN,
    })
}
