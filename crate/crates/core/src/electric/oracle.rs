//! Effective resistance by a direct solve of the weighted graph Laplacian.
//!
//! Shares nothing with the recursion in the parent module: the truncated tree
//! is assembled as a conductance matrix with one terminal node that collects
//! every frontier closure, the terminal is grounded, a unit current is
//! injected at the root, and the root potential is the resistance.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tree::{FiniteTree, VertexId};

/// Largest system the oracle will assemble.
pub const ORACLE_VERTEX_CAP: usize = 4096;

/// Normalized terminal resistance of each frontier vertex.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleClosure {
    /// Frontier shorted to the terminal.
    Grounded,
    Uniform(f64),
    Map(HashMap<VertexId, f64>),
}

impl OracleClosure {
    fn value(&self, v: &VertexId) -> Result<f64> {
        match self {
            OracleClosure::Grounded => Ok(0.0),
            OracleClosure::Uniform(r) => Ok(*r),
            OracleClosure::Map(m) => m.get(v).copied().ok_or_else(|| {
                Error::InvalidArgument(format!("no closure value for frontier vertex {v}"))
            }),
        }
    }
}

/// Original-scale effective resistance from the root to the terminal, which
/// for the root equals the normalized value.
pub fn resistance_oracle(ft: &FiniteTree, lambda: f64, closure: &OracleClosure) -> Result<f64> {
    if ft.len() > ORACLE_VERTEX_CAP {
        return Err(Error::VertexCapExceeded {
            cap: ORACLE_VERTEX_CAP,
        });
    }
    if ft.depth == 0 {
        return closure.value(&VertexId::root());
    }
    let depth = ft.depth;
    // unknown potentials: every vertex except shorted frontier vertices
    let mut index: HashMap<&VertexId, usize> = HashMap::new();
    let mut terminal_r: HashMap<&VertexId, f64> = HashMap::new();
    for v in &ft.vertices {
        if v.path.height() == depth {
            let r = closure.value(&v.path)?;
            if r < 0.0 {
                return Err(Error::InvalidArgument("negative closure resistance".into()));
            }
            if r == 0.0 {
                continue;
            }
            terminal_r.insert(&v.path, r);
        }
        let next = index.len();
        index.insert(&v.path, next);
    }
    let n = index.len();
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for v in &ft.vertices {
        let h = v.path.height();
        let Some(parent) = v.path.parent() else {
            continue;
        };
        // edge from level h-1 to h
        let g = lambda.powi(-(h as i32 - 1));
        let pi = index[&parent];
        lap[(pi, pi)] += g;
        if let Some(&ci) = index.get(&v.path) {
            lap[(ci, ci)] += g;
            lap[(pi, ci)] -= g;
            lap[(ci, pi)] -= g;
        }
    }
    for (v, r) in terminal_r {
        // frontier closure in original scale
        let g = 1.0 / (lambda.powi(depth as i32) * r);
        let i = index[v];
        lap[(i, i)] += g;
    }
    let root = index[&VertexId::root()];
    let mut rhs = DVector::<f64>::zeros(n);
    rhs[root] = 1.0;
    let chol = lap.cholesky().ok_or(Error::Singular)?;
    let phi = chol.solve(&rhs);
    Ok(phi[root])
}
