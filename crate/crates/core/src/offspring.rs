//! Offspring laws for supercritical Galton-Watson trees without leaves.
//!
//! Text grammar:
//!
//! * `pmf:k1=w1,k2=w2,...` with every `k >= 1` and weights summing to 1
//!   (within `1e-12`; the weights are renormalized afterwards).
//! * `geom:q` with `0 < q < 1`, the shifted geometric law
//!   `p_k = (1 - q) q^(k-1)` on `k >= 1`.
//!
//! Sampling is by inversion of a uniform in `[0, 1)`: binary search on the
//! cumulative table for explicit pmfs, and the closed-form inverse CDF for
//! the geometric law (no truncation of the support).

use std::fmt;
use std::str::FromStr;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
enum Law {
    Pmf {
        /// `(k, p_k)` sorted by `k`, all `p_k > 0`.
        atoms: Vec<(u32, f64)>,
        cdf: Vec<f64>,
    },
    Geometric {
        q: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffspringDistribution {
    law: Law,
    mean: f64,
}

impl OffspringDistribution {
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if let Some(body) = spec.strip_prefix("pmf:") {
            let mut atoms = Vec::new();
            for item in body.split(',') {
                let item = item.trim();
                let (k, w) = item.split_once('=').ok_or_else(|| {
                    Error::InvalidOffspring(format!("expected k=w, got {item:?}"))
                })?;
                let k: u32 = k.trim().parse().map_err(|_| {
                    Error::InvalidOffspring(format!("bad child count {k:?}"))
                })?;
                let w: f64 = w
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidOffspring(format!("bad weight {w:?}")))?;
                atoms.push((k, w));
            }
            Self::from_pmf(&atoms)
        } else if let Some(body) = spec.strip_prefix("geom:") {
            let q: f64 = body
                .trim()
                .parse()
                .map_err(|_| Error::InvalidOffspring(format!("bad geometric parameter {body:?}")))?;
            Self::geometric(q)
        } else {
            Err(Error::InvalidOffspring(format!(
                "unknown form {spec:?} (expected pmf:... or geom:q)"
            )))
        }
    }

    pub fn from_pmf(atoms: &[(u32, f64)]) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidOffspring("empty pmf".into()));
        }
        let mut sorted: Vec<(u32, f64)> = Vec::with_capacity(atoms.len());
        for &(k, w) in atoms {
            if k == 0 {
                return Err(Error::InvalidOffspring(
                    "k=0 entry: trees must not have leaves (p_0 = 0)".into(),
                ));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidOffspring(format!(
                    "weight for k={k} must be positive, got {w}"
                )));
            }
            if sorted.iter().any(|&(j, _)| j == k) {
                return Err(Error::InvalidOffspring(format!("duplicate entry k={k}")));
            }
            sorted.push((k, w));
        }
        sorted.sort_by_key(|&(k, _)| k);
        let total: f64 = sorted.iter().map(|&(_, w)| w).sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidOffspring(format!(
                "weights sum to {total}, not 1"
            )));
        }
        for a in &mut sorted {
            a.1 /= total;
        }
        if sorted.len() == 1 && sorted[0].0 == 1 {
            return Err(Error::InvalidOffspring("p_1 = 1 is excluded".into()));
        }
        let mean: f64 = sorted.iter().map(|&(k, p)| k as f64 * p).sum();
        if !(mean > 1.0) {
            return Err(Error::InvalidOffspring(format!(
                "mean {mean} must exceed 1"
            )));
        }
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = sorted
            .iter()
            .map(|&(_, p)| {
                acc += p;
                acc
            })
            .collect();
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Self {
            law: Law::Pmf { atoms: sorted, cdf },
            mean,
        })
    }

    pub fn geometric(q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidOffspring(format!(
                "geometric parameter must lie in (0,1), got {q}"
            )));
        }
        Ok(Self {
            law: Law::Geometric { q },
            mean: 1.0 / (1.0 - q),
        })
    }

    /// Deterministic `b`-ary law `p_b = 1`.
    pub fn regular(b: u32) -> Result<Self> {
        Self::from_pmf(&[(b, 1.0)])
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// `p_k`; zero outside the support.
    pub fn prob(&self, k: u32) -> f64 {
        match &self.law {
            Law::Pmf { atoms, .. } => atoms
                .iter()
                .find(|&&(j, _)| j == k)
                .map_or(0.0, |&(_, p)| p),
            Law::Geometric { q } => {
                if k == 0 {
                    0.0
                } else {
                    (1.0 - q) * q.powi(k as i32 - 1)
                }
            }
        }
    }

    /// The constant child count when the law is a point mass.
    pub fn degenerate(&self) -> Option<u32> {
        match &self.law {
            Law::Pmf { atoms, .. } if atoms.len() == 1 => Some(atoms[0].0),
            _ => None,
        }
    }

    pub fn max_children(&self) -> Option<u32> {
        match &self.law {
            Law::Pmf { atoms, .. } => atoms.last().map(|a| a.0),
            Law::Geometric { .. } => None,
        }
    }

    /// Inverse-CDF sample from a uniform `u` in `[0, 1)`.
    pub fn sample_from_uniform(&self, u: f64) -> u32 {
        match &self.law {
            Law::Pmf { atoms, cdf } => {
                let idx = cdf.partition_point(|&c| c <= u).min(atoms.len() - 1);
                atoms[idx].0
            }
            Law::Geometric { q } => {
                let k = ((1.0 - u).ln() / q.ln()).floor();
                if k >= (u32::MAX - 1) as f64 {
                    u32::MAX
                } else {
                    1 + k as u32
                }
            }
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        self.sample_from_uniform(rng.gen::<f64>())
    }
}

impl fmt::Display for OffspringDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.law {
            Law::Pmf { atoms, .. } => {
                write!(f, "pmf:")?;
                for (i, (k, p)) in atoms.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{k}={p}")?;
                }
                Ok(())
            }
            Law::Geometric { q } => write!(f, "geom:{q}"),
        }
    }
}

impl FromStr for OffspringDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl Serialize for OffspringDistribution {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}
