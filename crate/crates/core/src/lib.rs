//! Lambda-biased random walks on supercritical Galton-Watson trees and the
//! jump processes they induce on the tree boundary.
//!
//! * [`offspring`] and [`tree`]: offspring laws and lazily grown,
//!   reproducibly seeded trees addressed by child-index paths.
//! * [`electric`]: effective resistance to infinity, escape probabilities and
//!   the current-flow form of harmonic measure.
//! * [`boundary`]: rays sampled from harmonic measure, cylinder masses and the
//!   intrinsic metric along them.
//! * [`heat`]: the explicit boundary heat kernel, shell laws of the jump
//!   process, displacement moments and an exact grid-time sampler.
//! * [`walk`]: direct simulation of the biased walk as an independent oracle.
//! * [`estimators`]: ergodic dimension and resistance-growth estimates,
//!   log-log fits and exponent scans.

pub mod boundary;
pub mod electric;
pub mod error;
pub mod estimators;
pub mod heat;
pub mod offspring;
pub mod tree;
pub mod walk;

pub use error::{Error, Result};
pub use offspring::OffspringDistribution;
pub use tree::{Branching, LazyTree, VertexId};
