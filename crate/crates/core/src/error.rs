use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid offspring spec: {0}")]
    InvalidOffspring(String),

    #[error("invalid vertex {path:?}: {reason}")]
    InvalidVertex { path: Vec<u32>, reason: String },

    #[error("walk is not transient: lambda={lambda} >= mean offspring {mean}")]
    NonTransient { lambda: f64, mean: f64 },

    #[error("vertex cap of {cap} exceeded while expanding the tree")]
    VertexCapExceeded { cap: usize },

    #[error("profile too short: {needed} levels needed, {available} available")]
    ProfileTooShort { needed: usize, available: usize },

    #[error("time {t} too small for depth {depth}: mass {mass:.3e} left inside the unresolved cell")]
    TimeTooSmall { t: f64, depth: usize, mass: f64 },

    #[error("shell distribution under-resolved: residual {residual:.3e} > {tolerance:.1e}; try M >= {suggested}")]
    UnderResolved {
        residual: f64,
        tolerance: f64,
        suggested: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("singular linear system in resistance oracle")]
    Singular,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Stable machine-readable code used by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidOffspring(_) => "invalid_offspring",
            Error::InvalidVertex { .. } => "invalid_vertex",
            Error::NonTransient { .. } => "non_transient",
            Error::VertexCapExceeded { .. } => "vertex_cap",
            Error::ProfileTooShort { .. } => "profile_too_short",
            Error::TimeTooSmall { .. } => "time_too_small",
            Error::UnderResolved { .. } => "under_resolved",
            Error::Numerical(_) => "numerical",
            Error::Singular => "singular",
            Error::InvalidArgument(_) => "invalid_argument",
        }
    }

    /// True for errors that signal missing resolution rather than bad input.
    pub fn is_resolution(&self) -> bool {
        matches!(
            self,
            Error::ProfileTooShort { .. }
                | Error::TimeTooSmall { .. }
                | Error::UnderResolved { .. }
                | Error::VertexCapExceeded { .. }
        )
    }
}
