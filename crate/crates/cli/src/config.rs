//! Run configuration: a plain `key=value` file (one pair per line, `#`
//! starts a comment) overridden by command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gwheat::electric::ResistancePolicy;
use gwheat::{Branching, Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Every key the config file accepts, in canonical order.
pub const KEYS: &[&str] = &[
    "offspring",
    "lambda",
    "seed",
    "depth",
    "gap",
    "max_depth",
    "vertex_budget",
    "shell_tol",
    "levels",
    "replicates",
    "walks",
    "outer",
    "inner",
    "tmin",
    "tmax",
    "tpoints",
    "gamma",
    "out",
    "workers",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub offspring: Option<String>,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub depth: Option<usize>,
    pub gap: f64,
    pub max_depth: usize,
    pub vertex_budget: usize,
    pub shell_tol: f64,
    pub levels: usize,
    pub replicates: usize,
    pub walks: usize,
    pub outer: usize,
    pub inner: usize,
    pub tmin: f64,
    pub tmax: f64,
    pub tpoints: usize,
    pub gamma: Vec<f64>,
    pub out: PathBuf,
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let policy = ResistancePolicy::default();
        Self {
            offspring: None,
            lambda: None,
            seed: 0,
            depth: None,
            gap: policy.target_gap,
            max_depth: policy.max_depth,
            vertex_budget: policy.vertex_budget,
            shell_tol: 1e-10,
            levels: 120,
            replicates: 20,
            walks: 100_000,
            outer: 2000,
            inner: 200,
            tmin: 1e-8,
            tmax: 1e-3,
            tpoints: 40,
            gamma: vec![0.3, 1.0, 2.0],
            out: PathBuf::from("out"),
            workers: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value for {key}: {value:?}")))
}

impl RunConfig {
    /// Applies one `key=value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "offspring" => self.offspring = Some(v.to_string()),
            "lambda" => self.lambda = Some(parse_num(key, v)?),
            "seed" => self.seed = parse_num(key, v)?,
            "depth" => self.depth = Some(parse_num(key, v)?),
            "gap" => self.gap = parse_num(key, v)?,
            "max_depth" => self.max_depth = parse_num(key, v)?,
            "vertex_budget" => self.vertex_budget = parse_num(key, v)?,
            "shell_tol" => self.shell_tol = parse_num(key, v)?,
            "levels" => self.levels = parse_num(key, v)?,
            "replicates" => self.replicates = parse_num(key, v)?,
            "walks" => self.walks = parse_num(key, v)?,
            "outer" => self.outer = parse_num(key, v)?,
            "inner" => self.inner = parse_num(key, v)?,
            "tmin" => self.tmin = parse_num(key, v)?,
            "tmax" => self.tmax = parse_num(key, v)?,
            "tpoints" => self.tpoints = parse_num(key, v)?,
            "gamma" => {
                self.gamma = v
                    .split(',')
                    .map(|g| parse_num(key, g))
                    .collect::<Result<_>>()?
            }
            "out" => self.out = PathBuf::from(v),
            "workers" => self.workers = Some(parse_num(key, v)?),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key {key:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn parse_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {}: expected key=value", i + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
        self.parse_text(&text)
    }

    /// Canonical `key=value` text; loading it reproduces this config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        if let Some(o) = &self.offspring {
            put("offspring", o.clone());
        }
        if let Some(l) = self.lambda {
            put("lambda", format!("{l:?}"));
        }
        put("seed", self.seed.to_string());
        if let Some(d) = self.depth {
            put("depth", d.to_string());
        }
        put("gap", format!("{:?}", self.gap));
        put("max_depth", self.max_depth.to_string());
        put("vertex_budget", self.vertex_budget.to_string());
        put("shell_tol", format!("{:?}", self.shell_tol));
        put("levels", self.levels.to_string());
        put("replicates", self.replicates.to_string());
        put("walks", self.walks.to_string());
        put("outer", self.outer.to_string());
        put("inner", self.inner.to_string());
        put("tmin", format!("{:?}", self.tmin));
        put("tmax", format!("{:?}", self.tmax));
        put("tpoints", self.tpoints.to_string());
        put(
            "gamma",
            self.gamma.iter().map(|g| format!("{g:?}")).collect::<Vec<_>>().join(","),
        );
        put("out", self.out.display().to_string());
        s
    }

    /// SHA-256 of the canonical text, excluding `out` and `workers`, which
    /// do not affect results.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("out="))
            .map(|l| format!("{l}\n"))
            .collect();
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn require_lambda(&self) -> Result<f64> {
        let l = self
            .lambda
            .ok_or_else(|| Error::InvalidArgument("missing required key: lambda".into()))?;
        if !(l > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {l}")));
        }
        Ok(l)
    }

    pub fn branching(&self) -> Result<Branching> {
        let spec = self
            .offspring
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("missing required key: offspring".into()))?;
        Branching::parse(spec, self.seed)
    }

    pub fn require_depth(&self) -> Result<usize> {
        self.depth
            .ok_or_else(|| Error::InvalidArgument("missing required key: depth".into()))
    }

    pub fn policy(&self) -> Result<ResistancePolicy> {
        if !(self.gap > 0.0) {
            return Err(Error::InvalidArgument(format!("gap must be positive, got {}", self.gap)));
        }
        Ok(ResistancePolicy {
            target_gap: self.gap,
            max_depth: self.max_depth,
            vertex_budget: self.vertex_budget,
        })
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        gwheat::estimators::log_grid(self.tmin, self.tmax, self.tpoints)
    }

    pub fn gammas(&self) -> Result<&[f64]> {
        if self.gamma.is_empty() || self.gamma.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::InvalidArgument("gamma values must be positive".into()));
        }
        Ok(&self.gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let mut c = RunConfig::default();
        c.parse_text("# fixture\noffspring = pmf:2=1\nlambda=1.5  # bias\n\ngamma=0.5,2\n")
            .unwrap();
        assert_eq!(c.lambda, Some(1.5));
        assert_eq!(c.gamma, vec![0.5, 2.0]);
        c.set("lambda", "0.5").unwrap();
        assert_eq!(c.lambda, Some(0.5));
        assert!(c.parse_text("nonsense").is_err());
        assert!(c.set("colour", "red").is_err());
        assert!(c.set("lambda", "x").is_err());
    }

    #[test]
    fn round_trip_and_hash() {
        let mut c = RunConfig::default();
        c.set("offspring", "geom:0.5").unwrap();
        c.set("lambda", "0.8").unwrap();
        let mut d = RunConfig::default();
        d.parse_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert_eq!(c.hash(), d.hash());
        d.set("out", "elsewhere").unwrap();
        assert_eq!(c.hash(), d.hash());
        d.set("seed", "3").unwrap();
        assert_ne!(c.hash(), d.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn missing_lambda_named() {
        let e = RunConfig::default().require_lambda().unwrap_err();
        assert!(e.to_string().contains("lambda"));
    }
}
