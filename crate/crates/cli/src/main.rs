mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gwheat::boundary::{ball_to_cylinder, meet_level, sample_ray_in, RayProfile};
use gwheat::electric::{escape_probability, harmonic_flow_in, write_resistance_csv, Network};
use gwheat::estimators::{
    beta_from_rays, beta_stationary, displacement_scan, heat_exponent_scan, resistance_exponent_from_rays,
    sample_rays, EstimatorReport, ExponentEstimate, ExponentTargets, ReportTargets, MOMENT_TOL,
};
use gwheat::heat::{
    diag_lower_bound, moments, offdiag_upper_bound, p_diag, p_offdiag, sample_trajectory, verify_ck,
    verify_mass, write_curve_csv, write_trajectory_jsonl, KernelValue, Metric, TrajectoryConfig,
};
use gwheat::tree::derive_seed;
use gwheat::walk::{mc_escape, mc_harmonic, DEFAULT_MAX_STEPS};
use gwheat::{Error, LazyTree, VertexId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "gwheat", version, about = "Biased walks, harmonic measure and boundary heat kernels on Galton-Watson trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the tree to a given depth as JSON lines.
    GenTree(Flags),
    /// Resistance brackets for every vertex up to --depth.
    Resistance(Flags),
    /// Harmonic measure of every cylinder at --depth.
    Harmonic(Flags),
    /// Profile of one harmonic ray.
    Ray(Flags),
    /// Dimension of harmonic measure and resistance growth along rays.
    Beta(Flags),
    /// Diagonal heat kernel on the t grid.
    HeatDiag(Flags),
    /// Off-diagonal heat kernel at meet level --depth on the t grid.
    HeatOffdiag(Flags),
    /// Displacement moments in both metrics.
    Displacement(Flags),
    /// Fitted heat-kernel and displacement exponents against their targets.
    Exponents(Flags),
    /// Walk simulation against the flow and escape formulas.
    WalkOracle(Flags),
    /// Grid-time trajectories of the boundary process.
    XtSample(Flags),
    /// Kernel identities and bounds on one ray.
    Verify(Flags),
}

#[derive(Args, Clone, Default)]
struct Flags {
    #[arg(long)]
    offspring: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    gap: Option<String>,
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    replicates: Option<String>,
    #[arg(long)]
    tmin: Option<String>,
    #[arg(long)]
    tmax: Option<String>,
    #[arg(long)]
    tpoints: Option<String>,
    /// Comma-separated list.
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    /// key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Flags {
    fn resolve(&self) -> gwheat::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            cfg.load(p)?;
        }
        let pairs = [
            ("offspring", &self.offspring),
            ("lambda", &self.lambda),
            ("seed", &self.seed),
            ("depth", &self.depth),
            ("gap", &self.gap),
            ("levels", &self.levels),
            ("replicates", &self.replicates),
            ("tmin", &self.tmin),
            ("tmax", &self.tmax),
            ("tpoints", &self.tpoints),
            ("gamma", &self.gamma),
            ("out", &self.out),
            ("workers", &self.workers),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Io(std::io::Error),
    /// A check ran and failed.
    Diagnostic(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e {
                Error::InvalidOffspring(_)
                | Error::InvalidVertex { .. }
                | Error::NonTransient { .. }
                | Error::InvalidArgument(_) => 2,
                _ => 3,
            },
            CliError::Io(_) => 1,
            CliError::Diagnostic(_) => 3,
        }
    }

    fn report(&self) -> String {
        match self {
            CliError::Core(e) => format!("error[{}]: {e}", e.code()),
            CliError::Io(e) => format!("error[io]: {e}"),
            CliError::Diagnostic(m) => format!("error[diagnostic]: {m}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Output directory; every file written through it carries the config hash.
struct Output {
    dir: PathBuf,
    hash: String,
    files: Vec<String>,
}

impl Output {
    fn new(cfg: &RunConfig) -> CliResult<Self> {
        fs::create_dir_all(&cfg.out)?;
        Ok(Self {
            dir: cfg.out.clone(),
            hash: cfg.hash(),
            files: Vec::new(),
        })
    }

    fn create(&mut self, name: &str) -> CliResult<BufWriter<File>> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(path)?))
    }

    /// CSV with a leading `# config_hash=...` comment line.
    fn csv(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> CliResult<()> {
        let hash = self.hash.clone();
        let mut w = self.create(name)?;
        writeln!(w, "# config_hash={hash}")?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// JSON lines preceded by a `{"config_hash":...}` line.
    fn jsonl(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> CliResult<()> {
        let hash = self.hash.clone();
        let mut w = self.create(name)?;
        writeln!(w, "{}", json!({ "config_hash": hash }))?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Pretty JSON; objects gain a `config_hash` key.
    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut v = serde_json::to_value(value).map_err(|e| CliError::Io(e.into()))?;
        if let Value::Object(m) = &mut v {
            m.insert("config_hash".into(), Value::String(self.hash.clone()));
        }
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &v).map_err(|e| CliError::Io(e.into()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

fn network(cfg: &RunConfig) -> CliResult<Network> {
    let lambda = cfg.require_lambda()?;
    Ok(Network::new(cfg.branching()?, lambda, cfg.policy()?)?)
}

/// The harmonic ray every single-ray command starts from.
fn start_ray(cfg: &RunConfig, net: &mut Network) -> CliResult<RayProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    Ok(sample_ray_in(net, cfg.levels, &mut rng)?)
}

fn report(
    cfg: &RunConfig,
    name: &str,
    est: &ExponentEstimate,
    targets: Option<ExponentTargets>,
) -> EstimatorReport {
    EstimatorReport {
        estimator: name.to_string(),
        value: est.value,
        stderr: est.stderr,
        replicates: est.replicates,
        window: est.window,
        r2: est.r2,
        targets: targets.map(ReportTargets::from),
        seed: cfg.seed,
        config_hash: cfg.hash(),
    }
}

fn curve(rows: Vec<(f64, KernelValue)>, out: &mut Output, name: &str) -> CliResult<()> {
    out.csv(name, |w| write_curve_csv(&rows, w))
}

fn gen_tree(cfg: &RunConfig, out: &mut Output) -> CliResult<Value> {
    let depth = cfg.require_depth()?;
    let mut tree = LazyTree::from_branching(cfg.branching()?);
    let ft = tree.truncate(depth, cfg.vertex_budget)?;
    out.jsonl("tree.jsonl", |w| ft.write_jsonl(w))?;
    Ok(json!({ "vertices": ft.len(), "generation_sizes": ft.generation_sizes }))
}

fn resistance_cmd(cfg: &RunConfig, out: &mut Output) -> CliResult<Value> {
    let depth = cfg.depth.unwrap_or(0);
    let mut net = network(cfg)?;
    let mut tree = LazyTree::from_branching(cfg.branching()?);
    let ft = tree.truncate(depth, cfg.vertex_budget)?;
    let mut rows = Vec::with_capacity(ft.len());
    for v in &ft.vertices {
        let node = net.resolve(&v.path)?;
        rows.push((v.path.clone(), net.resistance(node)));
    }
    out.csv("resistance.csv", |w| write_resistance_csv(&rows, w))?;
    let root = rows[0].1;
    Ok(json!({ "root_lo": root.lo(), "root_hi": root.hi(), "warnings": net.take_warnings() }))
}

fn harmonic_cmd(cfg: &RunConfig, out: &mut Output) -> CliResult<Value> {
    let depth = cfg.depth.unwrap_or(1).max(1);
    let mut net = network(cfg)?;
    let mut tree = LazyTree::from_branching(cfg.branching()?);
    let ft = tree.truncate(depth - 1, cfg.vertex_budget)?;
    let mut rows = Vec::new();
    for v in ft.vertices.iter().filter(|v| v.path.height() == depth - 1) {
        let split = harmonic_flow_in(&mut net, &v.path, 1e-6)?;
        for (i, m) in split.masses.iter().enumerate() {
            rows.push((v.path.child(i as u32 + 1), *m, split.perturbation, split.flagged));
        }
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    let total: f64 = rows.iter().map(|r| r.1).sum();
    out.csv("harmonic.csv", |w| {
        writeln!(w, "path,mass,perturbation,flagged")?;
        for (p, m, pert, f) in &rows {
            writeln!(w, "{},{m:.17e},{pert:.3e},{f}", dotted(p))?;
        }
        Ok(())
    })?;
    Ok(json!({ "cylinders": rows.len(), "total_mass": total }))
}

fn dotted(v: &VertexId) -> String {
    v.path().iter().map(|i| i.to_string()).collect::<Vec<_>>().join(".")
}

fn ray_cmd(cfg: &RunConfig, out: &mut Output) -> CliResult<Value> {
    let mut net = network(cfg)?;
    let p = start_ray(cfg, &mut net)?;
    out.csv("ray.csv", |w| p.write_csv(w))?;
    Ok(json!({ "levels": p.levels(), "warnings": net.take_warnings() }))
}

fn beta_cmd(cfg: &RunConfig, out: &mut Output) -> CliResult<Value> {
    let lambda = cfg.require_lambda()?;
    let br = cfg.branching()?;
    let policy = cfg.policy()?;
    let rays = sample_rays(&br, lambda, cfg.levels, cfg.replicates, policy, cfg.seed)?;
    let beta = beta_from_rays(&rays)?;
    let slope = resistance_exponent_from_rays(&rays)?;
    let targets = ExponentTargets::new(beta.value, lambda).ok();
    out.json("beta.json", &report(cfg, "beta_ray", &beta, targets))?;
    out.json(
        "resistance_exponent.json",
        &report(cfg, "resistance_exponent", &slope, targets),
    )?;
    let stationary = beta_stationary(&br, lambda, cfg.outer, cfg.inner, policy, cfg.seed)?;
    out.json(
        "beta_stationary.json",
        &report(cfg, "beta_stationary", &stationary.estimate, targets),
    )?;
    Ok(json!({
        "beta_ray": beta.value,
        "beta_ray_stderr": beta.stderr,
        "beta_stationary": stationary.estimate.value,
        "beta_stationary_stderr": stationary.estimate.stderr,
        "resistance_exponent": slope.value,
    }))
}

fn heat_diag_cmd(cfg: &RunConfig, out: &mut Output) -> CliResult<Value> {
    let mut net = network(cfg)?;
    let p = start_ray(cfg, &mut net)?;
    let rows = cfg
        .grid()?
        .into_iter()
        .map(|t| Ok((t, p_diag(&p, t, cfg.shell_tol)?)))
        .collect::<gwheat::Result<Vec<_>>>()?;
    curve(rows, out, "heat_diag.csv")?;
    Ok(json!({ "levels": p.levels() }))
}

fn heat_offdiag_cmd(cfg: &RunConfig, out: &mut Output) -> CliResult<Value> {
    let meet = cfg.require_depth()?;
    let mut net = network(cfg)?;
    let p = start_ray(cfg, &mut net)?;
    let rows = cfg
        .grid()?
        .into_iter()
        .map(|t| Ok((t, p_offdiag(&p, meet, t)?)))
        .collect::<gwheat::Result<Vec<_>>>()?;
    curve(rows, out, "heat_offdiag.csv")?;
    Ok(json!({ "meet": meet }))
}

fn displacement_cmd(cfg: &RunConfig, out: &mut Output) -> CliResult<Value> {
    let mut net = network(cfg)?;
    let p = start_ray(cfg, &mut net)?;
    let grid = cfg.grid()?;
    let mut rows = Vec::new();
    for &g in cfg.gammas()? {
        for (metric, label) in [(Metric::Tree, "d"), (Metric::Intrinsic, "D")] {
            for &t in &grid {
                let m = moments(&p, t, g, metric, MOMENT_TOL)?;
                rows.push((t, g, label, m.value, m.upper));
            }
        }
    }
    out.csv("displacement.csv", |w| {
        writeln!(w, "t,gamma,metric,value,upper")?;
        for (t, g, m, v, u) in &rows {
            writeln!(w, "{t:.17e},{g},{m},{v:.17e},{u:.17e}")?;
        }
        Ok(())
    })?;
    Ok(json!({ "rows": rows.len() }))
}

fn exponents_cmd(cfg: &RunConfig, out: &mut Output) -> CliResult<Value> {
    let lambda = cfg.require_lambda()?;
    let br = cfg.branching()?;
    let rays = sample_rays(&br, lambda, cfg.levels, cfg.replicates, cfg.policy()?, cfg.seed)?;
    let beta = beta_from_rays(&rays)?;
    let targets = ExponentTargets::new(beta.value, lambda)?;
    let grid = cfg.grid()?;
    let meet = cfg.depth.unwrap_or(1);
    let p = &rays[0];
    let heat = heat_exponent_scan(p, &grid, meet, &targets)?;
    let disp_d = displacement_scan(p, cfg.gammas()?, &grid, Metric::Tree, &targets)?;
    let disp_big = displacement_scan(p, cfg.gammas()?, &grid, Metric::Intrinsic, &targets)?;
    let fit_report = |name: String, c: &gwheat::estimators::CurveFit| EstimatorReport {
        estimator: name,
        value: c.fit.slope,
        stderr: 0.0,
        replicates: 1,
        window: Some(c.fit.window),
        r2: Some(c.fit.r2),
        targets: Some(targets.into()),
        seed: cfg.seed,
        config_hash: cfg.hash(),
    };
    let mut reports = vec![
        report(cfg, "beta_ray", &beta, Some(targets)),
        fit_report("heat_diag_slope".into(), &heat.diagonal),
        fit_report(format!("heat_offdiag_slope_meet={meet}"), &heat.off_diagonal),
    ];
    for (g, c) in &disp_d {
        reports.push(fit_report(format!("displacement_d_gamma={g}"), c));
    }
    for (g, c) in &disp_big {
        reports.push(fit_report(format!("displacement_D_gamma={g}"), c));
    }
    out.json(
        "exponents.json",
        &json!({ "reports": reports, "targets": targets }),
    )?;
    out.json(
        "exponents_detail.json",
        &json!({ "heat": heat, "displacement_d": disp_d, "displacement_D": disp_big }),
    )?;
    Ok(json!({ "kappa_target": targets.kappa, "diag_slope": heat.diagonal.fit.slope }))
}

fn walk_oracle_cmd(cfg: &RunConfig, out: &mut Output) -> CliResult<Value> {
    let lambda = cfg.require_lambda()?;
    let br = cfg.branching()?;
    let depth = cfg.depth.unwrap_or(2);
    let est = mc_harmonic(&br, lambda, depth, cfg.walks, cfg.seed)?;
    let mut net = network(cfg)?;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, cyl) in est.cylinders.iter().enumerate() {
        let parent = cyl.parent().expect("cylinders below the root");
        let split = harmonic_flow_in(&mut net, &parent, 1e-6)?;
        let mass = split.masses[*cyl.path().last().unwrap() as usize - 1];
        let se = est.stderr[i].max(f64::MIN_POSITIVE);
        let z = (est.frequencies[i] - mass) / se;
        worst = worst.max(z.abs());
        rows.push((cyl.clone(), est.frequencies[i], est.stderr[i], mass, z));
    }
    out.csv("walk_harmonic.csv", |w| {
        writeln!(w, "path,walk_frequency,walk_stderr,flow_mass,z")?;
        for (p, f, s, m, z) in &rows {
            writeln!(w, "{},{f:.17e},{s:.17e},{m:.17e},{z:.4}", dotted(p))?;
        }
        Ok(())
    })?;
    let esc = mc_escape(&br, lambda, 40, cfg.walks, DEFAULT_MAX_STEPS, cfg.seed)?;
    let root = net.root();
    let iv = net.resistance(root);
    let exact = escape_probability(iv.mid(), lambda);
    let spread = (escape_probability(iv.lo(), lambda) - escape_probability(iv.hi(), lambda)).abs();
    let escape_ok = (esc.summary.estimate - exact).abs() <= 3.0 * esc.summary.stderr + spread;
    out.json(
        "walk_escape.json",
        &json!({
            "estimate": esc.summary.estimate,
            "stderr": esc.summary.stderr,
            "n": esc.summary.n,
            "censored_fraction": esc.summary.censored_fraction,
            "seed": esc.summary.seed,
            "flow_value": exact,
            "flagged": esc.flagged,
        }),
    )?;
    let summary = json!({ "max_abs_z": worst, "escape_ok": escape_ok, "leak_bound": est.leak_bound });
    if worst > 4.0 || !escape_ok {
        return Err(CliError::Diagnostic(format!("walk oracle disagrees: {summary}")));
    }
    Ok(summary)
}

fn xt_sample_cmd(cfg: &RunConfig, out: &mut Output) -> CliResult<Value> {
    let mut net = network(cfg)?;
    let start = start_ray(cfg, &mut net)?;
    let times = cfg.grid()?;
    let tc = TrajectoryConfig {
        report_depth: cfg.depth.unwrap_or(TrajectoryConfig::default().report_depth),
        ..Default::default()
    };
    for i in 0..cfg.replicates {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, 2), i as u64));
        let path = sample_trajectory(&mut net, &start, &times, &tc, &mut rng)?;
        out.jsonl(&format!("xt/trajectory_{i:04}.jsonl"), |w| write_trajectory_jsonl(&path, w))?;
    }
    Ok(json!({ "trajectories": cfg.replicates, "start": start.ray.prefix(tc.report_depth) }))
}

#[derive(Serialize)]
struct Check {
    name: String,
    value: f64,
    tolerance: f64,
    pass: bool,
}

fn verify_cmd(cfg: &RunConfig, out: &mut Output) -> CliResult<Value> {
    let depth = cfg.depth.unwrap_or(12);
    let mut net = network(cfg)?;
    let mut p = start_ray(cfg, &mut net)?;
    let regular = net.branching().regular_subtree(net.root()).is_some();
    let mut checks = Vec::new();
    let mut push = |name: &str, value: f64, tolerance: f64| {
        checks.push(Check {
            name: name.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        })
    };
    let mass_tol = if regular { 1e-8 } else { 1e-6 };
    let m = verify_mass(&mut net, &p, 1.0, depth)?;
    push("mass_defect_t1", m.defect, mass_tol);

    // a second ray leaving the first one at the shallowest branching level
    let split = (0..depth)
        .find(|&n| net.branching().child_count(p.node(n)) > 1)
        .ok_or_else(|| CliError::Diagnostic("no branching above the partition depth".into()))?;
    let mut eta = p.clone();
    eta.truncate(split);
    let other = if p.ray.path()[split] == 1 { 2 } else { 1 };
    eta.extend_with(&mut net, other)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    eta.extend(&mut net, p.levels(), &mut rng)?;
    let ck = verify_ck(&mut net, &p, &eta, 0.1, 0.1, depth)?;
    push("ck_relative_error", ck.rel_error, 1e-6);
    let n = meet_level(&p.ray, &eta.ray);
    let sym = (p_offdiag(&p, n, 0.3)?.value - p_offdiag(&eta, n, 0.3)?.value).abs()
        / p_offdiag(&p, n, 0.3)?.value;
    push("symmetry", sym, 1e-12);

    let (mut lower, mut upper, mut dominance, mut monotone) = (0usize, 0usize, 0usize, 0usize);
    let grid = cfg.grid()?;
    let needed = grid
        .iter()
        .map(|&t| ball_to_cylinder(&p, t).map(|n| n + 40).unwrap_or(p.levels() * 2))
        .max()
        .unwrap_or(0);
    if needed > p.levels() {
        p.extend(&mut net, needed, &mut rng)?;
    }
    let top = p.levels().min(60);
    for &t in &grid {
        let diag = p_diag(&p, t, cfg.shell_tol)?.value;
        if diag < diag_lower_bound(&p, t)? {
            lower += 1;
        }
        let mut prev = 0.0;
        for n in 0..top {
            let off = p_offdiag(&p, n, t)?.value;
            if off < prev * (1.0 - 1e-12) {
                monotone += 1;
            }
            if diag < off * (1.0 - 1e-12) {
                dominance += 1;
            }
            if let Some(ub) = offdiag_upper_bound(&p, n, t) {
                if off > ub * (1.0 + 1e-12) {
                    upper += 1;
                }
            }
            prev = off;
        }
    }
    push("lower_bound_violations", lower as f64, 0.0);
    push("upper_bound_violations", upper as f64, 0.0);
    push("dominance_violations", dominance as f64, 0.0);
    push("monotonicity_violations", monotone as f64, 0.0);
    let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
    out.json("verify.json", &json!({ "checks": checks, "failed": failed }))?;
    if !failed.is_empty() {
        return Err(CliError::Diagnostic(format!("failed checks: {}", failed.join(", "))));
    }
    Ok(json!({ "checks": checks.len() }))
}

fn run(command: &Command) -> CliResult<()> {
    let (name, flags) = match command {
        Command::GenTree(f) => ("gen-tree", f),
        Command::Resistance(f) => ("resistance", f),
        Command::Harmonic(f) => ("harmonic", f),
        Command::Ray(f) => ("ray", f),
        Command::Beta(f) => ("beta", f),
        Command::HeatDiag(f) => ("heat-diag", f),
        Command::HeatOffdiag(f) => ("heat-offdiag", f),
        Command::Displacement(f) => ("displacement", f),
        Command::Exponents(f) => ("exponents", f),
        Command::WalkOracle(f) => ("walk-oracle", f),
        Command::XtSample(f) => ("xt-sample", f),
        Command::Verify(f) => ("verify", f),
    };
    let cfg = flags.resolve()?;
    if let Some(w) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    }
    let started = Instant::now();
    let mut out = Output::new(&cfg)?;
    let result = match command {
        Command::GenTree(_) => gen_tree(&cfg, &mut out),
        Command::Resistance(_) => resistance_cmd(&cfg, &mut out),
        Command::Harmonic(_) => harmonic_cmd(&cfg, &mut out),
        Command::Ray(_) => ray_cmd(&cfg, &mut out),
        Command::Beta(_) => beta_cmd(&cfg, &mut out),
        Command::HeatDiag(_) => heat_diag_cmd(&cfg, &mut out),
        Command::HeatOffdiag(_) => heat_offdiag_cmd(&cfg, &mut out),
        Command::Displacement(_) => displacement_cmd(&cfg, &mut out),
        Command::Exponents(_) => exponents_cmd(&cfg, &mut out),
        Command::WalkOracle(_) => walk_oracle_cmd(&cfg, &mut out),
        Command::XtSample(_) => xt_sample_cmd(&cfg, &mut out),
        Command::Verify(_) => verify_cmd(&cfg, &mut out),
    };
    let (status, summary) = match &result {
        Ok(v) => ("ok".to_string(), v.clone()),
        Err(e) => (e.report(), Value::Null),
    };
    fs::write(cfg.out.join("run.conf"), cfg.to_text())?;
    let manifest = json!({
        "command": name,
        "config": cfg,
        "config_text": cfg.to_text(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": { "gwheat": env!("CARGO_PKG_VERSION") },
        "wall_time_s": started.elapsed().as_secs_f64(),
        "outputs": out.files,
        "status": status,
        "summary": summary,
    });
    let mut w = BufWriter::new(File::create(cfg.out.join("run_manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| CliError::Io(e.into()))?;
    writeln!(w)?;
    result.map(|_| ())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(e.exit_code())
        }
    }
}
