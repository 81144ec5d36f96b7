//! Acceptance suite: one block per criterion, one summary line per criterion.
//!
//! Items listed in `KNOWN_FAILURES` still run and still print FAIL; they do
//! not fail the process. Anything else that fails does.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use gwheat::boundary::{vd_diagnostic, RayProfile};
use gwheat::electric::{
    escape_probability, harmonic_flow_in, resistance, resistance_fixed_depth, resistance_oracle,
    Network, OracleClosure, ResistancePolicy,
};
use gwheat::estimators::{
    beta_from_rays, beta_stationary, displacement_scan, fit_loglog, heat_exponent_scan, log_grid,
    resistance_exponent_from_rays, sample_rays, tail_scan, ExponentTargets, TailShape, TAIL_POLICY,
};
use gwheat::heat::{
    diag_lower_bound, moments, offdiag_upper_bound, p_diag, p_offdiag, q_t_reference, verify_ck,
    verify_mass, Metric,
};
use gwheat::walk::{mc_escape, mc_harmonic, DEFAULT_MAX_STEPS};
use gwheat::{Branching, LazyTree, OffspringDistribution, VertexId};

const GW: &str = "pmf:1=0.5,2=0.5";

/// (criterion, item label) pairs that fail for reasons recorded outside the code.
const KNOWN_FAILURES: &[(u32, &str)] = &[(9, "metric D gamma=1 slope in [0.93,1.0] over [1e-6,1e-2]")];

struct Item {
    label: String,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Suite {
    items: Vec<(u32, Item)>,
    summaries: Vec<(u32, &'static str, bool, Duration)>,
}

impl Suite {
    fn check(&mut self, crit: u32, label: impl Into<String>, pass: bool, detail: impl Into<String>) {
        let item = Item {
            label: label.into(),
            pass,
            detail: detail.into(),
        };
        let known = KNOWN_FAILURES.contains(&(crit, item.label.as_str()));
        let tag = match (item.pass, known) {
            (true, false) => "ok",
            (true, true) => "ok (listed as known failure)",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("    [{crit:>2}] {tag:<6} {}: {}", item.label, item.detail);
        self.items.push((crit, item));
    }

    fn run(&mut self, crit: u32, title: &'static str, limit: Option<Duration>, f: impl FnOnce(&mut Self)) {
        println!("criterion {crit}: {title}");
        let t0 = Instant::now();
        f(self);
        let elapsed = t0.elapsed();
        if let Some(limit) = limit {
            self.check(
                crit,
                "runtime",
                elapsed < limit,
                format!("{:.1}s (limit {:.0}s)", elapsed.as_secs_f64(), limit.as_secs_f64()),
            );
        }
        let pass = self.items.iter().filter(|(c, _)| *c == crit).all(|(_, i)| i.pass);
        self.summaries.push((crit, title, pass, elapsed));
    }
}

fn within(x: f64, target: f64, rel: f64) -> bool {
    ((x - target) / target).abs() <= rel
}

fn binary_ray(lambda: f64, levels: usize) -> (Network, RayProfile) {
    let br = Branching::galton_watson(OffspringDistribution::regular(2).unwrap(), 0);
    let mut net = Network::new(
        br,
        lambda,
        ResistancePolicy {
            target_gap: 1e-13,
            ..Default::default()
        },
    )
    .unwrap();
    let p = RayProfile::along(&mut net, &VertexId::from_path(vec![1; levels])).unwrap();
    (net, p)
}

fn resistance_fixtures(s: &mut Suite) {
    let policy = ResistancePolicy {
        target_gap: 1e-12,
        ..Default::default()
    };
    for (b, lambda, want) in [(2, 0.5, 2.0 / 3.0), (2, 1.0, 1.0), (2, 1.5, 2.0), (3, 1.0, 0.5)] {
        let tree = LazyTree::new(OffspringDistribution::regular(b).unwrap(), 0);
        let iv = resistance(&tree, &VertexId::root(), lambda, policy).unwrap();
        let err = (iv.mid() - want).abs();
        s.check(1, format!("{b}-ary lambda={lambda}"), err <= 1e-9, format!("r={:.12} err={err:.1e}", iv.mid()));
    }
}

fn oracle_equivalence(s: &mut Suite) {
    let (lambda, depth) = (0.8, 8);
    let mut worst: f64 = 0.0;
    let mut max_vertices = 0;
    for seed in 0..100 {
        let br = Branching::parse(GW, seed).unwrap();
        let recursion = resistance_fixed_depth(&br, br.root(), lambda, depth, 0.0);
        let ft = LazyTree::from_branching(br).truncate(depth, 4096).unwrap();
        max_vertices = max_vertices.max(ft.len());
        let oracle = resistance_oracle(&ft, lambda, &OracleClosure::Grounded).unwrap();
        worst = worst.max(((recursion - oracle) / oracle).abs());
    }
    s.check(
        2,
        "100 trees, depth 8, lambda=0.8, grounded",
        worst <= 1e-9,
        format!("max rel diff {worst:.2e}, largest tree {max_vertices} vertices"),
    );
}

fn walk_vs_flow(s: &mut Suite) {
    let lambda = 1.0;
    let walks = 200_000;
    let policy = ResistancePolicy {
        target_gap: 1e-8,
        ..Default::default()
    };
    let mut fixtures = vec![("mixed root".to_string(), Branching::parse("splice:pmf:2=1;pmf:3=1", 0).unwrap())];
    for seed in 1..=5 {
        fixtures.push((format!("GW seed {seed}"), Branching::parse(GW, seed).unwrap()));
    }
    for (i, (name, br)) in fixtures.into_iter().enumerate() {
        let est = mc_harmonic(&br, lambda, 2, walks, 1000 + i as u64).unwrap();
        let mut net = Network::new(br.clone(), lambda, policy).unwrap();
        let mut worst: f64 = 0.0;
        for (k, cyl) in est.cylinders.iter().enumerate() {
            let split = harmonic_flow_in(&mut net, &cyl.parent().unwrap(), 1e-6).unwrap();
            let mass = split.masses[*cyl.path().last().unwrap() as usize - 1];
            worst = worst.max(((est.frequencies[k] - mass) / est.stderr[k]).abs());
        }
        s.check(
            3,
            format!("{name}: depth-2 cylinders"),
            worst <= 4.0,
            format!(
                "{} cylinders, max |z| {worst:.2}, stopped {:.1e}, leak bound {:.1e}",
                est.cylinders.len(),
                est.stopped_fraction,
                est.leak_bound
            ),
        );
        if i == 0 {
            let tight = ResistancePolicy {
                target_gap: 1e-13,
                ..Default::default()
            };
            let mut exact = Network::new(br.clone(), lambda, tight).unwrap();
            let root = harmonic_flow_in(&mut exact, &VertexId::root(), 1e-6).unwrap();
            let flow_ok = (root.fractions[0] - 3.0 / 7.0).abs() < 1e-12 && (root.fractions[1] - 4.0 / 7.0).abs() < 1e-12;
            let mut z: f64 = 0.0;
            for (child, want) in [(1u32, 3.0 / 7.0), (2, 4.0 / 7.0)] {
                let hits: u64 = est
                    .cylinders
                    .iter()
                    .zip(&est.counts)
                    .filter(|(c, _)| c.path()[0] == child)
                    .map(|(_, &k)| k)
                    .sum();
                let freq = hits as f64 / walks as f64;
                let se = (want * (1.0 - want) / walks as f64).sqrt();
                z = z.max(((freq - want) / se).abs());
            }
            s.check(
                3,
                "mixed root: (3/7, 4/7)",
                flow_ok && z <= 4.0,
                format!("flow ({:.12}, {:.12}), walk max |z| {z:.2}", root.fractions[0], root.fractions[1]),
            );
        }
    }
}

fn escape_identity(s: &mut Suite) {
    for (b, want) in [(2u32, 0.5), (3, 2.0 / 3.0)] {
        let br = Branching::galton_watson(OffspringDistribution::regular(b).unwrap(), 0);
        let e = mc_escape(&br, 1.0, 40, 100_000, DEFAULT_MAX_STEPS, 77 + b as u64).unwrap();
        let exact = escape_probability(1.0 / (b as f64 - 1.0), 1.0);
        let z = (e.summary.estimate - exact) / e.summary.stderr;
        s.check(
            4,
            format!("{b}-ary lambda=1 -> {want:.4}"),
            z.abs() <= 3.0 && (exact - want).abs() < 1e-15,
            format!(
                "estimate {:.4} +- {:.4}, z {z:.2}, censored {:.1e}",
                e.summary.estimate, e.summary.stderr, e.summary.censored_fraction
            ),
        );
    }
}

fn semigroup(s: &mut Suite, profiles: &mut Vec<(String, RayProfile)>) {
    let (mut net, p) = binary_ray(1.0, 60);
    let m = verify_mass(&mut net, &p, 1.0, 12).unwrap();
    s.check(5, "binary mass t=1 L=12", m.defect <= 1e-8, format!("defect {:.2e}", m.defect));
    let mut eta_path = vec![1u32; 60];
    eta_path[3] = 2;
    let eta = RayProfile::along(&mut net, &VertexId::from_path(eta_path)).unwrap();
    let ck = verify_ck(&mut net, &p, &eta, 0.1, 0.1, 12).unwrap();
    s.check(5, "binary CK t=s=0.1 L=12", ck.rel_error <= 1e-6, format!("rel err {:.2e}", ck.rel_error));

    let br = Branching::parse(GW, 5).unwrap();
    let mut net = Network::new(
        br,
        1.0,
        ResistancePolicy {
            target_gap: 1e-4,
            ..Default::default()
        },
    )
    .unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
    let gw = gwheat::boundary::sample_ray_in(&mut net, 20, &mut rng).unwrap();
    let m = verify_mass(&mut net, &gw, 0.5, 14).unwrap();
    s.check(
        5,
        "GW lambda=1 mass t=0.5 L=14",
        m.defect <= 1e-6,
        format!("defect {:.2e} over {} cells", m.defect, m.cells),
    );
    profiles.push(("binary lambda=1".into(), p));
}

fn kernel_bounds(s: &mut Suite, profiles: &[(String, RayProfile)]) {
    let grid = log_grid(1e-8, 1.0, 40).unwrap();
    for (name, p) in profiles {
        let (mut lower, mut upper, mut evaluated) = (0, 0, 0);
        let top = p.levels().min(80);
        for &t in &grid {
            let diag = p_diag(p, t, 1e-12).unwrap().value;
            if diag < diag_lower_bound(p, t).unwrap() {
                lower += 1;
            }
            for n in 0..top {
                if let Some(ub) = offdiag_upper_bound(p, n, t) {
                    evaluated += 1;
                    if p_offdiag(p, n, t).unwrap().value > ub * (1.0 + 1e-12) {
                        upper += 1;
                    }
                }
            }
        }
        s.check(
            6,
            name.clone(),
            lower == 0 && upper == 0,
            format!("lower violations {lower}/40, upper violations {upper}/{evaluated}"),
        );
    }
}

fn kernel_values(s: &mut Suite) {
    let (_, p) = binary_ray(1.0, 70);
    let diag = p_diag(&p, 1.0, 1e-15).unwrap().value;
    let off = p_offdiag(&p, 1, 1.0).unwrap().value;
    // high-precision series values
    let (want_diag, want_off) = (1.714_498_064_786_025_3, 1.097_208_874_698_216_9);
    s.check(7, "p_1(w,w)", (diag - want_diag).abs() <= 1e-6, format!("{diag:.12} vs {want_diag:.12}"));
    s.check(7, "p_1 at N=1", (off - want_off).abs() <= 1e-6, format!("{off:.12} vs {want_off:.12}"));
}

fn heat_exponents(s: &mut Suite, profiles: &mut Vec<(String, RayProfile)>) {
    let grid = log_grid(1e-8, 1e-3, 40).unwrap();
    let (_, p) = binary_ray(1.2, 140);
    let targets = ExponentTargets::new(2f64.ln(), 1.2).unwrap();
    let scan = heat_exponent_scan(&p, &grid, 1, &targets).unwrap();
    s.check(
        8,
        "binary lambda=1.2 diagonal",
        scan.diagonal.relative_error() <= 0.05 && scan.diagonal.trimmed.is_empty(),
        format!("slope {:.4} vs {:.4}", scan.diagonal.fit.slope, scan.diagonal.target),
    );
    s.check(
        8,
        "binary lambda=1.2 off-diagonal N=1",
        scan.off_diagonal.relative_error() <= 0.02,
        format!("slope {:.5}", scan.off_diagonal.fit.slope),
    );
    profiles.push(("binary lambda=1.2".into(), p));

    let br = Branching::parse(GW, 0).unwrap();
    let policy = ResistancePolicy {
        target_gap: 1e-4,
        ..Default::default()
    };
    let rays = sample_rays(&br, 1.0, 110, 5, policy, 8).unwrap();
    let beta = beta_from_rays(&rays).unwrap();
    let targets = ExponentTargets::new(beta.value, 1.0).unwrap();
    let mut slopes = Vec::new();
    let mut ok = true;
    for p in &rays {
        let scan = heat_exponent_scan(p, &grid, 1, &targets).unwrap();
        ok &= scan.diagonal.relative_error() <= 0.10 && scan.diagonal.trimmed.is_empty();
        ok &= scan.off_diagonal.relative_error() <= 0.02;
        slopes.push(format!("{:.3}", scan.diagonal.fit.slope));
    }
    s.check(
        8,
        "GW lambda=1 diagonal, 5 rays",
        ok,
        format!("target -{:.3} (beta {:.3}), slopes {}", targets.kappa, beta.value, slopes.join(" ")),
    );
    for (i, p) in rays.into_iter().enumerate().take(2) {
        profiles.push((format!("GW lambda=1 ray {i}"), p));
    }
}

fn displacement_exponents(s: &mut Suite) {
    let (_, p) = binary_ray(1.0, 90);
    let targets = ExponentTargets::new(2f64.ln(), 1.0).unwrap();
    let grid = log_grid(1e-8, 1e-3, 40).unwrap();
    for (metric, name, gamma, target, tol) in [
        (Metric::Tree, "d", 0.3, 0.3 / 2f64.ln(), 0.05),
        (Metric::Tree, "d", 2.0, 1.0, 0.02),
        (Metric::Intrinsic, "D", 0.3, 0.3, 0.05),
        (Metric::Intrinsic, "D", 2.0, 1.0, 0.02),
    ] {
        let (_, fit) = displacement_scan(&p, &[gamma], &grid, metric, &targets).unwrap().pop().unwrap();
        s.check(
            9,
            format!("metric {name} gamma={gamma}"),
            within(fit.fit.slope, target, tol) && fit.trimmed.is_empty() && (fit.target - target).abs() < 1e-12,
            format!("slope {:.5} vs {target:.4} +- {:.0}%", fit.fit.slope, tol * 100.0),
        );
    }
    let wide = log_grid(1e-6, 1e-2, 40).unwrap();
    let pts: Vec<(f64, f64)> = wide
        .iter()
        .map(|&t| (t, moments(&p, t, 1.0, Metric::Intrinsic, 1e-3).unwrap().value))
        .collect();
    let fit = fit_loglog(&pts, None).unwrap();
    s.check(
        9,
        "metric D gamma=1 slope in [0.93,1.0] over [1e-6,1e-2]",
        (0.93..=1.0).contains(&fit.slope),
        format!("slope {:.5}", fit.slope),
    );
}

fn ergodic_limits(s: &mut Suite, profiles: &mut Vec<(String, RayProfile)>) {
    let br = Branching::parse(GW, 0).unwrap();
    let lambda: f64 = 0.8;
    let policy = ResistancePolicy {
        target_gap: 1e-4,
        ..Default::default()
    };
    let rays = sample_rays(&br, lambda, 3000, 20, policy, 10).unwrap();
    let slope = resistance_exponent_from_rays(&rays).unwrap();
    s.check(
        10,
        "resistance exponent n=3000 x20",
        (slope.value - lambda.ln()).abs() <= 0.05,
        format!("{:.4} +- {:.4} vs log 0.8 = {:.4}", slope.value, slope.stderr, lambda.ln()),
    );
    let ray = beta_from_rays(&rays).unwrap();
    let st = beta_stationary(&br, lambda, 2000, 200, policy, 11).unwrap();
    let combined = (ray.stderr.powi(2) + st.estimate.stderr.powi(2)).sqrt();
    let diff = (ray.value - st.estimate.value).abs();
    s.check(
        10,
        "beta ray vs stationary",
        diff <= 3.0 * combined,
        format!(
            "ray {:.4} +- {:.4}, stationary {:.4} +- {:.4}, |diff| {:.2} combined stderr",
            ray.value,
            ray.stderr,
            st.estimate.value,
            st.estimate.stderr,
            diff / combined
        ),
    );
    let upper = 1.5f64.ln();
    let lower = lambda.ln().max(0.0);
    let inside = |b: f64| b > lower && b < upper;
    s.check(
        10,
        "0 v log lambda < beta < log 1.5",
        inside(ray.value) && inside(st.estimate.value),
        format!("bounds ({lower:.4}, {upper:.4})"),
    );
    let mut p = rays.into_iter().next().unwrap();
    p.truncate(200);
    profiles.push(("GW lambda=0.8".into(), p));
}

fn tail_properties(s: &mut Suite) {
    let n = 100_000;
    let gw = Branching::parse(GW, 0).unwrap();
    let half = tail_scan(&gw, 0.5, n, TAIL_POLICY, 0.1, 21).unwrap();
    let max_mid = *half.samples.last().unwrap();
    let max_hi = half.max_upper.unwrap();
    s.check(
        11,
        "lambda=0.5: all R <= 2",
        max_hi <= 2.0 && max_mid <= 2.0,
        format!("max midpoint {max_mid:.6}, max upper bracket {max_hi:.6}"),
    );
    let one = tail_scan(&gw, 1.0, n, TAIL_POLICY, 0.1, 22).unwrap();
    s.check(
        11,
        "lambda=1: log-linear decreasing survival",
        one.shape == TailShape::Exponential && one.slope < 0.0 && one.warning.is_none(),
        format!(
            "slope {:.3} per unit R, r2 {:.3}, window [{:.3}, {:.3}]",
            one.slope, one.r2, one.window.0, one.window.1
        ),
    );
    let heavy = Branching::parse("pmf:1=0.3,2=0.7", 0).unwrap();
    let pw = tail_scan(&heavy, 1.5, n, TAIL_POLICY, 0.1, 23).unwrap();
    s.check(
        11,
        "lambda=1.5 pmf:1=0.3,2=0.7: log-log slope <= -2",
        pw.shape == TailShape::Power && pw.slope <= -2.0 && pw.warning.is_none(),
        format!(
            "slope {:.3} (reference {:.2}), r2 {:.3}, window [{:.2}, {:.2}], {} exceedances",
            pw.slope,
            0.3f64.ln() / 1.5f64.ln(),
            pw.r2,
            pw.window.0,
            pw.window.1,
            pw.exceedances
        ),
    );
}

fn vd_diagnostics(s: &mut Suite) {
    let witnesses = (0..100)
        .filter(|&seed| {
            vd_diagnostic(&Branching::parse(GW, seed).unwrap(), 6, 100_000)
                .unwrap()
                .el_witness
                .is_some()
        })
        .count();
    s.check(12, "GW p_1>0 witness by depth 6", witnesses >= 95, format!("{witnesses}/100 seeds"));
    let binary = Branching::galton_watson(OffspringDistribution::regular(2).unwrap(), 0);
    let r = vd_diagnostic(&binary, 6, 100_000).unwrap();
    s.check(
        12,
        "binary: no witness, bounded branching",
        r.el_witness.is_none() && r.max_branching == 2,
        format!("max branching {}", r.max_branching),
    );
    let (_, p) = binary_ray(1.0, 80);
    let grid = log_grid(1e-6, 1.0, 40).unwrap();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &t in &grid {
        let diag = p_diag(&p, t, 1e-12).unwrap().value / q_t_reference(&p, None, t).unwrap();
        lo = lo.min(diag);
        hi = hi.max(diag);
        for n in [1, 3, 6] {
            let r = p_offdiag(&p, n, t).unwrap().value / q_t_reference(&p, Some(n), t).unwrap();
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    s.check(
        12,
        "binary p_t/q_t band over [1e-6,1]",
        lo > 0.0 && hi.is_finite() && hi / lo < 100.0,
        format!("band [{lo:.4}, {hi:.4}]"),
    );
}

fn main() -> ExitCode {
    let mut s = Suite::default();
    let mut profiles = Vec::new();
    s.run(1, "resistance fixtures", Some(Duration::from_secs(1)), resistance_fixtures);
    s.run(2, "recursion vs Laplacian oracle", Some(Duration::from_secs(30)), oracle_equivalence);
    s.run(3, "harmonic flow vs walk", Some(Duration::from_secs(120)), walk_vs_flow);
    s.run(4, "escape identity", None, escape_identity);
    s.run(5, "semigroup checks", None, |s| semigroup(s, &mut profiles));
    s.run(7, "heat-kernel values", None, kernel_values);
    s.run(8, "heat-kernel exponents", Some(Duration::from_secs(120)), |s| heat_exponents(s, &mut profiles));
    s.run(9, "displacement exponents", None, displacement_exponents);
    s.run(10, "ergodic limits", Some(Duration::from_secs(300)), |s| ergodic_limits(s, &mut profiles));
    s.run(11, "resistance tails", None, tail_properties);
    s.run(12, "volume doubling diagnostics", None, vd_diagnostics);
    let profs = std::mem::take(&mut profiles);
    s.run(6, "kernel bounds on every profile", None, |s| kernel_bounds(s, &profs));

    println!();
    s.summaries.sort_by_key(|x| x.0);
    let mut unexpected = 0;
    for (crit, title, pass, elapsed) in &s.summaries {
        let failed: Vec<&Item> = s.items.iter().filter(|(c, i)| c == crit && !i.pass).map(|(_, i)| i).collect();
        let known = failed
            .iter()
            .all(|i| KNOWN_FAILURES.contains(&(*crit, i.label.as_str())));
        if !pass && !known {
            unexpected += 1;
        }
        let verdict = if *pass { "PASS" } else { "FAIL" };
        let note = if failed.is_empty() {
            String::new()
        } else {
            format!(
                " [{}{}]",
                failed.iter().map(|i| i.label.as_str()).collect::<Vec<_>>().join("; "),
                if known { "; known" } else { "" }
            )
        };
        println!("criterion {crit:>2} {verdict}: {title} ({:.1}s){note}", elapsed.as_secs_f64());
    }
    if unexpected > 0 {
        println!("{unexpected} criteria failed unexpectedly");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
