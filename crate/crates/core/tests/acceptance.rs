use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lwr_departures::cli::{self, CheckConfig, OracleConfig, ProblemConfig, RunArgs, SolveOutput};
use lwr_departures::fluxmodel::FluxModel;
use lwr_departures::groups::FractionField;
use lwr_departures::junction::{self, Buffer, FluxBounds, Junction};
use lwr_departures::laxhopf::{BoundaryProfile, CharInterval, LaxSolution};
use lwr_departures::planner;

struct Line {
    id: usize,
    pass: bool,
    detail: String,
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn criterion_1(dir: &Path) -> (Line, SolveOutput) {
    let args = RunArgs { config: config("example4.json"), out: dir.to_path_buf(), seed: None, refine: false };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let started = Instant::now();
    let out = pool.install(|| cli::cmd_solve(&args)).expect("solve");
    let elapsed = started.elapsed().as_secs_f64();
    let text = std::fs::read_to_string(dir.join("constants.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let c: Vec<f64> = serde_json::from_value(v["constants"].clone()).unwrap();
    let kappa: Vec<f64> = serde_json::from_value(v["kappa"].clone()).unwrap();
    let sizes = [2.51, 2.51];
    let c_ok = (c[0] - 5.18).abs() <= 0.02 && (c[1] - 2.10).abs() <= 0.02;
    let k_ok = kappa.iter().zip(sizes).all(|(k, g)| (k - g).abs() <= 0.02 * g);
    let t_ok = elapsed <= 30.0;
    let line = Line {
        id: 1,
        pass: c_ok && k_ok && t_ok,
        detail: format!(
            "C = ({:.4}, {:.4}) vs (5.18, 2.10) ± 0.02 [{}]; kappa = ({:.4}, {:.4}) [{}]; {:.2} s single-threaded [{}]",
            c[0],
            c[1],
            ok(c_ok),
            kappa[0],
            kappa[1],
            ok(k_ok),
            elapsed,
            ok(t_ok)
        ),
    };
    (line, out)
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

fn criteria_2_3(out: &SolveOutput) -> (Line, Line) {
    let tol = CheckConfig { off_support_samples: 500, shock_points: 1000, ..Default::default() };
    let d = &out.plan.departures;
    let c = out.plan.constants();
    let r = cli::check_plan(&out.problem, &out.opts, &tol, c, d.t_lo(), d.cell_width(), &out.plan.group_rates).unwrap();
    let j2 = (0..c.len()).all(|i| r.max_support_deviation[i] <= 1e-3 * (1.0 + c[i]));
    let j3 = r.min_off_support_slack.iter().all(|s| *s >= -1e-3);
    let two = Line {
        id: 2,
        pass: j2 && j3,
        detail: format!(
            "max |dJ - C| on supports {:?} ({:?} samples) [{}]; min off-support slack {:?} [{}]",
            r.max_support_deviation,
            r.support_samples,
            ok(j2),
            r.min_off_support_slack,
            ok(j3)
        ),
    };
    let shock_ok = r.widest_characteristic_interval <= r.cell_width;
    let three = Line {
        id: 3,
        pass: shock_ok,
        detail: format!(
            "widest backward characteristic interval {:.3e} at 1000 arrival points, cell width {:.3e}",
            r.widest_characteristic_interval, r.cell_width
        ),
    };
    (two, three)
}

fn criterion_4(out: &SolveOutput) -> Line {
    let problem = &out.problem;
    let cand = &out.plan.candidate;
    let sol = LaxSolution::new(&problem.model, out.plan.departures.clone(), problem.length).unwrap();
    let support = cand.support();
    let (a, b) = (support.first().unwrap().0, support.last().unwrap().1);
    let (a, b) = (a - 0.5, b + 0.5);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let mut l1 = 0.0;
    for k in 0..n {
        let t = a + (k as f64 + 0.5) * h;
        l1 += (sol.flux(t, problem.length).unwrap() - cand.flux_exact(problem, t)).abs() * h;
    }
    let g = problem.spec.sizes().into_iter().fold(f64::INFINITY, f64::min);
    Line { id: 4, pass: l1 <= 1e-3 * g, detail: format!("L1(arrival flux) = {l1:.3e}, bound {:.3e}", 1e-3 * g) }
}

fn criterion_5(out: &SolveOutput) -> Line {
    let coarse = cli::fv_check(&out.problem, &out.opts, &out.plan, 1e-3).unwrap();
    let fine = cli::fv_check(&out.problem, &out.opts, &out.plan, 5e-4).unwrap();
    let g = out.problem.spec.sizes().into_iter().fold(f64::INFINITY, f64::min);
    let ratio = coarse.l1_arrival / fine.l1_arrival;
    let pass = coarse.l1_arrival <= 1e-2 * g && ratio >= 1.5;
    Line {
        id: 5,
        pass,
        detail: format!(
            "FV L1 {:.3e} at dt = 1e-3 (bound {:.3e}), {:.3e} at dt = 5e-4, ratio {ratio:.2}",
            coarse.l1_arrival,
            1e-2 * g,
            fine.l1_arrival
        ),
    }
}

fn criterion_6() -> Line {
    let cfg = ProblemConfig::load(&config("single_group.json")).unwrap();
    let (problem, opts) = cfg.build().unwrap();
    let started = Instant::now();
    let (plan, _) = planner::solve(&problem, &opts).unwrap();
    let b = cli::brute_force_check(&problem, &opts, &plan, &OracleConfig::default(), 0).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let bound = b.brute_cost + 0.01 * b.brute_cost.abs();
    let pass = b.plan_cost <= bound && elapsed <= 300.0;
    Line {
        id: 6,
        pass,
        detail: format!(
            "plan {:.6} vs 16-bin brute force {:.6} (bound {:.6}), {} evaluations, {:.1} s",
            b.plan_cost, b.brute_cost, bound, b.evaluations, elapsed
        ),
    }
}

fn random_profile(rng: &mut ChaCha8Rng, cells: usize, top: f64) -> Vec<f64> {
    let mut rates = Vec::with_capacity(cells);
    while rates.len() < cells {
        let v = if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(0.0..top) };
        let run = rng.gen_range(1..8usize);
        rates.extend(std::iter::repeat(v).take(run.min(cells - rates.len())));
    }
    rates
}

fn criterion_7() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let models = [
        FluxModel::parse("2 - rho", 2.0).unwrap(),
        FluxModel::parse("1 - rho^2", 1.0).unwrap(),
        FluxModel::parse("3*exp(-rho) - 3*exp(-2)", 2.0).unwrap(),
    ];
    let mut fy_worst = f64::INFINITY;
    let mut fy_eq = 0.0f64;
    let mut trip = 0.0f64;
    for m in &models {
        let p_hi = m.g_prime(0.99 * m.max_flux());
        for _ in 0..200 {
            let p = rng.gen_range(m.gp0()..p_hi);
            let u = rng.gen_range(0.0..m.max_flux() * (1.0 - 1e-6));
            let gap = m.g_star_f64(p) + m.g(u).unwrap() - p * u;
            fy_worst = fy_worst.min(gap);
            let up = m.gamma(p).unwrap();
            fy_eq = fy_eq.max((m.g_star_f64(p) + m.g(up).unwrap() - p * up).abs());
            let rho = rng.gen_range(0.0..=m.rho_max());
            trip = trip.max((m.g(m.flux(rho)).unwrap() - rho).abs());
        }
    }
    let fy_ok = fy_worst >= -1e-9 && fy_eq <= 1e-9;
    let trip_ok = trip <= 1e-9;

    let ex4 = &models[0];
    let mut crossing = 0usize;
    for _ in 0..5 {
        let rates = random_profile(&mut rng, 80, 0.95);
        let sol = LaxSolution::new(ex4, BoundaryProfile::from_rates(0.0, 0.05, rates).unwrap(), 3.0).unwrap();
        let (a, b) = sol.arrival_window(3.0);
        let mut times: Vec<f64> = (0..400).map(|_| rng.gen_range(a..b)).collect();
        times.sort_by(f64::total_cmp);
        let mut prev: Option<CharInterval> = None;
        for t in times {
            let c = sol.backward_char_interval(t).unwrap();
            if c.eta_minus > c.eta_plus || prev.is_some_and(|q| q.eta_plus > c.eta_minus + 1e-9) {
                crossing += 1;
            }
            prev = Some(c);
        }
    }

    let mut simplex = 0.0f64;
    let mut negative = false;
    for _ in 0..5 {
        let rates: Vec<Vec<f64>> = (0..3).map(|_| random_profile(&mut rng, 30, 0.3)).collect();
        let (prof, field) = FractionField::from_rates(0.0, 0.1, &rates).unwrap();
        if prof.total() == 0.0 {
            continue;
        }
        let sol = LaxSolution::new(ex4, prof, 2.0).unwrap();
        for _ in 0..100 {
            let t = rng.gen_range(-0.5..5.5);
            let x = rng.gen_range(0.01..2.0);
            let mut sum = 0.0;
            for i in 0..3 {
                let th = field.theta_at(&sol, i, t, x).unwrap();
                negative |= th < 0.0;
                sum += th;
            }
            simplex = simplex.max((sum - 1.0).abs());
        }
    }
    let simplex_ok = simplex <= 1e-9 && !negative;
    Line {
        id: 7,
        pass: fy_ok && trip_ok && crossing == 0 && simplex_ok,
        detail: format!(
            "Fenchel-Young min gap {fy_worst:.2e}, equality {fy_eq:.2e} [{}]; g(f) round trip {trip:.2e} [{}]; crossings {crossing} [{}]; theta sum {simplex:.2e} [{}]",
            ok(fy_ok),
            ok(trip_ok),
            ok(crossing == 0),
            ok(simplex_ok)
        ),
    }
}

fn random_junction(rng: &mut ChaCha8Rng, m: usize, n: usize) -> (Junction, FluxBounds) {
    let model = FluxModel::parse("2 - rho", 2.0).unwrap();
    let mut pr: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = pr.iter().sum();
    pr.iter_mut().for_each(|c| *c /= s);
    let turning: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let mut row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|t| *t /= s);
            row
        })
        .collect();
    let j = Junction::new(pr, turning).unwrap();
    let inc: Vec<(FluxModel, f64)> = (0..m).map(|_| (model.clone(), rng.gen_range(0.0..2.0))).collect();
    let out: Vec<(FluxModel, f64)> = (0..n).map(|_| (model.clone(), rng.gen_range(0.0..2.0))).collect();
    let b = FluxBounds::from_densities(&inc, &out).unwrap();
    (j, b)
}

/// Largest admissible flux on the last incoming road given the others.
fn last_flux(j: &Junction, b: &FluxBounds, head: &[f64]) -> Option<f64> {
    let m = head.len();
    let mut f = b.incoming[m];
    for (k, cap) in b.outgoing.iter().enumerate() {
        let used: f64 = head.iter().enumerate().map(|(i, fi)| j.turning[i][k] * fi).sum();
        f = f.min((cap - used) / j.turning[m][k]);
    }
    (f >= 0.0).then_some(f)
}

fn grid_value(j: &Junction, b: &FluxBounds, head: &[f64]) -> f64 {
    match last_flux(j, b, head) {
        Some(last) => head.iter().chain([&last]).zip(&j.priorities).map(|(f, c)| f * c).sum(),
        None => f64::NEG_INFINITY,
    }
}

fn grid_points(hi: f64, step: f64) -> impl Iterator<Item = f64> {
    let n = (hi / step).floor() as usize;
    (0..=n).map(move |k| k as f64 * step)
}

fn grid_optimum(j: &Junction, b: &FluxBounds) -> f64 {
    const H: f64 = 1e-4;
    match j.incoming() {
        2 => grid_points(b.incoming[0], H).map(|f1| grid_value(j, b, &[f1])).fold(f64::NEG_INFINITY, f64::max),
        3 => {
            let inner = |f1: f64| grid_points(b.incoming[1], H).map(|f2| grid_value(j, b, &[f1, f2])).fold(f64::NEG_INFINITY, f64::max);
            let coarse = 1e-2;
            let mut best = (f64::NEG_INFINITY, 0.0);
            for f1 in grid_points(b.incoming[0], coarse) {
                let v = inner(f1);
                if v > best.0 {
                    best = (v, f1);
                }
            }
            let lo = ((best.1 - 2.0 * coarse).max(0.0) / H).floor() as usize;
            let hi = ((best.1 + 2.0 * coarse).min(b.incoming[0]) / H).floor() as usize;
            (lo..=hi).map(|k| inner(k as f64 * H)).fold(best.0, f64::max)
        }
        _ => unreachable!(),
    }
}

fn criterion_8() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_gap = 0.0f64;
    let mut above = 0.0f64;
    let mut outside = 0;
    for m in [2, 3] {
        for _ in 0..50 {
            let (j, b) = random_junction(&mut rng, m, 2);
            let lp = junction::solve_lp(&j, &b).unwrap();
            if !junction::admissible_region_contains(&j, &b, &lp.fluxes) {
                outside += 1;
            }
            let grid = grid_optimum(&j, &b);
            worst_gap = worst_gap.max(lp.objective - grid);
            above = above.max(grid - lp.objective);
        }
    }
    let lp_ok = worst_gap <= 1e-4 && above <= 1e-12 && outside == 0;

    let mut buffer_err = 0.0f64;
    for _ in 0..20 {
        let (j, b) = random_junction(&mut rng, 2, 2);
        let buf = Buffer::scaled(&j, &b, 1e-3).unwrap();
        let dt = 1e-5f64.min(buf.max_step(&j, &b));
        let (series, _) = junction::buffer_run(&j, &b, &buf, dt, 0.05).unwrap();
        let last = &series.last().unwrap().1;
        let target = junction::solve_priority_curve(&j, &b).unwrap();
        for (a, t) in last.incoming.iter().zip(&target) {
            buffer_err = buffer_err.max((a - t).abs());
        }
    }
    let buffer_ok = buffer_err <= 1e-2;
    Line {
        id: 8,
        pass: lp_ok && buffer_ok,
        detail: format!(
            "LP vs grid: max shortfall {worst_gap:.2e}, max excess {above:.2e}, {outside} outside the admissible region [{}]; buffer vs priority curve max |df| {buffer_err:.2e} [{}]",
            ok(lp_ok),
            ok(buffer_ok)
        ),
    }
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let (one, plan) = criterion_1(dir.path());
    lines.push(one);
    let (two, three) = criteria_2_3(&plan);
    lines.push(two);
    lines.push(three);
    lines.push(criterion_4(&plan));
    lines.push(criterion_5(&plan));
    lines.push(criterion_6());
    lines.push(criterion_7());
    lines.push(criterion_8());
    for l in &lines {
        println!("criterion {} {}: {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
