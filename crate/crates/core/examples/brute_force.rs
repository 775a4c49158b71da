//! Coarse exhaustive search over binned departure rates next to the planner.
use std::time::Instant;

use lwr_departures::fluxmodel::FluxModel;
use lwr_departures::groups::{Group, GroupSpec};
use lwr_departures::oracle::{brute_force_optimize, fv_cost, BruteForceOptions, FvOptions};
use lwr_departures::planner::{solve, PlannerOptions, Problem};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = GroupSpec::new("-t", vec![Group::new("commuters", 1.0, "exp(t - 4)")?])?;
    let problem = Problem::new(spec, FluxModel::parse("2 - rho", 2.0)?, 10.0)?;
    let window = (-6.0, 6.0);
    let opts = PlannerOptions { departure_window: window, ..Default::default() };
    let (plan, report) = solve(&problem, &opts)?;
    println!("planner constant {:.6}, exact cost {:.6}", report.constants[0], plan.cost.total);

    let started = Instant::now();
    let bo = BruteForceOptions { bins: 12, starts: 6, ..Default::default() };
    let brute = brute_force_optimize(&problem.spec, &problem.model, problem.length, window, &bo)?;
    println!("brute force: {} evaluations in {:.1?}", brute.evaluations, started.elapsed());
    println!("bin rates {:?}", brute.rates[0].iter().map(|r| (r * 1e3).round() / 1e3).collect::<Vec<_>>());

    let fv = FvOptions::new(1e-3);
    let brute_fine = fv_cost(&problem.spec, &problem.model, problem.length, &brute.profiles(), &fv)?.total;
    let plan_fine = fv_cost(&problem.spec, &problem.model, problem.length, &[plan.group_profile(0)?], &fv)?.total;
    println!("FV cost at dt = 1e-3: plan {plan_fine:.6}, best binned profile {brute_fine:.6}");
    Ok(())
}
