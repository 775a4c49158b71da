//! Two groups sharing a departure cost, each with its own arrival penalty.
use std::time::Instant;

use lwr_departures::fluxmodel::FluxModel;
use lwr_departures::groups::{Group, GroupSpec};
use lwr_departures::planner::{solve, PlannerOptions, Problem};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = GroupSpec::new(
        "-t",
        vec![Group::new("early", 2.51, "exp(t-4)")?, Group::new("late", 2.51, "exp(t-7.6)")?],
    )?;
    let problem = Problem::new(spec, FluxModel::parse("2 - rho", 2.0)?, 10.0)?;
    let opts = PlannerOptions { departure_window: (-8.0, 6.0), ..Default::default() };

    let started = Instant::now();
    let (plan, report) = solve(&problem, &opts)?;
    println!("constants   {:?}", report.constants);
    println!("masses      {:?}", report.kappa);
    println!("residual    {:.2e} after {} iterations", report.residual, report.iterations);
    println!("departures  {:?}", plan.departure_sets);
    println!("arrivals    {:?}", plan.partition.sets);
    println!("cost        {:.6}", plan.cost.total);
    println!("split mass  {:?}", plan.group_masses());
    println!("elapsed     {:.2?}", started.elapsed());
    Ok(())
}
