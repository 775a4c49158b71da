//! Group fractions at the exit, marginal costs and total cost of a hand-made plan.
use lwr_departures::fluxmodel::FluxModel;
use lwr_departures::groups::{marginal_cost, total_cost, FractionField, Group, GroupSpec};
use lwr_departures::laxhopf::LaxSolution;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = FluxModel::parse("2 - rho", 2.0)?;
    let spec = GroupSpec::new("-t", vec![Group::new("early", 1.0, "exp(t - 4)")?, Group::new("late", 1.0, "exp(t - 6)")?])?;

    // each group departs at rate 0.5 for two time units, one after the other
    let h = 0.01;
    let early: Vec<f64> = (0..500).map(|k| if k < 200 { 0.5 } else { 0.0 }).collect();
    let late: Vec<f64> = (0..500).map(|k| if (200..400).contains(&k) { 0.5 } else { 0.0 }).collect();
    let (total, fractions) = FractionField::from_rates(0.0, h, &[early, late])?;
    let sol = LaxSolution::new(&model, total, 4.0)?;
    let exit = fractions.at_exit(&sol)?;

    println!("exit switch times {:?}", exit.switch_times());
    for t in [2.0, 3.5, 4.0, 5.5, 6.5] {
        println!("  T = {t}: theta = ({:.3}, {:.3})", exit.theta(0, t), exit.theta(1, t));
    }
    println!("\n{:>6} {:>12} {:>12}", "t", "dJ(early)", "dJ(late)");
    for t in [0.5, 1.0, 1.5, 2.5, 3.0, 3.5] {
        println!("{t:>6} {:>12.6} {:>12.6}", marginal_cost(&spec, &sol, &exit, 0, t)?, marginal_cost(&spec, &sol, &exit, 1, t)?);
    }
    let cost = total_cost(&spec, &sol, &exit, 20_000)?;
    println!("\ndeparture cost {:.6}, arrival costs {:?}, total {:.6}", cost.departure, cost.arrival, cost.total);
    Ok(())
}
