//! Exact solution at the road exit for a step of departures.
use lwr_departures::fluxmodel::FluxModel;
use lwr_departures::laxhopf::{BoundaryProfile, LaxSolution};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = FluxModel::parse("2 - rho", 2.0)?;
    // 0.75 cars per unit time for one time unit, then 0.25 for two
    let mut rates = vec![0.75; 100];
    rates.extend(vec![0.25; 200]);
    let datum = BoundaryProfile::from_rates(0.0, 0.01, rates)?;
    let sol = LaxSolution::new(&model, datum, 1.0)?;

    println!("{:>6} {:>10} {:>10} {:>10} {:>10}", "T", "U(T, L)", "u(T, L)", "eta-", "eta+");
    for k in 0..=14 {
        let t = 0.25 * k as f64;
        let e = sol.eval(t, 1.0)?;
        println!("{t:>6.2} {:>10.6} {:>10.6} {:>10.6} {:>10.6}", e.value, e.flux, e.eta_minus, e.eta_plus);
    }

    println!("\nrarefaction from the drop at t = 1: first car of the slow stretch");
    for (t, x) in sol.car_trajectory(1.0, 4)? {
        println!("  x = {x:.2}  t = {t:.6}");
    }
    println!("car departing at 0.5 arrives at {:.6}", sol.arrival_time(0.5)?);
    println!("time when 0.5 cars have arrived: {:.6}", sol.level_time(0.5, 1.0)?);
    Ok(())
}
