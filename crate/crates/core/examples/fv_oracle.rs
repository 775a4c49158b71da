//! Godunov propagation checked against the exact solution.
use lwr_departures::fluxmodel::FluxModel;
use lwr_departures::laxhopf::{BoundaryProfile, LaxSolution};
use lwr_departures::oracle::{fv_propagate, FvOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = FluxModel::parse("2 - rho", 2.0)?;
    let length = 2.0;
    let rates: Vec<f64> = (0..400).map(|k| if k < 100 { 0.2 } else if k < 250 { 0.8 } else { 0.1 }).collect();
    let datum = BoundaryProfile::from_rates(0.0, 0.01, rates)?;
    let exact = LaxSolution::new(&model, datum.clone(), length)?;

    println!("{:>8} {:>8} {:>12} {:>12}", "dt", "steps", "L1 error", "mass error");
    let mut last: Option<f64> = None;
    for dt in [8e-3, 4e-3, 2e-3, 1e-3] {
        let run = fv_propagate(&model, length, std::slice::from_ref(&datum), &FvOptions::new(dt))?;
        let err = run.l1_distance(|t| exact.flux(t, length).unwrap());
        print!("{dt:>8} {:>8} {err:>12.4e} {:>12.2e}", run.steps, (run.arrived - run.departed).abs());
        if let Some(prev) = last {
            print!("   ratio {:.2}", prev / err);
        }
        println!();
        last = Some(err);
    }
    Ok(())
}
