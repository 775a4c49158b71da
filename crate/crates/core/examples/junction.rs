//! Riemann solvers at a single intersection.
use lwr_departures::fluxmodel::FluxModel;
use lwr_departures::junction::{
    activity, buffer_run, solve_lp, solve_priority_curve, solve_stop_sign, Buffer, FluxBounds, Junction,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let m = FluxModel::parse("2 - rho", 2.0)?;
    let road = |rho: f64| (m.clone(), rho);

    let j = Junction::new(vec![0.5, 0.3, 0.2], vec![vec![0.6, 0.4], vec![0.3, 0.7], vec![0.5, 0.5]])?;
    let b = FluxBounds::from_densities(&[road(0.8), road(1.4), road(0.5)], &[road(1.3), road(1.6)])?;
    println!("bounds in {:?} out {:?}", b.incoming, b.outgoing);
    let lp = solve_lp(&j, &b)?;
    println!("LP            {:?} objective {:.6} tie {}", lp.fluxes, lp.objective, lp.tie);
    println!("              {:?}", activity(&j, &b, &lp.fluxes, 1e-9));
    let pc = solve_priority_curve(&j, &b)?;
    println!("priority      {pc:?} -> out {:?}", j.outgoing_fluxes(&pc));

    let j2 = Junction::new(vec![0.5, 0.5], vec![vec![0.7, 0.3], vec![0.4, 0.6]])?;
    for out1 in [0.2, 1.5] {
        let b2 = FluxBounds::from_densities(&[road(0.9), road(1.2)], &[road(out1), road(0.2)])?;
        println!("stop sign, outgoing density {out1}: {:?}", solve_stop_sign(&j2, &b2)?);
    }

    let b2 = FluxBounds::from_densities(&[road(1.1), road(0.9)], &[road(1.5), road(1.2)])?;
    let target = solve_priority_curve(&j2, &b2)?;
    for capacity in [1e-1, 1e-2, 1e-3] {
        let buf = Buffer::scaled(&j2, &b2, capacity)?;
        let dt = (capacity * 1e-2).min(buf.max_step(&j2, &b2));
        let (series, end) = buffer_run(&j2, &b2, &buf, dt, 0.05 + 50.0 * capacity)?;
        let f = &series.last().unwrap().1.incoming;
        let err = f.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("buffer M = {capacity:e}: fluxes {f:?}, queues {:?}, distance to priority curve {err:.2e}", end.queues);
    }
    Ok(())
}
