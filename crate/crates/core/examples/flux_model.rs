//! Fundamental diagram quantities: g, γ and the Legendre transform g*.
use lwr_departures::fluxmodel::FluxModel;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let m = FluxModel::parse("2 - rho", 2.0)?;
    println!("v = 2 - rho: rho_max = {}, M = {}, g'(0) = {}", m.rho_max(), m.max_flux(), m.gp0());

    println!("\n{:>6} {:>12} {:>12} {:>14}", "p", "gamma(p)", "g*(p)", "p - 1 + 1/4p");
    for p in [0.5, 0.75, 1.0, 2.0, 5.0] {
        println!("{p:>6} {:>12.8} {:>12.8} {:>14.8}", m.gamma(p)?, m.g_star_f64(p), p - 1.0 + 0.25 / p);
    }
    println!("g*(0.3) = {} (below g'(0))", m.g_star(0.3));

    let view = m.legendre(64);
    let p = 1.3;
    let gap_at_gamma = view.fenchel_gap(p, m.gamma(p)?);
    let gap_elsewhere = view.fenchel_gap(p, 0.2);
    println!("\nFenchel-Young gap at p = {p}: {gap_at_gamma} at u = gamma(p), {gap_elsewhere} at u = 0.2");

    let curved = FluxModel::parse("3*exp(-rho) - 3*exp(-2)", 2.0)?;
    println!("\nv = 3e^-rho - 3e^-2: rho_max = {:.6}, M = {:.6}", curved.rho_max(), curved.max_flux());
    for rho in [0.1, 0.4, curved.rho_max()] {
        let f = curved.flux(rho);
        println!("  rho = {rho:.6}  f = {f:.6}  g(f) = {:.6}", curved.g(f)?);
    }
    Ok(())
}
