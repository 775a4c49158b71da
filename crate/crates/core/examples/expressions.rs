//! Parse cost laws, evaluate them and take symbolic derivatives.
use lwr_departures::costexpr::ScalarFn;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for src in ["exp(t - 4)", "-t", "2*t^2 - log(1 + t)", "(t - 1)^3 / 3"] {
        let f = ScalarFn::parse(src, "t")?;
        let d = f.expr().derivative().simplify();
        println!("{src:>22}  f(1.5) = {:<10.6} f' = {d}  f'(1.5) = {:.6}", f.value(1.5)?, f.deriv(1.5)?);
    }

    match ScalarFn::parse("exp(t - ", "t") {
        Ok(_) => unreachable!(),
        Err(e) => println!("\nrejected: {e}"),
    }
    match ScalarFn::parse("exp(s)", "t") {
        Ok(_) => unreachable!(),
        Err(e) => println!("rejected: {e}"),
    }
    let log = ScalarFn::parse("log(t)", "t")?;
    println!("log(-1) -> {:?}", log.value(-1.0).map_err(|e| e.to_string()));
    Ok(())
}
