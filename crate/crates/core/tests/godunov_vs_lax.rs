//! Finite-volume arrivals converge to the exact Lax arrivals on random data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lwr_departures::fluxmodel::FluxModel;
use lwr_departures::laxhopf::{BoundaryProfile, LaxSolution};
use lwr_departures::oracle::{fv_propagate, FvOptions};

fn random_datum(rng: &mut ChaCha8Rng) -> BoundaryProfile {
    let mut rates = Vec::new();
    for _ in 0..8 {
        let v = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.05..0.9) };
        rates.extend(std::iter::repeat(v).take(rng.gen_range(20..60)));
    }
    BoundaryProfile::from_rates(0.0, 0.01, rates).unwrap()
}

#[test]
fn arrival_flux_converges_first_order() {
    let model = FluxModel::parse("2 - rho", 2.0).unwrap();
    let length = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..5 {
        let datum = random_datum(&mut rng);
        let sol = LaxSolution::new(&model, datum.clone(), length).unwrap();
        let exact = |t: f64| sol.flux(t, length).unwrap();
        let errors: Vec<f64> = [4e-3, 2e-3]
            .iter()
            .map(|&dt| {
                let run = fv_propagate(&model, length, std::slice::from_ref(&datum), &FvOptions::new(dt)).unwrap();
                assert!((run.arrived - run.departed).abs() < 1e-10);
                run.l1_distance(exact)
            })
            .collect();
        assert!(errors[0] < 5e-2, "case {case}: {errors:?}");
        assert!(errors[0] / errors[1] > 1.4, "case {case}: {errors:?}");
    }
}
