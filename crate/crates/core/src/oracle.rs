//! Independent checks: a Godunov finite-volume solver for u_x + g(u)_t = 0
//! with upwind transport of the group fractions, and a brute-force optimizer
//! over piecewise-constant departure rates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fluxmodel::FluxModel;
use crate::groups::GroupSpec;
use crate::laxhopf::BoundaryProfile;
use crate::numerics::gauss2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("CFL condition cannot be met: step {dx:.3e} at x = {x}")]
    CFLViolation { x: f64, dx: f64 },
    #[error("state {u} reached capacity at x = {x}, t = {t}")]
    CapacitySaturation { x: f64, t: f64, u: f64 },
    #[error("total size {total} exceeds what the window can carry ({capacity})")]
    InfeasibleMass { total: f64, capacity: f64 },
    #[error("instance too large for brute force: {0}")]
    TooLarge(String),
    #[error("invalid oracle input: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FvOptions {
    /// Cell width in t.
    pub dt: f64,
    pub cfl: f64,
    /// Extra room after the last departure, in t; by default L·g'(max rate) + L·g'(0).
    pub tail: Option<f64>,
}

impl FvOptions {
    pub fn new(dt: f64) -> Self {
        Self { dt, cfl: 0.9, tail: None }
    }
}

/// Arrival side of a finite-volume run.
#[derive(Debug, Clone, Serialize)]
pub struct FvResult {
    pub t_lo: f64,
    pub dt: f64,
    pub steps: usize,
    /// u(·, L) cell averages.
    pub arrival: Vec<f64>,
    /// θ_i(·, L) cell values.
    pub theta: Vec<Vec<f64>>,
    pub departed: f64,
    pub arrived: f64,
}

impl FvResult {
    pub fn cells(&self) -> usize {
        self.arrival.len()
    }

    pub fn cell_mid(&self, k: usize) -> f64 {
        self.t_lo + (k as f64 + 0.5) * self.dt
    }

    pub fn group_arrival(&self, i: usize) -> Vec<f64> {
        self.arrival.iter().zip(&self.theta[i]).map(|(u, th)| u * th).collect()
    }

    pub fn arrival_profile(&self) -> BoundaryProfile {
        BoundaryProfile::from_rates(self.t_lo, self.dt, self.arrival.clone()).expect("finite nonnegative rates")
    }

    /// ∫ |u_fv − u| dT against cell averages of a reference flux.
    pub fn l1_distance(&self, reference: impl Fn(f64) -> f64) -> f64 {
        (0..self.cells())
            .map(|k| {
                let a = self.t_lo + k as f64 * self.dt;
                (gauss2(&reference, a, a + self.dt) - self.arrival[k] * self.dt).abs()
            })
            .sum()
    }
}

/// Exact Riemann flux of a convex g: min of g over [uL, uR] if uL ≤ uR, max over [uR, uL] otherwise.
#[inline]
pub fn godunov_flux(g: impl Fn(f64) -> f64, g_min_at: f64, u_left: f64, u_right: f64) -> f64 {
    if u_left <= u_right {
        g(g_min_at.clamp(u_left, u_right))
    } else {
        g(u_left).max(g(u_right))
    }
}

/// Resample cumulative counts of `profile` onto t_lo + k·dt.
fn resample(profile: &BoundaryProfile, t_lo: f64, dt: f64, cells: usize) -> Vec<f64> {
    let cum: Vec<f64> = (0..=cells).map(|k| profile.value(t_lo + k as f64 * dt)).collect();
    cum.windows(2).map(|w| ((w[1] - w[0]) / dt).max(0.0)).collect()
}

/// March group departure profiles from x = 0 to x = L.
pub fn fv_propagate(model: &FluxModel, length: f64, groups: &[BoundaryProfile], opts: &FvOptions) -> Result<FvResult, OracleError> {
    if groups.is_empty() {
        return Err(OracleError::Invalid("no departure profiles".into()));
    }
    if !(opts.dt > 0.0 && opts.cfl > 0.0 && opts.cfl <= 1.0) {
        return Err(OracleError::Invalid(format!("dt = {}, cfl = {}", opts.dt, opts.cfl)));
    }
    let t_lo = groups.iter().map(|p| p.t_lo()).fold(f64::INFINITY, f64::min);
    let t_hi = groups.iter().map(|p| p.t_hi()).fold(f64::NEG_INFINITY, f64::max);
    let dt = opts.dt;
    let cells_in = ((t_hi - t_lo) / dt).ceil() as usize;
    let mut mass: Vec<Vec<f64>> = groups.iter().map(|p| resample(p, t_lo, dt, cells_in)).collect();
    let cap = model.max_flux() * (1.0 - 1e-6);
    let mut u: Vec<f64> = (0..cells_in).map(|k| mass.iter().map(|m| m[k]).sum()).collect();
    let u_max = u.iter().copied().fold(0.0, f64::max);
    if let Some(k) = u.iter().position(|&v| v >= cap) {
        return Err(OracleError::CapacitySaturation { x: 0.0, t: t_lo + (k as f64 + 0.5) * dt, u: u[k] });
    }
    let tail = opts.tail.unwrap_or_else(|| length * (model.g_prime(u_max) + model.gp0()) + 4.0 * dt);
    let cells = cells_in + (tail / dt).ceil() as usize;
    u.resize(cells, 0.0);
    for m in mass.iter_mut() {
        m.resize(cells, 0.0);
    }
    let departed: f64 = u.iter().sum::<f64>() * dt;

    let g = |v: f64| model.g_free(v);
    let n_groups = mass.len();
    let mut flux = vec![0.0; cells];
    let mut gflux = vec![vec![0.0; cells]; n_groups];
    let mut x = 0.0;
    let mut steps = 0;
    let (mut lo, mut hi) = (u.iter().position(|&v| v > 0.0).unwrap_or(cells), u.iter().rposition(|&v| v > 0.0).map_or(0, |k| k + 1));
    // cells left behind by the wave are frozen once negligible
    let negligible = 1e-20 * u_max;
    while x < length && lo < hi {
        while lo < hi && u[lo] < negligible {
            lo += 1;
        }
        // g is convex, so g' peaks at the largest state
        let peak = u[lo..hi].iter().copied().fold(0.0, f64::max);
        let speed = model.g_prime(peak).max(model.gp0());
        let mut dx = opts.cfl * dt / speed;
        if !(dx > 1e-12 * length) {
            return Err(OracleError::CFLViolation { x, dx });
        }
        if x + dx > length {
            dx = length - x;
        }
        let r = dx / dt;
        let hi_ext = if u[hi - 1] > negligible { (hi + 1).min(cells) } else { hi };
        for k in lo..hi_ext {
            // interface k + 1/2 uses states k and k + 1
            let right = if k + 1 < cells { u[k + 1] } else { u[k] };
            flux[k] = godunov_flux(g, 0.0, u[k], right);
            for i in 0..n_groups {
                let theta = if u[k] > 0.0 { mass[i][k] / u[k] } else { 0.0 };
                gflux[i][k] = theta * flux[k];
            }
        }
        for k in lo..hi_ext {
            let inflow = if k > lo { flux[k - 1] } else { 0.0 };
            let outflow = if k + 1 < cells { flux[k] } else { 0.0 };
            u[k] -= r * (outflow - inflow);
            for i in 0..n_groups {
                let gin = if k > lo { gflux[i][k - 1] } else { 0.0 };
                let gout = if k + 1 < cells { gflux[i][k] } else { 0.0 };
                mass[i][k] = (mass[i][k] - r * (gout - gin)).max(0.0);
            }
            if u[k] < 0.0 {
                u[k] = 0.0;
            }
            if u[k] >= cap {
                return Err(OracleError::CapacitySaturation { x: x + dx, t: t_lo + (k as f64 + 0.5) * dt, u: u[k] });
            }
        }
        hi = hi_ext;
        x += dx;
        steps += 1;
    }

    let mut theta = vec![vec![0.0; cells]; n_groups];
    for k in 0..cells {
        let total: f64 = (0..n_groups).map(|i| mass[i][k]).sum();
        if total > 0.0 {
            for i in 0..n_groups {
                theta[i][k] = mass[i][k] / total;
            }
        }
    }
    let arrived = u.iter().sum::<f64>() * dt;
    Ok(FvResult { t_lo, dt, steps, arrival: u, theta, departed, arrived })
}

/// Total cost of departure profiles, arrivals taken from the FV run.
#[derive(Debug, Clone, Serialize)]
pub struct FvCost {
    pub departure: f64,
    pub arrival: Vec<f64>,
    pub total: f64,
    pub mass_error: f64,
}

pub fn fv_cost(spec: &GroupSpec, model: &FluxModel, length: f64, groups: &[BoundaryProfile], opts: &FvOptions) -> Result<FvCost, OracleError> {
    let run = fv_propagate(model, length, groups, opts)?;
    let mut departure = 0.0;
    for p in groups {
        for (k, &r) in p.rates().iter().enumerate() {
            if r > 0.0 {
                departure += r * gauss2(|t| spec.phi(t), p.node_time(k), p.node_time(k + 1));
            }
        }
    }
    let mut arrival = vec![0.0; groups.len()];
    for (i, a) in arrival.iter_mut().enumerate() {
        for k in 0..run.cells() {
            let r = run.arrival[k] * run.theta[i][k];
            if r > 0.0 {
                let t0 = run.t_lo + k as f64 * run.dt;
                *a += r * gauss2(|t| spec.psi(i, t), t0, t0 + run.dt);
            }
        }
    }
    let total = departure + arrival.iter().sum::<f64>();
    Ok(FvCost { departure, arrival, total, mass_error: (run.arrived - run.departed).abs() })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BruteForceOptions {
    pub bins: usize,
    pub starts: usize,
    pub seed: u64,
    /// FV cells per bin.
    pub resolution: usize,
    /// Bin rates stay below this fraction of the maximal flux.
    pub capacity_fraction: f64,
    /// Smallest mass transfer, relative to the group size.
    pub min_step: f64,
}

impl Default for BruteForceOptions {
    fn default() -> Self {
        Self { bins: 16, starts: 20, seed: 0, resolution: 16, capacity_fraction: 0.99, min_step: 1e-4 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BruteForceResult {
    pub window: (f64, f64),
    /// ū_i per bin.
    pub rates: Vec<Vec<f64>>,
    pub cost: f64,
    pub start_costs: Vec<f64>,
    pub evaluations: usize,
}

impl BruteForceResult {
    pub fn profiles(&self) -> Vec<BoundaryProfile> {
        let w = (self.window.1 - self.window.0) / self.rates[0].len() as f64;
        self.rates
            .iter()
            .map(|r| BoundaryProfile::from_rates(self.window.0, w, r.clone()).expect("valid rates"))
            .collect()
    }
}

struct BinProblem<'a> {
    spec: &'a GroupSpec,
    model: &'a FluxModel,
    length: f64,
    window: (f64, f64),
    width: f64,
    fv: FvOptions,
}

impl BinProblem<'_> {
    fn cost(&self, rates: &[Vec<f64>]) -> f64 {
        let profiles: Vec<BoundaryProfile> = rates
            .iter()
            .map(|r| BoundaryProfile::from_rates(self.window.0, self.width, r.clone()).expect("valid rates"))
            .collect();
        fv_cost(self.spec, self.model, self.length, &profiles, &self.fv).map_or(f64::INFINITY, |c| c.total)
    }
}

/// Minimize total cost over piecewise-constant rates on `bins` equal bins of
/// the window, by pairwise mass transfers between bins from random feasible starts.
pub fn brute_force_optimize(
    spec: &GroupSpec,
    model: &FluxModel,
    length: f64,
    window: (f64, f64),
    opts: &BruteForceOptions,
) -> Result<BruteForceResult, OracleError> {
    let n = spec.len();
    if n > 2 || opts.bins > 24 || opts.bins == 0 {
        return Err(OracleError::TooLarge(format!("{n} groups, {} bins", opts.bins)));
    }
    let cap = opts.capacity_fraction * model.max_flux();
    let total = spec.total_size();
    let span = window.1 - window.0;
    if !(span > 0.0) {
        return Err(OracleError::Invalid(format!("window {window:?}")));
    }
    if cap * span < total {
        return Err(OracleError::InfeasibleMass { total, capacity: cap * span });
    }
    let width = span / opts.bins as f64;
    let bp = BinProblem {
        spec,
        model,
        length,
        window,
        width,
        fv: FvOptions::new(width / opts.resolution.max(1) as f64),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let starts: Vec<Vec<Vec<f64>>> = (0..opts.starts.max(1)).map(|_| random_start(spec, opts.bins, width, cap, &mut rng)).collect();
    let runs: Vec<(Vec<Vec<f64>>, f64, usize)> = starts.into_par_iter().map(|s| descend(&bp, s, cap, opts.min_step)).collect();

    let start_costs: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let evaluations = runs.iter().map(|r| r.2).sum();
    let (rates, cost, _) = runs.into_iter().min_by(|a, b| a.1.total_cmp(&b.1)).expect("at least one start");
    Ok(BruteForceResult { window, rates, cost, start_costs, evaluations })
}

fn random_start(spec: &GroupSpec, bins: usize, width: f64, cap: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut rates: Vec<Vec<f64>> = spec
        .groups
        .iter()
        .map(|g| {
            let w: Vec<f64> = (0..bins).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|v| g.size * v / s / width).collect()
        })
        .collect();
    // push any excess over capacity into bins with room, group by group
    for _ in 0..bins {
        let mut moved = false;
        for b in 0..bins {
            let load: f64 = rates.iter().map(|r| r[b]).sum();
            if load <= cap {
                continue;
            }
            let room: Vec<(usize, f64)> = (0..bins)
                .map(|c| (c, cap - rates.iter().map(|r| r[c]).sum::<f64>()))
                .filter(|(_, free)| *free > 0.0)
                .collect();
            let total_room: f64 = room.iter().map(|(_, free)| free).sum();
            if total_room <= 0.0 {
                continue;
            }
            let shift = (load - cap).min(total_room);
            for r in rates.iter_mut() {
                let part = r[b] / load * shift;
                r[b] -= part;
                for &(c, free) in &room {
                    r[c] += part * free / total_room;
                }
            }
            moved = true;
        }
        if !moved {
            break;
        }
    }
    rates
}

fn descend(bp: &BinProblem<'_>, mut rates: Vec<Vec<f64>>, cap: f64, min_step: f64) -> (Vec<Vec<f64>>, f64, usize) {
    let bins = rates[0].len();
    let mut best = bp.cost(&rates);
    let mut evals = 1;
    let mut steps: Vec<f64> = bp.spec.groups.iter().map(|g| 0.5 * g.size / bins as f64).collect();
    loop {
        let mut any_active = false;
        for i in 0..rates.len() {
            let floor = min_step * bp.spec.groups[i].size;
            if steps[i] < floor {
                continue;
            }
            any_active = true;
            let mut improved = false;
            for from in 0..bins {
                for to in 0..bins {
                    if from == to || rates[i][from] <= 0.0 {
                        continue;
                    }
                    // repeat a successful transfer while it keeps paying off
                    loop {
                        let load_to: f64 = rates.iter().map(|r| r[to]).sum();
                        let mass = steps[i].min(rates[i][from] * bp.width).min((cap - load_to) * bp.width);
                        if mass <= 0.0 {
                            break;
                        }
                        let mut trial = rates.clone();
                        trial[i][from] -= mass / bp.width;
                        trial[i][to] += mass / bp.width;
                        if trial[i][from] < 1e-15 {
                            trial[i][from] = 0.0;
                        }
                        let c = bp.cost(&trial);
                        evals += 1;
                        if c < best - 1e-12 * best.abs().max(1.0) {
                            best = c;
                            rates = trial;
                            improved = true;
                        } else {
                            break;
                        }
                    }
                }
            }
            if !improved {
                steps[i] *= 0.5;
            }
        }
        if !any_active {
            break;
        }
    }
    (rates, best, evals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::Group;
    use crate::laxhopf::LaxSolution;

    fn green() -> FluxModel {
        FluxModel::parse("2 - rho", 2.0).unwrap()
    }

    #[test]
    fn empty_road_stays_empty() {
        let p = BoundaryProfile::zeros(0.0, 1.0, 100);
        let r = fv_propagate(&green(), 1.0, &[p], &FvOptions::new(0.01)).unwrap();
        assert!(r.arrival.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_inflow_is_steady() {
        let p = BoundaryProfile::from_rates(0.0, 0.01, vec![0.5; 2000]).unwrap();
        let r = fv_propagate(&green(), 1.0, &[p], &FvOptions::new(0.01)).unwrap();
        // far from the front and the tail the arrival flux is the inflow
        for k in 500..1500 {
            assert!((r.arrival[k] - 0.5).abs() < 1e-12, "{k}: {}", r.arrival[k]);
        }
        assert!((r.arrived - r.departed).abs() < 1e-9);
    }

    #[test]
    fn godunov_flux_is_upwind_for_increasing_g() {
        let m = green();
        let g = |v: f64| m.g_free(v);
        assert_eq!(godunov_flux(g, 0.0, 0.3, 0.7), g(0.3));
        assert_eq!(godunov_flux(g, 0.0, 0.7, 0.3), g(0.7));
        // a convex flux with interior minimum picks the sonic value
        let q = |v: f64| (v - 0.5) * (v - 0.5);
        assert_eq!(godunov_flux(q, 0.5, 0.2, 0.9), 0.0);
        assert_eq!(godunov_flux(q, 0.5, 0.9, 0.2), q(0.2).max(q(0.9)));
    }

    #[test]
    fn random_starts_keep_group_masses() {
        let spec = GroupSpec::new(
            "-t",
            vec![Group::new("a", 2.51, "exp(t-4)").unwrap(), Group::new("b", 2.51, "exp(t-7.6)").unwrap()],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let width = 14.0 / 16.0;
        for _ in 0..200 {
            let rates = random_start(&spec, 16, width, 0.99, &mut rng);
            for (r, g) in rates.iter().zip(spec.sizes()) {
                assert!((r.iter().sum::<f64>() * width - g).abs() < 1e-12);
            }
            for b in 0..16 {
                assert!(rates.iter().map(|r| r[b]).sum::<f64>() <= 0.99 + 1e-12);
            }
        }
    }

    #[test]
    fn capacity_is_rejected() {
        let p = BoundaryProfile::from_rates(0.0, 0.01, vec![1.0; 10]).unwrap();
        assert!(matches!(
            fv_propagate(&green(), 1.0, &[p], &FvOptions::new(0.01)),
            Err(OracleError::CapacitySaturation { .. })
        ));
    }

    #[test]
    fn disjoint_blocks_keep_their_fractions() {
        let a = BoundaryProfile::from_rates(0.0, 0.01, [vec![0.5; 100], vec![0.0; 100]].concat()).unwrap();
        let b = BoundaryProfile::from_rates(0.0, 0.01, [vec![0.0; 100], vec![0.5; 100]].concat()).unwrap();
        let r = fv_propagate(&green(), 1.0, &[a, b], &FvOptions::new(0.01)).unwrap();
        for k in 0..r.cells() {
            if r.arrival[k] > 1e-9 {
                assert!((r.theta[0][k] + r.theta[1][k] - 1.0).abs() < 1e-12);
                assert!(r.theta[0][k] >= 0.0 && r.theta[1][k] >= 0.0);
            }
        }
        // mid-block arrivals are pure
        let k_first = ((0.5 + 0.5) / 0.01) as usize;
        let k_second = ((1.5 + 0.5) / 0.01) as usize;
        assert!(r.theta[0][k_first] > 1.0 - 1e-9);
        assert!(r.theta[1][k_second] > 1.0 - 1e-9);
    }

    #[test]
    fn riemann_fan_converges_to_lax() {
        let m = green();
        let mut errs = Vec::new();
        for dt in [0.01, 0.005, 0.0025] {
            let cells = (4.0 / dt) as usize;
            let rates: Vec<f64> = (0..cells).map(|k| if (k as f64 + 0.5) * dt > 1.0 { 0.75 } else { 0.0 }).collect();
            let p = BoundaryProfile::from_rates(0.0, dt, rates).unwrap();
            let sol = LaxSolution::new(&m, p.clone(), 1.0).unwrap();
            let fv = fv_propagate(&m, 1.0, &[p], &FvOptions::new(dt)).unwrap();
            let n = ((5.5 / dt) as usize).min(fv.cells());
            let err: f64 = (0..n)
                .map(|k| {
                    let a = fv.t_lo + k as f64 * dt;
                    ((sol.value(a + dt, 1.0).unwrap() - sol.value(a, 1.0).unwrap()) - fv.arrival[k] * dt).abs()
                })
                .sum();
            errs.push(err);
        }
        for w in errs.windows(2) {
            assert!(w[0] / w[1] > 1.5, "{errs:?}");
        }
    }

    #[test]
    fn brute_force_guards() {
        let spec = GroupSpec::new("-t", vec![Group::new("a", 100.0, "exp(t-4)").unwrap()]).unwrap();
        assert!(matches!(
            brute_force_optimize(&spec, &green(), 10.0, (0.0, 1.0), &BruteForceOptions::default()),
            Err(OracleError::InfeasibleMass { .. })
        ));
        let three = GroupSpec::new(
            "-t",
            (0..3).map(|k| Group::new(&format!("g{k}"), 0.1, "exp(t-4)").unwrap()).collect(),
        )
        .unwrap();
        assert!(matches!(
            brute_force_optimize(&three, &green(), 10.0, (0.0, 5.0), &BruteForceOptions::default()),
            Err(OracleError::TooLarge(_))
        ));
    }

    #[test]
    fn single_bin_cost() {
        let spec = GroupSpec::new("-t", vec![Group::new("a", 0.5, "exp(t-4)").unwrap()]).unwrap();
        let o = BruteForceOptions { bins: 1, starts: 2, ..Default::default() };
        let r = brute_force_optimize(&spec, &green(), 1.0, (0.0, 1.0), &o).unwrap();
        assert!((r.rates[0][0] - 0.5).abs() < 1e-12);
        // departure part is G·φ(mid bin); the arrival part spreads over [t + L·g'(0), …]
        let run = fv_cost(&spec, &green(), 1.0, &r.profiles(), &FvOptions::new(1.0 / 16.0)).unwrap();
        assert!((run.departure - 0.5 * -0.5).abs() < 1e-12);
        assert!((r.cost - run.total).abs() < 1e-12);
    }

    #[test]
    fn more_bins_do_not_cost_more() {
        let spec = GroupSpec::new("-t", vec![Group::new("a", 0.5, "exp(t-4)").unwrap()]).unwrap();
        let m = green();
        let c4 = brute_force_optimize(&spec, &m, 1.0, (0.0, 4.0), &BruteForceOptions { bins: 4, starts: 3, resolution: 16, ..Default::default() })
            .unwrap()
            .cost;
        let c8 = brute_force_optimize(&spec, &m, 1.0, (0.0, 4.0), &BruteForceOptions { bins: 8, starts: 3, resolution: 8, ..Default::default() })
            .unwrap()
            .cost;
        assert!(c8 <= c4 + 0.005 * c4.abs(), "{c4} {c8}");
    }
}
