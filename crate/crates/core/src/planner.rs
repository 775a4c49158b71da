//! Construction of globally optimal departure rates from marginal-cost
//! constants C: every arrival time T is reached by the characteristic leaving
//! at the time t(T) with φ(t) + ψ(T) = 0, ψ being the lower envelope of the
//! shifted arrival costs. The constants are fitted so that each group's
//! arrival set carries exactly its size.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fluxmodel::FluxModel;
use crate::groups::{CostBreakdown, GroupSpec};
use crate::laxhopf::{BoundaryProfile, LaxError};
use crate::numerics::{bisect_predicate, brent, gauss2};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("no root of phi(t) + psi(T) = 0 in [{lo}, {hi}] for t = {t}")]
    NoRootInWindow { t: f64, lo: f64, hi: f64 },
    #[error("arrival flux is positive at the edge T = {0} of the arrival window")]
    FluxAtWindowEdge(f64),
    #[error("departure time for arrival T = {0} falls before the departure window")]
    DepartureOutsideWindow(f64),
    #[error("constants did not converge after {iterations} iterations, best residual {residual:.3e}")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("car trajectory stalled at x = {x}, t = {t}: flux reached capacity")]
    TrajectoryStalled { x: f64, t: f64 },
    #[error("invalid planner input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Lax(#[from] LaxError),
}

/// Road, flux law and driver groups.
#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: GroupSpec,
    pub model: FluxModel,
    pub length: f64,
}

impl Problem {
    pub fn new(spec: GroupSpec, model: FluxModel, length: f64) -> Result<Self, PlanError> {
        if !(length.is_finite() && length > 0.0) {
            return Err(PlanError::Invalid(format!("road length {length}")));
        }
        Ok(Self { spec, model, length })
    }

    /// Free-flow travel time L·g'(0).
    pub fn free_flow_time(&self) -> f64 {
        self.length * self.model.gp0()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlannerOptions {
    /// Departure window [t_lo, t_hi].
    pub departure_window: (f64, f64),
    /// Arrival window; defaults to [t_lo + L·g'(0), t_hi + 2·L·g'(0)].
    pub arrival_window: Option<(f64, f64)>,
    pub arrival_cells: usize,
    pub departure_cells: usize,
    pub jacobian_step: f64,
    pub max_iterations: usize,
    pub starts: usize,
    pub seed: u64,
    /// Double the grids until the constants move less than `refine_tol`.
    pub refine: bool,
    pub refine_tol: f64,
    pub max_refinements: usize,
    /// Accepted ‖Λ(C) − G‖∞ relative to max G.
    pub residual_tol: f64,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self {
            departure_window: (-10.0, 10.0),
            arrival_window: None,
            arrival_cells: 10_000,
            departure_cells: 10_000,
            jacobian_step: 1e-4,
            max_iterations: 200,
            starts: 8,
            seed: 0,
            refine: false,
            refine_tol: 1e-3,
            max_refinements: 3,
            residual_tol: 1e-4,
        }
    }
}

impl PlannerOptions {
    pub fn arrival_window(&self, problem: &Problem) -> (f64, f64) {
        self.arrival_window.unwrap_or_else(|| {
            let tf = problem.free_flow_time();
            (self.departure_window.0 + tf, self.departure_window.1 + 2.0 * tf)
        })
    }
}

/// ψ(T) = min_k (ψ_k(T) − C_k).
#[derive(Debug, Clone, Copy)]
pub struct Envelope<'a> {
    spec: &'a GroupSpec,
    constants: &'a [f64],
}

pub fn psi_envelope<'a>(spec: &'a GroupSpec, constants: &'a [f64]) -> Envelope<'a> {
    Envelope { spec, constants }
}

impl Envelope<'_> {
    /// Value and smallest minimizing index.
    #[inline]
    pub fn eval(&self, t: f64) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (k, c) in self.constants.iter().enumerate() {
            let v = self.spec.psi(k, t) - c;
            if v < best.0 {
                best = (v, k);
            }
        }
        best
    }

    pub fn value(&self, t: f64) -> f64 {
        self.eval(t).0
    }

    pub fn active(&self, t: f64) -> usize {
        self.eval(t).1
    }

    /// Points in [a, b] where the active index changes, located to 1e-12.
    pub fn switches(&self, a: f64, b: f64, cells: usize) -> Vec<(f64, usize, usize)> {
        let cells = cells.max(1);
        let h = (b - a) / cells as f64;
        let mut out = Vec::new();
        let mut lo = a;
        let mut k_lo = self.active(a);
        for m in 1..=cells {
            let hi = a + m as f64 * h;
            let k_hi = self.active(hi);
            while k_hi != k_lo {
                let (_, x) = bisect_predicate(|t| self.active(t) != k_lo, lo, hi, 1e-13 * (1.0 + hi.abs()));
                let k = self.active(x);
                out.push((x, k_lo, k));
                lo = x;
                k_lo = k;
            }
            lo = hi;
        }
        out
    }
}

/// The T with φ(t) + ψ(T) = 0, searched in the arrival window.
pub fn characteristic_terminus(spec: &GroupSpec, constants: &[f64], t: f64, window: (f64, f64)) -> Result<f64, PlanError> {
    let env = psi_envelope(spec, constants);
    let target = -spec.phi(t);
    let (lo, hi) = window;
    if !(env.value(lo) <= target && env.value(hi) >= target) {
        return Err(PlanError::NoRootInWindow { t, lo, hi });
    }
    let (a, b) = bisect_predicate(|s| env.value(s) >= target, lo, hi, 1e-14 * (1.0 + hi.abs()));
    Ok(0.5 * (a + b))
}

/// Arrival-side state: outside the support, or inside with the active group.
type ArrivalState = Option<usize>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArrivalNode {
    pub t: f64,
    pub departure: f64,
    pub flux: f64,
    pub active: Option<usize>,
    /// U(T, L).
    pub count: f64,
}

/// Maximal arrival interval with constant state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArrivalPiece {
    pub lo: f64,
    pub hi: f64,
    pub group: Option<usize>,
}

/// Shock-free solution built from constants C.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub constants: Vec<f64>,
    pub window: (f64, f64),
    pub departure_window: (f64, f64),
    pub nodes: Vec<ArrivalNode>,
    pub pieces: Vec<ArrivalPiece>,
    /// Λ(C): arrival mass per group.
    pub kappa: Vec<f64>,
    /// ∫ ψ_i u(·, L) over A_i.
    pub arrival_cost: Vec<f64>,
    length: f64,
    gp0: f64,
}

struct Builder<'a> {
    problem: &'a Problem,
    env: Envelope<'a>,
    dep_lo: f64,
    phi_affine: Option<(f64, f64)>,
}

impl<'a> Builder<'a> {
    fn new(problem: &'a Problem, constants: &'a [f64], dep_lo: f64) -> Self {
        let phi = &problem.spec.departure_cost;
        let phi_affine = if phi.is_affine() {
            Some((phi.value(0.0).unwrap_or(f64::NAN), phi.deriv(0.0).unwrap_or(f64::NAN)))
        } else {
            None
        };
        Self { problem, env: psi_envelope(&problem.spec, constants), dep_lo, phi_affine }
    }

    #[inline]
    fn state(&self, t: f64) -> ArrivalState {
        let (psi, k) = self.env.eval(t);
        let f = self.problem.spec.phi(t - self.problem.free_flow_time()) + psi;
        if f < 0.0 {
            Some(k)
        } else {
            None
        }
    }

    /// Departure time t(T) and flux u(T, L).
    #[inline]
    fn departure(&self, t_arr: f64) -> Result<(f64, f64), PlanError> {
        let p = self.problem;
        let t_free = t_arr - p.free_flow_time();
        let psi = self.env.value(t_arr);
        let spec = &p.spec;
        if spec.phi(t_free) + psi >= 0.0 {
            return Ok((t_free, 0.0));
        }
        let t = match self.phi_affine {
            Some((a, b)) => (-psi - a) / b,
            None => {
                if spec.phi(self.dep_lo) + psi < 0.0 {
                    return Err(PlanError::DepartureOutsideWindow(t_arr));
                }
                brent(|s| spec.phi(s) + psi, self.dep_lo, t_free, 1e-14 * (1.0 + t_free.abs()), 200)
                    .ok_or(PlanError::DepartureOutsideWindow(t_arr))?
                    .x
            }
        };
        if t < self.dep_lo {
            return Err(PlanError::DepartureOutsideWindow(t_arr));
        }
        let t = t.min(t_free);
        Ok((t, p.model.gamma_unchecked((t_arr - t) / p.length)))
    }

    fn flux(&self, t_arr: f64) -> f64 {
        self.departure(t_arr).map(|d| d.1).unwrap_or(f64::NAN)
    }
}

pub fn build_candidate(problem: &Problem, constants: &[f64], opts: &PlannerOptions) -> Result<Candidate, PlanError> {
    let n_groups = problem.spec.len();
    if constants.len() != n_groups {
        return Err(PlanError::Invalid(format!("{} constants for {n_groups} groups", constants.len())));
    }
    let (wa, wb) = opts.arrival_window(problem);
    let b = Builder::new(problem, constants, opts.departure_window.0);
    let cells = opts.arrival_cells.max(2);
    let h = (wb - wa) / cells as f64;

    if b.state(wa).is_some() {
        return Err(PlanError::FluxAtWindowEdge(wa));
    }
    if b.state(wb).is_some() {
        return Err(PlanError::FluxAtWindowEdge(wb));
    }

    let mut nodes = Vec::with_capacity(cells + 1);
    let mut pieces: Vec<ArrivalPiece> = Vec::new();
    let mut kappa = vec![0.0; n_groups];
    let mut arrival_cost = vec![0.0; n_groups];
    let mut count = 0.0;
    let mut state_lo = b.state(wa);
    let mut piece_start = wa;
    let (t0, u0) = b.departure(wa)?;
    nodes.push(ArrivalNode { t: wa, departure: t0, flux: u0, active: state_lo, count: 0.0 });

    for m in 0..cells {
        let (lo, hi) = (wa + m as f64 * h, if m + 1 == cells { wb } else { wa + (m + 1) as f64 * h });
        let state_hi = b.state(hi);
        // split the cell where the state changes
        let mut a = lo;
        let mut s = state_lo;
        for _ in 0..16 {
            let mid = 0.5 * (a + hi);
            let end = if s != state_hi {
                bisect_predicate(|t| b.state(t) != s, a, hi, 1e-13 * (1.0 + hi.abs())).1
            } else if b.state(mid) != s {
                bisect_predicate(|t| b.state(t) != s, a, mid, 1e-13 * (1.0 + hi.abs())).1
            } else {
                hi
            };
            if let Some(k) = s {
                let mass = gauss2(|t| b.flux(t), a, end);
                let cost = gauss2(|t| b.flux(t) * problem.spec.psi(k, t), a, end);
                kappa[k] += mass;
                arrival_cost[k] += cost;
                count += mass;
            }
            if end >= hi {
                break;
            }
            pieces.push(ArrivalPiece { lo: piece_start, hi: end, group: s });
            piece_start = end;
            a = end;
            s = b.state(end);
        }
        state_lo = state_hi;
        let (td, u) = b.departure(hi)?;
        if !u.is_finite() {
            return Err(PlanError::Invalid(format!("flux evaluation failed at T = {hi}")));
        }
        nodes.push(ArrivalNode { t: hi, departure: td, flux: u, active: state_hi, count });
    }
    pieces.push(ArrivalPiece { lo: piece_start, hi: wb, group: state_lo });
    let pieces = merge_pieces(pieces);

    Ok(Candidate {
        constants: constants.to_vec(),
        window: (wa, wb),
        departure_window: opts.departure_window,
        nodes,
        pieces,
        kappa,
        arrival_cost,
        length: problem.length,
        gp0: problem.model.gp0(),
    })
}

fn merge_pieces(pieces: Vec<ArrivalPiece>) -> Vec<ArrivalPiece> {
    let mut out: Vec<ArrivalPiece> = Vec::with_capacity(pieces.len());
    for p in pieces {
        if p.hi <= p.lo {
            continue;
        }
        match out.last_mut() {
            Some(q) if q.group == p.group => q.hi = p.hi,
            _ => out.push(p),
        }
    }
    out
}

/// Arrival sets A_i as unions of intervals, and masses κ = Λ(C).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Partition {
    pub sets: Vec<Vec<(f64, f64)>>,
    pub kappa: Vec<f64>,
}

pub fn arrival_partition(candidate: &Candidate) -> Partition {
    let n = candidate.kappa.len();
    let mut sets = vec![Vec::new(); n];
    for p in &candidate.pieces {
        if let Some(k) = p.group {
            sets[k].push((p.lo, p.hi));
        }
    }
    Partition { sets, kappa: candidate.kappa.clone() }
}

impl Candidate {
    pub fn total_arrivals(&self) -> f64 {
        self.nodes.last().map_or(0.0, |n| n.count)
    }

    /// Arrival support intervals.
    pub fn support(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for p in self.pieces.iter().filter(|p| p.group.is_some()) {
            match out.last_mut() {
                Some(last) if last.1 == p.lo => last.1 = p.hi,
                _ => out.push((p.lo, p.hi)),
            }
        }
        out
    }

    fn cell_of(&self, t: f64) -> usize {
        let n = self.nodes.len() - 1;
        let h = (self.window.1 - self.window.0) / n as f64;
        (((t - self.window.0) / h).floor().max(0.0) as usize).min(n - 1)
    }

    /// u(T, L) by linear interpolation on the arrival grid.
    pub fn flux_at(&self, t: f64) -> f64 {
        if t <= self.window.0 || t >= self.window.1 {
            return 0.0;
        }
        let m = self.cell_of(t);
        let (a, b) = (&self.nodes[m], &self.nodes[m + 1]);
        let w = (t - a.t) / (b.t - a.t);
        a.flux + w * (b.flux - a.flux)
    }

    /// Departure time t(T) of the characteristic reaching (T, L).
    pub fn departure_at(&self, t: f64) -> f64 {
        if t <= self.window.0 || t >= self.window.1 {
            return t - self.length * self.gp0;
        }
        let m = self.cell_of(t);
        let (a, b) = (&self.nodes[m], &self.nodes[m + 1]);
        let w = (t - a.t) / (b.t - a.t);
        a.departure + w * (b.departure - a.departure)
    }

    /// Active group at arrival time T, if the flux there is positive.
    pub fn group_at(&self, t: f64) -> Option<usize> {
        let k = self.pieces.partition_point(|p| p.hi <= t);
        self.pieces.get(k).and_then(|p| p.group)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationLog {
    pub start: usize,
    pub iteration: usize,
    pub method: &'static str,
    pub constants: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveOutcome {
    pub constants: Vec<f64>,
    pub kappa: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub log: Vec<IterationLog>,
}

fn residual_of(problem: &Problem, c: &[f64], opts: &PlannerOptions) -> Result<(Vec<f64>, f64), PlanError> {
    let cand = build_candidate(problem, c, opts)?;
    let r: Vec<f64> = cand.kappa.iter().zip(problem.spec.groups.iter()).map(|(k, g)| k - g.size).collect();
    let norm = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((r, norm))
}

/// Fit Λ(C) = G from one starting point: damped Newton with a forward-difference
/// Jacobian, falling back to coordinate-wise bisection.
pub fn solve_constants(problem: &Problem, c0: &[f64], opts: &PlannerOptions) -> Result<SolveOutcome, PlanError> {
    solve_from(problem, c0, opts, 0)
}

fn solve_from(problem: &Problem, c0: &[f64], opts: &PlannerOptions, start: usize) -> Result<SolveOutcome, PlanError> {
    let n = problem.spec.len();
    let gmax = problem.spec.groups.iter().map(|g| g.size).fold(0.0, f64::max);
    let target = 1e-11 * gmax;
    let mut log = Vec::new();
    let mut c = c0.to_vec();
    let (mut r, mut norm) = residual_of(problem, &c, opts)?;
    log.push(IterationLog { start, iteration: 0, method: "start", constants: c.clone(), residual: norm });
    let mut iterations = 0;
    let mut use_newton = true;

    while iterations < opts.max_iterations && norm > target {
        iterations += 1;
        if use_newton {
            let mut jac = DMatrix::zeros(n, n);
            for j in 0..n {
                let mut cj = c.clone();
                cj[j] += opts.jacobian_step;
                let (rj, _) = residual_of(problem, &cj, opts)?;
                for i in 0..n {
                    jac[(i, j)] = (rj[i] - r[i]) / opts.jacobian_step;
                }
            }
            let rhs = DVector::from_iterator(n, r.iter().map(|v| -v));
            let step = jac.clone().lu().solve(&rhs).filter(|s| s.iter().all(|v| v.is_finite()));
            let Some(step) = step else {
                log::debug!("start {start}: singular Jacobian at iteration {iterations}, switching to bisection");
                use_newton = false;
                continue;
            };
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<f64> = c.iter().zip(step.iter()).map(|(ci, si)| ci + lambda * si).collect();
                if let Ok((rt, nt)) = residual_of(problem, &trial, opts) {
                    if nt < norm {
                        c = trial;
                        r = rt;
                        norm = nt;
                        accepted = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            if !accepted {
                log::debug!("start {start}: line search failed at iteration {iterations}, switching to bisection");
                use_newton = false;
                continue;
            }
            log.push(IterationLog { start, iteration: iterations, method: "newton", constants: c.clone(), residual: norm });
        } else {
            for i in 0..n {
                c[i] = bisect_coordinate(problem, &c, i, opts)?;
            }
            let (rn, nn) = residual_of(problem, &c, opts)?;
            r = rn;
            norm = nn;
            log.push(IterationLog { start, iteration: iterations, method: "bisection", constants: c.clone(), residual: norm });
            use_newton = true;
        }
    }
    let kappa = r.iter().zip(problem.spec.groups.iter()).map(|(ri, g)| ri + g.size).collect();
    Ok(SolveOutcome { constants: c, kappa, residual: norm, iterations, log })
}

/// Solve κ_i(C) = G_i in C_i alone, the other constants fixed.
fn bisect_coordinate(problem: &Problem, c: &[f64], i: usize, opts: &PlannerOptions) -> Result<f64, PlanError> {
    let g = problem.spec.groups[i].size;
    let kappa_i = |ci: f64| -> Option<f64> {
        let mut trial = c.to_vec();
        trial[i] = ci;
        build_candidate(problem, &trial, opts).ok().map(|cand| cand.kappa[i])
    };
    let mut step = 1.0f64.max(c[i].abs() * 0.1);
    let (mut lo, mut hi) = (c[i], c[i]);
    match kappa_i(c[i]) {
        Some(k) if k < g => {
            for _ in 0..60 {
                hi += step;
                step *= 2.0;
                match kappa_i(hi) {
                    Some(kh) if kh >= g => break,
                    Some(_) => lo = hi,
                    None => {
                        hi -= step / 2.0;
                        step /= 4.0;
                    }
                }
            }
        }
        _ => {
            for _ in 0..60 {
                lo -= step;
                step *= 2.0;
                match kappa_i(lo) {
                    Some(kl) if kl < g => break,
                    _ => hi = lo,
                }
            }
        }
    }
    let (a, b) = bisect_predicate(|ci| kappa_i(ci).is_none_or(|k| k >= g), lo, hi, 1e-13 * (1.0 + hi.abs()));
    Ok(0.5 * (a + b))
}

/// C_i⁰ = ψ_i(t_mid + L/v(0)) + φ(t_mid) with t_mid the middle of the departure window.
pub fn initial_guess(problem: &Problem, opts: &PlannerOptions) -> Vec<f64> {
    let t_mid = 0.5 * (opts.departure_window.0 + opts.departure_window.1);
    let t_ff = t_mid + problem.free_flow_time();
    (0..problem.spec.len()).map(|i| problem.spec.psi(i, t_ff) + problem.spec.phi(t_mid)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct StartSummary {
    pub start: usize,
    pub initial: Vec<f64>,
    pub constants: Option<Vec<f64>>,
    pub residual: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub constants: Vec<f64>,
    pub kappa: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub starts: Vec<StartSummary>,
    pub distinct_roots: usize,
    pub refinements: Vec<(usize, Vec<f64>)>,
    pub log: Vec<IterationLog>,
}

/// Multistart solve with grid refinement; returns the accepted constants.
pub fn fit_constants(problem: &Problem, opts: &PlannerOptions) -> Result<SolveReport, PlanError> {
    let c0 = initial_guess(problem, opts);
    let n = c0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut inits = vec![c0.clone()];
    for _ in 1..opts.starts.max(1) {
        inits.push(c0.iter().map(|c| c + rng.gen_range(-0.5..0.5) * (1.0 + c.abs())).collect());
    }
    let gmax = problem.spec.groups.iter().map(|g| g.size).fold(0.0, f64::max);
    let accept = opts.residual_tol * gmax;

    let outcomes: Vec<Result<SolveOutcome, PlanError>> =
        inits.par_iter().enumerate().map(|(s, c)| solve_from(problem, c, opts, s)).collect();

    let mut starts = Vec::new();
    let mut roots: Vec<(SolveOutcome, f64)> = Vec::new();
    let mut best_fail: Option<SolveOutcome> = None;
    for (s, (init, out)) in inits.iter().zip(outcomes).enumerate() {
        match out {
            Ok(o) => {
                starts.push(StartSummary {
                    start: s,
                    initial: init.clone(),
                    constants: Some(o.constants.clone()),
                    residual: Some(o.residual),
                    error: None,
                });
                if o.residual <= accept {
                    let dup = roots.iter().any(|(r, _)| {
                        r.constants.iter().zip(&o.constants).all(|(a, b)| (a - b).abs() <= 1e-6 * (1.0 + a.abs()))
                    });
                    if !dup {
                        let cost = plan_cost_at(problem, &o.constants, opts).unwrap_or(f64::INFINITY);
                        roots.push((o, cost));
                    }
                } else if best_fail.as_ref().is_none_or(|b| o.residual < b.residual) {
                    best_fail = Some(o);
                }
            }
            Err(e) => starts.push(StartSummary { start: s, initial: init.clone(), constants: None, residual: None, error: Some(e.to_string()) }),
        }
    }
    if roots.is_empty() {
        let (iterations, residual) = best_fail.map_or((opts.max_iterations, f64::INFINITY), |b| (b.iterations, b.residual));
        return Err(PlanError::MaxIterations { iterations, residual });
    }
    if roots.len() > 1 {
        log::warn!(
            "{} distinct solutions of Lambda(C) = G found; keeping the cheapest: {:?}",
            roots.len(),
            roots.iter().map(|(r, c)| (r.constants.clone(), *c)).collect::<Vec<_>>()
        );
    }
    let distinct_roots = roots.len();
    roots.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (mut best, _) = roots.swap_remove(0);
    let mut log = best.log.clone();
    let mut refinements = vec![(opts.arrival_cells, best.constants.clone())];

    if opts.refine {
        let mut o = opts.clone();
        for _ in 0..opts.max_refinements {
            o.arrival_cells *= 2;
            o.departure_cells *= 2;
            let next = solve_from(problem, &best.constants, &o, 0)?;
            let moved = next.constants.iter().zip(&best.constants).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            log.extend(next.log.iter().cloned());
            refinements.push((o.arrival_cells, next.constants.clone()));
            best = next;
            if moved < opts.refine_tol {
                break;
            }
        }
    }
    debug_assert_eq!(best.constants.len(), n);
    if best.residual > accept {
        return Err(PlanError::MaxIterations { iterations: best.iterations, residual: best.residual });
    }
    Ok(SolveReport {
        constants: best.constants,
        kappa: best.kappa,
        residual: best.residual,
        iterations: best.iterations,
        starts,
        distinct_roots,
        refinements,
        log,
    })
}

fn plan_cost_at(problem: &Problem, c: &[f64], opts: &PlannerOptions) -> Result<f64, PlanError> {
    let cand = build_candidate(problem, c, opts)?;
    let plan = backout_departures(problem, &cand, opts)?;
    Ok(plan.cost.total)
}

/// A fitted plan with per-group departure profiles.
#[derive(Debug, Clone)]
pub struct Plan {
    pub candidate: Candidate,
    pub partition: Partition,
    /// A_i* = η(A_i).
    pub departure_sets: Vec<Vec<(f64, f64)>>,
    /// Σ_i ū_i.
    pub departures: BoundaryProfile,
    /// ū_i per departure cell.
    pub group_rates: Vec<Vec<f64>>,
    pub cost: CostBreakdown,
}

impl Plan {
    pub fn constants(&self) -> &[f64] {
        &self.candidate.constants
    }

    pub fn group_profile(&self, i: usize) -> Result<BoundaryProfile, LaxError> {
        let p = &self.departures;
        BoundaryProfile::from_rates(p.t_lo(), p.cell_width(), self.group_rates[i].clone())
    }

    /// Ū_i(t): cars of group i departed by t.
    pub fn group_departed_by(&self, problem: &Problem, i: usize, t: f64) -> f64 {
        self.departure_sets[i]
            .iter()
            .filter(|&&(a, _)| a < t)
            .map(|&(a, b)| self.candidate.departed_by(problem, t.min(b)) - self.candidate.departed_by(problem, a))
            .sum()
    }

    /// Per-group cell averages of ū_i on the grid t_lo + k·h, k < cells.
    pub fn resample(&self, problem: &Problem, t_lo: f64, h: f64, cells: usize) -> Vec<Vec<f64>> {
        (0..self.group_rates.len())
            .map(|i| {
                let cum: Vec<f64> = (0..=cells).map(|k| self.group_departed_by(problem, i, t_lo + k as f64 * h)).collect();
                cum.windows(2).map(|w| ((w[1] - w[0]) / h).max(0.0)).collect()
            })
            .collect()
    }

    pub fn group_masses(&self) -> Vec<f64> {
        let h = self.departures.cell_width();
        self.group_rates.iter().map(|r| r.iter().sum::<f64>() * h).collect()
    }
}

/// Characteristic field of a candidate, for point queries of u(t, x).
pub struct CharacteristicField<'a> {
    cand: &'a Candidate,
    model: &'a FluxModel,
}

impl<'a> CharacteristicField<'a> {
    pub fn new(cand: &'a Candidate, model: &'a FluxModel) -> Self {
        Self { cand, model }
    }

    /// u(t, x) from the straight characteristics through the arrival nodes.
    pub fn flux(&self, t: f64, x: f64) -> f64 {
        let nodes = &self.cand.nodes;
        let l = self.cand.length;
        let q = |m: usize| nodes[m].departure + (x / l) * (nodes[m].t - nodes[m].departure);
        let n = nodes.len();
        if t <= q(0) || t >= q(n - 1) {
            return 0.0;
        }
        let (mut lo, mut hi) = (0, n - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if q(mid) <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (qa, qb) = (q(lo), q(hi));
        let w = if qb > qa { (t - qa) / (qb - qa) } else { 0.0 };
        nodes[lo].flux + w * (nodes[hi].flux - nodes[lo].flux)
    }

    /// dt/dx = 1/v along a car path.
    fn pace(&self, t: f64, x: f64) -> Result<f64, PlanError> {
        let u = self.flux(t, x);
        if u >= self.model.max_flux() * (1.0 - 1e-9) {
            return Err(PlanError::TrajectoryStalled { x, t });
        }
        Ok(1.0 / self.model.velocity(self.model.g_free(u.max(0.0))))
    }

    /// Departure time η(T) of the car reaching (T, L), by adaptive RK4 backward in x.
    pub fn departure_of(&self, t_arr: f64) -> Result<f64, PlanError> {
        let l = self.cand.length;
        let mut x = l;
        let mut t = t_arr;
        let mut h = l / 64.0;
        let tol = 1e-11 * (1.0 + t_arr.abs());
        let rk4 = |t: f64, x: f64, h: f64| -> Result<f64, PlanError> {
            // integrate from x to x − h
            let k1 = self.pace(t, x)?;
            let k2 = self.pace(t - 0.5 * h * k1, x - 0.5 * h)?;
            let k3 = self.pace(t - 0.5 * h * k2, x - 0.5 * h)?;
            let k4 = self.pace(t - h * k3, x - h)?;
            Ok(t - h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0)
        };
        let mut steps = 0;
        while x > 0.0 {
            h = h.min(x);
            let full = rk4(t, x, h)?;
            let half = rk4(t, x, 0.5 * h)?;
            let two = rk4(half, x - 0.5 * h, 0.5 * h)?;
            let err = (two - full).abs();
            if err <= tol || h < 1e-9 * l {
                t = two + (two - full) / 15.0;
                x -= h;
                if err < tol / 32.0 {
                    h *= 2.0;
                }
            } else {
                h *= 0.5;
            }
            steps += 1;
            if steps > 1_000_000 {
                return Err(PlanError::TrajectoryStalled { x, t });
            }
        }
        Ok(t)
    }
}

/// Split the departures among groups through the arrival sets and their
/// departure images, and evaluate the cost of the plan.
pub fn backout_departures(problem: &Problem, cand: &Candidate, opts: &PlannerOptions) -> Result<Plan, PlanError> {
    let partition = arrival_partition(cand);
    let field = CharacteristicField::new(cand, &problem.model);
    let mut departure_sets = Vec::with_capacity(partition.sets.len());
    for set in &partition.sets {
        let mut out = Vec::with_capacity(set.len());
        for &(a, b) in set {
            out.push((field.departure_of(a)?, field.departure_of(b)?));
        }
        departure_sets.push(out);
    }

    let (d_lo, d_hi) = opts.departure_window;
    let cells = opts.departure_cells.max(1);
    let h = (d_hi - d_lo) / cells as f64;
    let mut cum = Vec::with_capacity(cells + 1);
    for k in 0..=cells {
        cum.push(cand.departed_by(problem, d_lo + k as f64 * h));
    }
    let c0 = cum[0];
    for c in cum.iter_mut() {
        *c = (*c - c0).max(0.0);
    }
    for k in 1..cum.len() {
        if cum[k] < cum[k - 1] {
            cum[k] = cum[k - 1];
        }
    }
    let departures = BoundaryProfile::from_cumulative(d_lo, h, cum)?;

    let n_groups = problem.spec.len();
    let mut group_rates = vec![vec![0.0; cells]; n_groups];
    for (k, &r) in departures.rates().iter().enumerate() {
        if r <= 0.0 {
            continue;
        }
        let (a, b) = (departures.node_time(k), departures.node_time(k + 1));
        let mut weights: Vec<f64> = departure_sets
            .iter()
            .map(|set| set.iter().map(|&(s0, s1)| (b.min(s1) - a.max(s0)).max(0.0)).sum::<f64>() / h)
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            // cell outside every A_i* within rounding: attribute by the arrival of its midpoint
            let t_arr = cand.group_at(field_arrival(cand, 0.5 * (a + b)));
            weights = vec![0.0; n_groups];
            weights[t_arr.unwrap_or(0)] = 1.0;
        }
        let total: f64 = weights.iter().sum();
        for i in 0..n_groups {
            group_rates[i][k] = r * weights[i] / total;
        }
    }

    let mut departure_cost = 0.0;
    for (k, &r) in departures.rates().iter().enumerate() {
        if r > 0.0 {
            departure_cost += r * gauss2(|t| problem.spec.phi(t), departures.node_time(k), departures.node_time(k + 1));
        }
    }
    let total = departure_cost + cand.arrival_cost.iter().sum::<f64>();
    let cost = CostBreakdown { departure: departure_cost, arrival: cand.arrival_cost.clone(), total };

    Ok(Plan { candidate: cand.clone(), partition, departure_sets, departures, group_rates, cost })
}

/// Arrival time of the characteristic leaving at departure time t.
fn field_arrival(cand: &Candidate, t: f64) -> f64 {
    bisect_predicate(|s| cand.departure_at(s) >= t, cand.window.0, cand.window.1, 1e-12).1
}

impl Candidate {
    /// U(T, L): cars arrived by T.
    pub fn arrivals_by(&self, problem: &Problem, t_arr: f64) -> f64 {
        if t_arr >= self.window.1 {
            return self.total_arrivals();
        }
        if t_arr <= self.window.0 {
            return 0.0;
        }
        let node = &self.nodes[self.cell_of(t_arr)];
        node.count + gauss2(|s| self.flux_exact(problem, s), node.t, t_arr.max(node.t))
    }

    /// Ū(t) = U(T(t), L) − L·g*((T(t) − t)/L), T(t) being the inverse of t(T).
    pub fn departed_by(&self, problem: &Problem, t: f64) -> f64 {
        let env = psi_envelope(&problem.spec, &self.constants);
        let l = problem.length;
        for (a, b) in self.support() {
            let (ta, tb) = (self.departure_at(a), self.departure_at(b));
            if t <= ta {
                return self.arrivals_by(problem, a);
            }
            if t < tb {
                let target = -problem.spec.phi(t);
                let (lo, hi) = bisect_predicate(|s| env.value(s) >= target, a, b, 1e-14 * (1.0 + b.abs()));
                let t_arr = 0.5 * (lo + hi);
                let p = ((t_arr - t) / l).max(problem.model.gp0());
                return (self.arrivals_by(problem, t_arr) - l * problem.model.g_star_f64(p)).max(0.0);
            }
        }
        self.total_arrivals()
    }

    /// u(T, L) recomputed from the constants (no grid interpolation).
    pub fn flux_exact(&self, problem: &Problem, t: f64) -> f64 {
        let b = Builder::new(problem, &self.constants, self.departure_window.0);
        b.flux(t)
    }
}

/// Fit the constants and build the plan.
pub fn solve(problem: &Problem, opts: &PlannerOptions) -> Result<(Plan, SolveReport), PlanError> {
    let report = fit_constants(problem, opts)?;
    let mut o = opts.clone();
    if let Some((cells, _)) = report.refinements.last() {
        let factor = cells / opts.arrival_cells.max(1);
        o.arrival_cells = *cells;
        o.departure_cells = opts.departure_cells * factor.max(1);
    }
    let cand = build_candidate(problem, &report.constants, &o)?;
    let plan = backout_departures(problem, &cand, &o)?;
    Ok((plan, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::Group;

    fn two_group_problem() -> Problem {
        let spec = GroupSpec::new(
            "-t",
            vec![Group::new("first", 2.51, "exp(t-4)").unwrap(), Group::new("second", 2.51, "exp(t-7.6)").unwrap()],
        )
        .unwrap();
        Problem::new(spec, FluxModel::parse("2-rho", 2.0).unwrap(), 10.0).unwrap()
    }

    fn single(size: f64) -> Problem {
        let spec = GroupSpec::new("-t", vec![Group::new("only", size, "exp(t-4)").unwrap()]).unwrap();
        Problem::new(spec, FluxModel::parse("2-rho", 2.0).unwrap(), 10.0).unwrap()
    }

    fn opts() -> PlannerOptions {
        PlannerOptions { departure_window: (-8.0, 6.0), arrival_cells: 2000, departure_cells: 2000, ..Default::default() }
    }

    #[test]
    fn envelope_single_group() {
        let p = single(1.0);
        let c = [0.7];
        let env = psi_envelope(&p.spec, &c);
        for t in [-1.0, 3.0, 6.0] {
            assert_eq!(env.value(t), (t - 4.0f64).exp() - 0.7);
            assert_eq!(env.active(t), 0);
        }
    }

    #[test]
    fn envelope_switch_matches_closed_form() {
        let p = two_group_problem();
        let c = [5.18, 2.10];
        let env = psi_envelope(&p.spec, &c);
        let sw = env.switches(-1.0, 12.0, 100);
        assert_eq!(sw.len(), 1);
        assert_eq!((sw[0].1, sw[0].2), (0, 1));
        // e^{T−4} − e^{T−7.6} = C1 − C2
        let exact = 4.0 + ((5.18 - 2.10) / (1.0 - (-3.6f64).exp())).ln();
        assert!((sw[0].0 - exact).abs() < 1e-10);
    }

    #[test]
    fn terminus_for_single_group() {
        let p = single(1.0);
        for t in [0.1, 1.0, 3.0] {
            let big = characteristic_terminus(&p.spec, &[0.0], t, (-20.0, 20.0)).unwrap();
            assert!((big - (4.0 + t.ln())).abs() < 1e-12);
            // substitute back
            assert!((p.spec.phi(t) + p.spec.psi(0, big)).abs() < 1e-12);
        }
        let a = characteristic_terminus(&p.spec, &[0.0], 0.5, (-20.0, 20.0)).unwrap();
        let b = characteristic_terminus(&p.spec, &[0.0], 0.6, (-20.0, 20.0)).unwrap();
        assert!(b >= a);
        assert!(matches!(
            characteristic_terminus(&p.spec, &[0.0], -1.0, (-20.0, 20.0)),
            Err(PlanError::NoRootInWindow { .. })
        ));
    }

    #[test]
    fn empty_candidate() {
        let p = single(1.0);
        // ψ − C = e^{T−4} + 100 never meets −φ on the window
        let cand = build_candidate(&p, &[-100.0], &opts()).unwrap();
        assert_eq!(cand.kappa, vec![0.0]);
        assert!(cand.support().is_empty());
    }

    #[test]
    fn flux_vanishes_at_free_flow_edge() {
        let p = two_group_problem();
        let cand = build_candidate(&p, &[5.18, 2.10], &opts()).unwrap();
        let sup = cand.support();
        assert_eq!(sup.len(), 1);
        let (a, b) = sup[0];
        assert!(cand.flux_exact(&p, a).abs() < 1e-6);
        assert!(cand.flux_exact(&p, b).abs() < 1e-6);
        assert!(cand.flux_exact(&p, 0.5 * (a + b)) > 0.1);
        // Σκ equals the arrival integral
        let total: f64 = cand.kappa.iter().sum();
        assert!((total - cand.total_arrivals()).abs() < 1e-12);
    }

    #[test]
    fn single_group_scalar_fit() {
        let p = single(1.0);
        let out = solve_constants(&p, &initial_guess(&p, &opts()), &opts()).unwrap();
        assert!(out.residual < 1e-9, "{out:?}");
        let c = out.constants[0];
        // κ is increasing in C
        let lo = build_candidate(&p, &[c - 0.01], &opts()).unwrap().kappa[0];
        let hi = build_candidate(&p, &[c + 0.01], &opts()).unwrap().kappa[0];
        assert!(lo < 1.0 && hi > 1.0);
    }

    #[test]
    fn permutation_equivariance() {
        let p = two_group_problem();
        let mut q = p.clone();
        q.spec.groups.reverse();
        let o = opts();
        let a = fit_constants(&p, &o).unwrap();
        let b = fit_constants(&q, &o).unwrap();
        assert!((a.constants[0] - b.constants[1]).abs() < 1e-6);
        assert!((a.constants[1] - b.constants[0]).abs() < 1e-6);
    }

    #[test]
    fn empty_road_trajectory_and_fifo() {
        let p = two_group_problem();
        let cand = build_candidate(&p, &[5.18, 2.10], &opts()).unwrap();
        let field = CharacteristicField::new(&cand, &p.model);
        let t = field.departure_of(-2.0).unwrap();
        assert!((t - (-7.0)).abs() < 1e-9);
        let (a, b) = cand.support()[0];
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=40 {
            let tt = a + (b - a) * k as f64 / 40.0;
            let e = field.departure_of(tt).unwrap();
            assert!(e > prev);
            prev = e;
        }
    }
}
