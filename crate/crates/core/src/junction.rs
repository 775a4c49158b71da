//! Single-intersection models: flux bounds of incoming and outgoing roads,
//! the admissible region Ω, three Riemann solvers and the buffer model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fluxmodel::FluxModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JunctionError {
    #[error("density {rho} outside [0, {rho_jam}]")]
    DensityOutOfRange { rho: f64, rho_jam: f64 },
    #[error("junction shape: {0}")]
    ModelShapeError(String),
    #[error("invalid junction data: {0}")]
    Invalid(String),
}

/// Largest flux road i can send: f(ρ) on the free side, M on the congested side.
pub fn max_exit_flux(model: &FluxModel, rho: f64) -> Result<f64, JunctionError> {
    check_density(model, rho)?;
    Ok(if rho >= model.rho_max() { model.max_flux() } else { model.flux(rho) })
}

/// Largest flux road j can receive: M on the free side, f(ρ) on the congested side.
pub fn max_entry_flux(model: &FluxModel, rho: f64) -> Result<f64, JunctionError> {
    check_density(model, rho)?;
    Ok(if rho < model.rho_max() { model.max_flux() } else { model.flux(rho) })
}

fn check_density(model: &FluxModel, rho: f64) -> Result<(), JunctionError> {
    if rho.is_finite() && rho >= 0.0 && rho <= model.rho_jam() {
        Ok(())
    } else {
        Err(JunctionError::DensityOutOfRange { rho, rho_jam: model.rho_jam() })
    }
}

/// Intersection data: priorities c_i, turning fractions θ_ij (rows sum to 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub priorities: Vec<f64>,
    pub turning: Vec<Vec<f64>>,
}

impl Junction {
    pub fn new(priorities: Vec<f64>, turning: Vec<Vec<f64>>) -> Result<Self, JunctionError> {
        let m = priorities.len();
        if m == 0 || turning.len() != m {
            return Err(JunctionError::ModelShapeError(format!("{m} priorities, {} turning rows", turning.len())));
        }
        let n = turning[0].len();
        if n == 0 || turning.iter().any(|r| r.len() != n) {
            return Err(JunctionError::ModelShapeError("turning rows differ in length".into()));
        }
        if priorities.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(JunctionError::Invalid(format!("priorities {priorities:?}")));
        }
        if (priorities.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(JunctionError::Invalid(format!("priorities sum to {}", priorities.iter().sum::<f64>())));
        }
        for (i, row) in turning.iter().enumerate() {
            if row.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(JunctionError::Invalid(format!("turning row {i} = {row:?}")));
            }
        }
        Ok(Self { priorities, turning })
    }

    pub fn incoming(&self) -> usize {
        self.priorities.len()
    }

    pub fn outgoing(&self) -> usize {
        self.turning[0].len()
    }

    /// Σ_i f_i θ_ij.
    pub fn outgoing_fluxes(&self, f: &[f64]) -> Vec<f64> {
        (0..self.outgoing()).map(|j| f.iter().zip(&self.turning).map(|(fi, row)| fi * row[j]).sum()).collect()
    }
}

/// f_i^max and f_j^max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxBounds {
    pub incoming: Vec<f64>,
    pub outgoing: Vec<f64>,
}

impl FluxBounds {
    pub fn from_densities(
        incoming: &[(FluxModel, f64)],
        outgoing: &[(FluxModel, f64)],
    ) -> Result<Self, JunctionError> {
        Ok(Self {
            incoming: incoming.iter().map(|(m, r)| max_exit_flux(m, *r)).collect::<Result<_, _>>()?,
            outgoing: outgoing.iter().map(|(m, r)| max_entry_flux(m, *r)).collect::<Result<_, _>>()?,
        })
    }

    fn check(&self, j: &Junction) -> Result<(), JunctionError> {
        if self.incoming.len() != j.incoming() || self.outgoing.len() != j.outgoing() {
            return Err(JunctionError::ModelShapeError(format!(
                "bounds {}×{} for a {}×{} junction",
                self.incoming.len(),
                self.outgoing.len(),
                j.incoming(),
                j.outgoing()
            )));
        }
        Ok(())
    }
}

/// Exact membership in Ω.
pub fn admissible_region_contains(j: &Junction, bounds: &FluxBounds, f: &[f64]) -> bool {
    if f.len() != j.incoming() {
        return false;
    }
    if f.iter().zip(&bounds.incoming).any(|(fi, m)| !(*fi >= 0.0 && fi <= m)) {
        return false;
    }
    j.outgoing_fluxes(f).iter().zip(&bounds.outgoing).all(|(fj, m)| fj <= m)
}

/// Ω membership up to `tol` per constraint.
pub fn admissible_within(j: &Junction, bounds: &FluxBounds, f: &[f64], tol: f64) -> bool {
    f.len() == j.incoming()
        && f.iter().zip(&bounds.incoming).all(|(fi, m)| *fi >= -tol && *fi <= m + tol)
        && j.outgoing_fluxes(f).iter().zip(&bounds.outgoing).all(|(fj, m)| *fj <= m + tol)
}

/// Which constraints of Ω are active at f.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Activity {
    pub incoming_at_max: Vec<bool>,
    pub outgoing_at_max: Vec<bool>,
}

pub fn activity(j: &Junction, bounds: &FluxBounds, f: &[f64], tol: f64) -> Activity {
    Activity {
        incoming_at_max: f.iter().zip(&bounds.incoming).map(|(fi, m)| (m - fi).abs() <= tol).collect(),
        outgoing_at_max: j.outgoing_fluxes(f).iter().zip(&bounds.outgoing).map(|(fj, m)| (m - fj).abs() <= tol).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpSolution {
    pub fluxes: Vec<f64>,
    pub objective: f64,
    /// Several vertices attain the maximum.
    pub tie: bool,
}

/// Maximize Σ c_i f_i over Ω by enumerating its vertices.
pub fn solve_lp(j: &Junction, bounds: &FluxBounds) -> Result<LpSolution, JunctionError> {
    bounds.check(j)?;
    let (m, n) = (j.incoming(), j.outgoing());
    if m > 4 || n > 4 {
        return Err(JunctionError::ModelShapeError(format!("{m}×{n} exceeds 4×4")));
    }
    // constraints a·f ≤ b
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(2 * m + n);
    for i in 0..m {
        let mut a = vec![0.0; m];
        a[i] = -1.0;
        rows.push((a, 0.0));
        let mut a = vec![0.0; m];
        a[i] = 1.0;
        rows.push((a, bounds.incoming[i]));
    }
    for jj in 0..n {
        rows.push(((0..m).map(|i| j.turning[i][jj]).collect(), bounds.outgoing[jj]));
    }
    let scale = 1.0 + bounds.incoming.iter().chain(&bounds.outgoing).fold(0.0f64, |a, b| a.max(b.abs()));
    let feas_tol = 1e-12 * scale;

    let mut vertices: Vec<Vec<f64>> = Vec::new();
    for combo in combinations(rows.len(), m) {
        let a = DMatrix::from_fn(m, m, |r, c| rows[combo[r]].0[c]);
        let b = DVector::from_fn(m, |r, _| rows[combo[r]].1);
        let Some(x) = a.lu().solve(&b) else { continue };
        let x: Vec<f64> = x.iter().copied().collect();
        if !x.iter().all(|v| v.is_finite()) {
            continue;
        }
        let ok = rows.iter().all(|(a, b)| a.iter().zip(&x).map(|(ai, xi)| ai * xi).sum::<f64>() <= b + feas_tol);
        if ok {
            vertices.push(x.iter().map(|v| v.max(0.0)).collect());
        }
    }
    let objective = |f: &[f64]| f.iter().zip(&j.priorities).map(|(fi, c)| fi * c).sum::<f64>();
    let best = vertices.iter().map(|v| objective(v)).fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * scale;
    let mut optimal: Vec<&Vec<f64>> = vertices.iter().filter(|v| objective(v) >= best - tol).collect();
    optimal.sort_by(|a, b| {
        for (x, y) in a.iter().zip(b.iter()) {
            match y.partial_cmp(x) {
                Some(std::cmp::Ordering::Equal) | None => continue,
                Some(o) => return o,
            }
        }
        std::cmp::Ordering::Equal
    });
    let first = optimal[0].clone();
    let tie = optimal.iter().any(|v| v.iter().zip(&first).any(|(a, b)| (a - b).abs() > 1e-9 * scale));
    // round onto Ω so the exact membership check holds
    let fluxes = pull_inside(j, bounds, first);
    Ok(LpSolution { objective: objective(&fluxes), fluxes, tie })
}

fn pull_inside(j: &Junction, bounds: &FluxBounds, mut f: Vec<f64>) -> Vec<f64> {
    for (fi, m) in f.iter_mut().zip(&bounds.incoming) {
        *fi = fi.clamp(0.0, *m);
    }
    for _ in 0..64 {
        if admissible_region_contains(j, bounds, &f) {
            break;
        }
        let out = j.outgoing_fluxes(&f);
        let worst = out
            .iter()
            .zip(&bounds.outgoing)
            .map(|(o, m)| if *o > 0.0 { m / o } else { 1.0 })
            .fold(1.0f64, f64::min);
        let shrink = worst * (1.0 - f64::EPSILON);
        for fi in f.iter_mut() {
            *fi *= shrink;
        }
    }
    f
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] < n - k + i {
                idx[i] += 1;
                for r in i + 1..k {
                    idx[r] = idx[r - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Fluxes γ_i(s̄) = min(c_i s̄, f_i^max) with s̄ the largest s keeping every outgoing bound.
pub fn solve_priority_curve(j: &Junction, bounds: &FluxBounds) -> Result<Vec<f64>, JunctionError> {
    bounds.check(j)?;
    if j.priorities.iter().any(|&c| c <= 0.0) {
        return Err(JunctionError::Invalid("priority curve needs positive priorities".into()));
    }
    let s_bar = priority_parameter(j, bounds);
    let f: Vec<f64> = j.priorities.iter().zip(&bounds.incoming).map(|(c, m)| (c * s_bar).min(*m)).collect();
    Ok(pull_inside(j, bounds, f))
}

/// s̄ = min over j of the largest s with Σ_i min(c_i s, f_i^max) θ_ij ≤ f_j^max.
pub fn priority_parameter(j: &Junction, bounds: &FluxBounds) -> f64 {
    let m = j.incoming();
    let s_cap = (0..m).map(|i| bounds.incoming[i] / j.priorities[i]).fold(0.0f64, f64::max);
    let mut kinks: Vec<f64> = (0..m).map(|i| bounds.incoming[i] / j.priorities[i]).collect();
    kinks.sort_by(f64::total_cmp);
    let load = |jj: usize, s: f64| -> f64 { (0..m).map(|i| (j.priorities[i] * s).min(bounds.incoming[i]) * j.turning[i][jj]).sum() };
    let mut s_bar = s_cap;
    for jj in 0..j.outgoing() {
        let cap = bounds.outgoing[jj];
        if load(jj, s_cap) <= cap {
            continue;
        }
        // load is piecewise linear and nondecreasing in s: locate the crossing between kinks
        let mut lo = 0.0;
        for &k in &kinks {
            if load(jj, k) > cap {
                let (l0, l1) = (load(jj, lo), load(jj, k));
                let s = if l1 > l0 { lo + (cap - l0) * (k - lo) / (l1 - l0) } else { lo };
                s_bar = s_bar.min(s);
                break;
            }
            lo = k;
        }
    }
    s_bar
}

/// Road 2 yields: f_1 maximal with f_2 = 0, then f_2 maximal only if f_1 = f_1^max.
pub fn solve_stop_sign(j: &Junction, bounds: &FluxBounds) -> Result<Vec<f64>, JunctionError> {
    bounds.check(j)?;
    if j.incoming() != 2 {
        return Err(JunctionError::ModelShapeError(format!("stop sign needs 2 incoming roads, got {}", j.incoming())));
    }
    let mut f1 = bounds.incoming[0];
    for jj in 0..j.outgoing() {
        let t = j.turning[0][jj];
        if t > 0.0 {
            f1 = f1.min(bounds.outgoing[jj] / t);
        }
    }
    let mut f2 = 0.0;
    if f1 >= bounds.incoming[0] {
        f2 = bounds.incoming[1];
        for jj in 0..j.outgoing() {
            let t = j.turning[1][jj];
            if t > 0.0 {
                f2 = f2.min(((bounds.outgoing[jj] - f1 * j.turning[0][jj]) / t).max(0.0));
            }
        }
    }
    Ok(pull_inside(j, bounds, vec![f1.max(0.0), f2]))
}

/// Buffer of capacity `capacity` holding queues q_j.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Buffer {
    pub capacity: f64,
    pub queues: Vec<f64>,
    /// Admission gain k in f_i = min(f_i^max, c_i·k·(capacity − Σq)).
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BufferStep {
    pub incoming: Vec<f64>,
    pub outgoing: Vec<f64>,
    pub queues: Vec<f64>,
}

impl Buffer {
    /// Gain chosen so that the admission rate spans the whole priority curve:
    /// k·capacity = max_i f_i^max / c_i.
    pub fn scaled(j: &Junction, bounds: &FluxBounds, capacity: f64) -> Result<Self, JunctionError> {
        if !(capacity > 0.0) {
            return Err(JunctionError::Invalid(format!("buffer capacity {capacity}")));
        }
        let s_cap = j
            .priorities
            .iter()
            .zip(&bounds.incoming)
            .filter(|(c, _)| **c > 0.0)
            .map(|(c, m)| m / c)
            .fold(0.0f64, f64::max);
        Ok(Self { capacity, queues: vec![0.0; j.outgoing()], gain: s_cap.max(f64::MIN_POSITIVE) / capacity })
    }

    /// Admission exactly as c_i·(capacity − Σq).
    pub fn unscaled(j: &Junction, capacity: f64) -> Result<Self, JunctionError> {
        if !(capacity > 0.0) {
            return Err(JunctionError::Invalid(format!("buffer capacity {capacity}")));
        }
        Ok(Self { capacity, queues: vec![0.0; j.outgoing()], gain: 1.0 })
    }

    /// Largest stable explicit step.
    pub fn max_step(&self, j: &Junction, bounds: &FluxBounds) -> f64 {
        let csum: f64 = j.priorities.iter().sum();
        let fmax = bounds.incoming.iter().chain(&bounds.outgoing).fold(0.0f64, |a, b| a.max(*b));
        let rate = (self.gain * csum).max(fmax / self.capacity);
        1.0 / (10.0 * rate)
    }
}

/// One explicit Euler step of the buffer queues.
pub fn buffer_step(j: &Junction, bounds: &FluxBounds, buf: &Buffer, dt: f64) -> Result<BufferStep, JunctionError> {
    bounds.check(j)?;
    if buf.queues.len() != j.outgoing() {
        return Err(JunctionError::ModelShapeError(format!("{} queues for {} outgoing roads", buf.queues.len(), j.outgoing())));
    }
    if buf.queues.iter().any(|q| *q < 0.0) || buf.queues.iter().sum::<f64>() > buf.capacity * (1.0 + 1e-12) {
        return Err(JunctionError::Invalid(format!("queues {:?}", buf.queues)));
    }
    let room = (buf.capacity - buf.queues.iter().sum::<f64>()).max(0.0);
    let incoming: Vec<f64> =
        j.priorities.iter().zip(&bounds.incoming).map(|(c, m)| m.min(c * buf.gain * room)).collect();
    let inflow = j.outgoing_fluxes(&incoming);
    let mut outgoing = Vec::with_capacity(j.outgoing());
    let mut queues = Vec::with_capacity(j.outgoing());
    for (jj, &q) in buf.queues.iter().enumerate() {
        let mut fj = if q > 0.0 { bounds.outgoing[jj] } else { bounds.outgoing[jj].min(inflow[jj]) };
        let mut next = q + dt * (inflow[jj] - fj);
        if next < 0.0 {
            // the queue empties inside the step: release only what was there
            fj = inflow[jj] + q / dt;
            next = 0.0;
        }
        outgoing.push(fj);
        queues.push(next);
    }
    let total: f64 = queues.iter().sum();
    if total > buf.capacity {
        let s = buf.capacity / total;
        for q in queues.iter_mut() {
            *q *= s;
        }
    }
    Ok(BufferStep { incoming, outgoing, queues })
}

/// Integrate the buffer from its state until the queues settle or `t_end` passes.
pub fn buffer_run(j: &Junction, bounds: &FluxBounds, buf: &Buffer, dt: f64, t_end: f64) -> Result<(Vec<(f64, BufferStep)>, Buffer), JunctionError> {
    let mut state = buf.clone();
    let mut series = Vec::new();
    let mut t = 0.0;
    while t < t_end {
        let step = buffer_step(j, bounds, &state, dt)?;
        t += dt;
        state.queues = step.queues.clone();
        series.push((t, step));
    }
    Ok((series, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn green() -> FluxModel {
        FluxModel::parse("2 - rho", 2.0).unwrap()
    }

    fn two_by_two() -> (Junction, FluxBounds) {
        let j = Junction::new(vec![0.5, 0.5], vec![vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let b = FluxBounds { incoming: vec![0.8, 0.9], outgoing: vec![0.6, 1.0] };
        (j, b)
    }

    #[test]
    fn flux_bounds() {
        let m = green();
        assert_eq!(max_exit_flux(&m, 0.0).unwrap(), 0.0);
        assert_eq!(max_exit_flux(&m, 1.5).unwrap(), 1.0);
        assert_eq!(max_exit_flux(&m, 0.5).unwrap(), 0.75);
        assert_eq!(max_entry_flux(&m, 0.5).unwrap(), 1.0);
        assert_eq!(max_entry_flux(&m, 1.5).unwrap(), 0.75);
        assert!(max_exit_flux(&m, 2.5).is_err());
        assert!(max_entry_flux(&m, -0.1).is_err());
    }

    #[test]
    fn region_membership() {
        let (j, b) = two_by_two();
        assert!(admissible_region_contains(&j, &b, &[0.0, 0.0]));
        let slack = FluxBounds { incoming: b.incoming.clone(), outgoing: vec![10.0, 10.0] };
        assert!(admissible_region_contains(&j, &slack, &slack.incoming));
        // 0.7·f1 + 0.4·f2 = 0.6 + 1e-6
        let f2 = 0.5;
        let f1 = (0.6 - 0.4 * f2 + 1e-6) / 0.7;
        assert!(!admissible_region_contains(&j, &b, &[f1, f2]));
    }

    #[test]
    fn lp_single_road() {
        let j = Junction::new(vec![1.0], vec![vec![1.0]]).unwrap();
        let b = FluxBounds { incoming: vec![0.9], outgoing: vec![0.5] };
        assert_eq!(solve_lp(&j, &b).unwrap().fluxes, vec![0.5]);
        let j = Junction::new(vec![1.0], vec![vec![0.5, 0.5]]).unwrap();
        let b = FluxBounds { incoming: vec![0.9], outgoing: vec![0.3, 1.0] };
        let f = solve_lp(&j, &b).unwrap().fluxes[0];
        assert!((f - 0.6).abs() < 1e-15);
    }

    #[test]
    fn lp_ties_are_flagged() {
        // objective parallel to the binding outgoing constraint
        let j = Junction::new(vec![0.5, 0.5], vec![vec![1.0], vec![1.0]]).unwrap();
        let b = FluxBounds { incoming: vec![0.8, 0.8], outgoing: vec![1.0] };
        let s = solve_lp(&j, &b).unwrap();
        assert!(s.tie);
        assert!((s.fluxes[0] - 0.8).abs() < 1e-12);
        assert!((s.fluxes[1] - 0.2).abs() < 1e-12);
        let (j, b) = two_by_two();
        assert!(!solve_lp(&j, &b).unwrap().tie);
    }

    #[test]
    fn priority_curve_cases() {
        let (j, b) = two_by_two();
        let slack = FluxBounds { incoming: b.incoming.clone(), outgoing: vec![10.0, 10.0] };
        assert_eq!(solve_priority_curve(&j, &slack).unwrap(), slack.incoming);
        let f = solve_priority_curve(&j, &b).unwrap();
        assert!(admissible_region_contains(&j, &b, &f));
        let act = activity(&j, &b, &f, 1e-12);
        assert!(act.outgoing_at_max.iter().any(|&a| a) || act.incoming_at_max.iter().all(|&a| a));
        // equal priorities: both roads get the same flux until one saturates
        assert!((f[0] - f[1]).abs() < 1e-12);
        let one = Junction::new(vec![1.0], vec![vec![1.0]]).unwrap();
        let b1 = FluxBounds { incoming: vec![0.9], outgoing: vec![0.4] };
        assert!((solve_priority_curve(&one, &b1).unwrap()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn stop_sign_branches() {
        let (j, _) = two_by_two();
        let tight = FluxBounds { incoming: vec![0.8, 0.9], outgoing: vec![0.3, 1.0] };
        let f = solve_stop_sign(&j, &tight).unwrap();
        assert!(f[0] < 0.8 && f[1] == 0.0);
        let loose = FluxBounds { incoming: vec![0.5, 0.9], outgoing: vec![0.6, 1.0] };
        let f = solve_stop_sign(&j, &loose).unwrap();
        assert_eq!(f[0], 0.5);
        assert!(f[1] > 0.0);
        assert!(admissible_region_contains(&j, &loose, &f));
        let three = Junction::new(vec![0.3, 0.3, 0.4], vec![vec![1.0]; 3]).unwrap();
        let b3 = FluxBounds { incoming: vec![1.0; 3], outgoing: vec![1.0] };
        assert!(matches!(solve_stop_sign(&three, &b3), Err(JunctionError::ModelShapeError(_))));
    }

    #[test]
    fn buffer_light_traffic_passes_through() {
        let (j, _) = two_by_two();
        let b = FluxBounds { incoming: vec![0.2, 0.1], outgoing: vec![1.0, 1.0] };
        let buf = Buffer::scaled(&j, &b, 1e-2).unwrap();
        let dt = buf.max_step(&j, &b);
        let step = buffer_step(&j, &b, &buf, dt).unwrap();
        assert_eq!(step.incoming, vec![0.2, 0.1]);
        assert_eq!(step.outgoing, j.outgoing_fluxes(&step.incoming));
        assert_eq!(step.queues, vec![0.0, 0.0]);
    }

    #[test]
    fn full_buffer_admits_nothing() {
        let (j, b) = two_by_two();
        let mut buf = Buffer::scaled(&j, &b, 1e-2).unwrap();
        buf.queues = vec![0.004, 0.006];
        let step = buffer_step(&j, &b, &buf, 1e-6).unwrap();
        assert_eq!(step.incoming, vec![0.0, 0.0]);
        assert!(step.queues.iter().all(|q| *q >= 0.0));
    }

    #[test]
    fn small_buffer_settles_on_priority_curve() {
        let (j, b) = two_by_two();
        let buf = Buffer::scaled(&j, &b, 1e-3).unwrap();
        let dt = 1e-5f64.min(buf.max_step(&j, &b));
        let (series, end) = buffer_run(&j, &b, &buf, dt, 0.05).unwrap();
        let last = &series.last().unwrap().1;
        let target = solve_priority_curve(&j, &b).unwrap();
        for (a, t) in last.incoming.iter().zip(&target) {
            assert!((a - t).abs() < 1e-2, "{:?} vs {target:?}", last.incoming);
        }
        assert!(end.queues.iter().all(|q| *q >= 0.0) && end.queues.iter().sum::<f64>() <= end.capacity);
    }
}
