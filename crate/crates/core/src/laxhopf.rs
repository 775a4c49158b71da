//! Entropy solutions of u_x + g(u)_t = 0 on a road of length L from a departure
//! profile at x = 0, evaluated pointwise through the Lax formula
//!
//! ```text
//! U(t, x) = min_τ { x·g*((t − τ)/x) + Ū(τ) }
//! ```
//!
//! The profile Ū is piecewise linear on a uniform grid, so the minimization is
//! done exactly: on each cell the objective is convex with a closed-form
//! minimizer, and only cells whose characteristics can reach (t, x) are visited.

use serde::Serialize;
use thiserror::Error;

use crate::fluxmodel::FluxModel;
use crate::numerics::bisect_predicate;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LaxError {
    #[error("invalid boundary profile: {0}")]
    InvalidProfile(String),
    #[error("position {x} outside the road [0, {length}]")]
    PositionOutOfRange { x: f64, length: f64 },
    #[error("query {0} cannot be bracketed inside the evaluation window")]
    WindowTooNarrow(f64),
    #[error("no shock at T = {0}: the backward characteristic is unique")]
    NotAShock(f64),
}

/// Cumulative departures Ū on a uniform grid `t_lo + k·h`, linear in between.
/// Outside the window Ū is 0 on the left and G on the right.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryProfile {
    t_lo: f64,
    h: f64,
    cum: Vec<f64>,
    rates: Vec<f64>,
}

impl BoundaryProfile {
    pub fn from_rates(t_lo: f64, h: f64, rates: Vec<f64>) -> Result<Self, LaxError> {
        if !(t_lo.is_finite() && h.is_finite() && h > 0.0) || rates.is_empty() {
            return Err(LaxError::InvalidProfile(format!("bad grid t_lo = {t_lo}, h = {h}, n = {}", rates.len())));
        }
        if let Some((k, r)) = rates.iter().enumerate().find(|(_, r)| !(r.is_finite() && **r >= 0.0)) {
            return Err(LaxError::InvalidProfile(format!("rate {r} in cell {k}")));
        }
        let mut cum = Vec::with_capacity(rates.len() + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for r in &rates {
            acc += r * h;
            cum.push(acc);
        }
        Ok(Self { t_lo, h, cum, rates })
    }

    pub fn from_cumulative(t_lo: f64, h: f64, cum: Vec<f64>) -> Result<Self, LaxError> {
        if cum.len() < 2 || cum[0].abs() > 1e-12 {
            return Err(LaxError::InvalidProfile("cumulative profile must start at 0".into()));
        }
        let mut rates = Vec::with_capacity(cum.len() - 1);
        for w in cum.windows(2) {
            let r = (w[1] - w[0]) / h;
            if !(r >= -1e-12) {
                return Err(LaxError::InvalidProfile("cumulative profile must be nondecreasing".into()));
            }
            rates.push(r.max(0.0));
        }
        let mut p = Self::from_rates(t_lo, h, rates)?;
        p.cum = cum;
        p.cum[0] = 0.0;
        Ok(p)
    }

    pub fn zeros(t_lo: f64, t_hi: f64, cells: usize) -> Self {
        let h = (t_hi - t_lo) / cells as f64;
        Self { t_lo, h, cum: vec![0.0; cells + 1], rates: vec![0.0; cells] }
    }

    pub fn t_lo(&self) -> f64 {
        self.t_lo
    }

    pub fn t_hi(&self) -> f64 {
        self.node_time(self.cells())
    }

    pub fn cell_width(&self) -> f64 {
        self.h
    }

    pub fn cells(&self) -> usize {
        self.rates.len()
    }

    #[inline]
    pub fn node_time(&self, k: usize) -> f64 {
        self.t_lo + k as f64 * self.h
    }

    pub fn cell_mid(&self, k: usize) -> f64 {
        self.t_lo + (k as f64 + 0.5) * self.h
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cum
    }

    /// Total mass G.
    pub fn total(&self) -> f64 {
        *self.cum.last().unwrap_or(&0.0)
    }

    pub fn max_rate(&self) -> f64 {
        self.rates.iter().copied().fold(0.0, f64::max)
    }

    /// Ū(t).
    pub fn value(&self, t: f64) -> f64 {
        let s = (t - self.t_lo) / self.h;
        if s <= 0.0 {
            return 0.0;
        }
        let n = self.cells();
        if s >= n as f64 {
            return self.total();
        }
        let k = (s.floor() as usize).min(n - 1);
        self.cum[k] + self.rates[k] * (t - self.node_time(k))
    }

    /// ū(t), right-continuous, zero outside the window.
    pub fn rate(&self, t: f64) -> f64 {
        let s = (t - self.t_lo) / self.h;
        if s < 0.0 || s >= self.cells() as f64 {
            return 0.0;
        }
        self.rates[(s.floor() as usize).min(self.cells() - 1)]
    }

    /// Smallest closed interval outside of which ū vanishes, or `None` when G = 0.
    pub fn support(&self) -> Option<(f64, f64)> {
        let first = self.rates.iter().position(|&r| r > 0.0)?;
        let last = self.rates.iter().rposition(|&r| r > 0.0)?;
        Some((self.node_time(first), self.node_time(last + 1)))
    }

    /// inf{t : Ū(t) ≥ s} for s ∈ (0, G]; the left end of the support for s = 0.
    pub fn label_time(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return self.support().map_or(self.t_lo, |(a, _)| a);
        }
        let j = self.cum.partition_point(|&c| c < s);
        if j == 0 {
            return self.t_lo;
        }
        if j > self.cells() {
            return self.t_hi();
        }
        let k = j - 1;
        let r = self.rates[k];
        if r <= 0.0 {
            return self.node_time(j);
        }
        (self.node_time(k) + (s - self.cum[k]) / r).min(self.node_time(j))
    }

    /// Same grid with each cell rate scaled by its weight.
    pub fn weighted(&self, weights: &[f64]) -> Result<Self, LaxError> {
        let rates = self.rates.iter().zip(weights).map(|(r, w)| r * w).collect();
        Self::from_rates(self.t_lo, self.h, rates)
    }
}

/// Result of one Lax evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LaxEval {
    /// U(t, x).
    pub value: f64,
    /// Minimal and maximal minimizers τ.
    pub eta_minus: f64,
    pub eta_plus: f64,
    /// u(t−, x) = γ((t − η⁻)/x).
    pub flux: f64,
    /// More than one minimizer within tolerance (a shock passes through (t, x)).
    pub multiple: bool,
}

/// Minimal and maximal backward characteristics from (T, L).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CharInterval {
    pub t: f64,
    pub eta_minus: f64,
    pub eta_plus: f64,
}

impl CharInterval {
    pub fn width(&self) -> f64 {
        self.eta_plus - self.eta_minus
    }
}

/// Relative tolerance for deciding that two minimizers tie.
pub const DEFAULT_SHOCK_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct LaxSolution {
    model: FluxModel,
    profile: BoundaryProfile,
    length: f64,
    /// s_k = g'(ū_k), +∞ for saturated cells.
    slopes: Vec<f64>,
    /// g*(s_k) = s_k·ū_k − g(ū_k).
    conj: Vec<f64>,
    s_max: f64,
    shock_tol: f64,
}

impl LaxSolution {
    pub fn new(model: &FluxModel, profile: BoundaryProfile, length: f64) -> Result<Self, LaxError> {
        if !(length.is_finite() && length > 0.0) {
            return Err(LaxError::InvalidProfile(format!("road length {length}")));
        }
        let m = model.max_flux();
        if let Some((k, r)) = profile.rates.iter().enumerate().find(|(_, &r)| r > m * (1.0 + 1e-12)) {
            return Err(LaxError::InvalidProfile(format!("rate {r} in cell {k} exceeds capacity {m}")));
        }
        let mut slopes = Vec::with_capacity(profile.cells());
        let mut conj = Vec::with_capacity(profile.cells());
        for &r in &profile.rates {
            if r >= m {
                slopes.push(f64::INFINITY);
                conj.push(f64::INFINITY);
            } else {
                let s = model.g_prime(r);
                slopes.push(s);
                conj.push(s * r - model.g_free(r));
            }
        }
        let s_max = slopes.iter().copied().fold(model.gp0(), f64::max);
        Ok(Self {
            model: model.clone(),
            profile,
            length,
            slopes,
            conj,
            s_max,
            shock_tol: DEFAULT_SHOCK_TOL,
        })
    }

    pub fn with_shock_tol(mut self, tol: f64) -> Self {
        self.shock_tol = tol;
        self
    }

    pub fn model(&self) -> &FluxModel {
        &self.model
    }

    pub fn profile(&self) -> &BoundaryProfile {
        &self.profile
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Largest characteristic slope g'(ū) in the data.
    pub fn max_slope(&self) -> f64 {
        self.s_max
    }

    /// Time window on the arrival side outside of which U(·, x) is 0 or G.
    pub fn arrival_window(&self, x: f64) -> (f64, f64) {
        let gp0 = self.model.gp0();
        let s = if self.s_max.is_finite() { self.s_max } else { 1e6 * gp0 };
        (self.profile.t_lo() + x * gp0, self.profile.t_hi() + x * s)
    }

    #[inline]
    fn slope(&self, k: isize) -> f64 {
        if k < 0 || k as usize >= self.slopes.len() {
            self.model.gp0()
        } else {
            self.slopes[k as usize]
        }
    }

    /// Full evaluation at (t, x).
    pub fn eval(&self, t: f64, x: f64) -> Result<LaxEval, LaxError> {
        if !(x >= 0.0 && x <= self.length * (1.0 + 1e-12)) {
            return Err(LaxError::PositionOutOfRange { x, length: self.length });
        }
        if !t.is_finite() {
            return Err(LaxError::WindowTooNarrow(t));
        }
        let p = &self.profile;
        if x == 0.0 {
            let v = p.value(t);
            return Ok(LaxEval { value: v, eta_minus: t, eta_plus: t, flux: p.rate(t), multiple: false });
        }
        let gp0 = self.model.gp0();
        let tau_free = t - x * gp0;
        let (t_lo, h, n) = (p.t_lo, p.h, p.cells());
        if tau_free <= t_lo {
            return Ok(LaxEval { value: 0.0, eta_minus: tau_free, eta_plus: tau_free, flux: 0.0, multiple: false });
        }

        // candidates: (τ, value, flux); every τ bounds U from above, so extra ones are harmless
        let eps = 1e-12 * (1.0 + t.abs());
        let mut cands: Vec<(f64, f64, f64)> = Vec::with_capacity(4);
        cands.push((tau_free, p.value(tau_free), 0.0));
        let scan_lo = if self.s_max.is_finite() { t - x * self.s_max } else { f64::NEG_INFINITY };
        let j_lo = if scan_lo <= t_lo { 0 } else { (((scan_lo - t_lo) / h).ceil() as usize).min(n) };
        let j_hi = (((tau_free - t_lo) / h).floor().max(0.0) as usize).min(n);
        let j_lo = j_lo.saturating_sub(1).min(j_hi);

        for j in j_lo..=j_hi {
            let tau_j = p.node_time(j);
            let pj = (t - tau_j) / x;
            if pj < gp0 {
                continue;
            }
            let (s_left, s_right) = (self.slope(j as isize - 1), self.slope(j as isize));
            if s_left <= pj && pj <= s_right {
                let val = x * self.model.g_star_f64(pj) + p.cum[j];
                cands.push((tau_j, val, self.model.gamma_unchecked(pj)));
            }
            if j < n {
                let s = self.slopes[j];
                let tau_s = t - x * s;
                if s.is_finite() && tau_s >= tau_j - eps && tau_s <= tau_j + h + eps {
                    let tau_s = tau_s.clamp(tau_j, tau_j + h);
                    let val = x * self.conj[j] + p.cum[j] + p.rates[j] * (tau_s - tau_j);
                    cands.push((tau_s, val, p.rates[j]));
                }
            }
        }

        let best = cands.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let tol = self.shock_tol * (1.0 + best.abs());
        let mut eta_minus = f64::INFINITY;
        let mut eta_plus = f64::NEG_INFINITY;
        let mut flux = 0.0;
        let mut count = 0;
        for &(tau, val, u) in &cands {
            if val <= best + tol {
                count += 1;
                if tau < eta_minus {
                    eta_minus = tau;
                    flux = u;
                }
                eta_plus = eta_plus.max(tau);
            }
        }
        Ok(LaxEval { value: best, eta_minus, eta_plus, flux, multiple: count > 1 && eta_plus - eta_minus > 4.0 * eps })
    }

    /// U(t, x).
    pub fn value(&self, t: f64, x: f64) -> Result<f64, LaxError> {
        Ok(self.eval(t, x)?.value)
    }

    /// u(t−, x).
    pub fn flux(&self, t: f64, x: f64) -> Result<f64, LaxError> {
        Ok(self.eval(t, x)?.flux)
    }

    /// U(·, L) and u(·, L) on a list of times.
    pub fn arrival_samples(&self, times: &[f64]) -> Result<Vec<LaxEval>, LaxError> {
        times.iter().map(|&t| self.eval(t, self.length)).collect()
    }

    pub fn backward_char_interval(&self, t: f64) -> Result<CharInterval, LaxError> {
        let e = self.eval(t, self.length)?;
        Ok(CharInterval { t, eta_minus: e.eta_minus, eta_plus: e.eta_plus })
    }

    /// inf{t' : U(t', x) ≥ level}, with U(·, x) continuous and nondecreasing.
    pub fn level_time(&self, level: f64, x: f64) -> Result<f64, LaxError> {
        let (mut lo, mut hi) = self.arrival_window(x);
        if level <= 0.0 {
            return Ok(lo);
        }
        let mut grow = 0;
        while self.value(hi, x)? < level {
            hi += (hi - lo).max(1.0);
            grow += 1;
            if grow > 60 {
                return Err(LaxError::WindowTooNarrow(level));
            }
        }
        if self.value(lo, x)? >= level {
            return Ok(lo);
        }
        let xtol = 1e-13 * (1.0 + hi.abs().max(lo.abs()));
        let mut err = None;
        let (a, b) = bisect_predicate(
            |s| match self.value(s, x) {
                Ok(v) => v >= level,
                Err(e) => {
                    err = Some(e);
                    true
                }
            },
            lo,
            hi,
            xtol,
        );
        if let Some(e) = err {
            return Err(e);
        }
        lo = a;
        hi = b;
        Ok(0.5 * (lo + hi))
    }

    /// Passage time at x of the car departing at t0.
    pub fn passage_time(&self, t0: f64, x: f64) -> Result<f64, LaxError> {
        let free = t0 + x * self.model.gp0();
        if x == 0.0 {
            return Ok(t0);
        }
        let level = self.profile.value(t0);
        if level <= 0.0 {
            return Ok(free);
        }
        Ok(self.level_time(level, x)?.max(free))
    }

    /// Arrival time at x = L of the car departing at t0.
    pub fn arrival_time(&self, t0: f64) -> Result<f64, LaxError> {
        self.passage_time(t0, self.length)
    }

    /// Trajectory of the car departing at t0 as (time, position) samples on a
    /// uniform grid of `steps + 1` positions.
    pub fn car_trajectory(&self, t0: f64, steps: usize) -> Result<Vec<(f64, f64)>, LaxError> {
        let steps = steps.max(1);
        let mut out = Vec::with_capacity(steps + 1);
        let mut last = t0;
        for k in 0..=steps {
            let x = self.length * k as f64 / steps as f64;
            let t = self.passage_time(t0, x)?.max(last);
            last = t;
            out.push((t, x));
        }
        Ok(out)
    }

    /// Replace the datum on [η⁻, η⁺] of the shock at (T, L) by the centered
    /// compression wave focusing at (T, L).
    pub fn compressionize(&self, t: f64) -> Result<BoundaryProfile, LaxError> {
        let e = self.eval(t, self.length)?;
        if !e.multiple {
            return Err(LaxError::NotAShock(t));
        }
        let p = &self.profile;
        let lambda = e.value;
        let mut cum = p.cum.clone();
        for (j, c) in cum.iter_mut().enumerate() {
            let tau = p.node_time(j);
            if tau >= e.eta_minus && tau <= e.eta_plus {
                let w = lambda - self.length * self.model.g_star_f64((t - tau) / self.length);
                *c = w.min(*c);
            }
        }
        BoundaryProfile::from_cumulative(p.t_lo, p.h, cum)
    }
}
