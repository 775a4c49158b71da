//! Driver groups: cost functions, fractions carried along car trajectories,
//! total cost and the marginal cost of one more departure.

use thiserror::Error;

use crate::costexpr::{EvalError, ParseError, ScalarFn};
use crate::laxhopf::{BoundaryProfile, LaxError, LaxSolution};
use crate::numerics::{bisect_predicate, gauss2};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroupError {
    #[error("invalid group specification: {0}")]
    InvalidSpec(String),
    #[error("label {s} outside [0, {total}]")]
    LabelOutOfRange { s: f64, total: f64 },
    #[error("departure time {0} is the center of a rarefaction fan")]
    AmbiguousCharacteristic(f64),
    #[error("group index {0} out of range")]
    NoSuchGroup(usize),
    #[error(transparent)]
    Lax(#[from] LaxError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

#[derive(Debug, Clone)]
pub struct Group {
    pub name: String,
    /// Number of drivers G_i.
    pub size: f64,
    /// Arrival cost ψ_i(t).
    pub arrival_cost: ScalarFn,
}

impl Group {
    pub fn new(name: &str, size: f64, arrival_cost: &str) -> Result<Self, GroupError> {
        Ok(Self { name: name.to_string(), size, arrival_cost: ScalarFn::parse(arrival_cost, "t")? })
    }
}

/// N groups sharing one departure cost φ.
#[derive(Debug, Clone)]
pub struct GroupSpec {
    pub departure_cost: ScalarFn,
    pub groups: Vec<Group>,
}

impl GroupSpec {
    pub fn new(departure_cost: &str, groups: Vec<Group>) -> Result<Self, GroupError> {
        if groups.is_empty() {
            return Err(GroupError::InvalidSpec("at least one group is required".into()));
        }
        if let Some(g) = groups.iter().find(|g| !(g.size.is_finite() && g.size > 0.0)) {
            return Err(GroupError::InvalidSpec(format!("group '{}' has size {}", g.name, g.size)));
        }
        Ok(Self { departure_cost: ScalarFn::parse(departure_cost, "t")?, groups })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn sizes(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.size).collect()
    }

    pub fn total_size(&self) -> f64 {
        self.groups.iter().map(|g| g.size).sum()
    }

    #[inline]
    pub fn phi(&self, t: f64) -> f64 {
        self.departure_cost.value(t).unwrap_or(f64::NAN)
    }

    #[inline]
    pub fn psi(&self, i: usize, t: f64) -> f64 {
        self.groups[i].arrival_cost.value(t).unwrap_or(f64::NAN)
    }

    #[inline]
    pub fn dpsi(&self, i: usize, t: f64) -> f64 {
        self.groups[i].arrival_cost.deriv(t).unwrap_or(f64::NAN)
    }

    /// Sampled checks of φ' < 0 on the departure window, ψ_i > 0 and ψ_i' > 0 on
    /// the arrival window, and distinct ψ'' at sampled crossings of ψ_i' = ψ_j'.
    pub fn check_assumptions(&self, departure: (f64, f64), arrival: (f64, f64), samples: usize) -> Result<(), GroupError> {
        let samples = samples.max(2);
        let grid = |(a, b): (f64, f64)| (0..samples).map(move |k| a + (b - a) * k as f64 / (samples - 1) as f64);
        for t in grid(departure) {
            let d = self.departure_cost.deriv(t)?;
            if d >= 0.0 {
                return Err(GroupError::InvalidSpec(format!("departure cost is not decreasing at t = {t} (phi' = {d})")));
            }
        }
        for g in &self.groups {
            for t in grid(arrival) {
                let v = g.arrival_cost.value(t)?;
                let d = g.arrival_cost.deriv(t)?;
                if v <= 0.0 || d <= 0.0 {
                    return Err(GroupError::InvalidSpec(format!(
                        "arrival cost of '{}' must be positive and increasing, got psi = {v}, psi' = {d} at t = {t}",
                        g.name
                    )));
                }
            }
        }
        let ts: Vec<f64> = grid(arrival).collect();
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let diff = |t: f64| self.dpsi(i, t) - self.dpsi(j, t);
                for w in ts.windows(2) {
                    let (a, b) = (diff(w[0]), diff(w[1]));
                    if a == 0.0 || a.signum() != b.signum() {
                        let t = if a == 0.0 {
                            w[0]
                        } else {
                            let (lo, hi) = bisect_predicate(|t| diff(t).signum() == b.signum(), w[0], w[1], 1e-12);
                            0.5 * (lo + hi)
                        };
                        let gi = self.groups[i].arrival_cost.deriv2(t)?;
                        let gj = self.groups[j].arrival_cost.deriv2(t)?;
                        if (gi - gj).abs() <= 1e-6 * (1.0 + gi.abs() + gj.abs()) {
                            return Err(GroupError::InvalidSpec(format!(
                                "arrival costs of '{}' and '{}' are not generic at t = {t}",
                                self.groups[i].name, self.groups[j].name
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// inf{t : Ū(t) ≥ s}.
pub fn label_inverse(profile: &BoundaryProfile, s: f64) -> Result<f64, GroupError> {
    let total = profile.total();
    if !(s >= -1e-12 * total.max(1.0) && s <= total * (1.0 + 1e-12) + 1e-15) {
        return Err(GroupError::LabelOutOfRange { s, total });
    }
    Ok(profile.label_time(s.clamp(0.0, total)))
}

/// Group fractions Θ_i(s) as a right-continuous step function of the
/// cumulative label s ∈ [0, G].
#[derive(Debug, Clone, PartialEq)]
pub struct FractionField {
    groups: usize,
    /// Breakpoints 0 = b_0 < … < b_P = G.
    labels: Vec<f64>,
    /// Fractions on [b_m, b_{m+1}).
    pieces: Vec<Vec<f64>>,
}

impl FractionField {
    /// One group owning every label in [0, total].
    pub fn single(total: f64) -> Self {
        Self { groups: 1, labels: vec![0.0, total], pieces: vec![vec![1.0]] }
    }

    /// Build from per-group departure profiles on a common grid. Returns the
    /// total profile together with the field.
    pub fn from_profiles(profiles: &[BoundaryProfile]) -> Result<(BoundaryProfile, Self), GroupError> {
        let first = profiles.first().ok_or_else(|| GroupError::InvalidSpec("no group profiles".into()))?;
        let n = first.cells();
        if profiles.iter().any(|p| p.cells() != n || p.t_lo() != first.t_lo() || p.cell_width() != first.cell_width()) {
            return Err(GroupError::InvalidSpec("group profiles must share one grid".into()));
        }
        let rates: Vec<Vec<f64>> = profiles.iter().map(|p| p.rates().to_vec()).collect();
        Self::from_rates(first.t_lo(), first.cell_width(), &rates)
    }

    /// Build from per-group rates `rates[i][k]` on the grid `t_lo + k·h`.
    pub fn from_rates(t_lo: f64, h: f64, rates: &[Vec<f64>]) -> Result<(BoundaryProfile, Self), GroupError> {
        let groups = rates.len();
        let n = rates.first().map_or(0, |r| r.len());
        let total_rates: Vec<f64> = (0..n).map(|k| rates.iter().map(|r| r[k]).sum()).collect();
        let profile = BoundaryProfile::from_rates(t_lo, h, total_rates)?;
        let mut labels = vec![0.0];
        let mut pieces: Vec<Vec<f64>> = Vec::new();
        for k in 0..n {
            let tot = profile.rates()[k];
            if tot <= 0.0 {
                continue;
            }
            let frac: Vec<f64> = rates.iter().map(|r| r[k] / tot).collect();
            let end = profile.cumulative()[k + 1];
            match pieces.last() {
                Some(last) if last.iter().zip(&frac).all(|(a, b)| (a - b).abs() <= 1e-15) => {
                    *labels.last_mut().unwrap() = end;
                }
                _ => {
                    pieces.push(frac);
                    labels.push(end);
                }
            }
        }
        if pieces.is_empty() {
            pieces.push(vec![1.0 / groups as f64; groups]);
            labels.push(0.0);
        }
        Ok((profile, Self { groups, labels, pieces }))
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn total(&self) -> f64 {
        *self.labels.last().unwrap()
    }

    /// Interior label breakpoints where the composition changes.
    pub fn breakpoints(&self) -> &[f64] {
        &self.labels[1..self.labels.len() - 1]
    }

    pub fn piece_count(&self) -> usize {
        self.pieces.len()
    }

    fn piece_of(&self, s: f64) -> usize {
        let m = self.labels[1..self.labels.len() - 1].partition_point(|&b| b <= s);
        m.min(self.pieces.len() - 1)
    }

    /// Θ_i(s).
    pub fn fraction(&self, i: usize, s: f64) -> f64 {
        self.pieces[self.piece_of(s)][i]
    }

    pub fn fractions(&self, s: f64) -> &[f64] {
        &self.pieces[self.piece_of(s)]
    }

    /// θ_i(t, x) = Θ_i(U(t, x)).
    pub fn theta_at(&self, sol: &LaxSolution, i: usize, t: f64, x: f64) -> Result<f64, GroupError> {
        if i >= self.groups {
            return Err(GroupError::NoSuchGroup(i));
        }
        Ok(self.fraction(i, sol.value(t, x)?))
    }

    /// Arrival-side fractions θ(·, L): the label breakpoints mapped to their
    /// arrival times.
    pub fn at_exit(&self, sol: &LaxSolution) -> Result<ExitFractions, GroupError> {
        let mut times = Vec::with_capacity(self.pieces.len().saturating_sub(1));
        for &b in self.breakpoints() {
            times.push(sol.level_time(b, sol.length())?);
        }
        Ok(ExitFractions { times, pieces: self.pieces.clone() })
    }
}

/// θ_i(s, L) as a step function of the arrival time s.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitFractions {
    times: Vec<f64>,
    pieces: Vec<Vec<f64>>,
}

impl ExitFractions {
    pub fn groups(&self) -> usize {
        self.pieces[0].len()
    }

    pub fn switch_times(&self) -> &[f64] {
        &self.times
    }

    /// θ_i(s, L), left-continuous at switch times.
    pub fn theta(&self, i: usize, s: f64) -> f64 {
        self.pieces[self.times.partition_point(|&b| b < s)][i]
    }

    /// Visit the maximal pieces of [a, b] on which θ(·, L) is constant.
    pub fn for_each_piece(&self, a: f64, b: f64, mut f: impl FnMut(f64, f64, &[f64])) {
        if b <= a {
            return;
        }
        let mut m = self.times.partition_point(|&s| s <= a);
        let mut lo = a;
        loop {
            let hi = if m < self.times.len() { self.times[m].min(b) } else { b };
            if hi > lo {
                f(lo, hi, &self.pieces[m]);
            }
            if hi >= b || m >= self.times.len() {
                break;
            }
            lo = hi;
            m += 1;
        }
    }

    /// Σ_j ∫_a^b ψ_j'(s) θ_j(s, L) ds, exact on each constant piece.
    pub fn weighted_cost_increment(&self, spec: &GroupSpec, a: f64, b: f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_piece(a, b, |lo, hi, frac| {
            for (j, &w) in frac.iter().enumerate() {
                if w != 0.0 {
                    acc += w * (spec.psi(j, hi) - spec.psi(j, lo));
                }
            }
        });
        acc
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CostBreakdown {
    pub departure: f64,
    pub arrival: Vec<f64>,
    pub total: f64,
}

/// J = ∫ φ dŪ + Σ_i ∫ ψ_i θ_i(·, L) dU(·, L), with `cells` arrival cells.
pub fn total_cost(spec: &GroupSpec, sol: &LaxSolution, exit: &ExitFractions, cells: usize) -> Result<CostBreakdown, GroupError> {
    let p = sol.profile();
    let mut departure = 0.0;
    for (k, &r) in p.rates().iter().enumerate() {
        if r > 0.0 {
            departure += r * gauss2(|t| spec.phi(t), p.node_time(k), p.node_time(k + 1));
        }
    }
    let mut arrival = vec![0.0; spec.len()];
    if p.total() > 0.0 {
        let (a, b) = sol.arrival_window(sol.length());
        let cells = cells.max(1);
        let h = (b - a) / cells as f64;
        let mut u_prev = sol.value(a, sol.length())?;
        for k in 0..cells {
            let (t0, t1) = (a + k as f64 * h, a + (k + 1) as f64 * h);
            let u_next = sol.value(t1, sol.length())?;
            if u_next > u_prev {
                let rate = (u_next - u_prev) / (t1 - t0);
                exit.for_each_piece(t0, t1, |lo, hi, frac| {
                    for (i, &w) in frac.iter().enumerate() {
                        if w != 0.0 {
                            arrival[i] += w * rate * gauss2(|t| spec.psi(i, t), lo, hi);
                        }
                    }
                });
            }
            u_prev = u_next;
        }
    }
    let total = departure + arrival.iter().sum::<f64>();
    Ok(CostBreakdown { departure, arrival, total })
}

/// Arrival time T(t) of the forward characteristic issued at departure time t.
pub fn characteristic_exit(sol: &LaxSolution, t: f64) -> Result<f64, GroupError> {
    let gp0 = sol.model().gp0();
    let l = sol.length();
    let s_max = if sol.max_slope().is_finite() { sol.max_slope() } else { 1e6 * gp0 };
    let (lo, hi) = (t + l * gp0 * (1.0 - 1e-12) - 1e-12, t + l * s_max * (1.0 + 1e-12) + 1e-12);
    let xtol = 1e-12 * (1.0 + t.abs());
    let mut err = None;
    let mut probe = |tt: f64| match sol.eval(tt, l) {
        Ok(e) => (e.eta_minus, e.eta_plus),
        Err(e) => {
            err = Some(e);
            (f64::INFINITY, f64::INFINITY)
        }
    };
    let first = bisect_predicate(|tt| probe(tt).1 >= t, lo, hi, xtol).1;
    let last = bisect_predicate(|tt| probe(tt).0 > t, lo, hi, xtol).1;
    if let Some(e) = err {
        return Err(e.into());
    }
    if last - first > 1e3 * xtol + 1e-9 * l * gp0 {
        return Err(GroupError::AmbiguousCharacteristic(t));
    }
    Ok(first)
}

/// ΔJ(i, t) = φ(t) + ψ_i(τ^a(t)) + Σ_j ∫_{τ^a(t)}^{T(t)} ψ_j'(s) θ_j(s, L) ds.
pub fn marginal_cost(spec: &GroupSpec, sol: &LaxSolution, exit: &ExitFractions, i: usize, t: f64) -> Result<f64, GroupError> {
    if i >= spec.len() {
        return Err(GroupError::NoSuchGroup(i));
    }
    let arrival = sol.arrival_time(t)?;
    let terminus = characteristic_exit(sol, t)?;
    Ok(spec.phi(t) + spec.psi(i, arrival) + exit.weighted_cost_increment(spec, arrival, terminus))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluxmodel::FluxModel;
    use proptest::prelude::*;

    fn ex4() -> FluxModel {
        FluxModel::parse("2-rho", 2.0).unwrap()
    }

    fn spec2() -> GroupSpec {
        GroupSpec::new(
            "-t",
            vec![Group::new("early", 2.51, "exp(t-4)").unwrap(), Group::new("late", 2.51, "exp(t-7.6)").unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(GroupSpec::new("-t", vec![]).is_err());
        assert!(GroupSpec::new("-t", vec![Group::new("a", 0.0, "exp(t)").unwrap()]).is_err());
        let s = spec2();
        s.check_assumptions((-6.0, 4.0), (-1.0, 10.0), 200).unwrap();
        let flat = GroupSpec::new("t", vec![Group::new("a", 1.0, "exp(t)").unwrap()]).unwrap();
        assert!(flat.check_assumptions((0.0, 1.0), (0.0, 1.0), 10).is_err());
        let neg = GroupSpec::new("-t", vec![Group::new("a", 1.0, "t").unwrap()]).unwrap();
        assert!(neg.check_assumptions((0.0, 1.0), (-1.0, 1.0), 10).is_err());
        // ψ_1' − ψ_2' = (t − 1)³ changes sign with a flat crossing
        let degenerate = GroupSpec::new(
            "-t",
            vec![Group::new("a", 1.0, "10 + exp(t)").unwrap(), Group::new("b", 1.0, "10 + exp(t) - (t-1)^4/4").unwrap()],
        )
        .unwrap();
        assert!(degenerate.check_assumptions((0.0, 1.0), (0.5, 2.0), 50).is_err());
        let generic = GroupSpec::new(
            "-t",
            vec![Group::new("a", 1.0, "10 + exp(t)").unwrap(), Group::new("b", 1.0, "10 + exp(t) - (t-1)^2/2").unwrap()],
        )
        .unwrap();
        generic.check_assumptions((0.0, 1.0), (0.5, 2.0), 50).unwrap();
    }

    #[test]
    fn label_inverse_cases() {
        let p = BoundaryProfile::from_rates(0.0, 0.5, vec![1.0; 8]).unwrap();
        assert_eq!(label_inverse(&p, 0.0).unwrap(), 0.0);
        for s in [0.3, 1.7, 4.0] {
            assert!((label_inverse(&p, s).unwrap() - s).abs() < 1e-15);
        }
        assert!(matches!(label_inverse(&p, 4.5), Err(GroupError::LabelOutOfRange { .. })));
        let gap = BoundaryProfile::from_rates(0.0, 1.0, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(label_inverse(&gap, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn single_group_theta_is_one() {
        let p = BoundaryProfile::from_rates(0.0, 0.1, vec![0.4; 20]).unwrap();
        let (prof, field) = FractionField::from_profiles(&[p]).unwrap();
        let sol = LaxSolution::new(&ex4(), prof, 3.0).unwrap();
        for k in 0..30 {
            let t = 0.2 * k as f64;
            assert_eq!(field.theta_at(&sol, 0, t, 1.5).unwrap(), 1.0);
        }
        assert_eq!(field.piece_count(), 1);
    }

    #[test]
    fn disjoint_blocks_exit_in_order() {
        let mut r1 = vec![0.5; 20];
        r1.extend(vec![0.0; 20]);
        let mut r2 = vec![0.0; 20];
        r2.extend(vec![0.3; 20]);
        let (prof, field) = FractionField::from_rates(0.0, 0.05, &[r1, r2]).unwrap();
        let sol = LaxSolution::new(&ex4(), prof, 2.0).unwrap();
        let exit = field.at_exit(&sol).unwrap();
        assert_eq!(exit.switch_times().len(), 1);
        let switch = sol.arrival_time(1.0).unwrap();
        assert!((exit.switch_times()[0] - switch).abs() < 1e-9);
        assert_eq!(exit.theta(0, switch - 1e-6), 1.0);
        assert_eq!(exit.theta(1, switch + 1e-6), 1.0);
    }

    #[test]
    fn costs_on_empty_road() {
        let spec = spec2();
        let p = BoundaryProfile::zeros(0.0, 2.0, 20);
        let sol = LaxSolution::new(&ex4(), p, 10.0).unwrap();
        let (_, field) = FractionField::from_rates(0.0, 0.1, &[vec![0.0; 20], vec![0.0; 20]]).unwrap();
        let exit = field.at_exit(&sol).unwrap();
        assert_eq!(total_cost(&spec, &sol, &exit, 100).unwrap().total, 0.0);
        for t in [-1.0, 0.5, 3.0] {
            for i in 0..2 {
                let dj = marginal_cost(&spec, &sol, &exit, i, t).unwrap();
                assert!((dj - (spec.phi(t) + spec.psi(i, t + 5.0))).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn small_mass_cost_is_free_flow() {
        let spec = spec2();
        let eps = 1e-9;
        let h = 1e-3;
        let mut rates = vec![0.0; 1000];
        rates[500] = eps / h;
        let (prof, field) = FractionField::from_rates(0.0, h, &[rates, vec![0.0; 1000]]).unwrap();
        let sol = LaxSolution::new(&ex4(), prof, 10.0).unwrap();
        let exit = field.at_exit(&sol).unwrap();
        let j = total_cost(&spec, &sol, &exit, 20_000).unwrap();
        let t0 = 0.5005;
        let expect = eps * (spec.phi(t0) + spec.psi(0, t0 + 5.0));
        assert!((j.total - expect).abs() < 1e-5 * expect.abs(), "{} vs {expect}", j.total);
    }

    #[test]
    fn fan_center_is_ambiguous() {
        let mut rates = vec![0.1; 20];
        rates.extend(vec![0.7; 20]);
        let p = BoundaryProfile::from_rates(0.0, 0.05, rates).unwrap();
        let sol = LaxSolution::new(&ex4(), p, 2.0).unwrap();
        assert!(matches!(characteristic_exit(&sol, 1.0), Err(GroupError::AmbiguousCharacteristic(_))));
        let t = characteristic_exit(&sol, 0.525).unwrap();
        let m = ex4();
        assert!((t - (0.525 + 2.0 * m.g_prime(0.1))).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn theta_simplex(
            a in proptest::collection::vec(0.0f64..0.4, 30),
            b in proptest::collection::vec(0.0f64..0.4, 30),
            c in proptest::collection::vec(0.0f64..0.1, 30),
        ) {
            let (prof, field) = FractionField::from_rates(0.0, 0.1, &[a, b, c]).unwrap();
            let sol = LaxSolution::new(&ex4(), prof, 2.0).unwrap();
            for k in 0..100 {
                let t = -0.5 + 6.0 * (k as f64 * 0.618_033_988_7).fract();
                let x = 0.01 + 1.99 * (k as f64 * 0.414_213_562_3).fract();
                let mut sum = 0.0;
                for i in 0..3 {
                    let th = field.theta_at(&sol, i, t, x).unwrap();
                    prop_assert!(th >= 0.0);
                    sum += th;
                }
                prop_assert!((sum - 1.0).abs() <= 1e-9);
            }
        }
    }
}
