//! Fundamental diagram f(ρ) = ρ·v(ρ), its partial inverse g on the free branch,
//! and the Legendre transform g* that drives the Lax formula.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

use crate::costexpr::{EvalError, ParseError, ScalarFn};
use crate::numerics::brent;

/// A real number or +∞. Ordered so that every finite value is below +∞.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extended {
    Finite(f64),
    PlusInfinity,
}

impl Extended {
    pub fn is_finite(self) -> bool {
        matches!(self, Extended::Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Extended::Finite(v) => Some(v),
            Extended::PlusInfinity => None,
        }
    }

    /// Lossy conversion, +∞ maps to `f64::INFINITY`.
    pub fn to_f64(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

impl PartialOrd for Extended {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Extended::Finite(a), Extended::Finite(b)) => a.partial_cmp(b),
            (Extended::Finite(_), Extended::PlusInfinity) => Some(Ordering::Less),
            (Extended::PlusInfinity, Extended::Finite(_)) => Some(Ordering::Greater),
            (Extended::PlusInfinity, Extended::PlusInfinity) => Some(Ordering::Equal),
        }
    }
}

impl fmt::Display for Extended {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extended::Finite(v) => write!(f, "{v}"),
            Extended::PlusInfinity => write!(f, "+inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FluxError {
    #[error("invalid velocity law: {0}")]
    InvalidVelocity(String),
    #[error("flux is not strictly concave at rho = ({:.6}, {:.6}, {:.6}): f = ({:.9}, {:.9}, {:.9})", rho[0], rho[1], rho[2], f[0], f[1], f[2])]
    NonConcave { rho: [f64; 3], f: [f64; 3] },
    #[error("flux {u} exceeds the road capacity {max}")]
    FluxExceedsCapacity { u: f64, max: f64 },
    #[error("slope {p} is below the characteristic threshold {gp0}")]
    SlopeBelowCharacteristic { p: f64, gp0: f64 },
    #[error("cannot parse velocity law: {0}")]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Number of samples used to validate monotonicity and concavity.
const CHECK_SAMPLES: usize = 400;

/// Relative capacity margin: g is evaluated at most at M·(1 − SATURATION).
pub const SATURATION: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct FluxModel {
    v: ScalarFn,
    rho_jam: f64,
    rho_max: f64,
    max_flux: f64,
    gp0: f64,
    /// (a, b) when v(ρ) = a − bρ.
    affine: Option<(f64, f64)>,
}

impl FluxModel {
    /// Build from a velocity expression in `rho`.
    pub fn parse(velocity: &str, rho_jam: f64) -> Result<Self, FluxError> {
        Self::new(ScalarFn::parse(velocity, "rho")?, rho_jam)
    }

    /// Greenshields law v(ρ) = v0·(1 − ρ/ρ_jam).
    pub fn greenshields(v0: f64, rho_jam: f64) -> Result<Self, FluxError> {
        Self::parse(&format!("{v0} - {}*rho", v0 / rho_jam), rho_jam)
    }

    pub fn new(v: ScalarFn, rho_jam: f64) -> Result<Self, FluxError> {
        if !(rho_jam.is_finite() && rho_jam > 0.0) {
            return Err(FluxError::InvalidVelocity(format!("rho_jam must be positive, got {rho_jam}")));
        }
        let v0 = v.value(0.0)?;
        if v0 <= 0.0 {
            return Err(FluxError::InvalidVelocity(format!("v(0) = {v0} must be positive")));
        }
        let vj = v.value(rho_jam)?;
        if vj.abs() > 1e-9 * v0 {
            return Err(FluxError::InvalidVelocity(format!("v(rho_jam) = {vj} must vanish")));
        }

        let h = rho_jam / CHECK_SAMPLES as f64;
        let mut rho = [0.0; 3];
        let mut f = [0.0; 3];
        let mut prev_v = v0;
        for k in 0..=CHECK_SAMPLES {
            let r = k as f64 * h;
            let vk = v.value(r)?;
            v.deriv(r)?;
            if k > 0 && vk >= prev_v {
                return Err(FluxError::InvalidVelocity(format!(
                    "v is not strictly decreasing near rho = {r}"
                )));
            }
            prev_v = vk;
            rho = [rho[1], rho[2], r];
            f = [f[1], f[2], r * vk];
            if k >= 2 && f[0] - 2.0 * f[1] + f[2] >= 0.0 {
                return Err(FluxError::NonConcave { rho, f });
            }
        }

        let affine = if v.is_affine() {
            let b = -v.deriv(0.0)?;
            Some((v0, b))
        } else {
            None
        };
        let rho_max = match affine {
            Some((a, b)) => a / (2.0 * b),
            None => {
                let fp = |r: f64| v.value(r).unwrap_or(f64::NAN) + r * v.deriv(r).unwrap_or(f64::NAN);
                brent(fp, 0.0, rho_jam, 1e-15 * rho_jam, 200)
                    .ok_or_else(|| FluxError::InvalidVelocity("flux has no interior maximum".into()))?
                    .x
            }
        };
        let max_flux = rho_max * v.value(rho_max)?;
        Ok(Self { v, rho_jam, rho_max, max_flux, gp0: 1.0 / v0, affine })
    }

    pub fn velocity_law(&self) -> &ScalarFn {
        &self.v
    }

    pub fn rho_jam(&self) -> f64 {
        self.rho_jam
    }

    pub fn rho_max(&self) -> f64 {
        self.rho_max
    }

    /// Maximal flux M = f(ρ_max).
    pub fn max_flux(&self) -> f64 {
        self.max_flux
    }

    /// g'(0+) = 1/v(0).
    pub fn gp0(&self) -> f64 {
        self.gp0
    }

    pub fn free_speed(&self) -> f64 {
        1.0 / self.gp0
    }

    pub fn is_affine(&self) -> bool {
        self.affine.is_some()
    }

    pub fn velocity(&self, rho: f64) -> f64 {
        match self.affine {
            Some((a, b)) => a - b * rho,
            None => self.v.value(rho).unwrap_or(f64::NAN),
        }
    }

    pub fn flux(&self, rho: f64) -> f64 {
        rho * self.velocity(rho)
    }

    /// f'(ρ) = v(ρ) + ρ·v'(ρ).
    pub fn flux_prime(&self, rho: f64) -> f64 {
        match self.affine {
            Some((a, b)) => a - 2.0 * b * rho,
            None => self.velocity(rho) + rho * self.v.deriv(rho).unwrap_or(f64::NAN),
        }
    }

    /// Free-branch density carrying flux `u`; linear extension for u < 0.
    pub fn g(&self, u: f64) -> Result<f64, FluxError> {
        if u <= 0.0 {
            return Ok(self.gp0 * u);
        }
        if u > self.max_flux {
            if u <= self.max_flux * (1.0 + 1e-12) {
                return Ok(self.rho_max);
            }
            return Err(FluxError::FluxExceedsCapacity { u, max: self.max_flux });
        }
        Ok(self.g_free(u))
    }

    /// g on [0, M] without domain checks.
    #[inline]
    pub fn g_free(&self, u: f64) -> f64 {
        match self.affine {
            Some((a, b)) => {
                let disc = (a * a - 4.0 * b * u).max(0.0);
                2.0 * u / (a + disc.sqrt())
            }
            None => {
                if u >= self.max_flux {
                    return self.rho_max;
                }
                brent(|r| self.flux(r) - u, 0.0, self.rho_max, 1e-15 * self.rho_max, 200)
                    .map(|r| r.x)
                    .unwrap_or(f64::NAN)
            }
        }
    }

    /// g'(u); +∞ at and above capacity.
    pub fn g_prime(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return self.gp0;
        }
        if u >= self.max_flux {
            return f64::INFINITY;
        }
        match self.affine {
            Some((a, b)) => 1.0 / (a * a - 4.0 * b * u).sqrt(),
            None => 1.0 / self.flux_prime(self.g_free(u)),
        }
    }

    /// The flux u ∈ [0, M] with g'(u) = p.
    pub fn gamma(&self, p: f64) -> Result<f64, FluxError> {
        if p < self.gp0 {
            return Err(FluxError::SlopeBelowCharacteristic { p, gp0: self.gp0 });
        }
        Ok(self.gamma_unchecked(p))
    }

    /// γ(p) clamped to 0 below g'(0).
    #[inline]
    pub fn gamma_unchecked(&self, p: f64) -> f64 {
        if p <= self.gp0 {
            return 0.0;
        }
        if p == f64::INFINITY {
            return self.max_flux;
        }
        self.flux(self.rho_of_slope(p))
    }

    /// Density ρ_p ∈ [0, ρ_max] with f'(ρ_p) = 1/p.
    fn rho_of_slope(&self, p: f64) -> f64 {
        let target = 1.0 / p;
        match self.affine {
            Some((a, b)) => ((a - target) / (2.0 * b)).clamp(0.0, self.rho_max),
            None => brent(
                |r| self.flux_prime(r) - target,
                0.0,
                self.rho_max,
                1e-15 * self.rho_max,
                200,
            )
            .map(|r| r.x)
            .unwrap_or(self.rho_max),
        }
    }

    /// Legendre transform g*(p) = sup_u (p·u − g(u)).
    pub fn g_star(&self, p: f64) -> Extended {
        if p < self.gp0 || p.is_nan() {
            return Extended::PlusInfinity;
        }
        if p == f64::INFINITY {
            return Extended::PlusInfinity;
        }
        let rho = self.rho_of_slope(p);
        Extended::Finite(p * self.flux(rho) - rho)
    }

    /// g*(p) as f64, +∞ below the threshold.
    #[inline]
    pub fn g_star_f64(&self, p: f64) -> f64 {
        self.g_star(p).to_f64()
    }

    pub fn legendre(&self, samples: usize) -> LegendreView<'_> {
        LegendreView::new(self, samples)
    }
}

/// Read-only table of (p, γ(p)) for plotting and interpolation, built over
/// p ∈ [g'(0), g'(M·(1 − 1e-3))].
#[derive(Debug, Clone)]
pub struct LegendreView<'a> {
    model: &'a FluxModel,
    slopes: Vec<f64>,
    gammas: Vec<f64>,
}

impl<'a> LegendreView<'a> {
    pub fn new(model: &'a FluxModel, samples: usize) -> Self {
        let samples = samples.max(2);
        let p_lo = model.gp0();
        let p_hi = model.g_prime(model.max_flux() * (1.0 - 1e-3));
        let slopes: Vec<f64> = (0..samples)
            .map(|k| p_lo + (p_hi - p_lo) * k as f64 / (samples - 1) as f64)
            .collect();
        let gammas = slopes.iter().map(|&p| model.gamma_unchecked(p)).collect();
        Self { model, slopes, gammas }
    }

    pub fn model(&self) -> &FluxModel {
        self.model
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.slopes.iter().copied().zip(self.gammas.iter().copied())
    }

    /// Linear interpolation in the table; exact evaluation outside it.
    pub fn gamma_interp(&self, p: f64) -> f64 {
        let n = self.slopes.len();
        if p <= self.slopes[0] {
            return 0.0;
        }
        if p >= self.slopes[n - 1] {
            return self.model.gamma_unchecked(p);
        }
        let k = self.slopes.partition_point(|&s| s <= p) - 1;
        let w = (p - self.slopes[k]) / (self.slopes[k + 1] - self.slopes[k]);
        self.gammas[k] + w * (self.gammas[k + 1] - self.gammas[k])
    }

    pub fn g_star(&self, p: f64) -> Extended {
        self.model.g_star(p)
    }

    /// g*(p) + g(u) − p·u, nonnegative by the Fenchel–Young inequality.
    pub fn fenchel_gap(&self, p: f64, u: f64) -> Extended {
        match (self.model.g_star(p), self.model.g(u)) {
            (Extended::Finite(s), Ok(g)) => Extended::Finite(s + g - p * u),
            _ => Extended::PlusInfinity,
        }
    }
}
