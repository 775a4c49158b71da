//! Small scalar root finders and quadrature rules shared by the solver modules.

/// Outcome of a bracketed scalar root search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub x: f64,
    pub iterations: usize,
}

/// Brent's method on a bracket `[a, b]` with `f(a)` and `f(b)` of opposite sign
/// (or one of them zero). Returns `None` when the bracket is invalid.
pub fn brent<F>(mut f: F, a: f64, b: f64, xtol: f64, max_iter: usize) -> Option<Root>
where
    F: FnMut(f64) -> f64,
{
    let (mut a, mut b) = (a, b);
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Some(Root { x: a, iterations: 0 });
    }
    if fb == 0.0 {
        return Some(Root { x: b, iterations: 0 });
    }
    if !(fa.is_finite() && fb.is_finite()) || fa.signum() == fb.signum() {
        return None;
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for it in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Some(Root { x: b, iterations: it });
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b);
    }
    Some(Root { x: b, iterations: max_iter })
}

/// Plain bisection for a monotone predicate: returns the boundary between the
/// region where `pred` is false (at `lo`) and true (at `hi`).
pub fn bisect_predicate<P>(mut pred: P, mut lo: f64, mut hi: f64, xtol: f64) -> (f64, f64)
where
    P: FnMut(f64) -> bool,
{
    for _ in 0..200 {
        if hi - lo <= xtol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (lo, hi)
}

/// Golden-section search for the minimum of a unimodal function on `[a, b]`.
pub fn golden_min<F>(mut f: F, mut a: f64, mut b: f64, xtol: f64) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > xtol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Two-point Gauss–Legendre rule on `[a, b]`.
#[inline]
pub fn gauss2<F>(mut f: F, a: f64, b: f64) -> f64
where
    F: FnMut(f64) -> f64,
{
    const OFF: f64 = 0.577_350_269_189_625_8;
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    half * (f(mid - half * OFF) + f(mid + half * OFF))
}

/// Index of the cell of a uniform grid `lo + k*h` containing `x`, clamped to `[0, n-1]`.
#[inline]
pub fn cell_index(lo: f64, h: f64, n: usize, x: f64) -> usize {
    let k = ((x - lo) / h).floor();
    if k <= 0.0 {
        0
    } else if k as usize >= n {
        n.saturating_sub(1)
    } else {
        k as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brent_finds_cubic_root() {
        let r = brent(|x| x * x * x - 2.0, 0.0, 2.0, 1e-14, 100).unwrap();
        assert!((r.x - 2f64.cbrt()).abs() < 1e-13);
        assert!(r.iterations < 30);
    }

    #[test]
    fn brent_rejects_bad_bracket() {
        assert!(brent(|x| x * x + 1.0, -1.0, 1.0, 1e-12, 50).is_none());
    }

    #[test]
    fn golden_section_on_parabola() {
        let (x, fx) = golden_min(|x| (x - 0.3) * (x - 0.3) + 1.0, -2.0, 2.0, 1e-10);
        assert!((x - 0.3).abs() < 1e-7);
        assert!((fx - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gauss_rule_is_exact_for_cubics() {
        let v = gauss2(|x| x * x * x - x + 2.0, -1.0, 3.0);
        // antiderivative x^4/4 - x^2/2 + 2x
        let exact = (81.0 / 4.0 - 4.5 + 6.0) - (0.25 - 0.5 - 2.0);
        assert!((v - exact).abs() < 1e-12);
    }
}
