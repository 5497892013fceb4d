//! Modified Bessel functions of the first kind and the concentration /
//! mobility relation `c(m) = sqrt(2m) I1(2 sqrt(2m)) / I0(2 sqrt(2m))`.

use super::SimError;

const SERIES_LIMIT: f64 = 30.0;

/// `(I0(x), I1(x))` for `x >= 0`.
pub fn i0_i1(x: f64) -> (f64, f64) {
    assert!(x >= 0.0, "modified Bessel functions evaluated at negative argument {x}");
    if x <= SERIES_LIMIT {
        series(x)
    } else {
        asymptotic(x)
    }
}

fn series(x: f64) -> (f64, f64) {
    let q = 0.25 * x * x;
    let (mut t0, mut t1) = (1.0, 0.5 * x);
    let (mut s0, mut s1) = (t0, t1);
    for k in 1..500 {
        let k = k as f64;
        t0 *= q / (k * k);
        t1 *= q / (k * (k + 1.0));
        s0 += t0;
        s1 += t1;
        if t0 < 1e-17 * s0 && t1 < 1e-17 * s1 {
            break;
        }
    }
    (s0, s1)
}

fn asymptotic(x: f64) -> (f64, f64) {
    // e^x / sqrt(2 pi x) * sum_k (-1)^k a_k(nu) / x^k
    let pref = x.exp() / (2.0 * std::f64::consts::PI * x).sqrt();
    let tail = |nu: f64| {
        let mu = 4.0 * nu * nu;
        let (mut term, mut sum) = (1.0, 1.0);
        for k in 1..30 {
            let kf = k as f64;
            let odd = 2.0 * kf - 1.0;
            term *= -(mu - odd * odd) / (kf * 8.0 * x);
            sum += term;
            if term.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        sum
    };
    (pref * tail(0.0), pref * tail(1.0))
}

/// `I1(x) / I0(x)`, stable for large `x`.
pub fn bessel_ratio(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let (i0, i1) = i0_i1(x);
    i1 / i0
}

/// Concentration as a function of the mobility variable `m >= 0`.
pub fn concentration_of_m(m: f64) -> f64 {
    let s = (2.0 * m).sqrt();
    s * bessel_ratio(2.0 * s)
}

/// `dc/dm = 2 (1 - r^2)` with `r = I1/I0` at `2 sqrt(2m)`.
pub fn dconcentration_dm(m: f64) -> f64 {
    let r = bessel_ratio(2.0 * (2.0 * m).sqrt());
    2.0 * (1.0 - r * r)
}

/// Inverse of [`concentration_of_m`] on `(0, c_max)`, to `|c(m) - c| < 1e-12`.
pub fn invert_m(c: f64, c_max: f64) -> Result<f64, SimError> {
    if !(c > 0.0 && c < c_max) {
        return Err(SimError::OutOfRange {
            what: "concentration",
            value: c,
            lo: 0.0,
            hi: c_max,
        });
    }
    let mut hi = c.max(1.0);
    while concentration_of_m(hi) < c {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    // c(m) ~ 2m near zero
    let mut m = (0.5 * c).clamp(lo, hi);
    for _ in 0..200 {
        let r = concentration_of_m(m) - c;
        if r.abs() < 1e-14 * c.max(1e-300) || r == 0.0 {
            return Ok(m);
        }
        if r > 0.0 {
            hi = m;
        } else {
            lo = m;
        }
        let newton = m - r / dconcentration_dm(m);
        m = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok(m)
}

/// `dm/dc` at concentration `c`.
pub fn dm_dc(c: f64, c_max: f64) -> Result<f64, SimError> {
    Ok(1.0 / dconcentration_dm(invert_m(c, c_max)?))
}
