//! Gamma-family special functions.
//!
//! `ln_gamma`, `digamma` and `trigamma` use recurrence into the asymptotic
//! region; the incomplete gamma routines work in log space so that draws with
//! very small shape (and therefore astronomically small values) stay usable.

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const ASYMPTOTIC_FROM: f64 = 10.0;

/// Stirling-series tail for `ln Γ(x)`, valid for x ≥ 10.
fn ln_gamma_asymptotic(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2 * (1.0 / 1188.0 + inv2 * (-691.0 / 360360.0))))));
    (x - 0.5) * x.ln() - x + LN_SQRT_2PI + series
}

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "ln_gamma domain");
    if x >= ASYMPTOTIC_FROM {
        return ln_gamma_asymptotic(x);
    }
    // ln Γ(x) = ln Γ(x + n) − ln(x (x+1) ... (x+n−1))
    let mut shifted = x;
    let mut prod = 1.0;
    while shifted < ASYMPTOTIC_FROM {
        prod *= shifted;
        shifted += 1.0;
    }
    ln_gamma_asymptotic(shifted) - prod.ln()
}

pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "digamma domain");
    let mut acc = 0.0;
    let mut x = x;
    while x < ASYMPTOTIC_FROM {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let tail = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
    acc + x.ln() - 0.5 * inv - tail
}

pub fn trigamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "trigamma domain");
    let mut acc = 0.0;
    let mut x = x;
    while x < ASYMPTOTIC_FROM {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let tail = inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0
                        - inv2
                            * (1.0 / 42.0
                                - inv2
                                    * (1.0 / 30.0
                                        - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0))))));
    acc + tail
}

/// `(ln Γ(x), ψ(x))`, rejecting non-positive arguments.
pub fn special_fn(x: f64) -> Result<(f64, f64)> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "special functions need x > 0, got {x}"
        )));
    }
    Ok((ln_gamma(x), digamma(x)))
}

/// Scaled lower series of the regularized incomplete gamma function.
///
/// With `g = exp(log_x)` and `tₙ = gⁿ / ((a+1)…(a+n))` returns
/// `U = Σₙ tₙ` and `D = Σₙ (ψ(a+n+1) − ln g) tₙ`, both divided by a common
/// factor `exp(log_scale)`. Then
/// `P(a, g) = gᵃ e^{-g} U / Γ(a+1)`.
struct LowerSeries {
    u: f64,
    /// `W − ln g · U`, accumulated term by term to limit cancellation.
    d: f64,
    log_scale: f64,
}

fn lower_series(a: f64, log_x: f64) -> LowerSeries {
    let g = log_x.exp();
    let mut term = 1.0;
    let mut psi = digamma(a + 1.0);
    let mut u = 1.0;
    let mut d = psi - log_x;
    let mut log_scale = 0.0;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= g / (a + n);
        psi += 1.0 / (a + n);
        u += term;
        d += term * (psi - log_x);
        if u > 1e280 {
            term /= 1e280;
            u /= 1e280;
            d /= 1e280;
            log_scale += 280.0 * std::f64::consts::LN_10;
        }
        if n > g - a && term <= u * 1e-17 {
            break;
        }
        if n > 100_000.0 {
            break;
        }
    }
    LowerSeries { u, d, log_scale }
}

/// ln P(a, x) for the regularized lower incomplete gamma, with `x = exp(log_x)`.
pub fn ln_gamma_p(a: f64, log_x: f64) -> f64 {
    let g = log_x.exp();
    if g > a + 1.0 && g > 30.0 {
        let lq = ln_gamma_q_cf(a, log_x);
        return (-lq.exp()).ln_1p();
    }
    let s = lower_series(a, log_x);
    a * log_x - g + s.u.ln() + s.log_scale - ln_gamma(a + 1.0)
}

/// ln Q(a, x) = ln(1 − P(a, x)).
pub fn ln_gamma_q(a: f64, log_x: f64) -> f64 {
    let g = log_x.exp();
    if g > a + 1.0 {
        ln_gamma_q_cf(a, log_x)
    } else {
        (-ln_gamma_p(a, log_x).exp()).ln_1p()
    }
}

/// Continued fraction for Q (modified Lentz); converges for x > a + 1.
fn ln_gamma_q_cf(a: f64, log_x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let x = log_x.exp();
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    a * log_x - x - ln_gamma(a) + h.ln()
}

/// Derivative of `ln g` with respect to the shape `a`, holding the CDF level
/// `P(a, g)` fixed. This is the implicit reparameterization gradient of a
/// Gamma(a, 1) draw: `dg/da = −(∂P/∂a) / (∂P/∂g)`, divided by `g`.
///
/// Below `g = a + 1` both partials come from differentiating the lower
/// series term by term. Above it `∂P/∂a = −∂Q/∂a` is tiny relative to the
/// series terms, so `ln Q` (continued fraction) is differenced instead.
pub fn dlog_gamma_draw_dshape(a: f64, log_x: f64) -> f64 {
    if log_x.exp() > a + 1.0 {
        return dlog_draw_upper_tail(a, log_x);
    }
    let s = lower_series(a, log_x);
    // ∂lnP/∂a = −D/U ;  ∂lnP/∂ln g = a/U  ⇒  d ln g / da = D / a
    s.d / a
}

fn dlog_draw_upper_tail(a: f64, log_x: f64) -> f64 {
    let h = 1e-5 * a.max(1e-3);
    let dq_da = (ln_gamma_q_cf(a + h, log_x) - ln_gamma_q_cf(a - h, log_x)) / (2.0 * h);
    let g = log_x.exp();
    // ∂lnQ/∂ln g = −g f(g) / Q
    let log_density_term = a * log_x - g - ln_gamma(a) - ln_gamma_q_cf(a, log_x);
    let dq_dlogx = -log_density_term.exp();
    -dq_da / dq_dlogx
}

/// Quantile of Gamma(a, 1) in log space: returns `ln g` with `P(a, g) = exp(log_u)`.
pub fn ln_gamma_quantile(a: f64, log_u: f64) -> f64 {
    debug_assert!(log_u < 0.0);
    let use_upper = log_u > -std::f64::consts::LN_2;
    let log_1mu = (-log_u.exp()).ln_1p();
    // Initial guess: small-x approximation or Wilson–Hilferty.
    let small = (log_u + ln_gamma(a + 1.0)) / a;
    let mut lx = if small < (a + 1.0).ln().min(0.0) {
        small
    } else {
        let p = log_u.exp();
        let z = normal_quantile(p);
        let t = 1.0 - 1.0 / (9.0 * a) + z / (3.0 * a.sqrt());
        let guess = a * t * t * t;
        if guess > 0.0 {
            guess.ln()
        } else {
            small
        }
    };
    for _ in 0..200 {
        let g = lx.exp();
        let (f, df) = if use_upper {
            let lq = ln_gamma_q(a, lx);
            let dens = a * lx - g - ln_gamma(a) - lq;
            (lq - log_1mu, -dens.exp())
        } else {
            let lp = ln_gamma_p(a, lx);
            let dens = a * lx - g - ln_gamma(a) - lp;
            (lp - log_u, dens.exp())
        };
        if !(df.is_finite()) || df == 0.0 {
            break;
        }
        let mut step = f / df;
        if step.abs() > 2.0 {
            step = 2.0 * step.signum();
        }
        lx -= step;
        if step.abs() < 1e-15 * lx.abs().max(1.0) {
            break;
        }
    }
    lx
}

/// Acklam's rational approximation, refined by one Halley step.
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383_577_518_672_69e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    let p = p.clamp(1e-300, 1.0 - 1e-16);
    if p < 0.02425 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - 0.02425 {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}
