//! Scalar Gaussian kernels shared by the likelihood, inference and simulation code.
//!
//! All functions are pure and allocation free. The bivariate normal CDF follows
//! Genz's double-precision rework of the Drezner–Wesolowsky method, with
//! Gauss–Legendre rules of 6, 12 and 20 points selected by `|rho|`.
#![allow(clippy::excessive_precision)]

use core::f64::consts::{FRAC_1_SQRT_2, PI};

use libm::{asin, erfc, exp, lgamma, log, log1p, sin, sqrt, tanh, atanh};
use thiserror::Error;

/// `1 / sqrt(2 pi)`.
pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_677_94;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_741_78;
const SQRT_2PI: f64 = 2.506_628_274_631_000_502_4;

/// Lower clamp applied to probabilities handed to [`norm_quantile`].
pub const PROB_CLAMP: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum NumericsError {
    #[error("argument {name} = {value} is outside the domain")]
    Domain { name: &'static str, value: f64 },
}

/// Dependence parameter kept on both the unbounded working scale and the
/// correlation scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    rho_star: f64,
    rho: f64,
}

impl Correlation {
    pub fn from_working(rho_star: f64) -> Self {
        Self { rho_star, rho: tanh(rho_star) }
    }

    /// Panics-free constructor; values outside `(-1, 1)` are pulled to the
    /// nearest representable interior point.
    pub fn from_rho(rho: f64) -> Self {
        let r = rho.clamp(-1.0 + 1e-15, 1.0 - 1e-15);
        Self { rho_star: atanh(r), rho: r }
    }

    pub fn rho_star(&self) -> f64 {
        self.rho_star
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `d rho / d rho_star`.
    pub fn jacobian(&self) -> f64 {
        1.0 - self.rho * self.rho
    }
}

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * exp(-0.5 * x * x)
}

#[inline]
pub fn log_norm_pdf(x: f64) -> f64 {
    -LN_SQRT_2PI - 0.5 * x * x
}

#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// `log Phi(x)`, accurate far into the lower tail.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        let p = norm_cdf(x);
        if p > 0.5 {
            log1p(-norm_cdf(-x))
        } else {
            log(p)
        }
    } else {
        // Asymptotic expansion of the Mills ratio.
        let z2 = 1.0 / (x * x);
        log_norm_pdf(x) - log(-x) + log(1.0 - z2 + 3.0 * z2 * z2 - 15.0 * z2 * z2 * z2)
    }
}

/// Inverse Mills ratio `phi(x) / Phi(x)` together with a flag telling whether
/// the asymptotic branch was needed because `Phi(x)` underflows.
pub fn mills_ratio(x: f64) -> (f64, bool) {
    if x > -30.0 {
        (norm_pdf(x) / norm_cdf(x), false)
    } else {
        let z2 = 1.0 / (x * x);
        (-x / (1.0 - z2 + 3.0 * z2 * z2 - 15.0 * z2 * z2 * z2), true)
    }
}

/// Standard normal quantile (Wichura's AS241) polished by one Halley step.
///
/// `p` is clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`; exact 0 and 1 and
/// non-finite values are rejected.
pub fn norm_quantile(p: f64) -> Result<f64, NumericsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(NumericsError::Domain { name: "p", value: p });
    }
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if p > 0.5 {
        // 1 - p is exact here
        return Ok(-lower_quantile(1.0 - p));
    }
    Ok(lower_quantile(p))
}

fn lower_quantile(p: f64) -> f64 {
    let mut x = ppnd16(p);
    let e = norm_cdf(x) - p;
    let u = e * SQRT_2PI * exp(0.5 * x * x);
    x -= u / (1.0 + 0.5 * x * u);
    x
}

fn ppnd16(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r
                + 6.7265770927008700853e+4)
                * r
                + 4.5921953931549871457e+4)
                * r
                + 1.3731693765509461125e+4)
                * r
                + 1.9715909503065514427e+3)
                * r
                + 1.3314166789178437745e+2)
                * r
                + 3.3871328727963666080e0)
            / (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r
                + 3.9307895800092710610e+4)
                * r
                + 2.1213794301586595867e+4)
                * r
                + 5.3941960214247511077e+3)
                * r
                + 6.8718700749205790830e+2)
                * r
                + 4.2313330701600911252e+1)
                * r
                + 1.0);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = sqrt(-log(r));
    let val = if r <= 5.0 {
        let r = r - 1.6;
        (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
            + 2.41780725177450611770e-1)
            * r
            + 1.27045825245236838258e0)
            * r
            + 3.64784832476320460504e0)
            * r
            + 5.76949722146069140550e0)
            * r
            + 4.63033784615654529590e0)
            * r
            + 1.42343711074968357734e0)
            / (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                + 1.51986665636164571966e-2)
                * r
                + 1.48103976427480074590e-1)
                * r
                + 6.89767334985100004550e-1)
                * r
                + 1.67638483018380384940e0)
                * r
                + 2.05319162663775882187e0)
                * r
                + 1.0)
    } else {
        let r = r - 5.0;
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 1.24266094738807843860e-3)
            * r
            + 2.65321895265761230930e-2)
            * r
            + 2.96560571828504891230e-1)
            * r
            + 1.78482653991729133580e0)
            * r
            + 5.46378491116411436990e0)
            * r
            + 6.65790464350110377720e0)
            / (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                + 1.84631831751005468180e-5)
                * r
                + 7.86869131145613259100e-4)
                * r
                + 1.48753612908506148525e-2)
                * r
                + 1.36929880922735805310e-1)
                * r
                + 5.99832206555887937690e-1)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

// Gauss–Legendre half rules as (weight, abscissa) on [-1, 1].
const GL6: [(f64, f64); 3] = [
    (0.1713244923791705e+00, -0.9324695142031522e+00),
    (0.3607615730481384e+00, -0.6612093864662647e+00),
    (0.4679139345726904e+00, -0.2386191860831970e+00),
];

const GL12: [(f64, f64); 6] = [
    (0.4717533638651177e-01, -0.9815606342467191e+00),
    (0.1069393259953183e+00, -0.9041172563704750e+00),
    (0.1600783285433464e+00, -0.7699026741943050e+00),
    (0.2031674267230659e+00, -0.5873179542866171e+00),
    (0.2334925365383547e+00, -0.3678314989981802e+00),
    (0.2491470458134029e+00, -0.1252334085114692e+00),
];

const GL20: [(f64, f64); 10] = [
    (0.1761400713915212e-01, -0.9931285991850949e+00),
    (0.4060142980038694e-01, -0.9639719272779138e+00),
    (0.6267204833410906e-01, -0.9122344282513259e+00),
    (0.8327674157670475e-01, -0.8391169718222188e+00),
    (0.1019301198172404e+00, -0.7463319064601508e+00),
    (0.1181945319615184e+00, -0.6360536807265150e+00),
    (0.1316886384491766e+00, -0.5108670019508271e+00),
    (0.1420961093183821e+00, -0.3737060887154196e+00),
    (0.1491729864726037e+00, -0.2277858511416451e+00),
    (0.1527533871307259e+00, -0.7652652113349733e-01),
];

/// Correlations this close to `±1` use the degenerate closed forms.
pub const RHO_DEGENERATE: f64 = 1.0 - 1e-12;

/// `P(X <= a, Y <= b)` for a standard bivariate normal with correlation `rho`.
pub fn bvn_cdf(a: f64, b: f64, rho: f64) -> Result<f64, NumericsError> {
    if a.is_nan() {
        return Err(NumericsError::Domain { name: "a", value: a });
    }
    if b.is_nan() {
        return Err(NumericsError::Domain { name: "b", value: b });
    }
    if !rho.is_finite() || rho.abs() > 1.0 {
        return Err(NumericsError::Domain { name: "rho", value: rho });
    }
    Ok(bvn_cdf_unchecked(a, b, rho))
}

/// [`bvn_cdf`] without argument validation; `a`, `b` may be infinite.
pub fn bvn_cdf_unchecked(a: f64, b: f64, rho: f64) -> f64 {
    if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
        return 0.0;
    }
    if a == f64::INFINITY {
        return norm_cdf(b);
    }
    if b == f64::INFINITY {
        return norm_cdf(a);
    }
    if rho >= RHO_DEGENERATE {
        return norm_cdf(a.min(b));
    }
    if rho <= -RHO_DEGENERATE {
        return (norm_cdf(a) - norm_cdf(-b)).max(0.0);
    }
    let p = upper_orthant(-a, -b, rho).clamp(0.0, 1.0);
    if p < TAIL_SWITCH {
        lower_tail(a, b, rho)
    } else {
        p
    }
}

/// Below this value the orthant integral only has absolute accuracy and the
/// probability is recomputed by one-dimensional quadrature.
const TAIL_SWITCH: f64 = 1e-7;

/// `P(X <= a, Y <= b) = int_{-inf}^{b} phi(y) Phi((a - rho y) / r) dy`, with
/// relative accuracy in the far tails. The log integrand is concave with
/// curvature at most -1, so nine units below its mode the mass is negligible.
fn lower_tail(a: f64, b: f64, rho: f64) -> f64 {
    let r = sqrt((1.0 - rho) * (1.0 + rho));
    let slope = |y: f64| -> f64 {
        let c = (a - rho * y) / r;
        -y - rho / r * mills_ratio(c).0
    };
    let log_g = |y: f64| log_norm_pdf(y) + log_norm_cdf((a - rho * y) / r);
    let upper_slope = slope(b);
    let (lo, hi) = if upper_slope >= 0.0 {
        (b - (45.0 / upper_slope.max(1e-300)).min(9.0), b)
    } else {
        let mut step = 1.0;
        let mut left = b - step;
        while slope(left) < 0.0 && step < 1e6 {
            step *= 2.0;
            left = b - step;
        }
        let mut right = b;
        for _ in 0..200 {
            let mid = 0.5 * (left + right);
            if slope(mid) > 0.0 {
                left = mid;
            } else {
                right = mid;
            }
            if right - left < 1e-12 * (1.0 + left.abs()) {
                break;
            }
        }
        let mode = 0.5 * (left + right);
        (mode - 9.0, b.min(mode + 9.0))
    };
    let peak = log_g(hi).max(log_g(0.5 * (lo + hi))).max(log_g(lo));
    let width = hi - lo;
    let curvature = sqrt(1.0 + rho * rho / (r * r));
    let panels = ((width * curvature).ceil() as usize).clamp(8, 1024);
    let hpan = width / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let centre = lo + (k as f64 + 0.5) * hpan;
        for &(w, x) in &GL20 {
            for sign in [-1.0, 1.0] {
                let y = centre + sign * x * 0.5 * hpan;
                total += w * exp(log_g(y) - peak);
            }
        }
    }
    total * 0.5 * hpan * exp(peak)
}

/// `P(X > h, Y > k)`.
fn upper_orthant(h: f64, k: f64, r: f64) -> f64 {
    let rabs = r.abs();
    let rule: &[(f64, f64)] = if rabs < 0.3 {
        &GL6
    } else if rabs < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let hk = h * k;
    if rabs < 0.925 {
        let mut bvn = 0.0;
        if rabs > 0.0 {
            let hs = 0.5 * (h * h + k * k);
            let asr = asin(r);
            for &(w, x) in rule {
                for sign in [-1.0, 1.0] {
                    let sn = sin(0.5 * asr * (sign * x + 1.0));
                    bvn += w * exp((sn * hk - hs) / (1.0 - sn * sn));
                }
            }
            bvn *= asr / (4.0 * PI);
        }
        return bvn + norm_cdf(-h) * norm_cdf(-k);
    }

    let (k, hk) = if r < 0.0 { (-k, -hk) } else { (k, hk) };
    let mut bvn = 0.0;
    if rabs < 1.0 {
        let a_s = (1.0 - r) * (1.0 + r);
        let mut a = sqrt(a_s);
        let b_s = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        bvn = a
            * exp(-0.5 * (b_s / a_s + hk))
            * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0 + c * d * a_s * a_s / 5.0);
        if hk > -160.0 {
            let b = sqrt(b_s);
            bvn -= exp(-0.5 * hk) * SQRT_2PI * norm_cdf(-b / a) * b * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
        }
        a *= 0.5;
        for &(w, x) in rule {
            for sign in [-1.0, 1.0] {
                let t = a * (sign * x + 1.0);
                let xs = t * t;
                let rs = sqrt(1.0 - xs);
                bvn += a
                    * w
                    * (exp(-b_s / (2.0 * xs) - hk / (1.0 + rs)) / rs
                        - exp(-0.5 * (b_s / xs + hk)) * (1.0 + c * xs * (1.0 + d * xs)));
            }
        }
        bvn = -bvn / (2.0 * PI);
    }
    if r > 0.0 {
        bvn + norm_cdf(-h.max(k))
    } else {
        -bvn + (norm_cdf(-h) - norm_cdf(-k)).max(0.0)
    }
}

/// `d/db P(X <= a, Y <= b) = phi(b) Phi((a - rho b) / sqrt(1 - rho^2))`.
pub fn bvn_cdf_partial_b(a: f64, b: f64, rho: f64) -> Result<f64, NumericsError> {
    if a.is_nan() || b.is_nan() || !rho.is_finite() || rho.abs() > 1.0 {
        return Err(NumericsError::Domain { name: "bvn_cdf_partial_b", value: f64::NAN });
    }
    if b.is_infinite() {
        return Ok(0.0);
    }
    let pb = norm_pdf(b);
    if a == f64::INFINITY {
        return Ok(pb);
    }
    if a == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    if rho >= RHO_DEGENERATE {
        return Ok(if b < a { pb } else { 0.0 });
    }
    if rho <= -RHO_DEGENERATE {
        return Ok(if b > -a { pb } else { 0.0 });
    }
    let r = sqrt((1.0 - rho) * (1.0 + rho));
    Ok(pb * norm_cdf((a - rho * b) / r))
}

/// Standard bivariate normal density.
pub fn bvn_pdf(a: f64, b: f64, rho: f64) -> f64 {
    let r2 = (1.0 - rho) * (1.0 + rho);
    let q = (a * a - 2.0 * rho * a * b + b * b) / r2;
    exp(-0.5 * q) / (2.0 * PI * sqrt(r2))
}

/// Upper tail of the chi-square distribution with `df` degrees of freedom.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(0.5 * df, 0.5 * x)
}

/// Regularized upper incomplete gamma function `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let ln_front = a * log(x) - x - lgamma(a);
    if x < a + 1.0 {
        // series for P
        let mut sum = 1.0 / a;
        let mut term = sum;
        let mut ap = a;
        for _ in 0..1000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (1.0 - sum * exp(ln_front)).clamp(0.0, 1.0)
    } else {
        // modified Lentz continued fraction for Q
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (exp(ln_front) * h).clamp(0.0, 1.0)
    }
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = lgamma(a + b) - lgamma(a) - lgamma(b) + a * log(x) + b * log(1.0 - x);
    if x < (a + 1.0) / (a + b + 2.0) {
        exp(ln_front) * beta_fraction(a, b, x) / a
    } else {
        1.0 - exp(ln_front) * beta_fraction(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        for an in [
            m * (b - m) * x / ((a + m2 - 1.0) * (a + m2)),
            -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0)),
        ] {
            d = 1.0 + an * d;
            if d.abs() < tiny {
                d = tiny;
            }
            c = 1.0 + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// CDF of Student's t distribution with `df` degrees of freedom.
pub fn student_t_cdf(x: f64, df: f64) -> f64 {
    let tail = 0.5 * beta_inc(0.5 * df, 0.5, df / (df + x * x));
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bisect_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if norm_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn univariate_reference_values() {
        assert_eq!(norm_cdf(0.0), 0.5);
        assert!((norm_pdf(0.0) - 0.398_942_280_401_432_7).abs() < 1e-16);
        let q = norm_quantile(0.975).unwrap();
        assert!((q - bisect_quantile(0.975)).abs() < 1e-13);
        assert!((q - 1.959_963_984_540_054).abs() < 1e-12);
    }

    #[test]
    fn quantile_matches_bisection_oracle() {
        for i in 1..200 {
            let p = i as f64 / 200.0;
            let q = norm_quantile(p).unwrap();
            assert!((q - bisect_quantile(p)).abs() < 1e-12, "p={p}");
        }
        for &p in &[1e-15, 1e-12, 1e-9, 1e-6, 1e-3] {
            let q = norm_quantile(p).unwrap();
            assert!((q - bisect_quantile(p)).abs() < 1e-10, "p={p}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        // A round trip can only be as good as the rounding of Phi(x) allows:
        // one ulp of p moves the quantile by ulp(p) / phi(x).
        let mut x = -6.0;
        while x <= 6.0 {
            let p = norm_cdf(x);
            let back = norm_quantile(p).unwrap();
            let conditioning = f64::EPSILON * p / norm_pdf(x);
            assert!((back - x).abs() <= 1e-12f64.max(2.0 * conditioning), "x={x} back={back}");
            x += 0.01;
        }
    }

    #[test]
    fn quantile_domain_errors() {
        assert!(norm_quantile(0.0).is_err());
        assert!(norm_quantile(1.0).is_err());
        assert!(norm_quantile(f64::NAN).is_err());
        // clamped, finite
        assert!(norm_quantile(1e-300).unwrap().is_finite());
    }

    #[test]
    fn bvn_reference_values() {
        assert!((bvn_cdf(0.0, 0.0, 0.0).unwrap() - 0.25).abs() < 1e-15);
        assert!((bvn_cdf(0.0, 0.0, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-14);
        for &x in &[-3.0, -0.7, 0.0, 1.2, 4.0] {
            for &r in &[-0.95, -0.2, 0.0, 0.6, 0.99] {
                assert!((bvn_cdf(x, f64::INFINITY, r).unwrap() - norm_cdf(x)).abs() < 1e-15);
                assert_eq!(bvn_cdf(x, f64::NEG_INFINITY, r).unwrap(), 0.0);
            }
        }
        assert!(bvn_cdf(f64::NAN, 0.0, 0.1).is_err());
        assert!(bvn_cdf(0.0, 0.0, 1.5).is_err());
    }

    #[test]
    fn bvn_tails_have_relative_accuracy() {
        let v = bvn_cdf(-6.0, -5.0, 0.0).unwrap();
        assert!((v / (norm_cdf(-6.0) * norm_cdf(-5.0)) - 1.0).abs() < 1e-10);
        // 40-digit adaptive quadrature of int phi(y) Phi((a - r y) / sqrt(1 - r^2)) dy
        let frozen = [
            (-0.16, -3.3, -0.8, 2.623_528_881_204_109_6e-10),
            (-4.0, -5.0, 0.5, 1.523_497_959_348_321_3e-8),
            (2.0, -7.0, -0.95, 3.223_319_257_393_857_2e-63),
            (-9.0, -3.0, 0.97, 1.128_588_405_953_840_6e-19),
            (-3.0, -3.5, -0.3, 1.862_266_806_564_66e-9),
        ];
        for &(a, b, r, o) in &frozen {
            let v = bvn_cdf(a, b, r).unwrap();
            assert!((v / o - 1.0).abs() < 1e-8, "({a}, {b}, {r}): {v} vs {o}");
        }
        // continuity across the switch to quadrature
        let (a, r) = (-1.0, -0.5);
        let mut b = -3.5;
        let mut prev = bvn_cdf(a, b, r).unwrap();
        while b > -6.0 {
            b -= 0.01;
            let next = bvn_cdf(a, b, r).unwrap();
            assert!(next < prev && next > 0.0);
            prev = next;
        }
    }

    #[test]
    fn bvn_degenerate_correlations() {
        assert!((bvn_cdf(0.3, -0.2, 1.0).unwrap() - norm_cdf(-0.2)).abs() < 1e-15);
        let expect = (norm_cdf(0.3) - norm_cdf(0.2)).max(0.0);
        assert!((bvn_cdf(0.3, -0.2, -1.0).unwrap() - expect).abs() < 1e-15);
        // continuity into the degenerate branch
        let near = bvn_cdf(0.3, -0.2, 1.0 - 1e-11).unwrap();
        assert!((near - norm_cdf(-0.2)).abs() < 1e-5);
    }

    #[test]
    fn bvn_partial_reference_values() {
        let v = bvn_cdf_partial_b(0.0, 0.0, 0.0).unwrap();
        assert!((v - 0.5 * norm_pdf(0.0)).abs() < 1e-16);
        assert!((bvn_cdf_partial_b(f64::INFINITY, 0.4, 0.3).unwrap() - norm_pdf(0.4)).abs() < 1e-16);
        let (a, b, r) = (2.0, -1.0, 0.3);
        let h = 1e-6;
        let fd = (bvn_cdf(a, b + h, r).unwrap() - bvn_cdf(a, b - h, r).unwrap()) / (2.0 * h);
        let an = bvn_cdf_partial_b(a, b, r).unwrap();
        assert!(((an - fd) / an).abs() < 1e-6, "{an} vs {fd}");
    }

    #[test]
    fn mills_ratio_branches_agree() {
        let (direct, flagged) = mills_ratio(-29.9);
        assert!(!flagged);
        let z2 = 1.0 / (29.9f64 * 29.9);
        let asym = 29.9 / (1.0 - z2 + 3.0 * z2 * z2 - 15.0 * z2 * z2 * z2);
        assert!(((direct - asym) / direct).abs() < 1e-8);
        assert!(mills_ratio(-50.0).1);
        assert!((log_norm_cdf(-29.9) - log(norm_cdf(-29.9))).abs() < 1e-10);
        assert!((log_norm_cdf(5.0) - log(norm_cdf(5.0))).abs() < 1e-15);
    }

    #[test]
    fn chi_square_tail_reference() {
        // df = 1 tail equals 2 * Phi(-sqrt(x))
        for &x in &[0.1, 1.0, 3.84, 10.0, 30.0] {
            let expect = 2.0 * norm_cdf(-sqrt(x));
            assert!((chi_square_sf(x, 1.0) - expect).abs() < 1e-13, "x={x}");
        }
        // df = 2 tail is exp(-x / 2)
        for &x in &[0.5, 2.0, 9.0] {
            assert!((chi_square_sf(x, 2.0) - exp(-0.5 * x)).abs() < 1e-14);
        }
    }

    #[test]
    fn student_t_reference_values() {
        let cases = [
            (2.0, 5.0, 0.9490302605850709),
            (-1.3, 5.0, 0.12515031708533858),
            (0.4, 3.0, 0.6420324230128149),
            (-6.0, 5.0, 0.000923069144797007),
            (10.0, 7.0, 0.9999893028985546),
        ];
        for (x, df, want) in cases {
            let got = student_t_cdf(x, df);
            assert!((got - want).abs() < 1e-13 && ((got - want) / want).abs() < 1e-11, "{x} {df}: {got}");
        }
        assert_eq!(student_t_cdf(0.0, 5.0), 0.5);
    }

    #[test]
    fn correlation_round_trip() {
        let mut r = -0.999;
        while r <= 0.999 {
            let c = Correlation::from_rho(r);
            assert!((tanh(c.rho_star()) - r).abs() < 1e-14);
            assert!((Correlation::from_working(c.rho_star()).rho() - r).abs() < 1e-14);
            r += 0.003;
        }
    }
}
