//! Log-space numeric primitives shared by the samplers.
//!
//! Everything here operates on natural-log densities: with series longer
//! than 1e5 points, any product of likelihood terms underflows in linear
//! space, so normalizations go through [`log_sum_exp`] throughout the crate.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Gamma, OpenClosed01, StandardNormal};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Natural log of the gamma function.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Natural log of the beta function B(a, b).
#[inline]
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Log density of N(mean, var) at `x`.
#[inline]
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// Log density of Ga(shape, rate) at `x > 0`.
#[inline]
pub fn gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Log density of Beta(a, b) at `x` in (0, 1).
#[inline]
pub fn beta_logpdf(x: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b)
}

/// log(Σ exp(x_i)) with the max shifted out; -inf for an empty slice or
/// when every term is -inf.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn inv_logit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Regularized lower incomplete gamma P(a, x) = γ(a, x) / Γ(a).
///
/// Series expansion for x < a + 1, Lentz continued fraction otherwise;
/// both converge to ~1e-14 relative accuracy for the shapes used here.
pub fn reg_lower_gamma(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0, "reg_lower_gamma domain");
    if x == 0.0 {
        return 0.0;
    }
    let log_front = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        // series for P
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..500 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (log_front.exp() * sum).min(1.0)
    } else {
        // continued fraction for Q
        const FPMIN: f64 = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / FPMIN;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < FPMIN {
                d = FPMIN;
            }
            c = b + an / c;
            if c.abs() < FPMIN {
                c = FPMIN;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - log_front.exp() * h).max(0.0)
    }
}

/// Quantile of Ga(shape, rate) at probability `prob`, by bisection on the
/// regularized CDF.
pub fn gamma_quantile(shape: f64, rate: f64, prob: f64) -> f64 {
    assert!(shape > 0.0 && rate > 0.0 && (0.0..1.0).contains(&prob));
    if prob == 0.0 {
        return 0.0;
    }
    // bracket in the standardized (rate = 1) scale
    let mut hi = shape + 10.0 * shape.sqrt() + 10.0;
    while reg_lower_gamma(shape, hi) < prob {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if reg_lower_gamma(shape, mid) < prob {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    0.5 * (lo + hi) / rate
}

/// Gauss-Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Nodes and weights by Newton iteration on the Legendre recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 2);
        let mut nodes = alloc::vec![0.0; n];
        let mut weights = alloc::vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Chebyshev-based initial guess for the i-th root
            let mut x = (core::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                // Legendre P_n(x) and derivative via the three-term recurrence
                let mut p0 = 1.0;
                let mut p1 = x;
                for j in 2..=n {
                    let jf = j as f64;
                    let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                    p0 = p1;
                    p1 = p2;
                }
                dp = (n as f64) * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }
}

/// Draw from N(mean, var).
#[inline]
pub fn sample_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, var: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + var.sqrt() * z
}

/// Draw from Ga(shape, rate).
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    sample_log_gamma(rng, shape).exp() / rate
}

/// Draw from Beta(a, b) via two gamma draws (robust for small shapes).
pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    let la = sample_log_gamma(rng, a);
    let lb = sample_log_gamma(rng, b);
    // x/(x+y) computed stably from the logs
    let m = la.max(lb);
    let ea = (la - m).exp();
    let eb = (lb - m).exp();
    ea / (ea + eb)
}

/// Log of a Ga(shape, 1) draw.
///
/// Shapes below 1 use the boost trick ln G = ln G' + ln(U)/shape with
/// G' ~ Ga(shape + 1); the linear-space draw would underflow to zero for
/// the tiny concentrations (beta / L) that show up in the weight updates.
pub fn sample_log_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    assert!(shape > 0.0, "gamma shape must be positive");
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0).unwrap().sample(rng);
        g.ln()
    } else {
        let g: f64 = Gamma::new(shape + 1.0, 1.0).unwrap().sample(rng);
        let u: f64 = OpenClosed01.sample(rng);
        g.ln() + u.ln() / shape
    }
}

/// Fill `out` with a Dirichlet(shapes) draw. Normalization happens in log
/// space so that entries with tiny concentrations map to (possibly zero)
/// weights instead of 0/0.
pub fn sample_dirichlet_into<R: Rng + ?Sized>(rng: &mut R, shapes: &[f64], out: &mut [f64]) {
    assert_eq!(shapes.len(), out.len());
    if shapes.len() == 1 {
        out[0] = 1.0;
        return;
    }
    for (o, &s) in out.iter_mut().zip(shapes) {
        *o = sample_log_gamma(rng, s);
    }
    let lse = log_sum_exp(out);
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - lse).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Categorical draw from unnormalized log weights. Returns `None` when
/// every weight is -inf.
pub fn sample_categorical_log<R: Rng + ?Sized>(rng: &mut R, log_w: &[f64]) -> Option<usize> {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    let mut total = 0.0;
    for &w in log_w {
        total += (w - m).exp();
    }
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in log_w.iter().enumerate() {
        acc += (w - m).exp();
        if u < acc {
            return Some(i);
        }
    }
    Some(log_w.len() - 1)
}

/// Categorical draw from nonnegative linear weights; `None` if they sum
/// to zero or don't stay finite.
pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, w: &[f64]) -> Option<usize> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            return Some(i);
        }
    }
    Some(w.len() - 1)
}
