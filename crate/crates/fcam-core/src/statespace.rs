//! Linear-Gaussian half of the sampler: Kalman forward filter, backward
//! sampling of the calcium path, and the conjugate / Metropolis-Hastings
//! updates for the baseline, the two variances and the AR coefficient.
//!
//! Filter recursions, with `A_t` treated as a known shift of the state
//! equation and `m_0 = 0`, `C_0 = var(c_0)`:
//!
//! ```text
//! a_t = gamma m_{t-1} + A_t          R_t = gamma^2 C_{t-1} + tau2
//! m_t = a_t + R_t (R_t + sigma2)^{-1} (y_t - b - a_t)
//! C_t = R_t - R_t^2 (R_t + sigma2)^{-1}
//! ```
//!
//! Backward pass: c_T ~ N(m_T, C_T), then for t = T-1..0
//! c_t ~ N(m_t + gamma C_t R_{t+1}^{-1} (c_{t+1} - a_{t+1}),
//!         C_t - gamma^2 C_t^2 R_{t+1}^{-1}).

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::math::{beta_logpdf, inv_logit, logit, sample_gamma, sample_normal};
use crate::model::{BetaPrior, HyperParams, Trace};
use crate::state::ChainState;

/// Variances are floored here before any inversion; hitting the floor is
/// reported through [`FilterCache::clamp_events`].
pub const VAR_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub enum StateSpaceError {
    /// Filter produced a NaN/inf at the given 1-based time index, which
    /// signals a divergent chain state.
    NonFiniteFilter(usize),
    /// Backward-sampling variance went negative beyond tolerance; the cache
    /// does not belong to the state it was used with.
    BadBackwardVariance(usize),
}

impl core::fmt::Display for StateSpaceError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            StateSpaceError::NonFiniteFilter(t) => {
                write!(f, "non-finite filter value at t={t}")
            }
            StateSpaceError::BadBackwardVariance(t) => {
                write!(f, "negative backward-sampling variance at t={t}")
            }
        }
    }
}

impl core::error::Error for StateSpaceError {}

/// Filtering quantities for t = 1..T plus the time-0 values.
#[derive(Debug, Clone, Default)]
pub struct FilterCache {
    /// a_t: one-step state predictions.
    pub pred_mean: Vec<f64>,
    /// R_t: prediction variances (>= tau2).
    pub pred_var: Vec<f64>,
    /// m_t: filtered means.
    pub filt_mean: Vec<f64>,
    /// C_t: filtered variances.
    pub filt_var: Vec<f64>,
    /// m_0 (always 0 in this model).
    pub mean0: f64,
    /// C_0 = var(c_0).
    pub var0: f64,
    /// Number of variance floorings that occurred in the pass.
    pub clamp_events: usize,
}

impl FilterCache {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            pred_mean: Vec::with_capacity(n),
            pred_var: Vec::with_capacity(n),
            filt_mean: Vec::with_capacity(n),
            filt_var: Vec::with_capacity(n),
            ..Self::default()
        }
    }
}

/// Forward Kalman pass under the current scalars, with `amps[t-1]` = A_t.
pub fn kalman_forward(
    trace: &Trace,
    hyper: &HyperParams,
    state: &ChainState,
    amps: &[f64],
    cache: &mut FilterCache,
) -> Result<(), StateSpaceError> {
    let y = trace.y();
    assert_eq!(amps.len(), y.len());
    cache.pred_mean.clear();
    cache.pred_var.clear();
    cache.filt_mean.clear();
    cache.filt_var.clear();
    cache.mean0 = 0.0;
    cache.var0 = hyper.init_calcium_var;
    cache.clamp_events = 0;

    let gamma = state.gamma;
    let g2 = gamma * gamma;
    let (sigma2, tau2) = (state.sigma2, state.tau2);
    let b = state.baseline;

    let mut m_prev = cache.mean0;
    let mut c_prev = cache.var0;
    for t in 0..y.len() {
        let a = gamma * m_prev + amps[t];
        let mut r = g2 * c_prev + tau2;
        if r < VAR_FLOOR {
            r = VAR_FLOOR;
            cache.clamp_events += 1;
        }
        let mut denom = r + sigma2;
        if denom < VAR_FLOOR {
            denom = VAR_FLOOR;
            cache.clamp_events += 1;
        }
        let gain = r / denom;
        let m = a + gain * (y[t] - b - a);
        let c = r * sigma2 / denom;
        if !(m.is_finite() && c.is_finite() && r.is_finite()) {
            return Err(StateSpaceError::NonFiniteFilter(t + 1));
        }
        cache.pred_mean.push(a);
        cache.pred_var.push(r);
        cache.filt_mean.push(m);
        cache.filt_var.push(c);
        m_prev = m;
        c_prev = c;
    }
    Ok(())
}

/// Backward joint draw of c_0..c_T into `out` (resized to T+1). The cache
/// must come from [`kalman_forward`] under the same state.
pub fn ffbs_sample<R: Rng + ?Sized>(
    cache: &FilterCache,
    state: &ChainState,
    rng: &mut R,
    out: &mut Vec<f64>,
) -> Result<(), StateSpaceError> {
    let t_len = cache.filt_mean.len();
    let gamma = state.gamma;
    let tau2 = state.tau2;
    out.clear();
    out.resize(t_len + 1, 0.0);

    out[t_len] = sample_normal(rng, cache.filt_mean[t_len - 1], cache.filt_var[t_len - 1]);
    for t in (0..t_len).rev() {
        // t indexes c_t; filter arrays are offset by one (entry t-1 <-> time t)
        let (m, c) = if t == 0 {
            (cache.mean0, cache.var0)
        } else {
            (cache.filt_mean[t - 1], cache.filt_var[t - 1])
        };
        let r_next = cache.pred_var[t];
        let a_next = cache.pred_mean[t];
        let h = m + gamma * c / r_next * (out[t + 1] - a_next);
        // algebraically C - gamma^2 C^2 / R_{t+1} with R_{t+1} = gamma^2 C + tau2
        let hv = c * tau2 / r_next;
        if !(h.is_finite() && hv.is_finite()) || hv < -1e-12 {
            return Err(StateSpaceError::BadBackwardVariance(t));
        }
        out[t] = sample_normal(rng, h, hv.max(0.0));
    }
    Ok(())
}

/// Conjugate posterior (mean, variance) of the baseline given the path:
/// precision 1/B_0 + T/sigma2, precision-weighted mean.
pub fn baseline_posterior(trace: &Trace, calcium: &[f64], sigma2: f64, hyper: &HyperParams) -> (f64, f64) {
    let t_len = trace.len();
    let resid_sum: f64 = trace
        .y()
        .iter()
        .zip(&calcium[1..])
        .map(|(&y, &c)| y - c)
        .sum();
    let prec = 1.0 / hyper.baseline_var + t_len as f64 / sigma2;
    let mean = (hyper.baseline_mean / hyper.baseline_var + resid_sum / sigma2) / prec;
    (mean, 1.0 / prec)
}

pub fn update_baseline<R: Rng + ?Sized>(
    trace: &Trace,
    calcium: &[f64],
    sigma2: f64,
    hyper: &HyperParams,
    rng: &mut R,
) -> f64 {
    let (mean, var) = baseline_posterior(trace, calcium, sigma2, hyper);
    sample_normal(rng, mean, var)
}

/// Gamma posteriors on the two precisions, as ((shape, rate), (shape, rate))
/// for 1/sigma2 and 1/tau2.
pub fn variance_posteriors(
    trace: &Trace,
    calcium: &[f64],
    amps: &[f64],
    baseline: f64,
    gamma: f64,
    hyper: &HyperParams,
) -> ((f64, f64), (f64, f64)) {
    let t_len = trace.len();
    let mut obs_ss = 0.0;
    let mut drive_ss = 0.0;
    for t in 0..t_len {
        let e = trace.y()[t] - calcium[t + 1] - baseline;
        obs_ss += e * e;
        let w = calcium[t + 1] - gamma * calcium[t] - amps[t];
        drive_ss += w * w;
    }
    let half_t = 0.5 * t_len as f64;
    (
        (hyper.noise_prec.shape + half_t, hyper.noise_prec.rate + 0.5 * obs_ss),
        (hyper.drive_prec.shape + half_t, hyper.drive_prec.rate + 0.5 * drive_ss),
    )
}

pub fn update_variances<R: Rng + ?Sized>(
    trace: &Trace,
    calcium: &[f64],
    amps: &[f64],
    baseline: f64,
    gamma: f64,
    hyper: &HyperParams,
    rng: &mut R,
) -> (f64, f64) {
    let ((s_sh, s_rt), (t_sh, t_rt)) = variance_posteriors(trace, calcium, amps, baseline, gamma, hyper);
    let sigma2 = 1.0 / sample_gamma(rng, s_sh, s_rt);
    let tau2 = 1.0 / sample_gamma(rng, t_sh, t_rt);
    (sigma2, tau2)
}

/// Sufficient statistics of the state equation for the gamma update:
/// cross = sum (c_t - A_t) c_{t-1}, prev_sq = sum c_{t-1}^2.
#[derive(Debug, Clone, Copy, Default)]
pub struct ArSuffStats {
    pub cross: f64,
    pub prev_sq: f64,
}

pub fn ar_suff_stats(calcium: &[f64], amps: &[f64]) -> ArSuffStats {
    let mut s = ArSuffStats::default();
    for t in 0..amps.len() {
        let prev = calcium[t];
        s.cross += (calcium[t + 1] - amps[t]) * prev;
        s.prev_sq += prev * prev;
    }
    s
}

/// Unnormalized log conditional of gamma (prior times state-equation terms;
/// data terms that do not involve gamma are dropped).
pub fn gamma_log_target(gamma: f64, stats: &ArSuffStats, tau2: f64, prior: &BetaPrior) -> f64 {
    beta_logpdf(gamma, prior.a, prior.b)
        - (gamma * gamma * stats.prev_sq - 2.0 * gamma * stats.cross) / (2.0 * tau2)
}

/// One logit-scale random-walk MH step for gamma. Returns the (possibly
/// unchanged) value and whether the proposal was accepted.
pub fn update_gamma_mh<R: Rng + ?Sized>(
    current: f64,
    stats: &ArSuffStats,
    tau2: f64,
    prior: &BetaPrior,
    step: f64,
    rng: &mut R,
) -> (f64, bool) {
    let z = logit(current);
    let z_new = z + step * sample_normal(rng, 0.0, 1.0);
    let cand = inv_logit(z_new);
    if !(cand > 0.0 && cand < 1.0) {
        // saturated logistic; reject to stay inside (0,1)
        return (current, false);
    }
    // Jacobian of the logit transform: d gamma / d z = gamma (1 - gamma)
    let log_accept = gamma_log_target(cand, stats, tau2, prior) + cand.ln() + (1.0 - cand).ln()
        - gamma_log_target(current, stats, tau2, prior)
        - current.ln()
        - (1.0 - current).ln();
    if log_accept >= 0.0 || rng.gen::<f64>() < log_accept.exp() {
        (cand, true)
    } else {
        (current, false)
    }
}
