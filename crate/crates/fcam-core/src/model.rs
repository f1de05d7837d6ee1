//! Domain types and prior densities for the finite common atom model.
//!
//! The generative model: an observed fluorescence trace `y_t` follows a
//! latent AR(1) calcium level `c_t` with baseline `b`, decay `gamma` and
//! jump amplitudes `A_t >= 0`,
//!
//! ```text
//! y_t = b + c_t + eps_t,            eps_t ~ N(0, sigma2)
//! c_t = gamma c_{t-1} + A_t + w_t,  w_t  ~ N(0, tau2)
//! ```
//!
//! and the amplitudes are drawn from a two-layer finite mixture: each
//! experimental condition picks one of `K` distributional components, each
//! of which is itself a mixture over `L` shared atoms whose values come
//! from a spike-and-slab base measure (point mass at zero, gamma slab).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::math::{ln_beta, ln_gamma, normal_logpdf};

/// Validation and input errors.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// Fewer than two usable rows.
    TooShort(usize),
    /// A y value is NaN or infinite (0-based row index attached).
    NonFiniteFluorescence(usize),
    /// Time stamps not strictly increasing (0-based row index attached).
    NonMonotonicTime(usize),
    /// Frame rate must be positive and finite.
    BadFrameRate(f64),
    /// A hyperparameter that must be strictly positive is not.
    NonPositiveHyper(&'static str),
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::TooShort(n) => write!(f, "need at least 2 rows, got {n}"),
            ModelError::NonFiniteFluorescence(i) => {
                write!(f, "non-finite fluorescence at row {i}")
            }
            ModelError::NonMonotonicTime(i) => {
                write!(f, "time stamps must be strictly increasing (row {i})")
            }
            ModelError::BadFrameRate(r) => write!(f, "frame rate must be positive, got {r}"),
            ModelError::NonPositiveHyper(name) => {
                write!(f, "hyperparameter {name} must be strictly positive")
            }
        }
    }
}

impl core::error::Error for ModelError {}

/// An observed fluorescence trace with per-frame condition labels.
///
/// Conditions are relabeled to contiguous 0-based indices in order of first
/// appearance; the original tokens are kept for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    y: Vec<f64>,
    cond: Vec<u32>,
    cond_names: Vec<String>,
    frame_rate_hz: f64,
}

impl Trace {
    /// Build a trace from raw `(time, y, condition)` rows.
    pub fn from_rows<'a, I>(rows: I, frame_rate_hz: f64) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (i64, f64, &'a str)>,
    {
        if !(frame_rate_hz > 0.0) || !frame_rate_hz.is_finite() {
            return Err(ModelError::BadFrameRate(frame_rate_hz));
        }
        let mut y = Vec::new();
        let mut cond = Vec::new();
        let mut cond_names: Vec<String> = Vec::new();
        let mut last_t: Option<i64> = None;
        for (i, (t, yi, label)) in rows.into_iter().enumerate() {
            if !yi.is_finite() {
                return Err(ModelError::NonFiniteFluorescence(i));
            }
            if let Some(prev) = last_t {
                if t <= prev {
                    return Err(ModelError::NonMonotonicTime(i));
                }
            }
            last_t = Some(t);
            let idx = match cond_names.iter().position(|n| n == label) {
                Some(j) => j,
                None => {
                    cond_names.push(label.to_string());
                    cond_names.len() - 1
                }
            };
            y.push(yi);
            cond.push(idx as u32);
        }
        if y.len() < 2 {
            return Err(ModelError::TooShort(y.len()));
        }
        Ok(Self {
            y,
            cond,
            cond_names,
            frame_rate_hz,
        })
    }

    /// Build directly from already-contiguous 0-based condition indices.
    pub fn from_parts(y: Vec<f64>, cond: Vec<u32>, frame_rate_hz: f64) -> Result<Self, ModelError> {
        let n_cond = cond.iter().copied().max().map_or(0, |m| m as usize + 1);
        let names: Vec<String> = (1..=n_cond).map(|j| format!("{j}")).collect();
        let rows: Vec<(i64, f64, &str)> = y
            .iter()
            .zip(&cond)
            .enumerate()
            .map(|(i, (&yi, &c))| (i as i64, yi, names[c as usize].as_str()))
            .collect();
        // route through from_rows so the same validation applies
        let mut tr = Trace::from_rows(rows, frame_rate_hz)?;
        debug_assert_eq!(tr.cond, cond);
        tr.cond_names = names;
        Ok(tr)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// 0-based condition index per frame.
    pub fn cond(&self) -> &[u32] {
        &self.cond
    }

    /// Number of distinct conditions J.
    pub fn n_cond(&self) -> usize {
        self.cond_names.len()
    }

    /// Original condition tokens, indexed by 0-based condition.
    pub fn cond_names(&self) -> &[String] {
        &self.cond_names
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn duration_secs(&self) -> f64 {
        self.y.len() as f64 / self.frame_rate_hz
    }
}

/// Gamma prior in (shape, rate) form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

/// Beta prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaPrior {
    pub a: f64,
    pub b: f64,
}

/// Parameters of a beta-negative-binomial distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnbParams {
    pub r: f64,
    pub a: f64,
    pub b: f64,
}

/// All fixed prior hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Prior mean of the baseline b.
    pub baseline_mean: f64,
    /// Prior variance of the baseline b.
    pub baseline_var: f64,
    /// Variance of the initial calcium level c_0.
    pub init_calcium_var: f64,
    /// Prior on the observation precision 1/sigma2.
    pub noise_prec: GammaPrior,
    /// Prior on the state precision 1/tau2.
    pub drive_prec: GammaPrior,
    /// Beta prior on the AR coefficient gamma.
    pub decay: BetaPrior,
    /// Beta prior on the slab probability p.
    pub slab_prob: BetaPrior,
    /// Gamma slab on positive atom amplitudes.
    pub slab_amp: GammaPrior,
    /// Prior on K - 1 (number of distributional components).
    pub dist_count: BnbParams,
    /// Prior on L - 1 (number of observational components).
    pub obs_count: BnbParams,
    /// Gamma prior on the distributional Dirichlet concentration alpha.
    pub dist_conc: GammaPrior,
    /// Gamma prior on the observational Dirichlet concentration beta.
    pub obs_conc: GammaPrior,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            baseline_mean: 0.0,
            baseline_var: 1.0,
            init_calcium_var: 1.0,
            noise_prec: GammaPrior {
                shape: 1.0,
                rate: 1.0,
            },
            drive_prec: GammaPrior {
                shape: 1.0,
                rate: 1.0,
            },
            decay: BetaPrior { a: 1.0, b: 1.0 },
            slab_prob: BetaPrior { a: 1.0, b: 9.0 },
            slab_amp: GammaPrior {
                shape: 8.0,
                rate: 8.0,
            },
            dist_count: BnbParams {
                r: 1.0,
                a: 4.0,
                b: 3.0,
            },
            obs_count: BnbParams {
                r: 1.0,
                a: 4.0,
                b: 3.0,
            },
            dist_conc: GammaPrior {
                shape: 1.0,
                rate: 1.0,
            },
            obs_conc: GammaPrior {
                shape: 1.0,
                rate: 1.0,
            },
        }
    }
}

impl HyperParams {
    /// Check positivity constraints; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, ModelError> {
        let positives: [(&'static str, f64); 18] = [
            ("baseline_var", self.baseline_var),
            ("init_calcium_var", self.init_calcium_var),
            ("noise_prec.shape", self.noise_prec.shape),
            ("noise_prec.rate", self.noise_prec.rate),
            ("drive_prec.shape", self.drive_prec.shape),
            ("drive_prec.rate", self.drive_prec.rate),
            ("decay.a", self.decay.a),
            ("decay.b", self.decay.b),
            ("slab_prob.a", self.slab_prob.a),
            ("slab_prob.b", self.slab_prob.b),
            ("slab_amp.shape", self.slab_amp.shape),
            ("slab_amp.rate", self.slab_amp.rate),
            ("dist_conc.shape", self.dist_conc.shape),
            ("dist_conc.rate", self.dist_conc.rate),
            ("obs_conc.shape", self.obs_conc.shape),
            ("obs_conc.rate", self.obs_conc.rate),
            ("dist_count.r", self.dist_count.r),
            ("obs_count.r", self.obs_count.r),
        ];
        for (name, v) in positives {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ModelError::NonPositiveHyper(name));
            }
        }
        for (name, v) in [
            ("dist_count.a", self.dist_count.a),
            ("dist_count.b", self.dist_count.b),
            ("obs_count.a", self.obs_count.a),
            ("obs_count.b", self.obs_count.b),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ModelError::NonPositiveHyper(name));
            }
        }
        let mut warnings = Vec::new();
        if self.slab_prob.a >= self.slab_prob.b {
            warnings.push(
                "slab_prob.a >= slab_prob.b: the prior on p does not favor sparse detections"
                    .to_string(),
            );
        }
        Ok(warnings)
    }
}

/// log P(X = k) for X ~ BNB(r, a, b),
/// P(X=k) = Gamma(r+k) / (k! Gamma(r)) * B(a+r, b+k) / B(a, b).
///
/// The priors on the component counts K and L are translated by one:
/// P(K = k+1) = P(X = k).
pub fn bnb_log_pmf(k: u64, r: f64, a: f64, b: f64) -> f64 {
    assert!(r > 0.0 && a > 0.0 && b > 0.0, "BNB parameters must be positive");
    let kf = k as f64;
    ln_gamma(r + kf) - ln_gamma(kf + 1.0) - ln_gamma(r) + ln_beta(a + r, b + kf) - ln_beta(a, b)
}

/// Collapsed observation log-likelihood: the state-equation noise is
/// integrated out, giving y_t ~ N(b + gamma c_{t-1} + A_t, sigma2 + tau2).
#[inline]
pub fn collapsed_loglik(
    y_t: f64,
    c_prev: f64,
    amp: f64,
    baseline: f64,
    gamma: f64,
    sigma2: f64,
    tau2: f64,
) -> f64 {
    debug_assert!(sigma2 > 0.0 && tau2 > 0.0);
    normal_logpdf(y_t, baseline + gamma * c_prev + amp, sigma2 + tau2)
}

/// Prior over a component count (K or L), with a finite support table.
pub trait CountPrior {
    /// log P(count), count >= 1.
    fn log_pmf(&self, count: usize) -> f64;
    /// Largest supported count.
    fn max_count(&self) -> usize;
}

/// Hard ceiling on the truncated support of [`TranslatedBnb`]; reaching it
/// is recorded by the sampler diagnostics.
pub const COUNT_SUPPORT_CAP: usize = 10_000;

/// Translated BNB prior on a component count: count - 1 ~ BNB(r, a, b),
/// tabulated up to the point where the remaining tail mass is below 1e-12
/// (or [`COUNT_SUPPORT_CAP`], whichever comes first).
#[derive(Debug, Clone)]
pub struct TranslatedBnb {
    log_pmf: Vec<f64>,
    hit_cap: bool,
}

impl TranslatedBnb {
    pub fn new(params: BnbParams) -> Self {
        let BnbParams { r, a, b } = params;
        let mut log_pmf = Vec::new();
        let mut cum = 0.0f64;
        let mut hit_cap = true;
        for k in 0..COUNT_SUPPORT_CAP as u64 {
            let lp = bnb_log_pmf(k, r, a, b);
            log_pmf.push(lp);
            cum += lp.exp();
            if 1.0 - cum < 1e-12 {
                hit_cap = false;
                break;
            }
        }
        Self { log_pmf, hit_cap }
    }

    /// Whether tabulation stopped at the support cap before reaching the
    /// 1e-12 tail target.
    pub fn truncated_at_cap(&self) -> bool {
        self.hit_cap
    }
}

impl CountPrior for TranslatedBnb {
    fn log_pmf(&self, count: usize) -> f64 {
        assert!(count >= 1);
        self.log_pmf
            .get(count - 1)
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn max_count(&self) -> usize {
        self.log_pmf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::GaussLegendre;

    #[test]
    fn relabels_conditions_by_first_appearance() {
        let tr = Trace::from_rows(
            [(0, 0.1, "A"), (1, 0.2, "A"), (2, 0.3, "B")],
            30.0,
        )
        .unwrap();
        assert_eq!(tr.cond(), &[0, 0, 1]);
        assert_eq!(tr.n_cond(), 2);
        assert_eq!(tr.cond_names(), &["A".to_string(), "B".to_string()]);
    }

    #[test]
    fn rejects_non_finite_fluorescence() {
        let err = Trace::from_rows([(0, 0.1, "A"), (1, f64::NAN, "A")], 30.0).unwrap_err();
        assert_eq!(err, ModelError::NonFiniteFluorescence(1));
    }

    #[test]
    fn rejects_short_and_unordered_input() {
        assert_eq!(
            Trace::from_rows([(0, 0.0, "A")], 30.0).unwrap_err(),
            ModelError::TooShort(1)
        );
        assert_eq!(
            Trace::from_rows(core::iter::empty(), 30.0).unwrap_err(),
            ModelError::TooShort(0)
        );
        assert_eq!(
            Trace::from_rows([(3, 0.0, "A"), (3, 0.0, "A")], 30.0).unwrap_err(),
            ModelError::NonMonotonicTime(1)
        );
    }

    #[test]
    fn session_scale_duration() {
        // 113,865 frames at 30 Hz is a 63.2-minute session
        let rows: Vec<(i64, f64, &str)> = (0..113_865).map(|t| (t, 0.0, "s")).collect();
        let tr = Trace::from_rows(rows, 30.0).unwrap();
        assert_eq!(tr.len(), 113_865);
        let minutes = tr.duration_secs() / 60.0;
        assert!((63.2..63.3).contains(&minutes), "{minutes}");
    }

    #[test]
    fn validation_is_idempotent() {
        let tr = Trace::from_rows(
            [(0, 0.5, "x"), (5, -0.25, "y"), (9, 1.5, "x")],
            10.0,
        )
        .unwrap();
        let again = Trace::from_parts(tr.y().to_vec(), tr.cond().to_vec(), 10.0).unwrap();
        assert_eq!(tr.y(), again.y());
        assert_eq!(tr.cond(), again.cond());
    }

    #[test]
    fn bnb_pmf_hand_value() {
        // k=0, (r,a,b)=(1,4,3): B(5,3)/B(4,3) = (48/5040)*60 = 4/7
        let lp = bnb_log_pmf(0, 1.0, 4.0, 3.0);
        assert!((lp - (4.0f64 / 7.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn bnb_pmf_normalizes() {
        let total: f64 = (0..10_000u64)
            .map(|k| bnb_log_pmf(k, 1.0, 4.0, 3.0).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-8, "{total}");
    }

    #[test]
    fn bnb_pmf_matches_beta_mixture_quadrature() {
        // independent route: integrate NegBin(k; r, pi) against Beta(a, b)
        let (r, a, b) = (1.0f64, 4.0, 3.0);
        let gl = GaussLegendre::new(512);
        for k in [1u64, 2, 5] {
            let kf = k as f64;
            let log_coef = ln_gamma(r + kf) - ln_gamma(kf + 1.0) - ln_gamma(r);
            let mut total = 0.0;
            for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
                let pi = 0.5 * (x + 1.0); // map [-1,1] -> (0,1)
                let dens = (log_coef
                    + r * pi.ln()
                    + kf * (1.0 - pi).ln()
                    + (a - 1.0) * pi.ln()
                    + (b - 1.0) * (1.0 - pi).ln()
                    - ln_beta(a, b))
                .exp();
                total += 0.5 * w * dens;
            }
            let direct = bnb_log_pmf(k, r, a, b).exp();
            assert!(
                ((total - direct) / direct).abs() < 1e-10,
                "k={k}: {total} vs {direct}"
            );
        }
    }

    #[test]
    fn translated_bnb_table() {
        let prior = TranslatedBnb::new(BnbParams {
            r: 1.0,
            a: 4.0,
            b: 3.0,
        });
        assert!(!prior.truncated_at_cap());
        assert!((prior.log_pmf(1) - (4.0f64 / 7.0).ln()).abs() < 1e-14);
        let total: f64 = (1..=prior.max_count()).map(|c| prior.log_pmf(c).exp()).sum();
        assert!((total - 1.0).abs() < 1e-11);
        assert_eq!(prior.log_pmf(prior.max_count() + 10), f64::NEG_INFINITY);
    }

    #[test]
    fn collapsed_loglik_examples() {
        // standard normal at zero
        let v = collapsed_loglik(0.0, 0.0, 0.0, 0.0, 0.3, 0.4, 0.6);
        assert!((v - (-0.5 * crate::math::LN_2PI)).abs() < 1e-14);
        // direct density evaluation: mean 1.5, var 0.3
        let v = collapsed_loglik(1.2, 1.0, 1.0, 0.0, 0.5, 0.1, 0.2);
        assert!((v - normal_logpdf(1.2, 1.5, 0.3)).abs() < 1e-14);
        // location-shift invariance
        let base = collapsed_loglik(1.2, 0.7, 0.4, 0.1, 0.5, 0.1, 0.2);
        let shifted = collapsed_loglik(1.2 + 5.0, 0.7, 0.4, 0.1 + 5.0, 0.5, 0.1, 0.2);
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn collapsed_loglik_maximized_at_truncated_residual() {
        for &(y, b, g, cp) in &[(2.0, 0.1, 0.5, 1.0), (-1.0, 0.0, 0.9, 0.2)] {
            let best = (y - b - g * cp).max(0.0);
            let at_best = collapsed_loglik(y, cp, best, b, g, 0.3, 0.2);
            for &amp in &[0.0, 0.05, 0.5, 1.0, 2.0, 5.0] {
                assert!(collapsed_loglik(y, cp, amp, b, g, 0.3, 0.2) <= at_best + 1e-12);
            }
        }
    }

    #[test]
    fn hyper_validation() {
        let hp = HyperParams::default();
        assert!(hp.validate().unwrap().is_empty());
        let mut noisy = hp.clone();
        noisy.slab_prob = BetaPrior { a: 9.0, b: 1.0 };
        assert_eq!(noisy.validate().unwrap().len(), 1);
        let mut bad = hp;
        bad.noise_prec.shape = 0.0;
        assert!(bad.validate().is_err());
    }
}
