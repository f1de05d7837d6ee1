//! Independent oracles used by the test suites.
//!
//! Everything in this crate recomputes quantities by a route deliberately
//! different from the library implementation: dense joint-Gaussian
//! conditioning instead of Kalman recursions, exhaustive enumeration of
//! labeled allocation vectors instead of telescoping conditionals, and
//! plain Monte Carlo instead of quadrature.

use fcam_core::math::{log_sum_exp, ln_gamma, normal_logpdf, LN_2PI};
use fcam_core::model::CountPrior;
use fcam_core::model::Trace;
use fcam_core::state::ChainState;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

/// Dense-covariance construction of the joint law of (c_0..c_T, y_1..y_T)
/// for the AR(1) observation model with known amplitudes.
pub struct LinearGaussianOracle {
    pub gamma: f64,
    pub sigma2: f64,
    pub tau2: f64,
    pub baseline: f64,
    pub c0_var: f64,
    pub amps: Vec<f64>,
    pub y: Vec<f64>,
}

impl LinearGaussianOracle {
    fn calcium_moments(&self) -> (Vec<f64>, DMatrix<f64>) {
        let t_len = self.amps.len();
        let n = t_len + 1;
        let mut mean = vec![0.0; n];
        let mut var = vec![0.0; n];
        var[0] = self.c0_var;
        for t in 1..n {
            mean[t] = self.gamma * mean[t - 1] + self.amps[t - 1];
            var[t] = self.gamma * self.gamma * var[t - 1] + self.tau2;
        }
        let mut cov = DMatrix::zeros(n, n);
        for u in 0..n {
            for t in u..n {
                let c = self.gamma.powi((t - u) as i32) * var[u];
                cov[(t, u)] = c;
                cov[(u, t)] = c;
            }
        }
        (mean, cov)
    }

    /// Conditional mean and covariance of (c_0..c_T) given y_1..y_upto
    /// (1-based `upto`; pass T for the full smoother).
    pub fn conditional_calcium(&self, upto: usize) -> (DVector<f64>, DMatrix<f64>) {
        let t_len = self.amps.len();
        assert!(upto >= 1 && upto <= t_len);
        let n = t_len + 1;
        let (c_mean, c_cov) = self.calcium_moments();

        // y_t = b + c_t + eps; covariance blocks follow from the c blocks
        let mut cov_cy = DMatrix::zeros(n, upto);
        let mut cov_yy = DMatrix::zeros(upto, upto);
        let mut y_mean = DVector::zeros(upto);
        for t in 0..upto {
            y_mean[t] = self.baseline + c_mean[t + 1];
            for s in 0..n {
                cov_cy[(s, t)] = c_cov[(s, t + 1)];
            }
            for u in 0..upto {
                cov_yy[(t, u)] = c_cov[(t + 1, u + 1)];
            }
            cov_yy[(t, t)] += self.sigma2;
        }
        let chol = cov_yy.cholesky().expect("observation covariance is SPD");
        let resid = DVector::from_iterator(upto, self.y[..upto].iter().copied()) - y_mean;
        let solve_r = chol.solve(&resid);
        let mean = DVector::from_iterator(n, c_mean.iter().copied()) + &cov_cy * solve_r;
        let solve_c = chol.solve(&cov_cy.transpose());
        let cov = c_cov - &cov_cy * solve_c;
        (mean, cov)
    }

    /// Exact filtered moments (mean, var) of c_t | y_1..t for t = 1..T.
    pub fn filtered_moments(&self) -> Vec<(f64, f64)> {
        (1..=self.amps.len())
            .map(|t| {
                let (m, c) = self.conditional_calcium(t);
                (m[t], c[(t, t)])
            })
            .collect()
    }
}

/// Column-major cell index into an L x K matrix.
fn cell(l: usize, k: usize, l_dim: usize) -> usize {
    l + k * l_dim
}

/// Brute-force p(S_j = k | everything else) with the group's atom
/// allocations summed out by explicit enumeration over L^{n_j} vectors.
pub fn enum_dist_alloc_pmf(state: &ChainState, trace: &Trace, j: usize) -> Vec<f64> {
    let frames: Vec<usize> = (0..trace.len())
        .filter(|&t| trace.cond()[t] as usize == j)
        .collect();
    let l_dim = state.n_obs;
    let k_dim = state.n_dist;
    let s2 = state.sigma2 + state.tau2;
    let mut log_w = vec![f64::NEG_INFINITY; k_dim];
    for (k, lw) in log_w.iter_mut().enumerate() {
        // sum over all assignments m: frames -> atoms
        let combos = (l_dim as u64).pow(frames.len() as u32);
        let mut terms = Vec::with_capacity(combos as usize);
        for code in 0..combos {
            let mut c = code;
            let mut lp = 0.0;
            for &t in &frames {
                let l = (c % l_dim as u64) as usize;
                c /= l_dim as u64;
                let mean = state.baseline + state.gamma * state.calcium[t] + state.atoms[l];
                lp += state.obs_weights[cell(l, k, l_dim)].ln()
                    + normal_logpdf(trace.y()[t], mean, s2);
            }
            terms.push(lp);
        }
        *lw = state.dist_weights[k].ln() + log_sum_exp(&terms);
    }
    normalize_log(&log_w)
}

/// Brute-force p(M_t = l | everything else): normalized products.
pub fn enum_obs_alloc_pmf(state: &ChainState, trace: &Trace, t: usize) -> Vec<f64> {
    let k = state.dist_alloc[trace.cond()[t] as usize] as usize;
    let s2 = state.sigma2 + state.tau2;
    let log_w: Vec<f64> = (0..state.n_obs)
        .map(|l| {
            let mean = state.baseline + state.gamma * state.calcium[t] + state.atoms[l];
            state.obs_weights[cell(l, k, state.n_obs)].ln()
                + normal_logpdf(trace.y()[t], mean, s2)
        })
        .collect();
    normalize_log(&log_w)
}

/// p(K = count | C^D, alpha) by enumerating every labeled allocation vector
/// S in {1..K}^J whose induced set partition matches `partition`, each
/// weighted by its symmetric Dirichlet-multinomial marginal.
pub fn enum_dist_count_pmf(partition: &[usize], alpha: f64, prior: &dyn CountPrior) -> Vec<f64> {
    let j_len = partition.len();
    let max = prior.max_count();
    let mut log_w = vec![f64::NEG_INFINITY; max];
    for count in 1..=max {
        let mut terms = Vec::new();
        let combos = (count as u64).pow(j_len as u32);
        'outer: for code in 0..combos {
            let mut s = vec![0usize; j_len];
            let mut c = code;
            for slot in s.iter_mut() {
                *slot = (c % count as u64) as usize;
                c /= count as u64;
            }
            // partition match
            for a in 0..j_len {
                for b in (a + 1)..j_len {
                    if (s[a] == s[b]) != (partition[a] == partition[b]) {
                        continue 'outer;
                    }
                }
            }
            let conc = alpha / count as f64;
            let mut occ = vec![0usize; count];
            for &si in &s {
                occ[si] += 1;
            }
            let lp: f64 = occ
                .iter()
                .filter(|&&n| n > 0)
                .map(|&n| ln_gamma(n as f64 + conc) - ln_gamma(conc))
                .sum();
            terms.push(lp);
        }
        if !terms.is_empty() {
            log_w[count - 1] = prior.log_pmf(count) + log_sum_exp(&terms);
        }
    }
    normalize_log(&log_w)
}

/// p(L = count | C^O, S, beta) by enumerating labeled atom assignments
/// M in {1..L}^T consistent with the observational partition; each M is
/// weighted by the product over distributional clusters of the symmetric
/// Dirichlet-multinomial marginal of its within-cluster cell counts.
pub fn enum_obs_count_pmf(
    obs_partition: &[usize],
    cond_of_frame: &[usize],
    dist_alloc: &[usize],
    beta: f64,
    prior: &dyn CountPrior,
) -> Vec<f64> {
    let t_len = obs_partition.len();
    let k_dim = dist_alloc.iter().copied().max().unwrap_or(0) + 1;
    let max = prior.max_count();
    let mut log_w = vec![f64::NEG_INFINITY; max];
    for count in 1..=max {
        let mut terms = Vec::new();
        let combos = (count as u64).pow(t_len as u32);
        'outer: for code in 0..combos {
            let mut m = vec![0usize; t_len];
            let mut c = code;
            for slot in m.iter_mut() {
                *slot = (c % count as u64) as usize;
                c /= count as u64;
            }
            for a in 0..t_len {
                for b in (a + 1)..t_len {
                    if (m[a] == m[b]) != (obs_partition[a] == obs_partition[b]) {
                        continue 'outer;
                    }
                }
            }
            let conc = beta / count as f64;
            let mut cells = vec![0usize; count * k_dim];
            for t in 0..t_len {
                let k = dist_alloc[cond_of_frame[t]];
                cells[m[t] + k * count] += 1;
            }
            let lp: f64 = cells
                .iter()
                .filter(|&&n| n > 0)
                .map(|&n| ln_gamma(n as f64 + conc) - ln_gamma(conc))
                .sum();
            terms.push(lp);
        }
        if !terms.is_empty() {
            log_w[count - 1] = prior.log_pmf(count) + log_sum_exp(&terms);
        }
    }
    normalize_log(&log_w)
}

/// Monte Carlo estimate of log ∫ Ga(A; shape, rate) Π_i N(resid_i; A, s2) dA
/// by averaging the Gaussian product over prior draws of A.
pub fn mc_slab_log_marginal(
    resid: &[f64],
    s2: f64,
    shape: f64,
    rate: f64,
    n_draws: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(shape, 1.0 / rate).unwrap();
    let n = resid.len() as f64;
    let sum_r: f64 = resid.iter().sum();
    let sum_r2: f64 = resid.iter().map(|r| r * r).sum();
    let base = -0.5 * n * (LN_2PI + s2.ln());
    // streaming log-mean-exp with a running maximum
    let mut max_lw = f64::NEG_INFINITY;
    let mut acc = 0.0f64;
    for _ in 0..n_draws {
        let a: f64 = gamma.sample(&mut rng);
        let lw = base - (sum_r2 - 2.0 * a * sum_r + n * a * a) / (2.0 * s2);
        if lw > max_lw {
            acc = acc * (max_lw - lw).exp() + 1.0;
            max_lw = lw;
        } else {
            acc += (lw - max_lw).exp();
        }
    }
    max_lw + (acc / n_draws as f64).ln()
}

/// Adjusted Rand index by direct pair counting (Hubert-Arabie identity),
/// an independent route from the contingency-table formula.
pub fn ari_pair_counting(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let (mut n11, mut n00, mut n10, mut n01) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in (i + 1)..n {
            let same_a = a[i] == a[j];
            let same_b = b[i] == b[j];
            match (same_a, same_b) {
                (true, true) => n11 += 1.0,
                (false, false) => n00 += 1.0,
                (true, false) => n10 += 1.0,
                (false, true) => n01 += 1.0,
            }
        }
    }
    let denom = (n11 + n10) * (n10 + n00) + (n11 + n01) * (n01 + n00);
    if denom == 0.0 {
        // both partitions trivial in the same way
        return if n10 == 0.0 && n01 == 0.0 { 1.0 } else { 0.0 };
    }
    2.0 * (n11 * n00 - n10 * n01) / denom
}

/// All set partitions of n items as canonical label vectors (first
/// appearance order, labels from 0).
pub fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut labels = vec![0usize; n];
    fn rec(i: usize, n: usize, used: usize, labels: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(labels.clone());
            return;
        }
        for lab in 0..=used {
            labels[i] = lab;
            rec(i + 1, n, used.max(lab + 1), labels, out);
        }
    }
    rec(0, n, 0, &mut labels, &mut out);
    out
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

fn normalize_log(log_w: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_w);
    log_w.iter().map(|&w| (w - lse).exp()).collect()
}
