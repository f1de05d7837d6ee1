//! Mutable MCMC state and the store of retained posterior draws.

use alloc::string::String;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::math::{sample_beta, sample_categorical, sample_categorical_log, sample_dirichlet_into, sample_gamma, sample_normal};
use crate::model::{CountPrior, HyperParams, Trace};

/// Smallest representable positive atom; slab draws are clamped here so
/// that "zero" stays an exact 0.0 test everywhere.
pub const MIN_POSITIVE_ATOM: f64 = 1e-12;

/// Complete state of one MCMC chain.
///
/// Component counts follow the telescoping convention: of the `n_dist`
/// distributional components the first `n_dist_filled` are non-empty, and
/// likewise for the `n_obs` shared atoms. `obs_weights` is an
/// `n_obs x n_dist` matrix stored column-major, one simplex column per
/// distributional component.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// Latent calcium path c_0..c_T (length T + 1).
    pub calcium: Vec<f64>,
    pub baseline: f64,
    pub sigma2: f64,
    pub tau2: f64,
    /// AR(1) decay coefficient, in (0, 1).
    pub gamma: f64,
    /// Slab probability p of the spike-and-slab base measure.
    pub slab_p: f64,
    /// K: number of distributional components.
    pub n_dist: usize,
    /// L: number of shared observational atoms.
    pub n_obs: usize,
    /// K+: non-empty distributional components (relabeled first).
    pub n_dist_filled: usize,
    /// L+: non-empty atoms (relabeled first).
    pub n_obs_filled: usize,
    /// pi, length K.
    pub dist_weights: Vec<f64>,
    /// omega, L x K column-major: `obs_weights[l + k * n_obs]`.
    pub obs_weights: Vec<f64>,
    /// Atom amplitudes A*, length L; each exactly 0.0 or >= `MIN_POSITIVE_ATOM`.
    pub atoms: Vec<f64>,
    /// S: distributional allocation per condition, 0-based, length J.
    pub dist_alloc: Vec<u32>,
    /// M: atom allocation per frame, 0-based, length T.
    pub obs_alloc: Vec<u32>,
    /// Dirichlet concentration on distributional weights.
    pub alpha: f64,
    /// Dirichlet concentration on observational weights.
    pub beta: f64,
}

/// One spike-and-slab base-measure draw.
pub fn sample_base_measure<R: Rng + ?Sized>(rng: &mut R, slab_p: f64, hyper: &HyperParams) -> f64 {
    if rng.gen::<f64>() < slab_p {
        sample_gamma(rng, hyper.slab_amp.shape, hyper.slab_amp.rate).max(MIN_POSITIVE_ATOM)
    } else {
        0.0
    }
}

impl ChainState {
    pub fn n_time(&self) -> usize {
        self.obs_alloc.len()
    }

    #[inline]
    pub fn obs_weight(&self, l: usize, k: usize) -> f64 {
        self.obs_weights[l + k * self.n_obs]
    }

    /// A_t = A*_{M_t}.
    #[inline]
    pub fn amplitude_at(&self, t: usize) -> f64 {
        self.atoms[self.obs_alloc[t] as usize]
    }

    /// Write the per-frame amplitude vector A_1..A_T into `out`.
    pub fn fill_amplitudes(&self, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.obs_alloc.iter().map(|&m| self.atoms[m as usize]));
    }

    /// Number of frames currently assigned to a zero atom.
    pub fn zero_assigned(&self) -> usize {
        self.obs_alloc
            .iter()
            .filter(|&&m| self.atoms[m as usize] == 0.0)
            .count()
    }

    /// Draw a complete state from the prior, including the latent calcium
    /// path. This is both the chain initializer and the marginal simulator
    /// of the joint-distribution checks.
    pub fn from_prior<R: Rng + ?Sized>(
        trace: &Trace,
        hyper: &HyperParams,
        dist_prior: &dyn CountPrior,
        obs_prior: &dyn CountPrior,
        rng: &mut R,
    ) -> Self {
        let t_len = trace.len();
        let n_cond = trace.n_cond();

        let baseline = sample_normal(rng, hyper.baseline_mean, hyper.baseline_var);
        let sigma2 = 1.0 / sample_gamma(rng, hyper.noise_prec.shape, hyper.noise_prec.rate);
        let tau2 = 1.0 / sample_gamma(rng, hyper.drive_prec.shape, hyper.drive_prec.rate);
        let gamma = sample_beta(rng, hyper.decay.a, hyper.decay.b);
        let slab_p = sample_beta(rng, hyper.slab_prob.a, hyper.slab_prob.b);
        let alpha = sample_gamma(rng, hyper.dist_conc.shape, hyper.dist_conc.rate);
        let beta = sample_gamma(rng, hyper.obs_conc.shape, hyper.obs_conc.rate);

        let n_dist = sample_count_prior(dist_prior, rng);
        let n_obs = sample_count_prior(obs_prior, rng);

        let mut dist_weights = alloc::vec![0.0; n_dist];
        let shapes = alloc::vec![alpha / n_dist as f64; n_dist];
        sample_dirichlet_into(rng, &shapes, &mut dist_weights);

        let mut obs_weights = alloc::vec![0.0; n_obs * n_dist];
        let col_shapes = alloc::vec![beta / n_obs as f64; n_obs];
        for k in 0..n_dist {
            sample_dirichlet_into(rng, &col_shapes, &mut obs_weights[k * n_obs..(k + 1) * n_obs]);
        }

        let atoms: Vec<f64> = (0..n_obs)
            .map(|_| sample_base_measure(rng, slab_p, hyper))
            .collect();

        let dist_alloc: Vec<u32> = (0..n_cond)
            .map(|_| sample_categorical(rng, &dist_weights).expect("weights sum to 1") as u32)
            .collect();
        let obs_alloc: Vec<u32> = (0..t_len)
            .map(|t| {
                let k = dist_alloc[trace.cond()[t] as usize] as usize;
                let col = &obs_weights[k * n_obs..(k + 1) * n_obs];
                sample_categorical(rng, col).expect("weights sum to 1") as u32
            })
            .collect();

        let mut calcium = Vec::with_capacity(t_len + 1);
        calcium.push(sample_normal(rng, 0.0, hyper.init_calcium_var));
        for t in 0..t_len {
            let amp = atoms[obs_alloc[t] as usize];
            let prev = calcium[t];
            calcium.push(sample_normal(rng, gamma * prev + amp, tau2));
        }

        let mut state = Self {
            calcium,
            baseline,
            sigma2,
            tau2,
            gamma,
            slab_p,
            n_dist,
            n_obs,
            n_dist_filled: 0,
            n_obs_filled: 0,
            dist_weights,
            obs_weights,
            atoms,
            dist_alloc,
            obs_alloc,
            alpha,
            beta,
        };
        state.relabel_dist();
        state.relabel_obs();
        state
    }

    /// Relabel distributional components so the non-empty ones come first,
    /// ordered by smallest member condition. Permutes `dist_weights` and the
    /// columns of `obs_weights`, remaps `dist_alloc`, refreshes K+.
    pub fn relabel_dist(&mut self) {
        let perm = occupancy_order(self.n_dist, self.dist_alloc.iter().map(|&k| k as usize));
        self.n_dist_filled = perm.n_filled;
        if perm.is_identity {
            return;
        }
        let old_to_new = &perm.old_to_new;
        permute_by(&mut self.dist_weights, old_to_new);
        // permute matrix columns
        let (l_dim, k_dim) = (self.n_obs, self.n_dist);
        let mut cols = alloc::vec![0.0; l_dim * k_dim];
        for k_old in 0..k_dim {
            let k_new = old_to_new[k_old];
            cols[k_new * l_dim..(k_new + 1) * l_dim]
                .copy_from_slice(&self.obs_weights[k_old * l_dim..(k_old + 1) * l_dim]);
        }
        self.obs_weights = cols;
        for s in &mut self.dist_alloc {
            *s = old_to_new[*s as usize] as u32;
        }
    }

    /// Relabel atoms so the non-empty ones come first, ordered by smallest
    /// member frame. The atoms are shared by every distributional component,
    /// so the rows of `obs_weights` are permuted jointly across all columns.
    pub fn relabel_obs(&mut self) {
        let perm = occupancy_order(self.n_obs, self.obs_alloc.iter().map(|&l| l as usize));
        self.n_obs_filled = perm.n_filled;
        if perm.is_identity {
            return;
        }
        let old_to_new = &perm.old_to_new;
        permute_by(&mut self.atoms, old_to_new);
        let l_dim = self.n_obs;
        let mut rows = alloc::vec![0.0; self.obs_weights.len()];
        for k in 0..self.n_dist {
            let col = &self.obs_weights[k * l_dim..(k + 1) * l_dim];
            let out = &mut rows[k * l_dim..(k + 1) * l_dim];
            for l_old in 0..l_dim {
                out[old_to_new[l_old]] = col[l_old];
            }
        }
        self.obs_weights = rows;
        for m in &mut self.obs_alloc {
            *m = old_to_new[*m as usize] as u32;
        }
    }

    /// Structural invariants; returns a description of the first violation.
    pub fn check_invariants(&self, trace: &Trace) -> Result<(), String> {
        use alloc::format;
        let (k_dim, l_dim) = (self.n_dist, self.n_obs);
        if self.calcium.len() != trace.len() + 1 {
            return Err(format!("calcium length {} != T+1", self.calcium.len()));
        }
        if self.dist_alloc.len() != trace.n_cond() || self.obs_alloc.len() != trace.len() {
            return Err("allocation lengths inconsistent with trace".into());
        }
        if !(self.sigma2 > 0.0) || !(self.tau2 > 0.0) {
            return Err("variances must stay positive".into());
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(format!("gamma {} outside (0,1)", self.gamma));
        }
        if self.n_dist_filled > k_dim || self.n_obs_filled > l_dim {
            return Err("filled counts exceed component counts".into());
        }
        let pi_sum: f64 = self.dist_weights.iter().sum();
        if (pi_sum - 1.0).abs() > 1e-10 {
            return Err(format!("pi sums to {pi_sum}"));
        }
        for k in 0..k_dim {
            let s: f64 = self.obs_weights[k * l_dim..(k + 1) * l_dim].iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(format!("omega column {k} sums to {s}"));
            }
        }
        for &a in &self.atoms {
            if !(a == 0.0 || a >= MIN_POSITIVE_ATOM) {
                return Err(format!("atom {a} is neither zero nor clearly positive"));
            }
        }
        // first K+ (L+) components are exactly the occupied ones
        let mut dist_used = alloc::vec![false; k_dim];
        for &s in &self.dist_alloc {
            if s as usize >= k_dim {
                return Err("dist allocation out of range".into());
            }
            dist_used[s as usize] = true;
        }
        if dist_used.iter().filter(|&&u| u).count() != self.n_dist_filled
            || dist_used[..self.n_dist_filled].iter().any(|&u| !u)
        {
            return Err("non-empty distributional components are not the leading ones".into());
        }
        let mut obs_used = alloc::vec![false; l_dim];
        for &m in &self.obs_alloc {
            if m as usize >= l_dim {
                return Err("obs allocation out of range".into());
            }
            obs_used[m as usize] = true;
        }
        if obs_used.iter().filter(|&&u| u).count() != self.n_obs_filled
            || obs_used[..self.n_obs_filled].iter().any(|&u| !u)
        {
            return Err("non-empty atoms are not the leading ones".into());
        }
        Ok(())
    }
}

fn sample_count_prior<R: Rng + ?Sized>(prior: &dyn CountPrior, rng: &mut R) -> usize {
    let log_w: Vec<f64> = (1..=prior.max_count()).map(|c| prior.log_pmf(c)).collect();
    sample_categorical_log(rng, &log_w).expect("count prior has positive mass") + 1
}

struct OccupancyPerm {
    old_to_new: Vec<usize>,
    n_filled: usize,
    is_identity: bool,
}

/// Permutation sending non-empty components (ordered by smallest member
/// index) to the front; empty components keep their relative order behind.
fn occupancy_order(n_comp: usize, alloc_iter: impl Iterator<Item = usize>) -> OccupancyPerm {
    let mut first_member = alloc::vec![usize::MAX; n_comp];
    for (i, k) in alloc_iter.enumerate() {
        if first_member[k] == usize::MAX {
            first_member[k] = i;
        }
    }
    let mut order: Vec<usize> = (0..n_comp).collect();
    // stable: occupied by first-member index, then empties in original order
    order.sort_by_key(|&k| if first_member[k] == usize::MAX { (1, k) } else { (0, first_member[k]) });
    let n_filled = first_member.iter().filter(|&&f| f != usize::MAX).count();
    let mut old_to_new = alloc::vec![0usize; n_comp];
    let mut is_identity = true;
    for (new, &old) in order.iter().enumerate() {
        old_to_new[old] = new;
        if new != old {
            is_identity = false;
        }
    }
    OccupancyPerm {
        old_to_new,
        n_filled,
        is_identity,
    }
}

fn permute_by(values: &mut [f64], old_to_new: &[usize]) {
    let mut out = alloc::vec![0.0; values.len()];
    for (old, &v) in values.iter().enumerate() {
        out[old_to_new[old]] = v;
    }
    values.copy_from_slice(&out);
}

/// Retained posterior draws, columnar for scalars with per-draw allocation
/// and atom vectors. Append-only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DrawStore {
    pub n_time: usize,
    pub n_cond: usize,
    pub baseline: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub tau2: Vec<f64>,
    pub gamma: Vec<f64>,
    pub slab_p: Vec<f64>,
    pub n_dist: Vec<u32>,
    pub n_dist_filled: Vec<u32>,
    pub n_obs: Vec<u32>,
    pub n_obs_filled: Vec<u32>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub dist_alloc: Vec<Vec<u32>>,
    pub obs_alloc: Vec<Vec<u32>>,
    pub atoms: Vec<Vec<f64>>,
}

impl DrawStore {
    pub fn new(n_time: usize, n_cond: usize) -> Self {
        Self {
            n_time,
            n_cond,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.baseline.len()
    }

    pub fn is_empty(&self) -> bool {
        self.baseline.is_empty()
    }

    pub fn push(&mut self, state: &ChainState) {
        assert_eq!(state.obs_alloc.len(), self.n_time, "draw dimension mismatch");
        assert_eq!(state.dist_alloc.len(), self.n_cond, "draw dimension mismatch");
        self.baseline.push(state.baseline);
        self.sigma2.push(state.sigma2);
        self.tau2.push(state.tau2);
        self.gamma.push(state.gamma);
        self.slab_p.push(state.slab_p);
        self.n_dist.push(state.n_dist as u32);
        self.n_dist_filled.push(state.n_dist_filled as u32);
        self.n_obs.push(state.n_obs as u32);
        self.n_obs_filled.push(state.n_obs_filled as u32);
        self.alpha.push(state.alpha);
        self.beta.push(state.beta);
        self.dist_alloc.push(state.dist_alloc.clone());
        self.obs_alloc.push(state.obs_alloc.clone());
        self.atoms.push(state.atoms.clone());
    }

    /// A_t of draw `d` at frame `t`.
    #[inline]
    pub fn amplitude(&self, d: usize, t: usize) -> f64 {
        self.atoms[d][self.obs_alloc[d][t] as usize]
    }

    /// Whether draw `d` carries a positive amplitude at frame `t`.
    #[inline]
    pub fn is_spike(&self, d: usize, t: usize) -> bool {
        self.amplitude(d, t) > 0.0
    }
}
