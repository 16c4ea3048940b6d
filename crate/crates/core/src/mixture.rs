//! Coordinate-ascent pipeline for the Dirichlet mixture model: local step
//! (weights → responsibilities), summary step (sufficient statistics), global
//! step, and the objective value.
//!
//! The summary folds each observation's assignment entropy into the
//! statistics, so responsibilities never need to be stored once a batch has
//! been summarized; that is what makes minibatch training memory-flat.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expfam::ObsFamily;
use crate::resp::{dense_resp_from_weights_into, entropy, top_l_resp_from_weights, Resp};
use crate::special::{c_dir, c_dir_symmetric, digamma};

/// Responsibility sparsity for a local step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sparsity {
    Dense,
    TopL(usize),
}

impl Sparsity {
    pub fn label(&self) -> String {
        match self {
            Sparsity::Dense => "dense".to_string(),
            Sparsity::TopL(l) => l.to_string(),
        }
    }
}

/// How partial statistics from worker chunks are combined.
/// `Ordered` merges chunk results in index order: bit-reproducible across
/// runs and thread counts. `Fast` lets the scheduler reassociate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Ordered,
    Fast,
}

/// Per-cluster approximate posteriors plus cached `E[log pi_k]`.
#[derive(Debug, Clone)]
pub struct MixGlobalState<P> {
    pub theta_hat: Vec<f64>,
    pub e_log_pi: Vec<f64>,
    pub posteriors: Vec<P>,
}

impl<P> MixGlobalState<P> {
    pub fn new(theta_hat: Vec<f64>, posteriors: Vec<P>) -> Result<Self> {
        debug_assert_eq!(theta_hat.len(), posteriors.len());
        let total: f64 = theta_hat.iter().sum();
        let psi_total = digamma(total)?;
        let e_log_pi = theta_hat
            .iter()
            .map(|&t| digamma(t).map(|p| p - psi_total))
            .collect::<Result<Vec<f64>>>()?;
        Ok(MixGlobalState {
            theta_hat,
            e_log_pi,
            posteriors,
        })
    }

    pub fn k(&self) -> usize {
        self.theta_hat.len()
    }

    /// Posterior mean frequencies `θ̂_k / Σ θ̂`.
    pub fn pi_hat(&self) -> Vec<f64> {
        let total: f64 = self.theta_hat.iter().sum();
        self.theta_hat.iter().map(|&t| t / total).collect()
    }
}

/// Expected counts, expected data statistics, and the folded assignment
/// entropy for a set of observations. A commutative monoid under `merge`.
#[derive(Debug, Clone)]
pub struct MixSuffStats<S> {
    pub n: Vec<f64>,
    pub s: Vec<S>,
    pub count_obs: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct MixtureModel<F: ObsFamily> {
    pub k: usize,
    pub alpha: f64,
    pub family: F,
}

const CHUNK: usize = 256;

impl<F: ObsFamily> MixtureModel<F> {
    pub fn new(k: usize, alpha: f64, family: F) -> Self {
        MixtureModel { k, alpha, family }
    }

    pub fn zero_stats(&self) -> MixSuffStats<F::Stat> {
        MixSuffStats {
            n: vec![0.0; self.k],
            s: (0..self.k).map(|_| self.family.zero_stat()).collect(),
            count_obs: 0.0,
            entropy: 0.0,
        }
    }

    pub fn merge_stats(&self, into: &mut MixSuffStats<F::Stat>, other: &MixSuffStats<F::Stat>) {
        for (a, b) in into.n.iter_mut().zip(other.n.iter()) {
            *a += b;
        }
        for (a, b) in into.s.iter_mut().zip(other.s.iter()) {
            self.family.merge_stat(a, b);
        }
        into.count_obs += other.count_obs;
        into.entropy += other.entropy;
    }

    pub fn scale_stats(&self, stats: &mut MixSuffStats<F::Stat>, c: f64) {
        stats.n.iter_mut().for_each(|v| *v *= c);
        stats
            .s
            .iter_mut()
            .for_each(|s| self.family.scale_stat(s, c));
        stats.count_obs *= c;
        stats.entropy *= c;
    }

    /// Log posterior weights `w_k = E[log π_k] + E[log F(x_n | φ_k)]` for one
    /// observation, written into a caller buffer of length K.
    pub fn compute_weights(
        &self,
        data: &F::Dataset,
        idx: usize,
        g: &MixGlobalState<F::Posterior>,
        out: &mut [f64],
    ) {
        debug_assert_eq!(out.len(), self.k);
        for (k, o) in out.iter_mut().enumerate() {
            *o = g.e_log_pi[k] + self.family.expected_log_lik(&g.posteriors[k], data, idx);
        }
    }

    /// Per-observation responsibilities for a batch; observations are
    /// independent, so this is a parallel map.
    pub fn local_step(
        &self,
        data: &F::Dataset,
        indices: &[usize],
        g: &MixGlobalState<F::Posterior>,
        sparsity: Sparsity,
    ) -> Result<Vec<Resp>> {
        if let Sparsity::TopL(l) = sparsity {
            if l == 0 || l > self.k {
                return Err(Error::arg(format!(
                    "sparsity level L = {l} out of range 1..={}",
                    self.k
                )));
            }
        }
        indices
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut w = vec![0.0; self.k];
                let mut out = Vec::with_capacity(chunk.len());
                for &idx in chunk {
                    self.compute_weights(data, idx, g, &mut w);
                    let resp = match sparsity {
                        Sparsity::Dense => {
                            let mut r = vec![0.0; self.k];
                            dense_resp_from_weights_into(&w, &mut r)?;
                            Resp::Dense(crate::resp::DenseResp { r })
                        }
                        Sparsity::TopL(l) => Resp::Sparse(top_l_resp_from_weights(&w, l)?),
                    };
                    out.push(resp);
                }
                Ok(out)
            })
            .collect::<Result<Vec<Vec<Resp>>>>()
            .map(|vs| vs.into_iter().flatten().collect())
    }

    /// Aggregates responsibilities into sufficient statistics. Sparse
    /// responsibilities touch only their support, so the cost is O(N·L·|s|)
    /// rather than O(N·K·|s|).
    pub fn summary_step(
        &self,
        data: &F::Dataset,
        indices: &[usize],
        resps: &[Resp],
    ) -> Result<MixSuffStats<F::Stat>> {
        if indices.len() != resps.len() {
            return Err(Error::arg(format!(
                "{} indices but {} responsibilities",
                indices.len(),
                resps.len()
            )));
        }
        let mut stats = self.zero_stats();
        for (&idx, resp) in indices.iter().zip(resps.iter()) {
            stats.entropy += resp.entropy();
            stats.count_obs += 1.0;
            resp.for_support(|k, r| {
                if r != 0.0 {
                    stats.n[k] += r;
                    self.family.accum_stat(&mut stats.s[k], data, idx, r);
                }
            });
        }
        Ok(stats)
    }

    /// Fused local + summary pass over a batch. Responsibilities are
    /// discarded as soon as each observation is absorbed into the chunk's
    /// partial statistics.
    pub fn local_summary(
        &self,
        data: &F::Dataset,
        indices: &[usize],
        g: &MixGlobalState<F::Posterior>,
        sparsity: Sparsity,
        reduction: Reduction,
    ) -> Result<MixSuffStats<F::Stat>> {
        if let Sparsity::TopL(l) = sparsity {
            if l == 0 || l > self.k {
                return Err(Error::arg(format!(
                    "sparsity level L = {l} out of range 1..={}",
                    self.k
                )));
            }
        }
        let process = |chunk: &[usize]| -> Result<MixSuffStats<F::Stat>> {
            let mut stats = self.zero_stats();
            let mut w = vec![0.0; self.k];
            let mut r = vec![0.0; self.k];
            for &idx in chunk {
                self.compute_weights(data, idx, g, &mut w);
                stats.count_obs += 1.0;
                match sparsity {
                    Sparsity::Dense => {
                        dense_resp_from_weights_into(&w, &mut r)?;
                        stats.entropy += entropy(r.iter().copied());
                        for (k, &rk) in r.iter().enumerate() {
                            if rk != 0.0 {
                                stats.n[k] += rk;
                                self.family.accum_stat(&mut stats.s[k], data, idx, rk);
                            }
                        }
                    }
                    Sparsity::TopL(l) => {
                        let sr = top_l_resp_from_weights(&w, l)?;
                        stats.entropy += sr.entropy();
                        for (&i, &v) in sr.indices.iter().zip(sr.values.iter()) {
                            stats.n[i] += v;
                            self.family.accum_stat(&mut stats.s[i], data, idx, v);
                        }
                    }
                }
            }
            Ok(stats)
        };
        match reduction {
            Reduction::Ordered => {
                let parts: Vec<MixSuffStats<F::Stat>> = indices
                    .par_chunks(CHUNK)
                    .map(process)
                    .collect::<Result<Vec<_>>>()?;
                let mut acc = self.zero_stats();
                for p in &parts {
                    self.merge_stats(&mut acc, p);
                }
                Ok(acc)
            }
            Reduction::Fast => indices.par_chunks(CHUNK).map(process).try_reduce(
                || self.zero_stats(),
                |mut a, b| {
                    self.merge_stats(&mut a, &b);
                    Ok(a)
                },
            ),
        }
    }

    /// Closed-form optimum of the global parameters:
    /// `θ̂_k = α/K + N_k` and the conjugate family update per cluster.
    /// Clusters with no mass keep prior-valued posteriors.
    pub fn global_step(
        &self,
        stats: &MixSuffStats<F::Stat>,
    ) -> Result<MixGlobalState<F::Posterior>> {
        let prior_theta = self.alpha / self.k as f64;
        let theta: Vec<f64> = stats.n.iter().map(|&n| prior_theta + n).collect();
        let posteriors = stats
            .n
            .iter()
            .zip(stats.s.iter())
            .map(|(&n_k, s_k)| self.family.global_update(n_k, s_k))
            .collect::<Result<Vec<_>>>()?;
        MixGlobalState::new(theta, posteriors)
    }

    /// Stochastic natural-gradient step: every natural parameter moves to
    /// `(1 − ρ)·current + ρ·target`, where the target is the global optimum
    /// for the rescaled batch statistics.
    pub fn svi_blend(
        &self,
        g: &MixGlobalState<F::Posterior>,
        rescaled: &MixSuffStats<F::Stat>,
        rho: f64,
    ) -> Result<MixGlobalState<F::Posterior>> {
        let prior_theta = self.alpha / self.k as f64;
        let theta: Vec<f64> = g
            .theta_hat
            .iter()
            .zip(rescaled.n.iter())
            .map(|(&cur, &n)| (1.0 - rho) * cur + rho * (prior_theta + n))
            .collect();
        let posteriors = g
            .posteriors
            .iter()
            .zip(rescaled.n.iter().zip(rescaled.s.iter()))
            .map(|(post, (&n_k, s_k))| self.family.blend_natural(post, n_k, s_k, rho))
            .collect::<Result<Vec<_>>>()?;
        MixGlobalState::new(theta, posteriors)
    }

    /// Allocation term:
    /// `c_Dir(α/K·1) − c_Dir(θ̂) + Σ_k (N_k + α/K − θ̂_k)(ψ(θ̂_k) − ψ(Σθ̂))`.
    /// The residual sum vanishes right after a global step.
    pub fn l_alloc(&self, n: &[f64], g: &MixGlobalState<F::Posterior>) -> f64 {
        let prior_theta = self.alpha / self.k as f64;
        let mut value = c_dir_symmetric(prior_theta, self.k).expect("alpha > 0")
            - c_dir(&g.theta_hat).expect("theta positive");
        for k in 0..self.k {
            value += (n[k] + prior_theta - g.theta_hat[k]) * g.e_log_pi[k];
        }
        value
    }

    /// Objective value from statistics and a global state:
    /// data term + folded assignment entropy + allocation term.
    pub fn elbo(&self, stats: &MixSuffStats<F::Stat>, g: &MixGlobalState<F::Posterior>) -> f64 {
        self.family
            .l_data(&stats.n, &stats.s, &g.posteriors, stats.count_obs)
            + stats.entropy
            + self.l_alloc(&stats.n, g)
    }
}
