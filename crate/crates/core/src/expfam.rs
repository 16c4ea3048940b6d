//! Conjugate exponential-family observation models: zero-mean Gaussian with a
//! Wishart prior over the precision, and categorical with a symmetric
//! Dirichlet prior. Both sit behind the [`ObsFamily`] trait so the mixture
//! pipeline and trainers are family-agnostic.
//!
//! Posterior types are immutable after construction; updates build new
//! values with all expectation caches refreshed.

use crate::data::{DenseDataset, TokenDataset};
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, SquareMat};
use crate::special::{c_dir, c_dir_symmetric, c_wish_from_log_det_inv, digamma};

const LN_2PI: f64 = 1.8378770664093453;
const LN_2: f64 = std::f64::consts::LN_2;

/// Wishart prior (ν̄, Λ̄), held in natural form: the inverse scale Λ̄⁻¹
/// is what the conjugate update adds statistics to.
#[derive(Debug, Clone)]
pub struct WishartPrior {
    pub nu_bar: f64,
    pub lambda_bar_inv: SquareMat,
    c_wish_bar: f64,
}

impl WishartPrior {
    pub fn from_inverse_scale(nu_bar: f64, lambda_bar_inv: SquareMat) -> Result<Self> {
        let d = lambda_bar_inv.dim();
        if !(nu_bar > d as f64 - 1.0) {
            return Err(Error::domain(
                "wishart_prior",
                format!("nu_bar = {nu_bar} must be > D - 1 = {}", d as f64 - 1.0),
            ));
        }
        let mut ch = Cholesky::new(d);
        ch.factor(&lambda_bar_inv)?;
        let log_det_lambda_bar_inv = ch.log_det();
        let c_wish_bar = c_wish_from_log_det_inv(nu_bar, log_det_lambda_bar_inv, d)?;
        Ok(WishartPrior {
            nu_bar,
            lambda_bar_inv,
            c_wish_bar,
        })
    }

    pub fn from_scale(nu_bar: f64, lambda_bar: &SquareMat) -> Result<Self> {
        let d = lambda_bar.dim();
        let mut ch = Cholesky::new(d);
        ch.factor(lambda_bar)?;
        let mut inv = SquareMat::zeros(d);
        ch.inverse_into(&mut inv);
        Self::from_inverse_scale(nu_bar, inv)
    }

    /// Default prior for data of known scale: ν̄ = D + 2 and
    /// Λ̄⁻¹ = ν̄ · (empirical second moment), so that the prior mean of the
    /// precision matches the inverse data covariance.
    pub fn default_for_data(data: &DenseDataset) -> Result<Self> {
        let d = data.dim;
        let nu_bar = d as f64 + 2.0;
        let mut second = data.second_moment(2000);
        // Guard against degenerate directions in small subsamples.
        for i in 0..d {
            second[i * d + i] += 1e-8;
        }
        let mut inv = SquareMat::from_rows(d, second);
        inv.scale(nu_bar);
        Self::from_inverse_scale(nu_bar, inv)
    }

    pub fn dim(&self) -> usize {
        self.lambda_bar_inv.dim()
    }

    pub fn c_wish_bar(&self) -> f64 {
        self.c_wish_bar
    }
}

/// Wishart posterior q(Φ | ν̂, Λ̂) with cached expectations:
/// `e_phi = E[Φ] = ν̂ Λ̂` and
/// `e_log_det_phi = E[ln|Φ|] = Σ_d ψ((ν̂+1−d)/2) + D ln 2 + ln|Λ̂|`.
#[derive(Debug, Clone)]
pub struct WishartPosterior {
    pub nu_hat: f64,
    pub lambda_hat: SquareMat,
    pub lambda_hat_inv: SquareMat,
    pub e_log_det_phi: f64,
    pub e_phi: SquareMat,
    log_det_lambda_hat_inv: f64,
}

impl WishartPosterior {
    /// Builds from natural parameters (ν̂, Λ̂⁻¹), refreshing every cache.
    pub fn from_inverse_scale(nu_hat: f64, lambda_hat_inv: SquareMat) -> Result<Self> {
        let d = lambda_hat_inv.dim();
        if !(nu_hat > d as f64 - 1.0) {
            return Err(Error::domain(
                "wishart_posterior",
                format!("nu_hat = {nu_hat} must be > D - 1 = {}", d as f64 - 1.0),
            ));
        }
        let mut ch = Cholesky::new(d);
        ch.factor(&lambda_hat_inv)?;
        let log_det_lambda_hat_inv = ch.log_det();
        let mut lambda_hat = SquareMat::zeros(d);
        ch.inverse_into(&mut lambda_hat);
        let mut e_log_det_phi = d as f64 * LN_2 - log_det_lambda_hat_inv;
        for i in 1..=d {
            e_log_det_phi += digamma((nu_hat + 1.0 - i as f64) / 2.0)?;
        }
        let mut e_phi = lambda_hat.clone();
        e_phi.scale(nu_hat);
        Ok(WishartPosterior {
            nu_hat,
            lambda_hat,
            lambda_hat_inv,
            e_log_det_phi,
            e_phi,
            log_det_lambda_hat_inv,
        })
    }

    pub fn dim(&self) -> usize {
        self.lambda_hat_inv.dim()
    }

    /// `E_q[log N(x | 0, Φ⁻¹)] = −(D/2) ln 2π + ½ E[ln|Φ|] − ½ xᵀ E[Φ] x`.
    pub fn expected_log_lik(&self, x: &[f64]) -> f64 {
        -(self.dim() as f64 / 2.0) * LN_2PI + 0.5 * self.e_log_det_phi
            - 0.5 * self.e_phi.quadratic_form(x)
    }

    /// Wishart log-cumulant at the posterior parameters.
    pub fn c_wish_hat(&self) -> f64 {
        // nu_hat > D - 1 was checked at construction.
        c_wish_from_log_det_inv(self.nu_hat, self.log_det_lambda_hat_inv, self.dim()).unwrap()
    }

    pub fn log_det_lambda_hat_inv(&self) -> f64 {
        self.log_det_lambda_hat_inv
    }
}

/// Conjugate update: ν̂ = ν̄ + N_k, Λ̂⁻¹ = Λ̄⁻¹ + S_k.
pub fn gaussian_global_update(
    n_k: f64,
    s_k: &SquareMat,
    prior: &WishartPrior,
) -> Result<WishartPosterior> {
    debug_assert!(s_k.asymmetry() < 1e-8, "statistic matrix must be symmetric");
    let mut inv = prior.lambda_bar_inv.clone();
    inv.add_scaled(s_k, 1.0);
    WishartPosterior::from_inverse_scale(prior.nu_bar + n_k, inv)
}

/// Dirichlet posterior with the cached expectation table
/// `e_log[v] = E[ln φ_v] = ψ(λ̂_v) − ψ(Σ_u λ̂_u)`.
#[derive(Debug, Clone)]
pub struct DirichletPosterior {
    pub lambda_hat: Vec<f64>,
    pub e_log: Vec<f64>,
}

impl DirichletPosterior {
    pub fn new(lambda_hat: Vec<f64>) -> Result<Self> {
        if lambda_hat.is_empty() {
            return Err(Error::domain("dirichlet_posterior", "empty parameter"));
        }
        let mut total = 0.0;
        for (i, &v) in lambda_hat.iter().enumerate() {
            if !(v > 0.0) {
                return Err(Error::domain(
                    "dirichlet_posterior",
                    format!("entry {i} = {v} must be > 0"),
                ));
            }
            total += v;
        }
        let psi_total = digamma(total)?;
        let e_log = lambda_hat
            .iter()
            .map(|&v| digamma(v).map(|p| p - psi_total))
            .collect::<Result<Vec<f64>>>()?;
        Ok(DirichletPosterior { lambda_hat, e_log })
    }

    pub fn len(&self) -> usize {
        self.lambda_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda_hat.is_empty()
    }

    /// `E_q[ln φ_v]`, served from the cache; errors if `v` is out of range.
    pub fn expected_log_lik(&self, v: usize) -> Result<f64> {
        self.e_log
            .get(v)
            .copied()
            .ok_or_else(|| Error::arg(format!("word id {v} out of range 0..{}", self.len())))
    }

    /// Posterior mean `λ̂_v / Σ λ̂`.
    pub fn mean(&self) -> Vec<f64> {
        let total: f64 = self.lambda_hat.iter().sum();
        self.lambda_hat.iter().map(|&v| v / total).collect()
    }
}

/// Conjugate update: λ̂_v = λ̄ + S_v.
pub fn categorical_global_update(s: &[f64], lambda_bar: f64) -> Result<DirichletPosterior> {
    if !(lambda_bar > 0.0) {
        return Err(Error::domain(
            "categorical_global_update",
            format!("lambda_bar = {lambda_bar} must be > 0"),
        ));
    }
    DirichletPosterior::new(s.iter().map(|&v| lambda_bar + v).collect())
}

/// Gaussian-Wishart data term of the objective:
///
/// ```text
/// −(N·D/2) ln 2π + Σ_k [ c_Wish(ν̄,Λ̄) − c_Wish(ν̂_k,Λ̂_k)
///   + ½(N_k + ν̄ − ν̂_k) E[ln|Φ_k|]
///   − ½ tr((S_k + Λ̄⁻¹ − Λ̂_k⁻¹) E[Φ_k]) ]
/// ```
///
/// Both residual lines vanish identically right after a conjugate update.
pub fn l_data_gaussian(
    n: &[f64],
    stats: &[SquareMat],
    posts: &[WishartPosterior],
    prior: &WishartPrior,
    count_obs: f64,
) -> f64 {
    debug_assert_eq!(n.len(), stats.len());
    debug_assert_eq!(n.len(), posts.len());
    let d = prior.dim() as f64;
    let mut total = -(count_obs * d / 2.0) * LN_2PI;
    for ((&n_k, s_k), post) in n.iter().zip(stats.iter()).zip(posts.iter()) {
        total += prior.c_wish_bar() - post.c_wish_hat();
        total += 0.5 * (n_k + prior.nu_bar - post.nu_hat) * post.e_log_det_phi;
        let mut resid = s_k.clone();
        resid.add_scaled(&prior.lambda_bar_inv, 1.0);
        resid.add_scaled(&post.lambda_hat_inv, -1.0);
        total -= 0.5 * post.e_phi.frobenius_inner(&resid);
    }
    total
}

/// Categorical-Dirichlet data term:
/// `Σ_k [ c_Dir(λ̄·1) − c_Dir(λ̂_k) + Σ_v (S_kv + λ̄ − λ̂_kv) E[ln φ_kv] ]`.
pub fn l_data_categorical(
    stats: &[Vec<f64>],
    posts: &[DirichletPosterior],
    lambda_bar: f64,
    vocab: usize,
) -> f64 {
    debug_assert_eq!(stats.len(), posts.len());
    if stats.is_empty() {
        return 0.0;
    }
    let c_bar = c_dir_symmetric(lambda_bar, vocab).expect("lambda_bar validated by caller");
    let mut total = 0.0;
    for (s_k, post) in stats.iter().zip(posts.iter()) {
        total += c_bar - c_dir(&post.lambda_hat).expect("posterior entries positive");
        for ((&s, &lam), &elog) in s_k
            .iter()
            .zip(post.lambda_hat.iter())
            .zip(post.e_log.iter())
        {
            total += (s + lambda_bar - lam) * elog;
        }
    }
    total
}

/// Observation family abstraction used by the mixture pipeline. Statistics
/// form a commutative monoid under `merge_stat` with `zero_stat` as identity,
/// which is what both the memoized increments and parallel reduction rely on.
pub trait ObsFamily: Sync {
    type Posterior: Clone + Send + Sync;
    type Stat: Clone + Send + Sync;
    type Dataset: Sync;

    fn n_obs(data: &Self::Dataset) -> usize;
    fn zero_stat(&self) -> Self::Stat;
    fn accum_stat(&self, stat: &mut Self::Stat, data: &Self::Dataset, idx: usize, w: f64);
    fn merge_stat(&self, into: &mut Self::Stat, other: &Self::Stat);
    fn scale_stat(&self, stat: &mut Self::Stat, c: f64);
    fn expected_log_lik(&self, post: &Self::Posterior, data: &Self::Dataset, idx: usize) -> f64;
    fn global_update(&self, n_k: f64, stat: &Self::Stat) -> Result<Self::Posterior>;
    /// Natural-parameter interpolation toward the target formed from
    /// rescaled statistics: `nat' = (1−ρ)·nat + ρ·(prior_nat + stat)`.
    fn blend_natural(
        &self,
        current: &Self::Posterior,
        n_k: f64,
        stat: &Self::Stat,
        rho: f64,
    ) -> Result<Self::Posterior>;
    fn l_data(
        &self,
        n: &[f64],
        stats: &[Self::Stat],
        posts: &[Self::Posterior],
        count_obs: f64,
    ) -> f64;
}

/// Zero-mean Gaussian likelihood over `DenseDataset` rows; statistic is the
/// weighted scatter `Σ r x xᵀ`.
#[derive(Debug, Clone)]
pub struct GaussianFamily {
    pub prior: WishartPrior,
}

impl ObsFamily for GaussianFamily {
    type Posterior = WishartPosterior;
    type Stat = SquareMat;
    type Dataset = DenseDataset;

    fn n_obs(data: &DenseDataset) -> usize {
        data.n_obs
    }

    fn zero_stat(&self) -> SquareMat {
        SquareMat::zeros(self.prior.dim())
    }

    fn accum_stat(&self, stat: &mut SquareMat, data: &DenseDataset, idx: usize, w: f64) {
        stat.add_outer(data.row(idx), w);
    }

    fn merge_stat(&self, into: &mut SquareMat, other: &SquareMat) {
        into.add_scaled(other, 1.0);
    }

    fn scale_stat(&self, stat: &mut SquareMat, c: f64) {
        stat.scale(c);
    }

    fn expected_log_lik(&self, post: &WishartPosterior, data: &DenseDataset, idx: usize) -> f64 {
        post.expected_log_lik(data.row(idx))
    }

    fn global_update(&self, n_k: f64, stat: &SquareMat) -> Result<WishartPosterior> {
        gaussian_global_update(n_k, stat, &self.prior)
    }

    fn blend_natural(
        &self,
        current: &WishartPosterior,
        n_k: f64,
        stat: &SquareMat,
        rho: f64,
    ) -> Result<WishartPosterior> {
        let nu = (1.0 - rho) * current.nu_hat + rho * (self.prior.nu_bar + n_k);
        let mut inv = current.lambda_hat_inv.clone();
        inv.scale(1.0 - rho);
        inv.add_scaled(&self.prior.lambda_bar_inv, rho);
        inv.add_scaled(stat, rho);
        WishartPosterior::from_inverse_scale(nu, inv)
    }

    fn l_data(
        &self,
        n: &[f64],
        stats: &[SquareMat],
        posts: &[WishartPosterior],
        count_obs: f64,
    ) -> f64 {
        l_data_gaussian(n, stats, posts, &self.prior, count_obs)
    }
}

/// Categorical likelihood over single-token observations; statistic is the
/// weighted word-count vector.
#[derive(Debug, Clone)]
pub struct CategoricalFamily {
    pub vocab_size: usize,
    pub lambda_bar: f64,
}

impl ObsFamily for CategoricalFamily {
    type Posterior = DirichletPosterior;
    type Stat = Vec<f64>;
    type Dataset = TokenDataset;

    fn n_obs(data: &TokenDataset) -> usize {
        data.tokens.len()
    }

    fn zero_stat(&self) -> Vec<f64> {
        vec![0.0; self.vocab_size]
    }

    fn accum_stat(&self, stat: &mut Vec<f64>, data: &TokenDataset, idx: usize, w: f64) {
        stat[data.tokens[idx]] += w;
    }

    fn merge_stat(&self, into: &mut Vec<f64>, other: &Vec<f64>) {
        for (a, b) in into.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    fn scale_stat(&self, stat: &mut Vec<f64>, c: f64) {
        stat.iter_mut().for_each(|v| *v *= c);
    }

    fn expected_log_lik(&self, post: &DirichletPosterior, data: &TokenDataset, idx: usize) -> f64 {
        post.e_log[data.tokens[idx]]
    }

    fn global_update(&self, _n_k: f64, stat: &Vec<f64>) -> Result<DirichletPosterior> {
        categorical_global_update(stat, self.lambda_bar)
    }

    fn blend_natural(
        &self,
        current: &DirichletPosterior,
        _n_k: f64,
        stat: &Vec<f64>,
        rho: f64,
    ) -> Result<DirichletPosterior> {
        let lam = current
            .lambda_hat
            .iter()
            .zip(stat.iter())
            .map(|(&cur, &s)| (1.0 - rho) * cur + rho * (self.lambda_bar + s))
            .collect();
        DirichletPosterior::new(lam)
    }

    fn l_data(
        &self,
        _n: &[f64],
        stats: &[Vec<f64>],
        posts: &[DirichletPosterior],
        _count_obs: f64,
    ) -> f64 {
        l_data_categorical(stats, posts, self.lambda_bar, self.vocab_size)
    }
}
