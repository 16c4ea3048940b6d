//! Heldout-likelihood scoring for both model families, responsibility
//! distance diagnostics, and the substep timing/op-count harness.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counters;
use crate::data::{completion_split, Corpus, DenseDataset, Document};
use crate::error::{Error, Result};
use crate::expfam::{GaussianFamily, WishartPosterior, WishartPrior};
use crate::lda::{dense_step_for_doc, LdaModel, LocalStepConfig, LogProbTable, WeightTable};
use crate::linalg::SquareMat;
use crate::mixture::{MixGlobalState, MixtureModel, Sparsity};
use crate::resp::{densify, total_variation, Resp};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeldoutReport {
    /// Mean log likelihood: nats per observation (mixture) or nats per
    /// held-out token (document completion).
    pub score: f64,
    pub n_units: usize,
    /// Documents skipped because they had fewer than two word types.
    pub n_skipped: usize,
    pub elapsed_sec: f64,
}

/// Heldout score of a Gaussian mixture:
/// `mean_n log Σ_k π̂_k N(x_n | 0, Σ̂_k)` with point estimates
/// `π̂_k = θ̂_k / Σ θ̂` and `Σ̂_k = Λ̂_k⁻¹ / (ν̂_k − D − 1)`.
pub fn mixture_heldout(
    xs: &DenseDataset,
    g: &MixGlobalState<WishartPosterior>,
) -> Result<HeldoutReport> {
    let started = Instant::now();
    let d = xs.dim;
    let k = g.k();
    if xs.n_obs == 0 {
        return Err(Error::arg("empty heldout dataset"));
    }
    let pi_hat = g.pi_hat();
    // Per cluster: ln π̂ − D/2 ln 2π − ½ ln|Σ̂|, plus the precision Σ̂⁻¹.
    let mut log_front = Vec::with_capacity(k);
    let mut precisions: Vec<SquareMat> = Vec::with_capacity(k);
    for (kk, post) in g.posteriors.iter().enumerate() {
        let dof = post.nu_hat - d as f64 - 1.0;
        if !(dof > 0.0) {
            return Err(Error::Domain {
                func: "mixture_heldout",
                msg: format!(
                    "cluster {kk}: nu_hat = {} must exceed D + 1 = {} for E[Sigma] to exist",
                    post.nu_hat,
                    d + 1
                ),
            });
        }
        // ln|Σ̂| = ln|Λ̂⁻¹| − D ln(ν̂ − D − 1); Σ̂⁻¹ = (ν̂ − D − 1) Λ̂.
        let log_det_sigma = post.log_det_lambda_hat_inv() - d as f64 * dof.ln();
        log_front.push(pi_hat[kk].ln() - 0.5 * (d as f64) * LN_2PI - 0.5 * log_det_sigma);
        let mut prec = post.lambda_hat.clone();
        prec.scale(dof);
        precisions.push(prec);
    }
    let total: f64 = (0..xs.n_obs)
        .into_par_iter()
        .map(|n| {
            let x = xs.row(n);
            let mut best = f64::NEG_INFINITY;
            let mut terms = Vec::with_capacity(k);
            for kk in 0..k {
                let t = log_front[kk] - 0.5 * precisions[kk].quadratic_form(x);
                best = best.max(t);
                terms.push(t);
            }
            best + terms.iter().map(|t| (t - best).exp()).sum::<f64>().ln()
        })
        .sum();
    Ok(HeldoutReport {
        score: total / xs.n_obs as f64,
        n_units: xs.n_obs,
        n_skipped: 0,
        elapsed_sec: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct CompletionConfig {
    pub frac_a: f64,
    pub seed: u64,
    pub max_iters: usize,
    pub conv_threshold: f64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig {
            frac_a: 0.8,
            seed: 0,
            max_iters: 100,
            conv_threshold: 0.05,
        }
    }
}

/// Document completion score against fixed point-estimate topics: each test
/// document's word types split 80/20 into A and B; the dense local step on A
/// (topics held fixed) estimates `π̂_d`, and B is scored as
/// `Σ log Σ_k π̂_dk φ̂_k,v` per token. Heldout estimation is always dense
/// regardless of the training sparsity, so scores are comparable across L.
pub fn doc_completion_score(
    corpus: &Corpus,
    log_phi: &LogProbTable,
    alpha: f64,
    cfg: &CompletionConfig,
) -> Result<HeldoutReport> {
    let started = Instant::now();
    let k = log_phi.k;
    if corpus.docs.is_empty() {
        return Err(Error::arg("empty heldout corpus"));
    }
    let model = LdaModel {
        k,
        vocab_size: corpus.vocab_size,
        alpha,
        lambda_bar: 1.0, // unused by the local step
    };
    let local_cfg = LocalStepConfig {
        sparsity: Sparsity::Dense,
        max_iters: cfg.max_iters,
        conv_threshold: cfg.conv_threshold,
        restarts_enabled: false,
        ..Default::default()
    };
    // Splits are drawn sequentially for determinism, then scored in parallel.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs: Vec<(Document, Document)> = Vec::new();
    let mut n_skipped = 0usize;
    for doc in &corpus.docs {
        match completion_split(doc, cfg.frac_a, &mut rng) {
            Some(pair) => pairs.push(pair),
            None => n_skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::arg("no heldout document has >= 2 word types"));
    }
    let (log_total, token_total): (f64, f64) = pairs
        .par_iter()
        .map(|(part_a, part_b)| {
            let state = dense_step_for_doc(&model, part_a, log_phi, &local_cfg, None);
            let theta_sum: f64 = state.theta_hat.iter().sum();
            let log_pi: Vec<f64> = state
                .theta_hat
                .iter()
                .map(|&t| (t / theta_sum).ln())
                .collect();
            let mut acc = 0.0;
            for (&v, &c) in part_b.word_ids.iter().zip(part_b.counts.iter()) {
                let row = log_phi.c_row(v);
                let mut best = f64::NEG_INFINITY;
                let mut terms = Vec::with_capacity(k);
                for kk in 0..k {
                    let t = log_pi[kk] + row[kk];
                    best = best.max(t);
                    terms.push(t);
                }
                let lse = best + terms.iter().map(|t| (t - best).exp()).sum::<f64>().ln();
                acc += c * lse;
            }
            (acc, part_b.n_tokens)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let score = log_total / token_total;
    if !score.is_finite() {
        return Err(Error::Domain {
            func: "doc_completion_score",
            msg: "non-finite score; topics must have strictly positive mass on every word".into(),
        });
    }
    Ok(HeldoutReport {
        score,
        n_units: pairs.len(),
        n_skipped,
        elapsed_sec: started.elapsed().as_secs_f64(),
    })
}

/// Sorted total-variation distances between paired responsibility vectors
/// (the x-axis values of an empirical CDF).
pub fn resp_distance_cdf(dense: &[Resp], sparse: &[Resp]) -> Result<Vec<f64>> {
    if dense.len() != sparse.len() {
        return Err(Error::arg(format!(
            "paired responsibility counts differ: {} vs {}",
            dense.len(),
            sparse.len()
        )));
    }
    let mut out = Vec::with_capacity(dense.len());
    for (a, b) in dense.iter().zip(sparse.iter()) {
        let da = a.to_dense();
        let db = match b {
            Resp::Dense(d) => d.clone(),
            Resp::Sparse(s) => densify(s),
        };
        out.push(total_variation(&da.r, &db.r)?);
    }
    out.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}

/// Same distances between normalized count vectors (LDA's document-topic
/// counts).
pub fn count_distance_cdf(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::arg(format!(
            "paired count-vector counts differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let normalize = |v: &Vec<f64>| -> Vec<f64> {
        let total: f64 = v.iter().sum();
        if total > 0.0 {
            v.iter().map(|&x| x / total).collect()
        } else {
            v.clone()
        }
    };
    let mut out = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b.iter()) {
        out.push(total_variation(&normalize(x), &normalize(y))?);
    }
    out.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}

pub fn median(sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// One measured substep at one grid point.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub substep: String,
    pub k: usize,
    pub l: String,
    pub wall_sec: f64,
    pub exp_calls: u64,
}

#[derive(Debug, Clone)]
pub struct GmmBenchSpec {
    pub n_obs: usize,
    pub dim: usize,
    pub grid_k: Vec<usize>,
    pub grid_l: Vec<Sparsity>,
    pub reps: usize,
    pub seed: u64,
}

impl Default for GmmBenchSpec {
    fn default() -> Self {
        GmmBenchSpec {
            n_obs: 10_000,
            dim: 64,
            grid_k: vec![50],
            grid_l: vec![Sparsity::TopL(4), Sparsity::Dense],
            reps: 5,
            seed: 0,
        }
    }
}

fn median_of_timed<T>(reps: usize, mut f: impl FnMut() -> T) -> (f64, T) {
    let mut times = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        last = Some(f());
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    (median(&times), last.unwrap())
}

/// Synthetic zero-mean mixture data with per-cluster covariance structure;
/// enough for weight spreads to resemble real fits.
pub fn synthetic_gmm_data(n: usize, dim: usize, k_true: usize, seed: u64) -> DenseDataset {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for _ in 0..k_true {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        dirs.push(v.into_iter().map(|x| x / norm).collect());
    }
    let mut rows = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = rng.gen_range(0..k_true);
        let scale = 0.05 + 1.2 * (c as f64 + 1.0) / k_true as f64;
        let along: f64 = {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        for d in 0..dim {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            rows.push(scale * (0.25 * z + 2.0 * along * dirs[c][d]));
        }
    }
    DenseDataset::new(n, dim, rows)
}

/// Synthetic image patches: renders grayscale images as mixtures of oriented
/// gratings over smooth backgrounds plus pixel noise, then extracts 8x8
/// patches on a stride-4 grid with per-patch mean removal.
pub fn synthetic_patches(n_patches: usize, seed: u64) -> DenseDataset {
    use rand::Rng;
    let (width, height, patch, stride) = (64usize, 64usize, 8usize, 4usize);
    let per_image = ((width - patch) / stride + 1) * ((height - patch) / stride + 1);
    let n_images = n_patches.div_ceil(per_image);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Vec::with_capacity(n_patches * patch * patch);
    let mut taken = 0usize;
    for _ in 0..n_images {
        // Two superposed oriented gratings plus a gradient and pixel noise:
        // textured enough that neighboring clusters genuinely compete.
        let fx = rng.gen_range(0.02..0.9);
        let fy = rng.gen_range(0.02..0.9);
        let fx2 = rng.gen_range(0.02..0.9);
        let fy2 = rng.gen_range(0.02..0.9);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let phase2 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(5.0..45.0);
        let amp2 = rng.gen_range(5.0..45.0);
        let noise = rng.gen_range(4.0..30.0);
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let s = amp * (fx * x as f64 + fy * y as f64 + phase).sin()
                    + amp2 * (fx2 * x as f64 - fy2 * y as f64 + phase2).sin()
                    + 30.0 * ((x as f64 / width as f64) - (y as f64 / height as f64))
                    + noise * rng.gen_range(-1.0..1.0);
                pixels.push(128.0 + s);
            }
        }
        let patches =
            crate::data::extract_patches_from_gray(&pixels, width, height, patch, stride, true)
                .expect("synthetic image larger than patch");
        for p in 0..patches.n_obs {
            if taken == n_patches {
                break;
            }
            all.extend_from_slice(patches.row(p));
            taken += 1;
        }
        if taken == n_patches {
            break;
        }
    }
    DenseDataset::new(taken, patch * patch, all)
}

/// Builds a plausible fitted state by assigning observations to clusters
/// round-robin and taking one global step.
fn bench_state(
    model: &MixtureModel<GaussianFamily>,
    data: &DenseDataset,
) -> Result<MixGlobalState<WishartPosterior>> {
    let mut stats = model.zero_stats();
    for n in 0..data.n_obs {
        let kk = n % model.k;
        stats.n[kk] += 1.0;
        stats.s[kk].add_outer(data.row(n), 1.0);
        stats.count_obs += 1.0;
    }
    model.global_step(&stats)
}

/// Times the mixture substeps (weights, resp-from-weights, summary, global)
/// at every grid point, single-threaded, median over `reps` repetitions.
pub fn bench_gmm(spec: &GmmBenchSpec) -> Result<Vec<BenchRow>> {
    let data = synthetic_gmm_data(spec.n_obs, spec.dim, 8, spec.seed);
    let mut rows = Vec::new();
    for &k in &spec.grid_k {
        let prior = WishartPrior::default_for_data(&data)?;
        let model = MixtureModel::new(k, 10.0, GaussianFamily { prior });
        let g = bench_state(&model, &data)?;

        // Weights once per K; the weight pass is shared by every L.
        let mut weights = vec![0.0; data.n_obs * k];
        let (w_time, ()) = median_of_timed(spec.reps, || {
            for n in 0..data.n_obs {
                let row = &mut weights[n * k..(n + 1) * k];
                model.compute_weights(&data, n, &g, row);
            }
        });
        rows.push(BenchRow {
            substep: "weights".into(),
            k,
            l: "-".into(),
            wall_sec: w_time,
            exp_calls: 0,
        });

        for &sparsity in &spec.grid_l {
            if let Sparsity::TopL(l) = sparsity {
                if l > k {
                    continue;
                }
            }
            // Responsibilities from fixed weights.
            let before = counters::thread_exp_calls();
            let (r_time, resps) = median_of_timed(spec.reps, || {
                let mut out = Vec::with_capacity(data.n_obs);
                for n in 0..data.n_obs {
                    let row = &weights[n * k..(n + 1) * k];
                    let resp = match sparsity {
                        Sparsity::Dense => {
                            Resp::Dense(crate::resp::dense_resp_from_weights(row).unwrap())
                        }
                        Sparsity::TopL(l) => {
                            Resp::Sparse(crate::resp::top_l_resp_from_weights(row, l).unwrap())
                        }
                    };
                    out.push(resp);
                }
                out
            });
            let resp_exps = (counters::thread_exp_calls() - before) / spec.reps.max(1) as u64;
            rows.push(BenchRow {
                substep: "resp".into(),
                k,
                l: sparsity.label(),
                wall_sec: r_time,
                exp_calls: resp_exps,
            });

            // Summary from fixed responsibilities.
            let idx: Vec<usize> = (0..data.n_obs).collect();
            let (s_time, stats) = median_of_timed(spec.reps, || {
                model.summary_step(&data, &idx, &resps).unwrap()
            });
            rows.push(BenchRow {
                substep: "summary".into(),
                k,
                l: sparsity.label(),
                wall_sec: s_time,
                exp_calls: 0,
            });

            // Global step from fixed statistics.
            let (g_time, _) = median_of_timed(spec.reps, || model.global_step(&stats).unwrap());
            rows.push(BenchRow {
                substep: "global".into(),
                k,
                l: sparsity.label(),
                wall_sec: g_time,
                exp_calls: 0,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct LdaBenchSpec {
    pub n_docs: usize,
    pub vocab_size: usize,
    pub tokens_per_doc: usize,
    pub grid_k: Vec<usize>,
    pub grid_l: Vec<Sparsity>,
    pub reps: usize,
    pub seed: u64,
}

impl Default for LdaBenchSpec {
    fn default() -> Self {
        LdaBenchSpec {
            n_docs: 100,
            vocab_size: 1000,
            tokens_per_doc: 200,
            grid_k: vec![100],
            grid_l: vec![Sparsity::TopL(4), Sparsity::Dense],
            reps: 5,
            seed: 0,
        }
    }
}

/// Times the LDA local iterations (with restart proposals, as trained) and
/// the summary step at every grid point.
pub fn bench_lda(spec: &LdaBenchSpec) -> Result<Vec<BenchRow>> {
    use crate::lda::{lda_global_step, lda_local_summary, lda_summary, local_step_for_doc};
    let corpus = synthetic_corpus(
        spec.n_docs,
        spec.vocab_size,
        spec.tokens_per_doc,
        8,
        0.5,
        spec.seed,
    );
    let mut rows = Vec::new();
    for &k in &spec.grid_k {
        let model = LdaModel {
            k,
            vocab_size: spec.vocab_size,
            alpha: 0.5,
            lambda_bar: 0.1,
        };
        // A one-pass fitted state gives realistic weight spreads.
        let g0 = crate::lda::lda_prior_state(&model)?;
        let cfg0 = LocalStepConfig {
            sparsity: Sparsity::TopL(k.min(8)),
            max_iters: 5,
            restarts_enabled: false,
            ..Default::default()
        };
        let idx: Vec<usize> = (0..corpus.docs.len()).collect();
        let (stats0, _) = lda_local_summary(&model, &corpus, &idx, &g0, &cfg0)?;
        let g = lda_global_step(&model, &stats0)?;

        for &sparsity in &spec.grid_l {
            if let Sparsity::TopL(l) = sparsity {
                if l > k {
                    continue;
                }
            }
            let cfg = LocalStepConfig {
                sparsity,
                restarts_enabled: true,
                ..Default::default()
            };
            let before = counters::thread_exp_calls();
            let (t_local, states) = median_of_timed(spec.reps, || {
                corpus
                    .docs
                    .iter()
                    .map(|doc| local_step_for_doc(&model, doc, &g, &cfg, None).unwrap())
                    .collect::<Vec<_>>()
            });
            let local_exps = (counters::thread_exp_calls() - before) / spec.reps.max(1) as u64;
            rows.push(BenchRow {
                substep: "local-iterations".into(),
                k,
                l: sparsity.label(),
                wall_sec: t_local,
                exp_calls: local_exps,
            });

            let (t_summary, _stats) =
                median_of_timed(spec.reps, || lda_summary(&model, &corpus.docs, &states));
            rows.push(BenchRow {
                substep: "summary".into(),
                k,
                l: sparsity.label(),
                wall_sec: t_summary,
                exp_calls: 0,
            });
        }
    }
    Ok(rows)
}

/// Renders bench rows as a tab-separated table with a header line.
pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = String::from("substep\tK\tL\twall_sec\texp_calls\n");
    for row in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{}\n",
            row.substep, row.k, row.l, row.wall_sec, row.exp_calls
        ));
    }
    out
}

fn sample_normal(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-300_f64..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Marsaglia-Tsang Gamma(shape, 1) sampler with the standard boost for
/// shape < 1.
fn sample_gamma(shape: f64, rng: &mut impl rand::Rng) -> f64 {
    debug_assert!(shape > 0.0);
    if shape < 1.0 {
        let u: f64 = rng.gen_range(1e-300_f64..1.0);
        return sample_gamma(shape + 1.0, rng) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (3.0 * d.sqrt());
    loop {
        let x = sample_normal(rng);
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u: f64 = rng.gen_range(1e-300_f64..1.0);
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return d * v;
        }
    }
}

fn sample_dirichlet_symmetric(a: f64, n: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    let mut draws: Vec<f64> = (0..n).map(|_| sample_gamma(a, rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter_mut().for_each(|x| *x /= total);
    } else {
        draws.iter_mut().for_each(|x| *x = 1.0 / n as f64);
    }
    draws
}

fn sample_categorical(p: &[f64], rng: &mut impl rand::Rng) -> usize {
    let mut u: f64 = rng.gen_range(0.0..1.0);
    for (i, &pi) in p.iter().enumerate() {
        if u < pi {
            return i;
        }
        u -= pi;
    }
    p.len() - 1
}

/// Generates a corpus from known topics.
pub fn synthetic_corpus(
    n_docs: usize,
    vocab_size: usize,
    tokens_per_doc: usize,
    k_true: usize,
    alpha: f64,
    seed: u64,
) -> Corpus {
    synthetic_corpus_with_topics(n_docs, vocab_size, tokens_per_doc, k_true, alpha, seed).0
}

/// Like [`synthetic_corpus_with_topics`] with an explicit topic-sparsity
/// parameter (symmetric Dirichlet concentration of the topic-word rows).
pub fn synthetic_corpus_detailed(
    n_docs: usize,
    vocab_size: usize,
    tokens_per_doc: usize,
    k_true: usize,
    alpha: f64,
    topic_conc: f64,
    seed: u64,
) -> (Corpus, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut topics = Vec::with_capacity(k_true);
    for _ in 0..k_true {
        let mut row = sample_dirichlet_symmetric(topic_conc, vocab_size, &mut rng);
        for x in row.iter_mut() {
            *x += 1e-4;
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
        topics.push(row);
    }
    let ak = alpha / k_true as f64;
    let mut docs = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        let pi = sample_dirichlet_symmetric(ak, k_true, &mut rng);
        let mut counts = vec![0.0; vocab_size];
        for _ in 0..tokens_per_doc {
            let z = sample_categorical(&pi, &mut rng);
            let v = sample_categorical(&topics[z], &mut rng);
            counts[v] += 1.0;
        }
        let ids: Vec<usize> = (0..vocab_size).filter(|&v| counts[v] > 0.0).collect();
        let cs: Vec<f64> = ids.iter().map(|&v| counts[v]).collect();
        docs.push(Document::new(ids, cs));
    }
    (
        Corpus {
            docs,
            vocab_size,
            n_skipped_empty: 0,
        },
        topics,
    )
}

/// Generates a corpus from known topics and returns those topics: `k_true`
/// sparse Dirichlet topic-word distributions (floored so every word stays
/// possible), document mixing weights drawn from Dir(alpha/K_true ... ), and
/// tokens sampled through the generative process.
pub fn synthetic_corpus_with_topics(
    n_docs: usize,
    vocab_size: usize,
    tokens_per_doc: usize,
    k_true: usize,
    alpha: f64,
    seed: u64,
) -> (Corpus, Vec<Vec<f64>>) {
    synthetic_corpus_detailed(
        n_docs,
        vocab_size,
        tokens_per_doc,
        k_true,
        alpha,
        0.08,
        seed,
    )
}

/// TV distances between dense and L-sparse responsibilities over a dataset,
/// at a fixed global state.
pub fn mixture_distance_cdf(
    model: &MixtureModel<GaussianFamily>,
    data: &DenseDataset,
    g: &MixGlobalState<WishartPosterior>,
    l: usize,
) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..data.n_obs).collect();
    let dense = model.local_step(data, &idx, g, Sparsity::Dense)?;
    let sparse = model.local_step(data, &idx, g, Sparsity::TopL(l))?;
    resp_distance_cdf(&dense, &sparse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::gaussian_global_update;

    fn scalar_state(
        thetas: Vec<f64>,
        posts: Vec<WishartPosterior>,
    ) -> MixGlobalState<WishartPosterior> {
        MixGlobalState::new(thetas, posts).unwrap()
    }

    fn scalar_post(nu: f64, lam_inv: f64) -> WishartPosterior {
        WishartPosterior::from_inverse_scale(nu, SquareMat::from_rows(1, vec![lam_inv])).unwrap()
    }

    #[test]
    fn standard_normal_at_zero() {
        // K=1, D=1: nu=3, lambda_inv=1 gives E[Sigma] = 1/(3-2) = 1.
        let g = scalar_state(vec![2.0], vec![scalar_post(3.0, 1.0)]);
        let xs = DenseDataset::new(1, 1, vec![0.0]);
        let rep = mixture_heldout(&xs, &g).unwrap();
        assert!((rep.score + 0.5 * LN_2PI).abs() < 1e-12);
        assert_eq!(rep.n_units, 1);
    }

    #[test]
    fn duplicate_clusters_merge_transparently() {
        let post = scalar_post(4.0, 2.0);
        let split = scalar_state(vec![1.0, 1.0], vec![post.clone(), post.clone()]);
        let merged = scalar_state(vec![2.0], vec![post]);
        let xs = DenseDataset::new(4, 1, vec![0.3, -1.2, 0.9, 2.4]);
        let a = mixture_heldout(&xs, &split).unwrap();
        let b = mixture_heldout(&xs, &merged).unwrap();
        assert!((a.score - b.score).abs() < 1e-12);
    }

    #[test]
    fn relabeling_invariance_and_golden_two_cluster() {
        let p0 = scalar_post(5.0, 1.0);
        let p1 = scalar_post(7.0, 10.0);
        let xs = DenseDataset::new(5, 1, vec![-2.0, -0.5, 0.0, 0.7, 1.9]);
        let g01 = scalar_state(vec![3.0, 1.0], vec![p0.clone(), p1.clone()]);
        let g10 = scalar_state(vec![1.0, 3.0], vec![p1.clone(), p0.clone()]);
        let a = mixture_heldout(&xs, &g01).unwrap();
        let b = mixture_heldout(&xs, &g10).unwrap();
        assert!((a.score - b.score).abs() < 1e-12);

        // Hand log-sum-exp with explicit point estimates.
        let sig0: f64 = 1.0 / (5.0 - 2.0);
        let sig1: f64 = 10.0 / (7.0 - 2.0);
        let (pi0, pi1): (f64, f64) = (0.75, 0.25);
        let mut want = 0.0;
        for n in 0..5 {
            let x = xs.row(n)[0];
            let l0 = pi0.ln() - 0.5 * LN_2PI - 0.5 * sig0.ln() - 0.5 * x * x / sig0;
            let l1 = pi1.ln() - 0.5 * LN_2PI - 0.5 * sig1.ln() - 0.5 * x * x / sig1;
            let m = l0.max(l1);
            want += m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        }
        want /= 5.0;
        assert!((a.score - want).abs() < 1e-10, "{} vs {want}", a.score);
    }

    #[test]
    fn heldout_requires_enough_degrees_of_freedom() {
        // nu = 2 = D + 1 for D=1: E[Sigma] does not exist.
        let g = scalar_state(vec![1.0], vec![scalar_post(2.0, 1.0)]);
        let xs = DenseDataset::new(1, 1, vec![0.0]);
        let err = mixture_heldout(&xs, &g).unwrap_err();
        assert!(err.to_string().contains("cluster 0"), "{err}");
    }

    #[test]
    fn completion_single_topic_is_unigram_likelihood() {
        // One topic with phi = (0.5, 0.5); the held word scores ln 0.5.
        let log_phi = LogProbTable::from_topic_rows(&[vec![0.5, 0.5]]);
        let corpus = Corpus {
            docs: vec![Document::new(vec![0, 1], vec![4.0, 1.0])],
            vocab_size: 2,
            n_skipped_empty: 0,
        };
        let rep =
            doc_completion_score(&corpus, &log_phi, 0.5, &CompletionConfig::default()).unwrap();
        assert!((rep.score - 0.5f64.ln()).abs() < 1e-12);
        assert_eq!(rep.n_units, 1);
        assert_eq!(rep.n_skipped, 0);
    }

    #[test]
    fn completion_identical_topics_golden() {
        // Two identical topics: theta stays symmetric, pi = (1/2, 1/2), and
        // the predictive equals the shared topic distribution.
        let phi = vec![vec![0.7, 0.3], vec![0.7, 0.3]];
        let log_phi = LogProbTable::from_topic_rows(&phi);
        let corpus = Corpus {
            docs: vec![Document::new(vec![0, 1], vec![3.0, 2.0])],
            vocab_size: 2,
            n_skipped_empty: 0,
        };
        let rep =
            doc_completion_score(&corpus, &log_phi, 0.5, &CompletionConfig::default()).unwrap();
        // Whichever type lands in B, the score is ln phi(v_B).
        let ok_values = [0.7f64.ln(), 0.3f64.ln()];
        assert!(
            ok_values.iter().any(|w| (rep.score - w).abs() < 1e-10),
            "score {} not a pointwise log prob",
            rep.score
        );
    }

    #[test]
    fn completion_skips_single_type_docs() {
        let log_phi = LogProbTable::from_topic_rows(&[vec![0.5, 0.5]]);
        let corpus = Corpus {
            docs: vec![
                Document::new(vec![0], vec![5.0]),
                Document::new(vec![0, 1], vec![1.0, 1.0]),
            ],
            vocab_size: 2,
            n_skipped_empty: 0,
        };
        let rep =
            doc_completion_score(&corpus, &log_phi, 0.5, &CompletionConfig::default()).unwrap();
        assert_eq!(rep.n_units, 1);
        assert_eq!(rep.n_skipped, 1);
    }

    #[test]
    fn completion_deterministic_for_fixed_seed() {
        let (corpus, topics) = synthetic_corpus_with_topics(20, 30, 40, 3, 0.5, 7);
        let log_phi = LogProbTable::from_topic_rows(&topics);
        let a = doc_completion_score(&corpus, &log_phi, 0.5, &CompletionConfig::default()).unwrap();
        let b = doc_completion_score(&corpus, &log_phi, 0.5, &CompletionConfig::default()).unwrap();
        assert_eq!(a.score.to_bits(), b.score.to_bits());
    }

    #[test]
    fn distance_cdf_properties() {
        use crate::resp::{DenseResp, SparseResp};
        // L = K pairs are all zeros.
        let dense = vec![Resp::Dense(DenseResp { r: vec![0.5, 0.5] })];
        let same = vec![Resp::Sparse(SparseResp {
            values: vec![0.5, 0.5],
            indices: vec![0, 1],
            k: 2,
        })];
        let cdf = resp_distance_cdf(&dense, &same).unwrap();
        assert_eq!(cdf, vec![0.0]);

        // The single-pair example from the responsibility module.
        let a = vec![Resp::Dense(DenseResp {
            r: vec![0.7, 0.2, 0.1],
        })];
        let b = vec![Resp::Dense(DenseResp {
            r: vec![1.0, 0.0, 0.0],
        })];
        let cdf = resp_distance_cdf(&a, &b).unwrap();
        assert!((cdf[0] - 0.3).abs() < 1e-12);

        // Quantiles shrink as L grows; exactly zero at L = K.
        let xs = synthetic_gmm_data(200, 4, 4, 3);
        let prior = WishartPrior::default_for_data(&xs).unwrap();
        let model = MixtureModel::new(6, 10.0, GaussianFamily { prior });
        let mut stats = model.zero_stats();
        for n in 0..xs.n_obs {
            let kk = n % 6;
            stats.n[kk] += 1.0;
            stats.s[kk].add_outer(xs.row(n), 1.0);
            stats.count_obs += 1.0;
        }
        let g = model.global_step(&stats).unwrap();
        let mut prev: Vec<f64> = Vec::new();
        for l in [1usize, 2, 4, 6] {
            let cdf = mixture_distance_cdf(&model, &xs, &g, l).unwrap();
            assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
            assert!(cdf.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
            if l == 6 {
                assert!(cdf.iter().all(|&v| v < 1e-12), "L=K must be exactly zero");
            }
            if !prev.is_empty() {
                for (hi, lo) in prev.iter().zip(cdf.iter()) {
                    assert!(lo <= &(hi + 1e-12));
                }
            }
            prev = cdf;
        }
    }

    #[test]
    fn count_cdf_normalizes() {
        let a = vec![vec![3.0, 1.0]];
        let b = vec![vec![6.0, 2.0]];
        let cdf = count_distance_cdf(&a, &b).unwrap();
        assert!(cdf[0].abs() < 1e-15);
    }

    #[test]
    fn bench_counts_match_contracts() {
        let spec = GmmBenchSpec {
            n_obs: 500,
            dim: 8,
            grid_k: vec![16],
            grid_l: vec![Sparsity::TopL(4), Sparsity::Dense],
            reps: 1,
            seed: 1,
        };
        let rows = bench_gmm(&spec).unwrap();
        let find = |substep: &str, l: &str| {
            rows.iter()
                .find(|r| r.substep == substep && r.l == l)
                .unwrap()
        };
        assert_eq!(find("resp", "4").exp_calls, 500 * 4);
        assert_eq!(find("resp", "dense").exp_calls, 500 * 16);
        let table = bench_table(&rows);
        assert!(table.starts_with("substep\tK\tL\twall_sec\texp_calls"));
    }

    #[test]
    fn gaussian_update_keeps_heldout_finite() {
        let xs = synthetic_gmm_data(50, 3, 2, 5);
        let prior = WishartPrior::default_for_data(&xs).unwrap();
        let mut s = SquareMat::zeros(3);
        for n in 0..xs.n_obs {
            s.add_outer(xs.row(n), 0.5);
        }
        let post = gaussian_global_update(25.0, &s, &prior).unwrap();
        let g = MixGlobalState::new(vec![25.0], vec![post]).unwrap();
        let rep = mixture_heldout(&xs, &g).unwrap();
        assert!(rep.score.is_finite());
    }
}
