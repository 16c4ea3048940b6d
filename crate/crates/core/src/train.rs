//! Minibatch trainers: stochastic variational inference (noisy natural-
//! gradient steps with a decaying rate) and memoized variational inference
//! (exact whole-dataset statistics via per-batch caching), over either the
//! mixture pipeline or the LDA pipeline.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counters;
use crate::data::{BatchMode, Batcher, Corpus};
use crate::error::{Error, Result};
use crate::expfam::ObsFamily;
use crate::lda::{
    accumulate_doc_stats, lda_elbo_from_stats, lda_global_step, lda_svi_blend, local_step_for_doc,
    LdaGlobalState, LdaModel, LdaSuffStats, LocalStepConfig,
};
use crate::mixture::{MixGlobalState, MixSuffStats, MixtureModel, Reduction, Sparsity};

/// `ρ_t = (δ + t)^{−κ}`. With δ ≥ 1 and κ ∈ (0.5, 1], the sequence lies in
/// (0, 1], sums to infinity, and is square-summable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRateSchedule {
    pub delta: f64,
    pub kappa: f64,
}

impl LearningRateSchedule {
    pub fn new(delta: f64, kappa: f64) -> Result<Self> {
        let s = LearningRateSchedule { delta, kappa };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.5 && self.kappa <= 1.0) {
            return Err(Error::Config(format!(
                "kappa = {} must lie in (0.5, 1]",
                self.kappa
            )));
        }
        if !(self.delta >= 1.0) {
            return Err(Error::Config(format!(
                "delta = {} must be >= 1 so that rho_0 <= 1",
                self.delta
            )));
        }
        Ok(())
    }

    pub fn rho(&self, t: u64) -> f64 {
        (self.delta + t as f64).powf(-self.kappa)
    }
}

/// Side information from a batch's local step.
#[derive(Debug, Default, Clone)]
pub struct LocalDiag {
    pub n_restart_proposals: u64,
    pub n_restart_accepts: u64,
    /// `(doc index, converged counts)` pairs to write back into the warm
    /// store, when warm starting is enabled.
    pub warm_updates: Vec<(usize, Vec<f64>)>,
}

impl LocalDiag {
    fn absorb(&mut self, other: LocalDiag) {
        self.n_restart_proposals += other.n_restart_proposals;
        self.n_restart_accepts += other.n_restart_accepts;
        self.warm_updates.extend(other.warm_updates);
    }
}

/// Per-document stored counts for warm starts; `None` until first visit.
pub type WarmStore = Vec<Option<Vec<f64>>>;

/// What the generic trainers need from a model pipeline.
pub trait TrainModel: Sync {
    type Global: Clone + Send + Sync;
    type Stats: Clone + Send + Sync;

    fn n_obs(&self) -> usize;
    fn zero_stats(&self) -> Self::Stats;
    fn merge_stats(&self, into: &mut Self::Stats, other: &Self::Stats);
    fn scale_stats(&self, stats: &mut Self::Stats, c: f64);
    fn local_summary(
        &self,
        indices: &[usize],
        g: &Self::Global,
        warm: Option<&WarmStore>,
    ) -> Result<(Self::Stats, LocalDiag)>;
    fn global_step(&self, stats: &Self::Stats) -> Result<Self::Global>;
    fn svi_blend(&self, g: &Self::Global, rescaled: &Self::Stats, rho: f64)
        -> Result<Self::Global>;
    fn elbo(&self, stats: &Self::Stats, g: &Self::Global) -> f64;
}

/// Mixture-model pipeline over a fixed dataset.
pub struct MixturePipeline<'a, F: ObsFamily> {
    pub model: &'a MixtureModel<F>,
    pub data: &'a F::Dataset,
    pub sparsity: Sparsity,
    pub reduction: Reduction,
}

impl<'a, F: ObsFamily> TrainModel for MixturePipeline<'a, F> {
    type Global = MixGlobalState<F::Posterior>;
    type Stats = MixSuffStats<F::Stat>;

    fn n_obs(&self) -> usize {
        F::n_obs(self.data)
    }

    fn zero_stats(&self) -> Self::Stats {
        self.model.zero_stats()
    }

    fn merge_stats(&self, into: &mut Self::Stats, other: &Self::Stats) {
        self.model.merge_stats(into, other);
    }

    fn scale_stats(&self, stats: &mut Self::Stats, c: f64) {
        self.model.scale_stats(stats, c);
    }

    fn local_summary(
        &self,
        indices: &[usize],
        g: &Self::Global,
        _warm: Option<&WarmStore>,
    ) -> Result<(Self::Stats, LocalDiag)> {
        let stats =
            self.model
                .local_summary(self.data, indices, g, self.sparsity, self.reduction)?;
        Ok((stats, LocalDiag::default()))
    }

    fn global_step(&self, stats: &Self::Stats) -> Result<Self::Global> {
        self.model.global_step(stats)
    }

    fn svi_blend(
        &self,
        g: &Self::Global,
        rescaled: &Self::Stats,
        rho: f64,
    ) -> Result<Self::Global> {
        self.model.svi_blend(g, rescaled, rho)
    }

    fn elbo(&self, stats: &Self::Stats, g: &Self::Global) -> f64 {
        self.model.elbo(stats, g)
    }
}

/// LDA pipeline over a fixed corpus; observations are documents.
pub struct LdaPipeline<'a> {
    pub model: &'a LdaModel,
    pub corpus: &'a Corpus,
    pub cfg: LocalStepConfig,
    pub reduction: Reduction,
}

const DOC_CHUNK: usize = 8;

impl<'a> TrainModel for LdaPipeline<'a> {
    type Global = LdaGlobalState;
    type Stats = LdaSuffStats;

    fn n_obs(&self) -> usize {
        self.corpus.docs.len()
    }

    fn zero_stats(&self) -> LdaSuffStats {
        LdaSuffStats::zeros(self.model.k, self.model.vocab_size)
    }

    fn merge_stats(&self, into: &mut LdaSuffStats, other: &LdaSuffStats) {
        into.merge(other);
    }

    fn scale_stats(&self, stats: &mut LdaSuffStats, c: f64) {
        stats.scale(c);
    }

    fn local_summary(
        &self,
        indices: &[usize],
        g: &LdaGlobalState,
        warm: Option<&WarmStore>,
    ) -> Result<(LdaSuffStats, LocalDiag)> {
        let process = |chunk: &[usize]| -> Result<(LdaSuffStats, LocalDiag)> {
            let mut stats = self.zero_stats();
            let mut diag = LocalDiag::default();
            for &d in chunk {
                let warm_counts = warm.and_then(|w| w[d].as_deref());
                let state = local_step_for_doc(
                    self.model,
                    &self.corpus.docs[d],
                    g,
                    &self.cfg,
                    warm_counts,
                )?;
                diag.n_restart_proposals += state.n_restart_proposals;
                diag.n_restart_accepts += state.n_restart_accepts;
                if self.cfg.warm_start {
                    diag.warm_updates.push((d, state.doc_topic_counts.clone()));
                }
                accumulate_doc_stats(self.model, &self.corpus.docs[d], &state, &mut stats);
            }
            Ok((stats, diag))
        };
        // Chunk results merge in index order in both reduction modes (the
        // merge is cheap next to the local step), so Ordered reproducibility
        // comes for free.
        let parts: Vec<(LdaSuffStats, LocalDiag)> = indices
            .par_chunks(DOC_CHUNK)
            .map(process)
            .collect::<Result<Vec<_>>>()?;
        let mut stats = self.zero_stats();
        let mut diag = LocalDiag::default();
        for (s, d) in parts {
            stats.merge(&s);
            diag.absorb(d);
        }
        Ok((stats, diag))
    }

    fn global_step(&self, stats: &LdaSuffStats) -> Result<LdaGlobalState> {
        lda_global_step(self.model, stats)
    }

    fn svi_blend(
        &self,
        g: &LdaGlobalState,
        rescaled: &LdaSuffStats,
        rho: f64,
    ) -> Result<LdaGlobalState> {
        lda_svi_blend(self.model, g, rescaled, rho)
    }

    fn elbo(&self, stats: &LdaSuffStats, g: &LdaGlobalState) -> f64 {
        lda_elbo_from_stats(self.model, stats, g)
    }
}

/// Per-batch cached statistics plus their running aggregate. The aggregate
/// is maintained incrementally and re-summed from the stored batches once
/// per two full rounds of replacements to squash accumulation drift.
#[derive(Debug, Clone)]
pub struct MemoCache<S> {
    per_batch: Vec<Option<S>>,
    aggregate: S,
    replacements: usize,
}

impl<S: Clone> MemoCache<S> {
    pub fn new<M: TrainModel<Stats = S>>(model: &M, n_batches: usize) -> Self {
        MemoCache {
            per_batch: vec![None; n_batches],
            aggregate: model.zero_stats(),
            replacements: 0,
        }
    }

    pub fn n_batches(&self) -> usize {
        self.per_batch.len()
    }

    pub fn aggregate(&self) -> &S {
        &self.aggregate
    }

    pub fn batch_stats(&self, b: usize) -> Option<&S> {
        self.per_batch.get(b).and_then(|s| s.as_ref())
    }

    /// `aggregate ← aggregate − cache[b] + stats; cache[b] ← stats`.
    pub fn replace<M: TrainModel<Stats = S>>(
        &mut self,
        model: &M,
        b: usize,
        stats: S,
    ) -> Result<()> {
        if b >= self.per_batch.len() {
            return Err(Error::arg(format!(
                "batch id {b} out of range 0..{}",
                self.per_batch.len()
            )));
        }
        if let Some(old) = self.per_batch[b].take() {
            let mut neg = old;
            model.scale_stats(&mut neg, -1.0);
            model.merge_stats(&mut self.aggregate, &neg);
        }
        model.merge_stats(&mut self.aggregate, &stats);
        self.per_batch[b] = Some(stats);
        self.replacements += 1;
        if self.replacements % (2 * self.per_batch.len().max(1)) == 0 {
            self.reaggregate(model);
        }
        Ok(())
    }

    /// Full re-sum of the stored batch statistics.
    pub fn reaggregate<M: TrainModel<Stats = S>>(&mut self, model: &M) {
        let mut agg = model.zero_stats();
        for s in self.per_batch.iter().flatten() {
            model.merge_stats(&mut agg, s);
        }
        self.aggregate = agg;
    }
}

/// One stochastic step: local + summary on the batch, rescale to the full
/// dataset, then move every natural parameter toward the rescaled optimum by
/// `ρ_t`. Returns the new global state and the rescaled batch statistics
/// (whose objective value is the trace's "rescaled-batch ELBO").
pub fn svi_step<M: TrainModel>(
    model: &M,
    t: u64,
    batch: &[usize],
    g: &M::Global,
    sched: &LearningRateSchedule,
    warm: Option<&WarmStore>,
) -> Result<(M::Global, M::Stats, LocalDiag)> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let (mut stats, diag) = model.local_summary(batch, g, warm)?;
    let scale = model.n_obs() as f64 / batch.len() as f64;
    model.scale_stats(&mut stats, scale);
    let rho = sched.rho(t);
    let g_new = model.svi_blend(g, &stats, rho)?;
    Ok((g_new, stats, diag))
}

/// One memoized step: fresh statistics for batch `b` swap into the cache,
/// and the global parameters are re-optimized for the updated whole-dataset
/// aggregate.
pub fn mvi_step<M: TrainModel>(
    model: &M,
    b: usize,
    batch: &[usize],
    g: &M::Global,
    cache: &mut MemoCache<M::Stats>,
    warm: Option<&WarmStore>,
) -> Result<(M::Global, LocalDiag)> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let (stats, diag) = model.local_summary(batch, g, warm)?;
    cache.replace(model, b, stats)?;
    let g_new = model.global_step(cache.aggregate())?;
    Ok((g_new, diag))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Algorithm {
    Svi(LearningRateSchedule),
    Mvi,
    /// Full-batch coordinate ascent: memoized with a single batch.
    Full,
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub algorithm: Algorithm,
    pub n_batches: usize,
    pub laps: usize,
    pub seed: u64,
    /// Zeroes wall-clock fields in the trace so fixed-seed runs are
    /// byte-identical.
    pub deterministic: bool,
    /// Maintain a per-document warm store (LDA only; the mixture local step
    /// is closed-form and has nothing to warm-start).
    pub warm_start: bool,
}

/// One row per lap of the metrics file; serialized as JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub lap: u64,
    pub t: u64,
    pub rho: f64,
    pub elapsed_sec: f64,
    pub elbo: f64,
    pub heldout: Option<f64>,
    pub n_exp_calls: u64,
    pub n_restart_accepts: u64,
    pub n_restart_proposals: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("trace row serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Trace> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: "<trace>".into(),
                    location: "line".into(),
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trace { rows })
    }
}

/// Runs `laps` passes of the configured algorithm over the batches, emitting
/// one trace row per lap. `heldout_hook` is called with the lap-end global
/// state; return `None` to skip heldout scoring.
pub fn run<M: TrainModel>(
    model: &M,
    opts: &TrainOpts,
    init: M::Global,
    heldout_hook: impl Fn(&M::Global) -> Option<f64>,
) -> Result<(M::Global, Trace)> {
    let n = model.n_obs();
    let b = match opts.algorithm {
        Algorithm::Full => 1,
        _ => opts.n_batches,
    };
    let mode = match opts.algorithm {
        Algorithm::Svi(_) => BatchMode::SampleWithReplacement,
        _ => BatchMode::FixedPartition,
    };
    let mut batcher = Batcher::new(n, b, mode, opts.seed)?;
    let mut warm: Option<WarmStore> = opts.warm_start.then(|| vec![None; n]);
    let mut g = init;
    let mut trace = Trace::default();
    let mut t: u64 = 0;

    let mut cache = match opts.algorithm {
        Algorithm::Svi(_) => None,
        _ => Some(MemoCache::new(model, b)),
    };

    for lap in 0..opts.laps {
        let started = Instant::now();
        let exp_before = counters::exp_calls();
        let mut lap_diag = LocalDiag::default();
        let mut last_rho = 1.0;
        let mut svi_stats: Option<M::Stats> = None;

        for bi in 0..b {
            let batch = batcher.batch(bi);
            let diag = match (&opts.algorithm, cache.as_mut()) {
                (Algorithm::Svi(sched), _) => {
                    let (g_new, stats, diag) =
                        svi_step(model, t, &batch, &g, sched, warm.as_ref())?;
                    last_rho = sched.rho(t);
                    g = g_new;
                    svi_stats = Some(stats);
                    diag
                }
                (_, Some(cache)) => {
                    let (g_new, diag) = mvi_step(model, bi, &batch, &g, cache, warm.as_ref())?;
                    g = g_new;
                    diag
                }
                _ => unreachable!("memoized algorithms always build a cache"),
            };
            if let Some(store) = warm.as_mut() {
                for (d, counts) in &diag.warm_updates {
                    store[*d] = Some(counts.clone());
                }
            }
            lap_diag.n_restart_proposals += diag.n_restart_proposals;
            lap_diag.n_restart_accepts += diag.n_restart_accepts;
            t += 1;
        }

        let elbo = match (&opts.algorithm, cache.as_ref(), svi_stats.as_ref()) {
            (Algorithm::Svi(_), _, Some(stats)) => model.elbo(stats, &g),
            (_, Some(cache), _) => model.elbo(cache.aggregate(), &g),
            _ => f64::NAN,
        };
        let heldout = heldout_hook(&g);
        let elapsed_sec = if opts.deterministic {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        };
        trace.rows.push(TraceRow {
            lap: lap as u64,
            t,
            rho: last_rho,
            elapsed_sec,
            elbo,
            heldout,
            n_exp_calls: counters::exp_calls().saturating_sub(exp_before),
            n_restart_accepts: lap_diag.n_restart_accepts,
            n_restart_proposals: lap_diag.n_restart_proposals,
        });
    }
    Ok((g, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DenseDataset;
    use crate::expfam::{GaussianFamily, WishartPrior};
    use crate::linalg::SquareMat;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_model(k: usize, d: usize) -> MixtureModel<GaussianFamily> {
        let prior = WishartPrior::from_inverse_scale(
            d as f64 + 2.0,
            SquareMat::scaled_identity(d, d as f64 + 2.0),
        )
        .unwrap();
        MixtureModel::new(k, 10.0, GaussianFamily { prior })
    }

    fn synthetic_blobs(n: usize, d: usize, k: usize, seed: u64) -> DenseDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scales: Vec<f64> = (0..k).map(|i| 0.3 + 1.5 * (i as f64 / k as f64)).collect();
        let mut rows = Vec::with_capacity(n * d);
        for _ in 0..n {
            let c = rng.gen_range(0..k);
            for _ in 0..d {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                rows.push(z * scales[c]);
            }
        }
        DenseDataset::new(n, d, rows)
    }

    fn initial_state(
        model: &MixtureModel<GaussianFamily>,
        data: &DenseDataset,
        seed: u64,
    ) -> MixGlobalState<crate::expfam::WishartPosterior> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stats = model.zero_stats();
        for k in 0..model.k {
            let idx = rng.gen_range(0..data.n_obs);
            stats.n[k] = 1.0;
            stats.s[k].add_outer(data.row(idx), 1.0);
        }
        stats.count_obs = model.k as f64;
        model.global_step(&stats).unwrap()
    }

    #[test]
    fn learning_rate_schedule_values_and_validation() {
        let s = LearningRateSchedule::new(1.0, 0.55).unwrap();
        assert!((s.rho(0) - 1.0).abs() < 1e-15);
        assert!((s.rho(3) - 4f64.powf(-0.55)).abs() < 1e-15);
        assert!((s.rho(3) - 0.46651649576840366).abs() < 1e-12);
        assert!(LearningRateSchedule::new(1.0, 0.5).is_err());
        assert!(LearningRateSchedule::new(1.0, 1.01).is_err());
        assert!(LearningRateSchedule::new(0.5, 0.55).is_err());
        // Decreasing, bounded by 1, for every grid setting.
        for (delta, kappa) in [(1.0, 0.55), (10.0, 0.65), (1.0, 1.0), (10.0, 0.55)] {
            let s = LearningRateSchedule::new(delta, kappa).unwrap();
            let mut prev = f64::INFINITY;
            for t in 0..50 {
                let r = s.rho(t);
                assert!(r > 0.0 && r <= 1.0);
                assert!(r < prev);
                prev = r;
            }
        }
    }

    #[test]
    fn svi_step_with_rho_one_is_cold_overwrite() {
        let data = synthetic_blobs(60, 2, 3, 1);
        let model = gaussian_model(3, 2);
        let pipeline = MixturePipeline {
            model: &model,
            data: &data,
            sparsity: Sparsity::Dense,
            reduction: Reduction::Ordered,
        };
        let g0 = initial_state(&model, &data, 7);
        let sched = LearningRateSchedule::new(1.0, 0.55).unwrap();
        let batch: Vec<usize> = (0..20).collect();
        // t = 0 gives rho = 1: the blend equals a full global step on the
        // rescaled batch statistics.
        let (g1, stats, _) = svi_step(&pipeline, 0, &batch, &g0, &sched, None).unwrap();
        let direct = model.global_step(&stats).unwrap();
        for (a, b) in g1.theta_hat.iter().zip(direct.theta_hat.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (pa, pb) in g1.posteriors.iter().zip(direct.posteriors.iter()) {
            assert!((pa.nu_hat - pb.nu_hat).abs() < 1e-10);
            for (x, y) in pa
                .lambda_hat_inv
                .data()
                .iter()
                .zip(pb.lambda_hat_inv.data().iter())
            {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn svi_blend_with_rho_zero_is_identity() {
        let data = synthetic_blobs(30, 2, 2, 2);
        let model = gaussian_model(2, 2);
        let pipeline = MixturePipeline {
            model: &model,
            data: &data,
            sparsity: Sparsity::Dense,
            reduction: Reduction::Ordered,
        };
        let g0 = initial_state(&model, &data, 8);
        let (stats, _) = pipeline
            .local_summary(&(0..30).collect::<Vec<_>>(), &g0, None)
            .unwrap();
        let g1 = pipeline.svi_blend(&g0, &stats, 0.0).unwrap();
        for (a, b) in g0.theta_hat.iter().zip(g1.theta_hat.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn svi_rejects_empty_batch() {
        let data = synthetic_blobs(10, 2, 2, 3);
        let model = gaussian_model(2, 2);
        let pipeline = MixturePipeline {
            model: &model,
            data: &data,
            sparsity: Sparsity::Dense,
            reduction: Reduction::Ordered,
        };
        let g0 = initial_state(&model, &data, 9);
        let sched = LearningRateSchedule::new(1.0, 0.55).unwrap();
        assert!(svi_step(&pipeline, 0, &[], &g0, &sched, None).is_err());
    }

    #[test]
    fn mvi_first_lap_telescopes_to_full_dataset_stats() {
        let data = synthetic_blobs(100, 2, 3, 4);
        let model = gaussian_model(3, 2);
        let pipeline = MixturePipeline {
            model: &model,
            data: &data,
            sparsity: Sparsity::Dense,
            reduction: Reduction::Ordered,
        };
        let mut g = initial_state(&model, &data, 10);
        let mut batcher = Batcher::new(100, 4, BatchMode::FixedPartition, 0).unwrap();
        let mut cache = MemoCache::new(&pipeline, 4);
        let mut states = Vec::new();
        for b in 0..4 {
            let batch = batcher.batch(b);
            states.push(g.clone());
            let (g_new, _) = mvi_step(&pipeline, b, &batch, &g, &mut cache, None).unwrap();
            g = g_new;
        }
        // Aggregate equals the sum of per-batch stats computed at the states
        // each batch actually saw.
        let mut want = pipeline.zero_stats();
        for b in 0..4 {
            let batch: Vec<usize> = (b * 25..(b + 1) * 25).collect();
            let (stats, _) = pipeline.local_summary(&batch, &states[b], None).unwrap();
            pipeline.merge_stats(&mut want, &stats);
        }
        let agg = cache.aggregate();
        assert!((agg.count_obs - 100.0).abs() < 1e-9);
        for (a, b) in agg.n.iter().zip(want.n.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mvi_aggregate_matches_from_scratch_after_laps() {
        let data = synthetic_blobs(80, 2, 3, 5);
        let model = gaussian_model(3, 2);
        let pipeline = MixturePipeline {
            model: &model,
            data: &data,
            sparsity: Sparsity::TopL(2),
            reduction: Reduction::Ordered,
        };
        let mut g = initial_state(&model, &data, 11);
        let mut batcher = Batcher::new(80, 4, BatchMode::FixedPartition, 0).unwrap();
        let mut cache = MemoCache::new(&pipeline, 4);
        for _lap in 0..5 {
            for b in 0..4 {
                let batch = batcher.batch(b);
                let (g_new, _) = mvi_step(&pipeline, b, &batch, &g, &mut cache, None).unwrap();
                g = g_new;
            }
        }
        // From-scratch re-aggregation of the stored per-batch stats.
        let mut fresh = pipeline.zero_stats();
        for b in 0..4 {
            pipeline.merge_stats(&mut fresh, cache.batch_stats(b).unwrap());
        }
        let agg = cache.aggregate();
        for (a, b) in agg.n.iter().zip(fresh.n.iter()) {
            let denom = b.abs().max(1.0);
            assert!((a - b).abs() / denom < 1e-9, "{a} vs {b}");
        }
        assert!((agg.entropy - fresh.entropy).abs() / fresh.entropy.abs().max(1.0) < 1e-9);
    }

    #[test]
    fn mvi_two_batch_hand_ledger() {
        let data = synthetic_blobs(20, 1, 2, 6);
        let model = gaussian_model(2, 1);
        let pipeline = MixturePipeline {
            model: &model,
            data: &data,
            sparsity: Sparsity::Dense,
            reduction: Reduction::Ordered,
        };
        let g0 = initial_state(&model, &data, 12);
        let batch0: Vec<usize> = (0..10).collect();
        let batch1: Vec<usize> = (10..20).collect();
        let mut cache = MemoCache::new(&pipeline, 2);

        // Visit 0 under g0.
        let (g1, _) = mvi_step(&pipeline, 0, &batch0, &g0, &mut cache, None).unwrap();
        let (s0_at_g0, _) = pipeline.local_summary(&batch0, &g0, None).unwrap();
        for (a, b) in cache.aggregate().n.iter().zip(s0_at_g0.n.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Visit 1 under g1.
        let (g2, _) = mvi_step(&pipeline, 1, &batch1, &g1, &mut cache, None).unwrap();
        let (s1_at_g1, _) = pipeline.local_summary(&batch1, &g1, None).unwrap();
        // Re-visit 0 under g2: ledger says aggregate = s0(g2) + s1(g1).
        let (_g3, _) = mvi_step(&pipeline, 0, &batch0, &g2, &mut cache, None).unwrap();
        let (s0_at_g2, _) = pipeline.local_summary(&batch0, &g2, None).unwrap();
        let mut want = pipeline.zero_stats();
        pipeline.merge_stats(&mut want, &s0_at_g2);
        pipeline.merge_stats(&mut want, &s1_at_g1);
        for (a, b) in cache.aggregate().n.iter().zip(want.n.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        // Unknown batch id errors.
        assert!(mvi_step(&pipeline, 7, &batch0, &g2, &mut cache, None).is_err());
    }

    #[test]
    fn mvi_revisit_never_lowers_objective() {
        let data = synthetic_blobs(40, 2, 2, 7);
        let model = gaussian_model(2, 2);
        let pipeline = MixturePipeline {
            model: &model,
            data: &data,
            sparsity: Sparsity::Dense,
            reduction: Reduction::Ordered,
        };
        let batch: Vec<usize> = (0..40).collect();
        let mut cache = MemoCache::new(&pipeline, 1);
        let g0 = initial_state(&model, &data, 13);
        let (g1, _) = mvi_step(&pipeline, 0, &batch, &g0, &mut cache, None).unwrap();
        let e1 = pipeline.elbo(cache.aggregate(), &g1);
        let (stats_again, _) = pipeline.local_summary(&batch, &g1, None).unwrap();
        cache.replace(&pipeline, 0, stats_again).unwrap();
        let g2 = pipeline.global_step(cache.aggregate()).unwrap();
        let e2 = pipeline.elbo(cache.aggregate(), &g2);
        assert!(
            e2 >= e1 - 1e-9,
            "revisit lowered the objective: {e1} -> {e2}"
        );
    }

    #[test]
    fn run_zero_laps_empty_trace() {
        let data = synthetic_blobs(10, 1, 1, 8);
        let model = gaussian_model(1, 1);
        let pipeline = MixturePipeline {
            model: &model,
            data: &data,
            sparsity: Sparsity::Dense,
            reduction: Reduction::Ordered,
        };
        let opts = TrainOpts {
            algorithm: Algorithm::Mvi,
            n_batches: 2,
            laps: 0,
            seed: 0,
            deterministic: true,
            warm_start: false,
        };
        let g0 = initial_state(&model, &data, 14);
        let (_g, trace) = run(&pipeline, &opts, g0, |_| None).unwrap();
        assert!(trace.rows.is_empty());
    }

    #[test]
    fn run_mvi_dense_elbo_is_monotone() {
        let data = synthetic_blobs(400, 2, 4, 9);
        let model = gaussian_model(4, 2);
        let pipeline = MixturePipeline {
            model: &model,
            data: &data,
            sparsity: Sparsity::Dense,
            reduction: Reduction::Ordered,
        };
        let opts = TrainOpts {
            algorithm: Algorithm::Mvi,
            n_batches: 4,
            laps: 10,
            seed: 3,
            deterministic: true,
            warm_start: false,
        };
        let g0 = initial_state(&model, &data, 15);
        let (_g, trace) = run(&pipeline, &opts, g0, |_| None).unwrap();
        assert_eq!(trace.rows.len(), 10);
        for w in trace.rows.windows(2) {
            let (a, b) = (w[0].elbo, w[1].elbo);
            assert!(
                b >= a - 1e-8 * a.abs().max(1.0),
                "ELBO decreased: {a} -> {b}"
            );
        }
    }

    #[test]
    fn run_mvi_sparse_elbo_is_monotone() {
        // The sparse local step is still the exact constrained optimum, so
        // memoized ascent on the L-constrained objective stays monotone.
        let data = synthetic_blobs(300, 2, 4, 21);
        let model = gaussian_model(4, 2);
        let pipeline = MixturePipeline {
            model: &model,
            data: &data,
            sparsity: Sparsity::TopL(2),
            reduction: Reduction::Ordered,
        };
        let opts = TrainOpts {
            algorithm: Algorithm::Mvi,
            n_batches: 3,
            laps: 12,
            seed: 21,
            deterministic: true,
            warm_start: false,
        };
        let g0 = initial_state(&model, &data, 22);
        let (_g, trace) = run(&pipeline, &opts, g0, |_| None).unwrap();
        for w in trace.rows.windows(2) {
            let (a, b) = (w[0].elbo, w[1].elbo);
            assert!(
                b >= a - 1e-8 * a.abs().max(1.0),
                "constrained ELBO decreased: {a} -> {b}"
            );
        }
    }

    #[test]
    fn deterministic_runs_are_bit_identical() {
        // The exp counter is process-global, so concurrently running tests
        // perturb its per-lap deltas; full byte identity of the metrics file
        // is asserted at the CLI level where each run owns its process. Here
        // every other field must match bitwise.
        let data = synthetic_blobs(120, 2, 3, 10);
        let model = gaussian_model(3, 2);
        let mut traces = Vec::new();
        for _ in 0..2 {
            let pipeline = MixturePipeline {
                model: &model,
                data: &data,
                sparsity: Sparsity::TopL(2),
                reduction: Reduction::Ordered,
            };
            let opts = TrainOpts {
                algorithm: Algorithm::Svi(LearningRateSchedule::new(1.0, 0.55).unwrap()),
                n_batches: 3,
                laps: 4,
                seed: 42,
                deterministic: true,
                warm_start: false,
            };
            let g0 = initial_state(&model, &data, 16);
            let (_g, mut trace) = run(&pipeline, &opts, g0, |_| None).unwrap();
            for row in trace.rows.iter_mut() {
                row.n_exp_calls = 0;
            }
            traces.push(trace.to_jsonl());
        }
        assert_eq!(traces[0], traces[1]);
    }

    #[test]
    fn trace_jsonl_roundtrip() {
        let trace = Trace {
            rows: vec![TraceRow {
                lap: 0,
                t: 4,
                rho: 0.5,
                elapsed_sec: 0.0,
                elbo: -123.456,
                heldout: Some(-7.8),
                n_exp_calls: 999,
                n_restart_accepts: 1,
                n_restart_proposals: 5,
            }],
        };
        let text = trace.to_jsonl();
        let back = Trace::from_jsonl(&text).unwrap();
        assert_eq!(back.rows.len(), 1);
        assert_eq!(back.rows[0].t, 4);
        assert_eq!(back.rows[0].heldout, Some(-7.8));
    }

    #[test]
    fn lda_pipeline_runs_and_reports_restart_counters() {
        use crate::eval::synthetic_corpus;
        use crate::lda::{lda_prior_state, LdaModel, LocalStepConfig};
        let corpus = synthetic_corpus(30, 20, 40, 4, 1.0, 18);
        let model = LdaModel {
            k: 4,
            vocab_size: 20,
            alpha: 0.5,
            lambda_bar: 0.1,
        };
        let pipeline = LdaPipeline {
            model: &model,
            corpus: &corpus,
            cfg: LocalStepConfig {
                sparsity: Sparsity::TopL(2),
                restarts_enabled: true,
                warm_start: true,
                ..Default::default()
            },
            reduction: Reduction::Ordered,
        };
        let opts = TrainOpts {
            algorithm: Algorithm::Mvi,
            n_batches: 3,
            laps: 4,
            seed: 18,
            deterministic: true,
            warm_start: true,
        };
        let g0 = lda_prior_state(&model).unwrap();
        let (g, trace) = run(&pipeline, &opts, g0, |_| Some(-1.0)).unwrap();
        assert_eq!(trace.rows.len(), 4);
        assert!(trace.rows.iter().all(|r| r.elbo.is_finite()));
        assert!(trace.rows.iter().all(|r| r.heldout == Some(-1.0)));
        let proposals: u64 = trace.rows.iter().map(|r| r.n_restart_proposals).sum();
        assert!(proposals > 0, "restarts enabled but never proposed");
        // Topics absorbed the corpus mass.
        let mass: f64 = g.topics.iter().flat_map(|t| t.lambda_hat.iter()).sum();
        let total_tokens: f64 = corpus.docs.iter().map(|d| d.n_tokens).sum();
        assert!((mass - (total_tokens + 4.0 * 20.0 * 0.1)).abs() < 1e-6);
    }

    #[test]
    fn full_algorithm_equals_manual_coordinate_ascent() {
        let data = synthetic_blobs(50, 2, 2, 11);
        let model = gaussian_model(2, 2);
        let pipeline = MixturePipeline {
            model: &model,
            data: &data,
            sparsity: Sparsity::Dense,
            reduction: Reduction::Ordered,
        };
        let g0 = initial_state(&model, &data, 17);
        let opts = TrainOpts {
            algorithm: Algorithm::Full,
            n_batches: 5, // ignored by Full
            laps: 3,
            seed: 1,
            deterministic: true,
            warm_start: false,
        };
        let (g_run, trace) = run(&pipeline, &opts, g0.clone(), |_| None).unwrap();
        let idx: Vec<usize> = (0..50).collect();
        let mut g = g0;
        let mut last_elbo = f64::NAN;
        for _ in 0..3 {
            let (stats, _) = pipeline.local_summary(&idx, &g, None).unwrap();
            g = pipeline.global_step(&stats).unwrap();
            last_elbo = pipeline.elbo(&stats, &g);
        }
        assert!((trace.rows.last().unwrap().elbo - last_elbo).abs() < 1e-9);
        for (a, b) in g_run.theta_hat.iter().zip(g.theta_hat.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
