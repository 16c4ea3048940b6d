//! Model initialization by diverse seeding: k-means++-style selection where
//! each next seed is drawn with probability proportional to its divergence
//! from the closest already-chosen seed (squared Euclidean for observations,
//! smoothed KL for documents), then per-cluster posteriors are built from
//! each seed's statistics plus the prior.

use rand::Rng;

use crate::data::{Corpus, DenseDataset};
use crate::error::{Error, Result};
use crate::expfam::{categorical_global_update, GaussianFamily, ObsFamily, WishartPosterior};
use crate::lda::{LdaGlobalState, LdaModel};
use crate::mixture::{MixGlobalState, MixtureModel};

/// Weighted draw over non-negative weights. A zero total falls back to a
/// uniform draw over the not-yet-chosen units (only reachable when every
/// remaining unit exactly duplicates a chosen seed).
fn weighted_draw(weights: &[f64], chosen: &[bool], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        let mut u = rng.gen_range(0.0..total);
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                if u < w {
                    return i;
                }
                u -= w;
            }
        }
        // Rounding slipped past the end; take the last positive weight.
        weights.iter().rposition(|&w| w > 0.0).unwrap()
    } else {
        let remaining: Vec<usize> = (0..weights.len()).filter(|&i| !chosen[i]).collect();
        remaining[rng.gen_range(0..remaining.len())]
    }
}

/// Chooses `k` observation indices: first uniformly, then proportional to
/// squared Euclidean distance to the nearest chosen seed.
pub fn seed_gmm(data: &DenseDataset, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k == 0 || k > data.n_obs {
        return Err(Error::arg(format!(
            "need 1..={} seeds, asked for {k}",
            data.n_obs
        )));
    }
    let mut chosen = vec![false; data.n_obs];
    let mut seeds = Vec::with_capacity(k);
    let first = rng.gen_range(0..data.n_obs);
    seeds.push(first);
    chosen[first] = true;

    let mut min_d2 = vec![f64::INFINITY; data.n_obs];
    for _ in 1..k {
        let latest = data.row(*seeds.last().unwrap());
        for n in 0..data.n_obs {
            let x = data.row(n);
            let mut d2 = 0.0;
            for (a, b) in x.iter().zip(latest.iter()) {
                let diff = a - b;
                d2 += diff * diff;
            }
            if d2 < min_d2[n] {
                min_d2[n] = d2;
            }
        }
        let next = weighted_draw(&min_d2, &chosen, rng);
        seeds.push(next);
        chosen[next] = true;
    }
    Ok(seeds)
}

/// Global state from GMM seeds: cluster k gets `Λ̂⁻¹ = Λ̄⁻¹ + x_s x_sᵀ`,
/// `ν̂ = ν̄ + 1`, and a balanced frequency posterior.
pub fn init_gmm(
    model: &MixtureModel<GaussianFamily>,
    data: &DenseDataset,
    seeds: &[usize],
) -> Result<MixGlobalState<WishartPosterior>> {
    debug_assert_eq!(seeds.len(), model.k);
    let prior_theta = model.alpha / model.k as f64;
    let balanced = data.n_obs as f64 / model.k as f64;
    let theta = vec![prior_theta + balanced; model.k];
    let posteriors = seeds
        .iter()
        .map(|&s| {
            let mut stat = model.family.zero_stat();
            stat.add_outer(data.row(s), 1.0);
            model.family.global_update(1.0, &stat)
        })
        .collect::<Result<Vec<_>>>()?;
    MixGlobalState::new(theta, posteriors)
}

/// Smoothed per-document word distribution pieces used by the KL seeding.
struct DocDist {
    z: f64,
    neg_entropy: f64,
}

fn doc_dists(corpus: &Corpus, smoothing: f64) -> Vec<DocDist> {
    let v = corpus.vocab_size as f64;
    corpus
        .docs
        .iter()
        .map(|doc| {
            let z = doc.n_tokens + smoothing * v;
            let base = smoothing / z;
            let mut neg_entropy = (v - doc.n_types() as f64) * base * base.ln();
            for &c in &doc.counts {
                let p = (c + smoothing) / z;
                neg_entropy += p * p.ln();
            }
            DocDist { z, neg_entropy }
        })
        .collect()
}

/// KL(p_d ‖ p_s) between smoothed empirical word distributions, computed
/// without materializing dense vectors per document.
fn kl_to_seed(
    corpus: &Corpus,
    dists: &[DocDist],
    d: usize,
    log_p_s: &[f64],
    log_p_s_total: f64,
    smoothing: f64,
) -> f64 {
    let doc = &corpus.docs[d];
    let dist = &dists[d];
    let base = smoothing / dist.z;
    // Σ_v p_d(v) ln p_s(v) split into the smoothed floor plus corrections at
    // the document's support.
    let mut cross = base * log_p_s_total;
    for (&v, &c) in doc.word_ids.iter().zip(doc.counts.iter()) {
        let p = (c + smoothing) / dist.z;
        cross += (p - base) * log_p_s[v];
    }
    dist.neg_entropy - cross
}

/// Chooses `k` document indices: first uniformly, then proportional to the
/// KL divergence from each document's smoothed word distribution to the
/// nearest chosen seed's.
pub fn seed_lda(
    corpus: &Corpus,
    k: usize,
    smoothing: f64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let n = corpus.docs.len();
    if k == 0 || k > n {
        return Err(Error::arg(format!("need 1..={n} seeds, asked for {k}")));
    }
    if !(smoothing > 0.0) {
        return Err(Error::arg("seeding smoothing must be positive"));
    }
    let dists = doc_dists(corpus, smoothing);
    let mut chosen = vec![false; n];
    let mut seeds = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    seeds.push(first);
    chosen[first] = true;

    let mut min_div = vec![f64::INFINITY; n];
    for _ in 1..k {
        let s = *seeds.last().unwrap();
        // Dense log distribution of the latest seed.
        let sdoc = &corpus.docs[s];
        let z = dists[s].z;
        let base_log = (smoothing / z).ln();
        let mut log_p_s = vec![base_log; corpus.vocab_size];
        for (&v, &c) in sdoc.word_ids.iter().zip(sdoc.counts.iter()) {
            log_p_s[v] = ((c + smoothing) / z).ln();
        }
        let log_p_s_total: f64 = log_p_s.iter().sum();
        for d in 0..n {
            let div = kl_to_seed(corpus, &dists, d, &log_p_s, log_p_s_total, smoothing);
            if div < min_div[d] {
                min_div[d] = div.max(0.0);
            }
        }
        let next = weighted_draw(&min_div, &chosen, rng);
        seeds.push(next);
        chosen[next] = true;
    }
    Ok(seeds)
}

/// Topic posteriors from LDA seeds: topic k gets `λ̂_k = λ̄ + counts(doc_k)`.
pub fn init_lda(model: &LdaModel, corpus: &Corpus, seeds: &[usize]) -> Result<LdaGlobalState> {
    debug_assert_eq!(seeds.len(), model.k);
    let topics = seeds
        .iter()
        .map(|&s| {
            let doc = &corpus.docs[s];
            let mut counts = vec![0.0; model.vocab_size];
            for (&v, &c) in doc.word_ids.iter().zip(doc.counts.iter()) {
                counts[v] = c;
            }
            categorical_global_update(&counts, model.lambda_bar)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LdaGlobalState::new(topics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Document;
    use crate::expfam::WishartPrior;
    use crate::linalg::SquareMat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_seed_is_one_uniform_draw() {
        let data = DenseDataset::new(4, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seeds = seed_gmm(&data, 1, &mut rng).unwrap();
        assert_eq!(seeds.len(), 1);
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(seeds, seed_gmm(&data, 1, &mut rng2).unwrap());
    }

    #[test]
    fn duplicates_are_unselectable_while_distinct_rows_remain() {
        // Three distinct rows, each duplicated; k = 3 must pick one of each.
        let rows = vec![0.0, 0.0, 5.0, 5.0, -7.0, -7.0];
        let data = DenseDataset::new(6, 1, rows.clone());
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seeds = seed_gmm(&data, 3, &mut rng).unwrap();
            let mut values: Vec<f64> = seeds.iter().map(|&s| rows[s]).collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(values, vec![-7.0, 0.0, 5.0], "seed {seed}: {seeds:?}");
        }
        // Asking for more seeds than distinct rows falls back to uniform,
        // still returning the requested count.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seeds = seed_gmm(&data, 5, &mut rng).unwrap();
        assert_eq!(seeds.len(), 5);
        // But more seeds than observations is an error.
        assert!(seed_gmm(&data, 7, &mut rng).is_err());
    }

    #[test]
    fn gmm_init_builds_seeded_posteriors() {
        let data = DenseDataset::new(3, 1, vec![1.0, -2.0, 0.5]);
        let prior =
            WishartPrior::from_inverse_scale(3.0, SquareMat::from_rows(1, vec![1.0])).unwrap();
        let model = MixtureModel::new(2, 10.0, GaussianFamily { prior });
        let g = init_gmm(&model, &data, &[1, 0]).unwrap();
        // Cluster 0 seeded from row 1 (x = -2): lambda_inv = 1 + 4 = 5.
        assert!((g.posteriors[0].lambda_hat_inv.get(0, 0) - 5.0).abs() < 1e-12);
        assert!((g.posteriors[0].nu_hat - 4.0).abs() < 1e-12);
        assert!((g.posteriors[1].lambda_hat_inv.get(0, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lda_seeding_prefers_divergent_documents() {
        // Two tight groups of documents; the second seed should come from
        // the other group than the first nearly always.
        let docs = vec![
            Document::new(vec![0], vec![10.0]),
            Document::new(vec![0], vec![11.0]),
            Document::new(vec![1], vec![10.0]),
            Document::new(vec![1], vec![12.0]),
        ];
        let corpus = Corpus {
            docs,
            vocab_size: 2,
            n_skipped_empty: 0,
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seeds = seed_lda(&corpus, 2, 0.1, &mut rng).unwrap();
            let group = |d: usize| corpus.docs[d].word_ids[0];
            assert_ne!(group(seeds[0]), group(seeds[1]), "seed {seed}: {seeds:?}");
        }
    }

    #[test]
    fn lda_init_uses_seed_counts() {
        let docs = vec![
            Document::new(vec![0, 2], vec![3.0, 1.0]),
            Document::new(vec![1], vec![4.0]),
        ];
        let corpus = Corpus {
            docs,
            vocab_size: 3,
            n_skipped_empty: 0,
        };
        let model = LdaModel {
            k: 2,
            vocab_size: 3,
            alpha: 0.5,
            lambda_bar: 0.1,
        };
        let g = init_lda(&model, &corpus, &[0, 1]).unwrap();
        assert_eq!(g.topics[0].lambda_hat, vec![3.1, 0.1, 1.1]);
        assert_eq!(g.topics[1].lambda_hat, vec![0.1, 4.1, 0.1]);
    }

    #[test]
    fn seeding_is_deterministic() {
        let data = crate::eval::synthetic_gmm_data(100, 3, 4, 9);
        let a = seed_gmm(&data, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = seed_gmm(&data, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }
}
