//! Responsibility vectors: dense and L-sparse solutions of the per-observation
//! objective `Σ_k r_k W_k − r_k ln r_k` on the simplex, plus the distance and
//! entropy helpers used by evaluation.
//!
//! Weights are log posterior weights in nats. `-inf` entries are legal and
//! mean "cluster excluded"; NaN is rejected. All exponentiations are
//! max-shifted so weights at realistic scales (log Gaussian densities at
//! D = 64) cannot overflow.

use crate::counters;
use crate::error::{Error, Result};
use crate::selection::select_top_l;

/// Dense responsibility vector: non-negative, sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseResp {
    pub r: Vec<f64>,
}

/// L-sparse responsibility vector over `k` clusters: `values[i]` is the
/// responsibility of cluster `indices[i]`, everything else is zero.
/// Indices are distinct and ordered by (value descending, index ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseResp {
    pub values: Vec<f64>,
    pub indices: Vec<usize>,
    pub k: usize,
}

/// Either representation, as produced by a local step.
#[derive(Debug, Clone)]
pub enum Resp {
    Dense(DenseResp),
    Sparse(SparseResp),
}

impl DenseResp {
    pub fn entropy(&self) -> f64 {
        entropy(self.r.iter().copied())
    }
}

impl SparseResp {
    pub fn entropy(&self) -> f64 {
        entropy(self.values.iter().copied())
    }

    pub fn len_support(&self) -> usize {
        self.indices.len()
    }
}

impl Resp {
    pub fn k(&self) -> usize {
        match self {
            Resp::Dense(d) => d.r.len(),
            Resp::Sparse(s) => s.k,
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            Resp::Dense(d) => d.entropy(),
            Resp::Sparse(s) => s.entropy(),
        }
    }

    /// Visits the non-zero support as `(cluster, responsibility)` pairs.
    /// Dense responsibilities visit every cluster.
    pub fn for_support(&self, mut f: impl FnMut(usize, f64)) {
        match self {
            Resp::Dense(d) => {
                for (k, &v) in d.r.iter().enumerate() {
                    f(k, v);
                }
            }
            Resp::Sparse(s) => {
                for (&i, &v) in s.indices.iter().zip(s.values.iter()) {
                    f(i, v);
                }
            }
        }
    }

    pub fn to_dense(&self) -> DenseResp {
        match self {
            Resp::Dense(d) => d.clone(),
            Resp::Sparse(s) => densify(s),
        }
    }
}

/// Optimal dense responsibilities for the given log weights: softmax with a
/// max shift. Exactly `K` exp evaluations.
pub fn dense_resp_from_weights(weights: &[f64]) -> Result<DenseResp> {
    let mut r = vec![0.0; weights.len()];
    dense_resp_from_weights_into(weights, &mut r)?;
    Ok(DenseResp { r })
}

/// In-place variant writing into a caller-owned buffer of the same length.
pub fn dense_resp_from_weights_into(weights: &[f64], out: &mut [f64]) -> Result<()> {
    debug_assert_eq!(weights.len(), out.len());
    let mut max = f64::NEG_INFINITY;
    for &w in weights {
        if w.is_nan() {
            return Err(Error::arg("weight vector contains NaN"));
        }
        if w > max {
            max = w;
        }
    }
    if !max.is_finite() {
        return Err(Error::Degenerate(
            "all weights are -inf; no cluster can take responsibility".into(),
        ));
    }
    let mut sum = 0.0;
    for (o, &w) in out.iter_mut().zip(weights.iter()) {
        let e = (w - max).exp();
        *o = e;
        sum += e;
    }
    counters::add_exp_calls(weights.len() as u64);
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

/// Optimal L-sparse responsibilities: the support is the top-L weights (ties
/// to the smaller index), values are the normalized exponentials at those
/// indices. Exactly `L` exp evaluations after the O(K) selection.
pub fn top_l_resp_from_weights(weights: &[f64], l: usize) -> Result<SparseResp> {
    let k = weights.len();
    if l == 0 || l > k {
        return Err(Error::arg(format!(
            "sparsity level L = {l} out of range 1..={k}"
        )));
    }
    let mut n_finite = 0usize;
    for &w in weights {
        if w.is_nan() {
            return Err(Error::arg("weight vector contains NaN"));
        }
        if w.is_finite() {
            n_finite += 1;
        }
    }
    if n_finite < l {
        return Err(Error::Degenerate(format!(
            "only {n_finite} finite weights but L = {l}; shrink L to the finite count"
        )));
    }
    let selected = select_top_l(weights, l)?;
    let indices = selected.indices;
    // Indices are sorted by descending value, so the shift is the first one.
    let max = weights[indices[0]];
    // The normalization sum accumulates in ascending index order — the same
    // order the dense update uses — so L = K reproduces the dense values
    // bit for bit.
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_unstable_by_key(|&pos| indices[pos]);
    let mut values = vec![0.0; l];
    let mut sum = 0.0;
    for &pos in &order {
        let e = (weights[indices[pos]] - max).exp();
        values[pos] = e;
        sum += e;
    }
    counters::add_exp_calls(l as u64);
    for v in values.iter_mut() {
        *v /= sum;
    }
    Ok(SparseResp { values, indices, k })
}

/// Expands a sparse responsibility into its implied dense vector.
pub fn densify(s: &SparseResp) -> DenseResp {
    let mut r = vec![0.0; s.k];
    for (&i, &v) in s.indices.iter().zip(s.values.iter()) {
        r[i] = v;
    }
    DenseResp { r }
}

/// Total variation distance `0.5 Σ_k |a_k − b_k|` between two distributions
/// over the same clusters.
pub fn total_variation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(0.5
        * a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>())
}

/// Shannon entropy `−Σ p ln p` with the convention `0 ln 0 = 0`.
pub fn entropy(probs: impl IntoIterator<Item = f64>) -> f64 {
    let mut h = 0.0;
    for p in probs {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// The per-observation objective `Σ_k r_k (W_k − ln r_k)` restricted to the
/// responsibility's support. At the optimum over a support S this equals
/// `ln Σ_{k∈S} exp W_k`.
pub fn resp_objective(weights: &[f64], resp: &Resp) -> f64 {
    let mut obj = 0.0;
    resp.for_support(|k, r| {
        if r > 0.0 {
            obj += r * (weights[k] - r.ln());
        }
    });
    obj
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn logsumexp(ws: &[f64]) -> f64 {
        let max = ws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + ws.iter().map(|w| (w - max).exp()).sum::<f64>().ln()
    }

    /// Brute force: best restricted-softmax objective over all C(K, L)
    /// supports, which is max over supports of logsumexp of the weights.
    fn brute_force_best(weights: &[f64], l: usize) -> f64 {
        let k = weights.len();
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << k) {
            if mask.count_ones() as usize != l {
                continue;
            }
            let sel: Vec<f64> = (0..k)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| weights[i])
                .collect();
            if sel.iter().any(|w| !w.is_finite()) {
                continue;
            }
            best = best.max(logsumexp(&sel));
        }
        best
    }

    #[test]
    fn dense_symmetry_and_analytic_cases() {
        for c in [0.0, 12.5, -400.0] {
            let d = dense_resp_from_weights(&[c; 4]).unwrap();
            for &r in &d.r {
                assert!((r - 0.25).abs() < 1e-15);
            }
        }
        let d = dense_resp_from_weights(&[0.0, 2f64.ln(), 4f64.ln()]).unwrap();
        let want = [1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0];
        for (got, want) in d.r.iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn dense_is_stable_at_large_weights() {
        let d = dense_resp_from_weights(&[1000.0, 1001.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((d.r[0] - 1.0 / (1.0 + e)).abs() < 1e-14);
        assert!((d.r[1] - e / (1.0 + e)).abs() < 1e-14);
        let sum: f64 = d.r.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dense_error_paths() {
        assert!(matches!(
            dense_resp_from_weights(&[f64::NEG_INFINITY; 3]),
            Err(Error::Degenerate(_))
        ));
        assert!(dense_resp_from_weights(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn top_l_analytic_case() {
        let s = top_l_resp_from_weights(&[0.0, 2f64.ln(), 4f64.ln()], 2).unwrap();
        assert_eq!(s.indices, vec![2, 1]);
        assert!((s.values[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((s.values[1] - 1.0 / 3.0).abs() < 1e-14);
        assert_eq!(s.k, 3);
    }

    #[test]
    fn top_l_with_l_equal_k_matches_dense_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let k = rng.gen_range(1..12);
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let dense = dense_resp_from_weights(&w).unwrap();
            let sparse = top_l_resp_from_weights(&w, k).unwrap();
            let as_dense = densify(&sparse);
            for (a, b) in dense.r.iter().zip(as_dense.r.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn top_l_degenerate_and_argument_errors() {
        let w = [1.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert!(top_l_resp_from_weights(&w, 1).is_ok());
        assert!(matches!(
            top_l_resp_from_weights(&w, 2),
            Err(Error::Degenerate(_))
        ));
        assert!(top_l_resp_from_weights(&w, 0).is_err());
        assert!(top_l_resp_from_weights(&w, 4).is_err());
        assert!(top_l_resp_from_weights(&[f64::NAN, 1.0], 1).is_err());
    }

    #[test]
    fn neg_infinity_never_selected_while_finite_remain() {
        let w = [f64::NEG_INFINITY, 3.0, f64::NEG_INFINITY, 1.0, 2.0];
        let s = top_l_resp_from_weights(&w, 3).unwrap();
        assert_eq!(s.indices, vec![1, 4, 3]);
    }

    #[test]
    fn objective_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let k = rng.gen_range(2..=8);
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let l = rng.gen_range(1..=4.min(k));
            let s = top_l_resp_from_weights(&w, l).unwrap();
            let obj = resp_objective(&w, &Resp::Sparse(s));
            let best = brute_force_best(&w, l);
            assert!(
                (obj - best).abs() < 1e-9,
                "objective {obj} vs brute force {best} (k={k}, l={l})"
            );
        }
    }

    #[test]
    fn swap_identity_from_optimality_proof() {
        // For the optimal support: moving in-support index j's mass onto an
        // out-of-support index k lowers the objective by exactly
        // r_j (W_j − W_k), which is non-negative.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let k = rng.gen_range(3..=8);
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let l = rng.gen_range(1..k);
            let s = top_l_resp_from_weights(&w, l).unwrap();
            let base = resp_objective(&w, &Resp::Sparse(s.clone()));
            for pos in 0..l {
                let j = s.indices[pos];
                for out in 0..k {
                    if s.indices.contains(&out) {
                        continue;
                    }
                    let mut swapped = s.clone();
                    swapped.indices[pos] = out;
                    let new_obj = resp_objective(&w, &Resp::Sparse(swapped));
                    let predicted_drop = s.values[pos] * (w[j] - w[out]);
                    assert!(
                        (base - new_obj - predicted_drop).abs() < 1e-10,
                        "swap identity violated"
                    );
                    assert!(predicted_drop >= -1e-15, "swap improved the objective");
                }
            }
        }
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let k = rng.gen_range(2..16);
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let c = rng.gen_range(-500.0..500.0);
            let shifted: Vec<f64> = w.iter().map(|x| x + c).collect();
            let l = rng.gen_range(1..=k);
            let a = top_l_resp_from_weights(&w, l).unwrap();
            let b = top_l_resp_from_weights(&shifted, l).unwrap();
            assert_eq!(a.indices, b.indices);
            // Rounding of w + c perturbs weight differences by up to
            // 2·ulp(|c|) ≈ 1.1e-13 at |c| = 500; that, not the algorithm,
            // bounds how closely the shifted values can agree.
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                assert!((x - y).abs() < 2e-13);
            }
        }
    }

    #[test]
    fn support_nesting_in_l() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..100 {
            let k = rng.gen_range(2..12);
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0..4) as f64).collect();
            for l in 1..k {
                let small = top_l_resp_from_weights(&w, l).unwrap();
                let large = top_l_resp_from_weights(&w, l + 1).unwrap();
                assert!(small.indices.iter().all(|i| large.indices.contains(i)));
            }
        }
    }

    #[test]
    fn exp_call_counts_are_exact() {
        let w: Vec<f64> = (0..37).map(|i| (i as f64 * 0.7).sin()).collect();
        let before = counters::thread_exp_calls();
        dense_resp_from_weights(&w).unwrap();
        assert_eq!(counters::thread_exp_calls() - before, 37);
        let before = counters::thread_exp_calls();
        top_l_resp_from_weights(&w, 5).unwrap();
        assert_eq!(counters::thread_exp_calls() - before, 5);
    }

    #[test]
    fn densify_and_roundtrip() {
        let s = SparseResp {
            values: vec![1.0],
            indices: vec![3],
            k: 5,
        };
        assert_eq!(densify(&s).r, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        let s = SparseResp {
            values: vec![0.6, 0.4],
            indices: vec![0, 2],
            k: 3,
        };
        let d = densify(&s);
        assert_eq!(d.r, vec![0.6, 0.0, 0.4]);
        // Re-extract the support.
        let support: Vec<(usize, f64)> =
            d.r.iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(i, &v)| (i, v))
                .collect();
        assert_eq!(support, vec![(0, 0.6), (2, 0.4)]);
    }

    #[test]
    fn total_variation_cases() {
        assert_eq!(total_variation(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let tv = total_variation(&[0.7, 0.2, 0.1], &[1.0, 0.0, 0.0]).unwrap();
        assert!((tv - 0.3).abs() < 1e-15);
        let tv = total_variation(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((tv - 1.0).abs() < 1e-15);
        assert!(total_variation(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy([0.0, 1.0, 0.0].into_iter()), 0.0);
        let h = entropy([0.25; 4].into_iter());
        assert!((h - 4f64.ln()).abs() < 1e-14);
        let h = entropy([2.0 / 3.0, 1.0 / 3.0].into_iter());
        assert!((h - 0.6365141682948128).abs() < 1e-12);
    }
}
