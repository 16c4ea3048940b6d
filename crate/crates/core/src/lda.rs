//! Per-document local step for LDA — dense and L-sparse with active-set
//! tracking — plus restart proposals, the topic-model objective, and the
//! topic global step.
//!
//! The sparse step combines three mechanisms:
//!   * per-token responsibilities constrained to the top L weights;
//!   * an active set `A_d = {k : N_dk > eps}` that shrinks monotonically —
//!     once a topic's in-document mass decays, `psi(alpha/K)` is so negative
//!     (≈ −200 at realistic alpha/K) that it cannot win a selection again,
//!     so excluded topics are dropped from all loops;
//!   * a selection schedule: full top-L selection on early iterations, then
//!     only periodically, with frozen supports re-normalized against fresh
//!     weights in between.

use crate::data::{Corpus, Document};
use crate::error::{Error, Result};
use crate::expfam::{categorical_global_update, l_data_categorical, DirichletPosterior};
use crate::mixture::Sparsity;
use crate::resp::{dense_resp_from_weights_into, entropy, Resp, SparseResp};
use crate::special::{c_dir, c_dir_symmetric, digamma};

#[derive(Debug, Clone)]
pub struct LdaModel {
    pub k: usize,
    pub vocab_size: usize,
    pub alpha: f64,
    pub lambda_bar: f64,
}

impl LdaModel {
    pub fn alpha_k(&self) -> f64 {
        self.alpha / self.k as f64
    }
}

/// Topic posteriors plus the cached weight table
/// `C[v·K + k] = E_q[log φ_kv]`, laid out so one word's row is contiguous.
#[derive(Debug, Clone)]
pub struct LdaGlobalState {
    pub topics: Vec<DirichletPosterior>,
    pub c_table: Vec<f64>,
}

/// Anything that can serve per-word topic log-weights to the local step:
/// the trained global state (expected log probabilities under the topic
/// posteriors) or fixed point-estimate topics used for heldout scoring.
pub trait WeightTable: Sync {
    fn k(&self) -> usize;
    fn c_row(&self, v: usize) -> &[f64];
}

impl WeightTable for LdaGlobalState {
    fn k(&self) -> usize {
        self.topics.len()
    }

    fn c_row(&self, v: usize) -> &[f64] {
        LdaGlobalState::c_row(self, v)
    }
}

/// Fixed log-probability table `c[v·K + k] = ln φ̂_kv`.
#[derive(Debug, Clone)]
pub struct LogProbTable {
    pub k: usize,
    pub c: Vec<f64>,
}

impl LogProbTable {
    /// Builds from point-estimate topics (one probability row per topic).
    pub fn from_topic_rows(phi: &[Vec<f64>]) -> Self {
        let k = phi.len();
        let v = phi.first().map_or(0, |row| row.len());
        let mut c = vec![0.0; v * k];
        for (kk, row) in phi.iter().enumerate() {
            debug_assert_eq!(row.len(), v);
            for (vv, &p) in row.iter().enumerate() {
                c[vv * k + kk] = if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
            }
        }
        LogProbTable { k, c }
    }
}

impl WeightTable for LogProbTable {
    fn k(&self) -> usize {
        self.k
    }

    fn c_row(&self, v: usize) -> &[f64] {
        &self.c[v * self.k..(v + 1) * self.k]
    }
}

impl LdaGlobalState {
    pub fn new(topics: Vec<DirichletPosterior>) -> Self {
        let k = topics.len();
        let v = topics.first().map_or(0, |t| t.len());
        let mut c_table = vec![0.0; v * k];
        for (kk, topic) in topics.iter().enumerate() {
            debug_assert_eq!(topic.len(), v);
            for (vv, &e) in topic.e_log.iter().enumerate() {
                c_table[vv * k + kk] = e;
            }
        }
        LdaGlobalState { topics, c_table }
    }

    pub fn k(&self) -> usize {
        self.topics.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.topics.first().map_or(0, |t| t.len())
    }

    #[inline]
    pub fn c_row(&self, v: usize) -> &[f64] {
        let k = self.k();
        &self.c_table[v * k..(v + 1) * k]
    }

    /// Point-estimate topics `φ̂_kv = λ̂_kv / Σ_v λ̂_kv`, one row per topic.
    pub fn topic_means(&self) -> Vec<Vec<f64>> {
        self.topics.iter().map(|t| t.mean()).collect()
    }
}

/// When the sparse step re-runs top-L selection: always on iterations
/// `1..=initial`, afterwards on every `period`-th iteration.
#[derive(Debug, Clone, Copy)]
pub struct SelectionSchedule {
    pub initial: usize,
    pub period: usize,
}

impl Default for SelectionSchedule {
    fn default() -> Self {
        SelectionSchedule {
            initial: 5,
            period: 10,
        }
    }
}

impl SelectionSchedule {
    fn selects(&self, iter: usize) -> bool {
        iter <= self.initial || (self.period > 0 && iter % self.period == 0)
    }

    /// Selection on every iteration; used to reproduce the dense trajectory.
    pub fn always() -> Self {
        SelectionSchedule {
            initial: usize::MAX,
            period: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalStepConfig {
    pub sparsity: Sparsity,
    pub max_iters: usize,
    pub conv_threshold: f64,
    pub eps_active: f64,
    pub schedule: SelectionSchedule,
    pub restarts_enabled: bool,
    pub max_restart_proposals: usize,
    pub restart_forward_iters: usize,
    pub warm_start: bool,
}

impl Default for LocalStepConfig {
    fn default() -> Self {
        LocalStepConfig {
            sparsity: Sparsity::Dense,
            max_iters: 100,
            conv_threshold: 0.05,
            eps_active: 1e-8,
            schedule: SelectionSchedule::default(),
            restarts_enabled: true,
            max_restart_proposals: 5,
            restart_forward_iters: 2,
            warm_start: false,
        }
    }
}

/// Converged per-document variational state.
#[derive(Debug, Clone)]
pub struct DocState {
    /// One responsibility vector per unique word type, shared by all tokens
    /// of that type.
    pub resp: Vec<Resp>,
    pub theta_hat: Vec<f64>,
    pub doc_topic_counts: Vec<f64>,
    pub active_set: Vec<usize>,
    pub n_iters_used: usize,
    pub converged: bool,
    pub n_restart_proposals: u64,
    pub n_restart_accepts: u64,
}

#[inline]
fn psi(x: f64) -> f64 {
    digamma(x).expect("digamma argument must be positive")
}

/// Dense iterative local step (cold start unless `warm_counts` is given):
/// initialize responsibilities from the topic-word table alone, then
/// alternate the implicit-theta update `P_dk = psi(N_dk + alpha/K)` with the
/// responsibility update until the counts stop moving.
pub fn dense_step_for_doc(
    model: &LdaModel,
    doc: &Document,
    g: &impl WeightTable,
    cfg: &LocalStepConfig,
    warm_counts: Option<&[f64]>,
) -> DocState {
    let k = model.k;
    let ak = model.alpha_k();
    let u = doc.n_types();
    let mut resp: Vec<Vec<f64>> = vec![vec![0.0; k]; u];
    let mut n_prev = vec![0.0; k];

    match warm_counts {
        Some(prev) if prev.iter().any(|&x| x > 0.0) => n_prev.copy_from_slice(prev),
        _ => {
            for (uu, &v) in doc.word_ids.iter().enumerate() {
                dense_resp_from_weights_into(g.c_row(v), &mut resp[uu])
                    .expect("C table entries are finite");
            }
            accumulate_dense_counts(doc, &resp, &mut n_prev);
        }
    }

    let mut w = vec![0.0; k];
    let mut p = vec![0.0; k];
    let mut n = vec![0.0; k];
    let mut iters = 0;
    let mut converged = false;
    while iters < cfg.max_iters {
        iters += 1;
        for kk in 0..k {
            p[kk] = psi(n_prev[kk] + ak);
        }
        for (uu, &v) in doc.word_ids.iter().enumerate() {
            let c_row = g.c_row(v);
            for kk in 0..k {
                w[kk] = c_row[kk] + p[kk];
            }
            dense_resp_from_weights_into(&w, &mut resp[uu]).expect("weights are finite");
        }
        accumulate_dense_counts(doc, &resp, &mut n);
        let delta = max_abs_diff(&n, &n_prev);
        n_prev.copy_from_slice(&n);
        if delta < cfg.conv_threshold {
            converged = true;
            break;
        }
    }

    let theta_hat: Vec<f64> = n_prev.iter().map(|&x| x + ak).collect();
    DocState {
        resp: resp
            .into_iter()
            .map(|r| Resp::Dense(crate::resp::DenseResp { r }))
            .collect(),
        theta_hat,
        doc_topic_counts: n_prev,
        active_set: (0..k).collect(),
        n_iters_used: iters,
        converged,
        n_restart_proposals: 0,
        n_restart_accepts: 0,
    }
}

fn accumulate_dense_counts(doc: &Document, resp: &[Vec<f64>], n: &mut [f64]) {
    n.iter_mut().for_each(|x| *x = 0.0);
    for (r, &c) in resp.iter().zip(doc.counts.iter()) {
        for (kk, &v) in r.iter().enumerate() {
            n[kk] += c * v;
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Sparse per-token state during the iterative step.
struct SparseTokens {
    supports: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

/// L-sparse iterative local step with active-set tracking (cold start unless
/// `warm_counts` is given). Per-iteration cost is `O(U_d · min(L, |A_d|))`
/// plus `O(|A_d|)` bookkeeping, never `O(U_d · K)` after initialization.
pub fn l_sparse_step_for_doc(
    model: &LdaModel,
    doc: &Document,
    g: &impl WeightTable,
    cfg: &LocalStepConfig,
    l: usize,
    warm_counts: Option<&[f64]>,
) -> Result<DocState> {
    let k = model.k;
    if l == 0 || l > k {
        return Err(Error::arg(format!(
            "sparsity level L = {l} out of range 1..={k}"
        )));
    }
    let ak = model.alpha_k();
    let u = doc.n_types();
    let mut toks = SparseTokens {
        supports: vec![Vec::new(); u],
        values: vec![Vec::new(); u],
    };
    let mut n = vec![0.0; k];
    let mut is_active = vec![false; k];
    let mut active: Vec<usize>;

    let warm = warm_counts.filter(|prev| prev.iter().any(|&x| x > cfg.eps_active));
    match warm {
        Some(prev) => {
            // Supports stay empty; the first iteration re-selects every token
            // inside the stored counts' active set.
            n.copy_from_slice(prev);
            active = (0..k).filter(|&kk| n[kk] > cfg.eps_active).collect();
            let keep: Vec<usize> = active.clone();
            zero_except(&mut n, &keep);
        }
        None => {
            // Cold start: select per token from the C row alone.
            for (uu, &v) in doc.word_ids.iter().enumerate() {
                let sr = crate::resp::top_l_resp_from_weights(g.c_row(v), l)?;
                toks.supports[uu] = sr.indices;
                toks.values[uu] = sr.values;
            }
            accumulate_sparse_counts(doc, &toks, &mut n);
            active = (0..k).filter(|&kk| n[kk] > cfg.eps_active).collect();
            if active.is_empty() {
                active.push(argmax(&n));
            }
            let keep = active.clone();
            zero_except(&mut n, &keep);
        }
    }
    for &kk in &active {
        is_active[kk] = true;
    }

    let mut p = vec![0.0; k];
    let mut wbuf: Vec<f64> = Vec::with_capacity(k);
    let mut n_prev = n.clone();
    let mut iters = 0;
    let mut converged = false;
    while iters < cfg.max_iters {
        iters += 1;
        for &kk in &active {
            p[kk] = psi(n[kk] + ak);
        }
        let select_now = cfg.schedule.selects(iters);
        for (uu, &v) in doc.word_ids.iter().enumerate() {
            let c_row = g.c_row(v);
            let support = &mut toks.supports[uu];
            if !select_now {
                support.retain(|&kk| is_active[kk]);
            }
            if select_now || support.is_empty() {
                // Fresh top-L over the active set; a token whose frozen
                // support died entirely is re-selected off schedule so its
                // mass is not lost.
                let l_eff = l.min(active.len());
                wbuf.clear();
                wbuf.extend(active.iter().map(|&kk| c_row[kk] + p[kk]));
                let sr = crate::resp::top_l_resp_from_weights(&wbuf, l_eff)?;
                *support = sr.indices.iter().map(|&pos| active[pos]).collect();
                toks.values[uu] = sr.values;
            } else {
                // Frozen support: re-normalize against fresh weights at the
                // surviving indices.
                wbuf.clear();
                wbuf.extend(support.iter().map(|&kk| c_row[kk] + p[kk]));
                let vals = &mut toks.values[uu];
                vals.resize(wbuf.len(), 0.0);
                dense_resp_from_weights_into(&wbuf, vals).expect("weights are finite");
            }
        }
        for &kk in &active {
            n[kk] = 0.0;
        }
        accumulate_sparse_counts(doc, &toks, &mut n);
        // Shrink the active set; dropped topics keep zero mass forever.
        active.retain(|&kk| {
            if n[kk] > cfg.eps_active {
                true
            } else {
                is_active[kk] = false;
                n[kk] = 0.0;
                false
            }
        });
        if active.is_empty() {
            let top = argmax(&n_prev);
            active.push(top);
            is_active[top] = true;
        }
        let delta = max_abs_diff(&n, &n_prev);
        n_prev.copy_from_slice(&n);
        if delta < cfg.conv_threshold {
            converged = true;
            break;
        }
    }

    // Strip any support entries that died on the final shrink, renormalize
    // proportionally, and rebuild counts so tokens, counts, and active set
    // agree exactly.
    finalize_sparse(model, doc, g, &mut toks, &mut n, &active, &is_active, l)?;

    let theta_hat: Vec<f64> = n.iter().map(|&x| x + ak).collect();
    let resp = pack_sparse_resps(toks, k);
    Ok(DocState {
        resp,
        theta_hat,
        doc_topic_counts: n,
        active_set: active,
        n_iters_used: iters,
        converged,
        n_restart_proposals: 0,
        n_restart_accepts: 0,
    })
}

fn pack_sparse_resps(toks: SparseTokens, k: usize) -> Vec<Resp> {
    toks.supports
        .into_iter()
        .zip(toks.values)
        .map(|(idx, vals)| {
            let mut order: Vec<usize> = (0..idx.len()).collect();
            order.sort_unstable_by(|&a, &b| {
                vals[b]
                    .partial_cmp(&vals[a])
                    .unwrap()
                    .then(idx[a].cmp(&idx[b]))
            });
            Resp::Sparse(SparseResp {
                values: order.iter().map(|&i| vals[i]).collect(),
                indices: order.iter().map(|&i| idx[i]).collect(),
                k,
            })
        })
        .collect()
}

fn accumulate_sparse_counts(doc: &Document, toks: &SparseTokens, n: &mut [f64]) {
    for ((support, values), &c) in toks
        .supports
        .iter()
        .zip(toks.values.iter())
        .zip(doc.counts.iter())
    {
        for (&kk, &v) in support.iter().zip(values.iter()) {
            n[kk] += c * v;
        }
    }
}

fn zero_except(n: &mut [f64], keep: &[usize]) {
    let mut mask = vec![false; n.len()];
    for &kk in keep {
        mask[kk] = true;
    }
    for (x, m) in n.iter_mut().zip(mask) {
        if !m {
            *x = 0.0;
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn finalize_sparse(
    model: &LdaModel,
    doc: &Document,
    g: &impl WeightTable,
    toks: &mut SparseTokens,
    n: &mut [f64],
    active: &[usize],
    is_active: &[bool],
    l: usize,
) -> Result<()> {
    let ak = model.alpha_k();
    let mut p: Option<Vec<f64>> = None;
    let mut wbuf: Vec<f64> = Vec::new();
    let mut touched = false;
    for (uu, &v) in doc.word_ids.iter().enumerate() {
        let support = &mut toks.supports[uu];
        let values = &mut toks.values[uu];
        if support.iter().all(|&kk| is_active[kk]) {
            continue;
        }
        touched = true;
        let mut kept_sum = 0.0;
        let mut j = 0;
        for i in 0..support.len() {
            if is_active[support[i]] {
                support[j] = support[i];
                values[j] = values[i];
                kept_sum += values[j];
                j += 1;
            }
        }
        support.truncate(j);
        values.truncate(j);
        if j == 0 || kept_sum <= f64::MIN_POSITIVE {
            // Whole support died: re-select from the active weights.
            let p = p.get_or_insert_with(|| {
                let mut p = vec![0.0; model.k];
                for &kk in active {
                    p[kk] = psi(n[kk] + ak);
                }
                p
            });
            let c_row = g.c_row(v);
            let l_eff = l.min(active.len());
            wbuf.clear();
            wbuf.extend(active.iter().map(|&kk| c_row[kk] + p[kk]));
            let sr = crate::resp::top_l_resp_from_weights(&wbuf, l_eff)?;
            *support = sr.indices.iter().map(|&pos| active[pos]).collect();
            *values = sr.values;
        } else {
            for val in values.iter_mut() {
                *val /= kept_sum;
            }
        }
    }
    if touched {
        n.iter_mut().for_each(|x| *x = 0.0);
        accumulate_sparse_counts(doc, toks, n);
    }
    Ok(())
}

/// Single-document slice of the objective for a finalized state: the
/// allocation term (whose residual is zero once `θ̂ = N + α/K`) plus each
/// token's data and entropy contribution under the current weight table.
pub fn doc_objective(
    model: &LdaModel,
    doc: &Document,
    g: &impl WeightTable,
    state: &DocState,
) -> f64 {
    let ak = model.alpha_k();
    debug_assert!(state
        .theta_hat
        .iter()
        .zip(state.doc_topic_counts.iter())
        .all(|(&t, &n)| (t - (n + ak)).abs() < 1e-9));
    let mut obj = c_dir_symmetric(ak, model.k).expect("alpha > 0")
        - c_dir(&state.theta_hat).expect("theta positive");
    for ((resp, &v), &c) in state
        .resp
        .iter()
        .zip(doc.word_ids.iter())
        .zip(doc.counts.iter())
    {
        let c_row = g.c_row(v);
        resp.for_support(|kk, r| {
            if r > 0.0 {
                obj += c * r * (c_row[kk] - r.ln());
            }
        });
    }
    obj
}

/// Restart proposals: for candidate active topics in increasing-mass order,
/// force that topic's in-document mass to zero, re-optimize briefly, and keep
/// the result only if the single-document objective strictly improves. The
/// returned state's objective is never below the input's.
pub fn restart_proposal(
    model: &LdaModel,
    doc: &Document,
    g: &impl WeightTable,
    cfg: &LocalStepConfig,
    state: DocState,
) -> DocState {
    let mut best = state;
    if model.k == 1 {
        return best;
    }
    let mut candidates: Vec<usize> = best
        .active_set
        .iter()
        .copied()
        .filter(|&kk| best.doc_topic_counts[kk] > 0.0)
        .collect();
    candidates.sort_unstable_by(|&a, &b| {
        best.doc_topic_counts[a]
            .partial_cmp(&best.doc_topic_counts[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    candidates.truncate(cfg.max_restart_proposals);

    let mut best_obj = doc_objective(model, doc, g, &best);
    let mut proposals = 0u64;
    let mut accepts = 0u64;
    for kk in candidates {
        if best.active_set.len() <= 1 || !best.active_set.contains(&kk) {
            continue;
        }
        proposals += 1;
        if let Some(candidate) = propose_without_topic(model, doc, g, cfg, &best, kk) {
            let obj = doc_objective(model, doc, g, &candidate);
            if obj > best_obj {
                best = candidate;
                best_obj = obj;
                accepts += 1;
            }
        }
    }
    best.n_restart_proposals += proposals;
    best.n_restart_accepts += accepts;
    best
}

/// Builds the candidate state with topic `drop_k` zeroed, then runs
/// `restart_forward_iters` update cycles and finalizes.
fn propose_without_topic(
    model: &LdaModel,
    doc: &Document,
    g: &impl WeightTable,
    cfg: &LocalStepConfig,
    state: &DocState,
    drop_k: usize,
) -> Option<DocState> {
    let k = model.k;
    let ak = model.alpha_k();
    let sparse = matches!(state.resp.first(), Some(Resp::Sparse(_)));

    // Remove the topic's mass from every token, renormalizing the remainder.
    let mut toks = SparseTokens {
        supports: Vec::with_capacity(state.resp.len()),
        values: Vec::with_capacity(state.resp.len()),
    };
    let mut dead_tokens = Vec::new();
    for (uu, resp) in state.resp.iter().enumerate() {
        let (mut support, mut values): (Vec<usize>, Vec<f64>) = match resp {
            Resp::Sparse(s) => (s.indices.clone(), s.values.clone()),
            Resp::Dense(d) => ((0..k).collect(), d.r.clone()),
        };
        let mut kept = 0.0;
        let mut j = 0;
        for i in 0..support.len() {
            if support[i] != drop_k {
                support[j] = support[i];
                values[j] = values[i];
                kept += values[j];
                j += 1;
            }
        }
        support.truncate(j);
        values.truncate(j);
        if j == 0 || kept <= f64::MIN_POSITIVE {
            dead_tokens.push(uu);
        } else {
            for v in values.iter_mut() {
                *v /= kept;
            }
        }
        toks.supports.push(support);
        toks.values.push(values);
    }

    let mut active: Vec<usize> = if sparse {
        state
            .active_set
            .iter()
            .copied()
            .filter(|&kk| kk != drop_k)
            .collect()
    } else {
        (0..k).filter(|&kk| kk != drop_k).collect()
    };
    if active.is_empty() {
        return None;
    }
    let mut is_active = vec![false; k];
    for &kk in &active {
        is_active[kk] = true;
    }
    let mut n = vec![0.0; k];
    accumulate_sparse_counts(doc, &toks, &mut n);

    let l = match cfg.sparsity {
        Sparsity::TopL(l) => l,
        Sparsity::Dense => k,
    };
    // Tokens that lost their whole support re-select from active weights.
    if !dead_tokens.is_empty() {
        let mut p = vec![0.0; k];
        for &kk in &active {
            p[kk] = psi(n[kk] + ak);
        }
        let mut wbuf = Vec::new();
        for &uu in &dead_tokens {
            let c_row = g.c_row(doc.word_ids[uu]);
            let l_eff = l.min(active.len());
            wbuf.clear();
            wbuf.extend(active.iter().map(|&kk| c_row[kk] + p[kk]));
            let sr = crate::resp::top_l_resp_from_weights(&wbuf, l_eff).ok()?;
            toks.supports[uu] = sr.indices.iter().map(|&pos| active[pos]).collect();
            toks.values[uu] = sr.values;
        }
        n.iter_mut().for_each(|x| *x = 0.0);
        accumulate_sparse_counts(doc, &toks, &mut n);
    }

    // A few forward cycles with selection on.
    let mut p = vec![0.0; k];
    let mut wbuf = Vec::new();
    for _ in 0..cfg.restart_forward_iters {
        for &kk in &active {
            p[kk] = psi(n[kk] + ak);
        }
        for (uu, &v) in doc.word_ids.iter().enumerate() {
            let c_row = g.c_row(v);
            let l_eff = l.min(active.len());
            wbuf.clear();
            wbuf.extend(active.iter().map(|&kk| c_row[kk] + p[kk]));
            let sr = crate::resp::top_l_resp_from_weights(&wbuf, l_eff).ok()?;
            toks.supports[uu] = sr.indices.iter().map(|&pos| active[pos]).collect();
            toks.values[uu] = sr.values;
        }
        for &kk in &active {
            n[kk] = 0.0;
        }
        accumulate_sparse_counts(doc, &toks, &mut n);
        if sparse {
            active.retain(|&kk| {
                if n[kk] > cfg.eps_active {
                    true
                } else {
                    is_active[kk] = false;
                    n[kk] = 0.0;
                    false
                }
            });
            if active.is_empty() {
                return None;
            }
        }
    }
    finalize_sparse(model, doc, g, &mut toks, &mut n, &active, &is_active, l).ok()?;

    let theta_hat: Vec<f64> = n.iter().map(|&x| x + ak).collect();
    let resp: Vec<Resp> = if sparse {
        pack_sparse_resps(toks, k)
    } else {
        toks.supports
            .into_iter()
            .zip(toks.values)
            .map(|(idx, vals)| {
                let mut r = vec![0.0; k];
                for (&kk, &v) in idx.iter().zip(vals.iter()) {
                    r[kk] = v;
                }
                Resp::Dense(crate::resp::DenseResp { r })
            })
            .collect()
    };
    Some(DocState {
        resp,
        theta_hat,
        doc_topic_counts: n,
        active_set: if sparse { active } else { (0..k).collect() },
        n_iters_used: state.n_iters_used,
        converged: state.converged,
        n_restart_proposals: 0,
        n_restart_accepts: 0,
    })
}

/// One document's local step according to the config: dense or sparse,
/// warm or cold, with restart proposals applied when enabled.
pub fn local_step_for_doc(
    model: &LdaModel,
    doc: &Document,
    g: &impl WeightTable,
    cfg: &LocalStepConfig,
    warm_counts: Option<&[f64]>,
) -> Result<DocState> {
    let state = match cfg.sparsity {
        Sparsity::Dense => dense_step_for_doc(model, doc, g, cfg, warm_counts),
        Sparsity::TopL(l) => l_sparse_step_for_doc(model, doc, g, cfg, l, warm_counts)?,
    };
    Ok(if cfg.restarts_enabled {
        restart_proposal(model, doc, g, cfg, state)
    } else {
        state
    })
}

/// Per-topic word-count matrix plus folded local objective terms.
/// A commutative monoid under [`LdaSuffStats::merge`].
#[derive(Debug, Clone)]
pub struct LdaSuffStats {
    /// `s[k][v]` = expected count of word v assigned to topic k.
    pub s: Vec<Vec<f64>>,
    pub n_docs: f64,
    pub n_tokens: f64,
    /// Σ over documents of (allocation term + assignment entropy); these
    /// depend only on the local state, so they can be cached per batch and
    /// reused until the batch is revisited.
    pub local_obj: f64,
}

impl LdaSuffStats {
    pub fn zeros(k: usize, v: usize) -> Self {
        LdaSuffStats {
            s: vec![vec![0.0; v]; k],
            n_docs: 0.0,
            n_tokens: 0.0,
            local_obj: 0.0,
        }
    }

    pub fn merge(&mut self, other: &LdaSuffStats) {
        for (a, b) in self.s.iter_mut().zip(other.s.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        self.n_docs += other.n_docs;
        self.n_tokens += other.n_tokens;
        self.local_obj += other.local_obj;
    }

    pub fn scale(&mut self, c: f64) {
        for row in self.s.iter_mut() {
            row.iter_mut().for_each(|x| *x *= c);
        }
        self.n_docs *= c;
        self.n_tokens *= c;
        self.local_obj *= c;
    }

    /// Per-topic token totals `Σ_v S_kv`.
    pub fn topic_totals(&self) -> Vec<f64> {
        self.s.iter().map(|row| row.iter().sum()).collect()
    }
}

/// Allocation + entropy contribution of one finalized document.
fn doc_alloc_entropy(model: &LdaModel, doc: &Document, state: &DocState) -> f64 {
    let ak = model.alpha_k();
    let alloc = c_dir_symmetric(ak, model.k).expect("alpha > 0")
        - c_dir(&state.theta_hat).expect("theta positive");
    let mut ent = 0.0;
    for (resp, &c) in state.resp.iter().zip(doc.counts.iter()) {
        ent += c * match resp {
            Resp::Dense(d) => entropy(d.r.iter().copied()),
            Resp::Sparse(s) => entropy(s.values.iter().copied()),
        };
    }
    alloc + ent
}

/// Folds one finalized document into running statistics.
pub fn accumulate_doc_stats(
    model: &LdaModel,
    doc: &Document,
    state: &DocState,
    stats: &mut LdaSuffStats,
) {
    for ((resp, &v), &c) in state
        .resp
        .iter()
        .zip(doc.word_ids.iter())
        .zip(doc.counts.iter())
    {
        resp.for_support(|kk, r| {
            if r != 0.0 {
                stats.s[kk][v] += c * r;
            }
        });
    }
    stats.n_docs += 1.0;
    stats.n_tokens += doc.n_tokens;
    stats.local_obj += doc_alloc_entropy(model, doc, state);
}

/// Summarizes finalized document states into topic-word statistics; sparse
/// responsibilities contribute only through their support.
pub fn lda_summary(model: &LdaModel, docs: &[Document], states: &[DocState]) -> LdaSuffStats {
    debug_assert_eq!(docs.len(), states.len());
    let mut stats = LdaSuffStats::zeros(model.k, model.vocab_size);
    for (doc, state) in docs.iter().zip(states.iter()) {
        accumulate_doc_stats(model, doc, state, &mut stats);
    }
    stats
}

/// Conjugate topic update `λ̂_kv = λ̄ + S_kv` with the weight table rebuilt.
pub fn lda_global_step(model: &LdaModel, stats: &LdaSuffStats) -> Result<LdaGlobalState> {
    let topics = stats
        .s
        .iter()
        .map(|row| categorical_global_update(row, model.lambda_bar))
        .collect::<Result<Vec<_>>>()?;
    Ok(LdaGlobalState::new(topics))
}

/// Stochastic natural-gradient step on the topic parameters.
pub fn lda_svi_blend(
    model: &LdaModel,
    g: &LdaGlobalState,
    rescaled: &LdaSuffStats,
    rho: f64,
) -> Result<LdaGlobalState> {
    let topics = g
        .topics
        .iter()
        .zip(rescaled.s.iter())
        .map(|(topic, row)| {
            let lam: Vec<f64> = topic
                .lambda_hat
                .iter()
                .zip(row.iter())
                .map(|(&cur, &s)| (1.0 - rho) * cur + rho * (model.lambda_bar + s))
                .collect();
            DirichletPosterior::new(lam)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LdaGlobalState::new(topics))
}

/// Objective value from statistics and the current global state. The data
/// term is exact for the current topics; allocation and entropy come from
/// the folded per-document scalars.
pub fn lda_elbo_from_stats(model: &LdaModel, stats: &LdaSuffStats, g: &LdaGlobalState) -> f64 {
    l_data_categorical(&stats.s, &g.topics, model.lambda_bar, model.vocab_size) + stats.local_obj
}

/// Objective value computed directly from document states (summarizing them
/// on the fly); agrees with [`lda_elbo_from_stats`] on the same states.
pub fn lda_elbo(
    model: &LdaModel,
    docs: &[Document],
    states: &[DocState],
    g: &LdaGlobalState,
) -> f64 {
    let stats = lda_summary(model, docs, states);
    lda_elbo_from_stats(model, &stats, g)
}

/// Uniform-topic global state used before any data is seen.
pub fn lda_prior_state(model: &LdaModel) -> Result<LdaGlobalState> {
    let stats = LdaSuffStats::zeros(model.k, model.vocab_size);
    lda_global_step(model, &stats)
}

/// Corpus-level convenience: run the local step over the given documents and
/// summarize them.
pub fn lda_local_summary(
    model: &LdaModel,
    corpus: &Corpus,
    indices: &[usize],
    g: &LdaGlobalState,
    cfg: &LocalStepConfig,
) -> Result<(LdaSuffStats, Vec<DocState>)> {
    let states = indices
        .iter()
        .map(|&d| local_step_for_doc(model, &corpus.docs[d], g, cfg, None))
        .collect::<Result<Vec<_>>>()?;
    let docs: Vec<Document> = indices.iter().map(|&d| corpus.docs[d].clone()).collect();
    Ok((lda_summary(model, &docs, &states), states))
}
