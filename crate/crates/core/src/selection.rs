//! Top-L selection over a read-only value array in worst-case O(K).
//!
//! Quickselect over an index permutation with median-of-three pivots, falling
//! back to median-of-medians (group size 5) once the recursion depth exceeds
//! `2·⌊log₂ K⌋` or the comparison budget is blown. Ties are broken by smaller
//! index first, which makes the effective key `(value desc, index asc)` a
//! strict total order and every result deterministic.

use crate::error::{Error, Result};

/// Indices of the L largest values, sorted by (value descending, index
/// ascending).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopLResult {
    pub indices: Vec<usize>,
}

/// Returns the indices of the `l` largest entries of `values` without
/// modifying the input. Errors if `l` is out of `1..=values.len()` or any
/// value is NaN.
pub fn select_top_l(values: &[f64], l: usize) -> Result<TopLResult> {
    let k = values.len();
    check_args(values, l, k)?;
    let mut perm: Vec<usize> = (0..k).collect();
    let mut sel = Selector::new(values);
    sel.select(&mut perm, 0, k, l - 1, false);
    let mut indices = perm[..l].to_vec();
    indices.sort_unstable_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap().then(i.cmp(&j)));
    Ok(TopLResult { indices })
}

/// Rearranges `perm` (a permutation of `0..values.len()`) so that every index
/// in positions `[0, l)` refers to a value ≥ every index in positions
/// `[l, len)`. No ordering is guaranteed within either block.
pub fn partition_top_l_inplace(perm: &mut [usize], values: &[f64], l: usize) -> Result<()> {
    partition_top_l_counting(perm, values, l).map(|_| ())
}

/// Same as [`partition_top_l_inplace`] but returns the number of key
/// comparisons performed; used by the cost-contract tests and benchmarks.
pub fn partition_top_l_counting(perm: &mut [usize], values: &[f64], l: usize) -> Result<u64> {
    let k = values.len();
    check_args(values, l, k)?;
    if perm.len() != k {
        return Err(Error::arg(format!(
            "permutation length {} does not match value count {k}",
            perm.len()
        )));
    }
    debug_assert!(is_permutation(perm), "index buffer is not a permutation");
    let mut sel = Selector::new(values);
    sel.select(perm, 0, k, l - 1, false);
    Ok(sel.comparisons)
}

fn check_args(values: &[f64], l: usize, k: usize) -> Result<()> {
    if l == 0 || l > k {
        return Err(Error::arg(format!(
            "sparsity level L = {l} out of range 1..={k}"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::arg("weight vector contains NaN"));
    }
    Ok(())
}

fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&i| {
        if i >= seen.len() || seen[i] {
            false
        } else {
            seen[i] = true;
            true
        }
    })
}

const INSERTION_CUTOFF: usize = 8;

struct Selector<'a> {
    values: &'a [f64],
    comparisons: u64,
}

impl<'a> Selector<'a> {
    fn new(values: &'a [f64]) -> Self {
        Selector {
            values,
            comparisons: 0,
        }
    }

    /// Strict "comes before" under (value desc, index asc).
    #[inline]
    fn higher(&mut self, i: usize, j: usize) -> bool {
        self.comparisons += 1;
        let (vi, vj) = (self.values[i], self.values[j]);
        vi > vj || (vi == vj && i < j)
    }

    /// Places the element of descending rank `nth` at position `nth` of
    /// `perm[lo..hi)`, with everything higher before it and everything lower
    /// after it.
    fn select(
        &mut self,
        perm: &mut [usize],
        mut lo: usize,
        mut hi: usize,
        nth: usize,
        force_mom: bool,
    ) {
        debug_assert!(lo <= nth && nth < hi);
        let len0 = hi - lo;
        let depth_budget =
            2 * (usize::BITS - 1 - len0.leading_zeros().min(usize::BITS - 1)) as usize;
        let work_budget = self.comparisons + 4 * len0 as u64;
        let mut depth = 0usize;
        loop {
            let len = hi - lo;
            if len <= INSERTION_CUTOFF {
                self.insertion_sort(perm, lo, hi);
                return;
            }
            let mom = force_mom || depth > depth_budget || self.comparisons > work_budget;
            let pivot_pos = if mom {
                self.median_of_medians(perm, lo, hi)
            } else {
                self.median_of_three(perm, lo, hi)
            };
            let mid = self.partition(perm, lo, hi, pivot_pos);
            if nth == mid {
                return;
            } else if nth < mid {
                hi = mid;
            } else {
                lo = mid + 1;
            }
            depth += 1;
        }
    }

    /// Lomuto partition; all keys are distinct under the tie rule, so a
    /// two-way pass is exact. Returns the pivot's final position.
    fn partition(&mut self, perm: &mut [usize], lo: usize, hi: usize, pivot_pos: usize) -> usize {
        perm.swap(pivot_pos, hi - 1);
        let pivot = perm[hi - 1];
        let mut store = lo;
        for i in lo..hi - 1 {
            if self.higher(perm[i], pivot) {
                perm.swap(i, store);
                store += 1;
            }
        }
        perm.swap(store, hi - 1);
        store
    }

    fn median_of_three(&mut self, perm: &[usize], lo: usize, hi: usize) -> usize {
        let a = lo;
        let b = lo + (hi - lo) / 2;
        let c = hi - 1;
        let ab = self.higher(perm[a], perm[b]);
        let bc = self.higher(perm[b], perm[c]);
        if ab == bc {
            return b;
        }
        let ac = self.higher(perm[a], perm[c]);
        if ab {
            // a > b, b <= c: median is the lower of a, c.
            if ac {
                c
            } else {
                a
            }
        } else {
            // a <= b, b > c: median is the higher of a, c.
            if ac {
                a
            } else {
                c
            }
        }
    }

    /// Deterministic linear-time pivot: sorts groups of five, gathers group
    /// medians at the front of the range, then recursively selects their
    /// median (itself with the median-of-medians strategy forced).
    fn median_of_medians(&mut self, perm: &mut [usize], lo: usize, hi: usize) -> usize {
        let mut n_groups = 0;
        let mut i = lo;
        while i < hi {
            let end = (i + 5).min(hi);
            self.insertion_sort(perm, i, end);
            let median_pos = i + (end - i) / 2;
            perm.swap(lo + n_groups, median_pos);
            n_groups += 1;
            i = end;
        }
        let target = lo + (n_groups - 1) / 2;
        if n_groups > 1 {
            self.select(perm, lo, lo + n_groups, target, true);
        }
        target
    }

    fn insertion_sort(&mut self, perm: &mut [usize], lo: usize, hi: usize) {
        for i in (lo + 1)..hi {
            let mut j = i;
            while j > lo && self.higher(perm[j], perm[j - 1]) {
                perm.swap(j, j - 1);
                j -= 1;
            }
        }
    }
}
