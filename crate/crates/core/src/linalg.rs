//! Minimal dense symmetric-matrix support.
//!
//! Every SPD operation in the crate funnels through [`Cholesky`]; nothing
//! downstream forms an explicit inverse except via triangular solves.

use crate::error::{Error, Result};

/// Square matrix, row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMat {
    dim: usize,
    a: Vec<f64>,
}

impl SquareMat {
    pub fn zeros(dim: usize) -> Self {
        SquareMat {
            dim,
            a: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.a[i * dim + i] = 1.0;
        }
        m
    }

    /// Builds from row-major data. Length must be `dim * dim`.
    pub fn from_rows(dim: usize, a: Vec<f64>) -> Self {
        assert_eq!(a.len(), dim * dim, "row-major data length mismatch");
        SquareMat { dim, a }
    }

    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.a[i * dim + i] = c;
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.dim + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.a
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.a
    }

    pub fn fill(&mut self, v: f64) {
        self.a.iter_mut().for_each(|x| *x = v);
    }

    /// `self += c * other`, elementwise.
    pub fn add_scaled(&mut self, other: &SquareMat, c: f64) {
        debug_assert_eq!(self.dim, other.dim);
        for (s, o) in self.a.iter_mut().zip(other.a.iter()) {
            *s += c * o;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.a.iter_mut().for_each(|x| *x *= c);
    }

    /// Accumulates `c * x xᵀ` (symmetric rank-one update).
    pub fn add_outer(&mut self, x: &[f64], c: f64) {
        debug_assert_eq!(x.len(), self.dim);
        let d = self.dim;
        for i in 0..d {
            let xi = c * x[i];
            let row = &mut self.a[i * d..(i + 1) * d];
            for (rj, &xj) in row.iter_mut().zip(x.iter()) {
                *rj += xi * xj;
            }
        }
    }

    /// Quadratic form `xᵀ self x` for symmetric `self`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let d = self.dim;
        let mut acc = 0.0;
        for i in 0..d {
            let row = &self.a[i * d..(i + 1) * d];
            let mut dot = 0.0;
            for (rj, &xj) in row.iter().zip(x.iter()) {
                dot += rj * xj;
            }
            acc += x[i] * dot;
        }
        acc
    }

    /// `Σ_ij self_ij other_ij`; equals `tr(self · other)` for symmetric inputs.
    pub fn frobenius_inner(&self, other: &SquareMat) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        self.a.iter().zip(other.a.iter()).map(|(x, y)| x * y).sum()
    }

    /// Worst absolute asymmetry; diagnostic for debug assertions.
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Reusable Cholesky workspace. `factor` overwrites the internal buffer with
/// the lower-triangular factor L such that M = L Lᵀ.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn new(dim: usize) -> Self {
        Cholesky {
            dim,
            l: vec![0.0; dim * dim],
        }
    }

    /// Factors an SPD matrix in place. Fails with [`Error::NotSpd`] on a
    /// non-positive pivot.
    pub fn factor(&mut self, m: &SquareMat) -> Result<()> {
        let d = m.dim();
        if d != self.dim {
            self.dim = d;
            self.l.resize(d * d, 0.0);
        }
        self.l.copy_from_slice(m.data());
        let l = &mut self.l;
        for i in 0..d {
            for j in 0..=i {
                let mut sum = l[i * d + j];
                for p in 0..j {
                    sum -= l[i * d + p] * l[j * d + p];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::NotSpd { row: i, pivot: sum });
                    }
                    l[i * d + i] = sum.sqrt();
                } else {
                    l[i * d + j] = sum / l[j * d + j];
                }
            }
            for j in (i + 1)..d {
                l[i * d + j] = 0.0;
            }
        }
        Ok(())
    }

    /// `ln |M|` of the factored matrix: `2 Σ ln L_ii`.
    pub fn log_det(&self) -> f64 {
        let d = self.dim;
        (0..d).map(|i| self.l[i * d + i].ln()).sum::<f64>() * 2.0
    }

    /// Solves `M x = b` in place via forward then backward substitution.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        let d = self.dim;
        let l = &self.l;
        // L y = b
        for i in 0..d {
            let mut sum = x[i];
            for p in 0..i {
                sum -= l[i * d + p] * x[p];
            }
            x[i] = sum / l[i * d + i];
        }
        // Lᵀ x = y
        for i in (0..d).rev() {
            let mut sum = x[i];
            for p in (i + 1)..d {
                sum -= l[p * d + i] * x[p];
            }
            x[i] = sum / l[i * d + i];
        }
    }

    /// Writes `M⁻¹` into `out` using one triangular solve per column.
    pub fn inverse_into(&self, out: &mut SquareMat) {
        debug_assert_eq!(out.dim(), self.dim);
        let d = self.dim;
        let mut col = vec![0.0; d];
        for j in 0..d {
            col.iter_mut().for_each(|x| *x = 0.0);
            col[j] = 1.0;
            self.solve_in_place(&mut col);
            for i in 0..d {
                out.set(i, j, col[i]);
            }
        }
        // Symmetrize to wash out the last bits of solve round-off.
        for i in 0..d {
            for j in (i + 1)..d {
                let v = 0.5 * (out.get(i, j) + out.get(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cholesky_identity() {
        let m = SquareMat::identity(3);
        let mut ch = Cholesky::new(3);
        ch.factor(&m).unwrap();
        assert!(ch.log_det().abs() < 1e-15);
    }

    #[test]
    fn cholesky_2x2_known() {
        let m = SquareMat::from_rows(2, vec![2.0, 1.0, 1.0, 2.0]);
        let mut ch = Cholesky::new(2);
        ch.factor(&m).unwrap();
        assert!((ch.log_det() - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_non_spd() {
        let m = SquareMat::from_rows(2, vec![1.0, 2.0, 2.0, 1.0]);
        let mut ch = Cholesky::new(2);
        assert!(matches!(ch.factor(&m), Err(Error::NotSpd { .. })));
    }

    #[test]
    fn solve_and_inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let d = rng.gen_range(1..6);
            // Random SPD: A = B Bᵀ + d·I.
            let mut m = SquareMat::scaled_identity(d, d as f64);
            let b: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for i in 0..d {
                for j in 0..d {
                    let mut s = 0.0;
                    for p in 0..d {
                        s += b[i * d + p] * b[j * d + p];
                    }
                    m.set(i, j, m.get(i, j) + s);
                }
            }
            let mut ch = Cholesky::new(d);
            ch.factor(&m).unwrap();

            let rhs: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut x = rhs.clone();
            ch.solve_in_place(&mut x);
            // Check M x = rhs.
            for i in 0..d {
                let mut got = 0.0;
                for j in 0..d {
                    got += m.get(i, j) * x[j];
                }
                assert!((got - rhs[i]).abs() < 1e-8, "solve residual too large");
            }

            let mut inv = SquareMat::zeros(d);
            ch.inverse_into(&mut inv);
            // M · M⁻¹ ≈ I.
            for i in 0..d {
                for j in 0..d {
                    let mut got = 0.0;
                    for p in 0..d {
                        got += m.get(i, p) * inv.get(p, j);
                    }
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((got - want).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn log_det_matches_triangular_construction() {
        // log_det(L Lᵀ) = 2 Σ ln diag(L) for random lower-triangular L.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let d = rng.gen_range(1..7);
            let mut l = SquareMat::zeros(d);
            for i in 0..d {
                for j in 0..i {
                    l.set(i, j, rng.gen_range(-1.0..1.0));
                }
                l.set(i, i, rng.gen_range(0.2..2.0));
            }
            let mut m = SquareMat::zeros(d);
            for i in 0..d {
                for j in 0..d {
                    let mut s = 0.0;
                    for p in 0..=i.min(j) {
                        s += l.get(i, p) * l.get(j, p);
                    }
                    m.set(i, j, s);
                }
            }
            let expect: f64 = (0..d).map(|i| l.get(i, i).ln()).sum::<f64>() * 2.0;
            let mut ch = Cholesky::new(d);
            ch.factor(&m).unwrap();
            assert!((ch.log_det() - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn quadratic_form_and_outer() {
        let mut m = SquareMat::zeros(2);
        m.add_outer(&[1.0, 2.0], 1.0);
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.get(1, 1), 4.0);
        // xᵀ(x xᵀ)x = (xᵀx)²
        assert!((m.quadratic_form(&[1.0, 2.0]) - 25.0).abs() < 1e-12);
    }
}
