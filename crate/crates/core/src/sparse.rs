//! Compressed sparse rows, a banded LDLᵀ factorization and conjugate gradients.
//!
//! The stiffness matrices produced by [`crate::operators`] are symmetric with
//! a half bandwidth equal to the angular resolution, so a banded factorization
//! without pivoting is both cheap and exact enough for the time stepper.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Square matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            rows[i].push((j, v));
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows.iter_mut() {
            row.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < row.len() {
                let col = row[k].0;
                let mut sum = 0.0;
                while k < row.len() && row[k].0 == col {
                    sum += row[k].1;
                    k += 1;
                }
                indices.push(col);
                values.push(sum);
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn diagonal_matrix(d: &[f64]) -> Self {
        let t: Vec<_> = d.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
        Self::from_triplets(d.len(), &t)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v)))
            .collect()
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let mut s = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                s += self.values[k] * x[self.indices[k]];
            }
            *yi = s;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, _)| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }

    /// `max |A - Aᵀ|` over stored entries.
    pub fn asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for (i, j, v) in self.triplets() {
            m = m.max((v - self.get(j, i)).abs());
        }
        m
    }

    /// `alpha * self + beta * diag(d)`.
    pub fn scaled_plus_diagonal(&self, alpha: f64, beta: f64, d: &[f64]) -> Self {
        let mut t: Vec<_> = self
            .triplets()
            .into_iter()
            .map(|(i, j, v)| (i, j, alpha * v))
            .collect();
        t.extend(d.iter().enumerate().map(|(i, &v)| (i, i, beta * v)));
        Self::from_triplets(self.n, &t)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.triplets() {
            m[(i, j)] += v;
        }
        m
    }

    /// Coordinate text format: a header line `n nnz`, then `i j value`.
    pub fn to_triplet_text(&self) -> String {
        let mut out = format!("{} {}\n", self.n, self.nnz());
        for (i, j, v) in self.triplets() {
            let _ = writeln!(out, "{i} {j} {v:.17e}");
        }
        out
    }
}

/// `A = L D Lᵀ` for a symmetric banded matrix, no pivoting.
#[derive(Debug, Clone)]
pub struct BandedLdl {
    n: usize,
    bw: usize,
    /// Row-major lower band; entry `(i, j)` lives at `i * (bw + 1) + j + bw - i`.
    l: Vec<f64>,
    d: Vec<f64>,
}

impl BandedLdl {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.dim();
        let bw = a.bandwidth();
        let stride = bw + 1;
        let mut l = vec![0.0; n * stride];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    l[i * stride + j + bw - i] = v;
                }
            }
        }
        let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut d = vec![0.0; n];
        let mut work = vec![0.0; stride];
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..i {
                let jlo = j.saturating_sub(bw).max(lo);
                let mut s = l[i * stride + j + bw - i];
                for k in jlo..j {
                    s -= work[k - lo] * l[j * stride + k + bw - j];
                }
                let lij = s / d[j];
                l[i * stride + j + bw - i] = lij;
                work[j - lo] = lij * d[j];
            }
            let mut di = l[i * stride + bw];
            for k in lo..i {
                di -= work[k - lo] * l[i * stride + k + bw - i];
            }
            if !di.is_finite() || di.abs() <= 1e-14 * scale {
                return Err(Error::LinearSolver {
                    message: format!("zero or non-finite pivot {di:e} at row {i}"),
                    residual: f64::NAN,
                });
            }
            d[i] = di;
            l[i * stride + bw] = 1.0;
        }
        Ok(BandedLdl { n, bw, l, d })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw, stride) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let row = &self.l[i * stride..];
            let mut s = x[i];
            for j in lo..i {
                s -= row[j + bw - i] * x[j];
            }
            x[i] = s;
        }
        for (xi, di) in x.iter_mut().zip(&self.d) {
            *xi /= di;
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = x[i];
            for (k, xk) in x.iter().enumerate().take(hi + 1).skip(i + 1) {
                s -= self.l[k * stride + i + bw - k] * xk;
            }
            x[i] = s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    /// Stop when `‖r‖ ≤ tol · ‖b‖` in the supplied inner product.
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final relative residual (recursively updated).
    pub residual: f64,
    pub history: Vec<f64>,
    /// False when the iteration cap or a breakdown ended the run early.
    pub converged: bool,
}

/// Preconditioned conjugate gradients for an operator that is self-adjoint
/// and positive in `inner`. `precond` must be self-adjoint in the same inner
/// product. Hitting the cap or a non-positive curvature is an error.
pub fn conjugate_gradient<A, P, I>(
    apply: A,
    b: &[f64],
    x0: Option<Vec<f64>>,
    inner: I,
    precond: P,
    opts: CgOptions,
) -> Result<CgOutcome>
where
    A: FnMut(&[f64]) -> Result<Vec<f64>>,
    P: FnMut(&[f64]) -> Vec<f64>,
    I: Fn(&[f64], &[f64]) -> f64,
{
    let out = conjugate_gradient_budget(apply, b, x0, inner, precond, opts)?;
    if out.converged {
        Ok(out)
    } else {
        Err(Error::CgNotConverged {
            iterations: out.iterations,
            residual: out.residual,
            target: opts.tol,
            history: out.history,
        })
    }
}

/// Same iteration, but returns the last iterate when the budget runs out.
pub fn conjugate_gradient_budget<A, P, I>(
    mut apply: A,
    b: &[f64],
    x0: Option<Vec<f64>>,
    inner: I,
    mut precond: P,
    opts: CgOptions,
) -> Result<CgOutcome>
where
    A: FnMut(&[f64]) -> Result<Vec<f64>>,
    P: FnMut(&[f64]) -> Vec<f64>,
    I: Fn(&[f64], &[f64]) -> f64,
{
    let n = b.len();
    let bnorm = inner(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok(CgOutcome {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
            history: vec![0.0],
            converged: true,
        });
    }
    let mut x = x0.unwrap_or_else(|| vec![0.0; n]);
    let mut r = b.to_vec();
    if x.iter().any(|&v| v != 0.0) {
        let ax = apply(&x)?;
        for (ri, ai) in r.iter_mut().zip(&ax) {
            *ri -= ai;
        }
    }
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = inner(&r, &z);
    let mut res = inner(&r, &r).sqrt() / bnorm;
    let mut history = vec![res];
    let mut it = 0;
    let mut converged = true;
    while res > opts.tol {
        if it >= opts.max_iter {
            converged = false;
            break;
        }
        let ap = apply(&p)?;
        let pap = inner(&p, &ap);
        if !(pap > 0.0) {
            converged = false;
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        z = precond(&r);
        let rz_new = inner(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        res = inner(&r, &r).sqrt() / bnorm;
        history.push(res);
        it += 1;
    }
    Ok(CgOutcome {
        x,
        iterations: it,
        residual: res,
        history,
        converged,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_banded_spd(n: usize, bw: usize, seed: u64) -> CsrMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0 * bw as f64 + 1.0 + rng.gen::<f64>()));
            for j in i + 1..(i + bw + 1).min(n) {
                let v = rng.gen_range(-1.0..1.0);
                t.push((i, j, v));
                t.push((j, i, v));
            }
        }
        CsrMatrix::from_triplets(n, &t)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let a = CsrMatrix::from_triplets(2, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, -1.0)]);
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.matvec(&[1.0, 1.0]), vec![3.0, -1.0]);
    }

    #[test]
    fn banded_ldl_matches_dense_solve() {
        for (n, bw) in [(1, 0), (7, 2), (40, 5), (30, 29)] {
            let a = random_banded_spd(n, bw, n as u64);
            let f = BandedLdl::factor(&a).unwrap();
            let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
            let mut x = b.clone();
            f.solve_in_place(&mut x);
            let ax = a.matvec(&x);
            let err = ax
                .iter()
                .zip(&b)
                .map(|(u, v)| (u - v).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "n={n} bw={bw} err={err}");
        }
    }

    #[test]
    fn indefinite_symmetric_without_zero_pivot_factors() {
        let a = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (1, 1, -2.0), (0, 1, 0.5), (1, 0, 0.5)]);
        let f = BandedLdl::factor(&a).unwrap();
        let mut x = vec![1.0, 1.0];
        f.solve_in_place(&mut x);
        let ax = a.matvec(&x);
        assert!((ax[0] - 1.0).abs() < 1e-14 && (ax[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (1, 1, 1.0), (0, 1, 1.0), (1, 0, 1.0)]);
        assert!(matches!(
            BandedLdl::factor(&a),
            Err(Error::LinearSolver { .. })
        ));
    }

    #[test]
    fn cg_solves_spd_system() {
        let a = random_banded_spd(50, 3, 9);
        let b: Vec<f64> = (0..50).map(|i| 1.0 + i as f64).collect();
        let out = conjugate_gradient(
            |x| Ok(a.matvec(x)),
            &b,
            None,
            dot,
            |r| r.to_vec(),
            CgOptions {
                tol: 1e-12,
                max_iter: 200,
            },
        )
        .unwrap();
        let ax = a.matvec(&out.x);
        let err = ax
            .iter()
            .zip(&b)
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9);
        assert_eq!(out.history.len(), out.iterations + 1);
    }

    #[test]
    fn cg_reports_history_on_failure() {
        let a = random_banded_spd(50, 3, 10);
        let b = vec![1.0; 50];
        let r = conjugate_gradient(
            |x| Ok(a.matvec(x)),
            &b,
            None,
            dot,
            |r| r.to_vec(),
            CgOptions {
                tol: 1e-30,
                max_iter: 3,
            },
        );
        match r {
            Err(Error::CgNotConverged {
                iterations,
                history,
                ..
            }) => {
                assert_eq!(iterations, 3);
                assert_eq!(history.len(), 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = random_banded_spd(5, 1, 1);
        let out = conjugate_gradient(
            |x| Ok(a.matvec(x)),
            &[0.0; 5],
            None,
            dot,
            |r| r.to_vec(),
            CgOptions {
                tol: 1e-10,
                max_iter: 10,
            },
        )
        .unwrap();
        assert_eq!(out.x, vec![0.0; 5]);
    }
}
