//! Mass and stiffness matrices for the bulk-surface diffusion operator.
//!
//! The stiffness `K` is assembled edge by edge from the energy
//! `d ∫|∇y|² + δ ∫|∇_Γ y|²`: every edge `(i, j)` with conductance `c`
//! contributes `c (y_i - y_j)²`. This makes `K` symmetric, positive
//! semidefinite and annihilates constants by construction. Boundary unknowns
//! are separate degrees of freedom tied to the outermost bulk ring by the
//! half-cell flux, so the diffusion operator is `A = -M⁻¹K` on the pair space.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fields::L2Pair;
use crate::geometry::{Layout, Mesh};
use crate::sparse::{BandedLdl, CsrMatrix};

#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub mesh: Mesh,
    /// Diagonal of the mass matrix (bulk then boundary weights).
    pub mass: Vec<f64>,
    pub stiffness: CsrMatrix,
    pub d: f64,
    pub delta: f64,
}

pub fn assemble(mesh: &Mesh, d: f64, delta: f64) -> Result<DiscreteOperator> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "bulk diffusivity must be positive (got {d})"
        )));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "surface diffusivity must be nonnegative (got {delta})"
        )));
    }
    let nb = mesh.n_bulk();
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    match mesh.layout {
        Layout::Disk {
            n_r,
            n_theta,
            radius,
            h,
        } => {
            let dth = 2.0 * PI / n_theta as f64;
            for j in 0..n_theta {
                edges.push((0, mesh.disk_index(1, j), d * 0.5 * dth));
            }
            for i in 1..n_r {
                let r = i as f64 * h;
                for j in 0..n_theta {
                    let here = mesh.disk_index(i, j);
                    if n_theta > 2 || j == 0 {
                        edges.push((here, mesh.disk_index(i, j + 1), d * h / (r * dth)));
                    }
                    if i + 1 < n_r {
                        let rf = (i as f64 + 0.5) * h;
                        edges.push((here, mesh.disk_index(i + 1, j), d * rf * dth / h));
                    } else {
                        edges.push((here, nb + j, d * radius * dth / (0.5 * h)));
                    }
                }
            }
            if delta > 0.0 {
                for j in 0..n_theta {
                    if n_theta > 2 || j == 0 {
                        edges.push((nb + j, nb + (j + 1) % n_theta, delta / (radius * dth)));
                    }
                }
            }
        }
        Layout::Interval { n, h, .. } => {
            for i in 0..n - 1 {
                edges.push((i, i + 1, d / h));
            }
            edges.push((0, nb, d / (0.5 * h)));
            edges.push((n - 1, nb + 1, d / (0.5 * h)));
        }
    }
    let mut t = Vec::with_capacity(4 * edges.len());
    for &(i, j, c) in &edges {
        t.push((i, i, c));
        t.push((j, j, c));
        t.push((i, j, -c));
        t.push((j, i, -c));
    }
    Ok(DiscreteOperator {
        mesh: mesh.clone(),
        mass: mesh.mass_diagonal(),
        stiffness: CsrMatrix::from_triplets(mesh.n_total(), &t),
        d,
        delta,
    })
}

impl DiscreteOperator {
    pub fn n_total(&self) -> usize {
        self.mass.len()
    }

    pub fn n_bulk(&self) -> usize {
        self.mesh.n_bulk()
    }

    /// `A y = -M⁻¹ K y` on a flat state vector.
    pub fn apply_a(&self, y: &[f64]) -> Vec<f64> {
        let mut out = self.stiffness.matvec(y);
        for (o, m) in out.iter_mut().zip(&self.mass) {
            *o = -*o / m;
        }
        out
    }

    /// Bulk Laplacian `Δy` at bulk nodes, read off the form (`-(Ky)_i / (d w_i)`).
    pub fn bulk_laplacian(&self, y: &[f64]) -> Vec<f64> {
        let ky = self.stiffness.matvec(y);
        (0..self.n_bulk())
            .map(|i| -ky[i] / (self.d * self.mass[i]))
            .collect()
    }

    /// Surface Laplace–Beltrami operator on boundary values (periodic second
    /// difference on the circle, zero on the interval endpoints).
    pub fn surface_laplacian(&self, surface: &[f64]) -> Vec<f64> {
        match self.mesh.layout {
            Layout::Disk {
                n_theta, radius, ..
            } => {
                let ds = radius * 2.0 * PI / n_theta as f64;
                (0..n_theta)
                    .map(|j| {
                        let p = surface[(j + 1) % n_theta];
                        let m = surface[(j + n_theta - 1) % n_theta];
                        (p - 2.0 * surface[j] + m) / (ds * ds)
                    })
                    .collect()
            }
            Layout::Interval { .. } => vec![0.0; surface.len()],
        }
    }

    /// Tangential derivative along the boundary (central, periodic).
    pub fn surface_gradient(&self, surface: &[f64]) -> Vec<f64> {
        match self.mesh.layout {
            Layout::Disk {
                n_theta, radius, ..
            } => {
                let ds = radius * 2.0 * PI / n_theta as f64;
                (0..n_theta)
                    .map(|j| {
                        (surface[(j + 1) % n_theta] - surface[(j + n_theta - 1) % n_theta])
                            / (2.0 * ds)
                    })
                    .collect()
            }
            Layout::Interval { .. } => vec![0.0; surface.len()],
        }
    }

    /// Outward normal derivative at each boundary node from the boundary
    /// value and the two nearest bulk layers (one-sided, second order).
    pub fn normal_derivative(&self, y: &[f64]) -> Vec<f64> {
        let nb = self.n_bulk();
        let h = self.mesh.spacing();
        let stencil = |fb: f64, f1: f64, f2: f64| (8.0 / 3.0 * fb - 3.0 * f1 + f2 / 3.0) / h;
        match self.mesh.layout {
            Layout::Disk { n_r, n_theta, .. } => (0..n_theta)
                .map(|j| {
                    let f1 = y[self.mesh.disk_index(n_r - 1, j)];
                    let f2 = y[self.mesh.disk_index(n_r - 2, j)];
                    stencil(y[nb + j], f1, f2)
                })
                .collect(),
            Layout::Interval { n, .. } => vec![
                stencil(y[nb], y[0], y[1]),
                stencil(y[nb + 1], y[n - 1], y[n - 2]),
            ],
        }
    }

    /// Cartesian gradient at every bulk node. Boundary values enter as the
    /// outer neighbours of the last ring.
    pub fn bulk_gradient(&self, y: &[f64]) -> Vec<[f64; 2]> {
        let nb = self.n_bulk();
        match self.mesh.layout {
            Layout::Disk {
                n_r, n_theta, h, ..
            } => {
                let dth = 2.0 * PI / n_theta as f64;
                let mut g = vec![[0.0; 2]; nb];
                let (mut gx, mut gy) = (0.0, 0.0);
                for j in 0..n_theta {
                    let th = j as f64 * dth;
                    let du = y[self.mesh.disk_index(1, j)] - y[0];
                    gx += du * th.cos();
                    gy += du * th.sin();
                }
                let c = 2.0 / (n_theta as f64 * h);
                g[0] = [c * gx, c * gy];
                for i in 1..n_r {
                    let r = i as f64 * h;
                    for j in 0..n_theta {
                        let th = j as f64 * dth;
                        let here = self.mesh.disk_index(i, j);
                        let inner = if i == 1 {
                            y[0]
                        } else {
                            y[self.mesh.disk_index(i - 1, j)]
                        };
                        let dr = if i + 1 < n_r {
                            (y[self.mesh.disk_index(i + 1, j)] - inner) / (2.0 * h)
                        } else {
                            // Neighbours at -h and +h/2.
                            let outer = y[nb + j];
                            (4.0 * outer - inner - 3.0 * y[here]) / (3.0 * h)
                        };
                        let dt = (y[self.mesh.disk_index(i, j + 1)]
                            - y[self.mesh.disk_index(i, j + n_theta - 1)])
                            / (2.0 * r * dth);
                        g[here] = [dr * th.cos() - dt * th.sin(), dr * th.sin() + dt * th.cos()];
                    }
                }
                g
            }
            Layout::Interval { n, h, .. } => (0..n)
                .map(|i| {
                    let dx = if i == 0 {
                        (y[1] + y[0] * 3.0 - 4.0 * y[nb]) / (3.0 * h)
                    } else if i == n - 1 {
                        (4.0 * y[nb + 1] - y[n - 2] - 3.0 * y[n - 1]) / (3.0 * h)
                    } else {
                        (y[i + 1] - y[i - 1]) / (2.0 * h)
                    };
                    [dx, 0.0]
                })
                .collect(),
        }
    }

    /// Dense `K` (tests and tiny problems only).
    pub fn dense_stiffness(&self) -> DMatrix<f64> {
        self.stiffness.to_dense()
    }

    pub fn mass_triplet_text(&self) -> String {
        CsrMatrix::diagonal_matrix(&self.mass).to_triplet_text()
    }
}

/// Time-dependent multiplier on bulk or boundary nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Potential {
    Zero,
    Constant {
        value: f64,
    },
    /// Piecewise constant in time, nodal in space: `values[k]` applies on
    /// `[times[k], times[k+1])`, the last entry from `times[last]` on.
    Table {
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    /// One nodal field per node of a uniform time grid on `[0, t_final]`.
    Nodal {
        t_final: f64,
        values: Vec<Vec<f64>>,
    },
}

impl Potential {
    pub fn is_zero(&self) -> bool {
        match self {
            Potential::Zero => true,
            Potential::Constant { value } => *value == 0.0,
            _ => false,
        }
    }

    pub fn is_time_independent(&self) -> bool {
        match self {
            Potential::Zero | Potential::Constant { .. } => true,
            Potential::Table { values, .. } | Potential::Nodal { values, .. } => {
                values.windows(2).all(|w| w[0] == w[1])
            }
        }
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        match self {
            Potential::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            Potential::Constant { value } => out.iter_mut().for_each(|v| *v = *value),
            Potential::Table { times, values } => {
                let k = times.iter().rposition(|&s| s <= t).unwrap_or(0);
                out.copy_from_slice(&values[k]);
            }
            Potential::Nodal { t_final, values } => {
                let m = values.len() - 1;
                let k = ((t / t_final) * m as f64).round().clamp(0.0, m as f64) as usize;
                out.copy_from_slice(&values[k]);
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Constant { value } => value.abs(),
            Potential::Table { values, .. } | Potential::Nodal { values, .. } => values
                .iter()
                .flatten()
                .fold(
                    0.0,
                    |m: f64, v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) },
                ),
        }
    }

    fn validate(&self, len: usize, what: &'static str) -> Result<()> {
        match self {
            Potential::Zero => Ok(()),
            Potential::Constant { value } => {
                if value.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!(
                        "{what}: non-finite constant"
                    )))
                }
            }
            Potential::Table { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{what}: table needs one nodal row per breakpoint"
                    )));
                }
                if times.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::InvalidArgument(format!(
                        "{what}: table breakpoints must increase"
                    )));
                }
                for row in values {
                    check_len(what, len, row.len())?;
                }
                Ok(())
            }
            Potential::Nodal { values, t_final } => {
                if values.len() < 2 || !(*t_final > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "{what}: nodal potential needs at least two time nodes"
                    )));
                }
                for row in values {
                    check_len(what, len, row.len())?;
                }
                Ok(())
            }
        }
    }
}

/// The pair `(a, b)` of bulk and boundary potentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialPair {
    pub a: Potential,
    pub b: Potential,
}

impl Default for PotentialPair {
    fn default() -> Self {
        Self::zero()
    }
}

impl PotentialPair {
    pub fn zero() -> Self {
        PotentialPair {
            a: Potential::Zero,
            b: Potential::Zero,
        }
    }

    pub fn constant(a: f64, b: f64) -> Self {
        PotentialPair {
            a: Potential::Constant { value: a },
            b: Potential::Constant { value: b },
        }
    }

    pub fn is_zero(&self) -> bool {
        self.a.is_zero() && self.b.is_zero()
    }

    pub fn is_time_independent(&self) -> bool {
        self.a.is_time_independent() && self.b.is_time_independent()
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<()> {
        self.a.validate(mesh.n_bulk(), "bulk potential")?;
        self.b.validate(mesh.n_surface(), "boundary potential")?;
        if !self.max_abs().is_finite() {
            return Err(Error::InvalidArgument(
                "potential has non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// `max(‖a‖∞, ‖b‖∞)`.
    pub fn max_abs(&self) -> f64 {
        self.a.max_abs().max(self.b.max_abs())
    }

    /// Enforces `‖a‖∞, ‖b‖∞ ≤ bound`.
    pub fn check_bound(&self, bound: f64) -> Result<()> {
        let m = self.max_abs();
        if m <= bound {
            Ok(())
        } else {
            Err(Error::InvariantViolation(format!(
                "potential magnitude {m} exceeds the bound {bound}"
            )))
        }
    }

    /// Diagonal of `B(t)` on the full state vector.
    pub fn diagonal(&self, mesh: &Mesh, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; mesh.n_total()];
        let nb = mesh.n_bulk();
        self.a.eval_into(t, &mut out[..nb]);
        self.b.eval_into(t, &mut out[nb..]);
        out
    }
}

/// `A y - B(t) y`.
pub fn apply_operator(
    op: &DiscreteOperator,
    pot: &PotentialPair,
    t: f64,
    y: &L2Pair,
) -> Result<L2Pair> {
    y.conforms(&op.mesh)?;
    let mut out = op.apply_a(y.as_slice());
    let b = pot.diagonal(&op.mesh, t);
    for ((o, bi), yi) in out.iter_mut().zip(&b).zip(y.as_slice()) {
        *o -= bi * yi;
    }
    L2Pair::from_vec(out, y.n_bulk())
}

/// Smallest eigenpairs of the pencil `(K, M)`, i.e. of `-A`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub values: Vec<f64>,
    /// Eigenvectors normalized to `vᵀ M v = 1`.
    pub vectors: Vec<Vec<f64>>,
    pub iterations: usize,
}

const EIG_MAX_ITER: usize = 1000;
const EIG_TOL: f64 = 1e-13;

/// Shift-invert subspace iteration on `(K + σM)⁻¹ M` with Rayleigh–Ritz
/// extraction.
pub fn spectrum_smallest(op: &DiscreteOperator, k: usize) -> Result<Spectrum> {
    let n = op.n_total();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "requested {k} eigenvalues of a system of size {n}"
        )));
    }
    let p = (2 * k + 4).min(n);
    let sigma = 1.0;
    let shifted = op.stiffness.scaled_plus_diagonal(1.0, sigma, &op.mass);
    let factor = BandedLdl::factor(&shifted)?;
    let mass = &op.mass;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x = DMatrix::<f64>::zeros(n, p);
    for j in 0..p {
        for i in 0..n {
            x[(i, j)] = if j == 0 {
                1.0
            } else {
                rng.gen_range(-1.0..1.0)
            };
        }
    }
    let mut prev: Vec<f64> = vec![f64::INFINITY; k];
    let mut change = f64::INFINITY;
    for it in 1..=EIG_MAX_ITER {
        for j in 0..p {
            let mut col: Vec<f64> = (0..n).map(|i| mass[i] * x[(i, j)]).collect();
            factor.solve_in_place(&mut col);
            for i in 0..n {
                x[(i, j)] = col[i];
            }
        }
        let (vals, vecs) = rayleigh_ritz(op, &x)?;
        x = vecs;
        change = (0..k)
            .map(|i| (vals[i] - prev[i]).abs() / vals[i].abs().max(1.0))
            .fold(0.0, f64::max);
        prev = vals[..k].to_vec();
        if change < EIG_TOL && it > 2 {
            let values: Vec<f64> = prev
                .iter()
                .map(|&v| if v.abs() < 1e-13 { 0.0 } else { v })
                .collect();
            let vectors = (0..k)
                .map(|j| x.column(j).iter().copied().collect())
                .collect();
            return Ok(Spectrum {
                values,
                vectors,
                iterations: it,
            });
        }
    }
    Err(Error::EigenNotConverged {
        iterations: EIG_MAX_ITER,
        change,
    })
}

/// Ritz pairs of `(K, M)` on the span of the columns of `x`, sorted
/// ascending, with M-orthonormal Ritz vectors.
fn rayleigh_ritz(op: &DiscreteOperator, x: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (n, p) = x.shape();
    let mut kx = DMatrix::<f64>::zeros(n, p);
    let mut mx = DMatrix::<f64>::zeros(n, p);
    for j in 0..p {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let kc = op.stiffness.matvec(&col);
        for i in 0..n {
            kx[(i, j)] = kc[i];
            mx[(i, j)] = op.mass[i] * col[i];
        }
    }
    let kp = x.transpose() * &kx;
    let mp = x.transpose() * &mx;
    let kp = 0.5 * (&kp + kp.transpose());
    let mp = 0.5 * (&mp + mp.transpose());
    let chol = mp.cholesky().ok_or_else(|| Error::LinearSolver {
        message: "subspace basis lost rank".into(),
        residual: f64::NAN,
    })?;
    let l = chol.l();
    let linv = l.clone().try_inverse().ok_or_else(|| Error::LinearSolver {
        message: "subspace basis lost rank".into(),
        residual: f64::NAN,
    })?;
    let c = &linv * kp * linv.transpose();
    let c = 0.5 * (&c + c.transpose());
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let coeffs = linv.transpose() * &eig.eigenvectors;
    let mut vals = Vec::with_capacity(p);
    let mut vecs = DMatrix::<f64>::zeros(n, p);
    for (dst, &src) in order.iter().enumerate() {
        vals.push(eig.eigenvalues[src]);
        let v = x * coeffs.column(src);
        vecs.set_column(dst, &v);
    }
    Ok((vals, vecs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::inner;

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn stiffness_is_symmetric_psd_and_kills_constants() {
        for mesh in [
            Mesh::disk(16, 64, 1.0).unwrap(),
            Mesh::interval(50, 1.0).unwrap(),
        ] {
            let op = assemble(&mesh, 1.3, 0.7).unwrap();
            let k = &op.stiffness;
            assert!(k.asymmetry() <= 1e-12 * k.max_abs());
            let ones = vec![1.0; op.n_total()];
            let k1 = k.matvec(&ones);
            assert!(k1.iter().all(|v| v.abs() <= 1e-12 * k.max_abs()));
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for _ in 0..100 {
                let y = random_vec(op.n_total(), &mut rng);
                let q: f64 = y.iter().zip(k.matvec(&y)).map(|(a, b)| a * b).sum();
                let yy: f64 = y.iter().map(|v| v * v).sum();
                assert!(q >= -1e-12 * yy);
            }
        }
    }

    #[test]
    fn negative_surface_diffusivity_rejected() {
        let m = Mesh::disk(4, 8, 1.0).unwrap();
        assert!(assemble(&m, 1.0, -1.0).is_err());
        assert!(assemble(&m, 0.0, 1.0).is_err());
        assert!(assemble(&m, 1.0, 0.0).is_ok());
    }

    #[test]
    fn quadratic_profile_on_the_disk() {
        let n_r = 32;
        let mesh = Mesh::disk(n_r, 64, 1.0).unwrap();
        let d = 1.5;
        let op = assemble(&mesh, d, 1.0).unwrap();
        let mut y: Vec<f64> = mesh
            .bulk_nodes
            .iter()
            .map(|p| 1.0 - p[0] * p[0] - p[1] * p[1])
            .collect();
        y.extend(vec![0.0; mesh.n_surface()]);
        let ay = op.apply_a(&y);
        let h = mesh.spacing();
        // Exact away from the outermost bulk ring.
        let last_ring_start = mesh.disk_index(n_r - 1, 0);
        for (i, v) in ay[..last_ring_start].iter().enumerate() {
            assert!((v + 4.0 * d).abs() < 1e-9, "node {i}: {v}");
        }
        // Half-cell flux at the boundary: first order.
        for v in &ay[mesh.n_bulk()..] {
            assert!((v - 2.0 * d).abs() < d * h, "{v}");
        }
    }

    #[test]
    fn boundary_flux_converges_at_first_order() {
        let err = |n_r: usize| {
            let mesh = Mesh::disk(n_r, 32, 1.0).unwrap();
            let op = assemble(&mesh, 1.0, 1.0).unwrap();
            let mut y: Vec<f64> = mesh
                .bulk_nodes
                .iter()
                .map(|p| 1.0 - p[0] * p[0] - p[1] * p[1])
                .collect();
            y.extend(vec![0.0; mesh.n_surface()]);
            let ay = op.apply_a(&y);
            (ay[mesh.n_bulk()] - 2.0).abs()
        };
        let (e1, e2) = (err(16), err(32));
        assert!(e2 < 0.6 * e1, "{e1} {e2}");
    }

    #[test]
    fn operator_is_self_adjoint_in_the_mass_product() {
        let mesh = Mesh::disk(8, 24, 1.0).unwrap();
        let op = assemble(&mesh, 1.0, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let y = L2Pair::from_vec(random_vec(op.n_total(), &mut rng), mesh.n_bulk()).unwrap();
            let z = L2Pair::from_vec(random_vec(op.n_total(), &mut rng), mesh.n_bulk()).unwrap();
            let ay = L2Pair::from_vec(op.apply_a(y.as_slice()), mesh.n_bulk()).unwrap();
            let az = L2Pair::from_vec(op.apply_a(z.as_slice()), mesh.n_bulk()).unwrap();
            let l = inner(&ay, &z, &mesh).unwrap();
            let r = inner(&y, &az, &mesh).unwrap();
            assert!((l - r).abs() <= 1e-12 * l.abs().max(r.abs()));
        }
    }

    #[test]
    fn mass_functional_annihilates_range_of_a() {
        let mesh = Mesh::disk(6, 16, 1.0).unwrap();
        let op = assemble(&mesh, 2.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = random_vec(op.n_total(), &mut rng);
        let ay = op.apply_a(&y);
        let ell: f64 = ay.iter().zip(&op.mass).map(|(a, m)| a * m).sum();
        assert!(ell.abs() < 1e-11);
    }

    #[test]
    fn potentials_shift_constants() {
        let mesh = Mesh::disk(6, 16, 1.0).unwrap();
        let op = assemble(&mesh, 1.0, 1.0).unwrap();
        let one = L2Pair::constant(&mesh, 1.0);
        let out = apply_operator(&op, &PotentialPair::constant(1.0, 1.0), 0.3, &one).unwrap();
        assert!(out.as_slice().iter().all(|v| (v + 1.0).abs() < 1e-12));
        let out = apply_operator(&op, &PotentialPair::zero(), 0.3, &one).unwrap();
        assert!(out.max_abs() < 1e-12);
    }

    #[test]
    fn apply_operator_matches_dense_assembly() {
        let mesh = Mesh::disk(5, 12, 1.0).unwrap();
        let op = assemble(&mesh, 0.8, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pot = PotentialPair {
            a: Potential::Table {
                times: vec![0.0, 0.5],
                values: vec![
                    random_vec(mesh.n_bulk(), &mut rng),
                    random_vec(mesh.n_bulk(), &mut rng),
                ],
            },
            b: Potential::Constant { value: -0.3 },
        };
        let t = 0.7;
        let y = L2Pair::from_vec(random_vec(op.n_total(), &mut rng), mesh.n_bulk()).unwrap();
        let k = op.dense_stiffness();
        let minv = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            op.n_total(),
            op.mass.iter().map(|m| 1.0 / m),
        ));
        let b = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(pot.diagonal(&mesh, t)));
        let dense = -(minv * k) - b;
        let expect = dense * nalgebra::DVector::from_column_slice(y.as_slice());
        let got = apply_operator(&op, &pot, t, &y).unwrap();
        let scale = expect.amax();
        for (g, e) in got.as_slice().iter().zip(expect.iter()) {
            assert!((g - e).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn normal_derivative_of_eta_profile() {
        let mesh = Mesh::disk(16, 32, 1.0).unwrap();
        let op = assemble(&mesh, 1.0, 1.0).unwrap();
        let y = L2Pair::sample(&mesh, |p| 1.0 - p[0] * p[0] - p[1] * p[1]);
        for v in op.normal_derivative(y.as_slice()) {
            assert!((v + 2.0).abs() < 1e-10, "{v}");
        }
        let line = Mesh::interval(10, 1.0).unwrap();
        let op = assemble(&line, 1.0, 0.0).unwrap();
        let y = L2Pair::sample(&line, |p| p[0] * p[0]);
        let dn = op.normal_derivative(y.as_slice());
        assert!(dn[0].abs() < 1e-12 && (dn[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_linear_field_is_exact() {
        let mesh = Mesh::disk(8, 32, 1.0).unwrap();
        let op = assemble(&mesh, 1.0, 1.0).unwrap();
        let y = L2Pair::sample(&mesh, |p| 2.0 * p[0] - 0.5 * p[1]);
        for g in op.bulk_gradient(y.as_slice()) {
            assert!(
                (g[0] - 2.0).abs() < 2e-2 && (g[1] + 0.5).abs() < 2e-2,
                "{g:?}"
            );
        }
    }

    #[test]
    fn surface_operators_on_a_mode() {
        let mesh = Mesh::disk(4, 128, 1.0).unwrap();
        let op = assemble(&mesh, 1.0, 1.0).unwrap();
        let s: Vec<f64> = mesh
            .boundary_nodes
            .iter()
            .map(|p| p[1].atan2(p[0]).cos() * 1.0)
            .collect();
        let lap = op.surface_laplacian(&s);
        for (l, v) in lap.iter().zip(&s) {
            assert!((l + v).abs() < 1e-3);
        }
        let sum: f64 = lap
            .iter()
            .zip(&mesh.boundary_weights)
            .map(|(a, w)| a * w)
            .sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn spectrum_matches_dense_oracle() {
        let mesh = Mesh::disk(5, 12, 1.0).unwrap();
        let op = assemble(&mesh, 1.0, 1.0).unwrap();
        let spec = spectrum_smallest(&op, 6).unwrap();
        let n = op.n_total();
        let s = nalgebra::DVector::from_iterator(n, op.mass.iter().map(|m| 1.0 / m.sqrt()));
        let sm = DMatrix::from_diagonal(&s);
        let c = &sm * op.dense_stiffness() * &sm;
        let mut ev: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        for (a, b) in spec.values.iter().zip(&ev) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert_eq!(spec.values[0], 0.0);
        let v0 = &spec.vectors[0];
        assert!(v0.iter().all(|v| (v - v0[0]).abs() < 1e-8));
        assert!(spec.values.iter().all(|&v| v >= -1e-10));
    }

    #[test]
    fn spectrum_request_is_validated() {
        let mesh = Mesh::interval(4, 1.0).unwrap();
        let op = assemble(&mesh, 1.0, 0.0).unwrap();
        assert!(spectrum_smallest(&op, 0).is_err());
        assert!(spectrum_smallest(&op, 7).is_err());
    }
}
