//! Observability constants for the backward system and the forward
//! final-state inequality.
//!
//! Everything is expressed through the control-to-final-state map
//! `L_T v = y(T)` (zero initial state, source `v` on ω) and its mass adjoint
//! `L_T* φ_T = 𝟙_ω φ`, where `φ` solves the homogeneous backward problem.
//! The Gramian `Λ = L_T L_T*` then satisfies
//! `⟨Λφ_T, φ_T⟩_M = Σ_k c_k dt ‖φ^k‖²_ω` exactly.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::evolution::{ControlSignal, EvolutionConfig, NoForcing, Propagator};
use crate::fields::{mass_dot, L2Pair};
use crate::geometry::ControlRegion;
use crate::operators::{spectrum_smallest, DiscreteOperator, PotentialPair};
use crate::sparse::{conjugate_gradient_budget, CgOptions};

/// `L_T`, `L_T*` and `Λ` for one operator, potential, region and time grid.
pub struct Gramian<'a> {
    pub prop: Propagator<'a>,
    pub region: &'a ControlRegion,
    weights: Vec<f64>,
}

/// One homogeneous backward solve, summarized.
#[derive(Debug, Clone)]
pub struct BackwardSummary {
    /// `φ(0)`.
    pub initial: Vec<f64>,
    /// `Σ_k c_k dt ‖φ^k‖²_ω`.
    pub observed: f64,
}

impl<'a> Gramian<'a> {
    pub fn new(
        op: &'a DiscreteOperator,
        pot: &PotentialPair,
        region: &'a ControlRegion,
        cfg: &EvolutionConfig,
    ) -> Result<Self> {
        if region.support.is_empty() {
            return Err(Error::EmptyRegion("observation region has no nodes".into()));
        }
        check_len("region indicator", op.n_bulk(), region.indicator.len())?;
        Ok(Gramian {
            prop: Propagator::new(op, pot, cfg)?,
            region,
            weights: cfg.duality_weights(),
        })
    }

    pub fn n(&self) -> usize {
        self.prop.n()
    }

    pub fn mass(&self) -> &[f64] {
        &self.prop.op.mass
    }

    pub fn cfg(&self) -> &EvolutionConfig {
        &self.prop.cfg
    }

    /// `L_T* φ_T`.
    pub fn adjoint(&self, phi_t: &[f64]) -> Result<ControlSignal> {
        let states = self.prop.backward(phi_t, &NoForcing)?;
        Ok(ControlSignal::restrict(self.region, &states))
    }

    /// `L_T v`.
    pub fn final_state(&self, v: &ControlSignal) -> Result<Vec<f64>> {
        let zero = vec![0.0; self.n()];
        let mut states = self.prop.forward(&zero, v)?;
        Ok(states.pop().unwrap_or_default())
    }

    /// `Λ φ_T`.
    pub fn apply(&self, phi_t: &[f64]) -> Result<Vec<f64>> {
        self.final_state(&self.adjoint(phi_t)?)
    }

    /// `φ(0)` and the observed energy from a single backward pass, without
    /// storing the trajectory.
    pub fn backward_summary(&self, phi_t: &[f64]) -> Result<BackwardSummary> {
        check_len("terminal state", self.n(), phi_t.len())?;
        let m = self.prop.steps();
        let mass = self.mass();
        let on_support = |x: &[f64]| -> f64 {
            self.region
                .support
                .iter()
                .map(|&i| mass[i] * x[i] * x[i])
                .sum()
        };
        let mut phi = phi_t.to_vec();
        let mut observed = self.weights[m] * on_support(&phi);
        for n in (0..m).rev() {
            phi = self.prop.step_adjoint(n, &phi)?;
            observed += self.weights[n] * on_support(&phi);
        }
        Ok(BackwardSummary {
            initial: phi,
            observed,
        })
    }

    /// Homogeneous forward map `y0 ↦ y(T)`, the mass adjoint of `φ_T ↦ φ(0)`.
    pub fn forward_final(&self, y0: &[f64]) -> Result<Vec<f64>> {
        let mut y = y0.to_vec();
        for n in 0..self.prop.steps() {
            y = self.prop.step(n, &y)?;
        }
        Ok(y)
    }

    /// `‖φ(0)‖²_M / ⟨Λφ_T, φ_T⟩_M`.
    pub fn backward_quotient(&self, phi_t: &[f64]) -> Result<f64> {
        let s = self.backward_summary(phi_t)?;
        quotient(mass_dot(self.mass(), &s.initial, &s.initial), s.observed)
    }

    /// Hutchinson estimate of `tr Λ` with Rademacher probes.
    pub fn trace_estimate(&self, probes: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zs: Vec<Vec<f64>> = (0..probes.max(1))
            .map(|_| {
                (0..self.n())
                    .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        let vals = zs
            .iter()
            .map(|z| Ok(crate::sparse::dot(z, &self.apply(z)?)))
            .collect::<Result<Vec<f64>>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn quotient(num: f64, den: f64) -> Result<f64> {
    if den > 0.0 {
        Ok(num / den)
    } else if num == 0.0 {
        Err(Error::UndefinedRatio(
            "datum is invisible and vanishes".into(),
        ))
    } else {
        Ok(f64::INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservabilityOptions {
    /// Relative change of the quotient that ends the power iteration.
    pub tol: f64,
    pub max_iter: usize,
    /// CG budget for each shifted Gramian solve.
    pub inner_max_iter: usize,
    pub inner_tol: f64,
    /// Number of low modes of `-A` used for the starting guess.
    pub modes: usize,
    pub trace_probes: usize,
    pub shift_factor: f64,
    pub seed: u64,
}

impl Default for ObservabilityOptions {
    fn default() -> Self {
        ObservabilityOptions {
            tol: 1e-4,
            max_iter: 40,
            inner_max_iter: 60,
            inner_tol: 1e-8,
            modes: 30,
            trace_probes: 4,
            shift_factor: 1e-10,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservabilityReport {
    pub constant: f64,
    pub iterations: usize,
    /// Relative change of the quotient over the last power step.
    pub residual: f64,
    pub shift: f64,
    pub trace_estimate: f64,
    /// Quotient of the constant datum `(1, 1)`.
    pub constant_datum_quotient: f64,
    /// Best quotient after the modal Rayleigh–Ritz start.
    pub modal_quotient: f64,
    pub history: Vec<f64>,
    pub maximizer: L2Pair,
}

/// Estimates `sup ‖φ(0)‖² / ∫∫_ω |φ|²` by Rayleigh–Ritz on low modes of
/// `-A` followed by shifted power iteration on `(Λ + ε)⁻¹ R*R`, where
/// `R φ_T = φ(0)`. Every reported quotient is evaluated exactly, so the
/// constant is a certified lower bound for the discrete problem.
pub fn estimate_backward_observability(
    op: &DiscreteOperator,
    pot: &PotentialPair,
    region: &ControlRegion,
    cfg: &EvolutionConfig,
    opts: &ObservabilityOptions,
) -> Result<ObservabilityReport> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive (got {})",
            opts.tol
        )));
    }
    let gram = Gramian::new(op, pot, region, cfg)?;
    let mass = gram.mass().to_vec();
    let n = gram.n();
    let m_norm = |x: &[f64]| mass_dot(&mass, x, x).sqrt();

    let ones = vec![1.0; n];
    let constant_datum_quotient = gram.backward_quotient(&ones)?;

    // (initial state, trace on ω per time node) of each backward mode
    type ModalSummary = (Vec<f64>, Vec<Vec<f64>>);
    // Modal start: generalized eigenproblem A c = q B c on span{v_i}.
    let k = opts.modes.clamp(1, n);
    let spec = spectrum_smallest(op, k)?;
    let summaries: Vec<Result<ModalSummary>> = spec
        .vectors
        .par_iter()
        .map(|v| {
            let states = gram.prop.backward(v, &NoForcing)?;
            let restricted = states
                .iter()
                .map(|s| region.support.iter().map(|&i| s[i]).collect())
                .collect();
            Ok((states[0].clone(), restricted))
        })
        .collect();
    let summaries = summaries.into_iter().collect::<Result<Vec<_>>>()?;
    let w = cfg.duality_weights();
    let supp_mass: Vec<f64> = region.support.iter().map(|&i| mass[i]).collect();
    let mut a = DMatrix::<f64>::zeros(k, k);
    let mut b = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let aij = mass_dot(&mass, &summaries[i].0, &summaries[j].0);
            let bij: f64 = w
                .iter()
                .zip(summaries[i].1.iter().zip(&summaries[j].1))
                .map(|(wk, (x, y))| wk * mass_dot(&supp_mass, x, y))
                .sum();
            a[(i, j)] = aij;
            a[(j, i)] = aij;
            b[(i, j)] = bij;
            b[(j, i)] = bij;
        }
    }
    let mut x = modal_maximizer(&a, &b, &spec.vectors).unwrap_or_else(|| ones.clone());
    let nx = m_norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut q = gram.backward_quotient(&x)?;
    let modal_quotient = q;

    let trace = gram.trace_estimate(opts.trace_probes, opts.seed)?;
    let shift = opts.shift_factor * trace.max(0.0);

    let (mut best_q, mut best_x) = if constant_datum_quotient > q {
        (constant_datum_quotient, ones.clone())
    } else {
        (q, x.clone())
    };
    let mut history = vec![q];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let inner = |u: &[f64], v: &[f64]| mass_dot(&mass, u, v);
    while iterations < opts.max_iter {
        iterations += 1;
        let rx = gram.backward_summary(&x)?.initial;
        let rhs = gram.forward_final(&rx)?;
        let guess: Vec<f64> = x.iter().map(|v| v * q).collect();
        let out = conjugate_gradient_budget(
            |p| {
                let mut y = gram.apply(p)?;
                for (yi, pi) in y.iter_mut().zip(p) {
                    *yi += shift * pi;
                }
                Ok(y)
            },
            &rhs,
            Some(guess),
            inner,
            |r| r.to_vec(),
            CgOptions {
                tol: opts.inner_tol,
                max_iter: opts.inner_max_iter,
            },
        )?;
        let mut next = out.x;
        let nn = m_norm(&next);
        if !(nn > 0.0 && nn.is_finite()) {
            break;
        }
        next.iter_mut().for_each(|v| *v /= nn);
        let q_new = gram.backward_quotient(&next)?;
        history.push(q_new);
        residual = (q_new - q).abs() / q_new.abs().max(f64::MIN_POSITIVE);
        if q_new > best_q {
            best_q = q_new;
            best_x = next.clone();
        }
        x = next;
        q = q_new;
        if residual <= opts.tol {
            break;
        }
    }
    if residual > opts.tol {
        return Err(Error::EigenNotConverged {
            iterations,
            change: residual,
        });
    }
    Ok(ObservabilityReport {
        constant: best_q,
        iterations,
        residual,
        shift,
        trace_estimate: trace,
        constant_datum_quotient,
        modal_quotient,
        history,
        maximizer: L2Pair::from_vec(best_x, op.n_bulk())?,
    })
}

/// Top generalized eigenvector of `(a, b)` expanded in `basis`.
fn modal_maximizer(a: &DMatrix<f64>, b: &DMatrix<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let k = a.nrows();
    let scale = (0..k).map(|i| b[(i, i)]).fold(0.0, f64::max);
    let mut bj = b.clone();
    for i in 0..k {
        bj[(i, i)] += 1e-14 * scale;
    }
    let l = bj.cholesky()?.l();
    let linv = l.try_inverse()?;
    let c = &linv * a * linv.transpose();
    let c = 0.5 * (&c + c.transpose());
    let eig = SymmetricEigen::new(c);
    let top = (0..k).max_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]))?;
    let coeff = linv.transpose() * eig.eigenvectors.column(top);
    let n = basis[0].len();
    let mut x = vec![0.0; n];
    for (c, v) in coeff.iter().zip(basis) {
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi += c * vi;
        }
    }
    Some(x)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardReport {
    /// `‖y(T)‖² / Σ_k c_k dt ‖y^k‖²_ω` per sample.
    pub quotients: Vec<f64>,
    pub max: f64,
    /// Backward constant used for the comparison, if supplied.
    pub backward_constant: Option<f64>,
    pub within_bound: Option<bool>,
}

/// Relative slack allowed when comparing against the backward constant.
pub const FORWARD_BOUND_SLACK: f64 = 1e-8;

pub fn check_forward_final_state(
    op: &DiscreteOperator,
    pot: &PotentialPair,
    region: &ControlRegion,
    cfg: &EvolutionConfig,
    samples: &[L2Pair],
    backward_constant: Option<f64>,
) -> Result<ForwardReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no initial states supplied".into()));
    }
    if region.support.is_empty() {
        return Err(Error::EmptyRegion("observation region has no nodes".into()));
    }
    let prop = Propagator::new(op, pot, cfg)?;
    let w = cfg.duality_weights();
    let mass = &op.mass;
    let quotients = samples
        .par_iter()
        .map(|y0| {
            y0.conforms(&op.mesh)?;
            let states = prop.forward(y0.as_slice(), &NoForcing)?;
            let den: f64 = states
                .iter()
                .zip(&w)
                .map(|(s, wk)| {
                    wk * region
                        .support
                        .iter()
                        .map(|&i| mass[i] * s[i] * s[i])
                        .sum::<f64>()
                })
                .sum();
            let last = &states[states.len() - 1];
            quotient(mass_dot(mass, last, last), den)
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = quotients.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ForwardReport {
        within_bound: backward_constant.map(|c| max <= c * (1.0 + FORWARD_BOUND_SLACK)),
        backward_constant,
        quotients,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{control_mask, Mesh, RegionDescriptor};
    use crate::operators::assemble;

    fn small() -> (DiscreteOperator, ControlRegion) {
        let mesh = Mesh::disk(6, 16, 1.0).unwrap();
        let op = assemble(&mesh, 1.0, 1.0).unwrap();
        let w = control_mask(
            &mesh,
            &RegionDescriptor::Disk {
                center: [0.0, 0.0],
                radius: 0.5,
            },
        )
        .unwrap();
        (op, w)
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gramian_is_symmetric_and_matches_observed_energy() {
        let (op, w) = small();
        let cfg = EvolutionConfig::new(1.0, 20);
        let g = Gramian::new(&op, &PotentialPair::zero(), &w, &cfg).unwrap();
        let u = random(op.n_total(), 1);
        let v = random(op.n_total(), 2);
        let a = mass_dot(&op.mass, &g.apply(&u).unwrap(), &v);
        let b = mass_dot(&op.mass, &u, &g.apply(&v).unwrap());
        assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()));
        let e = mass_dot(&op.mass, &g.apply(&u).unwrap(), &u);
        let s = g.backward_summary(&u).unwrap();
        assert!((e - s.observed).abs() <= 1e-12 * e);
        let lt = g.adjoint(&u).unwrap();
        assert!((lt.norm_sq(&op.mass, &cfg) - e).abs() <= 1e-12 * e);
    }

    #[test]
    fn forward_final_is_adjoint_of_backward_initial() {
        let (op, w) = small();
        let cfg = EvolutionConfig::new(0.5, 15).with_theta(0.75);
        let pot = PotentialPair::constant(0.3, -0.2);
        let g = Gramian::new(&op, &pot, &w, &cfg).unwrap();
        let u = random(op.n_total(), 3);
        let v = random(op.n_total(), 4);
        let a = mass_dot(&op.mass, &g.forward_final(&u).unwrap(), &v);
        let b = mass_dot(&op.mass, &u, &g.backward_summary(&v).unwrap().initial);
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-3));
    }

    #[test]
    fn constant_datum_quotient_for_full_observation() {
        let (op, _) = small();
        let full = ControlRegion::full_observation(&op.mesh);
        let cfg = EvolutionConfig::new(2.0, 10);
        let g = Gramian::new(&op, &PotentialPair::zero(), &full, &cfg).unwrap();
        let q = g.backward_quotient(&vec![1.0; op.n_total()]).unwrap();
        assert!((q - 0.5).abs() < 1e-13);
    }

    #[test]
    fn estimate_full_observation() {
        let (op, _) = small();
        let full = ControlRegion::full_observation(&op.mesh);
        let cfg = EvolutionConfig::new(1.0, 40);
        let r = estimate_backward_observability(
            &op,
            &PotentialPair::zero(),
            &full,
            &cfg,
            &Default::default(),
        )
        .unwrap();
        assert!((r.constant - 1.0).abs() < 1e-6, "{}", r.constant);
        let g = Gramian::new(&op, &PotentialPair::zero(), &full, &cfg).unwrap();
        let q = g.backward_quotient(r.maximizer.as_slice()).unwrap();
        assert!((q - r.constant).abs() <= 1e-12 * q);
    }

    #[test]
    fn forward_quotients() {
        let (op, w) = small();
        let cfg = EvolutionConfig::new(1.0, 20);
        let pot = PotentialPair::zero();
        let ones = L2Pair::constant(&op.mesh, 1.0);
        let r = check_forward_final_state(&op, &pot, &w, &cfg, std::slice::from_ref(&ones), None)
            .unwrap();
        let g = Gramian::new(&op, &pot, &w, &cfg).unwrap();
        let back = g.backward_quotient(ones.as_slice()).unwrap();
        assert!((r.max - back).abs() <= 1e-12 * back);
        assert!(check_forward_final_state(&op, &pot, &w, &cfg, &[], None).is_err());
    }
}
