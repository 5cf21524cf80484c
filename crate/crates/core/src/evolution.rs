//! θ-scheme time stepping for the forward system and its exact discrete adjoint.
//!
//! With `S_n = K + M B(t_n)`, `P_n = M + θ dt S_n` and `E_n = M - (1-θ) dt S_n`,
//! one forward step reads
//!
//! ```text
//! y^{n+1} = G_n (y^n + (1-θ) dt F_n) + θ dt F_{n+1},    G_n = P_{n+1}⁻¹ E_n .
//! ```
//!
//! Sources enter as half steps on either side of the diffusion step. This
//! keeps the scheme second order at θ = 1/2 and makes the source-to-final-state
//! map an exact transpose of the homogeneous backward recursion
//! `φ^n = G_n* φ^{n+1}` in the mass inner product, with time weights
//! `c_0 = 1-θ`, `c_M = θ` and `c_k = 1` otherwise.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fields::{mass_dot, L2Pair, Trajectory};
use crate::geometry::{ControlRegion, Mesh};
use crate::operators::{DiscreteOperator, PotentialPair};
use crate::sparse::{conjugate_gradient, dot, BandedLdl, CgOptions, CsrMatrix};

/// Above this many unknowns the stepper switches to Jacobi-preconditioned CG.
pub const DIRECT_SOLVER_LIMIT: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    #[default]
    Auto,
    Direct,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub t_final: f64,
    pub steps: usize,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Relative residual accepted from each linear solve.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub solver: SolverKind,
}

fn default_theta() -> f64 {
    0.5
}

fn default_tol() -> f64 {
    1e-10
}

impl EvolutionConfig {
    pub fn new(t_final: f64, steps: usize) -> Self {
        EvolutionConfig {
            t_final,
            steps,
            theta: default_theta(),
            tol: default_tol(),
            solver: SolverKind::Auto,
        }
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "final time must be positive (got {})",
                self.t_final
            )));
        }
        if self.steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "at least two time steps are required (got {})",
                self.steps
            )));
        }
        if !(0.5..=1.0).contains(&self.theta) {
            return Err(Error::InvalidArgument(format!(
                "theta must lie in [1/2, 1] (got {})",
                self.theta
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "solver tolerance must be positive (got {})",
                self.tol
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.steps {
            self.t_final
        } else {
            n as f64 * self.dt()
        }
    }

    /// Per-node weights `c_k dt` of the discrete duality pairing.
    pub fn duality_weights(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..=self.steps)
            .map(|k| {
                let c = if k == 0 {
                    1.0 - self.theta
                } else if k == self.steps {
                    self.theta
                } else {
                    1.0
                };
                c * dt
            })
            .collect()
    }

    /// Composite trapezoidal weights.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..=self.steps)
            .map(|k| {
                if k == 0 || k == self.steps {
                    0.5 * dt
                } else {
                    dt
                }
            })
            .collect()
    }
}

/// A space-time field on bulk or boundary nodes.
#[derive(Clone, Default)]
pub enum TimeField {
    #[default]
    Zero,
    /// One nodal vector per time node.
    Nodal(Vec<Vec<f64>>),
    /// Pointwise evaluator `(t, node) -> value`.
    Function(Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>),
}

impl fmt::Debug for TimeField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeField::Zero => write!(f, "Zero"),
            TimeField::Nodal(v) => write!(f, "Nodal({} nodes)", v.len()),
            TimeField::Function(_) => write!(f, "Function"),
        }
    }
}

impl TimeField {
    pub fn function(f: impl Fn(f64, usize) -> f64 + Send + Sync + 'static) -> Self {
        TimeField::Function(Arc::new(f))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, TimeField::Zero)
    }

    fn add_to(&self, n: usize, t: f64, out: &mut [f64]) {
        match self {
            TimeField::Zero => {}
            TimeField::Nodal(v) => {
                for (o, x) in out.iter_mut().zip(&v[n]) {
                    *o += x;
                }
            }
            TimeField::Function(f) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o += f(t, i);
                }
            }
        }
    }

    fn validate(&self, steps: usize, len: usize, what: &'static str) -> Result<()> {
        if let TimeField::Nodal(v) = self {
            check_len(what, steps + 1, v.len())?;
            for row in v {
                check_len(what, len, row.len())?;
            }
        }
        Ok(())
    }

    /// Values at every time node as a trajectory component.
    pub fn sample(&self, cfg: &EvolutionConfig, len: usize) -> Vec<Vec<f64>> {
        (0..=cfg.steps)
            .map(|n| {
                let mut out = vec![0.0; len];
                self.add_to(n, cfg.time(n), &mut out);
                out
            })
            .collect()
    }
}

/// Control values per time node, stored on `region.support` only, so the
/// control vanishes outside ω by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    pub support: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl ControlSignal {
    pub fn zeros(region: &ControlRegion, steps: usize) -> Self {
        ControlSignal {
            support: region.support.clone(),
            values: vec![vec![0.0; region.support.len()]; steps + 1],
        }
    }

    pub fn from_values(region: &ControlRegion, values: Vec<Vec<f64>>) -> Result<Self> {
        for row in &values {
            check_len("ControlSignal", region.support.len(), row.len())?;
        }
        Ok(ControlSignal {
            support: region.support.clone(),
            values,
        })
    }

    /// Restriction of full state vectors to the support.
    pub fn restrict(region: &ControlRegion, states: &[Vec<f64>]) -> Self {
        let values = states
            .iter()
            .map(|s| region.support.iter().map(|&i| s[i]).collect())
            .collect();
        ControlSignal {
            support: region.support.clone(),
            values,
        }
    }

    /// Expands to a full-length trajectory (zero off the support).
    pub fn to_trajectory(&self, mesh: &Mesh, t_final: f64) -> Result<Trajectory> {
        let states = self
            .values
            .iter()
            .map(|row| {
                let mut s = L2Pair::zeros(mesh);
                let d = s.as_mut_slice();
                for (&i, &v) in self.support.iter().zip(row) {
                    d[i] = v;
                }
                s
            })
            .collect();
        Trajectory::new(t_final, states)
    }

    /// `Σ_k c_k dt Σ_{i∈ω} m_i u_i w_i`, the pairing on `L²(ω_T)`.
    pub fn inner(&self, other: &ControlSignal, mass: &[f64], cfg: &EvolutionConfig) -> f64 {
        let w = cfg.duality_weights();
        self.values
            .iter()
            .zip(&other.values)
            .zip(&w)
            .map(|((a, b), wk)| {
                wk * self
                    .support
                    .iter()
                    .zip(a.iter().zip(b))
                    .map(|(&i, (x, y))| mass[i] * x * y)
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn norm_sq(&self, mass: &[f64], cfg: &EvolutionConfig) -> f64 {
        self.inner(self, mass, cfg)
    }

    /// Largest magnitude over all nodes (the support only carries data).
    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    pub fn as_flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn from_flat(&self, flat: &[f64]) -> ControlSignal {
        let k = self.support.len();
        ControlSignal {
            support: self.support.clone(),
            values: flat.chunks(k.max(1)).map(|c| c.to_vec()).collect(),
        }
    }
}

/// Anything that contributes a source `F_n` at time node `n`.
pub trait Forcing {
    fn add_to(&self, n: usize, t: f64, out: &mut [f64]);
    fn is_zero(&self) -> bool {
        false
    }
}

pub struct NoForcing;

impl Forcing for NoForcing {
    fn add_to(&self, _: usize, _: f64, _: &mut [f64]) {}
    fn is_zero(&self) -> bool {
        true
    }
}

/// Full-length nodal sources, one per time node.
pub struct NodalForcing<'a>(pub &'a [Vec<f64>]);

impl Forcing for NodalForcing<'_> {
    fn add_to(&self, n: usize, _: f64, out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(&self.0[n]) {
            *o += x;
        }
    }
}

impl Forcing for ControlSignal {
    fn add_to(&self, n: usize, _: f64, out: &mut [f64]) {
        for (&i, v) in self.support.iter().zip(&self.values[n]) {
            out[i] += v;
        }
    }
}

/// Data of the forward problem: sources `f`, `g`, control `v` and `y₀`.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub f: TimeField,
    pub g: TimeField,
    pub v: Option<ControlSignal>,
    pub y0: L2Pair,
}

impl SourceData {
    pub fn homogeneous(y0: L2Pair) -> Self {
        SourceData {
            f: TimeField::Zero,
            g: TimeField::Zero,
            v: None,
            y0,
        }
    }

    pub fn validate(&self, mesh: &Mesh, cfg: &EvolutionConfig) -> Result<()> {
        self.y0.conforms(mesh)?;
        self.f.validate(cfg.steps, mesh.n_bulk(), "bulk source")?;
        self.g
            .validate(cfg.steps, mesh.n_surface(), "boundary source")?;
        if let Some(v) = &self.v {
            check_len("control time nodes", cfg.steps + 1, v.values.len())?;
            if v.support.iter().any(|&i| i >= mesh.n_total()) {
                return Err(Error::InvalidArgument(
                    "control support outside the mesh".into(),
                ));
            }
        }
        Ok(())
    }

    /// Source part only (without `y₀`).
    pub fn forcing(&self, n_bulk: usize) -> SourceForcing<'_> {
        SourceForcing { src: self, n_bulk }
    }
}

pub struct SourceForcing<'a> {
    src: &'a SourceData,
    n_bulk: usize,
}

impl Forcing for SourceForcing<'_> {
    fn add_to(&self, n: usize, t: f64, out: &mut [f64]) {
        let (bulk, surf) = out.split_at_mut(self.n_bulk);
        self.src.f.add_to(n, t, bulk);
        self.src.g.add_to(n, t, surf);
        if let Some(v) = &self.src.v {
            v.add_to(n, t, out);
        }
    }

    fn is_zero(&self) -> bool {
        self.src.f.is_zero() && self.src.g.is_zero() && self.src.v.is_none()
    }
}

/// Boundary/bulk sources `f`, `g` of the backward problem.
pub struct PairForcing<'a> {
    pub f: &'a TimeField,
    pub g: &'a TimeField,
    pub n_bulk: usize,
}

impl Forcing for PairForcing<'_> {
    fn add_to(&self, n: usize, t: f64, out: &mut [f64]) {
        let (bulk, surf) = out.split_at_mut(self.n_bulk);
        self.f.add_to(n, t, bulk);
        self.g.add_to(n, t, surf);
    }

    fn is_zero(&self) -> bool {
        self.f.is_zero() && self.g.is_zero()
    }
}

#[derive(Debug)]
enum Solver {
    Direct(BandedLdl),
    Iterative(Vec<f64>),
}

#[derive(Debug)]
struct Factor {
    matrix: CsrMatrix,
    solver: Solver,
}

impl Factor {
    fn new(matrix: CsrMatrix, kind: SolverKind) -> Result<Self> {
        let iterative = match kind {
            SolverKind::Auto => matrix.dim() > DIRECT_SOLVER_LIMIT,
            SolverKind::Direct => false,
            SolverKind::Iterative => true,
        };
        let solver = if iterative {
            Solver::Iterative(matrix.diagonal().iter().map(|d| 1.0 / d).collect())
        } else {
            Solver::Direct(BandedLdl::factor(&matrix)?)
        };
        Ok(Factor { matrix, solver })
    }

    fn solve(&self, rhs: &[f64], tol: f64) -> Result<Vec<f64>> {
        let x = match &self.solver {
            Solver::Direct(f) => {
                let mut x = rhs.to_vec();
                f.solve_in_place(&mut x);
                x
            }
            Solver::Iterative(inv_diag) => {
                let out = conjugate_gradient(
                    |p| Ok(self.matrix.matvec(p)),
                    rhs,
                    None,
                    dot,
                    |r| r.iter().zip(inv_diag).map(|(a, b)| a * b).collect(),
                    CgOptions {
                        tol: 0.1 * tol,
                        max_iter: 20 * rhs.len().max(100),
                    },
                )
                .map_err(|e| Error::LinearSolver {
                    message: format!("inner CG failed: {e}"),
                    residual: match e {
                        Error::CgNotConverged { residual, .. } => residual,
                        _ => f64::NAN,
                    },
                })?;
                out.x
            }
        };
        let ax = self.matrix.matvec(&x);
        let rn: f64 = ax
            .iter()
            .zip(rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let bn: f64 = rhs.iter().map(|b| b * b).sum::<f64>().sqrt();
        let rel = if bn > 0.0 { rn / bn } else { rn };
        if !(rel <= tol) {
            return Err(Error::LinearSolver {
                message: "step system residual above tolerance".into(),
                residual: rel,
            });
        }
        Ok(x)
    }
}

/// Precomputed step matrices for one operator, potential and time grid.
pub struct Propagator<'a> {
    pub op: &'a DiscreteOperator,
    pub cfg: EvolutionConfig,
    dt: f64,
    /// `B(t_n)` diagonals; a single entry when time-independent.
    b: Vec<Vec<f64>>,
    /// Factors of `P_{n+1}`; a single entry when time-independent.
    factors: Vec<Factor>,
    potential_free: bool,
}

impl<'a> Propagator<'a> {
    pub fn new(
        op: &'a DiscreteOperator,
        pot: &PotentialPair,
        cfg: &EvolutionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        pot.validate(&op.mesh)?;
        let dt = cfg.dt();
        let steady = pot.is_time_independent();
        let b: Vec<Vec<f64>> = if steady {
            vec![pot.diagonal(&op.mesh, 0.0)]
        } else {
            (0..=cfg.steps)
                .map(|n| pot.diagonal(&op.mesh, cfg.time(n)))
                .collect()
        };
        let build = |bn: &[f64]| -> Result<Factor> {
            let diag: Vec<f64> = op
                .mass
                .iter()
                .zip(bn)
                .map(|(m, bi)| m * (1.0 + cfg.theta * dt * bi))
                .collect();
            let p = op
                .stiffness
                .scaled_plus_diagonal(cfg.theta * dt, 1.0, &diag);
            Factor::new(p, cfg.solver)
        };
        let factors = if steady {
            vec![build(&b[0])?]
        } else {
            (1..=cfg.steps)
                .map(|n| build(&b[n]))
                .collect::<Result<_>>()?
        };
        Ok(Propagator {
            op,
            cfg: *cfg,
            dt,
            potential_free: pot.is_zero(),
            b,
            factors,
        })
    }

    pub fn steps(&self) -> usize {
        self.cfg.steps
    }

    pub fn n(&self) -> usize {
        self.op.n_total()
    }

    fn b_at(&self, n: usize) -> &[f64] {
        if self.b.len() == 1 {
            &self.b[0]
        } else {
            &self.b[n]
        }
    }

    /// `P_{n+1}⁻¹ rhs`.
    fn solve_p(&self, n: usize, rhs: &[f64]) -> Result<Vec<f64>> {
        let f = if self.factors.len() == 1 {
            &self.factors[0]
        } else {
            &self.factors[n]
        };
        f.solve(rhs, self.cfg.tol)
    }

    /// `E_n x`.
    pub fn apply_e(&self, n: usize, x: &[f64]) -> Vec<f64> {
        let c = (1.0 - self.cfg.theta) * self.dt;
        let mut out = self.op.stiffness.matvec(x);
        let b = self.b_at(n);
        for i in 0..x.len() {
            let m = self.op.mass[i];
            out[i] = m * x[i] - c * (out[i] + m * b[i] * x[i]);
        }
        out
    }

    /// `P_{n+1} x`.
    pub fn apply_p(&self, n: usize, x: &[f64]) -> Vec<f64> {
        let c = self.cfg.theta * self.dt;
        let mut out = self.op.stiffness.matvec(x);
        let b = self.b_at(n + 1);
        for i in 0..x.len() {
            let m = self.op.mass[i];
            out[i] = m * x[i] + c * (out[i] + m * b[i] * x[i]);
        }
        out
    }

    /// `P_{n+1}⁻¹ (E_n x + load)`.
    pub fn step_loaded(&self, n: usize, x: &[f64], load: &[f64]) -> Result<Vec<f64>> {
        let mut rhs = self.apply_e(n, x);
        for (r, l) in rhs.iter_mut().zip(load) {
            *r += l;
        }
        self.solve_p(n, &rhs)
    }

    /// Homogeneous step `G_n x`.
    pub fn step(&self, n: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.solve_p(n, &self.apply_e(n, x))
    }

    /// Mass-adjoint step `G_n* x = M⁻¹ E_n P_{n+1}⁻¹ M x`.
    pub fn step_adjoint(&self, n: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mx: Vec<f64> = x.iter().zip(&self.op.mass).map(|(a, m)| a * m).collect();
        let z = self.solve_p(n, &mx)?;
        let mut out = self.apply_e(n, &z);
        for (o, m) in out.iter_mut().zip(&self.op.mass) {
            *o /= m;
        }
        Ok(out)
    }

    fn eval_forcing(&self, forcing: &dyn Forcing, n: usize) -> Option<Vec<f64>> {
        if forcing.is_zero() {
            return None;
        }
        let mut out = vec![0.0; self.n()];
        forcing.add_to(n, self.cfg.time(n), &mut out);
        Some(out)
    }

    /// Forward march from `y0` with sources `forcing`.
    pub fn forward(&self, y0: &[f64], forcing: &dyn Forcing) -> Result<Vec<Vec<f64>>> {
        check_len("initial state", self.n(), y0.len())?;
        let m = self.steps();
        let (a, b) = ((1.0 - self.cfg.theta) * self.dt, self.cfg.theta * self.dt);
        let watch_norm = forcing.is_zero() && self.potential_free;
        let mut states = Vec::with_capacity(m + 1);
        states.push(y0.to_vec());
        let mut f_now = self.eval_forcing(forcing, 0);
        for n in 0..m {
            let mut z = states[n].clone();
            if let Some(f) = &f_now {
                for (zi, fi) in z.iter_mut().zip(f) {
                    *zi += a * fi;
                }
            }
            let mut next = self.step(n, &z)?;
            let f_next = self.eval_forcing(forcing, n + 1);
            if let Some(f) = &f_next {
                for (yi, fi) in next.iter_mut().zip(f) {
                    *yi += b * fi;
                }
            }
            if watch_norm {
                let before = mass_dot(&self.op.mass, &states[n], &states[n]);
                let after = mass_dot(&self.op.mass, &next, &next);
                if after > before * (1.0 + 1e-12) + 1e-300 {
                    return Err(Error::InvariantViolation(format!(
                        "unforced norm grew at step {n}: {before:e} -> {after:e}"
                    )));
                }
            }
            states.push(next);
            f_now = f_next;
        }
        Ok(states)
    }

    /// Backward march from `phi_t` at `t = T` with sources `forcing`:
    /// `φ^n = G_n*(φ^{n+1} + (1-θ) dt F_{n+1}) + θ dt F_n`.
    pub fn backward(&self, phi_t: &[f64], forcing: &dyn Forcing) -> Result<Vec<Vec<f64>>> {
        check_len("terminal state", self.n(), phi_t.len())?;
        let m = self.steps();
        let (a, b) = ((1.0 - self.cfg.theta) * self.dt, self.cfg.theta * self.dt);
        let mut states = vec![Vec::new(); m + 1];
        states[m] = phi_t.to_vec();
        let mut f_next = self.eval_forcing(forcing, m);
        for n in (0..m).rev() {
            let mut z = states[n + 1].clone();
            if let Some(f) = &f_next {
                for (zi, fi) in z.iter_mut().zip(f) {
                    *zi += a * fi;
                }
            }
            let mut prev = self.step_adjoint(n, &z)?;
            let f_now = self.eval_forcing(forcing, n);
            if let Some(f) = &f_now {
                for (pi, fi) in prev.iter_mut().zip(f) {
                    *pi += b * fi;
                }
            }
            states[n] = prev;
            f_next = f_now;
        }
        Ok(states)
    }

    /// Adjoint of the source-to-trajectory map. Given `h^k` (a state-space
    /// functional already multiplied by its time-quadrature weight), returns
    /// `w^k` such that `Σ_k ⟨y^k, h^k⟩_M = Σ_k c_k dt ⟨F_k, w^k⟩_M` for the
    /// trajectory `y` driven by sources `F` from `y⁰ = 0`. Entries with
    /// `c_k = 0` are returned as zero.
    pub fn source_adjoint(&self, h: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let m = self.steps();
        check_len("source adjoint time nodes", m + 1, h.len())?;
        let theta = self.cfg.theta;
        let c = self.cfg.duality_weights();
        let mut out = vec![vec![0.0; self.n()]; m + 1];
        // q^k = h^k + G_k* q^{k+1}
        let mut q = h[m].clone();
        let mut acc_next: Option<Vec<f64>> = None;
        for k in (0..=m).rev() {
            if k < m {
                let g = self.step_adjoint(k, &q)?;
                let mut qk = h[k].clone();
                for (a, b) in qk.iter_mut().zip(&g) {
                    *a += b;
                }
                acc_next = Some(g);
                q = qk;
            }
            let ck = c[k];
            if ck == 0.0 {
                continue;
            }
            let w = &mut out[k];
            if let Some(g) = &acc_next {
                if k < m {
                    for (wi, gi) in w.iter_mut().zip(g) {
                        *wi += (1.0 - theta) * gi;
                    }
                }
            }
            if k >= 1 {
                for (wi, qi) in w.iter_mut().zip(&q) {
                    *wi += theta * qi;
                }
            }
            for wi in w.iter_mut() {
                *wi *= self.dt / ck;
            }
        }
        Ok(out)
    }

    /// Per-step defects `P_{n+1}(y^{n+1} - θ dt F_{n+1}) - E_n(y^n + (1-θ) dt F_n)`.
    pub fn defects(&self, states: &[Vec<f64>], forcing: &dyn Forcing) -> Result<Vec<Vec<f64>>> {
        let m = self.steps();
        check_len("trajectory time nodes", m + 1, states.len())?;
        let (a, b) = ((1.0 - self.cfg.theta) * self.dt, self.cfg.theta * self.dt);
        let mut out = Vec::with_capacity(m);
        let mut f_now = self.eval_forcing(forcing, 0);
        for n in 0..m {
            let f_next = self.eval_forcing(forcing, n + 1);
            let mut lhs = states[n + 1].clone();
            let mut rhs = states[n].clone();
            if let Some(f) = &f_next {
                for (x, fi) in lhs.iter_mut().zip(f) {
                    *x -= b * fi;
                }
            }
            if let Some(f) = &f_now {
                for (x, fi) in rhs.iter_mut().zip(f) {
                    *x += a * fi;
                }
            }
            let p = self.apply_p(n, &lhs);
            let e = self.apply_e(n, &rhs);
            out.push(p.iter().zip(&e).map(|(x, y)| x - y).collect());
            f_now = f_next;
        }
        Ok(out)
    }
}

fn to_trajectory(states: Vec<Vec<f64>>, mesh: &Mesh, t_final: f64) -> Result<Trajectory> {
    let nb = mesh.n_bulk();
    let states = states
        .into_iter()
        .map(|s| L2Pair::from_vec(s, nb))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(t_final, states)
}

pub fn solve_forward(
    op: &DiscreteOperator,
    pot: &PotentialPair,
    src: &SourceData,
    cfg: &EvolutionConfig,
) -> Result<Trajectory> {
    src.validate(&op.mesh, cfg)?;
    let prop = Propagator::new(op, pot, cfg)?;
    let states = prop.forward(src.y0.as_slice(), &src.forcing(op.n_bulk()))?;
    to_trajectory(states, &op.mesh, cfg.t_final)
}

pub fn solve_backward(
    op: &DiscreteOperator,
    pot: &PotentialPair,
    f: &TimeField,
    g: &TimeField,
    phi_t: &L2Pair,
    cfg: &EvolutionConfig,
) -> Result<Trajectory> {
    phi_t.conforms(&op.mesh)?;
    f.validate(cfg.steps, op.n_bulk(), "bulk source")?;
    g.validate(cfg.steps, op.mesh.n_surface(), "boundary source")?;
    let prop = Propagator::new(op, pot, cfg)?;
    let forcing = PairForcing {
        f,
        g,
        n_bulk: op.n_bulk(),
    };
    let states = prop.backward(phi_t.as_slice(), &forcing)?;
    to_trajectory(states, &op.mesh, cfg.t_final)
}

/// Largest normalized weak-form defect of `tr` against a fixed family of
/// smooth space-time test functions that vanish at `t = T`.
///
/// The family is `τ(t) χ(x)` with `τ ∈ {(T-t)/T, ((T-t)/T)², sin(π(T-t)/T)}`
/// and `χ ∈ {1, x, y, |x|²}`, sampled at step midpoints and at the nodes
/// (boundary nodes use their own coordinates, so `χ` is trace-consistent).
/// Each pairing is divided by the discrete `L²(0,T;𝕃²)` norm of the test
/// function.
pub fn residual_distributional(
    tr: &Trajectory,
    op: &DiscreteOperator,
    pot: &PotentialPair,
    src: &SourceData,
    cfg: &EvolutionConfig,
) -> Result<f64> {
    tr.conforms(&op.mesh)?;
    check_len("trajectory time nodes", cfg.steps + 1, tr.states.len())?;
    src.validate(&op.mesh, cfg)?;
    let prop = Propagator::new(op, pot, cfg)?;
    let states: Vec<Vec<f64>> = tr.states.iter().map(|s| s.as_slice().to_vec()).collect();
    let mut defects = prop.defects(&states, &src.forcing(op.n_bulk()))?;
    // The initial condition enters the weak form as ⟨y(0) - y₀, ψ(0)⟩.
    let y0_gap: Vec<f64> = states[0]
        .iter()
        .zip(src.y0.as_slice())
        .zip(&op.mass)
        .map(|((a, b), m)| m * (a - b))
        .collect();

    let t_final = cfg.t_final;
    let dt = cfg.dt();
    let taus: [fn(f64) -> f64; 3] = [|s| s, |s| s * s, |s| (std::f64::consts::PI * s).sin()];
    let mesh = &op.mesh;
    let chis: [fn([f64; 2]) -> f64; 4] =
        [|_| 1.0, |p| p[0], |p| p[1], |p| p[0] * p[0] + p[1] * p[1]];
    let mut worst: f64 = 0.0;
    for chi in chis {
        let c = L2Pair::sample(mesh, chi);
        let cm = mass_dot(&op.mass, c.as_slice(), c.as_slice());
        if cm == 0.0 {
            continue;
        }
        for tau in taus {
            let mut pairing = tau(1.0) * dot(&y0_gap, c.as_slice());
            let mut norm_sq = 0.0;
            for (n, r) in defects.iter_mut().enumerate() {
                let tm = (n as f64 + 0.5) * dt;
                let w = tau((t_final - tm) / t_final);
                pairing += w * dot(r, c.as_slice());
                norm_sq += dt * w * w * cm;
            }
            if norm_sq > 0.0 {
                worst = worst.max(pairing.abs() / norm_sq.sqrt());
            }
        }
    }
    Ok(worst)
}
