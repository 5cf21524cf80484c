//! Distributed null controls supported in ω.
//!
//! `penalized_hum` solves `(Λ + ε) φ̂_T = -y_free(T)` and uses
//! `v = L_T* φ̂_T`; the controlled state then satisfies `y(T) = -ε φ̂_T`.
//!
//! `WeightedProblem` minimizes
//! `½‖ρ_ε (y_free + L v)‖² + ½‖v‖² + (1/2μ)‖y_free(T) + L_T v‖²`
//! over controls on ω by conjugate gradients on the normal equations.

use serde::{Deserialize, Serialize};

use crate::carleman::{source_weighted_norm_sq, CarlemanWeights};
use crate::error::{Error, Result};
use crate::evolution::{
    ControlSignal, EvolutionConfig, Forcing, NoForcing, Propagator, SourceData,
};
use crate::fields::{mass_dot, L2Pair, Trajectory};
use crate::geometry::ControlRegion;
use crate::observability::Gramian;
use crate::operators::{DiscreteOperator, PotentialPair};
use crate::sparse::{conjugate_gradient, CgOptions};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlResult {
    pub v: ControlSignal,
    pub y: Trajectory,
    pub terminal_norm: f64,
    /// `½ ∫∫_ω v²`.
    pub control_energy: f64,
    /// `½ ‖ρ_ε y‖²` (weighted solver only).
    pub weighted_state_energy: Option<f64>,
    /// `(1/2μ) ‖y(T)‖²` (weighted solver only).
    pub penalty: Option<f64>,
    pub cg_iterations: usize,
    pub cg_residual: f64,
    pub cg_history: Vec<f64>,
}

/// Headline scalars of a control run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlSummary {
    pub terminal_norm: f64,
    pub control_energy: f64,
    pub weighted_state_energy: Option<f64>,
    pub penalty: Option<f64>,
    pub objective: Option<f64>,
    pub cg_iterations: usize,
    pub cg_residual: f64,
    pub control_max_abs: f64,
}

impl ControlResult {
    pub fn summary(&self) -> ControlSummary {
        let objective = match (self.weighted_state_energy, self.penalty) {
            (Some(a), Some(b)) => Some(a + b + self.control_energy),
            _ => None,
        };
        ControlSummary {
            terminal_norm: self.terminal_norm,
            control_energy: self.control_energy,
            weighted_state_energy: self.weighted_state_energy,
            penalty: self.penalty,
            objective,
            cg_iterations: self.cg_iterations,
            cg_residual: self.cg_residual,
            control_max_abs: self.v.max_abs(),
        }
    }
}

struct Both<'a>(&'a dyn Forcing, &'a dyn Forcing);

impl Forcing for Both<'_> {
    fn add_to(&self, n: usize, t: f64, out: &mut [f64]) {
        self.0.add_to(n, t, out);
        self.1.add_to(n, t, out);
    }
    fn is_zero(&self) -> bool {
        self.0.is_zero() && self.1.is_zero()
    }
}

fn uncontrolled(src: &SourceData) -> SourceData {
    SourceData {
        v: None,
        ..src.clone()
    }
}

fn trajectory(states: Vec<Vec<f64>>, op: &DiscreteOperator, t_final: f64) -> Result<Trajectory> {
    let nb = op.n_bulk();
    Trajectory::new(
        t_final,
        states
            .into_iter()
            .map(|s| L2Pair::from_vec(s, nb))
            .collect::<Result<_>>()?,
    )
}

fn m_norm(mass: &[f64], x: &[f64]) -> f64 {
    mass_dot(mass, x, x).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumOptions {
    pub epsilon: f64,
    pub cg_tol: f64,
    pub max_iter: usize,
}

impl Default for HumOptions {
    fn default() -> Self {
        HumOptions {
            epsilon: 1e-4,
            cg_tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HumResult {
    pub result: ControlResult,
    pub phi_hat: L2Pair,
    /// `‖y(T) + ε φ̂_T‖`.
    pub identity_residual: f64,
    pub phi_hat_norm: f64,
}

pub fn penalized_hum(
    op: &DiscreteOperator,
    pot: &PotentialPair,
    src: &SourceData,
    region: &ControlRegion,
    cfg: &EvolutionConfig,
    opts: &HumOptions,
) -> Result<HumResult> {
    if !(opts.epsilon > 0.0) || !(opts.cg_tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ε and the CG tolerance must be positive (got {}, {})",
            opts.epsilon, opts.cg_tol
        )));
    }
    let src = uncontrolled(src);
    src.validate(&op.mesh, cfg)?;
    let gram = Gramian::new(op, pot, region, cfg)?;
    let mass = gram.mass().to_vec();
    let free = gram
        .prop
        .forward(src.y0.as_slice(), &src.forcing(op.n_bulk()))?;
    let rhs: Vec<f64> = free[cfg.steps].iter().map(|v| -v).collect();
    let eps = opts.epsilon;
    let cg = conjugate_gradient(
        |p| {
            let mut y = gram.apply(p)?;
            for (yi, pi) in y.iter_mut().zip(p) {
                *yi += eps * pi;
            }
            Ok(y)
        },
        &rhs,
        None,
        |a, b| mass_dot(&mass, a, b),
        |r| r.to_vec(),
        CgOptions {
            tol: opts.cg_tol,
            max_iter: opts.max_iter,
        },
    )?;
    let phi_hat = cg.x;
    let v = gram.adjoint(&phi_hat)?;
    let states = gram
        .prop
        .forward(src.y0.as_slice(), &Both(&src.forcing(op.n_bulk()), &v))?;
    let y_t = &states[cfg.steps];
    let gap: Vec<f64> = y_t.iter().zip(&phi_hat).map(|(y, p)| y + eps * p).collect();
    let terminal_norm = m_norm(&mass, y_t);
    let control_energy = 0.5 * v.norm_sq(&mass, cfg);
    Ok(HumResult {
        identity_residual: m_norm(&mass, &gap),
        phi_hat_norm: m_norm(&mass, &phi_hat),
        phi_hat: L2Pair::from_vec(phi_hat, op.n_bulk())?,
        result: ControlResult {
            y: trajectory(states, op, cfg.t_final)?,
            v,
            terminal_norm,
            control_energy,
            weighted_state_energy: None,
            penalty: None,
            cg_iterations: cg.iterations,
            cg_residual: cg.residual,
            cg_history: cg.history,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedOptions {
    pub eps_rho: f64,
    pub mu: f64,
    pub cg_tol: f64,
    pub max_iter: usize,
}

impl Default for WeightedOptions {
    fn default() -> Self {
        WeightedOptions {
            eps_rho: 1e-2,
            mu: 1e-6,
            cg_tol: 1e-8,
            max_iter: 500,
        }
    }
}

/// Terms of the penalized weighted objective for one control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub state: f64,
    pub control: f64,
    pub penalty: f64,
    pub terminal_norm: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.state + self.control + self.penalty
    }
}

/// The penalized weighted minimization for fixed data; the free trajectory
/// and the weights are computed once.
pub struct WeightedProblem<'a> {
    pub prop: Propagator<'a>,
    pub region: &'a ControlRegion,
    pub opts: WeightedOptions,
    src: SourceData,
    free: Vec<Vec<f64>>,
    /// `τ_k dt ρ²` per time node and state index.
    rho_sq: Vec<Vec<f64>>,
    /// `‖e^{sα̃} ξ̃^{-3/2} f‖²` and the same for `g`.
    pub source_norms_sq: (f64, f64),
}

impl<'a> WeightedProblem<'a> {
    pub fn new(
        op: &'a DiscreteOperator,
        pot: &PotentialPair,
        src: &SourceData,
        region: &'a ControlRegion,
        cw: &CarlemanWeights,
        cfg: &EvolutionConfig,
        opts: &WeightedOptions,
    ) -> Result<Self> {
        if !(opts.mu > 0.0) || !(opts.cg_tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "μ and the CG tolerance must be positive (got {}, {})",
                opts.mu, opts.cg_tol
            )));
        }
        if region.support.is_empty() {
            return Err(Error::EmptyRegion("control region has no nodes".into()));
        }
        let src = uncontrolled(src);
        src.validate(&op.mesh, cfg)?;
        let nb = op.n_bulk();
        let n = op.n_total();
        let f = src.f.sample(cfg, nb);
        let g = src.g.sample(cfg, n - nb);
        let nf = source_weighted_norm_sq(cw, &f, &op.mass[..nb], 0, cfg);
        let ng = source_weighted_norm_sq(cw, &g, &op.mass[nb..], nb, cfg);
        if !nf.is_finite() || !ng.is_finite() {
            return Err(Error::InvalidArgument(
                "sources must decay at t = T fast enough for the weighted source norms to be finite".into(),
            ));
        }
        let tw = cfg.trapezoid_weights();
        let rho_sq = (0..=cfg.steps)
            .map(|k| {
                (0..n)
                    .map(|i| Ok(tw[k] * (2.0 * cw.log_rho(opts.eps_rho, cfg.time(k), i)?).exp()))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let prop = Propagator::new(op, pot, cfg)?;
        let free = prop.forward(src.y0.as_slice(), &src.forcing(nb))?;
        Ok(WeightedProblem {
            prop,
            region,
            opts: *opts,
            src,
            free,
            rho_sq,
            source_norms_sq: (nf, ng),
        })
    }

    fn mass(&self) -> &[f64] {
        &self.prop.op.mass
    }

    fn cfg(&self) -> &EvolutionConfig {
        &self.prop.cfg
    }

    /// `L v`, the trajectory driven by `v` alone.
    fn control_to_state(&self, v: &ControlSignal) -> Result<Vec<Vec<f64>>> {
        self.prop.forward(&vec![0.0; self.prop.n()], v)
    }

    /// `L*(W z) + (1/μ) L_T* z(T)` restricted to ω.
    fn adjoint_of(&self, z: &[Vec<f64>]) -> Result<ControlSignal> {
        let m = self.cfg().steps;
        let h: Vec<Vec<f64>> = z
            .iter()
            .zip(&self.rho_sq)
            .enumerate()
            .map(|(k, (zk, wk))| {
                let mut out: Vec<f64> = zk.iter().zip(wk).map(|(a, b)| a * b).collect();
                if k == m {
                    for (o, a) in out.iter_mut().zip(zk) {
                        *o += a / self.opts.mu;
                    }
                }
                out
            })
            .collect();
        let w = self.prop.source_adjoint(&h)?;
        Ok(ControlSignal::restrict(self.region, &w))
    }

    fn terms_of(&self, v: &ControlSignal, states: &[Vec<f64>]) -> ObjectiveTerms {
        let mass = self.mass();
        let state = 0.5
            * states
                .iter()
                .zip(&self.rho_sq)
                .map(|(s, w)| {
                    s.iter()
                        .zip(w)
                        .zip(mass)
                        .map(|((y, w), m)| w * m * y * y)
                        .sum::<f64>()
                })
                .sum::<f64>();
        let last = &states[states.len() - 1];
        let end = mass_dot(mass, last, last);
        ObjectiveTerms {
            state,
            control: 0.5 * v.norm_sq(mass, self.cfg()),
            penalty: 0.5 * end / self.opts.mu,
            terminal_norm: end.sqrt(),
        }
    }

    fn controlled(&self, v: &ControlSignal) -> Result<Vec<Vec<f64>>> {
        let nb = self.prop.op.n_bulk();
        self.prop
            .forward(self.src.y0.as_slice(), &Both(&self.src.forcing(nb), v))
    }

    /// Objective terms of an arbitrary control on the same support.
    pub fn objective(&self, v: &ControlSignal) -> Result<ObjectiveTerms> {
        if v.support != self.region.support {
            return Err(Error::InvalidArgument(
                "control support differs from the region".into(),
            ));
        }
        let states = self.controlled(v)?;
        Ok(self.terms_of(v, &states))
    }

    pub fn solve(&self) -> Result<ControlResult> {
        let cfg = *self.cfg();
        let mass = self.mass();
        let template = ControlSignal::zeros(self.region, cfg.steps);
        let b = self.adjoint_of(&self.free)?;
        let b: Vec<f64> = b.as_flat().iter().map(|x| -x).collect();
        let dw = cfg.duality_weights();
        let k = self.region.support.len();
        let inner_w: Vec<f64> = dw
            .iter()
            .flat_map(|&w| self.region.support.iter().map(move |&i| w * mass[i]))
            .collect();
        debug_assert_eq!(inner_w.len(), k * (cfg.steps + 1));
        let inner = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .zip(&inner_w)
                .map(|((x, y), w)| w * x * y)
                .sum()
        };
        let cg = conjugate_gradient(
            |p| {
                let v = template.from_flat(p);
                let z = self.control_to_state(&v)?;
                let w = self.adjoint_of(&z)?;
                Ok(w.as_flat().iter().zip(p).map(|(a, b)| a + b).collect())
            },
            &b,
            None,
            inner,
            |r| r.to_vec(),
            CgOptions {
                tol: self.opts.cg_tol,
                max_iter: self.opts.max_iter,
            },
        )?;
        let v = template.from_flat(&cg.x);
        let states = self.controlled(&v)?;
        let terms = self.terms_of(&v, &states);
        Ok(ControlResult {
            y: trajectory(states, self.prop.op, cfg.t_final)?,
            v,
            terminal_norm: terms.terminal_norm,
            control_energy: terms.control,
            weighted_state_energy: Some(terms.state),
            penalty: Some(terms.penalty),
            cg_iterations: cg.iterations,
            cg_residual: cg.residual,
            cg_history: cg.history,
        })
    }

    /// `‖ρ_ε y‖`.
    pub fn weighted_state_norm(result: &ControlResult) -> f64 {
        (2.0 * result.weighted_state_energy.unwrap_or(0.0)).sqrt()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn weighted_minimal_control(
    op: &DiscreteOperator,
    pot: &PotentialPair,
    src: &SourceData,
    region: &ControlRegion,
    cw: &CarlemanWeights,
    cfg: &EvolutionConfig,
    opts: &WeightedOptions,
) -> Result<ControlResult> {
    WeightedProblem::new(op, pot, src, region, cw, cfg, opts)?.solve()
}

/// Uncontrolled final-state norm, for reporting.
pub fn free_terminal_norm(
    op: &DiscreteOperator,
    pot: &PotentialPair,
    src: &SourceData,
    cfg: &EvolutionConfig,
) -> Result<f64> {
    let src = uncontrolled(src);
    src.validate(&op.mesh, cfg)?;
    let prop = Propagator::new(op, pot, cfg)?;
    let forcing = src.forcing(op.n_bulk());
    let f: &dyn Forcing = if forcing.is_zero() {
        &NoForcing
    } else {
        &forcing
    };
    let states = prop.forward(src.y0.as_slice(), f)?;
    Ok(m_norm(&op.mass, &states[cfg.steps]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::carleman::{build_eta0, weights, CarlemanParams};
    use crate::evolution::residual_distributional;
    use crate::geometry::{control_mask, Mesh, RegionDescriptor};
    use crate::operators::assemble;

    fn setup() -> (DiscreteOperator, ControlRegion, EvolutionConfig) {
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
        (op, w, EvolutionConfig::new(1.0, 20))
    }

    fn carleman(op: &DiscreteOperator, w: &ControlRegion) -> CarlemanWeights {
        let wp = control_mask(&op.mesh, &w.descriptor.shrunk_half()).unwrap();
        let eta = build_eta0(&op.mesh, &wp).unwrap();
        weights(
            CarlemanParams {
                s: 1.0,
                lambda: 1.0,
                m: 1.1,
            },
            1.0,
            eta,
        )
        .unwrap()
    }

    #[test]
    fn hum_zero_data() {
        let (op, w, cfg) = setup();
        let src = SourceData::homogeneous(L2Pair::zeros(&op.mesh));
        let r = penalized_hum(
            &op,
            &PotentialPair::zero(),
            &src,
            &w,
            &cfg,
            &HumOptions::default(),
        )
        .unwrap();
        assert_eq!(r.result.terminal_norm, 0.0);
        assert_eq!(r.phi_hat_norm, 0.0);
        assert_eq!(r.result.v.max_abs(), 0.0);
    }

    #[test]
    fn hum_identity_and_support() {
        let (op, w, cfg) = setup();
        let pot = PotentialPair::zero();
        let src = SourceData::homogeneous(L2Pair::constant(&op.mesh, 1.0));
        let opts = HumOptions {
            epsilon: 1e-2,
            cg_tol: 1e-10,
            max_iter: 500,
        };
        let r = penalized_hum(&op, &pot, &src, &w, &cfg, &opts).unwrap();
        assert!(r.identity_residual <= 10.0 * opts.cg_tol * r.phi_hat_norm);
        assert!(
            (r.result.terminal_norm - opts.epsilon * r.phi_hat_norm).abs() <= 1e-8 * r.phi_hat_norm
        );
        let tr = r.result.v.to_trajectory(&op.mesh, 1.0).unwrap();
        for s in &tr.states {
            for (i, v) in s.bulk().iter().enumerate() {
                if w.indicator[i] == 0.0 {
                    assert_eq!(*v, 0.0);
                }
            }
            assert!(s.surface().iter().all(|v| *v == 0.0));
        }
        let full = SourceData {
            v: Some(r.result.v.clone()),
            ..src
        };
        let res = residual_distributional(&r.result.y, &op, &pot, &full, &cfg).unwrap();
        assert!(res < 1e-9, "{res}");
    }

    #[test]
    fn weighted_zero_data() {
        let (op, w, cfg) = setup();
        let cw = carleman(&op, &w);
        let src = SourceData::homogeneous(L2Pair::zeros(&op.mesh));
        let opts = WeightedOptions {
            eps_rho: 1.0,
            ..Default::default()
        };
        let r = weighted_minimal_control(&op, &PotentialPair::zero(), &src, &w, &cw, &cfg, &opts)
            .unwrap();
        assert_eq!(r.v.max_abs(), 0.0);
        assert_eq!(r.summary().objective, Some(0.0));
    }

    #[test]
    fn weighted_minimizer_beats_perturbations_and_hum() {
        let (op, w, cfg) = setup();
        let cw = carleman(&op, &w);
        let pot = PotentialPair::zero();
        let src = SourceData::homogeneous(L2Pair::constant(&op.mesh, 1.0));
        let opts = WeightedOptions {
            eps_rho: 1.0,
            mu: 1e-3,
            cg_tol: 1e-10,
            max_iter: 500,
        };
        let prob = WeightedProblem::new(&op, &pot, &src, &w, &cw, &cfg, &opts).unwrap();
        let r = prob.solve().unwrap();
        let best = prob.objective(&r.v).unwrap().total();
        let hum = penalized_hum(
            &op,
            &pot,
            &src,
            &w,
            &cfg,
            &HumOptions {
                epsilon: 1e-3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(prob.objective(&hum.result.v).unwrap().total() >= best * (1.0 - 1e-8));
        let mut bumped = r.v.clone();
        bumped.values[5][0] += 1e-2;
        assert!(prob.objective(&bumped).unwrap().total() > best);
    }

    #[test]
    fn weighted_rejects_undecaying_sources() {
        use crate::evolution::TimeField;
        let (op, w, cfg) = setup();
        let cw = carleman(&op, &w);
        let mut src = SourceData::homogeneous(L2Pair::zeros(&op.mesh));
        src.f = TimeField::function(|_, _| 1.0);
        let opts = WeightedOptions {
            eps_rho: 1.0,
            ..Default::default()
        };
        let r = weighted_minimal_control(&op, &PotentialPair::zero(), &src, &w, &cw, &cfg, &opts);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
