//! Null control of the semilinear problem by Picard iteration on the
//! linearized control map.
//!
//! With `F(ξ) = F̃(ξ) ξ` and `G(ξ) = G̃(ξ) ξ`, the state `y^k` is frozen into
//! the potentials `a = F̃(y^k)`, `b = G̃(y^k)`, the linear problem is
//! controlled, and its controlled state becomes `y^{k+1}`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::carleman::CarlemanWeights;
use crate::control::{penalized_hum, ControlResult, HumOptions, WeightedOptions, WeightedProblem};
use crate::error::{Error, Result};
use crate::evolution::{EvolutionConfig, Forcing, Propagator, SourceData};
use crate::fields::{mass_dot, L2Pair, Trajectory};
use crate::geometry::ControlRegion;
use crate::operators::{DiscreteOperator, Potential, PotentialPair};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A scalar law `F` together with its quotient `F̃` (`F = F̃ ξ`).
#[derive(Clone)]
pub struct ScalarLaw {
    pub name: String,
    value: ScalarFn,
    quotient: ScalarFn,
    zero: bool,
}

impl fmt::Debug for ScalarLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarLaw({})", self.name)
    }
}

impl ScalarLaw {
    pub fn zero() -> Self {
        ScalarLaw {
            name: "zero".into(),
            value: Arc::new(|_| 0.0),
            quotient: Arc::new(|_| 0.0),
            zero: true,
        }
    }

    /// `ξ / (1 + ξ²)`.
    pub fn rational() -> Self {
        Self::custom("rational", |x| x / (1.0 + x * x), |x| 1.0 / (1.0 + x * x))
    }

    pub fn tanh() -> Self {
        Self::custom(
            "tanh",
            f64::tanh,
            |x| if x == 0.0 { 1.0 } else { x.tanh() / x },
        )
    }

    pub fn linear(slope: f64) -> Self {
        Self::custom(
            &format!("linear({slope})"),
            move |x| slope * x,
            move |_| slope,
        )
    }

    pub fn custom(
        name: &str,
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        quotient: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ScalarLaw {
            name: name.into(),
            value: Arc::new(value),
            quotient: Arc::new(quotient),
            zero: false,
        }
    }

    /// Preset lookup used by the config layer.
    pub fn preset(name: &str, slope: f64) -> Result<Self> {
        match name {
            "zero" => Ok(Self::zero()),
            "rational" => Ok(Self::rational()),
            "tanh" => Ok(Self::tanh()),
            "linear" => Ok(Self::linear(slope)),
            other => Err(Error::InvalidArgument(format!(
                "unknown nonlinearity {other:?} (expected zero, rational, tanh or linear)"
            ))),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        (self.value)(x)
    }

    pub fn quotient(&self, x: f64) -> f64 {
        (self.quotient)(x)
    }
}

/// Bulk law `F`, boundary law `G` and the common bound on `F̃`, `G̃`.
#[derive(Debug, Clone)]
pub struct Nonlinearity {
    pub f: ScalarLaw,
    pub g: ScalarLaw,
    pub bound: f64,
}

/// Sample points for the construction-time checks.
fn probe_points() -> Vec<f64> {
    let mut xs: Vec<f64> = (-200..=200).map(|k| k as f64 * 0.05).collect();
    xs.extend([1e-8, -1e-8, 1e3, -1e3]);
    xs
}

impl Nonlinearity {
    pub fn new(f: ScalarLaw, g: ScalarLaw, bound: f64) -> Result<Self> {
        if !(bound >= 0.0 && bound.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bound must be finite and nonnegative (got {bound})"
            )));
        }
        for law in [&f, &g] {
            let at0 = law.value(0.0);
            if at0 != 0.0 {
                return Err(Error::InvariantViolation(format!(
                    "{}(0) = {at0}, expected 0",
                    law.name
                )));
            }
            for x in probe_points() {
                let v = law.value(x);
                let q = law.quotient(x);
                if !(q.abs() <= bound) {
                    return Err(Error::InvariantViolation(format!(
                        "quotient of {} at {x} is {q}, above the bound {bound}",
                        law.name
                    )));
                }
                if (q * x - v).abs() > 1e-12 * v.abs().max(1.0) {
                    return Err(Error::InvariantViolation(format!(
                        "{} is not quotient times argument at {x}: {v} vs {}",
                        law.name,
                        q * x
                    )));
                }
            }
        }
        Ok(Nonlinearity { f, g, bound })
    }

    pub fn zero() -> Self {
        Nonlinearity {
            f: ScalarLaw::zero(),
            g: ScalarLaw::zero(),
            bound: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.f.zero && self.g.zero
    }

    /// `(F(y), G(y))` on a full state vector.
    pub fn apply(&self, y: &[f64], n_bulk: usize) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(i, &v)| {
                if i < n_bulk {
                    self.f.value(v)
                } else {
                    self.g.value(v)
                }
            })
            .collect()
    }

    /// Frozen potentials `F̃(y^n)`, `G̃(y^n)` on every time node.
    pub fn potentials(
        &self,
        states: &[Vec<f64>],
        n_bulk: usize,
        t_final: f64,
    ) -> Result<PotentialPair> {
        if self.is_zero() {
            return Ok(PotentialPair::zero());
        }
        let a: Vec<Vec<f64>> = states
            .iter()
            .map(|s| s[..n_bulk].iter().map(|&v| self.f.quotient(v)).collect())
            .collect();
        let b: Vec<Vec<f64>> = states
            .iter()
            .map(|s| s[n_bulk..].iter().map(|&v| self.g.quotient(v)).collect())
            .collect();
        let pot = PotentialPair {
            a: Potential::Nodal { t_final, values: a },
            b: Potential::Nodal { t_final, values: b },
        };
        pot.check_bound(self.bound)?;
        Ok(pot)
    }
}

/// Semi-implicit march of the semilinear problem: the linear part is the
/// θ-scheme, the nonlinearity is taken at the old state,
/// `P y^{n+1} = E (y^n + (1-θ) dt S_n) - dt M N(y^n) + θ dt P S_{n+1}`.
pub fn simulate_semilinear(
    prop: &Propagator<'_>,
    nl: &Nonlinearity,
    y0: &[f64],
    sources: &dyn Forcing,
) -> Result<Vec<Vec<f64>>> {
    let cfg = prop.cfg;
    let n = prop.n();
    let nb = prop.op.n_bulk();
    let dt = cfg.dt();
    let (a, b) = ((1.0 - cfg.theta) * dt, cfg.theta * dt);
    let source = |k: usize| {
        let mut out = vec![0.0; n];
        sources.add_to(k, cfg.time(k), &mut out);
        out
    };
    let mut states = Vec::with_capacity(cfg.steps + 1);
    states.push(y0.to_vec());
    let mut s_now = source(0);
    for k in 0..cfg.steps {
        let y = &states[k];
        let x: Vec<f64> = y.iter().zip(&s_now).map(|(yi, si)| yi + a * si).collect();
        let load: Vec<f64> = nl
            .apply(y, nb)
            .iter()
            .zip(&prop.op.mass)
            .map(|(fi, m)| -dt * m * fi)
            .collect();
        let mut next = prop.step_loaded(k, &x, &load)?;
        let s_next = source(k + 1);
        for (yi, si) in next.iter_mut().zip(&s_next) {
            *yi += b * si;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "semilinear state blew up at step {k}"
            )));
        }
        states.push(next);
        s_now = s_next;
    }
    Ok(states)
}

/// Largest relative defect of a trajectory in the semi-implicit scheme.
pub fn semilinear_residual(
    prop: &Propagator<'_>,
    nl: &Nonlinearity,
    states: &[Vec<f64>],
    sources: &dyn Forcing,
) -> Result<f64> {
    let cfg = prop.cfg;
    let n = prop.n();
    let nb = prop.op.n_bulk();
    let dt = cfg.dt();
    let (a, b) = ((1.0 - cfg.theta) * dt, cfg.theta * dt);
    let source = |k: usize| {
        let mut out = vec![0.0; n];
        sources.add_to(k, cfg.time(k), &mut out);
        out
    };
    let mut worst: f64 = 0.0;
    for k in 0..cfg.steps {
        let s0 = source(k);
        let s1 = source(k + 1);
        let x: Vec<f64> = states[k].iter().zip(&s0).map(|(y, s)| y + a * s).collect();
        let z: Vec<f64> = states[k + 1]
            .iter()
            .zip(&s1)
            .map(|(y, s)| y - b * s)
            .collect();
        let e = prop.apply_e(k, &x);
        let p = prop.apply_p(k, &z);
        let nl_term = nl.apply(&states[k], nb);
        let d: Vec<f64> = (0..n)
            .map(|i| p[i] - e[i] + dt * prop.op.mass[i] * nl_term[i])
            .collect();
        let scale: f64 = e
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        worst = worst.max(d.iter().map(|v| v * v).sum::<f64>().sqrt() / scale);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SubSolver {
    Weighted(WeightedOptions),
    Hum(HumOptions),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    pub max_iter: usize,
    pub fp_tol: f64,
    /// Initial damping factor in (0, 1]; halved whenever the distance grows.
    pub damping: f64,
    pub sub: SubSolver,
    /// Solve once more at the accepted iterate to measure the fixed-point residual.
    pub relinearize: bool,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            max_iter: 50,
            fp_tol: 1e-6,
            damping: 1.0,
            sub: SubSolver::Weighted(WeightedOptions::default()),
            relinearize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardRecord {
    pub k: usize,
    /// `‖Φ(y^k) - y^k‖ / ‖y^k‖` in `L²(0,T;𝕃²)`.
    pub distance: f64,
    /// Terminal norm reported by the linear sub-solver.
    pub terminal_norm: f64,
    pub cg_iterations: usize,
    pub damping: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemilinearResult {
    /// Control and the state re-simulated through the semilinear dynamics.
    pub control: ControlResult,
    /// Linear sub-solver's terminal norm at the accepted iterate.
    pub linear_terminal_norm: f64,
    pub fixed_point: Trajectory,
    pub history: Vec<PicardRecord>,
    /// Relative change from one more linearization at the accepted iterate.
    pub relinearization_change: Option<f64>,
    pub semi_implicit_residual: f64,
}

pub fn history_csv(history: &[PicardRecord]) -> String {
    let mut out = String::from("k,distance,terminal_norm,cg_iterations\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{}\n",
            r.k, r.distance, r.terminal_norm, r.cg_iterations
        ));
    }
    out
}

fn time_norm(cfg: &EvolutionConfig, mass: &[f64], states: &[Vec<f64>]) -> f64 {
    cfg.trapezoid_weights()
        .iter()
        .zip(states)
        .map(|(w, s)| w * mass_dot(mass, s, s))
        .sum::<f64>()
        .sqrt()
}

fn flat_states(tr: &Trajectory) -> Vec<Vec<f64>> {
    tr.states.iter().map(|s| s.as_slice().to_vec()).collect()
}

#[allow(clippy::too_many_arguments)]
fn linear_solve(
    op: &DiscreteOperator,
    pot: &PotentialPair,
    src: &SourceData,
    region: &ControlRegion,
    cw: Option<&CarlemanWeights>,
    cfg: &EvolutionConfig,
    sub: &SubSolver,
) -> Result<ControlResult> {
    match sub {
        SubSolver::Weighted(o) => {
            let cw = cw.ok_or_else(|| {
                Error::InvalidArgument("the weighted sub-solver needs Carleman weights".into())
            })?;
            WeightedProblem::new(op, pot, src, region, cw, cfg, o)?.solve()
        }
        SubSolver::Hum(o) => Ok(penalized_hum(op, pot, src, region, cfg, o)?.result),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn picard_control(
    op: &DiscreteOperator,
    nl: &Nonlinearity,
    src: &SourceData,
    region: &ControlRegion,
    cw: Option<&CarlemanWeights>,
    cfg: &EvolutionConfig,
    opts: &PicardOptions,
) -> Result<SemilinearResult> {
    if !(opts.fp_tol > 0.0) || !(opts.damping > 0.0 && opts.damping <= 1.0) || opts.max_iter == 0 {
        return Err(Error::InvalidArgument(format!(
            "need fp_tol > 0, damping in (0, 1] and max_iter ≥ 1 (got {}, {}, {})",
            opts.fp_tol, opts.damping, opts.max_iter
        )));
    }
    let src = SourceData {
        v: None,
        ..src.clone()
    };
    src.validate(&op.mesh, cfg)?;
    let nb = op.n_bulk();
    let mass = &op.mass;
    let linear = Propagator::new(op, &PotentialPair::zero(), cfg)?;
    let mut y = simulate_semilinear(&linear, nl, src.y0.as_slice(), &src.forcing(nb))?;

    let mut damping = opts.damping;
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    let mut accepted: Option<ControlResult> = None;
    for k in 1..=opts.max_iter {
        let pot = nl.potentials(&y, nb, cfg.t_final)?;
        let res = linear_solve(op, &pot, &src, region, cw, cfg, &opts.sub)?;
        let z = flat_states(&res.y);
        let diff: Vec<Vec<f64>> = z
            .iter()
            .zip(&y)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        let dist = time_norm(cfg, mass, &diff);
        let scale = time_norm(cfg, mass, &y);
        let rel = if scale > 0.0 { dist / scale } else { dist };
        if rel > prev {
            damping *= 0.5;
        }
        prev = rel;
        history.push(PicardRecord {
            k,
            distance: rel,
            terminal_norm: res.terminal_norm,
            cg_iterations: res.cg_iterations,
            damping,
        });
        for (yk, dk) in y.iter_mut().zip(&diff) {
            for (a, b) in yk.iter_mut().zip(dk) {
                *a += damping * b;
            }
        }
        if rel <= opts.fp_tol {
            accepted = Some(res);
            break;
        }
    }
    let Some(linear_result) = accepted else {
        return Err(Error::FixedPointNotConverged {
            iterations: history.len(),
            last: prev,
            history: history.iter().map(|r| r.distance).collect(),
        });
    };

    let relinearization_change = if opts.relinearize {
        let pot = nl.potentials(&y, nb, cfg.t_final)?;
        let again = flat_states(&linear_solve(op, &pot, &src, region, cw, cfg, &opts.sub)?.y);
        let diff: Vec<Vec<f64>> = again
            .iter()
            .zip(&y)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        Some(time_norm(cfg, mass, &diff) / time_norm(cfg, mass, &y).max(f64::MIN_POSITIVE))
    } else {
        None
    };

    let v = linear_result.v.clone();
    let with_control = SourceData {
        v: Some(v.clone()),
        ..src.clone()
    };
    let forcing = with_control.forcing(nb);
    let states = simulate_semilinear(&linear, nl, src.y0.as_slice(), &forcing)?;
    let semi_implicit_residual = semilinear_residual(&linear, nl, &states, &forcing)?;
    let last = &states[cfg.steps];
    let terminal_norm = mass_dot(mass, last, last).sqrt();
    let to_traj = |s: Vec<Vec<f64>>| -> Result<Trajectory> {
        Trajectory::new(
            cfg.t_final,
            s.into_iter()
                .map(|v| L2Pair::from_vec(v, nb))
                .collect::<Result<_>>()?,
        )
    };
    Ok(SemilinearResult {
        control: ControlResult {
            y: to_traj(states)?,
            terminal_norm,
            v,
            ..linear_result.clone()
        },
        linear_terminal_norm: linear_result.terminal_norm,
        fixed_point: to_traj(y)?,
        history,
        relinearization_change,
        semi_implicit_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{control_mask, Mesh, RegionDescriptor};
    use crate::operators::assemble;

    #[test]
    fn presets_satisfy_the_quotient_identity() {
        for law in [
            ScalarLaw::zero(),
            ScalarLaw::rational(),
            ScalarLaw::tanh(),
            ScalarLaw::linear(-0.5),
        ] {
            Nonlinearity::new(law.clone(), law, 1.0).unwrap();
        }
        assert!((ScalarLaw::rational().quotient(2.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn bad_laws_are_rejected() {
        let shifted = ScalarLaw::custom("shifted", |x| x + 1.0, |_| 1.0);
        assert!(matches!(
            Nonlinearity::new(shifted, ScalarLaw::zero(), 1.0),
            Err(Error::InvariantViolation(_))
        ));
        let steep = ScalarLaw::linear(3.0);
        assert!(matches!(
            Nonlinearity::new(ScalarLaw::zero(), steep, 1.0),
            Err(Error::InvariantViolation(_))
        ));
        let wrong = ScalarLaw::custom("wrong", |x| x * x * x / (1.0 + x * x), |_| 0.5);
        assert!(Nonlinearity::new(wrong, ScalarLaw::zero(), 1.0).is_err());
        assert!(ScalarLaw::preset("cubic", 0.0).is_err());
    }

    #[test]
    fn linear_law_matches_constant_potential() {
        let mesh = Mesh::disk(5, 12, 1.0).unwrap();
        let op = assemble(&mesh, 1.0, 1.0).unwrap();
        let cfg = EvolutionConfig::new(1.0, 400).with_theta(1.0);
        let nl = Nonlinearity::new(ScalarLaw::linear(0.7), ScalarLaw::linear(0.7), 1.0).unwrap();
        let prop = Propagator::new(&op, &PotentialPair::zero(), &cfg).unwrap();
        let y0 = vec![1.0; op.n_total()];
        let src = SourceData::homogeneous(L2Pair::constant(&mesh, 1.0));
        let states = simulate_semilinear(&prop, &nl, &y0, &src.forcing(op.n_bulk())).unwrap();
        // Explicit decay of a constant: (1 - 0.7 dt)^M.
        let expect = (1.0 - 0.7 / 400.0f64).powi(400);
        assert!(states[400].iter().all(|v| (v - expect).abs() < 1e-12));
        let r = semilinear_residual(&prop, &nl, &states, &src.forcing(op.n_bulk())).unwrap();
        assert!(r < 1e-13, "{r}");
    }

    #[test]
    fn zero_nonlinearity_reduces_to_linear_control() {
        let mesh = Mesh::disk(5, 12, 1.0).unwrap();
        let op = assemble(&mesh, 1.0, 1.0).unwrap();
        let w = control_mask(
            &mesh,
            &RegionDescriptor::Disk {
                center: [0.0, 0.0],
                radius: 0.5,
            },
        )
        .unwrap();
        let cfg = EvolutionConfig::new(1.0, 20);
        let src = SourceData::homogeneous(L2Pair::constant(&mesh, 0.1));
        let hum = HumOptions {
            epsilon: 1e-3,
            cg_tol: 1e-10,
            max_iter: 500,
        };
        let opts = PicardOptions {
            sub: SubSolver::Hum(hum),
            ..Default::default()
        };
        let r = picard_control(&op, &Nonlinearity::zero(), &src, &w, None, &cfg, &opts).unwrap();
        assert_eq!(r.history.len(), 2);
        let direct = penalized_hum(&op, &PotentialPair::zero(), &src, &w, &cfg, &hum).unwrap();
        assert!((r.control.terminal_norm - direct.result.terminal_norm).abs() < 1e-10);
        assert!(r.relinearization_change.unwrap() <= 2.0 * opts.fp_tol);
    }

    #[test]
    fn weighted_sub_solver_needs_weights() {
        let mesh = Mesh::disk(5, 12, 1.0).unwrap();
        let op = assemble(&mesh, 1.0, 1.0).unwrap();
        let w = control_mask(
            &mesh,
            &RegionDescriptor::Disk {
                center: [0.0, 0.0],
                radius: 0.5,
            },
        )
        .unwrap();
        let cfg = EvolutionConfig::new(1.0, 10);
        let src = SourceData::homogeneous(L2Pair::constant(&mesh, 0.1));
        let r = picard_control(
            &op,
            &Nonlinearity::zero(),
            &src,
            &w,
            None,
            &cfg,
            &PicardOptions::default(),
        );
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
