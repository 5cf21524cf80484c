//! Experiment configuration (TOML).
//!
//! ```toml
//! seed = 7
//!
//! [geometry]
//! kind = "disk"
//! n_r = 16
//! n_theta = 64
//!
//! [physics]
//! d = 1.0
//! delta = 1.0
//! initial = { kind = "constant", value = 1.0 }
//!
//! [time]
//! t_final = 1.0
//! steps = 200
//!
//! [control]
//! mode = "hum"
//! region = { kind = "disk", center = [0.0, 0.0], radius = 0.5 }
//! epsilon = 1e-4
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::carleman::CarlemanParams;
use crate::control::{HumOptions, WeightedOptions};
use crate::error::{Error, Result};
use crate::evolution::{EvolutionConfig, SolverKind, TimeField};
use crate::fields::L2Pair;
use crate::geometry::{GeometrySpec, Mesh, RegionDescriptor};
use crate::observability::ObservabilityOptions;
use crate::operators::{Potential, PotentialPair};
use crate::semilinear::{Nonlinearity, PicardOptions, ScalarLaw, SubSolver};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub geometry: GeometrySpec,
    pub physics: PhysicsBlock,
    pub time: TimeBlock,
    pub control: ControlBlock,
    #[serde(default)]
    pub weights: WeightsBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsBlock {
    #[serde(default = "one")]
    pub d: f64,
    #[serde(default = "one")]
    pub delta: f64,
    #[serde(default = "zero_potential")]
    pub a: Potential,
    #[serde(default = "zero_potential")]
    pub b: Potential,
    /// Bulk source, in the same piecewise-constant table format as `a`.
    #[serde(default = "zero_potential")]
    pub f: Potential,
    #[serde(default = "zero_potential")]
    pub g: Potential,
    #[serde(default)]
    pub initial: InitialState,
}

fn one() -> f64 {
    1.0
}

fn zero_potential() -> Potential {
    Potential::Zero
}

/// Initial state; boundary values use the boundary node coordinates, so
/// smooth profiles are trace-consistent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitialState {
    Constant {
        value: f64,
    },
    /// `c + cx x + cy y + cr2 |x|²`.
    Quadratic {
        #[serde(default)]
        c: f64,
        #[serde(default)]
        cx: f64,
        #[serde(default)]
        cy: f64,
        #[serde(default)]
        cr2: f64,
    },
    /// Independent uniform values in `[-amplitude, amplitude]` from the seed.
    Random {
        amplitude: f64,
    },
    /// Explicit values, bulk then boundary.
    Nodal {
        values: Vec<f64>,
    },
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState::Constant { value: 1.0 }
    }
}

impl InitialState {
    pub fn build(&self, mesh: &Mesh, seed: u64) -> Result<L2Pair> {
        match self {
            InitialState::Constant { value } => Ok(L2Pair::constant(mesh, *value)),
            InitialState::Quadratic { c, cx, cy, cr2 } => Ok(L2Pair::sample(mesh, |p| {
                c + cx * p[0] + cy * p[1] + cr2 * (p[0] * p[0] + p[1] * p[1])
            })),
            InitialState::Random { amplitude } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data = (0..mesh.n_total())
                    .map(|_| amplitude * rng.gen_range(-1.0..=1.0))
                    .collect();
                L2Pair::from_vec(data, mesh.n_bulk())
            }
            InitialState::Nodal { values } => L2Pair::from_vec(values.clone(), mesh.n_bulk()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeBlock {
    pub t_final: f64,
    pub steps: usize,
    #[serde(default = "half")]
    pub theta: f64,
    #[serde(default = "solver_tol")]
    pub tol: f64,
    #[serde(default)]
    pub solver: SolverKind,
}

fn half() -> f64 {
    0.5
}

fn solver_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Hum,
    Weighted,
    Semilinear,
    Observability,
    CarlemanSweep,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Hum => "hum",
            Mode::Weighted => "weighted",
            Mode::Semilinear => "semilinear",
            Mode::Observability => "observability",
            Mode::CarlemanSweep => "carleman-sweep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubSolverKind {
    Weighted,
    Hum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearityBlock {
    /// `zero`, `rational`, `tanh` or `linear`.
    pub f: String,
    #[serde(default = "zero_name")]
    pub g: String,
    #[serde(default)]
    pub f_slope: f64,
    #[serde(default)]
    pub g_slope: f64,
    #[serde(default = "one")]
    pub bound: f64,
}

fn zero_name() -> String {
    "zero".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBlock {
    pub mode: Mode,
    /// Control or observation region; observability without a region uses
    /// the whole state.
    #[serde(default)]
    pub region: Option<RegionDescriptor>,
    #[serde(default = "hum_eps")]
    pub epsilon: f64,
    #[serde(default = "cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "cg_cap")]
    pub max_iter: usize,
    #[serde(default)]
    pub observability: ObservabilityOptions,
    /// Random high-frequency forward samples in observability mode.
    #[serde(default = "forward_samples")]
    pub forward_samples: usize,
    #[serde(default)]
    pub nonlinearity: Option<NonlinearityBlock>,
    #[serde(default = "sub_solver")]
    pub sub_solver: SubSolverKind,
    #[serde(default = "fp_tol")]
    pub fp_tol: f64,
    #[serde(default = "picard_cap")]
    pub picard_max_iter: usize,
    #[serde(default = "one")]
    pub damping: f64,
    #[serde(default = "s_values")]
    pub s_values: Vec<f64>,
    #[serde(default = "lambda_values")]
    pub lambda_values: Vec<f64>,
    #[serde(default = "sweep_samples")]
    pub sweep_samples: usize,
}

fn hum_eps() -> f64 {
    1e-4
}
fn cg_tol() -> f64 {
    1e-8
}
fn cg_cap() -> usize {
    500
}
fn forward_samples() -> usize {
    4
}
fn sub_solver() -> SubSolverKind {
    SubSolverKind::Weighted
}
fn fp_tol() -> f64 {
    1e-6
}
fn picard_cap() -> usize {
    50
}
fn s_values() -> Vec<f64> {
    vec![2.0, 4.0, 8.0]
}
fn lambda_values() -> Vec<f64> {
    vec![2.0]
}
fn sweep_samples() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsBlock {
    #[serde(default = "two")]
    pub s: f64,
    #[serde(default = "two")]
    pub lambda: f64,
    #[serde(default = "two")]
    pub m: f64,
    #[serde(default = "eps_rho")]
    pub eps_rho: f64,
    #[serde(default = "mu")]
    pub mu: f64,
}

fn two() -> f64 {
    2.0
}
fn eps_rho() -> f64 {
    1e-2
}
fn mu() -> f64 {
    1e-6
}

impl Default for WeightsBlock {
    fn default() -> Self {
        WeightsBlock {
            s: 2.0,
            lambda: 2.0,
            m: 2.0,
            eps_rho: eps_rho(),
            mu: mu(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "out_dir")]
    pub directory: String,
    #[serde(default = "formats")]
    pub formats: Vec<Format>,
}

fn out_dir() -> String {
    "output".into()
}
fn formats() -> Vec<Format> {
    vec![Format::Csv, Format::Binary]
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            directory: out_dir(),
            formats: formats(),
        }
    }
}

fn source_field(p: &Potential, cfg: &EvolutionConfig, len: usize) -> TimeField {
    if p.is_zero() {
        return TimeField::Zero;
    }
    TimeField::Nodal(
        (0..=cfg.steps)
            .map(|k| {
                let mut out = vec![0.0; len];
                p.eval_into(cfg.time(k), &mut out);
                out
            })
            .collect(),
    )
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if !(self.physics.d > 0.0) {
            return bad(
                "physics.d",
                format!("must be positive (got {})", self.physics.d),
            );
        }
        if !(self.physics.delta >= 0.0) {
            return bad(
                "physics.delta",
                format!("must be nonnegative (got {})", self.physics.delta),
            );
        }
        self.evolution()
            .validate()
            .map_err(|e| Error::Config(format!("time: {e}")))?;
        let c = &self.control;
        let needs_region = matches!(
            c.mode,
            Mode::Hum | Mode::Weighted | Mode::Semilinear | Mode::CarlemanSweep
        );
        if needs_region && c.region.is_none() {
            return bad(
                "control.region",
                format!("required for mode {}", c.mode.name()),
            );
        }
        if c.mode == Mode::Semilinear && c.nonlinearity.is_none() {
            return bad(
                "control.nonlinearity",
                "required for mode semilinear".into(),
            );
        }
        if matches!(c.region, Some(RegionDescriptor::Full)) && c.mode != Mode::Observability {
            return bad(
                "control.region",
                "the full region is only meaningful for observability".into(),
            );
        }
        if !(c.epsilon > 0.0) || !(c.cg_tol > 0.0) || c.max_iter == 0 {
            return bad(
                "control",
                "epsilon, cg_tol and max_iter must be positive".into(),
            );
        }
        let w = &self.weights;
        if !(w.s >= 1.0 && w.lambda >= 1.0 && w.m > 1.0) {
            return bad("weights", "need s ≥ 1, lambda ≥ 1, m > 1".into());
        }
        if !(w.eps_rho > 0.0 && w.eps_rho <= 1.0) || !(w.mu > 0.0) {
            return bad("weights", "need 0 < eps_rho ≤ 1 and mu > 0".into());
        }
        if c.s_values.is_empty() || c.lambda_values.is_empty() || c.sweep_samples == 0 {
            return bad("control", "Carleman sweep grids must be nonempty".into());
        }
        Ok(())
    }

    pub fn evolution(&self) -> EvolutionConfig {
        EvolutionConfig {
            t_final: self.time.t_final,
            steps: self.time.steps,
            theta: self.time.theta,
            tol: self.time.tol,
            solver: self.time.solver,
        }
    }

    pub fn potentials(&self) -> PotentialPair {
        PotentialPair {
            a: self.physics.a.clone(),
            b: self.physics.b.clone(),
        }
    }

    /// Bulk and boundary sources sampled on the time grid.
    pub fn sources(&self, mesh: &Mesh) -> (TimeField, TimeField) {
        let cfg = self.evolution();
        (
            source_field(&self.physics.f, &cfg, mesh.n_bulk()),
            source_field(&self.physics.g, &cfg, mesh.n_surface()),
        )
    }

    pub fn hum_options(&self) -> HumOptions {
        HumOptions {
            epsilon: self.control.epsilon,
            cg_tol: self.control.cg_tol,
            max_iter: self.control.max_iter,
        }
    }

    pub fn weighted_options(&self) -> WeightedOptions {
        WeightedOptions {
            eps_rho: self.weights.eps_rho,
            mu: self.weights.mu,
            cg_tol: self.control.cg_tol,
            max_iter: self.control.max_iter,
        }
    }

    pub fn carleman_params(&self) -> CarlemanParams {
        CarlemanParams {
            s: self.weights.s,
            lambda: self.weights.lambda,
            m: self.weights.m,
        }
    }

    pub fn nonlinearity(&self) -> Result<Nonlinearity> {
        let block = self
            .control
            .nonlinearity
            .as_ref()
            .ok_or_else(|| Error::Config("control.nonlinearity: missing".into()))?;
        Nonlinearity::new(
            ScalarLaw::preset(&block.f, block.f_slope)?,
            ScalarLaw::preset(&block.g, block.g_slope)?,
            block.bound,
        )
    }

    pub fn picard_options(&self) -> PicardOptions {
        PicardOptions {
            max_iter: self.control.picard_max_iter,
            fp_tol: self.control.fp_tol,
            damping: self.control.damping,
            sub: match self.control.sub_solver {
                SubSolverKind::Weighted => SubSolver::Weighted(self.weighted_options()),
                SubSolverKind::Hum => SubSolver::Hum(self.hum_options()),
            },
            relinearize: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [geometry]
        kind = "disk"
        n_r = 6
        n_theta = 16

        [physics]

        [time]
        t_final = 1.0
        steps = 10

        [control]
        mode = "simulate"
    "#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.physics.d, 1.0);
        assert_eq!(c.time.theta, 0.5);
        assert_eq!(c.weights.eps_rho, 1e-2);
        assert_eq!(c.output.formats, vec![Format::Csv, Format::Binary]);
        assert_eq!(c.control.s_values, vec![2.0, 4.0, 8.0]);
    }

    #[test]
    fn missing_block_is_named() {
        let text = MINIMAL.replace("[time]\n        t_final = 1.0\n        steps = 10\n", "");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("time"), "{err}");
    }

    #[test]
    fn region_is_required_for_control_modes() {
        let text = MINIMAL.replace("\"simulate\"", "\"hum\"");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("control.region"));
    }

    #[test]
    fn tables_become_sources() {
        let text = MINIMAL.replace(
            "[physics]",
            "[physics]\nf = { kind = \"table\", times = [0.0, 0.5], values = [[1.0], [0.0]] }",
        );
        let text = text.replace(
            "kind = \"disk\"\n        n_r = 6\n        n_theta = 16",
            "kind = \"interval\"\n        n = 1",
        );
        // a one-cell interval is rejected by the mesh, but the table still parses
        let c = ExperimentConfig::from_toml(&text).unwrap();
        let mesh = Mesh::interval(4, 1.0).unwrap();
        let c = ExperimentConfig {
            physics: PhysicsBlock {
                f: Potential::Table {
                    times: vec![0.0, 0.5],
                    values: vec![vec![1.0; 4], vec![0.0; 4]],
                },
                ..c.physics
            },
            ..c
        };
        let (f, g) = c.sources(&mesh);
        assert!(g.is_zero());
        let TimeField::Nodal(rows) = f else { panic!() };
        assert_eq!(rows[0], vec![1.0; 4]);
        assert_eq!(rows[10], vec![0.0; 4]);
    }
}
