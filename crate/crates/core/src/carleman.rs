//! Carleman weight functions and a numerical check of the Carleman inequality.
//!
//! On the disk of radius `R` the profile `η⁰(x) = R² - |x|²` is positive
//! inside, vanishes on the boundary, has outward normal derivative `-2R` and
//! a single critical point at the origin. With
//!
//! ```text
//! c(x) = e^{2λm‖η⁰‖∞} - e^{λ(m‖η⁰‖∞ + η⁰(x))},    e(x) = e^{λ(m‖η⁰‖∞ + η⁰(x))}
//! α = c / (t(T-t)),    ξ = e / (t(T-t)),    α̃ = (t/T) α,    ξ̃ = (t/T) ξ,
//! ρ_ε = exp(s α̃ (T-t)/(T-t+ε)) = exp(s c / (T (T-t+ε))),
//! ```
//!
//! the weights depend on `x` only through `η⁰`, so they are constant along
//! the boundary. Products such as `e^{-2sα} ξ³` underflow for realistic
//! parameters and are evaluated in log space.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{EvolutionConfig, NoForcing, Propagator};
use crate::fields::L2Pair;
use crate::geometry::{ControlRegion, Layout, Mesh};
use crate::operators::{DiscreteOperator, PotentialPair};

/// Exponents above this are refused: `e^{300}` squared still fits in an f64.
pub const LOG_WEIGHT_LIMIT: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarlemanParams {
    pub s: f64,
    pub lambda: f64,
    pub m: f64,
}

impl Default for CarlemanParams {
    fn default() -> Self {
        CarlemanParams {
            s: 2.0,
            lambda: 2.0,
            m: 2.0,
        }
    }
}

/// `η⁰ = R² - |x|²` at the bulk nodes of a disk mesh.
pub fn build_eta0(mesh: &Mesh, omega_prime: &ControlRegion) -> Result<Vec<f64>> {
    let radius = match mesh.layout {
        Layout::Disk { radius, .. } => radius,
        Layout::Interval { .. } => {
            return Err(Error::UnsupportedGeometry(
                "Carleman weights need a two-dimensional domain with surface diffusion; \
                 the interval has a zero-dimensional boundary"
                    .into(),
            ))
        }
    };
    if omega_prime.indicator.first() != Some(&1.0) {
        return Err(Error::UnsupportedConfiguration(format!(
            "the region {:?} does not contain the origin, the only critical point of R² - |x|²",
            omega_prime.descriptor
        )));
    }
    Ok(mesh
        .bulk_nodes
        .iter()
        .map(|p| radius * radius - p[0] * p[0] - p[1] * p[1])
        .collect())
}

/// Weight evaluators for fixed `(s, λ, m, T)` and profile `η⁰`.
#[derive(Debug, Clone)]
pub struct CarlemanWeights {
    pub params: CarlemanParams,
    pub t_final: f64,
    /// `η⁰` on bulk nodes; boundary nodes carry `η⁰ = 0`.
    pub eta0: Vec<f64>,
    pub eta_sup: f64,
}

pub fn weights(params: CarlemanParams, t_final: f64, eta0: Vec<f64>) -> Result<CarlemanWeights> {
    let CarlemanParams { s, lambda, m } = params;
    if !(lambda >= 1.0 && s >= 1.0 && m > 1.0 && t_final > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "weights need s ≥ 1, λ ≥ 1, m > 1, T > 0 (got s={s}, λ={lambda}, m={m}, T={t_final})"
        )));
    }
    if eta0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("η⁰ has non-finite values".into()));
    }
    let eta_sup = eta0.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(CarlemanWeights {
        params,
        t_final,
        eta0,
        eta_sup,
    })
}

impl CarlemanWeights {
    /// `η⁰` at an index of the full state vector.
    pub fn eta(&self, node: usize) -> f64 {
        self.eta0.get(node).copied().unwrap_or(0.0)
    }

    /// `e^{2λm‖η⁰‖} - e^{λ(m‖η⁰‖ + η⁰)}`.
    pub fn numerator(&self, node: usize) -> f64 {
        let CarlemanParams { lambda, m, .. } = self.params;
        (2.0 * lambda * m * self.eta_sup).exp()
            - (lambda * (m * self.eta_sup + self.eta(node))).exp()
    }

    /// `λ(m‖η⁰‖ + η⁰)`, the log of the numerator of `ξ`.
    pub fn log_xi_numerator(&self, node: usize) -> f64 {
        let CarlemanParams { lambda, m, .. } = self.params;
        lambda * (m * self.eta_sup + self.eta(node))
    }

    fn interior(&self, t: f64, what: &str) -> Result<f64> {
        if t > 0.0 && t < self.t_final {
            Ok(t * (self.t_final - t))
        } else {
            Err(Error::SingularWeight(format!(
                "{what} is singular at t={t} (needs 0 < t < {})",
                self.t_final
            )))
        }
    }

    pub fn alpha(&self, t: f64, node: usize) -> Result<f64> {
        Ok(self.numerator(node) / self.interior(t, "α")?)
    }

    pub fn xi(&self, t: f64, node: usize) -> Result<f64> {
        Ok(self.log_xi_numerator(node).exp() / self.interior(t, "ξ")?)
    }

    pub fn log_xi(&self, t: f64, node: usize) -> Result<f64> {
        Ok(self.log_xi_numerator(node) - self.interior(t, "ξ")?.ln())
    }

    /// `α̃ = c / (T (T - t))`, finite on `[0, T)` and `+∞` at `t = T`.
    pub fn alpha_tilde(&self, t: f64, node: usize) -> f64 {
        let gap = self.t_final - t;
        if gap <= 0.0 {
            f64::INFINITY
        } else {
            self.numerator(node) / (self.t_final * gap)
        }
    }

    pub fn xi_tilde(&self, t: f64, node: usize) -> f64 {
        let gap = self.t_final - t;
        if gap <= 0.0 {
            f64::INFINITY
        } else {
            self.log_xi_numerator(node).exp() / (self.t_final * gap)
        }
    }

    /// `log ρ_ε = s c / (T (T - t + ε))`.
    pub fn log_rho(&self, eps: f64, t: f64, node: usize) -> Result<f64> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ε must lie in (0, 1] (got {eps})"
            )));
        }
        let v = self.params.s * self.numerator(node) / (self.t_final * (self.t_final - t + eps));
        if v > LOG_WEIGHT_LIMIT {
            return Err(Error::WeightOverflow(format!(
                "log ρ_ε = {v:.1} at t={t}; use a smaller s, λ or m, or a larger ε"
            )));
        }
        Ok(v)
    }

    pub fn rho(&self, eps: f64, t: f64, node: usize) -> Result<f64> {
        Ok(self.log_rho(eps, t, node)?.exp())
    }

    /// `log(e^{sα̃} ξ̃^{-3/2})`, the weight of the source spaces; `+∞` at `t = T`.
    pub fn log_source_weight(&self, t: f64, node: usize) -> f64 {
        let gap = self.t_final - t;
        if gap <= 0.0 {
            return f64::INFINITY;
        }
        self.params.s * self.alpha_tilde(t, node)
            - 1.5 * (self.log_xi_numerator(node) - (self.t_final * gap).ln())
    }
}

/// `∫∫ (e^{sα̃} ξ̃^{-3/2} f)²` for a nodal source sampled at the time nodes.
/// `offset` maps the source's node index into the full state vector (0 for
/// bulk sources, `n_bulk` for boundary sources). Evaluated in log space; a
/// non-vanishing value at `t = T` gives `+∞`.
pub fn source_weighted_norm_sq(
    cw: &CarlemanWeights,
    values: &[Vec<f64>],
    weights: &[f64],
    offset: usize,
    cfg: &EvolutionConfig,
) -> f64 {
    let tw = cfg.trapezoid_weights();
    let mut total = 0.0;
    for (n, row) in values.iter().enumerate() {
        let t = cfg.time(n);
        for (i, (&f, &w)) in row.iter().zip(weights).enumerate() {
            if f == 0.0 {
                continue;
            }
            let lw = cw.log_source_weight(t, offset + i);
            if lw == f64::INFINITY {
                return f64::INFINITY;
            }
            total += tw[n] * w * (2.0 * (lw + f.abs().ln())).exp();
        }
    }
    total
}

/// Both sides of the Carleman inequality for one trajectory, scaled by a
/// common factor `e^{-log_scale}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarlemanRecord {
    pub s: f64,
    pub lambda: f64,
    /// Bulk `∂_t`/`Δ`, boundary `∂_t`/`Δ_Γ`, bulk gradient, tangential
    /// gradient, bulk zeroth order, boundary zeroth order, normal derivative.
    pub lhs: [f64; 7],
    /// Control-region term, bulk residual, boundary residual.
    pub rhs: [f64; 3],
    pub ratio: f64,
    pub log_scale: f64,
    /// Set when the right side vanishes while the left does not.
    pub anomaly: bool,
}

/// Evaluates the seven left and three right integrals of the Carleman
/// inequality on a backward trajectory (flat states at every time node).
pub fn carleman_ratio(
    states: &[Vec<f64>],
    op: &DiscreteOperator,
    pot: &PotentialPair,
    cw: &CarlemanWeights,
    omega: &ControlRegion,
    cfg: &EvolutionConfig,
) -> Result<CarlemanRecord> {
    if !matches!(op.mesh.layout, Layout::Disk { .. }) {
        return Err(Error::UnsupportedGeometry(
            "the Carleman diagnostic needs the disk".into(),
        ));
    }
    if !(op.delta > 0.0) {
        return Err(Error::UnsupportedConfiguration(
            "the Carleman diagnostic needs positive surface diffusivity".into(),
        ));
    }
    let m = cfg.steps;
    if states.len() != m + 1 {
        return Err(Error::SizeMismatch {
            context: "carleman_ratio time nodes",
            expected: m + 1,
            found: states.len(),
        });
    }
    if states.iter().all(|s| s.iter().all(|&v| v == 0.0)) {
        return Err(Error::UndefinedRatio(
            "the trajectory vanishes identically".into(),
        ));
    }
    let CarlemanParams { s, lambda, .. } = cw.params;
    let nb = op.n_bulk();
    let n = op.n_total();
    let dt = cfg.dt();
    let mass = &op.mass;

    // log(e^{-2sα}) is largest where α is smallest: at t = T/2 and the
    // maximum of η⁰.
    let c_min = (0..n)
        .map(|i| cw.numerator(i))
        .fold(f64::INFINITY, f64::min);
    let log_scale = -2.0 * s * c_min / (0.25 * cfg.t_final * cfg.t_final);

    let mut lhs = [0.0; 7];
    let mut rhs = [0.0; 3];
    for k in 1..m {
        let t = cfg.time(k);
        let phi = &states[k];
        let dphi: Vec<f64> = states[k + 1]
            .iter()
            .zip(&states[k - 1])
            .map(|(a, b)| (a - b) / (2.0 * dt))
            .collect();
        let lap = op.bulk_laplacian(phi);
        let a_phi = op.apply_a(phi);
        let grad = op.bulk_gradient(phi);
        let surf = &phi[nb..];
        let lap_g = op.surface_laplacian(surf);
        let grad_g = op.surface_gradient(surf);
        let dn = op.normal_derivative(phi);
        let b = pot.diagonal(&op.mesh, t);
        for i in 0..n {
            let log_damp = -2.0 * s * cw.alpha(t, i)? - log_scale;
            let lx = cw.log_xi(t, i)?;
            let w = dt * mass[i];
            let e = |k: f64| (log_damp + k * lx).exp() * w;
            let p2 = phi[i] * phi[i];
            if i < nb {
                let g2 = grad[i][0] * grad[i][0] + grad[i][1] * grad[i][1];
                lhs[0] += e(-1.0) / s * (dphi[i] * dphi[i] + lap[i] * lap[i]);
                lhs[2] += e(1.0) * s * lambda * lambda * g2;
                lhs[4] += e(3.0) * s.powi(3) * lambda.powi(4) * p2;
                if omega.indicator[i] > 0.0 {
                    rhs[0] += e(3.0) * s.powi(3) * lambda.powi(4) * p2;
                }
                let res = dphi[i] + a_phi[i] - b[i] * phi[i];
                rhs[1] += e(0.0) * res * res;
            } else {
                let j = i - nb;
                lhs[1] += e(-1.0) / s * (dphi[i] * dphi[i] + lap_g[j] * lap_g[j]);
                lhs[3] += e(1.0) * s * lambda * grad_g[j] * grad_g[j];
                lhs[5] += e(3.0) * s.powi(3) * lambda.powi(3) * p2;
                lhs[6] += e(1.0) * s * lambda * dn[j] * dn[j];
                let res = dphi[i] + a_phi[i] - b[i] * phi[i];
                rhs[2] += e(0.0) * res * res;
            }
        }
    }
    let l: f64 = lhs.iter().sum();
    let r: f64 = rhs.iter().sum();
    if l == 0.0 && r == 0.0 {
        return Err(Error::UndefinedRatio(
            "both sides vanish after weighting (weights underflow on this grid)".into(),
        ));
    }
    let anomaly = r == 0.0;
    Ok(CarlemanRecord {
        s,
        lambda,
        lhs,
        rhs,
        ratio: if anomaly { f64::INFINITY } else { l / r },
        log_scale,
        anomaly,
    })
}

/// Ratios for every `(φ_T, s, λ)` combination. Backward solutions are
/// computed once per terminal datum; parameter points run in parallel.
#[allow(clippy::too_many_arguments)]
pub fn carleman_sweep(
    op: &DiscreteOperator,
    pot: &PotentialPair,
    omega: &ControlRegion,
    eta0: &[f64],
    m: f64,
    s_values: &[f64],
    lambda_values: &[f64],
    terminal_data: &[L2Pair],
    cfg: &EvolutionConfig,
) -> Result<Vec<CarlemanRecord>> {
    let prop = Propagator::new(op, pot, cfg)?;
    let mut out = Vec::new();
    for phi_t in terminal_data {
        phi_t.conforms(&op.mesh)?;
        let states = prop.backward(phi_t.as_slice(), &NoForcing)?;
        let points: Vec<(f64, f64)> = lambda_values
            .iter()
            .flat_map(|&l| s_values.iter().map(move |&s| (s, l)))
            .collect();
        let recs: Vec<Result<CarlemanRecord>> = points
            .par_iter()
            .map(|&(s, lambda)| {
                let cw = weights(CarlemanParams { s, lambda, m }, cfg.t_final, eta0.to_vec())?;
                carleman_ratio(&states, op, pot, &cw, omega, cfg)
            })
            .collect();
        for r in recs {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Sweep table with columns `s,lambda,lhs1..lhs7,rhs1..rhs3,ratio,log_scale`.
pub fn sweep_csv(records: &[CarlemanRecord]) -> String {
    let mut out = String::from("s,lambda");
    for k in 1..=7 {
        let _ = write!(out, ",lhs{k}");
    }
    for k in 1..=3 {
        let _ = write!(out, ",rhs{k}");
    }
    out.push_str(",ratio,log_scale\n");
    for r in records {
        let _ = write!(out, "{:.17e},{:.17e}", r.s, r.lambda);
        for v in r.lhs.iter().chain(&r.rhs) {
            let _ = write!(out, ",{v:.17e}");
        }
        let _ = writeln!(out, ",{:.17e},{:.17e}", r.ratio, r.log_scale);
    }
    out
}

/// Random combinations of `1, x, y, x² - y², xy, |x|²` with coefficients
/// uniform in `[-1, 1]`, sampled on bulk and boundary nodes alike.
pub fn random_smooth_data(mesh: &Mesh, count: usize, seed: u64) -> Vec<L2Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let c: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
            L2Pair::sample(mesh, |[x, y]| {
                c[0] + c[1] * x
                    + c[2] * y
                    + c[3] * (x * x - y * y)
                    + c[4] * x * y
                    + c[5] * (x * x + y * y)
            })
        })
        .collect()
}

/// Node-wise checks of the profile: minimum inside, maximum magnitude on the
/// boundary, smallest gradient outside `ω′`, largest normal derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eta0Report {
    pub min_interior: f64,
    pub max_boundary_abs: f64,
    pub min_gradient_outside: f64,
    pub max_normal_derivative: f64,
}

pub fn eta0_report(op: &DiscreteOperator, eta0: &[f64], omega_prime: &ControlRegion) -> Eta0Report {
    let nb = op.n_bulk();
    let mut full = eta0.to_vec();
    full.extend(vec![0.0; op.mesh.n_surface()]);
    let grad = op.bulk_gradient(&full);
    let min_gradient_outside = (0..nb)
        .filter(|&i| omega_prime.indicator[i] == 0.0)
        .map(|i| grad[i][0].hypot(grad[i][1]))
        .fold(f64::INFINITY, f64::min);
    Eta0Report {
        min_interior: eta0.iter().copied().fold(f64::INFINITY, f64::min),
        max_boundary_abs: full[nb..].iter().fold(0.0, |a: f64, v| a.max(v.abs())),
        min_gradient_outside,
        max_normal_derivative: op
            .normal_derivative(&full)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{control_mask, RegionDescriptor};
    use crate::operators::assemble;

    fn unit_disk() -> (Mesh, ControlRegion) {
        let mesh = Mesh::disk(16, 64, 1.0).unwrap();
        let w = control_mask(
            &mesh,
            &RegionDescriptor::Disk {
                center: [0.0, 0.0],
                radius: 0.25,
            },
        )
        .unwrap();
        (mesh, w)
    }

    #[test]
    fn eta0_profile() {
        let (mesh, wp) = unit_disk();
        let eta = build_eta0(&mesh, &wp).unwrap();
        assert_eq!(eta[0], 1.0);
        let op = assemble(&mesh, 1.0, 1.0).unwrap();
        let r = eta0_report(&op, &eta, &wp);
        assert!(r.min_interior > 0.0);
        assert_eq!(r.max_boundary_abs, 0.0);
        assert!(r.min_gradient_outside > 0.4);
        assert!((r.max_normal_derivative + 2.0).abs() < 1e-10);
    }

    #[test]
    fn eta0_refusals() {
        let line = Mesh::interval(10, 1.0).unwrap();
        let seg = control_mask(
            &line,
            &RegionDescriptor::Segment {
                start: 0.3,
                end: 0.7,
            },
        )
        .unwrap();
        assert!(matches!(
            build_eta0(&line, &seg),
            Err(Error::UnsupportedGeometry(_))
        ));
        let (mesh, _) = unit_disk();
        let off = control_mask(
            &mesh,
            &RegionDescriptor::Disk {
                center: [0.5, 0.0],
                radius: 0.1,
            },
        )
        .unwrap();
        assert!(matches!(
            build_eta0(&mesh, &off),
            Err(Error::UnsupportedConfiguration(_))
        ));
    }

    #[test]
    fn spot_values() {
        let cw = weights(
            CarlemanParams {
                s: 1.0,
                lambda: 1.0,
                m: 2.0,
            },
            1.0,
            vec![1.0, 0.5],
        )
        .unwrap();
        let e = std::f64::consts::E;
        let boundary = 7;
        let xi = cw.xi(0.5, boundary).unwrap();
        let alpha = cw.alpha(0.5, boundary).unwrap();
        assert!((xi - 4.0 * e * e).abs() <= 1e-12 * xi);
        assert!((alpha - 4.0 * (e.powi(4) - e * e)).abs() <= 1e-12 * alpha);
        assert!(cw.alpha(0.0, 0).is_err());
        assert!(cw.xi(1.0, 0).is_err());
        let limit = cw.alpha_tilde(0.0, 0);
        let near = (1e-7 / 1.0) * cw.alpha(1e-7, 0).unwrap();
        assert!((limit - near).abs() < 1e-6 * limit);
        assert!((limit - ((4.0f64).exp() - (3.0f64).exp())).abs() < 1e-12 * limit);
    }

    #[test]
    fn rho_is_bounded_and_positive_with_finite_terminal_value() {
        let cw = weights(
            CarlemanParams {
                s: 1.0,
                lambda: 1.0,
                m: 1.1,
            },
            1.0,
            vec![1.0, 0.3],
        )
        .unwrap();
        for node in [0, 1, 5] {
            let mut prev = 0.0;
            for k in 0..=100 {
                let t = k as f64 / 100.0;
                let r = cw.rho(0.5, t, node).unwrap();
                assert!(r > 0.0 && r.is_finite());
                assert!(r >= prev);
                assert!(r <= (cw.params.s * cw.alpha_tilde(t, node)).exp());
                prev = r;
            }
            let at_t = cw.rho(0.5, 1.0, node).unwrap();
            let expect = (cw.numerator(node) / 0.5).exp();
            assert!((at_t - expect).abs() < 1e-12 * expect);
        }
    }

    #[test]
    fn rho_overflow_is_reported() {
        let cw = weights(CarlemanParams::default(), 1.0, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            cw.rho(1e-2, 1.0, 1),
            Err(Error::WeightOverflow(_))
        ));
    }

    #[test]
    fn weights_are_constant_on_the_boundary() {
        let (mesh, wp) = unit_disk();
        let eta = build_eta0(&mesh, &wp).unwrap();
        let op = assemble(&mesh, 1.0, 1.0).unwrap();
        let cw = weights(CarlemanParams::default(), 1.0, eta).unwrap();
        let nb = mesh.n_bulk();
        let a: Vec<f64> = (0..mesh.n_surface())
            .map(|j| cw.alpha(0.3, nb + j).unwrap())
            .collect();
        let x: Vec<f64> = (0..mesh.n_surface())
            .map(|j| cw.xi(0.3, nb + j).unwrap())
            .collect();
        assert!(op.surface_gradient(&a).iter().all(|v| *v == 0.0));
        assert!(op.surface_gradient(&x).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn damping_is_monotone_in_s() {
        let cw1 = weights(
            CarlemanParams {
                s: 1.0,
                lambda: 2.0,
                m: 2.0,
            },
            1.0,
            vec![0.4],
        )
        .unwrap();
        let cw2 = weights(
            CarlemanParams {
                s: 3.0,
                lambda: 2.0,
                m: 2.0,
            },
            1.0,
            vec![0.4],
        )
        .unwrap();
        for k in 1..20 {
            let t = k as f64 / 20.0;
            for node in [0, 1] {
                let a = cw1.alpha(t, node).unwrap();
                assert!((-2.0 * 3.0 * a) <= (-2.0 * 1.0 * a));
                assert_eq!(a, cw2.alpha(t, node).unwrap());
            }
        }
    }

    #[test]
    fn parameters_are_validated() {
        assert!(weights(
            CarlemanParams {
                s: 0.5,
                lambda: 1.0,
                m: 2.0
            },
            1.0,
            vec![]
        )
        .is_err());
        assert!(weights(
            CarlemanParams {
                s: 1.0,
                lambda: 1.0,
                m: 1.0
            },
            1.0,
            vec![]
        )
        .is_err());
    }

    #[test]
    fn zero_trajectory_has_no_ratio() {
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
        let eta = build_eta0(
            &mesh,
            &control_mask(&mesh, &w.descriptor.shrunk_half()).unwrap(),
        )
        .unwrap();
        let cw = weights(CarlemanParams::default(), 1.0, eta).unwrap();
        let cfg = EvolutionConfig::new(1.0, 10);
        let states = vec![vec![0.0; op.n_total()]; 11];
        let r = carleman_ratio(&states, &op, &PotentialPair::zero(), &cw, &w, &cfg);
        assert!(matches!(r, Err(Error::UndefinedRatio(_))));
        let op0 = assemble(&mesh, 1.0, 0.0).unwrap();
        let states = vec![vec![1.0; op.n_total()]; 11];
        let r = carleman_ratio(&states, &op0, &PotentialPair::zero(), &cw, &w, &cfg);
        assert!(matches!(r, Err(Error::UnsupportedConfiguration(_))));
    }

    #[test]
    fn constant_solution_has_vanishing_residual_terms() {
        let mesh = Mesh::disk(8, 32, 1.0).unwrap();
        let op = assemble(&mesh, 1.0, 1.0).unwrap();
        let w = control_mask(
            &mesh,
            &RegionDescriptor::Disk {
                center: [0.0, 0.0],
                radius: 0.5,
            },
        )
        .unwrap();
        let eta = build_eta0(
            &mesh,
            &control_mask(&mesh, &w.descriptor.shrunk_half()).unwrap(),
        )
        .unwrap();
        let cfg = EvolutionConfig::new(1.0, 40);
        let recs = carleman_sweep(
            &op,
            &PotentialPair::zero(),
            &w,
            &eta,
            2.0,
            &[2.0],
            &[2.0],
            &[L2Pair::constant(&mesh, 1.0)],
            &cfg,
        )
        .unwrap();
        let r = &recs[0];
        assert!(r.rhs[1] < 1e-20 * r.rhs[0] && r.rhs[2] < 1e-20 * r.rhs[0]);
        assert!(r.ratio.is_finite() && r.ratio > 0.0);
        assert!(sweep_csv(&recs).lines().count() == 2);
    }
}
