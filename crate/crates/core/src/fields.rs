//! State pairs `(y, y_Γ)`, trajectories and the quadratures built on them.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::Mesh;

/// A bulk field and an independent surface field, stored contiguously
/// (bulk values first). The two parts carry no trace constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Pair {
    data: Vec<f64>,
    n_bulk: usize,
}

impl L2Pair {
    pub fn zeros(mesh: &Mesh) -> Self {
        Self::constant(mesh, 0.0)
    }

    pub fn constant(mesh: &Mesh, c: f64) -> Self {
        L2Pair {
            data: vec![c; mesh.n_total()],
            n_bulk: mesh.n_bulk(),
        }
    }

    pub fn from_parts(bulk: &[f64], surface: &[f64]) -> Self {
        let mut data = bulk.to_vec();
        data.extend_from_slice(surface);
        L2Pair {
            data,
            n_bulk: bulk.len(),
        }
    }

    pub fn from_vec(data: Vec<f64>, n_bulk: usize) -> Result<Self> {
        if n_bulk > data.len() {
            return Err(Error::SizeMismatch {
                context: "L2Pair::from_vec",
                expected: n_bulk,
                found: data.len(),
            });
        }
        Ok(L2Pair { data, n_bulk })
    }

    /// Builds a trace-coupled pair from a function of position.
    pub fn sample(mesh: &Mesh, f: impl Fn([f64; 2]) -> f64) -> Self {
        let mut data: Vec<f64> = mesh.bulk_nodes.iter().map(|&p| f(p)).collect();
        data.extend(mesh.boundary_nodes.iter().map(|&p| f(p)));
        L2Pair {
            data,
            n_bulk: mesh.n_bulk(),
        }
    }

    pub fn n_bulk(&self) -> usize {
        self.n_bulk
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bulk(&self) -> &[f64] {
        &self.data[..self.n_bulk]
    }

    pub fn surface(&self) -> &[f64] {
        &self.data[self.n_bulk..]
    }

    pub fn bulk_mut(&mut self) -> &mut [f64] {
        &mut self.data[..self.n_bulk]
    }

    pub fn surface_mut(&mut self) -> &mut [f64] {
        &mut self.data[self.n_bulk..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn conforms(&self, mesh: &Mesh) -> Result<()> {
        check_len("L2Pair bulk", mesh.n_bulk(), self.n_bulk)?;
        check_len(
            "L2Pair surface",
            mesh.n_surface(),
            self.data.len() - self.n_bulk,
        )
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &L2Pair) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// The 𝕃² pairing `∫_Ω a b dx + ∫_Γ a b dS` under the mesh quadrature.
pub fn inner(a: &L2Pair, b: &L2Pair, mesh: &Mesh) -> Result<f64> {
    a.conforms(mesh)?;
    b.conforms(mesh)?;
    let bulk: f64 = a
        .bulk()
        .iter()
        .zip(b.bulk())
        .zip(&mesh.bulk_weights)
        .map(|((x, y), w)| x * y * w)
        .sum();
    let surf: f64 = a
        .surface()
        .iter()
        .zip(b.surface())
        .zip(&mesh.boundary_weights)
        .map(|((x, y), w)| x * y * w)
        .sum();
    Ok(bulk + surf)
}

pub fn norm(a: &L2Pair, mesh: &Mesh) -> Result<f64> {
    Ok(inner(a, a, mesh)?.sqrt())
}

/// Mass-weighted dot product of two flat state vectors.
pub(crate) fn mass_dot(mass: &[f64], a: &[f64], b: &[f64]) -> f64 {
    mass.iter().zip(a).zip(b).map(|((m, x), y)| m * x * y).sum()
}

/// States on the uniform grid `t_n = n T / M`, `n = 0..=M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t_final: f64,
    pub states: Vec<L2Pair>,
}

impl Trajectory {
    pub fn new(t_final: f64, states: Vec<L2Pair>) -> Result<Self> {
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "final time must be positive (got {t_final})"
            )));
        }
        if states.len() < 2 {
            return Err(Error::InvalidArgument(
                "a trajectory needs at least two time nodes".into(),
            ));
        }
        let n = states[0].len();
        let nb = states[0].n_bulk();
        for s in &states {
            if s.len() != n || s.n_bulk() != nb {
                return Err(Error::SizeMismatch {
                    context: "Trajectory states",
                    expected: n,
                    found: s.len(),
                });
            }
        }
        Ok(Trajectory { t_final, states })
    }

    pub fn zeros(mesh: &Mesh, t_final: f64, steps: usize) -> Self {
        Trajectory {
            t_final,
            states: vec![L2Pair::zeros(mesh); steps + 1],
        }
    }

    /// Number of time steps `M`.
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps() as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.steps() {
            self.t_final
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|n| self.time(n)).collect()
    }

    pub fn last(&self) -> &L2Pair {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn conforms(&self, mesh: &Mesh) -> Result<()> {
        self.states[0].conforms(mesh)
    }

    /// `‖self‖²_{L²(0,T;𝕃²)}` with the composite trapezoidal rule.
    pub fn l2_norm_sq(&self, mesh: &Mesh) -> Result<f64> {
        weighted_time_norm(self, |_, _| 1.0, mesh)
    }

    /// `max_n ‖y^n‖_{𝕃²}`.
    pub fn sup_norm(&self, mesh: &Mesh) -> Result<f64> {
        let mut m: f64 = 0.0;
        for s in &self.states {
            m = m.max(norm(s, mesh)?);
        }
        Ok(m)
    }

    /// Node-wise difference `self - other`.
    pub fn difference(&self, other: &Trajectory) -> Result<Trajectory> {
        check_len(
            "Trajectory::difference",
            self.states.len(),
            other.states.len(),
        )?;
        let states = self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| {
                let mut d = a.clone();
                d.axpy(-1.0, b);
                d
            })
            .collect();
        Ok(Trajectory {
            t_final: self.t_final,
            states,
        })
    }

    /// Long-format CSV with columns `t,node_id,component,value`.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("t,node_id,component,value\n");
        for (n, s) in self.states.iter().enumerate() {
            let t = self.time(n);
            let nb = s.n_bulk();
            for (i, v) in s.as_slice().iter().enumerate() {
                let comp = if i < nb { "bulk" } else { "surface" };
                let _ = writeln!(out, "{t:.17e},{i},{comp},{v:.17e}");
            }
        }
        out
    }

    /// Compact little-endian dump: magic, `M+1`, `N`, `n_bulk`, `T`, values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        let n = self.states[0].len() as u64;
        let nb = self.states[0].n_bulk() as u64;
        w.write_all(&(self.states.len() as u64).to_le_bytes())?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&nb.to_le_bytes())?;
        w.write_all(&self.t_final.to_le_bytes())?;
        for s in &self.states {
            for v in s.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::InvalidArgument("not a trajectory dump".into()));
        }
        let mut buf = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut buf)?;
            Ok(u64::from_le_bytes(buf))
        };
        let count = next_u64(&mut r)? as usize;
        let n = next_u64(&mut r)? as usize;
        let nb = next_u64(&mut r)? as usize;
        let t_final = f64::from_bits(next_u64(&mut r)?);
        let mut states = Vec::with_capacity(count);
        for _ in 0..count {
            let mut data = vec![0.0; n];
            for v in data.iter_mut() {
                *v = f64::from_bits(next_u64(&mut r)?);
            }
            states.push(L2Pair::from_vec(data, nb)?);
        }
        Trajectory::new(t_final, states)
    }
}

const BINARY_MAGIC: &[u8; 8] = b"WTZTRJ01";

/// Composite trapezoidal rule in time of `‖w(t)·y(t)‖²_{𝕃²}`, i.e. the square
/// of the weighted `L²(0,T;𝕃²)` norm. The evaluator receives the time and the
/// index into the flat state vector (bulk nodes, then boundary nodes).
///
/// Interior weights must be finite. At `t = 0` and `t = T` a non-finite
/// weight is read as the continuous extension of `w·y`: the endpoint
/// contributes nothing when the state vanishes there, and the norm is
/// infinite otherwise.
pub fn weighted_time_norm<W>(tr: &Trajectory, w: W, mesh: &Mesh) -> Result<f64>
where
    W: Fn(f64, usize) -> f64,
{
    tr.conforms(mesh)?;
    let mass = mesh.mass_diagonal();
    let m = tr.steps();
    let dt = tr.dt();
    let mut total = 0.0;
    for (n, s) in tr.states.iter().enumerate() {
        let t = tr.time(n);
        let endpoint = n == 0 || n == m;
        let q = if endpoint { 0.5 } else { 1.0 };
        let mut acc = 0.0;
        for (i, (&y, &mi)) in s.as_slice().iter().zip(&mass).enumerate() {
            if y == 0.0 {
                continue;
            }
            let wi = w(t, i);
            if !wi.is_finite() {
                if endpoint && wi == f64::INFINITY {
                    return Ok(f64::INFINITY);
                }
                return Err(Error::SingularWeight(format!(
                    "weight {wi} at t={t}, node {i}"
                )));
            }
            acc += mi * (wi * y).powi(2);
        }
        total += q * dt * acc;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_pair(mesh: &Mesh, rng: &mut ChaCha8Rng) -> L2Pair {
        let data = (0..mesh.n_total())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        L2Pair::from_vec(data, mesh.n_bulk()).unwrap()
    }

    #[test]
    fn constants_pair_to_total_measure() {
        let m = Mesh::disk(16, 64, 1.0).unwrap();
        let one = L2Pair::constant(&m, 1.0);
        assert!((inner(&one, &one, &m).unwrap() - 3.0 * PI).abs() < 1e-2);
    }

    #[test]
    fn zero_surface_reduces_to_bulk_pairing() {
        let m = Mesh::disk(6, 16, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_pair(&m, &mut rng);
        let mut b = random_pair(&m, &mut rng);
        b.surface_mut().iter_mut().for_each(|v| *v = 0.0);
        let bulk: f64 = (0..m.n_bulk())
            .map(|i| a.bulk()[i] * b.bulk()[i] * m.bulk_weights[i])
            .sum();
        assert_eq!(inner(&a, &b, &m).unwrap(), bulk);
    }

    #[test]
    fn inner_is_symmetric_and_checks_sizes() {
        let m = Mesh::disk(6, 16, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = random_pair(&m, &mut rng);
            let b = random_pair(&m, &mut rng);
            assert_eq!(inner(&a, &b, &m).unwrap(), inner(&b, &a, &m).unwrap());
        }
        let other = Mesh::disk(5, 16, 1.0).unwrap();
        let a = L2Pair::zeros(&other);
        let b = L2Pair::zeros(&m);
        assert!(matches!(inner(&a, &b, &m), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn unit_weight_norm_of_constant_trajectory() {
        let m = Mesh::disk(16, 64, 1.0).unwrap();
        let tr = Trajectory::new(1.0, vec![L2Pair::constant(&m, 1.0); 11]).unwrap();
        let v = weighted_time_norm(&tr, |_, _| 1.0, &m).unwrap();
        assert!((v - 3.0 * PI).abs() < 1e-2);
        let z = Trajectory::zeros(&m, 1.0, 10);
        assert_eq!(weighted_time_norm(&z, |_, _| f64::NAN, &m).unwrap(), 0.0);
    }

    #[test]
    fn singular_interior_weight_is_rejected() {
        let m = Mesh::interval(4, 1.0).unwrap();
        let tr = Trajectory::new(1.0, vec![L2Pair::constant(&m, 1.0); 5]).unwrap();
        let r = weighted_time_norm(&tr, |t, _| if t == 0.5 { f64::INFINITY } else { 1.0 }, &m);
        assert!(matches!(r, Err(Error::SingularWeight(_))));
    }

    #[test]
    fn singular_endpoint_weight_uses_continuous_extension() {
        let m = Mesh::interval(4, 1.0).unwrap();
        let mut states = vec![L2Pair::constant(&m, 1.0); 5];
        *states.last_mut().unwrap() = L2Pair::zeros(&m);
        let tr = Trajectory::new(1.0, states).unwrap();
        let w = |t: f64, _| if t == 1.0 { f64::INFINITY } else { 1.0 };
        let v = weighted_time_norm(&tr, w, &m).unwrap();
        assert!((v - 3.0 * 0.25 * 3.5).abs() < 1e-13);

        let tr = Trajectory::new(1.0, vec![L2Pair::constant(&m, 1.0); 5]).unwrap();
        assert_eq!(weighted_time_norm(&tr, w, &m).unwrap(), f64::INFINITY);
    }

    #[test]
    fn binary_dump_round_trips() {
        let m = Mesh::disk(4, 8, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states = (0..4).map(|_| random_pair(&m, &mut rng)).collect();
        let tr = Trajectory::new(0.7, states).unwrap();
        let mut buf = Vec::new();
        tr.write_binary(&mut buf).unwrap();
        let back = Trajectory::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back, tr);
    }

    #[test]
    fn csv_is_long_format() {
        let m = Mesh::interval(2, 1.0).unwrap();
        let tr = Trajectory::zeros(&m, 1.0, 2);
        let csv = tr.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 * 4);
        assert!(csv.contains(",3,surface,"));
    }
}
