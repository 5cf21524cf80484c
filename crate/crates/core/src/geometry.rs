//! Discrete geometries and control-region masks.
//!
//! Two geometries are supported:
//!
//! * the disk of radius `R`, discretized by a polar grid with a single node at
//!   the origin, `n_r - 1` rings of bulk nodes and one ring of `n_theta`
//!   boundary nodes on the circle `r = R`;
//! * the interval `[0, L]` with `n` cell-centred bulk nodes and two endpoint
//!   boundary nodes carrying counting measure.
//!
//! Bulk cells are exact annular sectors (disk) or segments (interval), so the
//! bulk quadrature reproduces `|Ω|` exactly and the boundary quadrature is the
//! uniform rule on the circle. Node ordering is bulk-first, ring by ring, then
//! boundary, which keeps the assembled stiffness matrix banded with half
//! bandwidth `n_theta`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry description as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeometrySpec {
    Disk {
        n_r: usize,
        n_theta: usize,
        #[serde(default = "default_extent")]
        radius: f64,
    },
    Interval {
        n: usize,
        #[serde(default = "default_extent")]
        length: f64,
    },
}

fn default_extent() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layout {
    /// Polar grid; `h` is the radial spacing, ring `i` sits at `r = i h` and
    /// the last bulk ring `n_r - 1` at `R - h/2`.
    Disk {
        n_r: usize,
        n_theta: usize,
        radius: f64,
        h: f64,
    },
    /// Cell-centred interval grid with spacing `h = L / n`.
    Interval { n: usize, length: f64, h: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshKind {
    Disk,
    Interval,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub layout: Layout,
    pub bulk_nodes: Vec<[f64; 2]>,
    /// Bulk quadrature weights (area for the disk, length for the interval).
    pub bulk_weights: Vec<f64>,
    pub boundary_nodes: Vec<[f64; 2]>,
    /// Surface quadrature weights (arc length, or 1 per interval endpoint).
    pub boundary_weights: Vec<f64>,
    /// For each boundary node, the bulk node whose value is its discrete trace.
    pub trace_map: Vec<usize>,
}

impl Mesh {
    pub fn build(spec: &GeometrySpec) -> Result<Self> {
        match *spec {
            GeometrySpec::Disk {
                n_r,
                n_theta,
                radius,
            } => Self::disk(n_r, n_theta, radius),
            GeometrySpec::Interval { n, length } => Self::interval(n, length),
        }
    }

    pub fn disk(n_r: usize, n_theta: usize, radius: f64) -> Result<Self> {
        if n_r < 2 || n_theta < 2 {
            return Err(Error::InvalidArgument(format!(
                "disk resolution must be at least 2 in each direction (got n_r={n_r}, n_theta={n_theta})"
            )));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "disk radius must be positive (got {radius})"
            )));
        }
        let h = radius / (n_r as f64 - 0.5);
        let dtheta = 2.0 * PI / n_theta as f64;
        let n_bulk = 1 + (n_r - 1) * n_theta;

        let mut bulk_nodes = Vec::with_capacity(n_bulk);
        let mut bulk_weights = Vec::with_capacity(n_bulk);
        bulk_nodes.push([0.0, 0.0]);
        bulk_weights.push(PI * 0.25 * h * h);
        for i in 1..n_r {
            let r = i as f64 * h;
            let r_in = r - 0.5 * h;
            let r_out = r + 0.5 * h;
            let w = 0.5 * (r_out * r_out - r_in * r_in) * dtheta;
            for j in 0..n_theta {
                let th = j as f64 * dtheta;
                bulk_nodes.push([r * th.cos(), r * th.sin()]);
                bulk_weights.push(w);
            }
        }

        let boundary_nodes = (0..n_theta)
            .map(|j| {
                let th = j as f64 * dtheta;
                [radius * th.cos(), radius * th.sin()]
            })
            .collect();
        let boundary_weights = vec![radius * dtheta; n_theta];
        let trace_map = (0..n_theta).map(|j| 1 + (n_r - 2) * n_theta + j).collect();

        Ok(Mesh {
            layout: Layout::Disk {
                n_r,
                n_theta,
                radius,
                h,
            },
            bulk_nodes,
            bulk_weights,
            boundary_nodes,
            boundary_weights,
            trace_map,
        })
    }

    pub fn interval(n: usize, length: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "interval resolution must be at least 2 (got n={n})"
            )));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "interval length must be positive (got {length})"
            )));
        }
        let h = length / n as f64;
        let bulk_nodes = (0..n).map(|i| [(i as f64 + 0.5) * h, 0.0]).collect();
        Ok(Mesh {
            layout: Layout::Interval { n, length, h },
            bulk_nodes,
            bulk_weights: vec![h; n],
            boundary_nodes: vec![[0.0, 0.0], [length, 0.0]],
            boundary_weights: vec![1.0, 1.0],
            trace_map: vec![0, n - 1],
        })
    }

    pub fn kind(&self) -> MeshKind {
        match self.layout {
            Layout::Disk { .. } => MeshKind::Disk,
            Layout::Interval { .. } => MeshKind::Interval,
        }
    }

    pub fn n_bulk(&self) -> usize {
        self.bulk_nodes.len()
    }

    pub fn n_surface(&self) -> usize {
        self.boundary_nodes.len()
    }

    pub fn n_total(&self) -> usize {
        self.n_bulk() + self.n_surface()
    }

    /// Radial spacing (disk) or cell size (interval).
    pub fn spacing(&self) -> f64 {
        match self.layout {
            Layout::Disk { h, .. } | Layout::Interval { h, .. } => h,
        }
    }

    pub fn radius(&self) -> Option<f64> {
        match self.layout {
            Layout::Disk { radius, .. } => Some(radius),
            Layout::Interval { .. } => None,
        }
    }

    pub fn bulk_measure(&self) -> f64 {
        self.bulk_weights.iter().sum()
    }

    pub fn surface_measure(&self) -> f64 {
        self.boundary_weights.iter().sum()
    }

    /// Mass-matrix diagonal in solver ordering (bulk then boundary).
    pub fn mass_diagonal(&self) -> Vec<f64> {
        let mut m = self.bulk_weights.clone();
        m.extend_from_slice(&self.boundary_weights);
        m
    }

    /// Discrete trace of a bulk field.
    pub fn trace(&self, bulk: &[f64]) -> Vec<f64> {
        self.trace_map.iter().map(|&i| bulk[i]).collect()
    }

    /// Index of bulk node `(ring, angle)` on the disk; ring 0 is the origin.
    pub fn disk_index(&self, ring: usize, angle: usize) -> usize {
        match self.layout {
            Layout::Disk { n_theta, .. } => {
                if ring == 0 {
                    0
                } else {
                    1 + (ring - 1) * n_theta + angle % n_theta
                }
            }
            Layout::Interval { .. } => panic!("disk_index called on an interval mesh"),
        }
    }

    /// Node table as CSV with columns `id,x,y,weight,is_boundary`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,x,y,weight,is_boundary\n");
        for (i, (p, w)) in self.bulk_nodes.iter().zip(&self.bulk_weights).enumerate() {
            let _ = writeln!(out, "{},{:.17e},{:.17e},{:.17e},0", i, p[0], p[1], w);
        }
        let nb = self.n_bulk();
        for (j, (p, w)) in self
            .boundary_nodes
            .iter()
            .zip(&self.boundary_weights)
            .enumerate()
        {
            let _ = writeln!(out, "{},{:.17e},{:.17e},{:.17e},1", nb + j, p[0], p[1], w);
        }
        out
    }
}

/// Description of an open control (or observation) set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RegionDescriptor {
    Disk {
        center: [f64; 2],
        radius: f64,
    },
    Segment {
        start: f64,
        end: f64,
    },
    /// Observation of the whole state, bulk and surface. Only meaningful for
    /// observability estimates; it is rejected as a control region.
    Full,
}

impl RegionDescriptor {
    /// Concentric region with half the radius (or half the extent).
    pub fn shrunk_half(&self) -> RegionDescriptor {
        match *self {
            RegionDescriptor::Disk { center, radius } => RegionDescriptor::Disk {
                center,
                radius: 0.5 * radius,
            },
            RegionDescriptor::Segment { start, end } => {
                let mid = 0.5 * (start + end);
                let half = 0.25 * (end - start);
                RegionDescriptor::Segment {
                    start: mid - half,
                    end: mid + half,
                }
            }
            RegionDescriptor::Full => RegionDescriptor::Full,
        }
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            RegionDescriptor::Disk { center, radius } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                dx * dx + dy * dy < radius * radius
            }
            RegionDescriptor::Segment { start, end } => p[0] > start && p[0] < end,
            RegionDescriptor::Full => true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlRegion {
    pub descriptor: RegionDescriptor,
    /// Per-bulk-node indicator in {0, 1}.
    pub indicator: Vec<f64>,
    /// Per-boundary-node indicator; nonzero only for full observation.
    pub surface_indicator: Vec<f64>,
    /// Bulk node indices with indicator 1, ascending.
    pub nodes: Vec<usize>,
    /// Indices into the full state vector (bulk then surface) where the
    /// indicator is 1. Controls are stored compactly on this list.
    pub support: Vec<usize>,
}

impl ControlRegion {
    /// Observation of the complete state (ω = Ω together with Γ).
    pub fn full_observation(mesh: &Mesh) -> Self {
        ControlRegion {
            descriptor: RegionDescriptor::Full,
            indicator: vec![1.0; mesh.n_bulk()],
            surface_indicator: vec![1.0; mesh.n_surface()],
            nodes: (0..mesh.n_bulk()).collect(),
            support: (0..mesh.n_total()).collect(),
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self.descriptor, RegionDescriptor::Full)
    }

    /// Measure of ω under the bulk quadrature (plus |Γ| for full observation).
    pub fn measure(&self, mesh: &Mesh) -> f64 {
        let m = mesh.mass_diagonal();
        self.support.iter().map(|&i| m[i]).sum()
    }

    /// Multiplies a full state vector (bulk then surface) by the indicator.
    pub fn restrict(&self, state: &mut [f64]) {
        let nb = self.indicator.len();
        for (v, m) in state[..nb].iter_mut().zip(&self.indicator) {
            *v *= m;
        }
        for (v, m) in state[nb..].iter_mut().zip(&self.surface_indicator) {
            *v *= m;
        }
    }
}

/// Builds the indicator of an open set strictly contained in the domain.
pub fn control_mask(mesh: &Mesh, descriptor: &RegionDescriptor) -> Result<ControlRegion> {
    match (*descriptor, mesh.layout) {
        (RegionDescriptor::Full, _) => return Err(Error::InvalidArgument(
            "full region touches the boundary; use ControlRegion::full_observation for observation"
                .into(),
        )),
        (RegionDescriptor::Disk { center, radius }, Layout::Disk { radius: big_r, .. }) => {
            if !(radius > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "control disk radius must be positive (got {radius})"
                )));
            }
            let dist = center[0].hypot(center[1]);
            if dist + radius >= big_r {
                return Err(Error::InvalidArgument(format!(
                    "control disk (center {center:?}, radius {radius}) is not strictly inside the domain of radius {big_r}"
                )));
            }
        }
        (RegionDescriptor::Segment { start, end }, Layout::Interval { length, .. }) => {
            if !(start < end) {
                return Err(Error::InvalidArgument(format!(
                    "segment [{start}, {end}] is empty"
                )));
            }
            if start <= 0.0 || end >= length {
                return Err(Error::InvalidArgument(format!(
                    "segment ({start}, {end}) is not strictly inside (0, {length})"
                )));
            }
        }
        (d, _) => {
            return Err(Error::InvalidArgument(format!(
                "region {d:?} does not match the {:?} geometry",
                mesh.kind()
            )))
        }
    }

    let indicator: Vec<f64> = mesh
        .bulk_nodes
        .iter()
        .map(|&p| if descriptor.contains(p) { 1.0 } else { 0.0 })
        .collect();
    let nodes: Vec<usize> = indicator
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(i, _)| i)
        .collect();
    if nodes.is_empty() {
        return Err(Error::EmptyRegion(format!(
            "{descriptor:?} contains no bulk node at this resolution"
        )));
    }
    Ok(ControlRegion {
        descriptor: *descriptor,
        indicator,
        surface_indicator: vec![0.0; mesh.n_surface()],
        support: nodes.clone(),
        nodes,
    })
}

impl Copy for RegionDescriptor {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_quadrature_reproduces_measures() {
        let m = Mesh::disk(16, 64, 1.0).unwrap();
        assert!((m.surface_measure() - 2.0 * PI).abs() < 1e-12);
        assert!((m.bulk_measure() - PI).abs() < 1e-2);
        assert_eq!(m.n_bulk(), 1 + 15 * 64);
        assert_eq!(m.n_surface(), 64);
    }

    #[test]
    fn disk_area_error_does_not_grow_under_refinement() {
        let coarse = Mesh::disk(8, 32, 1.0).unwrap();
        let fine = Mesh::disk(16, 64, 1.0).unwrap();
        let ec = (coarse.bulk_measure() - PI).abs();
        let ef = (fine.bulk_measure() - PI).abs();
        assert!(ef <= 0.5 * ec + 1e-13, "coarse {ec:e}, fine {ef:e}");
    }

    #[test]
    fn interval_measures() {
        let m = Mesh::interval(10, 2.0).unwrap();
        assert!((m.bulk_measure() - 2.0).abs() < 1e-14);
        assert_eq!(m.surface_measure(), 2.0);
    }

    #[test]
    fn invalid_resolution_is_rejected() {
        assert!(matches!(
            Mesh::interval(0, 1.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            Mesh::disk(1, 16, 1.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            Mesh::disk(4, 16, -1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn trace_of_constant_is_constant() {
        for m in [
            Mesh::disk(5, 12, 2.0).unwrap(),
            Mesh::interval(7, 1.0).unwrap(),
        ] {
            let ones = vec![1.0; m.n_bulk()];
            assert!(m.trace(&ones).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn disk_mask_examples() {
        let m = Mesh::disk(16, 64, 1.0).unwrap();
        let d = RegionDescriptor::Disk {
            center: [0.0, 0.0],
            radius: 0.5,
        };
        let w = control_mask(&m, &d).unwrap();
        assert_eq!(w.indicator[0], 1.0);
        let far = m
            .bulk_nodes
            .iter()
            .position(|p| (p[0].hypot(p[1]) - 0.9).abs() < 0.05)
            .unwrap();
        assert_eq!(w.indicator[far], 0.0);
        assert!((w.measure(&m) - PI / 4.0).abs() < 5e-2);

        let too_big = RegionDescriptor::Disk {
            center: [0.0, 0.0],
            radius: 1.2,
        };
        assert!(control_mask(&m, &too_big).is_err());
        assert!(control_mask(&m, &RegionDescriptor::Full).is_err());
    }

    #[test]
    fn masks_are_monotone_in_the_descriptor() {
        let m = Mesh::disk(12, 40, 1.0).unwrap();
        let small = control_mask(
            &m,
            &RegionDescriptor::Disk {
                center: [0.1, 0.0],
                radius: 0.3,
            },
        )
        .unwrap();
        let large = control_mask(
            &m,
            &RegionDescriptor::Disk {
                center: [0.1, 0.0],
                radius: 0.6,
            },
        )
        .unwrap();
        assert!(small
            .indicator
            .iter()
            .zip(&large.indicator)
            .all(|(a, b)| a <= b));
    }

    #[test]
    fn segment_mask() {
        let m = Mesh::interval(20, 1.0).unwrap();
        let w = control_mask(
            &m,
            &RegionDescriptor::Segment {
                start: 0.25,
                end: 0.75,
            },
        )
        .unwrap();
        assert!((w.measure(&m) - 0.5).abs() < 1e-12);
        assert!(control_mask(
            &m,
            &RegionDescriptor::Segment {
                start: 0.0,
                end: 0.5
            }
        )
        .is_err());
        assert!(matches!(
            control_mask(
                &m,
                &RegionDescriptor::Segment {
                    start: 0.51,
                    end: 0.52
                }
            ),
            Err(Error::EmptyRegion(_))
        ));
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let m = Mesh::interval(3, 1.0).unwrap();
        let csv = m.to_csv();
        assert_eq!(csv.lines().count(), 1 + 5);
        assert!(csv.lines().last().unwrap().ends_with(",1"));
    }
}
