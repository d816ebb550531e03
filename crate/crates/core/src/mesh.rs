//! Discrete geometries: the unit-disk polar grid and the interval.
//!
//! Bulk unknowns live at cell centres. On the disk, cell `(i, j)` has centre
//! radius `r_i = (i + 1/2) h_r` and angle `θ_j = (j + 1/2) h_θ`, so no node
//! sits at the origin. Bulk nodes are numbered ring by ring,
//! `index = i · n_θ + j`. Surface nodes sit on `r = R` at the cell angles.
//! On the interval the boundary is the two end points, each with unit
//! measure.
//!
//! The trace on the boundary is the linear extrapolation from the two
//! outermost cells along the normal ray,
//! `u|_Γ = 3/2 u_outer - 1/2 u_inner`.

use std::f64::consts::PI;

use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::nonlinearity::NonlinearitySpec;

/// Extrapolation weights applied to (outer, inner) cell values.
pub const TRACE_WEIGHTS: (f64, f64) = (1.5, -0.5);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Disk {
        radius: f64,
        n_r: usize,
        n_theta: usize,
    },
    Interval {
        length: f64,
        n: usize,
    },
}

impl Geometry {
    pub fn disk(radius: f64, n_r: usize, n_theta: usize) -> Self {
        Geometry::Disk {
            radius,
            n_r,
            n_theta,
        }
    }

    pub fn interval(length: f64, n: usize) -> Self {
        Geometry::Interval { length, n }
    }

    pub fn describe(&self) -> String {
        match *self {
            Geometry::Disk {
                radius,
                n_r,
                n_theta,
            } => format!("disk(R={radius:?},n_r={n_r},n_theta={n_theta})"),
            Geometry::Interval { length, n } => format!("interval(L={length:?},n={n})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Bulk,
    Surface,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalDerivativeMethod {
    /// `∂_ν u = K⁻¹ (h(φ) - u|_Γ)`.
    RobinIdentity,
    /// Difference of the two outermost cells along the normal ray.
    OneSided,
}

/// A weighted link between two nodes of a diffusion stencil. The Dirichlet
/// form is `½ Σ coeff · (x_a - x_b)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub coeff: f64,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    geometry: Geometry,
    bulk_positions: Vec<[f64; 2]>,
    bulk_weights: Vec<f64>,
    surface_positions: Vec<[f64; 2]>,
    surface_weights: Vec<f64>,
    boundary_map: Vec<(usize, usize)>,
    /// Normal spacing between the two outermost cells (`h_r` or `h`).
    normal_spacing: f64,
    angular_spacing: Option<f64>,
    bulk_edges: Vec<Edge>,
    surface_edges: Vec<Edge>,
}

impl Mesh {
    pub fn build(geometry: Geometry) -> Result<Self> {
        match geometry {
            Geometry::Disk {
                radius,
                n_r,
                n_theta,
            } => {
                if !(radius > 0.0 && radius.is_finite()) {
                    return Err(Error::Config("disk radius must be positive".into()));
                }
                if n_r < 4 || n_theta < 4 {
                    return Err(Error::Config(format!(
                        "disk needs n_r >= 4 and n_theta >= 4 (got {n_r}, {n_theta})"
                    )));
                }
                Ok(Self::build_disk(radius, n_r, n_theta))
            }
            Geometry::Interval { length, n } => {
                if !(length > 0.0 && length.is_finite()) {
                    return Err(Error::Config("interval length must be positive".into()));
                }
                if n < 4 {
                    return Err(Error::Config(format!("interval needs n >= 4 (got {n})")));
                }
                Ok(Self::build_interval(length, n))
            }
        }
    }

    fn build_disk(radius: f64, n_r: usize, n_theta: usize) -> Self {
        let hr = radius / n_r as f64;
        let ht = 2.0 * PI / n_theta as f64;
        let idx = |i: usize, j: usize| i * n_theta + j;
        let mut bulk_positions = Vec::with_capacity(n_r * n_theta);
        let mut bulk_weights = Vec::with_capacity(n_r * n_theta);
        for i in 0..n_r {
            let r = (i as f64 + 0.5) * hr;
            for j in 0..n_theta {
                let th = (j as f64 + 0.5) * ht;
                bulk_positions.push([r * th.cos(), r * th.sin()]);
                bulk_weights.push(r * hr * ht);
            }
        }
        let surface_positions = (0..n_theta)
            .map(|j| {
                let th = (j as f64 + 0.5) * ht;
                [radius * th.cos(), radius * th.sin()]
            })
            .collect();
        let surface_weights = vec![radius * ht; n_theta];
        let boundary_map = (0..n_theta)
            .map(|j| (idx(n_r - 1, j), idx(n_r - 2, j)))
            .collect();

        let mut bulk_edges = Vec::new();
        for i in 0..n_r {
            let r = (i as f64 + 0.5) * hr;
            for j in 0..n_theta {
                // angular face
                bulk_edges.push(Edge {
                    a: idx(i, j),
                    b: idx(i, (j + 1) % n_theta),
                    coeff: hr / (r * ht),
                });
                if i + 1 < n_r {
                    let rf = (i + 1) as f64 * hr;
                    let mut coeff = rf * ht / hr;
                    if i + 2 == n_r {
                        // half cell between the last centre and r = R, with
                        // the extrapolated trace: ½ (R h_θ / (h_r/2)) (u_Γ - u_outer)²
                        coeff += radius * ht / (2.0 * hr);
                    }
                    bulk_edges.push(Edge {
                        a: idx(i, j),
                        b: idx(i + 1, j),
                        coeff,
                    });
                }
            }
        }
        let surface_edges = (0..n_theta)
            .map(|j| Edge {
                a: j,
                b: (j + 1) % n_theta,
                coeff: 1.0 / (radius * ht),
            })
            .collect();

        Self {
            geometry: Geometry::Disk {
                radius,
                n_r,
                n_theta,
            },
            bulk_positions,
            bulk_weights,
            surface_positions,
            surface_weights,
            boundary_map,
            normal_spacing: hr,
            angular_spacing: Some(ht),
            bulk_edges,
            surface_edges,
        }
    }

    fn build_interval(length: f64, n: usize) -> Self {
        let h = length / n as f64;
        let bulk_positions = (0..n).map(|i| [(i as f64 + 0.5) * h, 0.0]).collect();
        let bulk_weights = vec![h; n];
        let bulk_edges = (0..n - 1)
            .map(|i| {
                let end = i == 0 || i + 2 == n;
                Edge {
                    a: i,
                    b: i + 1,
                    coeff: 1.0 / h + if end { 1.0 / (2.0 * h) } else { 0.0 },
                }
            })
            .collect();
        Self {
            geometry: Geometry::Interval { length, n },
            bulk_positions,
            bulk_weights,
            surface_positions: vec![[0.0, 0.0], [length, 0.0]],
            surface_weights: vec![1.0, 1.0],
            boundary_map: vec![(0, 1), (n - 1, n - 2)],
            normal_spacing: h,
            angular_spacing: None,
            bulk_edges,
            surface_edges: Vec::new(),
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn is_disk(&self) -> bool {
        matches!(self.geometry, Geometry::Disk { .. })
    }

    pub fn n_bulk(&self) -> usize {
        self.bulk_weights.len()
    }

    pub fn n_surface(&self) -> usize {
        self.surface_weights.len()
    }

    /// Size of the joint `(bulk, surface)` unknown vector.
    pub fn n_total(&self) -> usize {
        self.n_bulk() + self.n_surface()
    }

    pub fn bulk_positions(&self) -> &[[f64; 2]] {
        &self.bulk_positions
    }

    pub fn surface_positions(&self) -> &[[f64; 2]] {
        &self.surface_positions
    }

    pub fn bulk_weights(&self) -> &[f64] {
        &self.bulk_weights
    }

    pub fn surface_weights(&self) -> &[f64] {
        &self.surface_weights
    }

    /// `(outer, inner)` bulk cells along the normal ray of each surface node.
    pub fn boundary_map(&self) -> &[(usize, usize)] {
        &self.boundary_map
    }

    pub fn normal_spacing(&self) -> f64 {
        self.normal_spacing
    }

    pub fn angular_spacing(&self) -> Option<f64> {
        self.angular_spacing
    }

    /// Diffusion links of the bulk Dirichlet form, including the half-cell
    /// contribution between the outermost centres and the boundary.
    pub fn bulk_edges(&self) -> &[Edge] {
        &self.bulk_edges
    }

    /// Diffusion links of the surface Dirichlet form (empty on the interval).
    pub fn surface_edges(&self) -> &[Edge] {
        &self.surface_edges
    }

    /// Angle of each surface node (disk only).
    pub fn surface_angles(&self) -> Option<Vec<f64>> {
        self.angular_spacing.map(|ht| {
            (0..self.n_surface())
                .map(|j| (j as f64 + 0.5) * ht)
                .collect()
        })
    }

    pub fn bulk_measure(&self) -> f64 {
        match self.geometry {
            Geometry::Disk { radius, .. } => PI * radius * radius,
            Geometry::Interval { length, .. } => length,
        }
    }

    pub fn surface_measure(&self) -> f64 {
        match self.geometry {
            Geometry::Disk { radius, .. } => 2.0 * PI * radius,
            Geometry::Interval { .. } => 2.0,
        }
    }

    /// Short content hash of the geometry parameters.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.geometry.describe().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn integrate(&self, field: &[f64], region: Region) -> Result<f64> {
        let w = match region {
            Region::Bulk => &self.bulk_weights,
            Region::Surface => &self.surface_weights,
        };
        check_len("integrated field", w.len(), field.len())?;
        Ok(w.iter().zip(field).map(|(a, b)| a * b).sum())
    }

    #[inline]
    pub(crate) fn trace_at(&self, bulk: &[f64], j: usize) -> f64 {
        let (o, i) = self.boundary_map[j];
        TRACE_WEIGHTS.0 * bulk[o] + TRACE_WEIGHTS.1 * bulk[i]
    }

    pub fn boundary_trace(&self, bulk: &[f64]) -> Result<Vec<f64>> {
        check_len("bulk field", self.n_bulk(), bulk.len())?;
        Ok((0..self.n_surface())
            .map(|j| self.trace_at(bulk, j))
            .collect())
    }

    pub fn normal_derivative(
        &self,
        spec: &NonlinearitySpec,
        bulk: &[f64],
        surface: &[f64],
        k: f64,
        method: NormalDerivativeMethod,
    ) -> Result<Vec<f64>> {
        if !(k > 0.0) {
            return Err(Error::Config("K must be positive".into()));
        }
        check_len("bulk field", self.n_bulk(), bulk.len())?;
        check_len("surface field", self.n_surface(), surface.len())?;
        Ok((0..self.n_surface())
            .map(|j| match method {
                NormalDerivativeMethod::RobinIdentity => {
                    (spec.h(surface[j]) - self.trace_at(bulk, j)) / k
                }
                NormalDerivativeMethod::OneSided => {
                    let (o, i) = self.boundary_map[j];
                    (bulk[o] - bulk[i]) / self.normal_spacing
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(r: f64, nr: usize, nt: usize) -> Mesh {
        Mesh::build(Geometry::disk(r, nr, nt)).unwrap()
    }

    #[test]
    fn small_disk_counts_and_measures() {
        let m = disk(1.0, 4, 8);
        assert_eq!(m.n_bulk(), 32);
        assert_eq!(m.n_surface(), 8);
        let a: f64 = m.bulk_weights().iter().sum();
        assert!((a - PI).abs() < 1e-14);
        assert!((m.integrate(&vec![1.0; 8], Region::Surface).unwrap() - 2.0 * PI).abs() < 1e-14);
    }

    #[test]
    fn interval_counts_and_measures() {
        let m = Mesh::build(Geometry::interval(1.0, 10)).unwrap();
        assert_eq!(m.n_bulk(), 10);
        assert_eq!(m.n_surface(), 2);
        assert_eq!(m.surface_weights().iter().sum::<f64>(), 2.0);
        assert!((m.bulk_weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn radius_two_surface_measure() {
        let m = disk(2.0, 8, 16);
        let s: f64 = m.surface_weights().iter().sum();
        assert!((s - 4.0 * PI).abs() < 1e-13);
        assert!((m.bulk_weights().iter().sum::<f64>() - 4.0 * PI).abs() < 1e-13);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(Mesh::build(Geometry::disk(1.0, 3, 8)).is_err());
        assert!(Mesh::build(Geometry::disk(-1.0, 8, 8)).is_err());
        assert!(Mesh::build(Geometry::interval(0.0, 8)).is_err());
        assert!(Mesh::build(Geometry::interval(1.0, 2)).is_err());
    }

    #[test]
    fn integrate_shape_error() {
        let m = disk(1.0, 4, 8);
        assert!(matches!(
            m.integrate(&[1.0; 3], Region::Bulk),
            Err(Error::Shape { .. })
        ));
    }

    fn x2_error(nr: usize, nt: usize) -> f64 {
        let m = disk(1.0, nr, nt);
        let f: Vec<f64> = m.bulk_positions().iter().map(|p| p[0] * p[0]).collect();
        (m.integrate(&f, Region::Bulk).unwrap() - PI / 4.0).abs()
    }

    #[test]
    fn x_squared_quadrature_is_second_order() {
        let e1 = x2_error(16, 32);
        let e2 = x2_error(32, 64);
        let e3 = x2_error(64, 128);
        assert!(e1 < 1e-2);
        for ratio in [e1 / e2, e2 / e3] {
            assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn trace_of_constant_and_radial_profile() {
        let m = disk(1.0, 16, 32);
        let c = vec![0.37; m.n_bulk()];
        for t in m.boundary_trace(&c).unwrap() {
            assert!((t - 0.37).abs() < 1e-15);
        }
        let r: Vec<f64> = m
            .bulk_positions()
            .iter()
            .map(|p| p[0].hypot(p[1]))
            .collect();
        for t in m.boundary_trace(&r).unwrap() {
            assert!((t - 1.0).abs() < 1e-12);
        }
        // quadratic profile: O(h_r²) trace error
        let r2: Vec<f64> = r.iter().map(|x| x * x).collect();
        let e16 = (m.boundary_trace(&r2).unwrap()[0] - 1.0).abs();
        let m32 = disk(1.0, 32, 32);
        let r2b: Vec<f64> = m32
            .bulk_positions()
            .iter()
            .map(|p| p[0] * p[0] + p[1] * p[1])
            .collect();
        let e32 = (m32.boundary_trace(&r2b).unwrap()[0] - 1.0).abs();
        assert!((e16 / e32 - 4.0).abs() < 0.2);
    }

    #[test]
    fn interval_trace_of_linear_field() {
        let m = Mesh::build(Geometry::interval(1.0, 10)).unwrap();
        let u: Vec<f64> = m.bulk_positions().iter().map(|p| p[0]).collect();
        let t = m.boundary_trace(&u).unwrap();
        assert!(t[0].abs() < 1e-14);
        assert!((t[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn normal_derivatives() {
        let spec = NonlinearitySpec::double_well_affine(1.0, 0.0);
        let coarse = disk(1.0, 16, 16);
        let fine = disk(1.0, 32, 16);
        let mut errs = Vec::new();
        for m in [&coarse, &fine] {
            let u: Vec<f64> = m
                .bulk_positions()
                .iter()
                .map(|p| p[0] * p[0] + p[1] * p[1])
                .collect();
            let phi = m.boundary_trace(&u).unwrap();
            let robin = m
                .normal_derivative(&spec, &u, &phi, 1.0, NormalDerivativeMethod::RobinIdentity)
                .unwrap();
            assert!(robin.iter().all(|&v| v == 0.0));
            let one = m
                .normal_derivative(&spec, &u, &phi, 1.0, NormalDerivativeMethod::OneSided)
                .unwrap();
            errs.push((one[0] - 2.0).abs());
        }
        assert!(errs[0] < 0.2);
        assert!((errs[0] / errs[1] - 2.0).abs() < 0.1, "{errs:?}");
        assert!(coarse
            .normal_derivative(
                &spec,
                &vec![0.0; 256],
                &[0.0; 16],
                0.0,
                NormalDerivativeMethod::OneSided
            )
            .is_err());
    }

    #[test]
    fn every_surface_node_maps_to_outer_cells() {
        let m = disk(1.0, 6, 10);
        for (j, &(o, i)) in m.boundary_map().iter().enumerate() {
            assert_eq!(o, 5 * 10 + j);
            assert_eq!(i, 4 * 10 + j);
        }
    }
}
