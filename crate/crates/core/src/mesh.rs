//! Structured triangulations of the unit square and P1 element geometry.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const BOUNDARY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct TriangularMesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_mask: Vec<bool>,
}

/// Crisscross triangulation of `[0,1]²` with `2^level` cells per side.
///
/// Cell `(i, j)` is cut along the rising diagonal when `i + j` is even and
/// along the falling one otherwise, so the mesh is invariant under the
/// reflections `x ↦ 1 - x`, `y ↦ 1 - y` and the swap `x ↔ y`. Nodes are
/// numbered row by row, `x` fastest.
pub fn build_unit_square_mesh(level: u32) -> Result<TriangularMesh> {
    if level < 1 {
        return Err(Error::InvalidInput("mesh level must be at least 1".into()));
    }
    let n = 1usize << level;
    let h = 1.0 / n as f64;
    let id = |i: usize, j: usize| j * (n + 1) + i;

    let mut nodes = Vec::with_capacity((n + 1) * (n + 1));
    let mut boundary_mask = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            nodes.push([i as f64 * h, j as f64 * h]);
            boundary_mask.push(i == 0 || j == 0 || i == n || j == n);
        }
    }

    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            if (i + j) % 2 == 0 {
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            } else {
                triangles.push([a, b, d]);
                triangles.push([b, c, d]);
            }
        }
    }
    Ok(TriangularMesh {
        nodes,
        triangles,
        boundary_mask,
    })
}

impl TriangularMesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t];
        [
            (self.nodes[a][0] + self.nodes[b][0] + self.nodes[c][0]) / 3.0,
            (self.nodes[a][1] + self.nodes[b][1] + self.nodes[c][1]) / 3.0,
        ]
    }

    /// Gradients of the three barycentric hat functions on triangle `t`.
    pub fn gradients(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        let two_area = 2.0 * self.signed_area(t);
        [
            [(pb[1] - pc[1]) / two_area, (pc[0] - pb[0]) / two_area],
            [(pc[1] - pa[1]) / two_area, (pa[0] - pc[0]) / two_area],
            [(pa[1] - pb[1]) / two_area, (pb[0] - pa[0]) / two_area],
        ]
    }

    /// Local Laplace stiffness `|T| ∇φ_r·∇φ_s`.
    pub fn local_stiffness(&self, t: usize) -> [[f64; 3]; 3] {
        let g = self.gradients(t);
        let area = self.signed_area(t);
        let mut k = [[0.0; 3]; 3];
        for (r, gr) in g.iter().enumerate() {
            for (s, gs) in g.iter().enumerate() {
                k[r][s] = area * (gr[0] * gs[0] + gr[1] * gs[1]);
            }
        }
        k
    }

    /// Consistent P1 mass matrix over all nodes.
    pub fn mass_matrix(&self) -> DMatrix<f64> {
        let n = self.node_count();
        let mut m = DMatrix::<f64>::zeros(n, n);
        for (t, tri) in self.triangles.iter().enumerate() {
            let area = self.signed_area(t);
            for r in 0..3 {
                for s in 0..3 {
                    let w = if r == s { area / 6.0 } else { area / 12.0 };
                    m[(tri[r], tri[s])] += w;
                }
            }
        }
        m
    }

    /// `∫ φ_i` for every node.
    pub fn lumped_load(&self) -> DVector<f64> {
        let mut f = DVector::<f64>::zeros(self.node_count());
        for (t, tri) in self.triangles.iter().enumerate() {
            let area = self.signed_area(t);
            for &v in tri {
                f[v] += area / 3.0;
            }
        }
        f
    }

    /// Containing triangle and barycentric weights of `p`.
    pub fn locate(&self, p: [f64; 2]) -> Result<(usize, [f64; 3])> {
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.triangles[t];
            let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
            let det = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]);
            let l1 = ((p[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (p[1] - pa[1])) / det;
            let l2 = ((pb[0] - pa[0]) * (p[1] - pa[1]) - (p[0] - pa[0]) * (pb[1] - pa[1])) / det;
            let l0 = 1.0 - l1 - l2;
            if l0 >= -BOUNDARY_TOL && l1 >= -BOUNDARY_TOL && l2 >= -BOUNDARY_TOL {
                return Ok((t, [l0, l1, l2]));
            }
        }
        Err(Error::PointOutsideMesh { x: p[0], y: p[1] })
    }

    /// Barycentric interpolation of a nodal field at `p`.
    pub fn interpolate(&self, values: &DVector<f64>, p: [f64; 2]) -> Result<f64> {
        if values.len() != self.node_count() {
            return Err(Error::dim("nodal field", self.node_count(), values.len()));
        }
        let (t, w) = self.locate(p)?;
        let tri = self.triangles[t];
        Ok(w[0] * values[tri[0]] + w[1] * values[tri[1]] + w[2] * values[tri[2]])
    }

    pub fn on_boundary(p: [f64; 2]) -> bool {
        p[0].abs() < BOUNDARY_TOL
            || p[1].abs() < BOUNDARY_TOL
            || (p[0] - 1.0).abs() < BOUNDARY_TOL
            || (p[1] - 1.0).abs() < BOUNDARY_TOL
    }
}

/// Nodal field on a mesh.
#[derive(Debug, Clone)]
pub struct FemField<'a> {
    pub mesh: &'a TriangularMesh,
    pub nodal_values: DVector<f64>,
}

impl<'a> FemField<'a> {
    pub fn new(mesh: &'a TriangularMesh, nodal_values: DVector<f64>) -> Result<Self> {
        if nodal_values.len() != mesh.node_count() {
            return Err(Error::dim("nodal field", mesh.node_count(), nodal_values.len()));
        }
        Ok(Self { mesh, nodal_values })
    }

    pub fn constant(mesh: &'a TriangularMesh, value: f64) -> Self {
        Self {
            mesh,
            nodal_values: DVector::from_element(mesh.node_count(), value),
        }
    }

    /// Writes `x,y,value` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "value"])?;
        for (p, v) in self.mesh.nodes.iter().zip(self.nodal_values.iter()) {
            w.write_record([
                format!("{:.17e}", p[0]),
                format!("{:.17e}", p[1]),
                format!("{:.17e}", v),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn counts_and_area() {
        let m1 = build_unit_square_mesh(1).unwrap();
        assert_eq!(m1.node_count(), 9);
        assert_eq!(m1.triangles.len(), 8);
        let m2 = build_unit_square_mesh(2).unwrap();
        assert_eq!(m2.node_count(), 25);
        for m in [&m1, &m2] {
            let total: f64 = (0..m.triangles.len()).map(|t| m.signed_area(t)).sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-14);
            assert!((0..m.triangles.len()).all(|t| m.signed_area(t) > 0.0));
        }
        assert!(build_unit_square_mesh(0).is_err());
    }

    #[test]
    fn boundary_mask_is_exact() {
        let m = build_unit_square_mesh(3).unwrap();
        for (p, &b) in m.nodes.iter().zip(&m.boundary_mask) {
            assert_eq!(TriangularMesh::on_boundary(*p), b);
        }
        assert_eq!(m.boundary_mask.iter().filter(|&&b| !b).count(), 49);
    }

    #[test]
    fn mass_matrix_integrates_constants() {
        let m = build_unit_square_mesh(3).unwrap();
        let mass = m.mass_matrix();
        let one = DVector::from_element(m.node_count(), 1.0);
        assert_relative_eq!(crate::linalg::field_l2_norm(&mass, &one).unwrap(), 1.0, epsilon = 1e-13);
        let rows = &mass * &one;
        let load = m.lumped_load();
        for i in 0..m.node_count() {
            assert_relative_eq!(rows[i], load[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn interpolation_reproduces_nodes_and_linears() {
        let m = build_unit_square_mesh(2).unwrap();
        let lin = DVector::from_iterator(m.node_count(), m.nodes.iter().map(|p| 2.0 * p[0] - p[1] + 0.5));
        for p in [[0.5, 0.5], [0.3, 0.7], [0.91, 0.05], [1.0, 1.0]] {
            let v = m.interpolate(&lin, p).unwrap();
            assert_relative_eq!(v, 2.0 * p[0] - p[1] + 0.5, epsilon = 1e-13);
        }
        let mut hat = DVector::zeros(m.node_count());
        hat[12] = 1.0;
        assert_eq!(m.nodes[12], [0.5, 0.5]);
        assert_relative_eq!(m.interpolate(&hat, [0.5, 0.5]).unwrap(), 1.0, epsilon = 1e-14);
        assert!(matches!(m.interpolate(&hat, [1.5, 0.5]), Err(Error::PointOutsideMesh { .. })));
    }
}
