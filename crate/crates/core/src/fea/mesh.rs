//! Pixel-aligned triangle meshes of the unit square and element assembly.
//!
//! Each grid cell is split along one diagonal, alternating `/` and `\` in a
//! checkerboard ("union jack") so the mesh maps onto itself under quarter
//! turns about the centre when the cell count per side is even.

use crate::error::{Error, Result};
use crate::fea::material::{psi_plane, stress_plane, tangent_plane, Grad2};
use crate::pattern::{Pattern, SIDE};

/// Quadrature in barycentric coordinates with weights summing to 1.
const QUAD_P2: [([f64; 3], f64); 3] = [
    ([2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], 1.0 / 3.0),
    ([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], 1.0 / 3.0),
    ([1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0], 1.0 / 3.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Face {
    Left,
    Right,
    Bottom,
    Top,
}

#[derive(Debug, Clone)]
pub struct HeteroMesh {
    cells_per_side: usize,
    order: usize,
    /// Lattice points per side; node `(ix, iy)` has id `iy * lattice + ix`.
    lattice: usize,
    coords: Vec<[f64; 2]>,
    /// `nodes_per_element` node ids per element, corners first (counter-clockwise),
    /// then the mid-side nodes of edges 01, 12, 20 for quadratic elements.
    connectivity: Vec<usize>,
    nodes_per_element: usize,
    /// Per element and quadrature point: weight (area included), then shape gradients.
    quad_weights: Vec<f64>,
    quad_grads: Vec<f64>,
    quad_points: usize,
    element_material: Vec<u8>,
    /// `(λ, μ)` for soft (0) and stiff (1).
    lame: [(f64, f64); 2],
}

impl HeteroMesh {
    /// Structured mesh with `n` cells per side; `stiff(i, j)` gives the
    /// material of the cell in column `i` (from x = 0) and row `j` (from y = 0).
    pub fn grid(
        n: usize,
        order: usize,
        lame_soft: (f64, f64),
        lame_stiff: (f64, f64),
        stiff: impl Fn(usize, usize) -> bool,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("elements_per_side", "must be positive"));
        }
        if order != 1 && order != 2 {
            return Err(Error::config("element_order", format!("{order} is not 1 or 2")));
        }
        let s = order;
        let lattice = n * s + 1;
        let step = 1.0 / (lattice - 1) as f64;
        let coords = (0..lattice * lattice)
            .map(|id| [(id % lattice) as f64 * step, (id / lattice) as f64 * step])
            .collect();
        let nodes_per_element = if order == 1 { 3 } else { 6 };
        let quad_points = if order == 1 { 1 } else { 3 };
        let mut mesh = HeteroMesh {
            cells_per_side: n,
            order,
            lattice,
            coords,
            connectivity: Vec::with_capacity(2 * n * n * nodes_per_element),
            nodes_per_element,
            quad_weights: Vec::new(),
            quad_grads: Vec::new(),
            quad_points,
            element_material: Vec::with_capacity(2 * n * n),
            lame: [lame_soft, lame_stiff],
        };
        let id = |ix: usize, iy: usize| iy * lattice + ix;
        for j in 0..n {
            for i in 0..n {
                let (x0, y0) = (i * s, j * s);
                let sw = (x0, y0);
                let se = (x0 + s, y0);
                let ne = (x0 + s, y0 + s);
                let nw = (x0, y0 + s);
                let tris = if (i + j) % 2 == 0 {
                    [[sw, se, ne], [sw, ne, nw]]
                } else {
                    [[sw, se, nw], [se, ne, nw]]
                };
                let mat = stiff(i, j) as u8;
                for t in tris {
                    for &(ix, iy) in &t {
                        mesh.connectivity.push(id(ix, iy));
                    }
                    if order == 2 {
                        for (a, b) in [(0, 1), (1, 2), (2, 0)] {
                            mesh.connectivity
                                .push(id((t[a].0 + t[b].0) / 2, (t[a].1 + t[b].1) / 2));
                        }
                    }
                    mesh.element_material.push(mat);
                }
            }
        }
        mesh.precompute_quadrature();
        Ok(mesh)
    }

    /// Mesh for a pattern with `elements_per_side / 64` grid cells per
    /// pattern cell along each axis. Pattern row 0 is the top edge (y = 1).
    pub fn from_pattern(
        pattern: &Pattern,
        elements_per_side: usize,
        order: usize,
        lame_soft: (f64, f64),
        lame_stiff: (f64, f64),
    ) -> Result<Self> {
        if elements_per_side == 0 || elements_per_side % SIDE != 0 {
            return Err(Error::config(
                "elements_per_side",
                format!("{elements_per_side} is not a positive multiple of {SIDE}"),
            ));
        }
        let b = elements_per_side / SIDE;
        Self::grid(elements_per_side, order, lame_soft, lame_stiff, |i, j| {
            pattern.get(SIDE - 1 - j / b, i / b)
        })
    }

    fn precompute_quadrature(&mut self) {
        let nn = self.nodes_per_element;
        for e in 0..self.n_elements() {
            let c = &self.connectivity[e * nn..e * nn + 3];
            let [x0, y0] = self.coords[c[0]];
            let [x1, y1] = self.coords[c[1]];
            let [x2, y2] = self.coords[c[2]];
            let det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0);
            let area = 0.5 * det;
            // gradients of the barycentric coordinates
            let gl = [
                [(y1 - y2) / det, (x2 - x1) / det],
                [(y2 - y0) / det, (x0 - x2) / det],
                [(y0 - y1) / det, (x1 - x0) / det],
            ];
            if self.order == 1 {
                self.quad_weights.push(area);
                for g in gl {
                    self.quad_grads.extend_from_slice(&g);
                }
            } else {
                for (l, w) in QUAD_P2 {
                    self.quad_weights.push(area * w);
                    for a in 0..3 {
                        let f = 4.0 * l[a] - 1.0;
                        self.quad_grads.extend_from_slice(&[f * gl[a][0], f * gl[a][1]]);
                    }
                    for (a, b) in [(0, 1), (1, 2), (2, 0)] {
                        self.quad_grads.extend_from_slice(&[
                            4.0 * (l[a] * gl[b][0] + l[b] * gl[a][0]),
                            4.0 * (l[a] * gl[b][1] + l[b] * gl[a][1]),
                        ]);
                    }
                }
            }
        }
    }

    pub fn cells_per_side(&self) -> usize {
        self.cells_per_side
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn n_dofs(&self) -> usize {
        2 * self.coords.len()
    }

    pub fn n_elements(&self) -> usize {
        self.element_material.len()
    }

    pub fn nodes_per_element(&self) -> usize {
        self.nodes_per_element
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn element_nodes(&self, e: usize) -> &[usize] {
        &self.connectivity[e * self.nodes_per_element..(e + 1) * self.nodes_per_element]
    }

    /// 1 for stiff, 0 for soft.
    pub fn element_material(&self) -> &[u8] {
        &self.element_material
    }

    pub fn lattice(&self) -> usize {
        self.lattice
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let (ix, iy) = (node % self.lattice, node / self.lattice);
        ix == 0 || iy == 0 || ix + 1 == self.lattice || iy + 1 == self.lattice
    }

    pub fn face_nodes(&self, face: Face) -> Vec<usize> {
        let m = self.lattice;
        (0..m)
            .map(|k| match face {
                Face::Left => k * m,
                Face::Right => k * m + m - 1,
                Face::Bottom => k,
                Face::Top => (m - 1) * m + k,
            })
            .collect()
    }

    /// Deformation gradient at quadrature point `q` of element `e`.
    #[inline]
    fn grad_at(&self, e: usize, q: usize, u: &[f64]) -> Grad2 {
        let nn = self.nodes_per_element;
        let nodes = self.element_nodes(e);
        let g = &self.quad_grads[(e * self.quad_points + q) * nn * 2..][..nn * 2];
        let mut f = [1.0, 0.0, 0.0, 1.0];
        for a in 0..nn {
            let (ux, uy) = (u[2 * nodes[a]], u[2 * nodes[a] + 1]);
            f[0] += ux * g[2 * a];
            f[1] += ux * g[2 * a + 1];
            f[2] += uy * g[2 * a];
            f[3] += uy * g[2 * a + 1];
        }
        f
    }

    /// Total stored energy for the nodal displacement vector `u`.
    pub fn total_energy(&self, u: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for e in 0..self.n_elements() {
            let (l, m) = self.lame[self.element_material[e] as usize];
            for q in 0..self.quad_points {
                let f = self.grad_at(e, q, u);
                let psi = psi_plane(&f, l, m).ok_or(Error::Inversion {
                    element: Some(e),
                    det: f[0] * f[3] - f[1] * f[2],
                })?;
                total += self.quad_weights[e * self.quad_points + q] * psi;
            }
        }
        Ok(total)
    }

    /// Internal force vector `∂Ψ_total/∂u` over all dofs.
    pub fn residual(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut r = vec![0.0; self.n_dofs()];
        self.assemble(u, Some(&mut r), |_, _| {})?;
        Ok(r)
    }

    /// Calls `sink(e, k_e)` with each element stiffness matrix
    /// (`2·nodes_per_element` square, row-major, dofs ordered node-major)
    /// and optionally accumulates the residual.
    pub(crate) fn assemble(
        &self,
        u: &[f64],
        mut residual: Option<&mut [f64]>,
        mut sink: impl FnMut(usize, &[f64]),
    ) -> Result<()> {
        let nn = self.nodes_per_element;
        let nd = 2 * nn;
        let mut ke = vec![0.0; nd * nd];
        let mut re = vec![0.0; nd];
        for e in 0..self.n_elements() {
            let (l, m) = self.lame[self.element_material[e] as usize];
            ke.iter_mut().for_each(|v| *v = 0.0);
            re.iter_mut().for_each(|v| *v = 0.0);
            for q in 0..self.quad_points {
                let f = self.grad_at(e, q, u);
                let det = f[0] * f[3] - f[1] * f[2];
                if !(det > 0.0) {
                    return Err(Error::Inversion { element: Some(e), det });
                }
                let w = self.quad_weights[e * self.quad_points + q];
                let g = &self.quad_grads[(e * self.quad_points + q) * nd..][..nd];
                let p = stress_plane(&f, l, m);
                let a = tangent_plane(&f, l, m);
                for na in 0..nn {
                    let (ga0, ga1) = (g[2 * na], g[2 * na + 1]);
                    for i in 0..2 {
                        re[2 * na + i] += w * (p[2 * i] * ga0 + p[2 * i + 1] * ga1);
                    }
                    // B_a^T A B_b contracted over J, L
                    for i in 0..2 {
                        let ai0 = &a[2 * i];
                        let ai1 = &a[2 * i + 1];
                        // c[kL] = Σ_J A[iJ][kL] g_a,J
                        let c = [
                            ai0[0] * ga0 + ai1[0] * ga1,
                            ai0[1] * ga0 + ai1[1] * ga1,
                            ai0[2] * ga0 + ai1[2] * ga1,
                            ai0[3] * ga0 + ai1[3] * ga1,
                        ];
                        let row = (2 * na + i) * nd;
                        for nb in 0..nn {
                            let (gb0, gb1) = (g[2 * nb], g[2 * nb + 1]);
                            ke[row + 2 * nb] += w * (c[0] * gb0 + c[1] * gb1);
                            ke[row + 2 * nb + 1] += w * (c[2] * gb0 + c[3] * gb1);
                        }
                    }
                }
            }
            if let Some(r) = residual.as_deref_mut() {
                for (a, &node) in self.element_nodes(e).iter().enumerate() {
                    r[2 * node] += re[2 * a];
                    r[2 * node + 1] += re[2 * a + 1];
                }
            }
            sink(e, &ke);
        }
        Ok(())
    }

    /// Global tangent as `(row, col, value)` triplets over all dofs, with
    /// duplicates left unsummed.
    pub fn tangent_triplets(&self, u: &[f64]) -> Result<Vec<(usize, usize, f64)>> {
        let nd = 2 * self.nodes_per_element;
        let mut out = Vec::with_capacity(self.n_elements() * nd * nd);
        self.assemble(u, None, |e, ke| {
            let nodes = self.element_nodes(e);
            for a in 0..nd {
                for b in 0..nd {
                    out.push((2 * nodes[a / 2] + a % 2, 2 * nodes[b / 2] + b % 2, ke[a * nd + b]));
                }
            }
        })?;
        Ok(out)
    }

    /// Evaluates the displacement interpolant at a point of the unit square.
    pub fn interpolate(&self, u: &[f64], x: f64, y: f64) -> [f64; 2] {
        let n = self.cells_per_side;
        let h = 1.0 / n as f64;
        let i = ((x / h) as usize).min(n - 1);
        let j = ((y / h) as usize).min(n - 1);
        let first = 2 * (j * n + i);
        let mut best = (first, [0.0; 3]);
        // pick the triangle whose smallest barycentric coordinate is largest
        let mut best_min = f64::NEG_INFINITY;
        for e in [first, first + 1] {
            let c = self.element_nodes(e);
            let [x0, y0] = self.coords[c[0]];
            let [x1, y1] = self.coords[c[1]];
            let [x2, y2] = self.coords[c[2]];
            let det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0);
            let l1 = ((x - x0) * (y2 - y0) - (x2 - x0) * (y - y0)) / det;
            let l2 = ((x1 - x0) * (y - y0) - (x - x0) * (y1 - y0)) / det;
            let l = [1.0 - l1 - l2, l1, l2];
            let m = l.iter().cloned().fold(f64::INFINITY, f64::min);
            if m > best_min {
                best_min = m;
                best = (e, l);
            }
        }
        let (e, l) = best;
        let nodes = self.element_nodes(e);
        let shape: Vec<f64> = if self.order == 1 {
            l.to_vec()
        } else {
            vec![
                l[0] * (2.0 * l[0] - 1.0),
                l[1] * (2.0 * l[1] - 1.0),
                l[2] * (2.0 * l[2] - 1.0),
                4.0 * l[0] * l[1],
                4.0 * l[1] * l[2],
                4.0 * l[2] * l[0],
            ]
        };
        let mut out = [0.0; 2];
        for (a, &node) in nodes.iter().enumerate() {
            out[0] += shape[a] * u[2 * node];
            out[1] += shape[a] * u[2 * node + 1];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::{PatternMeta, PatternSource};

    const SOFT: (f64, f64) = (0.576_923_076_923_077, 0.384_615_384_615_384_6);
    const STIFF: (f64, f64) = (5.769_230_769_230_77, 3.846_153_846_153_846);

    fn meta() -> PatternMeta {
        PatternMeta::new(PatternSource::External, 0)
    }

    #[test]
    fn low_fidelity_element_count() {
        let p = Pattern::filled(true, meta());
        let mesh = HeteroMesh::from_pattern(&p, 64, 1, SOFT, STIFF).unwrap();
        assert_eq!(mesh.n_elements(), 8192);
        assert!(mesh.element_material().iter().all(|&m| m == 1));
        assert_eq!(mesh.n_nodes(), 65 * 65);
    }

    #[test]
    fn checkerboard_material_counts() {
        let p = Pattern::from_fn(meta(), |r, c| (r + c) % 2 == 0);
        let mesh = HeteroMesh::from_pattern(&p, 64, 1, SOFT, STIFF).unwrap();
        let stiff = mesh.element_material().iter().filter(|&&m| m == 1).count();
        assert_eq!(stiff, 4096);
    }

    #[test]
    fn refined_cells_inherit_pattern_cell() {
        let p = Pattern::from_fn(meta(), |r, c| r == 0 && c == 0);
        let mesh = HeteroMesh::from_pattern(&p, 128, 1, SOFT, STIFF).unwrap();
        // top-left pattern cell owns a 2×2 block of grid cells, i.e. 8 triangles
        assert_eq!(mesh.element_material().iter().filter(|&&m| m == 1).count(), 8);
        for e in 0..mesh.n_elements() {
            if mesh.element_material()[e] == 1 {
                for &node in mesh.element_nodes(e) {
                    let [x, y] = mesh.coords()[node];
                    assert!(x <= 2.0 / 128.0 + 1e-12 && y >= 1.0 - 2.0 / 128.0 - 1e-12);
                }
            }
        }
        assert!(HeteroMesh::from_pattern(&p, 96, 1, SOFT, STIFF).is_err());
    }

    #[test]
    fn element_areas_cover_unit_square() {
        for order in [1, 2] {
            let mesh = HeteroMesh::grid(6, order, SOFT, STIFF, |_, _| false).unwrap();
            let area: f64 = mesh.quad_weights.iter().sum();
            assert!((area - 1.0).abs() < 1e-14);
            assert!(mesh.quad_weights.iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn affine_fields_are_reproduced() {
        // u = G X gives F = I + G at every quadrature point and exact interpolation
        let g = [0.1, -0.05, 0.2, 0.03];
        for order in [1, 2] {
            let mesh = HeteroMesh::grid(4, order, SOFT, STIFF, |i, j| (i + j) % 3 == 0).unwrap();
            let u: Vec<f64> = mesh
                .coords()
                .iter()
                .flat_map(|&[x, y]| [g[0] * x + g[1] * y, g[2] * x + g[3] * y])
                .collect();
            for e in 0..mesh.n_elements() {
                for q in 0..mesh.quad_points {
                    let f = mesh.grad_at(e, q, &u);
                    assert!((f[0] - 1.1).abs() < 1e-13 && (f[1] + 0.05).abs() < 1e-13);
                    assert!((f[2] - 0.2).abs() < 1e-13 && (f[3] - 1.03).abs() < 1e-13);
                }
            }
            let [ux, uy] = mesh.interpolate(&u, 0.37, 0.81);
            assert!((ux - (0.1 * 0.37 - 0.05 * 0.81)).abs() < 1e-13);
            assert!((uy - (0.2 * 0.37 + 0.03 * 0.81)).abs() < 1e-13);
        }
    }

    #[test]
    fn residual_vanishes_at_rest() {
        let mesh = HeteroMesh::grid(4, 2, SOFT, STIFF, |i, _| i < 2).unwrap();
        let u = vec![0.0; mesh.n_dofs()];
        assert_eq!(mesh.total_energy(&u).unwrap(), 0.0);
        assert!(mesh.residual(&u).unwrap().iter().all(|r| r.abs() < 1e-15));
    }

    #[test]
    fn inversion_is_reported() {
        let mesh = HeteroMesh::grid(2, 1, SOFT, STIFF, |_, _| false).unwrap();
        let u: Vec<f64> = mesh.coords().iter().flat_map(|&[x, _]| [-2.0 * x, 0.0]).collect();
        assert!(matches!(mesh.total_energy(&u), Err(Error::Inversion { element: Some(_), .. })));
        assert!(matches!(mesh.residual(&u), Err(Error::Inversion { .. })));
    }

    #[test]
    fn faces() {
        let mesh = HeteroMesh::grid(3, 2, SOFT, STIFF, |_, _| false).unwrap();
        for n in mesh.face_nodes(Face::Right) {
            assert_eq!(mesh.coords()[n][0], 1.0);
        }
        for n in mesh.face_nodes(Face::Top) {
            assert_eq!(mesh.coords()[n][1], 1.0);
        }
        let boundary = (0..mesh.n_nodes()).filter(|&n| mesh.is_boundary(n)).count();
        assert_eq!(boundary, 4 * 6);
    }
}
