//! Q1 reference element, hanging-node constraints, restriction/prolongation operators
//! and Dirichlet/interior index partitions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{BoundaryTag, BoxDomain, Point};
use crate::linalg::{CsrMatrix, DenseMatrix};
use crate::mesh::QuadMesh;

// ===========================================================================
// Reference element
// ===========================================================================

/// Bilinear shape functions on `[0,1]²`, corners counterclockwise from the origin.
pub fn shape(xi: f64, eta: f64) -> [f64; 4] {
    [(1.0 - xi) * (1.0 - eta), xi * (1.0 - eta), xi * eta, (1.0 - xi) * eta]
}

/// Reference derivatives `[∂ξ, ∂η]` of the four shape functions.
pub fn shape_grad_ref(xi: f64, eta: f64) -> [[f64; 2]; 4] {
    [
        [-(1.0 - eta), -(1.0 - xi)],
        [1.0 - eta, -xi],
        [eta, xi],
        [-eta, 1.0 - xi],
    ]
}

pub fn map_point(c: &[Point; 4], xi: f64, eta: f64) -> Point {
    let n = shape(xi, eta);
    let mut p = [0.0; 2];
    for a in 0..4 {
        p[0] += n[a] * c[a][0];
        p[1] += n[a] * c[a][1];
    }
    p
}

fn jacobian(c: &[Point; 4], xi: f64, eta: f64) -> [[f64; 2]; 2] {
    let g = shape_grad_ref(xi, eta);
    let mut j = [[0.0; 2]; 2];
    for a in 0..4 {
        for d in 0..2 {
            j[d][0] += c[a][d] * g[a][0];
            j[d][1] += c[a][d] * g[a][1];
        }
    }
    j
}

/// Reference coordinates of a physical point (Newton iteration on the bilinear map).
pub fn inverse_map(c: &[Point; 4], p: Point) -> [f64; 2] {
    let mut r = [0.5, 0.5];
    for _ in 0..30 {
        let x = map_point(c, r[0], r[1]);
        let f = [x[0] - p[0], x[1] - p[1]];
        let j = jacobian(c, r[0], r[1]);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let d = [
            (j[1][1] * f[0] - j[0][1] * f[1]) / det,
            (-j[1][0] * f[0] + j[0][0] * f[1]) / det,
        ];
        r[0] -= d[0];
        r[1] -= d[1];
        if d[0].abs() + d[1].abs() < 1e-15 {
            break;
        }
    }
    r
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p1 = z;
                p0 = 1.0;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = 0.5 * (1.0 - z);
        x[n - 1 - i] = 0.5 * (1.0 + z);
        w[i] = 0.5 * wi;
        w[n - 1 - i] = 0.5 * wi;
    }
    if n == 1 {
        x[0] = 0.5;
        w[0] = 1.0;
    }
    (x, w)
}

/// Tensor Gauss rule mapped onto a quad: physical points, weights with `|J|`, shape values and gradients.
#[derive(Clone, Debug)]
pub struct ElementQuadrature {
    pub order: usize,
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    pub shape: Vec<[f64; 4]>,
    pub grads: Vec<[[f64; 2]; 4]>,
}

impl ElementQuadrature {
    pub fn new(c: &[Point; 4], order: usize) -> Self {
        let (x, w) = gauss_legendre(order);
        let m = order * order;
        let mut q = ElementQuadrature {
            order,
            points: Vec::with_capacity(m),
            weights: Vec::with_capacity(m),
            shape: Vec::with_capacity(m),
            grads: Vec::with_capacity(m),
        };
        for (b, &eta) in x.iter().enumerate() {
            for (a, &xi) in x.iter().enumerate() {
                let (p, g, det) = physical_grads(c, xi, eta);
                q.points.push(p);
                q.weights.push(w[a] * w[b] * det);
                q.shape.push(shape(xi, eta));
                q.grads.push(g);
            }
        }
        q
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Physical point, physical shape gradients and Jacobian determinant at a reference point.
pub fn physical_grads(c: &[Point; 4], xi: f64, eta: f64) -> (Point, [[f64; 2]; 4], f64) {
    let j = jacobian(c, xi, eta);
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let gr = shape_grad_ref(xi, eta);
    let mut g = [[0.0; 2]; 4];
    for a in 0..4 {
        // J^{-T} ∇_ref
        g[a][0] = (j[1][1] * gr[a][0] - j[1][0] * gr[a][1]) / det;
        g[a][1] = (-j[0][1] * gr[a][0] + j[0][0] * gr[a][1]) / det;
    }
    (map_point(c, xi, eta), g, det)
}

// ===========================================================================
// Constraints and restriction
// ===========================================================================

/// Elemental restriction `R_E`: rows are the regular masters of the element, columns its 4 corners.
#[derive(Clone, Debug)]
pub struct ElementRestriction {
    pub masters: Vec<usize>,
    pub r: DenseMatrix,
}

impl ElementRestriction {
    pub fn is_identity(&self) -> bool {
        self.r.rows == 4 && self.r == DenseMatrix::identity(4)
    }

    /// True when no corner of the element is hanging, so `R_E` is a permutation.
    pub fn is_conforming(&self) -> bool {
        self.r.rows == 4 && (0..4).all(|a| (0..4).filter(|&i| self.r[(i, a)] == 1.0).count() == 1)
    }
}

/// Conforming Q1 space on a possibly non-conforming mesh.
#[derive(Clone, Debug)]
pub struct FeSpace {
    regular: Vec<usize>,
    reg_index: Vec<Option<usize>>,
    weights: Vec<Vec<(usize, f64)>>,
    elements: Vec<ElementRestriction>,
    r: CsrMatrix,
    p: CsrMatrix,
}

impl FeSpace {
    pub fn build(mesh: &QuadMesh) -> Result<Self> {
        let n = mesh.num_nodes();
        let (regular, _) = mesh.classify_nodes();
        let mut reg_index = vec![None; n];
        for (k, &i) in regular.iter().enumerate() {
            reg_index[i] = Some(k);
        }
        // 0 = unvisited, 1 = in progress, 2 = done
        let mut state = vec![0u8; n];
        let mut weights: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for i in 0..n {
            resolve(mesh, i, &reg_index, &mut state, &mut weights)?;
        }
        let elements = mesh
            .cells()
            .iter()
            .map(|cell| {
                let mut masters: Vec<usize> =
                    cell.iter().flat_map(|&v| weights[v].iter().map(|w| w.0)).collect();
                masters.sort_unstable();
                masters.dedup();
                let mut r = DenseMatrix::zeros(masters.len(), 4);
                for (a, &v) in cell.iter().enumerate() {
                    for &(m, w) in &weights[v] {
                        let row = masters.binary_search(&m).expect("master present");
                        r[(row, a)] = w;
                    }
                }
                ElementRestriction { masters, r }
            })
            .collect();
        let mut trip = Vec::new();
        for (v, ws) in weights.iter().enumerate() {
            for &(m, w) in ws {
                trip.push((m, v, w));
            }
        }
        let r = CsrMatrix::from_triplets(regular.len(), n, &trip);
        let p = r.transpose();
        Ok(FeSpace { regular, reg_index, weights, elements, r, p })
    }

    pub fn n_regular(&self) -> usize {
        self.regular.len()
    }

    pub fn n_all(&self) -> usize {
        self.reg_index.len()
    }

    /// Mesh node id of each regular degree of freedom.
    pub fn regular_nodes(&self) -> &[usize] {
        &self.regular
    }

    pub fn reg_index(&self, node: usize) -> Option<usize> {
        self.reg_index[node]
    }

    /// Resolved `(regular dof, weight)` pairs of a mesh node.
    pub fn node_weights(&self, node: usize) -> &[(usize, f64)] {
        &self.weights[node]
    }

    pub fn element(&self, c: usize) -> &ElementRestriction {
        &self.elements[c]
    }

    pub fn restriction(&self) -> &CsrMatrix {
        &self.r
    }

    pub fn prolongation(&self) -> &CsrMatrix {
        &self.p
    }

    /// All-node coefficients `P v` of a regular coefficient vector.
    pub fn prolong(&self, v: &[f64]) -> Vec<f64> {
        self.p.mul_vec(v)
    }

    /// `R w` for an all-node vector.
    pub fn restrict(&self, w: &[f64]) -> Vec<f64> {
        self.r.mul_vec(w)
    }

    /// Value at `p` of the conforming function with regular coefficients `v`.
    pub fn evaluate(&self, mesh: &QuadMesh, all: &[f64], p: Point) -> Option<f64> {
        let c = mesh.locate(p)?;
        Some(eval_in_cell(mesh, c, all, p))
    }
}

/// Evaluates the Q1 interpolant of all-node values on cell `c` at physical point `p`.
pub fn eval_in_cell(mesh: &QuadMesh, c: usize, all: &[f64], p: Point) -> f64 {
    let corners = mesh.cell_corners(c);
    let r = inverse_map(&corners, p);
    let n = shape(r[0], r[1]);
    mesh.cell(c).iter().zip(n).map(|(&v, s)| all[v] * s).sum()
}

fn resolve(
    mesh: &QuadMesh,
    i: usize,
    reg_index: &[Option<usize>],
    state: &mut [u8],
    weights: &mut [Vec<(usize, f64)>],
) -> Result<()> {
    match state[i] {
        2 => return Ok(()),
        1 => return Err(Error::Invariant(format!("cyclic hanging-node constraint at node {i}"))),
        _ => {}
    }
    state[i] = 1;
    let w = match (reg_index[i], mesh.hanging_parents(i)) {
        (Some(k), _) => vec![(k, 1.0)],
        (None, Some([a, b])) => {
            resolve(mesh, a, reg_index, state, weights)?;
            resolve(mesh, b, reg_index, state, weights)?;
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for &(m, x) in weights[a].iter().chain(weights[b].iter()) {
                *acc.entry(m).or_insert(0.0) += 0.5 * x;
            }
            acc.into_iter().collect()
        }
        (None, None) => {
            return Err(Error::Invariant(format!("node {i} is neither regular nor hanging")))
        }
    };
    weights[i] = w;
    state[i] = 2;
    Ok(())
}

/// `R_E` of cell `c` as a dense `|J^r_E| × 4` matrix.
pub fn elemental_restriction(space: &FeSpace, c: usize) -> DenseMatrix {
    space.element(c).r.clone()
}

// ===========================================================================
// Dirichlet partition
// ===========================================================================

#[derive(Clone, Debug)]
pub struct DofPartition {
    pub interior: Vec<usize>,
    pub dirichlet: Vec<usize>,
    pub is_dirichlet: Vec<bool>,
    /// Regular dofs on the closure of each named boundary segment.
    pub by_segment: BTreeMap<String, Vec<usize>>,
}

impl DofPartition {
    pub fn build(mesh: &QuadMesh, space: &FeSpace, domain: &BoxDomain) -> Self {
        let n = space.n_regular();
        let mut is_dirichlet = vec![false; n];
        let mut by_segment: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let tol = 1e-10 * domain.bbox().diameter();
        for (k, &node) in space.regular_nodes().iter().enumerate() {
            let p = mesh.node(node);
            if domain.point_has_tag(p, BoundaryTag::Dirichlet) {
                is_dirichlet[k] = true;
            }
            for side in domain.sides_containing(p) {
                let t = p[side.tangent_axis()];
                for s in domain.segments().iter().filter(|s| s.side == side) {
                    if t >= s.range[0] - tol && t <= s.range[1] + tol {
                        by_segment.entry(s.name.clone()).or_default().push(k);
                    }
                }
            }
        }
        for v in by_segment.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        let (dirichlet, interior): (Vec<usize>, Vec<usize>) = (0..n).partition(|&k| is_dirichlet[k]);
        DofPartition { interior, dirichlet, is_dirichlet, by_segment }
    }
}
