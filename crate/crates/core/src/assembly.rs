//! Q1 elemental matrices, restriction to the conforming basis, discrete diffusion
//! operators and global sparse assembly.

use rayon::prelude::*;

use crate::fespace::{ElementQuadrature, FeSpace, DofPartition};
use crate::geometry::{BoundaryTag, BoxDomain, MaterialField, Point, Side};
use crate::linalg::{CsrMatrix, DenseMatrix};
use crate::mesh::QuadMesh;

pub type Local = [[f64; 4]; 4];

/// Gauss order per direction: 4 on cells overlapping a fracture, 2 elsewhere.
pub fn quadrature_order(mesh: &QuadMesh, field: &MaterialField, c: usize) -> usize {
    if field.box_hits_any_fracture(&mesh.cell_bbox(c)) {
        4
    } else {
        2
    }
}

pub fn cell_quadrature(mesh: &QuadMesh, field: &MaterialField, c: usize) -> ElementQuadrature {
    ElementQuadrature::new(&mesh.cell_corners(c), quadrature_order(mesh, field, c))
}

/// `∫ k ∇N_j·∇N_i` with `k` given at the quadrature points.
pub fn local_diffusion(q: &ElementQuadrature, k: &[f64]) -> Local {
    let mut a = [[0.0; 4]; 4];
    for p in 0..q.len() {
        let g = &q.grads[p];
        let w = q.weights[p] * k[p];
        for i in 0..4 {
            for j in i..4 {
                a[i][j] += w * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
            }
        }
    }
    mirror(&mut a);
    for i in 0..4 {
        a[i][i] = -(0..4).filter(|&j| j != i).map(|j| a[i][j]).sum::<f64>();
    }
    a
}

/// Consistent mass `∫ φ N_j N_i`.
pub fn local_mass(q: &ElementQuadrature, phi: &[f64]) -> Local {
    let mut a = [[0.0; 4]; 4];
    for p in 0..q.len() {
        let n = &q.shape[p];
        let w = q.weights[p] * phi[p];
        for i in 0..4 {
            for j in i..4 {
                a[i][j] += w * n[i] * n[j];
            }
        }
    }
    mirror(&mut a);
    a
}

fn mirror(a: &mut Local) {
    for i in 0..4 {
        for j in 0..i {
            a[i][j] = a[j][i];
        }
    }
}

/// Mass matrix of the linear traces on a straight segment.
pub fn local_boundary_mass(a: Point, b: Point) -> [[f64; 2]; 2] {
    let l = (b[0] - a[0]).hypot(b[1] - a[1]);
    [[l / 3.0, l / 6.0], [l / 6.0, l / 3.0]]
}

/// `∫ N_j w·∇N_i` (row `i`, column `j`).
pub fn convection_form(q: &ElementQuadrature, w: &[[f64; 2]]) -> Local {
    let mut a = [[0.0; 4]; 4];
    for p in 0..q.len() {
        let g = &q.grads[p];
        let n = &q.shape[p];
        for i in 0..4 {
            let wg = q.weights[p] * (w[p][0] * g[i][0] + w[p][1] * g[i][1]);
            for j in 0..4 {
                a[i][j] += wg * n[j];
            }
        }
    }
    a
}

/// An element edge on the outflow boundary: local corner indices, outward normal, length and
/// the velocity at the two Gauss points of the edge (ordered from `a` to `b`).
#[derive(Clone, Copy, Debug)]
pub struct OutflowEdge {
    pub a: usize,
    pub b: usize,
    pub normal: Point,
    pub length: f64,
    pub u: [[f64; 2]; 2],
    /// Outward normal flux at `a` and `b`; replaces `u·n` when present.
    pub flux: Option<[f64; 2]>,
}

/// Physical advection form `−∫ N_j u·∇N_i + ∫_{Γout} N_j N_i (u·n)⁺`.
pub fn local_advection(q: &ElementQuadrature, u: &[[f64; 2]], edges: &[OutflowEdge]) -> Local {
    let mut a = convection_form(q, u);
    for row in a.iter_mut() {
        for v in row.iter_mut() {
            *v = -*v;
        }
    }
    let (s, w) = crate::fespace::gauss_legendre(2);
    for e in edges {
        for g in 0..2 {
            let un = match e.flux {
                Some([fa, fb]) => (1.0 - s[g]) * fa + s[g] * fb,
                None => e.u[g][0] * e.normal[0] + e.u[g][1] * e.normal[1],
            }
            .max(0.0);
            if un == 0.0 {
                continue;
            }
            let phi = [(e.a, 1.0 - s[g]), (e.b, s[g])];
            for &(i, ni) in &phi {
                for &(j, nj) in &phi {
                    a[i][j] += w[g] * e.length * un * ni * nj;
                }
            }
        }
    }
    a
}

/// `R_E A R_Eᵀ`.
pub fn restrict_elemental(a_h: &DenseMatrix, r_e: &DenseMatrix) -> DenseMatrix {
    r_e.matmul(a_h).matmul(&r_e.transpose())
}

/// Discrete diffusion of a dense square matrix: `S_ij = −max(0, Q_ij, Q_ji)`, zero row sums.
pub fn discrete_diffusion_dense(q: &DenseMatrix) -> DenseMatrix {
    let n = q.rows;
    assert_eq!(n, q.cols, "discrete diffusion needs a square matrix");
    let mut s = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = -(0.0f64).max(q[(i, j)]).max(q[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| s[(i, j)]).sum();
        s[(i, i)] = -off;
    }
    s
}

/// Discrete diffusion of a sparse matrix with structurally symmetric pattern; the result has
/// the pattern of `q` plus its diagonal.
pub fn discrete_diffusion(q: &CsrMatrix) -> CsrMatrix {
    let n = q.nrows();
    assert_eq!(n, q.ncols(), "discrete diffusion needs a square matrix");
    let mut trip = Vec::with_capacity(q.nnz() + n);
    for i in 0..n {
        let (c, v) = q.row(i);
        let mut diag = 0.0;
        for (&j, &qij) in c.iter().zip(v) {
            if j == i {
                continue;
            }
            let s = -(0.0f64).max(qij).max(q.get(j, i));
            diag -= s;
            trip.push((i, j, s));
        }
        trip.push((i, i, diag));
    }
    CsrMatrix::from_triplets(n, n, &trip)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stabilization {
    None,
    /// Discrete diffusion added per element after restriction, when the element has positive couplings.
    Elemental,
    /// Discrete diffusion of the assembled global matrix.
    Global,
}

#[derive(Clone, Debug)]
pub struct Assembled {
    pub matrix: CsrMatrix,
    /// Per element: whether an elemental discrete diffusion was added.
    pub stabilized: Vec<bool>,
    /// Global discrete diffusion, present for `Stabilization::Global` (already included in `matrix`).
    pub global_diffusion: Option<CsrMatrix>,
    /// Sum of the elemental discrete diffusions, present for `Stabilization::Elemental`
    /// (already included in `matrix`).
    pub elemental_diffusion: Option<CsrMatrix>,
}

/// Restricted elemental block with its masters.
pub struct RestrictedBlock {
    pub masters: Vec<usize>,
    pub a: DenseMatrix,
    pub s: Option<DenseMatrix>,
}

pub fn restricted_block(space: &FeSpace, c: usize, a_h: &Local, symmetric: bool, elemental: bool) -> RestrictedBlock {
    let er = space.element(c);
    let ah = DenseMatrix::from_array4(a_h);
    let mut a = if er.is_identity() { ah } else { restrict_elemental(&ah, &er.r) };
    if symmetric {
        for i in 0..a.rows {
            for j in 0..i {
                a[(i, j)] = a[(j, i)];
            }
        }
    }
    let s = if elemental {
        let n = a.rows;
        let positive = (0..n).any(|i| (0..n).any(|j| i != j && a[(i, j)] > 0.0));
        positive.then(|| discrete_diffusion_dense(&a))
    } else {
        None
    };
    RestrictedBlock { masters: er.masters.clone(), a, s }
}

/// Assembles `Σ_E scatter(R_E A_E R_Eᵀ [+ S_E])` in element order.
pub fn assemble<F>(mesh: &QuadMesh, space: &FeSpace, local: F, symmetric: bool, stab: Stabilization) -> Assembled
where
    F: Fn(usize) -> Local + Sync,
{
    let blocks: Vec<RestrictedBlock> = (0..mesh.num_cells())
        .into_par_iter()
        .map(|c| restricted_block(space, c, &local(c), symmetric, stab == Stabilization::Elemental))
        .collect();
    let n = space.n_regular();
    let mut trip = Vec::with_capacity(blocks.iter().map(|b| b.masters.len().pow(2)).sum());
    let mut s_trip = Vec::new();
    let mut stabilized = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let m = b.masters.len();
        for i in 0..m {
            for j in 0..m {
                let mut v = b.a[(i, j)];
                if let Some(s) = &b.s {
                    v += s[(i, j)];
                    s_trip.push((b.masters[i], b.masters[j], s[(i, j)]));
                }
                trip.push((b.masters[i], b.masters[j], v));
            }
        }
        stabilized.push(b.s.is_some());
    }
    let elemental_diffusion = (stab == Stabilization::Elemental).then(|| CsrMatrix::from_triplets(n, n, &s_trip));
    let mut matrix = CsrMatrix::from_triplets(n, n, &trip);
    let mut global_diffusion = None;
    if stab == Stabilization::Global {
        let s = discrete_diffusion(&matrix);
        matrix = matrix.add_scaled(&s, 1.0);
        global_diffusion = Some(s);
    }
    Assembled { matrix, stabilized, global_diffusion, elemental_diffusion }
}

/// Diffusion operator `∫ k ∇N_j·∇N_i` over the conforming basis.
pub fn assemble_diffusion(mesh: &QuadMesh, space: &FeSpace, field: &MaterialField, stab: Stabilization) -> Assembled {
    let mut out = assemble(
        mesh,
        space,
        |c| {
            let q = cell_quadrature(mesh, field, c);
            let k: Vec<f64> = q.points.iter().map(|&p| field.material_unchecked(p).k).collect();
            local_diffusion(&q, &k)
        },
        true,
        stab,
    );
    out.matrix.zero_row_sum_diagonal();
    out
}

/// Consistent porosity-weighted mass over the conforming basis.
pub fn assemble_mass(mesh: &QuadMesh, space: &FeSpace, field: &MaterialField) -> CsrMatrix {
    assemble(
        mesh,
        space,
        |c| {
            let q = cell_quadrature(mesh, field, c);
            let phi: Vec<f64> = q.points.iter().map(|&p| field.material_unchecked(p).phi).collect();
            local_mass(&q, &phi)
        },
        true,
        Stabilization::None,
    )
    .matrix
}

/// A cell edge lying on the domain boundary.
#[derive(Clone, Debug)]
pub struct BoundaryEdge {
    pub cell: usize,
    pub a: usize,
    pub b: usize,
    pub nodes: [usize; 2],
    pub side: Side,
}

/// All cell edges on the domain boundary, in cell order.
pub fn boundary_edges(mesh: &QuadMesh, domain: &BoxDomain) -> Vec<BoundaryEdge> {
    let mut out = Vec::new();
    for c in 0..mesh.num_cells() {
        let cell = mesh.cell(c);
        for e in 0..4 {
            let (a, b) = (e, (e + 1) % 4);
            let sa = domain.sides_containing(mesh.node(cell[a]));
            let sb = domain.sides_containing(mesh.node(cell[b]));
            if let Some(&side) = sa.iter().find(|s| sb.contains(s)) {
                out.push(BoundaryEdge { cell: c, a, b, nodes: [cell[a], cell[b]], side });
            }
        }
    }
    out
}

/// True when both endpoints are Dirichlet dofs (edge belongs to the discrete Dirichlet boundary).
pub fn is_dirichlet_edge(space: &FeSpace, part: &DofPartition, e: &BoundaryEdge) -> bool {
    e.nodes.iter().all(|&n| space.reg_index(n).is_some_and(|k| part.is_dirichlet[k]))
}

/// Neumann value of a boundary edge (0 when the edge is not on a Neumann segment).
pub fn neumann_value(
    mesh: &QuadMesh,
    domain: &BoxDomain,
    e: &BoundaryEdge,
    value_of: &dyn Fn(&str) -> f64,
) -> f64 {
    match domain.segment_of_edge(mesh.node(e.nodes[0]), mesh.node(e.nodes[1])) {
        Some(s) if s.tag == BoundaryTag::Neumann => value_of(&s.name),
        _ => 0.0,
    }
}

/// Load vector `f_i = −∫_{Γ_N} h N_i` for outward normal velocity data `h`.
pub fn neumann_rhs(
    mesh: &QuadMesh,
    space: &FeSpace,
    part: &DofPartition,
    domain: &BoxDomain,
    edges: &[BoundaryEdge],
    value_of: &dyn Fn(&str) -> f64,
) -> Vec<f64> {
    let mut f = vec![0.0; space.n_regular()];
    for e in edges {
        if is_dirichlet_edge(space, part, e) {
            continue;
        }
        let h = neumann_value(mesh, domain, e, value_of);
        if h == 0.0 {
            continue;
        }
        let (pa, pb) = (mesh.node(e.nodes[0]), mesh.node(e.nodes[1]));
        let l = (pb[0] - pa[0]).hypot(pb[1] - pa[1]);
        for &n in &e.nodes {
            for &(k, w) in space.node_weights(n) {
                f[k] -= w * h * 0.5 * l;
            }
        }
    }
    f
}

/// Total `∫_{Γ_N^h} h`.
pub fn neumann_total(
    mesh: &QuadMesh,
    space: &FeSpace,
    part: &DofPartition,
    domain: &BoxDomain,
    edges: &[BoundaryEdge],
    value_of: &dyn Fn(&str) -> f64,
) -> f64 {
    edges
        .iter()
        .filter(|e| !is_dirichlet_edge(space, part, e))
        .map(|e| {
            let (pa, pb) = (mesh.node(e.nodes[0]), mesh.node(e.nodes[1]));
            neumann_value(mesh, domain, e, value_of) * (pb[0] - pa[0]).hypot(pb[1] - pa[1])
        })
        .sum()
}

/// Boundary mass matrix on the discrete Dirichlet boundary, over regular dofs.
pub fn dirichlet_boundary_mass(mesh: &QuadMesh, space: &FeSpace, part: &DofPartition, edges: &[BoundaryEdge]) -> CsrMatrix {
    let mut trip = Vec::new();
    for e in edges.iter().filter(|e| is_dirichlet_edge(space, part, e)) {
        let b = local_boundary_mass(mesh.node(e.nodes[0]), mesh.node(e.nodes[1]));
        let k = [space.reg_index(e.nodes[0]).unwrap(), space.reg_index(e.nodes[1]).unwrap()];
        for i in 0..2 {
            for j in 0..2 {
                trip.push((k[i], k[j], b[i][j]));
            }
        }
    }
    let n = space.n_regular();
    CsrMatrix::from_triplets(n, n, &trip)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirichletForm {
    /// Dirichlet rows become identity rows, columns kept.
    IdentityRows,
    /// Identity rows plus zeroed Dirichlet columns with the load moved to the right-hand side.
    Eliminated,
}

/// Imposes `x_i = g_i` for Dirichlet dofs; `g` is indexed by regular dof.
pub fn apply_dirichlet(
    a: &CsrMatrix,
    rhs: &[f64],
    part: &DofPartition,
    g: &[f64],
    form: DirichletForm,
) -> (CsrMatrix, Vec<f64>) {
    let n = a.nrows();
    let mut trip = Vec::with_capacity(a.nnz());
    let mut b = rhs.to_vec();
    for i in 0..n {
        if part.is_dirichlet[i] {
            trip.push((i, i, 1.0));
            b[i] = g[i];
            continue;
        }
        let (c, v) = a.row(i);
        for (&j, &x) in c.iter().zip(v) {
            if form == DirichletForm::Eliminated && part.is_dirichlet[j] {
                b[i] -= x * g[j];
            } else {
                trip.push((i, j, x));
            }
        }
    }
    (CsrMatrix::from_triplets(n, n, &trip), b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Fracture, Material, MatrixRegion};
    use crate::linalg::{m_matrix_scan, solve, SolveOptions};
    use crate::fespace::{gauss_legendre, physical_grads};

    fn unit_q(order: usize) -> ElementQuadrature {
        ElementQuadrature::new(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], order)
    }

    fn close(a: &Local, b: &[[f64; 4]; 4], tol: f64) -> bool {
        (0..4).all(|i| (0..4).all(|j| (a[i][j] - b[i][j]).abs() <= tol))
    }

    #[test]
    fn unit_square_diffusion_closed_form() {
        let q = unit_q(2);
        let a = local_diffusion(&q, &[1.0; 4]);
        let (d, s, c) = (2.0 / 3.0, -1.0 / 6.0, -1.0 / 3.0);
        // counterclockwise corners: 0-1 and 1-2 share edges, 0-2 diagonal
        let exp = [[d, s, c, s], [s, d, s, c], [c, s, d, s], [s, c, s, d]];
        assert!(close(&a, &exp, 1e-15));
        let a3 = local_diffusion(&q, &[3.0; 4]);
        assert!(close(&a3, &exp.map(|r| r.map(|v| 3.0 * v)), 1e-14));
        for row in a {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn unit_square_mass_closed_form() {
        let m = local_mass(&unit_q(2), &[1.0; 4]);
        let exp = [[4.0, 2.0, 1.0, 2.0], [2.0, 4.0, 2.0, 1.0], [1.0, 2.0, 4.0, 2.0], [2.0, 1.0, 2.0, 4.0]]
            .map(|r| r.map(|v| v / 36.0));
        assert!(close(&m, &exp, 1e-16));
        let q = ElementQuadrature::new(&[[0.0, 0.0], [2.0, 0.0], [2.0, 3.0], [0.0, 3.0]], 2);
        let m = local_mass(&q, &[0.3; 4]);
        let total: f64 = m.iter().flatten().sum();
        assert!((total - 0.3 * 6.0).abs() < 1e-14);
        let b = local_boundary_mass([0.0, 0.0], [1.0, 0.0]);
        assert_eq!(b, [[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]]);
    }

    #[test]
    fn advection_basics() {
        let q = unit_q(2);
        let zero = local_advection(&q, &[[0.0, 0.0]; 4], &[]);
        assert!(close(&zero, &[[0.0; 4]; 4], 0.0));
        // constant divergence-free velocity on a skewed element: column sums vanish
        let c = [[0.0, 0.0], [1.2, 0.1], [1.1, 0.9], [-0.1, 1.0]];
        let q = ElementQuadrature::new(&c, 2);
        let a = local_advection(&q, &vec![[0.7, -0.3]; q.len()], &[]);
        for j in 0..4 {
            let s: f64 = (0..4).map(|i| a[i][j]).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn cut_element_quadrature_vs_exact() {
        let d = BoxDomain::all_neumann([0.0, 0.0], [1.0, 1.0]).unwrap();
        for (km, kf, delta) in [(1.0, 1e4, 1e-4), (1e-6, 0.1, 0.01)] {
            let frac = Fracture::from_endpoints([0.0, 0.5], [1.0, 0.5], delta).unwrap();
            let fld = MaterialField::new(
                &d,
                vec![MatrixRegion { bbox: d.bbox(), material: Material { k: km, phi: 1.0 } }],
                Material { k: kf, phi: 1.0 },
                vec![frac],
            )
            .unwrap();
            let h = delta;
            let (x0, y0) = (0.3, 0.5 - h);
            let corners = [[x0, y0], [x0 + 2.0 * h, y0], [x0 + 2.0 * h, 0.5 + h], [x0, 0.5 + h]];
            let eval = |order| {
                let q = ElementQuadrature::new(&corners, order);
                let k: Vec<f64> = q.points.iter().map(|&p| fld.material_unchecked(p).k).collect();
                local_diffusion(&q, &k)
            };
            // exact: split at the strip edges, 2-point Gauss is exact on each constant-k band
            let ha = frac.half_aperture;
            let cuts = [y0, 0.5 - ha, 0.5 + ha, 0.5 + h];
            let mut exact = [[0.0; 4]; 4];
            let (gp, gw) = gauss_legendre(2);
            for band in cuts.windows(2) {
                let k = fld.material_unchecked([x0 + h, 0.5 * (band[0] + band[1])]).k;
                for (a, wa) in gp.iter().zip(&gw) {
                    for (b, wb) in gp.iter().zip(&gw) {
                        let y = band[0] + b * (band[1] - band[0]);
                        let (xi, eta) = (*a, (y - y0) / (2.0 * h));
                        let (_, g, det) = physical_grads(&corners, xi, eta);
                        let w = wa * wb * det * (band[1] - band[0]) / (2.0 * h);
                        for i in 0..4 {
                            for j in 0..4 {
                                exact[i][j] += k * w * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                            }
                        }
                    }
                }
            }
            let rel = |a: Local| {
                let num: f64 = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| (a[i][j] - exact[i][j]).powi(2)).sum();
                let den: f64 = exact.iter().flatten().map(|v| v * v).sum();
                (num / den).sqrt()
            };
            let (e2, e4, e64) = (rel(eval(2)), rel(eval(4)), rel(eval(64)));
            // 2x2 points miss the strip entirely; 4x4 sees it
            assert!(e2 > 0.9, "{e2}");
            assert!(e4 < 0.35, "{e4}");
            assert!(e64 < 0.05, "{e64}");
        }
    }

    #[test]
    fn discrete_diffusion_invariants() {
        let q = DenseMatrix::from_rows(&[&[1.0, 0.5, -2.0], &[-0.3, 2.0, 0.4], &[0.2, -1.0, 3.0]]);
        let s = discrete_diffusion_dense(&q);
        for i in 0..3 {
            let row: f64 = (0..3).map(|j| s[(i, j)]).sum();
            let col: f64 = (0..3).map(|j| s[(j, i)]).sum();
            assert!(row.abs() < 1e-15 && col.abs() < 1e-15);
            for j in 0..3 {
                assert_eq!(s[(i, j)], s[(j, i)]);
                if i != j {
                    assert!(s[(i, j)] <= 0.0);
                    assert!(q[(i, j)] + s[(i, j)] <= 0.0);
                }
            }
        }
        let m = DenseMatrix::from_rows(&[&[2.0, -1.0], &[-1.0, 2.0]]);
        assert_eq!(discrete_diffusion_dense(&m), DenseMatrix::zeros(2, 2));
        let sp = discrete_diffusion(&CsrMatrix::from_triplets(
            3,
            3,
            &[(0, 0, 1.0), (0, 1, 0.5), (0, 2, -2.0), (1, 0, -0.3), (1, 1, 2.0), (1, 2, 0.4), (2, 0, 0.2), (2, 1, -1.0), (2, 2, 3.0)],
        ));
        assert!(sp.to_dense().max_abs_diff(&s) < 1e-16);
    }

    fn hanging_setup() -> (QuadMesh, FeSpace, MaterialField) {
        let d = BoxDomain::all_neumann([0.0, 0.0], [1.0, 1.0]).unwrap();
        let m = QuadMesh::build_uniform(&d, 2, 2).unwrap().refine(&[0]).unwrap();
        let s = FeSpace::build(&m).unwrap();
        // the refined quarter carries a high permeability
        let fld = MaterialField::new(
            &d,
            vec![
                MatrixRegion { bbox: d.bbox(), material: Material { k: 1.0, phi: 1.0 } },
                MatrixRegion { bbox: crate::geometry::Aabb::new([0.0, 0.0], [0.5, 0.5]), material: Material { k: 100.0, phi: 1.0 } },
            ],
            Material { k: 1.0, phi: 1.0 },
            vec![],
        )
        .unwrap();
        (m, s, fld)
    }

    #[test]
    fn uniform_diffusion_needs_no_stabilization() {
        let d = BoxDomain::all_neumann([0.0, 0.0], [1.0, 1.0]).unwrap();
        let m = QuadMesh::build_uniform(&d, 2, 2).unwrap();
        let s = FeSpace::build(&m).unwrap();
        let fld = MaterialField::homogeneous(&d, Material { k: 1.0, phi: 1.0 }).unwrap();
        let a = assemble_diffusion(&m, &s, &fld, Stabilization::Elemental);
        assert!(a.matrix.is_symmetric(0.0));
        assert!(a.matrix.max_offdiag() <= 0.0);
        assert!(a.stabilized.iter().all(|&f| !f));
        assert!(a.matrix.row_sums().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn hanging_node_stabilization() {
        let (m, s, fld) = hanging_setup();
        let plain = assemble_diffusion(&m, &s, &fld, Stabilization::None);
        assert!(plain.matrix.count_positive_offdiag() > 0);
        let stab = assemble_diffusion(&m, &s, &fld, Stabilization::Elemental);
        assert_eq!(stab.matrix.count_positive_offdiag(), 0);
        assert!(stab.stabilized.iter().any(|&f| f));
        for a in [&plain.matrix, &stab.matrix] {
            assert!(a.row_sums().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn dirichlet_forms_agree() {
        let (m, s, fld) = hanging_setup();
        let d = BoxDomain::with_neumann_fill(
            [0.0, 0.0],
            [1.0, 1.0],
            vec![
                crate::geometry::BoundarySegment { name: "l".into(), side: Side::Left, range: [0.0, 1.0], tag: BoundaryTag::Dirichlet },
                crate::geometry::BoundarySegment { name: "r".into(), side: Side::Right, range: [0.0, 1.0], tag: BoundaryTag::Dirichlet },
            ],
        )
        .unwrap();
        let part = DofPartition::build(&m, &s, &d);
        let a = assemble_diffusion(&m, &s, &fld, Stabilization::Elemental).matrix;
        let g: Vec<f64> = s.regular_nodes().iter().map(|&n| 1.0 + m.node(n)[0] * 0.3).collect();
        let rhs: Vec<f64> = (0..s.n_regular()).map(|i| 0.01 * i as f64).collect();
        let (a1, b1) = apply_dirichlet(&a, &rhs, &part, &g, DirichletForm::IdentityRows);
        let (a2, b2) = apply_dirichlet(&a, &rhs, &part, &g, DirichletForm::Eliminated);
        for &i in &part.dirichlet {
            let (c, v) = a1.row(i);
            assert_eq!((c, v), (&[i][..], &[1.0][..]));
        }
        let x1 = solve(&a1, &b1, &SolveOptions::default()).unwrap();
        let x2 = solve(&a2, &b2, &SolveOptions::default()).unwrap();
        for i in 0..x1.len() {
            assert!((x1[i] - x2[i]).abs() < 1e-12);
        }
        assert!(m_matrix_scan(&a2, 1e-12).passes());
    }

    #[test]
    fn all_dirichlet_constant_solution() {
        let (m, s, fld) = hanging_setup();
        let d = BoxDomain::with_neumann_fill(
            [0.0, 0.0],
            [1.0, 1.0],
            Side::ALL
                .iter()
                .map(|&side| crate::geometry::BoundarySegment { name: side.name().into(), side, range: [0.0, 1.0], tag: BoundaryTag::Dirichlet })
                .collect(),
        )
        .unwrap();
        let part = DofPartition::build(&m, &s, &d);
        let a = assemble_diffusion(&m, &s, &fld, Stabilization::Elemental).matrix;
        let g = vec![2.5; s.n_regular()];
        let (a1, b1) = apply_dirichlet(&a, &vec![0.0; s.n_regular()], &part, &g, DirichletForm::Eliminated);
        let x = solve(&a1, &b1, &SolveOptions::default()).unwrap();
        assert!(x.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn restriction_preserves_total_sum() {
        let a = DenseMatrix::from_rows(&[
            &[0.3, -0.1, 0.2, 0.05],
            &[0.4, 0.9, -0.7, 0.1],
            &[-0.2, 0.3, 0.6, -0.5],
            &[0.1, 0.0, 0.2, 0.8],
        ]);
        let r = DenseMatrix::from_rows(&[&[0.5, 0.0, 0.0, 0.0], &[0.5, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
        let ar = restrict_elemental(&a, &r);
        let t = |m: &DenseMatrix| m.data.iter().sum::<f64>();
        assert!((t(&ar) - t(&a)).abs() < 1e-14);
        assert_eq!(restrict_elemental(&a, &DenseMatrix::identity(4)), a);
    }
}
