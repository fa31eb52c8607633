//! Steady Darcy flow: pressure solve, velocities and conservative flux recovery on the
//! Dirichlet boundary and on interior interfaces.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::assembly::{
    assemble_diffusion, boundary_edges, dirichlet_boundary_mass, is_dirichlet_edge, neumann_total,
    neumann_value, neumann_rhs, apply_dirichlet, cell_quadrature, local_diffusion, restricted_block,
    BoundaryEdge, DirichletForm, Local, Stabilization,
};
use crate::error::{Error, Result};
use crate::fespace::{inverse_map, physical_grads, shape, DofPartition, FeSpace};
use crate::geometry::{
    clip_halfplane, clip_segment_convex, polygon_area, BoundaryTag, BoxDomain, MaterialField, Point,
};
use crate::linalg::{solve, symmetric_pinv_solve, CsrMatrix, DenseMatrix, LuSolver, Method, SolveOptions, DIRECT_LIMIT};

const PINV_LIMIT: usize = 4000;
use crate::mesh::QuadMesh;

#[derive(Clone, Debug)]
pub struct FlowConfig {
    /// Boundary value per segment name: pressure on Dirichlet segments, outward normal velocity on Neumann ones.
    pub values: BTreeMap<String, f64>,
    pub stabilization: Stabilization,
    pub solver: SolveOptions,
}

impl FlowConfig {
    pub fn new(values: BTreeMap<String, f64>, stabilize: bool) -> Self {
        FlowConfig {
            values,
            stabilization: if stabilize { Stabilization::Elemental } else { Stabilization::None },
            solver: SolveOptions { rtol: 1e-10, symmetric: true, ..Default::default() },
        }
    }

    /// Checks that every Dirichlet segment has a value; Neumann segments default to 0.
    pub fn validate(&self, domain: &BoxDomain) -> Result<()> {
        let mut errs = Vec::new();
        for s in domain.segments() {
            if s.tag == BoundaryTag::Dirichlet && !self.values.contains_key(&s.name) {
                errs.push(format!("Dirichlet segment '{}' has no value", s.name));
            }
        }
        for k in self.values.keys() {
            if !domain.segments().iter().any(|s| &s.name == k) {
                errs.push(format!("boundary value for unknown segment '{k}'"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigList(errs))
        }
    }

    fn value(&self, name: &str) -> f64 {
        self.values.get(name).copied().unwrap_or(0.0)
    }
}

/// Everything the flux post-processing needs from a solve.
#[derive(Clone, Debug)]
pub struct FlowSolution {
    /// Regular-node pressure.
    pub pressure: Vec<f64>,
    /// All-node pressure `P p`.
    pub all: Vec<f64>,
    /// Assembled operator (with stabilization, before Dirichlet treatment).
    pub operator: CsrMatrix,
    /// Neumann load `f_i = −∫ h N_i`.
    pub load: Vec<f64>,
    pub partition: DofPartition,
    pub stabilized: Vec<bool>,
    pub edges: Vec<BoundaryEdge>,
    pub neumann_total: f64,
    pub stabilization: Stabilization,
    /// Discrete diffusion contained in `operator`, if any.
    pub stabilization_matrix: Option<CsrMatrix>,
    /// Dirichlet value per regular dof (0 off the Dirichlet set).
    pub dirichlet_values: Vec<f64>,
}

impl FlowSolution {
    pub fn min_max(&self) -> (f64, f64) {
        self.pressure
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    }

    /// Extremes of the Dirichlet data.
    pub fn dirichlet_bounds(&self) -> (f64, f64) {
        self.partition
            .dirichlet
            .iter()
            .map(|&i| self.dirichlet_values[i])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    }
}

pub struct FlowProblem<'a> {
    pub mesh: &'a QuadMesh,
    pub space: &'a FeSpace,
    pub field: &'a MaterialField,
    pub domain: &'a BoxDomain,
    pub cfg: &'a FlowConfig,
}

pub fn solve_flow(pb: &FlowProblem) -> Result<FlowSolution> {
    pb.cfg.validate(pb.domain)?;
    let partition = DofPartition::build(pb.mesh, pb.space, pb.domain);
    let assembled = assemble_diffusion(pb.mesh, pb.space, pb.field, pb.cfg.stabilization);
    let edges = boundary_edges(pb.mesh, pb.domain);
    let value_of = |n: &str| pb.cfg.value(n);
    let load = neumann_rhs(pb.mesh, pb.space, &partition, pb.domain, &edges, &value_of);
    let ntot = neumann_total(pb.mesh, pb.space, &partition, pb.domain, &edges, &value_of);
    let mut g = vec![0.0; pb.space.n_regular()];
    for &k in &partition.dirichlet {
        let p = pb.mesh.node(pb.space.regular_nodes()[k]);
        g[k] = dirichlet_value_at(pb.domain, pb.cfg, p)?;
    }
    let pressure = if partition.dirichlet.is_empty() {
        return Err(Error::Config("flow problem has no Dirichlet boundary".into()));
    } else {
        let (a, b) = apply_dirichlet(&assembled.matrix, &load, &partition, &g, DirichletForm::Eliminated);
        let direct = matches!(pb.cfg.solver.method, Method::DirectLu)
            || (pb.cfg.solver.method == Method::Auto && a.nrows() <= DIRECT_LIMIT);
        let lu = if direct { Some(LuSolver::factor(&a)?) } else { None };
        let inner = |rhs: &[f64], rtol: f64| match &lu {
            Some(lu) => lu.solve_with_tol(rhs, rtol),
            None => solve(&a, rhs, &SolveOptions { rtol, ..pb.cfg.solver }),
        };
        let mut p = inner(&b, pb.cfg.solver.rtol)?;
        let defect = |p: &[f64]| -> Vec<f64> {
            let ap = assembled.matrix.difference_apply(p);
            (0..p.len()).map(|i| if partition.is_dirichlet[i] { 0.0 } else { load[i] - ap[i] }).collect()
        };
        let mut r = defect(&p);
        let mut rn: f64 = r.iter().map(|v| v.abs()).sum();
        for _ in 0..4 {
            if rn == 0.0 {
                break;
            }
            let dp = match inner(&r, 1e-6) {
                Ok(d) => d,
                Err(e) => {
                    log::debug!("flow refinement stopped: {e}");
                    break;
                }
            };
            let trial: Vec<f64> = p.iter().zip(&dp).map(|(a, d)| a + d).collect();
            let tr = defect(&trial);
            let tn: f64 = tr.iter().map(|v| v.abs()).sum();
            log::debug!("flow refinement: defect {rn:e} -> {tn:e}");
            if tn >= rn {
                break;
            }
            (p, r, rn) = (trial, tr, tn);
        }
        p
    };
    let all = pb.space.prolong(&pressure);
    Ok(FlowSolution {
        pressure,
        all,
        operator: assembled.matrix,
        load,
        partition,
        stabilized: assembled.stabilized,
        edges,
        neumann_total: ntot,
        stabilization: pb.cfg.stabilization,
        stabilization_matrix: assembled.elemental_diffusion.or(assembled.global_diffusion),
        dirichlet_values: g,
    })
}

/// Dirichlet value at a boundary point: the first Dirichlet segment containing it.
fn dirichlet_value_at(domain: &BoxDomain, cfg: &FlowConfig, p: Point) -> Result<f64> {
    let tol = 1e-10 * domain.bbox().diameter();
    for side in domain.sides_containing(p) {
        let t = p[side.tangent_axis()];
        for s in domain.segments() {
            if s.side == side && s.tag == BoundaryTag::Dirichlet && t >= s.range[0] - tol && t <= s.range[1] + tol {
                return Ok(cfg.value(&s.name));
            }
        }
    }
    Err(Error::Invariant(format!("node ({}, {}) is not on a Dirichlet segment", p[0], p[1])))
}

// ===========================================================================
// Velocity
// ===========================================================================

/// Darcy velocity at the assembly quadrature points of every cell.
#[derive(Clone, Debug)]
pub struct VelocityField {
    pub points: Vec<Vec<Point>>,
    pub values: Vec<Vec<[f64; 2]>>,
}

/// `u = −k ∇p_h` at a physical point of cell `c`.
pub fn velocity_at(mesh: &QuadMesh, field: &MaterialField, all: &[f64], c: usize, p: Point) -> [f64; 2] {
    let corners = mesh.cell_corners(c);
    let r = inverse_map(&corners, p);
    let (_, g, _) = physical_grads(&corners, r[0], r[1]);
    let cell = mesh.cell(c);
    let mut grad = [0.0; 2];
    for a in 0..4 {
        grad[0] += all[cell[a]] * g[a][0];
        grad[1] += all[cell[a]] * g[a][1];
    }
    let k = field.material_unchecked(p).k;
    [-k * grad[0], -k * grad[1]]
}

pub fn compute_velocity(mesh: &QuadMesh, field: &MaterialField, sol: &FlowSolution) -> VelocityField {
    let (points, values): (Vec<_>, Vec<_>) = (0..mesh.num_cells())
        .into_par_iter()
        .map(|c| {
            let q = cell_quadrature(mesh, field, c);
            let cell = mesh.cell(c);
            let vals: Vec<[f64; 2]> = (0..q.len())
                .map(|i| {
                    let g = &q.grads[i];
                    let mut grad = [0.0; 2];
                    for a in 0..4 {
                        grad[0] += sol.all[cell[a]] * g[a][0];
                        grad[1] += sol.all[cell[a]] * g[a][1];
                    }
                    let k = field.material_unchecked(q.points[i]).k;
                    [-k * grad[0], -k * grad[1]]
                })
                .collect();
            (q.points, vals)
        })
        .unzip();
    VelocityField { points, values }
}

// ===========================================================================
// Dirichlet boundary flux
// ===========================================================================

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FluxSide {
    Omega1,
    Omega2,
    Dirichlet,
}

impl FluxSide {
    pub fn name(&self) -> &'static str {
        match self {
            FluxSide::Omega1 => "omega1",
            FluxSide::Omega2 => "omega2",
            FluxSide::Dirichlet => "dirichlet",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FluxResult {
    pub id: String,
    pub side: FluxSide,
    /// Regular dofs carrying density coefficients.
    pub nodes: Vec<usize>,
    pub coefficients: Vec<f64>,
    /// Total outward flux of the side through the interface (or of Ω through Γ_D).
    pub total: f64,
    /// Residual of the side collected at Dirichlet dofs of `J_L`, net of the Dirichlet flux.
    /// Not part of `total`, whose test functions vanish on Γ_D.
    pub dirichlet_share: f64,
    /// Violation of the side's flux balance.
    pub balance_residual: f64,
    /// Rows dropped from the interface mass system for negligible support on it.
    pub dropped: usize,
    /// Relative residual of the density system; nonzero when the traces of `J_L` are dependent.
    pub representation_residual: f64,
}

/// Nodal density of the Dirichlet flux, indexed by regular dof (0 off Γ_D).
#[derive(Clone, Debug)]
pub struct DirichletFlux {
    pub result: FluxResult,
    pub density: Vec<f64>,
}

/// Residual `r = A p − f` over all regular dofs.
pub fn residual(sol: &FlowSolution) -> Vec<f64> {
    let ap = sol.operator.difference_apply(&sol.pressure);
    ap.iter().zip(&sol.load).map(|(a, f)| a - f).collect()
}

pub fn dirichlet_boundary_flux(mesh: &QuadMesh, space: &FeSpace, sol: &FlowSolution) -> Result<DirichletFlux> {
    let part = &sol.partition;
    if part.dirichlet.is_empty() {
        return Err(Error::Config("no Dirichlet boundary: flux is undefined".into()));
    }
    let r = residual(sol);
    let b = dirichlet_boundary_mass(mesh, space, part, &sol.edges);
    let nd = part.dirichlet.len();
    let mut local = vec![usize::MAX; space.n_regular()];
    for (k, &i) in part.dirichlet.iter().enumerate() {
        local[i] = k;
    }
    let mut trip = Vec::new();
    for &i in &part.dirichlet {
        let (c, v) = b.row(i);
        for (&j, &x) in c.iter().zip(v) {
            if local[j] != usize::MAX {
                trip.push((local[i], local[j], x));
            }
        }
    }
    let bdd = CsrMatrix::from_triplets(nd, nd, &trip);
    if let Some(k) = (0..nd).find(|&k| bdd.row(k).0.is_empty()) {
        let node = mesh.node(space.regular_nodes()[part.dirichlet[k]]);
        return Err(Error::Config(format!(
            "Dirichlet node ({}, {}) touches no Dirichlet edge; boundary mass is singular",
            node[0], node[1]
        )));
    }
    let rhs: Vec<f64> = part.dirichlet.iter().map(|&i| -r[i]).collect();
    let q = LuSolver::factor(&bdd)?.solve_with_tol(&rhs, 1e-14)?;
    let mut density = vec![0.0; space.n_regular()];
    for (k, &i) in part.dirichlet.iter().enumerate() {
        density[i] = q[k];
    }
    let total: f64 = rhs.iter().sum();
    Ok(DirichletFlux {
        result: FluxResult {
            id: "dirichlet".into(),
            side: FluxSide::Dirichlet,
            nodes: part.dirichlet.clone(),
            coefficients: q,
            total,
            dirichlet_share: 0.0,
            balance_residual: total + sol.neumann_total,
            dropped: 0,
            representation_residual: 0.0,
        },
        density,
    })
}

/// Outward normal flux at the two endpoints of every boundary edge of `sol.edges`: the
/// recovered density on Dirichlet edges and the Neumann datum elsewhere.
pub fn boundary_normal_flux(
    mesh: &QuadMesh,
    space: &FeSpace,
    domain: &BoxDomain,
    cfg: &FlowConfig,
    sol: &FlowSolution,
    df: &DirichletFlux,
) -> Vec<[f64; 2]> {
    let density = space.prolong(&df.density);
    let value_of = |n: &str| cfg.value(n);
    sol.edges
        .iter()
        .map(|e| {
            if is_dirichlet_edge(space, &sol.partition, e) {
                [density[e.nodes[0]], density[e.nodes[1]]]
            } else {
                let h = neumann_value(mesh, domain, e, &value_of);
                [h, h]
            }
        })
        .collect()
}

// ===========================================================================
// Interfaces
// ===========================================================================

#[derive(Clone, Debug)]
pub enum InterfaceKind {
    /// Straight line through the domain from `a` to `b`; Ω₁ lies to its right, Ω₂ to its left.
    Line { a: Point, b: Point },
    /// Boundary between the matrix (Ω₁) and the union of fractures (Ω₂).
    Fractures,
}

#[derive(Clone, Debug)]
pub struct Interface {
    pub id: String,
    pub kind: InterfaceKind,
}

impl Interface {
    pub fn line(id: &str, a: Point, b: Point) -> Self {
        Interface { id: id.into(), kind: InterfaceKind::Line { a, b } }
    }

    pub fn fractures(id: &str) -> Self {
        Interface { id: id.into(), kind: InterfaceKind::Fractures }
    }

    /// Checks that the interface separates the domain into two non-empty parts.
    pub fn validate(&self, domain: &BoxDomain, field: &MaterialField) -> Result<()> {
        match &self.kind {
            InterfaceKind::Line { a, b } => {
                let on = |p: Point| !domain.sides_containing(p).is_empty();
                let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                if len == 0.0 || !on(*a) || !on(*b) {
                    return Err(Error::Config(format!(
                        "interface '{}' must be a non-degenerate segment with both ends on the domain boundary",
                        self.id
                    )));
                }
                let mid = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
                let bb = domain.bbox();
                let tol = 1e-9 * bb.diameter();
                let inner = bb.contains(mid, 0.0)
                    && mid[0] > bb.lo[0] + tol
                    && mid[0] < bb.hi[0] - tol
                    && mid[1] > bb.lo[1] + tol
                    && mid[1] < bb.hi[1] - tol;
                if !inner {
                    return Err(Error::Config(format!(
                        "interface '{}' runs along the boundary and does not separate the domain",
                        self.id
                    )));
                }
                Ok(())
            }
            InterfaceKind::Fractures => {
                if field.fractures().is_empty() {
                    Err(Error::Config(format!("interface '{}' needs at least one fracture", self.id)))
                } else {
                    Ok(())
                }
            }
        }
    }

    fn line_normal(a: Point, b: Point) -> (Point, f64) {
        let n = [-(b[1] - a[1]), b[0] - a[0]];
        (n, n[0] * a[0] + n[1] * a[1])
    }

    /// True when `x` belongs to Ω₁.
    pub fn in_side1(&self, field: &MaterialField, x: Point) -> bool {
        match &self.kind {
            InterfaceKind::Line { a, b } => {
                let (n, c) = Self::line_normal(*a, *b);
                n[0] * x[0] + n[1] * x[1] < c
            }
            InterfaceKind::Fractures => !field.fractures().iter().any(|f| f.contains(x)),
        }
    }

    /// Straight pieces making up the interface inside the domain.
    pub fn segments(&self, domain: &BoxDomain, field: &MaterialField) -> Vec<(Point, Point)> {
        match &self.kind {
            InterfaceKind::Line { a, b } => vec![(*a, *b)],
            InterfaceKind::Fractures => {
                let dom = domain.bbox().corners();
                let fr = field.fractures();
                let mut out = Vec::new();
                for (fi, f) in fr.iter().enumerate() {
                    let c = f.corners();
                    for e in 0..4 {
                        let (p, q) = (c[e], c[(e + 1) % 4]);
                        let Some((t0, t1)) = clip_segment_convex(p, q, &dom) else { continue };
                        // remove the parts covered by other fractures
                        let mut keep = vec![(t0, t1)];
                        for (gi, g) in fr.iter().enumerate() {
                            if gi == fi {
                                continue;
                            }
                            if let Some((s0, s1)) = clip_segment_convex(p, q, &g.corners()) {
                                keep = keep
                                    .into_iter()
                                    .flat_map(|(a0, a1)| {
                                        let mut v = Vec::new();
                                        if s0 > a0 {
                                            v.push((a0, s0.min(a1)));
                                        }
                                        if s1 < a1 {
                                            v.push((s1.max(a0), a1));
                                        }
                                        v.into_iter().filter(|(x, y)| y > x)
                                    })
                                    .collect();
                            }
                        }
                        for (a0, a1) in keep {
                            let at = |t: f64| [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])];
                            if a1 - a0 > 1e-14 {
                                out.push((at(a0), at(a1)));
                            }
                        }
                    }
                }
                out
            }
        }
    }

    /// Partition of the straight edge `p`–`q` into parameter pieces, each tagged with side 1 or not.
    fn edge_pieces(&self, field: &MaterialField, p: Point, q: Point) -> Vec<(f64, f64, bool)> {
        let mut cuts = vec![0.0, 1.0];
        match &self.kind {
            InterfaceKind::Line { a, b } => {
                let (n, c) = Self::line_normal(*a, *b);
                let dp = n[0] * p[0] + n[1] * p[1] - c;
                let dq = n[0] * q[0] + n[1] * q[1] - c;
                if (dp < 0.0 && dq > 0.0) || (dp > 0.0 && dq < 0.0) {
                    cuts.push(dp / (dp - dq));
                }
            }
            InterfaceKind::Fractures => {
                for f in field.fractures() {
                    if let Some((t0, t1)) = clip_segment_convex(p, q, &f.corners()) {
                        cuts.push(t0);
                        cuts.push(t1);
                    }
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        cuts.windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| {
                let m = 0.5 * (w[0] + w[1]);
                let x = [p[0] + m * (q[0] - p[0]), p[1] + m * (q[1] - p[1])];
                (w[0], w[1], self.in_side1(field, x))
            })
            .collect()
    }
}

/// Side-1 split of a cell: local diffusion restricted to `E ∩ Ω₁` and the measure fraction.
struct CellSplit {
    a1: Local,
    frac1: f64,
}

fn split_cell(mesh: &QuadMesh, field: &MaterialField, iface: &Interface, c: usize) -> Option<CellSplit> {
    let corners = mesh.cell_corners(c);
    let bb = mesh.cell_bbox(c);
    let homogeneous = !field.box_is_heterogeneous(&bb);
    let rect = (corners[0][1] - corners[1][1]).abs() <= 1e-14 * bb.diameter()
        && (corners[1][0] - corners[2][0]).abs() <= 1e-14 * bb.diameter();
    if let (InterfaceKind::Line { a, b }, true, true) = (&iface.kind, homogeneous, rect) {
        let (n, cst) = Interface::line_normal(*a, *b);
        let area = polygon_area(&corners);
        let p1 = clip_halfplane(&corners, n, cst);
        let a1 = if p1.len() >= 3 { polygon_area(&p1) } else { 0.0 };
        let tol = 1e-12 * area;
        if a1 <= tol {
            return None.or(Some(CellSplit { a1: [[0.0; 4]; 4], frac1: 0.0 })).filter(|_| false);
        }
        if a1 >= area - tol {
            return None;
        }
        let k = field.material_unchecked(bb.center()).k;
        let mut m = [[0.0; 4]; 4];
        // fan triangulation with the 3-point edge-midpoint rule
        for t in 1..p1.len() - 1 {
            let tri = [p1[0], p1[t], p1[t + 1]];
            let ar = polygon_area(&tri).abs();
            for e in 0..3 {
                let x = [0.5 * (tri[e][0] + tri[(e + 1) % 3][0]), 0.5 * (tri[e][1] + tri[(e + 1) % 3][1])];
                let r = inverse_map(&corners, x);
                let (_, g, _) = physical_grads(&corners, r[0], r[1]);
                let w = k * ar / 3.0;
                for i in 0..4 {
                    for j in 0..4 {
                        m[i][j] += w * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                    }
                }
            }
        }
        return Some(CellSplit { a1: m, frac1: a1 / area });
    }
    let q = cell_quadrature(mesh, field, c);
    let side: Vec<bool> = q.points.iter().map(|&x| iface.in_side1(field, x)).collect();
    let n1 = side.iter().filter(|&&s| s).count();
    if n1 == 0 || n1 == side.len() {
        return None;
    }
    let k: Vec<f64> = q
        .points
        .iter()
        .zip(&side)
        .map(|(&x, &s)| if s { field.material_unchecked(x).k } else { 0.0 })
        .collect();
    let a1 = local_diffusion(&q, &k);
    let w1: f64 = q.weights.iter().zip(&side).filter(|(_, &s)| s).map(|(w, _)| w).sum();
    let wt: f64 = q.weights.iter().sum();
    Some(CellSplit { a1, frac1: w1 / wt })
}

/// Which side a whole (uncut) cell belongs to.
fn cell_in_side1(mesh: &QuadMesh, field: &MaterialField, iface: &Interface, c: usize) -> bool {
    match iface.kind {
        InterfaceKind::Line { .. } => iface.in_side1(field, mesh.cell_bbox(c).center()),
        InterfaceKind::Fractures => {
            let q = cell_quadrature(mesh, field, c);
            q.points.iter().all(|&x| iface.in_side1(field, x))
        }
    }
}

/// Local conservative flux of side `side` through `iface`.
pub fn interface_flux(
    mesh: &QuadMesh,
    space: &FeSpace,
    field: &MaterialField,
    domain: &BoxDomain,
    cfg: &FlowConfig,
    sol: &FlowSolution,
    dflux: &DirichletFlux,
    iface: &Interface,
    side: FluxSide,
) -> Result<FluxResult> {
    iface.validate(domain, field)?;
    let want1 = match side {
        FluxSide::Omega1 => true,
        FluxSide::Omega2 => false,
        FluxSide::Dirichlet => {
            return Err(Error::Config("use dirichlet_boundary_flux for the Dirichlet side".into()))
        }
    };
    let segs = iface.segments(domain, field);
    let total_len: f64 = segs.iter().map(|(a, b)| (b[0] - a[0]).hypot(b[1] - a[1])).sum();
    let lscale = domain.bbox().diameter();
    // cells touched by the interface, with their splits
    let touched: Vec<(usize, Option<CellSplit>, bool)> = (0..mesh.num_cells())
        .into_par_iter()
        .filter_map(|c| {
            let bb = mesh.cell_bbox(c);
            let corners = mesh.cell_corners(c);
            let near = match iface.kind {
                InterfaceKind::Line { .. } => true,
                InterfaceKind::Fractures => field
                    .fractures()
                    .iter()
                    .any(|f| {
                        let fb = f.bbox();
                        bb.lo[0] <= fb.hi[0] && bb.hi[0] >= fb.lo[0] && bb.lo[1] <= fb.hi[1] && bb.hi[1] >= fb.lo[1]
                    }),
            };
            if !near {
                return None;
            }
            let on_l = segs.iter().any(|&(a, b)| {
                clip_segment_convex(a, b, &corners).is_some_and(|(t0, t1)| {
                    (t1 - t0) * (b[0] - a[0]).hypot(b[1] - a[1]) > 1e-12 * lscale
                })
            });
            let split = split_cell(mesh, field, iface, c);
            if split.is_some() || on_l {
                let whole1 = split.is_none() && cell_in_side1(mesh, field, iface, c);
                Some((c, split, whole1))
            } else {
                None
            }
        })
        .collect();
    let mut jl: BTreeSet<usize> = BTreeSet::new();
    for (c, _, _) in &touched {
        jl.extend(space.element(*c).masters.iter().copied());
    }
    if jl.is_empty() {
        return Err(Error::Config(format!("interface '{}' does not meet the mesh", iface.id)));
    }
    // cells in the support of J_L
    let mut support: BTreeSet<usize> = BTreeSet::new();
    let split_of: BTreeMap<usize, &Option<CellSplit>> = touched.iter().map(|(c, s, _)| (*c, s)).collect();
    for c in 0..mesh.num_cells() {
        if space.element(c).masters.iter().any(|m| jl.contains(m)) {
            support.insert(c);
        }
    }
    let stab = sol.stabilization == Stabilization::Elemental;
    let contribs: Vec<(Vec<usize>, Vec<f64>)> = support
        .par_iter()
        .map(|&c| {
            let q = cell_quadrature(mesh, field, c);
            let k: Vec<f64> = q.points.iter().map(|&x| field.material_unchecked(x).k).collect();
            let ah = local_diffusion(&q, &k);
            let cell = mesh.cell(c);
            let ph: Vec<f64> = cell.iter().map(|&n| sol.all[n]).collect();
            let (a_side, frac): (Local, f64) = match split_of.get(&c) {
                Some(Some(sp)) => {
                    if want1 {
                        (sp.a1, sp.frac1)
                    } else {
                        let mut d = ah;
                        for i in 0..4 {
                            for j in 0..4 {
                                d[i][j] -= sp.a1[i][j];
                            }
                        }
                        (d, 1.0 - sp.frac1)
                    }
                }
                _ => {
                    let in1 = cell_in_side1(mesh, field, iface, c);
                    if in1 == want1 {
                        (ah, 1.0)
                    } else {
                        ([[0.0; 4]; 4], 0.0)
                    }
                }
            };
            let er = space.element(c);
            // R_E (A_side p^H)
            let ap: Vec<f64> =
                (0..4).map(|i| (0..4).filter(|&j| j != i).map(|j| a_side[i][j] * (ph[j] - ph[i])).sum()).collect();
            let mut out = er.r.matvec(&ap);
            if stab && frac > 0.0 {
                let blk = restricted_block(space, c, &ah, true, true);
                if let Some(s) = blk.s {
                    let pm: Vec<f64> = er.masters.iter().map(|&m| sol.pressure[m]).collect();
                    let m = pm.len();
                    let sp: Vec<f64> = (0..m)
                        .map(|i| (0..m).filter(|&j| j != i).map(|j| s[(i, j)] * (pm[j] - pm[i])).sum())
                        .collect();
                    for (o, v) in out.iter_mut().zip(sp) {
                        *o += frac * v;
                    }
                }
            }
            (er.masters.clone(), out)
        })
        .collect();
    let mut rho: BTreeMap<usize, f64> = jl.iter().map(|&i| (i, 0.0)).collect();
    for (m, v) in &contribs {
        for (i, x) in m.iter().zip(v) {
            if let Some(r) = rho.get_mut(i) {
                *r -= x;
            }
        }
    }
    // boundary terms: +f_a(N_i) − (N_i, q_D) on the side's boundary pieces; also the side balance
    let (sg, sw) = crate::fespace::gauss_legendre(3);
    let mut boundary_outflow = 0.0;
    for e in &sol.edges {
        let (p, q) = (mesh.node(e.nodes[0]), mesh.node(e.nodes[1]));
        let len = (q[0] - p[0]).hypot(q[1] - p[1]);
        let is_d = is_dirichlet_edge(space, &sol.partition, e);
        let h = if is_d { 0.0 } else { neumann_value(mesh, domain, e, &|n: &str| cfg.value(n)) };
        let (qa, qb) = if is_d {
            (
                dflux.density[space.reg_index(e.nodes[0]).unwrap()],
                dflux.density[space.reg_index(e.nodes[1]).unwrap()],
            )
        } else {
            (0.0, 0.0)
        };
        for (t0, t1, s1) in iface.edge_pieces(field, p, q) {
            if s1 != want1 {
                continue;
            }
            for g in 0..3 {
                let t = t0 + (t1 - t0) * sg[g];
                let w = sw[g] * (t1 - t0) * len;
                let flux = h + qa * (1.0 - t) + qb * t;
                boundary_outflow += w * flux;
                for (n, nv) in [(e.nodes[0], 1.0 - t), (e.nodes[1], t)] {
                    for &(k, wk) in space.node_weights(n) {
                        if let Some(r) = rho.get_mut(&k) {
                            *r -= w * flux * nv * wk;
                        }
                    }
                }
            }
        }
    }
    // test functions vanish on Γ_D; Dirichlet rows only enter the side balance
    let is_d = &sol.partition.is_dirichlet;
    let total: f64 = rho.iter().filter(|(i, _)| !is_d[**i]).map(|(_, v)| v).sum();
    let dirichlet_share: f64 = rho.iter().filter(|(i, _)| is_d[**i]).map(|(_, v)| v).sum();
    // density on the interface
    let mass = interface_mass(mesh, space, &segs);
    let jl_vec: Vec<usize> = jl.iter().copied().filter(|&i| !is_d[i]).collect();
    let mut keep = Vec::new();
    let mut dropped = 0;
    for &i in &jl_vec {
        let row_int: f64 = mass.get(&i).map_or(0.0, |r| r.values().sum());
        if row_int >= 1e-12 * total_len {
            keep.push(i);
        } else {
            dropped += 1;
        }
    }
    let (coefficients, representation_residual) = if keep.is_empty() {
        (Vec::new(), 0.0)
    } else {
        let idx: BTreeMap<usize, usize> = keep.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let mut trip = Vec::new();
        for &i in &keep {
            for (&j, &v) in &mass[&i] {
                if let Some(&jj) = idx.get(&j) {
                    trip.push((idx[&i], jj, v));
                }
            }
        }
        let m = CsrMatrix::from_triplets(keep.len(), keep.len(), &trip);
        let b: Vec<f64> = keep.iter().map(|i| rho[i]).collect();
        let direct = LuSolver::factor(&m).and_then(|lu| lu.solve_with_tol(&b, 1e-10));
        let x = match direct {
            Ok(x) => x,
            Err(_) if keep.len() <= PINV_LIMIT => symmetric_pinv_solve(&m.to_dense(), &b, 1e-12)?,
            Err(_) => ridge_solve(&m, &b, 1e-10, 4)?,
        };
        let mx = m.mul_vec(&x);
        let num = mx.iter().zip(&b).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
        let den = b.iter().map(|c| c * c).sum::<f64>().sqrt();
        (x, if den > 0.0 { num / den } else { num })
    };
    Ok(FluxResult {
        id: iface.id.clone(),
        side,
        nodes: keep,
        coefficients,
        total,
        dirichlet_share,
        balance_residual: total + dirichlet_share + boundary_outflow,
        dropped,
        representation_residual,
    })
}

/// Solves `m x = b` for a symmetric positive semi-definite `m` through `m + eps diag(m)`
/// with a few steps of iterative refinement.
fn ridge_solve(m: &CsrMatrix, b: &[f64], eps: f64, refine: usize) -> Result<Vec<f64>> {
    let d = m.diag();
    let reg = m.add_scaled(&CsrMatrix::diagonal(&d), eps);
    let lu = LuSolver::factor(&reg)?;
    let mut x = lu.solve_with_tol(b, f64::INFINITY)?;
    for _ in 0..refine {
        let mx = m.mul_vec(&x);
        let r: Vec<f64> = b.iter().zip(&mx).map(|(a, c)| a - c).collect();
        let dx = lu.solve_with_tol(&r, f64::INFINITY)?;
        x.iter_mut().zip(dx).for_each(|(a, c)| *a += c);
    }
    Ok(x)
}

/// Interface mass `(N_j, N_i)_L` over regular dofs, as nested sorted maps.
fn interface_mass(mesh: &QuadMesh, space: &FeSpace, segs: &[(Point, Point)]) -> BTreeMap<usize, BTreeMap<usize, f64>> {
    let (sg, sw) = crate::fespace::gauss_legendre(3);
    let mut out: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for c in 0..mesh.num_cells() {
        let corners = mesh.cell_corners(c);
        let er = space.element(c);
        for &(a, b) in segs {
            let Some((t0, t1)) = clip_segment_convex(a, b, &corners) else { continue };
            let len = (b[0] - a[0]).hypot(b[1] - a[1]) * (t1 - t0);
            if len <= 1e-14 * mesh.bbox().diameter() {
                continue;
            }
            // an interface piece on a shared edge is split between the two cells
            let on_edge = (0..4).any(|e| {
                let (p, q) = (corners[e], corners[(e + 1) % 4]);
                let mid = {
                    let t = 0.5 * (t0 + t1);
                    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
                };
                let d = [q[0] - p[0], q[1] - p[1]];
                let l = d[0].hypot(d[1]);
                ((d[0] * (mid[1] - p[1]) - d[1] * (mid[0] - p[0])) / l).abs() <= 1e-12 * l
            });
            let share = if on_edge { 0.5 } else { 1.0 };
            let mut local = DenseMatrix::zeros(4, 4);
            for g in 0..3 {
                let t = t0 + (t1 - t0) * sg[g];
                let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                let r = inverse_map(&corners, x);
                let n = shape(r[0], r[1]);
                for i in 0..4 {
                    for j in 0..4 {
                        local[(i, j)] += share * sw[g] * len * n[i] * n[j];
                    }
                }
            }
            let ml = crate::assembly::restrict_elemental(&local, &er.r);
            for (ii, &i) in er.masters.iter().enumerate() {
                for (jj, &j) in er.masters.iter().enumerate() {
                    *out.entry(i).or_default().entry(j).or_insert(0.0) += ml[(ii, jj)];
                }
            }
        }
    }
    out
}

/// Samples of a flux density along a polyline, by arc length.
#[derive(Clone, Debug)]
pub struct FluxProfile {
    pub s: Vec<f64>,
    pub q: Vec<f64>,
}

impl FluxProfile {
    pub fn value(&self, s: f64) -> f64 {
        let n = self.s.len();
        if n == 0 {
            return 0.0;
        }
        if s <= self.s[0] {
            return self.q[0];
        }
        if s >= self.s[n - 1] {
            return self.q[n - 1];
        }
        let k = self.s.partition_point(|&x| x <= s);
        let (s0, s1) = (self.s[k - 1], self.s[k]);
        let t = (s - s0) / (s1 - s0);
        self.q[k - 1] * (1.0 - t) + self.q[k] * t
    }
}

/// Flux density of a result sampled at `n` equispaced points along the line `a`–`b`.
pub fn flux_profile(mesh: &QuadMesh, space: &FeSpace, res: &FluxResult, a: Point, b: Point, n: usize) -> FluxProfile {
    let mut reg = vec![0.0; space.n_regular()];
    for (&i, &v) in res.nodes.iter().zip(&res.coefficients) {
        reg[i] = v;
    }
    let all = space.prolong(&reg);
    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
    let mut s = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / (n - 1) as f64;
        let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        s.push(t * len);
        q.push(space.evaluate(mesh, &all, x).unwrap_or(0.0));
    }
    FluxProfile { s, q }
}

/// Relative L² error `‖q − q_ref‖ / ‖q_ref‖` over `[0, length]` by trapezoid sampling.
pub fn flux_error(q: &FluxProfile, q_ref: &FluxProfile, length: f64, samples: usize) -> f64 {
    let n = samples.max(1000);
    let h = length / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..=n {
        let s = k as f64 * h;
        let w = if k == 0 || k == n { 0.5 * h } else { h };
        let (a, r) = (q.value(s), q_ref.value(s));
        num += w * (a - r) * (a - r);
        den += w * r * r;
    }
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BoundarySegment, Fracture, Material, MatrixRegion, Side};

    fn seg(name: &str, side: Side, range: [f64; 2], tag: BoundaryTag) -> BoundarySegment {
        BoundarySegment { name: name.into(), side, range, tag }
    }

    fn lr_domain(l: [f64; 2]) -> BoxDomain {
        BoxDomain::with_neumann_fill(
            [0.0, 0.0],
            l,
            vec![
                seg("left", Side::Left, [0.0, l[1]], BoundaryTag::Dirichlet),
                seg("right", Side::Right, [0.0, l[1]], BoundaryTag::Dirichlet),
            ],
        )
        .unwrap()
    }

    struct Setup {
        domain: BoxDomain,
        field: MaterialField,
        mesh: QuadMesh,
        space: FeSpace,
        cfg: FlowConfig,
    }

    fn setup(domain: BoxDomain, field: MaterialField, mesh: QuadMesh, values: &[(&str, f64)], stabilize: bool) -> Setup {
        let space = FeSpace::build(&mesh).unwrap();
        let cfg = FlowConfig::new(values.iter().map(|(k, v)| (k.to_string(), *v)).collect(), stabilize);
        Setup { domain, field, mesh, space, cfg }
    }

    impl Setup {
        fn solve(&self) -> FlowSolution {
            solve_flow(&FlowProblem { mesh: &self.mesh, space: &self.space, field: &self.field, domain: &self.domain, cfg: &self.cfg })
                .unwrap()
        }
    }

    #[test]
    fn linear_pressure_reproduced_and_darcy_flux() {
        let l = [2.0, 1.0];
        let d = lr_domain(l);
        let k = 3.0;
        let fld = MaterialField::homogeneous(&d, Material { k, phi: 1.0 }).unwrap();
        let m = QuadMesh::build_uniform(&d, 8, 4).unwrap();
        let s = setup(d, fld, m, &[("left", 5.0), ("right", 1.0)], true);
        let sol = s.solve();
        for (kk, &n) in s.space.regular_nodes().iter().enumerate() {
            let x = s.mesh.node(n)[0];
            assert!((sol.pressure[kk] - (5.0 - 2.0 * x)).abs() < 1e-12);
        }
        let v = compute_velocity(&s.mesh, &s.field, &sol);
        for cell in &v.values {
            for u in cell {
                assert!((u[0] - k * 4.0 / l[0]).abs() < 1e-11 && u[1].abs() < 1e-11);
            }
        }
        let df = dirichlet_boundary_flux(&s.mesh, &s.space, &sol).unwrap();
        // total outward Dirichlet flux: inflow −kΔp L2/L1 on the left plus the same outflow on the right
        assert!(df.result.total.abs() < 1e-10);
        let left: f64 = sol.edges.iter().filter(|e| e.side == Side::Left).map(|e| {
            let (a, b) = (s.mesh.node(e.nodes[0]), s.mesh.node(e.nodes[1]));
            let len = (b[1] - a[1]).abs();
            let ka = s.space.reg_index(e.nodes[0]).unwrap();
            let kb = s.space.reg_index(e.nodes[1]).unwrap();
            0.5 * len * (df.density[ka] + df.density[kb])
        }).sum();
        assert!((left + k * 4.0 * l[1] / l[0]).abs() < 1e-10);
    }

    #[test]
    fn constant_pressure_gives_zero_flux() {
        let d = lr_domain([1.0, 1.0]);
        let fld = MaterialField::homogeneous(&d, Material { k: 1.0, phi: 1.0 }).unwrap();
        let m = QuadMesh::build_uniform(&d, 4, 4).unwrap().refine(&[5]).unwrap();
        let s = setup(d, fld, m, &[("left", 2.0), ("right", 2.0)], true);
        let sol = s.solve();
        let df = dirichlet_boundary_flux(&s.mesh, &s.space, &sol).unwrap();
        assert!(df.density.iter().all(|v| v.abs() < 1e-12));
        let li = Interface::line("mid", [0.0, 0.37], [1.0, 0.37]);
        let r = interface_flux(&s.mesh, &s.space, &s.field, &s.domain, &s.cfg, &sol, &df, &li, FluxSide::Omega1).unwrap();
        assert!(r.total.abs() < 1e-12);
    }

    #[test]
    fn no_dirichlet_is_config_error() {
        let d = BoxDomain::all_neumann([0.0, 0.0], [1.0, 1.0]).unwrap();
        let fld = MaterialField::homogeneous(&d, Material { k: 1.0, phi: 1.0 }).unwrap();
        let m = QuadMesh::build_uniform(&d, 2, 2).unwrap();
        let s = setup(d, fld, m, &[], true);
        let r = solve_flow(&FlowProblem { mesh: &s.mesh, space: &s.space, field: &s.field, domain: &s.domain, cfg: &s.cfg });
        assert!(matches!(r, Err(Error::Config(_))));
    }

    fn fractured() -> Setup {
        let d = BoxDomain::with_neumann_fill(
            [0.0, 0.0],
            [1.0, 1.0],
            vec![
                seg("out", Side::Right, [0.0, 1.0], BoundaryTag::Dirichlet),
                seg("in", Side::Left, [0.0, 1.0], BoundaryTag::Neumann),
            ],
        )
        .unwrap();
        let fld = MaterialField::new(
            &d,
            vec![MatrixRegion { bbox: d.bbox(), material: Material { k: 1.0, phi: 1.0 } }],
            Material { k: 1e4, phi: 1.0 },
            vec![
                Fracture::from_endpoints([0.0, 0.5], [1.0, 0.5], 1e-2).unwrap(),
                Fracture::from_endpoints([0.5, 0.0], [0.5, 1.0], 1e-2).unwrap(),
            ],
        )
        .unwrap();
        let m = QuadMesh::build_uniform(&d, 8, 8).unwrap().amr_against_fractures(&fld, 3).unwrap();
        setup(d, fld, m, &[("out", 1.0), ("in", -1.0)], true)
    }

    #[test]
    fn global_and_local_conservation() {
        for stab in [true, false] {
            let mut s = fractured();
            s.cfg = FlowConfig::new(s.cfg.values.clone(), stab);
            let sol = s.solve();
            let df = dirichlet_boundary_flux(&s.mesh, &s.space, &sol).unwrap();
            assert!((sol.neumann_total + 1.0).abs() < 1e-12);
            assert!(df.result.balance_residual.abs() < 1e-10 * (1.0 + sol.neumann_total.abs()), "{}", df.result.balance_residual);
            for iface in [
                Interface::line("h", [0.0, 0.7], [1.0, 0.7]),
                Interface::line("cut", [0.0, 0.3011], [1.0, 0.3011]),
                Interface::line("v", [0.613, 1.0], [0.613, 0.0]),
                Interface::fractures("gamma"),
            ] {
                let q1 = interface_flux(&s.mesh, &s.space, &s.field, &s.domain, &s.cfg, &sol, &df, &iface, FluxSide::Omega1).unwrap();
                let q2 = interface_flux(&s.mesh, &s.space, &s.field, &s.domain, &s.cfg, &sol, &df, &iface, FluxSide::Omega2).unwrap();
                let scale = q1.total.abs().max(1.0);
                assert!((q1.total + q2.total).abs() < 1e-10 * scale, "{} {} {}", iface.id, q1.total, q2.total);
                assert!(q1.balance_residual.abs() < 1e-9, "{} {}", iface.id, q1.balance_residual);
                assert!(q2.balance_residual.abs() < 1e-9, "{} {}", iface.id, q2.balance_residual);
            }
        }
    }

    #[test]
    fn pointwise_equilibration_on_mesh_lines() {
        let s = fractured();
        let sol = s.solve();
        let df = dirichlet_boundary_flux(&s.mesh, &s.space, &sol).unwrap();
        let iface = Interface::line("h", [0.0, 0.75], [1.0, 0.75]);
        let q1 = interface_flux(&s.mesh, &s.space, &s.field, &s.domain, &s.cfg, &sol, &df, &iface, FluxSide::Omega1).unwrap();
        let q2 = interface_flux(&s.mesh, &s.space, &s.field, &s.domain, &s.cfg, &sol, &df, &iface, FluxSide::Omega2).unwrap();
        assert_eq!(q1.nodes, q2.nodes);
        let scale = q1.coefficients.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in q1.coefficients.iter().zip(&q2.coefficients) {
            assert!((a + b).abs() < 1e-10 * scale.max(1.0));
        }
    }

    #[test]
    fn flux_error_trivial() {
        let r = FluxProfile { s: vec![0.0, 0.5, 1.0], q: vec![1.0, 2.0, 0.5] };
        assert_eq!(flux_error(&r, &r, 1.0, 1000), 0.0);
        let d = FluxProfile { s: r.s.clone(), q: r.q.iter().map(|v| 2.0 * v).collect() };
        assert!((flux_error(&d, &r, 1.0, 1000) - 1.0).abs() < 1e-12);
    }
}
