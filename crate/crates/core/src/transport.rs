//! Implicit Euler advection with algebraic flux correction (FEM-FCT, Zalesak limiter).

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::assembly::{
    apply_dirichlet, assemble, assemble_mass, boundary_edges, cell_quadrature, discrete_diffusion, local_advection,
    BoundaryEdge, DirichletForm, OutflowEdge, Stabilization,
};
use crate::error::{Error, Result};
use crate::fespace::{gauss_legendre, DofPartition, FeSpace};
use crate::flow::{boundary_normal_flux, dirichlet_boundary_flux, velocity_at, FlowConfig, FlowSolution};
use crate::geometry::{BoxDomain, MaterialField, Point};
use crate::linalg::{m_matrix_scan, solve, CsrMatrix, LuSolver, MMatrixScan, Method, SolveOptions, DIRECT_LIMIT};
use crate::mesh::QuadMesh;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Limiter {
    Zalesak,
    /// All correction factors 0: the low-order step.
    None,
    /// All correction factors 1.
    Unity,
}

impl Limiter {
    pub fn parse(s: &str) -> Option<Limiter> {
        match s {
            "zalesak" => Some(Limiter::Zalesak),
            "none" => Some(Limiter::None),
            "unity" => Some(Limiter::Unity),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Limiter::Zalesak => "zalesak",
            Limiter::None => "none",
            Limiter::Unity => "unity",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransportConfig {
    pub dt: f64,
    pub t_fin: f64,
    /// Uniform initial concentration.
    pub c0: f64,
    /// Inflow concentration per boundary segment name.
    pub inflow: BTreeMap<String, f64>,
    pub limiter: Limiter,
    /// Output times; each is written at the first step reaching it.
    pub snapshots: Vec<f64>,
}

impl TransportConfig {
    pub fn validate(&self, domain: &BoxDomain) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.dt > 0.0) {
            errs.push(format!("transport dt must be positive, got {}", self.dt));
        }
        if !(self.t_fin >= self.dt) {
            errs.push(format!("transport t_fin ({}) must be at least dt ({})", self.t_fin, self.dt));
        }
        for name in self.inflow.keys() {
            if !domain.segments().iter().any(|s| &s.name == name) {
                errs.push(format!("inflow on unknown boundary segment '{name}'"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigList(errs))
        }
    }

    pub fn num_steps(&self) -> usize {
        (self.t_fin / self.dt - 1e-9).ceil().max(1.0) as usize
    }

    /// Range spanned by the initial and inflow data.
    pub fn data_bounds(&self) -> (f64, f64) {
        self.inflow.values().fold((self.c0, self.c0), |(a, b), &g| (a.min(g), b.max(g)))
    }
}

/// Inflow Dirichlet dofs and their values.
#[derive(Clone, Debug)]
pub struct InflowData {
    pub is_dirichlet: Vec<bool>,
    pub values: Vec<f64>,
}

impl InflowData {
    pub fn from_segments(mesh: &QuadMesh, space: &FeSpace, domain: &BoxDomain, inflow: &BTreeMap<String, f64>) -> Self {
        let part = DofPartition::build(mesh, space, domain);
        let n = space.n_regular();
        let mut is_dirichlet = vec![false; n];
        let mut values = vec![0.0; n];
        for (name, &g) in inflow {
            for &k in part.by_segment.get(name).map(Vec::as_slice).unwrap_or(&[]) {
                is_dirichlet[k] = true;
                values[k] = g;
            }
        }
        InflowData { is_dirichlet, values }
    }

    pub fn none(n: usize) -> Self {
        InflowData { is_dirichlet: vec![false; n], values: vec![0.0; n] }
    }

    fn partition(&self) -> DofPartition {
        let (dirichlet, interior): (Vec<usize>, Vec<usize>) = (0..self.is_dirichlet.len()).partition(|&k| self.is_dirichlet[k]);
        DofPartition { interior, dirichlet, is_dirichlet: self.is_dirichlet.clone(), by_segment: BTreeMap::new() }
    }
}

enum StepSolver {
    Lu(LuSolver),
    Iterative,
}

pub struct TransportOperators {
    /// Consistent porosity-weighted mass.
    pub mass: CsrMatrix,
    pub lumped: Vec<f64>,
    /// Advection operator including the outflow boundary term.
    pub advection: CsrMatrix,
    /// Global discrete diffusion of `advection`.
    pub diffusion: CsrMatrix,
    /// `A + S`.
    pub stabilized: CsrMatrix,
    /// `M_L + Δt (A + S)` before Dirichlet rows.
    pub low_order: CsrMatrix,
    /// `low_order` with identity rows on inflow dofs.
    pub low_order_bc: CsrMatrix,
    pub inflow: InflowData,
    pub dt: f64,
    solver: StepSolver,
}

/// Velocity at the two Gauss points of each outflow edge candidate of cell `c`.
fn outflow_edges(
    mesh: &QuadMesh,
    by_cell: &[Vec<(usize, usize, Point, Option<[f64; 2]>)>],
    c: usize,
    velocity: &(dyn Fn(usize, Point) -> [f64; 2] + Sync),
) -> Vec<OutflowEdge> {
    let (s, _) = gauss_legendre(2);
    let corners = mesh.cell_corners(c);
    by_cell[c]
        .iter()
        .map(|&(a, b, normal, flux)| {
            let (pa, pb) = (corners[a], corners[b]);
            let at = |t: f64| [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
            OutflowEdge {
                a,
                b,
                normal,
                length: (pb[0] - pa[0]).hypot(pb[1] - pa[1]),
                u: [velocity(c, at(s[0])), velocity(c, at(s[1]))],
                flux,
            }
        })
        .collect()
}

impl TransportOperators {
    /// Assembles the operators for a velocity given per cell and physical point.
    pub fn build(
        mesh: &QuadMesh,
        space: &FeSpace,
        field: &MaterialField,
        domain: &BoxDomain,
        velocity: &(dyn Fn(usize, Point) -> [f64; 2] + Sync),
        dt: f64,
        inflow: InflowData,
    ) -> Result<Self> {
        let advection = advection_operator(mesh, space, field, domain, velocity, None)?;
        Self::from_advection(advection, assemble_mass(mesh, space, field), dt, inflow)
    }

    /// Operators for an assembled advection matrix and consistent mass.
    pub fn from_advection(advection: CsrMatrix, mass: CsrMatrix, dt: f64, inflow: InflowData) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("transport dt must be positive, got {dt}")));
        }
        let diffusion = discrete_diffusion(&advection);
        let lumped = mass.row_sums();
        let stabilized = advection.add_scaled(&diffusion, 1.0);
        let low_order = CsrMatrix::diagonal(&lumped).add_scaled(&stabilized, dt);
        let zero = vec![0.0; lumped.len()];
        let (low_order_bc, _) = apply_dirichlet(&low_order, &zero, &inflow.partition(), &inflow.values, DirichletForm::IdentityRows);
        let solver = if low_order_bc.nrows() <= DIRECT_LIMIT {
            StepSolver::Lu(LuSolver::factor(&low_order_bc)?)
        } else {
            StepSolver::Iterative
        };
        Ok(TransportOperators { mass, lumped, advection, diffusion, stabilized, low_order, low_order_bc, inflow, dt, solver })
    }

    /// Operators for the Darcy velocity of a flow solution, with outflow through the
    /// recovered boundary normal flux.
    #[allow(clippy::too_many_arguments)]
    pub fn from_flow(
        mesh: &QuadMesh,
        space: &FeSpace,
        field: &MaterialField,
        domain: &BoxDomain,
        cfg: &FlowConfig,
        sol: &FlowSolution,
        dt: f64,
        inflow: InflowData,
    ) -> Result<Self> {
        let df = dirichlet_boundary_flux(mesh, space, sol)?;
        let flux = boundary_normal_flux(mesh, space, domain, cfg, sol, &df);
        let vel = |c: usize, p: Point| velocity_at(mesh, field, &sol.all, c, p);
        let mut advection = advection_operator(mesh, space, field, domain, &vel, Some(&flux))?;
        if let Some(s) = &sol.stabilization_matrix {
            advection = advection.add_scaled(&graph_upwind(s, &sol.pressure), 1.0);
        }
        advection.set_row_sums(&inflow_row_sums(mesh, space, &sol.edges, &flux));
        Self::from_advection(advection, assemble_mass(mesh, space, field), dt, inflow)
    }

    pub fn n(&self) -> usize {
        self.lumped.len()
    }

    pub fn low_order_scan(&self) -> MMatrixScan {
        m_matrix_scan(&self.low_order_bc, 1e-12)
    }

    fn solve_low(&self, b: &[f64]) -> Result<Vec<f64>> {
        match &self.solver {
            StepSolver::Lu(lu) => lu.solve_with_tol(b, 1e-12),
            StepSolver::Iterative => solve(
                &self.low_order_bc,
                b,
                &SolveOptions { method: Method::BiCgStab, rtol: 1e-12, ..Default::default() },
            ),
        }
    }

    /// Step 1: `[M_L + Δt(A+S)] c^L = M_L c^n` with inflow rows.
    pub fn low_order_step(&self, c_n: &[f64]) -> Result<Vec<f64>> {
        let mut b: Vec<f64> = c_n.iter().zip(&self.lumped).map(|(c, m)| c * m).collect();
        for (i, bi) in b.iter_mut().enumerate() {
            if self.inflow.is_dirichlet[i] {
                *bi = self.inflow.values[i];
            }
        }
        self.solve_low(&b)
    }

    /// Unlumped, unstabilized implicit Euler: `(M + Δt A) c = M c^n` with inflow rows.
    pub fn high_order_step(&self, c_n: &[f64]) -> Result<Vec<f64>> {
        let m = self.mass.add_scaled(&self.advection, self.dt);
        let b = self.mass.mul_vec(c_n);
        let (a, b) = apply_dirichlet(&m, &b, &self.inflow.partition(), &self.inflow.values, DirichletForm::IdentityRows);
        solve(&a, &b, &SolveOptions { method: Method::DirectLu, rtol: 1e-12, ..Default::default() })
    }
}

/// Advection matrix `−∫ N_j u·∇N_i + ∫_{Γout} N_j N_i (u·n)⁺`. The outflow term uses the given
/// endpoint normal fluxes, one pair per edge of `boundary_edges(mesh, domain)`, when present.
pub fn advection_operator(
    mesh: &QuadMesh,
    space: &FeSpace,
    field: &MaterialField,
    domain: &BoxDomain,
    velocity: &(dyn Fn(usize, Point) -> [f64; 2] + Sync),
    boundary_flux: Option<&[[f64; 2]]>,
) -> Result<CsrMatrix> {
    let edges = boundary_edges(mesh, domain);
    if let Some(f) = boundary_flux {
        if f.len() != edges.len() {
            return Err(Error::Config(format!("{} boundary fluxes for {} boundary edges", f.len(), edges.len())));
        }
    }
    let mut by_cell: Vec<Vec<(usize, usize, Point, Option<[f64; 2]>)>> = vec![Vec::new(); mesh.num_cells()];
    for (k, e) in edges.iter().enumerate() {
        by_cell[e.cell].push((e.a, e.b, e.side.normal(), boundary_flux.map(|f| f[k])));
    }
    let assembled = assemble(
        mesh,
        space,
        |c| {
            let q = cell_quadrature(mesh, field, c);
            let u: Vec<[f64; 2]> = q.points.iter().map(|&p| velocity(c, p)).collect();
            local_advection(&q, &u, &outflow_edges(mesh, &by_cell, c, velocity))
        },
        false,
        Stabilization::None,
    );
    Ok(assembled.matrix)
}

/// Row sums `∫_{∂Ω} N_i max(0, −q_n)` of an advection operator whose velocity is exactly
/// conservative, for endpoint normal fluxes `q_n` per boundary edge.
pub fn inflow_row_sums(mesh: &QuadMesh, space: &FeSpace, edges: &[BoundaryEdge], flux: &[[f64; 2]]) -> Vec<f64> {
    let (s, w) = gauss_legendre(2);
    let mut out = vec![0.0; space.n_regular()];
    for (e, &[fa, fb]) in edges.iter().zip(flux) {
        let (pa, pb) = (mesh.node(e.nodes[0]), mesh.node(e.nodes[1]));
        let len = (pb[0] - pa[0]).hypot(pb[1] - pa[1]);
        for g in 0..2 {
            let inflow = (-((1.0 - s[g]) * fa + s[g] * fb)).max(0.0);
            if inflow == 0.0 {
                continue;
            }
            for (n, phi) in [(e.nodes[0], 1.0 - s[g]), (e.nodes[1], s[g])] {
                for &(k, wk) in space.node_weights(n) {
                    out[k] += w[g] * len * inflow * phi * wk;
                }
            }
        }
    }
    out
}

/// Upwind transport of the graph fluxes `φ_ij = −S_ij (p_i − p_j)` of a symmetric
/// zero-row-sum matrix `S` with nonpositive off-diagonals.
pub fn graph_upwind(s: &CsrMatrix, p: &[f64]) -> CsrMatrix {
    let mut trip = Vec::new();
    for i in 0..s.nrows() {
        let (cols, vals) = s.row(i);
        for (&j, &sij) in cols.iter().zip(vals) {
            if j == i {
                continue;
            }
            let phi = -sij * (p[i] - p[j]);
            if phi > 0.0 {
                trip.push((i, i, phi));
                trip.push((j, i, -phi));
            }
        }
    }
    CsrMatrix::from_triplets(s.nrows(), s.ncols(), &trip)
}

/// Antidiffusive fluxes, correction factors and local bounds of one step.
#[derive(Clone, Debug)]
pub struct LimiterState {
    /// Fluxes `F_ij` in the sparsity pattern of the consistent mass (diagonal entries 0).
    pub flux: CsrMatrix,
    /// Correction factors in the same pattern.
    pub alpha: CsrMatrix,
    pub c_min: Vec<f64>,
    pub c_max: Vec<f64>,
}

impl LimiterState {
    pub fn max_antisymmetry_defect(&self) -> f64 {
        let f = &self.flux;
        let mut worst = 0.0f64;
        for i in 0..f.nrows() {
            let (c, v) = f.row(i);
            for (&j, &x) in c.iter().zip(v) {
                worst = worst.max((x + f.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Outcome of one FCT step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub c: Vec<f64>,
    pub c_low: Vec<f64>,
    pub limiter: LimiterState,
}

/// Steps 2 to 4 given `c^n` and `c^L`.
pub fn fct_correct(ops: &TransportOperators, c_n: &[f64], c_low: &[f64], limiter: Limiter) -> StepResult {
    let n = ops.n();
    let dt = ops.dt;
    let kc = ops.stabilized.mul_vec(c_low);
    let cdot: Vec<f64> = (0..n)
        .map(|i| if ops.inflow.is_dirichlet[i] { 0.0 } else { -kc[i] / ops.lumped[i] })
        .collect();
    let m = &ops.mass;
    let s = &ops.diffusion;
    let fvals: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (cols, vals) = m.row(i);
            cols.iter()
                .zip(vals)
                .map(|(&j, &mij)| {
                    if j == i {
                        0.0
                    } else {
                        mij * (cdot[i] - cdot[j]) - s.get(i, j) * (c_low[i] - c_low[j])
                    }
                })
                .collect()
        })
        .collect();
    let flux = CsrMatrix::new(n, n, m.indptr().to_vec(), m.indices().to_vec(), fvals.concat())
        .expect("mass pattern is a valid CSR pattern");
    let (c_min, c_max): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|i| {
            let (cols, _) = m.row(i);
            cols.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &j| {
                (lo.min(c_low[j]).min(c_n[j]), hi.max(c_low[j]).max(c_n[j]))
            })
        })
        .unzip();
    let alpha_vals: Vec<f64> = match limiter {
        Limiter::None => vec![0.0; flux.nnz()],
        Limiter::Unity => vec![1.0; flux.nnz()],
        Limiter::Zalesak => {
            let (rp, rm): (Vec<f64>, Vec<f64>) = (0..n)
                .map(|i| {
                    let (_, v) = flux.row(i);
                    let pp: f64 = v.iter().map(|x| x.max(0.0)).sum();
                    let pm: f64 = v.iter().map(|x| x.min(0.0)).sum();
                    let qp = (c_max[i] - c_low[i]) * ops.lumped[i] / dt;
                    let qm = (c_min[i] - c_low[i]) * ops.lumped[i] / dt;
                    let rp = if pp > 0.0 { (qp / pp).clamp(0.0, 1.0) } else { 1.0 };
                    let rm = if pm < 0.0 { (qm / pm).clamp(0.0, 1.0) } else { 1.0 };
                    (rp, rm)
                })
                .unzip();
            let dir = &ops.inflow.is_dirichlet;
            let mut out = vec![0.0; flux.nnz()];
            for i in 0..n {
                let start = flux.indptr()[i];
                let (cols, vals) = flux.row(i);
                for (off, (&j, &f)) in cols.iter().zip(vals).enumerate() {
                    if dir[i] || dir[j] {
                        continue;
                    }
                    // evaluate on the ordered pair (min, max) so that α is symmetric
                    let (a, b, g) = if i < j { (i, j, f) } else { (j, i, -f) };
                    out[start + off] = if g > 0.0 { rp[a].min(rm[b]) } else { rm[a].min(rp[b]) };
                }
            }
            out
        }
    };
    let alpha = CsrMatrix::new(n, n, flux.indptr().to_vec(), flux.indices().to_vec(), alpha_vals)
        .expect("flux pattern is a valid CSR pattern");
    let mut c: Vec<f64> = (0..n)
        .map(|i| {
            let (_, f) = flux.row(i);
            let (_, a) = alpha.row(i);
            let corr: f64 = f.iter().zip(a).map(|(f, a)| f * a).sum();
            c_low[i] + dt * corr / ops.lumped[i]
        })
        .collect();
    for (i, ci) in c.iter_mut().enumerate() {
        if ops.inflow.is_dirichlet[i] {
            *ci = ops.inflow.values[i];
        }
    }
    StepResult { c, c_low: c_low.to_vec(), limiter: LimiterState { flux, alpha, c_min, c_max } }
}

/// One full FCT step.
pub fn fct_step(ops: &TransportOperators, c_n: &[f64], limiter: Limiter) -> Result<StepResult> {
    let c_low = ops.low_order_step(c_n)?;
    Ok(fct_correct(ops, c_n, &c_low, limiter))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonitorRow {
    pub step: usize,
    pub t: f64,
    pub min: f64,
    pub max: f64,
    /// Total lumped mass `Σ M_L,ii c_i`.
    pub mass: f64,
}

#[derive(Clone, Debug)]
pub struct TransportRun {
    pub monitor: Vec<MonitorRow>,
    /// `(time, concentration over regular dofs)` for every requested snapshot.
    pub snapshots: Vec<(f64, Vec<f64>)>,
    pub final_c: Vec<f64>,
    /// Largest |F_ij + F_ji| seen over all steps.
    pub max_antisymmetry_defect: f64,
}

impl TransportRun {
    pub fn global_min_max(&self) -> (f64, f64) {
        self.monitor
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.min), b.max(r.max)))
    }
}

fn min_max(c: &[f64]) -> (f64, f64) {
    c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
}

/// Time loop from the uniform initial state `cfg.c0`; step 0 records the initial state.
pub fn run_transport(ops: &TransportOperators, cfg: &TransportConfig) -> Result<TransportRun> {
    let n = ops.n();
    let mut c = vec![cfg.c0; n];
    for (i, ci) in c.iter_mut().enumerate() {
        if ops.inflow.is_dirichlet[i] {
            *ci = ops.inflow.values[i];
        }
    }
    let lumped_mass = |c: &[f64]| c.iter().zip(&ops.lumped).map(|(a, b)| a * b).sum::<f64>();
    let (lo, hi) = min_max(&c);
    let mut monitor = vec![MonitorRow { step: 0, t: 0.0, min: lo, max: hi, mass: lumped_mass(&c) }];
    let mut pending: Vec<f64> = cfg.snapshots.clone();
    pending.sort_by(f64::total_cmp);
    pending.dedup();
    let mut snapshots = Vec::new();
    let mut defect = 0.0f64;
    let steps = cfg.num_steps();
    for step in 1..=steps {
        let t = step as f64 * cfg.dt;
        let r = fct_step(ops, &c, cfg.limiter)?;
        defect = defect.max(r.limiter.max_antisymmetry_defect());
        c = r.c;
        let (lo, hi) = min_max(&c);
        monitor.push(MonitorRow { step, t, min: lo, max: hi, mass: lumped_mass(&c) });
        while let Some(&ts) = pending.first() {
            if t >= ts - 1e-9 * cfg.dt || step == steps {
                snapshots.push((t, c.clone()));
                pending.remove(0);
                while pending.first().is_some_and(|&u| t >= u - 1e-9 * cfg.dt) {
                    pending.remove(0);
                }
            } else {
                break;
            }
        }
        log::debug!("transport step {step}/{steps}: t = {t:e}, c in [{lo:e}, {hi:e}]");
    }
    Ok(TransportRun { monitor, snapshots, final_c: c, max_antisymmetry_defect: defect })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BoundarySegment, BoundaryTag, Material, Side};

    fn channel(nx: usize, ny: usize, lx: f64) -> (BoxDomain, MaterialField, QuadMesh, FeSpace) {
        let d = BoxDomain::with_neumann_fill(
            [0.0, 0.0],
            [lx, 1.0],
            vec![BoundarySegment { name: "left".into(), side: Side::Left, range: [0.0, 1.0], tag: BoundaryTag::Dirichlet }],
        )
        .unwrap();
        let f = MaterialField::homogeneous(&d, Material { k: 1.0, phi: 1.0 }).unwrap();
        let m = QuadMesh::build_uniform(&d, nx, ny).unwrap();
        let s = FeSpace::build(&m).unwrap();
        (d, f, m, s)
    }

    fn inflow(m: &QuadMesh, s: &FeSpace, d: &BoxDomain, g: f64) -> InflowData {
        InflowData::from_segments(m, s, d, &[("left".to_string(), g)].into_iter().collect())
    }

    #[test]
    fn zero_velocity_gives_lumped_mass() {
        let (d, f, m, s) = channel(4, 3, 1.0);
        let ops = TransportOperators::build(&m, &s, &f, &d, &|_, _| [0.0, 0.0], 0.1, InflowData::none(s.n_regular())).unwrap();
        assert!(ops.advection.values().iter().all(|v| *v == 0.0));
        assert!(ops.diffusion.values().iter().all(|v| *v == 0.0));
        assert_eq!(ops.low_order.to_dense(), CsrMatrix::diagonal(&ops.lumped).to_dense());
        assert!(ops.lumped.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn operator_invariants() {
        let (d, f, m, s) = channel(6, 4, 1.0);
        let m = m.refine(&[3, 8]).unwrap();
        let s2 = FeSpace::build(&m).unwrap();
        let _ = s;
        let ops = TransportOperators::build(&m, &s2, &f, &d, &|_, p| [1.0 + p[1], 0.3], 0.05, inflow(&m, &s2, &d, 1.0)).unwrap();
        let k = &ops.stabilized;
        assert!(k.max_offdiag() <= 0.0);
        let a1 = ops.advection.row_sums();
        let k1 = k.row_sums();
        for (x, y) in a1.iter().zip(&k1) {
            assert!((x - y).abs() < 1e-13);
        }
        assert!(ops.diffusion.is_symmetric(0.0));
        assert!(ops.low_order_scan().passes());
    }

    #[test]
    fn constant_state_is_preserved() {
        let (d, f, m, s) = channel(8, 4, 1.0);
        let ops = TransportOperators::build(&m, &s, &f, &d, &|_, _| [1.0, 0.0], 0.05, inflow(&m, &s, &d, 0.3)).unwrap();
        let c = vec![0.3; s.n_regular()];
        for lim in [Limiter::Zalesak, Limiter::None, Limiter::Unity] {
            let r = fct_step(&ops, &c, lim).unwrap();
            assert!(r.c.iter().all(|v| (v - 0.3).abs() < 1e-12), "{lim:?}");
        }
    }

    #[test]
    fn zero_data_stays_zero() {
        let (d, f, m, s) = channel(6, 3, 1.0);
        let ops = TransportOperators::build(&m, &s, &f, &d, &|_, _| [1.0, 0.2], 0.05, inflow(&m, &s, &d, 0.0)).unwrap();
        let cfg = TransportConfig { dt: 0.05, t_fin: 0.5, c0: 0.0, inflow: BTreeMap::new(), limiter: Limiter::Zalesak, snapshots: vec![] };
        let run = run_transport(&ops, &cfg).unwrap();
        assert!(run.final_c.iter().all(|&v| v == 0.0));
        assert_eq!(run.monitor.len(), 11);
    }

    #[test]
    fn flux_antisymmetry_and_limiter_modes() {
        let (d, f, m, s) = channel(10, 3, 1.0);
        let ops = TransportOperators::build(&m, &s, &f, &d, &|_, _| [1.0, 0.0], 0.02, inflow(&m, &s, &d, 1.0)).unwrap();
        let mut c = vec![0.0; s.n_regular()];
        for i in 0..c.len() {
            if ops.inflow.is_dirichlet[i] {
                c[i] = 1.0;
            }
        }
        let r = fct_step(&ops, &c, Limiter::Zalesak).unwrap();
        assert_eq!(r.limiter.max_antisymmetry_defect(), 0.0);
        let a = &r.limiter.alpha;
        for i in 0..a.nrows() {
            let (cols, vals) = a.row(i);
            for (&j, &x) in cols.iter().zip(vals) {
                assert!((0.0..=1.0).contains(&x));
                assert_eq!(x, a.get(j, i));
            }
        }
        let low = fct_step(&ops, &c, Limiter::None).unwrap();
        assert_eq!(low.c, low.c_low);
        for i in 0..c.len() {
            assert!(r.c[i] >= r.limiter.c_min[i] - 1e-14 && r.c[i] <= r.limiter.c_max[i] + 1e-14);
        }
    }

    #[test]
    fn unity_step_identity() {
        let (d, f, m, s) = channel(7, 3, 1.0);
        let ops = TransportOperators::build(&m, &s, &f, &d, &|_, p| [1.0, 0.5 * p[0]], 0.03, InflowData::none(s.n_regular())).unwrap();
        let c: Vec<f64> = (0..s.n_regular()).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let r = fct_step(&ops, &c, Limiter::Unity).unwrap();
        let k = &ops.stabilized;
        let cdot: Vec<f64> = k.mul_vec(&r.c_low).iter().zip(&ops.lumped).map(|(v, l)| -v / l).collect();
        let mcd = ops.mass.mul_vec(&cdot);
        let sc = ops.diffusion.mul_vec(&r.c_low);
        for i in 0..c.len() {
            // Σ_j M_ij(ċ_i − ċ_j) = M_L,ii ċ_i − (M ċ)_i ; Σ_j S_ij(c_i − c_j) = −(S c)_i
            let expected = r.c_low[i] + ops.dt / ops.lumped[i] * (ops.lumped[i] * cdot[i] - mcd[i] + sc[i]);
            assert!((r.c[i] - expected).abs() < 1e-12, "{i}");
        }
    }

    #[test]
    fn closed_problem_conserves_lumped_mass() {
        let (d, f, m, s) = channel(8, 8, 1.0);
        // rotational velocity tangent to the walls of the unit square
        let vel = |_: usize, p: Point| {
            let (x, y) = (p[0], p[1]);
            [
                x * x * (1.0 - x) * (1.0 - x) * (2.0 * y - 6.0 * y * y + 4.0 * y * y * y),
                -y * y * (1.0 - y) * (1.0 - y) * (2.0 * x - 6.0 * x * x + 4.0 * x * x * x),
            ]
        };
        let ops = TransportOperators::build(&m, &s, &f, &d, &vel, 0.05, InflowData::none(s.n_regular())).unwrap();
        let mut c: Vec<f64> = s.regular_nodes().iter().map(|&n| if m.node(n)[0] < 0.5 { 1.0 } else { 0.0 }).collect();
        let m0: f64 = c.iter().zip(&ops.lumped).map(|(a, b)| a * b).sum();
        for _ in 0..10 {
            c = fct_step(&ops, &c, Limiter::Zalesak).unwrap().c;
            let mt: f64 = c.iter().zip(&ops.lumped).map(|(a, b)| a * b).sum();
            assert!(((mt - m0) / m0).abs() < 1e-10);
            assert!(c.iter().all(|&v| v >= -1e-12));
        }
    }

    #[test]
    fn step_profile_bounded_while_high_order_undershoots() {
        let (d, f, m, s) = channel(80, 1, 1.0);
        let dt = 0.001;
        let ops = TransportOperators::build(&m, &s, &f, &d, &|_, _| [1.0, 0.0], dt, inflow(&m, &s, &d, 1.0)).unwrap();
        let mut c = vec![0.0; s.n_regular()];
        let mut h = c.clone();
        let mut h_min = 0.0f64;
        for _ in 0..300 {
            c = fct_step(&ops, &c, Limiter::Zalesak).unwrap().c;
            assert!(c.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
            h = ops.high_order_step(&h).unwrap();
            h_min = h_min.min(h.iter().cloned().fold(f64::INFINITY, f64::min));
        }
        assert!(h_min < -1e-3, "high-order minimum {h_min}");
        // the front has moved roughly u t = 0.3 in both
        let front = |v: &[f64]| {
            s.regular_nodes().iter().zip(v).filter(|(_, &c)| c >= 0.5).map(|(&n, _)| m.node(n)[0]).fold(0.0, f64::max)
        };
        assert!((front(&c) - 0.3).abs() < 0.08, "{}", front(&c));
        assert!((front(&h) - 0.3).abs() < 0.08, "{}", front(&h));
    }

    #[test]
    fn snapshots_at_first_step_reaching_time() {
        let (d, f, m, s) = channel(4, 2, 1.0);
        let ops = TransportOperators::build(&m, &s, &f, &d, &|_, _| [1.0, 0.0], 0.025, inflow(&m, &s, &d, 1.0)).unwrap();
        let cfg = TransportConfig {
            dt: 0.025,
            t_fin: 0.5,
            c0: 0.0,
            inflow: BTreeMap::new(),
            limiter: Limiter::Zalesak,
            snapshots: vec![0.01, 0.1, 0.5],
        };
        let run = run_transport(&ops, &cfg).unwrap();
        let times: Vec<f64> = run.snapshots.iter().map(|s| s.0).collect();
        assert_eq!(times.len(), 3);
        assert!((times[0] - 0.025).abs() < 1e-15 && (times[1] - 0.1).abs() < 1e-12 && (times[2] - 0.5).abs() < 1e-12);
        assert_eq!(cfg.num_steps(), 20);
    }
}
